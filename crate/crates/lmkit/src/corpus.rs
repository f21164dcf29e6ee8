//! Tokenised corpus storage: ingestion filters, named splits, a compact
//! binary file format, and deterministic batch iteration.
//!
//! Documents are concatenated into one token stream with a reserved
//! separator id (one past the tokenizer vocabulary) after each document, so
//! models can observe boundaries. Batch iteration has two modes: train mode
//! carves the stream into `batch_size` contiguous lanes and strides by the
//! sequence length; eval mode slides fixed windows by a configurable stride
//! and pads the final partial batch with masked dummy windows so every
//! claimed prediction is a real one.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tokenizer::{TokenVocabulary, TokenizerError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("all {total} documents were filtered out ({too_short} too short, {low_bpt} low bytes/token, {empty} empty)")]
    AllDocumentsFiltered {
        total: usize,
        too_short: usize,
        low_bpt: usize,
        empty: usize,
    },
    #[error("split needs {requested} test documents but corpus has only {have}")]
    InsufficientDocuments { have: usize, requested: usize },
    #[error("invalid batch plan: {0}")]
    InvalidPlan(String),
    #[error("token stream of {len} tokens is too short; need more than {needed}")]
    StreamTooShort { len: usize, needed: usize },
    #[error("corpus file is invalid: {0}")]
    InvalidFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExclusionReason {
    /// Below the minimum byte size ("shorter than roughly 50 KB" class).
    TooShort { bytes: usize, min: usize },
    /// Below the minimum average bytes per token.
    LowBytesPerToken { bpt: f64, min: f64 },
    Empty,
}

/// One excluded document and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub name: String,
    pub reason: ExclusionReason,
}

/// Contiguous token stream with a document-offset index.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    ids: Vec<u32>,
    /// Start of each document; every document ends with one separator token,
    /// so document k spans `offsets[k] .. offsets[k+1] - 1`.
    doc_offsets: Vec<usize>,
    vocab_hash: [u8; 32],
    /// Id space of the stream: tokenizer vocabulary plus the separator.
    vocab_size: usize,
    separator: Option<u32>,
    split: String,
}

impl TokenCorpus {
    /// Tokenises and filters raw documents. A document is excluded when it is
    /// empty, shorter than `min_bytes`, or averages fewer than `min_bpt`
    /// bytes per token; exclusions are logged per document.
    pub fn ingest(
        documents: &[(String, Vec<u8>)],
        vocab: &TokenVocabulary,
        min_bytes: usize,
        min_bpt: f64,
        split: &str,
    ) -> Result<(TokenCorpus, Vec<Exclusion>), CorpusError> {
        let separator = vocab.size() as u32;
        let mut ids = Vec::new();
        let mut doc_offsets = Vec::new();
        let mut exclusions = Vec::new();
        let (mut too_short, mut low_bpt, mut empty) = (0usize, 0usize, 0usize);
        for (name, bytes) in documents {
            if bytes.is_empty() {
                empty += 1;
                exclusions.push(Exclusion {
                    name: name.clone(),
                    reason: ExclusionReason::Empty,
                });
                continue;
            }
            if bytes.len() < min_bytes {
                too_short += 1;
                exclusions.push(Exclusion {
                    name: name.clone(),
                    reason: ExclusionReason::TooShort {
                        bytes: bytes.len(),
                        min: min_bytes,
                    },
                });
                continue;
            }
            let tokens = vocab.encode(bytes);
            let bpt = bytes.len() as f64 / tokens.len() as f64;
            if bpt < min_bpt {
                low_bpt += 1;
                exclusions.push(Exclusion {
                    name: name.clone(),
                    reason: ExclusionReason::LowBytesPerToken { bpt, min: min_bpt },
                });
                continue;
            }
            doc_offsets.push(ids.len());
            ids.extend_from_slice(&tokens);
            ids.push(separator);
        }
        if doc_offsets.is_empty() {
            return Err(CorpusError::AllDocumentsFiltered {
                total: documents.len(),
                too_short,
                low_bpt,
                empty,
            });
        }
        Ok((
            TokenCorpus {
                ids,
                doc_offsets,
                vocab_hash: vocab.hash(),
                vocab_size: vocab.size() + 1,
                separator: Some(separator),
                split: split.to_string(),
            },
            exclusions,
        ))
    }

    /// Wraps a raw id stream as a single-document corpus (synthetic data).
    pub fn from_ids(ids: Vec<u32>, vocab_size: usize, split: &str) -> TokenCorpus {
        TokenCorpus {
            doc_offsets: vec![0],
            ids,
            vocab_hash: [0; 32],
            vocab_size,
            separator: None,
            split: split.to_string(),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn vocab_hash(&self) -> [u8; 32] {
        self.vocab_hash
    }

    pub fn separator(&self) -> Option<u32> {
        self.separator
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn num_documents(&self) -> usize {
        self.doc_offsets.len()
    }

    /// Token slice of document `k`, excluding its trailing separator.
    pub fn document(&self, k: usize) -> &[u32] {
        let start = self.doc_offsets[k];
        let end = self
            .doc_offsets
            .get(k + 1)
            .copied()
            .unwrap_or(self.ids.len());
        let end = if self.separator.is_some() { end - 1 } else { end };
        &self.ids[start..end]
    }

    /// Deterministically samples `test_docs` documents into a test corpus,
    /// leaving the rest as train. Document sets are disjoint.
    pub fn make_splits(
        &self,
        test_docs: usize,
        seed: u64,
    ) -> Result<(TokenCorpus, TokenCorpus), CorpusError> {
        let n = self.num_documents();
        if n <= test_docs {
            return Err(CorpusError::InsufficientDocuments {
                have: n,
                requested: test_docs,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = rand::seq::index::sample(&mut rng, n, test_docs).into_vec();
        picks.sort_unstable();
        let in_test = {
            let mut mask = vec![false; n];
            for &p in &picks {
                mask[p] = true;
            }
            mask
        };
        let rebuild = |keep_test: bool, split: &str| {
            let mut ids = Vec::new();
            let mut doc_offsets = Vec::new();
            for k in 0..n {
                if in_test[k] == keep_test {
                    doc_offsets.push(ids.len());
                    ids.extend_from_slice(self.document(k));
                    if let Some(sep) = self.separator {
                        ids.push(sep);
                    }
                }
            }
            TokenCorpus {
                ids,
                doc_offsets,
                vocab_hash: self.vocab_hash,
                vocab_size: self.vocab_size,
                separator: self.separator,
                split: split.to_string(),
            }
        };
        Ok((rebuild(false, "train"), rebuild(true, "test")))
    }

    /// Renames the split label (for pre-curated split directories).
    pub fn with_split_name(mut self, split: &str) -> TokenCorpus {
        self.split = split.to_string();
        self
    }

    // ----- binary file format ----------------------------------------------

    /// Magic, version, vocab hash, token width (2 bytes when the id space
    /// fits in 65,536, else 4), little-endian ids, then a footer with the
    /// document offsets.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"LMKC")?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&self.vocab_hash)?;
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        w.write_all(&self.separator.map_or(u32::MAX, |s| s).to_le_bytes())?;
        let width: u8 = if self.vocab_size <= 65_536 { 2 } else { 4 };
        w.write_all(&[width])?;
        let name = self.split.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        match width {
            2 => {
                for &id in &self.ids {
                    w.write_all(&(id as u16).to_le_bytes())?;
                }
            }
            _ => {
                for &id in &self.ids {
                    w.write_all(&id.to_le_bytes())?;
                }
            }
        }
        w.write_all(&(self.doc_offsets.len() as u64).to_le_bytes())?;
        for &off in &self.doc_offsets {
            w.write_all(&(off as u64).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TokenCorpus, CorpusError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8], CorpusError> {
            if *cur + n > buf.len() {
                return Err(CorpusError::InvalidFile("truncated".to_string()));
            }
            let s = &buf[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 4)? != b"LMKC" {
            return Err(CorpusError::InvalidFile("bad magic".to_string()));
        }
        let version = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap());
        if version != 1 {
            return Err(CorpusError::InvalidFile(format!(
                "unsupported version {version}"
            )));
        }
        let mut vocab_hash = [0u8; 32];
        vocab_hash.copy_from_slice(take(&mut cur, 32)?);
        let vocab_size = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let sep_raw = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        let separator = if sep_raw == u32::MAX { None } else { Some(sep_raw) };
        let width = take(&mut cur, 1)?[0];
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let split = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| CorpusError::InvalidFile("split name not UTF-8".to_string()))?;
        let n_tokens = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let mut ids = Vec::with_capacity(n_tokens);
        match width {
            2 => {
                let raw = take(&mut cur, n_tokens * 2)?;
                for c in raw.chunks_exact(2) {
                    ids.push(u16::from_le_bytes(c.try_into().unwrap()) as u32);
                }
            }
            4 => {
                let raw = take(&mut cur, n_tokens * 4)?;
                for c in raw.chunks_exact(4) {
                    ids.push(u32::from_le_bytes(c.try_into().unwrap()));
                }
            }
            other => {
                return Err(CorpusError::InvalidFile(format!(
                    "unsupported token width {other}"
                )))
            }
        }
        let n_docs = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let mut doc_offsets = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            let off = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            if off > ids.len() || doc_offsets.last().is_some_and(|&p| off <= p) {
                return Err(CorpusError::InvalidFile(
                    "document offsets not strictly increasing within stream".to_string(),
                ));
            }
            doc_offsets.push(off);
        }
        for &id in &ids {
            if id as usize >= vocab_size {
                return Err(CorpusError::InvalidFile(format!(
                    "token id {id} exceeds vocab size {vocab_size}"
                )));
            }
        }
        Ok(TokenCorpus {
            ids,
            doc_offsets,
            vocab_hash,
            vocab_size,
            separator,
            split,
        })
    }
}

/// How a training or evaluation step consumes the stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Window stride in eval mode (train mode always strides by `seq_len`).
    pub stride: usize,
    pub grad_accum: usize,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seq_len: usize) -> BatchPlan {
        BatchPlan {
            batch_size,
            seq_len,
            stride: seq_len,
            grad_accum: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> BatchPlan {
        self.stride = stride;
        self
    }

    pub fn with_grad_accum(mut self, grad_accum: usize) -> BatchPlan {
        self.grad_accum = grad_accum;
        self
    }

    /// Tokens consumed per optimisation step:
    /// batch size x sequence length x gradient-accumulation steps.
    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len * self.grad_accum
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.batch_size == 0 || self.seq_len == 0 || self.grad_accum == 0 {
            return Err(CorpusError::InvalidPlan(format!(
                "batch {}, seq {}, accum {} must all be positive",
                self.batch_size, self.seq_len, self.grad_accum
            )));
        }
        if self.stride == 0 || self.stride > self.seq_len {
            return Err(CorpusError::InvalidPlan(format!(
                "stride {} must lie in (0, seq_len {}]",
                self.stride, self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterMode {
    Train,
    Eval,
}

/// One step's worth of next-token pairs: `targets[t] == inputs[t+1]` in the
/// underlying stream, with `mask` marking which target positions are real.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Deterministic batch iterator over a corpus.
pub struct BatchIter<'a> {
    corpus: &'a TokenCorpus,
    plan: BatchPlan,
    mode: IterMode,
    /// Train: windows per lane. Eval: full windows over the stream.
    windows: usize,
    /// Train: token length of one lane.
    lane_len: usize,
    cursor: usize,
}

impl TokenCorpus {
    /// Train mode: the stream is split into `batch_size` contiguous lanes
    /// covering a prefix of the stream; each batch stacks one
    /// `seq_len`-window from every lane and strides by `seq_len`. Partial
    /// trailing windows are dropped.
    ///
    /// Eval mode: windows slide over the whole stream by `plan.stride`; the
    /// final partial batch is padded with masked dummy windows.
    pub fn iterate_batches(
        &self,
        plan: BatchPlan,
        mode: IterMode,
    ) -> Result<BatchIter<'_>, CorpusError> {
        plan.validate()?;
        if self.ids.len() <= plan.seq_len {
            return Err(CorpusError::StreamTooShort {
                len: self.ids.len(),
                needed: plan.seq_len,
            });
        }
        let (windows, lane_len) = match mode {
            IterMode::Train => {
                let lane_len = self.ids.len() / plan.batch_size;
                if lane_len <= plan.seq_len {
                    return Err(CorpusError::StreamTooShort {
                        len: self.ids.len(),
                        needed: plan.seq_len * plan.batch_size,
                    });
                }
                ((lane_len - 1) / plan.seq_len, lane_len)
            }
            IterMode::Eval => (eval_window_count(self.ids.len(), &plan), 0),
        };
        Ok(BatchIter {
            corpus: self,
            plan,
            mode,
            windows,
            lane_len,
            cursor: 0,
        })
    }
}

/// Number of full eval windows: starts at multiples of the stride with
/// `seq_len + 1` tokens available (inputs plus shifted targets).
pub fn eval_window_count(stream_len: usize, plan: &BatchPlan) -> usize {
    if stream_len < plan.seq_len + 1 {
        return 0;
    }
    (stream_len - plan.seq_len - 1) / plan.stride + 1
}

impl BatchIter<'_> {
    /// Total batches this iterator will yield.
    pub fn num_batches(&self) -> usize {
        match self.mode {
            IterMode::Train => self.windows,
            IterMode::Eval => self.windows.div_ceil(self.plan.batch_size),
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let (b, s) = (self.plan.batch_size, self.plan.seq_len);
        match self.mode {
            IterMode::Train => {
                if self.cursor >= self.windows {
                    return None;
                }
                let w = self.cursor;
                self.cursor += 1;
                let mut inputs = Vec::with_capacity(b * s);
                let mut targets = Vec::with_capacity(b * s);
                for lane in 0..b {
                    let base = lane * self.lane_len + w * s;
                    inputs.extend_from_slice(&self.corpus.ids[base..base + s]);
                    targets.extend_from_slice(&self.corpus.ids[base + 1..base + s + 1]);
                }
                Some(Batch {
                    inputs,
                    targets,
                    mask: vec![true; b * s],
                    batch_size: b,
                    seq_len: s,
                })
            }
            IterMode::Eval => {
                if self.cursor >= self.windows {
                    return None;
                }
                let mut inputs = vec![0u32; b * s];
                let mut targets = vec![0u32; b * s];
                let mut mask = vec![false; b * s];
                for lane in 0..b {
                    let w = self.cursor + lane;
                    if w >= self.windows {
                        break;
                    }
                    let base = w * self.plan.stride;
                    inputs[lane * s..(lane + 1) * s]
                        .copy_from_slice(&self.corpus.ids[base..base + s]);
                    targets[lane * s..(lane + 1) * s]
                        .copy_from_slice(&self.corpus.ids[base + 1..base + s + 1]);
                    mask[lane * s..(lane + 1) * s].fill(true);
                }
                self.cursor += b;
                Some(Batch {
                    inputs,
                    targets,
                    mask,
                    batch_size: b,
                    seq_len: s,
                })
            }
        }
    }
}

/// Runs a batch iterator on a producer thread with a bounded queue, keeping
/// handoff order. The corpus is immutable, so one producer feeding one
/// consumer is safe.
pub fn prefetch_batches(
    corpus: &TokenCorpus,
    plan: BatchPlan,
    mode: IterMode,
    depth: usize,
) -> Result<std::sync::mpsc::IntoIter<Batch>, CorpusError> {
    let iter = corpus.iterate_batches(plan, mode)?;
    let batches: Vec<Batch> = iter.collect();
    let (tx, rx) = std::sync::mpsc::sync_channel(depth.max(1));
    std::thread::spawn(move || {
        for batch in batches {
            if tx.send(batch).is_err() {
                break;
            }
        }
    });
    Ok(rx.into_iter())
}
