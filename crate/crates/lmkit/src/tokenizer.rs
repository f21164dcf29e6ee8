//! Byte-level byte-pair encoding: training, encoding, decoding, and the
//! vocabulary file format.
//!
//! The initial vocabulary is all 256 single bytes, so any byte string can be
//! encoded and `decode(encode(s)) == s` holds unconditionally. Training
//! repeatedly merges the most frequent adjacent pair; ties are broken by the
//! lexicographically smallest pair so runs are reproducible. There is no
//! pre-tokenisation: merges may cross whitespace, which is what lets the
//! vocabulary forensics observe whitespace-prefixed near-duplicates.

use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("target size {0} is below the 257 minimum (256 bytes + 1 merge)")]
    TargetTooSmall(usize),
    #[error("training corpus has {0} bytes; at least 2 are required")]
    CorpusTooShort(usize),
    #[error("adjacent pairs exhausted after {reached} tokens; target {target} unreachable")]
    PairsExhausted { reached: usize, target: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("bytes-per-token of an empty token sequence")]
    EmptyTokenSequence,
    #[error("invalid vocabulary file at line {line}: {reason}")]
    InvalidFile { line: usize, reason: String },
}

const BYTE_TOKENS: usize = 256;

/// Ordered token table plus the merge rules that created it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVocabulary {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    /// bytes -> lowest id carrying those bytes. Duplicate-byte tokens decode
    /// fine but are never produced by the encoder.
    canonical: HashMap<Vec<u8>, u32>,
    /// (canonical left id, canonical right id) -> (merge rank, produced id).
    ranks: HashMap<(u32, u32), (u32, u32)>,
}

impl TokenVocabulary {
    /// Trains a vocabulary of exactly `target_size` tokens on a byte stream.
    pub fn train(corpus: &[u8], target_size: usize) -> Result<Self, TokenizerError> {
        if target_size < BYTE_TOKENS + 1 {
            return Err(TokenizerError::TargetTooSmall(target_size));
        }
        if corpus.len() < 2 {
            return Err(TokenizerError::CorpusTooShort(corpus.len()));
        }

        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
        let mut canonical: HashMap<Vec<u8>, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();

        let mut ids: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();
        let mut next: Vec<usize> = (1..=ids.len()).collect();
        let mut prev: Vec<usize> = (0..ids.len()).map(|i| i.wrapping_sub(1)).collect();
        let mut alive = vec![true; ids.len()];
        const NONE: usize = usize::MAX;
        next[ids.len() - 1] = NONE;

        let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut positions: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for i in 0..ids.len() - 1 {
            let pair = (ids[i], ids[i + 1]);
            *counts.entry(pair).or_insert(0) += 1;
            positions.entry(pair).or_default().push(i);
        }

        while tokens.len() < target_size {
            // Highest count wins; ties fall to the lexicographically smallest
            // pair of byte strings.
            let mut best: Option<((u32, u32), i64)> = None;
            for (&pair, &count) in &counts {
                if count <= 0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bp, bc)) => {
                        count > bc
                            || (count == bc
                                && (&tokens[pair.0 as usize], &tokens[pair.1 as usize])
                                    < (&tokens[bp.0 as usize], &tokens[bp.1 as usize]))
                    }
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let Some((pair, _)) = best else {
                return Err(TokenizerError::PairsExhausted {
                    reached: tokens.len(),
                    target: target_size,
                });
            };

            let (a, b) = pair;
            let mut joined = tokens[a as usize].clone();
            joined.extend_from_slice(&tokens[b as usize]);
            let new_id = tokens.len() as u32;
            merges.push((tokens[a as usize].clone(), tokens[b as usize].clone()));
            tokens.push(joined.clone());
            // If a token with these bytes already exists the sequence keeps
            // using the canonical id; the fresh id stays unused.
            let seq_id = *canonical.entry(joined).or_insert(new_id);

            let occ = positions.remove(&pair).unwrap_or_default();
            for p in occ {
                if !alive[p] || ids[p] != a {
                    continue;
                }
                let q = next[p];
                if q == NONE || !alive[q] || ids[q] != b {
                    continue;
                }
                *counts.get_mut(&pair).unwrap() -= 1;
                let l = prev[p];
                if l != NONE {
                    *counts.entry((ids[l], a)).or_insert(0) -= 1;
                    *counts.entry((ids[l], seq_id)).or_insert(0) += 1;
                    positions.entry((ids[l], seq_id)).or_default().push(l);
                }
                let r = next[q];
                if r != NONE {
                    *counts.entry((b, ids[r])).or_insert(0) -= 1;
                    *counts.entry((seq_id, ids[r])).or_insert(0) += 1;
                    positions.entry((seq_id, ids[r])).or_default().push(p);
                }
                alive[q] = false;
                ids[p] = seq_id;
                next[p] = r;
                if r != NONE {
                    prev[r] = p;
                }
            }
            counts.remove(&pair);
        }

        Ok(Self::assemble(tokens, merges))
    }

    /// Rebuilds a vocabulary purely from its ordered merge list.
    pub fn from_merges(merges: Vec<(Vec<u8>, Vec<u8>)>) -> Result<Self, TokenizerError> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        for (left, right) in &merges {
            let mut joined = left.clone();
            joined.extend_from_slice(right);
            tokens.push(joined);
        }
        Ok(Self::assemble(tokens, merges))
    }

    fn assemble(tokens: Vec<Vec<u8>>, merges: Vec<(Vec<u8>, Vec<u8>)>) -> Self {
        let mut canonical: HashMap<Vec<u8>, u32> = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            canonical.entry(t.clone()).or_insert(i as u32);
        }
        let mut ranks: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
        for (rank, (left, right)) in merges.iter().enumerate() {
            let (Some(&l), Some(&r)) = (canonical.get(left), canonical.get(right)) else {
                continue;
            };
            let mut joined = left.clone();
            joined.extend_from_slice(right);
            let out = canonical[&joined];
            ranks.entry((l, r)).or_insert((rank as u32, out));
        }
        TokenVocabulary {
            tokens,
            merges,
            canonical,
            ranks,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    /// Applies the merge rules in recorded order (lowest rank first, leftmost
    /// occurrence first). Bytes never seen in training fall back to their
    /// single-byte tokens.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        if text.is_empty() {
            return Vec::new();
        }
        let mut ids: Vec<u32> = text.iter().map(|&b| b as u32).collect();
        if ids.len() == 1 {
            return ids;
        }
        const NONE: usize = usize::MAX;
        let mut next: Vec<usize> = (1..=ids.len()).collect();
        let mut prev: Vec<usize> = (0..ids.len()).map(|i| i.wrapping_sub(1)).collect();
        let n = ids.len();
        next[n - 1] = NONE;
        let mut alive = vec![true; n];

        // Min-heap on (rank, position): lowest-rank rule first, leftmost
        // occurrence first, which reproduces sequential rule application.
        let mut heap: BinaryHeap<std::cmp::Reverse<(u32, usize)>> = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&(rank, _)) = self.ranks.get(&(ids[i], ids[i + 1])) {
                heap.push(std::cmp::Reverse((rank, i)));
            }
        }
        while let Some(std::cmp::Reverse((rank, p))) = heap.pop() {
            if !alive[p] {
                continue;
            }
            let q = next[p];
            if q == NONE || !alive[q] {
                continue;
            }
            let Some(&(cur_rank, out)) = self.ranks.get(&(ids[p], ids[q])) else {
                continue;
            };
            if cur_rank != rank {
                continue;
            }
            alive[q] = false;
            ids[p] = out;
            let r = next[q];
            next[p] = r;
            if r != NONE {
                prev[r] = p;
            }
            let l = prev[p];
            if l != NONE {
                if let Some(&(nr, _)) = self.ranks.get(&(ids[l], ids[p])) {
                    heap.push(std::cmp::Reverse((nr, l)));
                }
            }
            if r != NONE {
                if let Some(&(nr, _)) = self.ranks.get(&(ids[p], ids[r])) {
                    heap.push(std::cmp::Reverse((nr, p)));
                }
            }
        }
        let mut out = Vec::new();
        let mut i = 0usize;
        while i != NONE && i < n {
            if alive[i] {
                out.push(ids[i]);
            }
            i = next.get(i).copied().unwrap_or(NONE);
            if i == NONE {
                break;
            }
        }
        out
    }

    /// Concatenation of token byte strings.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self
                .token_bytes(id)
                .ok_or(TokenizerError::IdOutOfRange {
                    id,
                    size: self.size(),
                })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Decoded byte length divided by token count.
    pub fn bytes_per_token(&self, ids: &[u32]) -> Result<f64, TokenizerError> {
        if ids.is_empty() {
            return Err(TokenizerError::EmptyTokenSequence);
        }
        let bytes = self.decode(ids)?;
        Ok(bytes.len() as f64 / ids.len() as f64)
    }

    // ----- file format ------------------------------------------------------

    /// Renders the vocabulary file: one `id<TAB>hex-bytes` record per line,
    /// then a `#MERGES` section of `hex-left<TAB>hex-right` pairs in creation
    /// order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\n", hex(t)));
        }
        out.push_str("#MERGES\n");
        for (l, r) in &self.merges {
            out.push_str(&format!("{}\t{}\n", hex(l), hex(r)));
        }
        out
    }

    pub fn from_file_str(s: &str) -> Result<Self, TokenizerError> {
        let mut tokens: Vec<Vec<u8>> = Vec::new();
        let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
        let mut in_merges = false;
        for (lineno, line) in s.lines().enumerate() {
            let line_num = lineno + 1;
            if line.is_empty() {
                continue;
            }
            if line == "#MERGES" {
                in_merges = true;
                continue;
            }
            let bad = |reason: &str| TokenizerError::InvalidFile {
                line: line_num,
                reason: reason.to_string(),
            };
            let (a, b) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            if in_merges {
                merges.push((
                    unhex(a).ok_or_else(|| bad("bad hex in merge"))?,
                    unhex(b).ok_or_else(|| bad("bad hex in merge"))?,
                ));
            } else {
                let id: usize = a.parse().map_err(|_| bad("bad token id"))?;
                if id != tokens.len() {
                    return Err(bad(&format!("ids must be dense; expected {}", tokens.len())));
                }
                tokens.push(unhex(b).ok_or_else(|| bad("bad hex in token"))?);
            }
        }
        if tokens.len() < BYTE_TOKENS {
            return Err(TokenizerError::InvalidFile {
                line: 0,
                reason: format!("only {} tokens; 256 byte tokens required", tokens.len()),
            });
        }
        for b in 0..BYTE_TOKENS {
            if tokens[b] != [b as u8] {
                return Err(TokenizerError::InvalidFile {
                    line: b + 1,
                    reason: format!("token {b} is not the single byte 0x{b:02x}"),
                });
            }
        }
        if tokens.len() != BYTE_TOKENS + merges.len() {
            return Err(TokenizerError::InvalidFile {
                line: 0,
                reason: format!(
                    "{} tokens but {} merges; expected 256 + merges",
                    tokens.len(),
                    merges.len()
                ),
            });
        }
        for (i, (l, r)) in merges.iter().enumerate() {
            let mut joined = l.clone();
            joined.extend_from_slice(r);
            if tokens[BYTE_TOKENS + i] != joined {
                return Err(TokenizerError::InvalidFile {
                    line: 0,
                    reason: format!("merge {i} does not reproduce token {}", BYTE_TOKENS + i),
                });
            }
        }
        Ok(Self::assemble(tokens, merges))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_file_string())
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let s = std::fs::read_to_string(path)?;
        Self::from_file_str(&s).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// SHA-256 of the serialised vocabulary; corpora and checkpoints carry it
    /// so mismatched tokenisations are rejected early.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.to_file_string().as_bytes());
        h.finalize().into()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}
