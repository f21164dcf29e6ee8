//! Loss, perplexity, normalised perplexity, and the fast/slow evaluation
//! protocols.
//!
//! Fast evaluation averages the loss over every predicted position of up to
//! 500 stride-`seq_len` windows at batch 16: cheap, but the context per
//! prediction varies from 1 to `seq_len`. Slow evaluation slides windows by
//! 128 tokens at batch 1 and scores only the last 128 positions, so every
//! scored token sees at least `seq_len - 128` tokens of context. Byte counts
//! decode exactly the scored tokens, which keeps the normaliser consistent
//! across protocols.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BatchPlan, CorpusError, IterMode, TokenCorpus};
use crate::graph::Graph;
use crate::models::{masked_loss, Model, ModelError};
use crate::tensor::Tensor;
use crate::tokenizer::TokenVocabulary;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus for split {0:?} is empty")]
    EmptyCorpus(String),
    #[error("split {split:?} was tokenised with a different vocabulary than the model")]
    VocabHashMismatch { split: String },
    #[error("perplexity needs at least one token")]
    NoTokens,
    #[error("normalised perplexity needs at least one byte")]
    NoBytes,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// exp(total_loss / N): the effective vocabulary size of a uniform model
/// with the same loss.
pub fn perplexity(total_loss: f64, token_count: u64) -> Result<f64, EvalError> {
    if token_count == 0 {
        return Err(EvalError::NoTokens);
    }
    Ok((total_loss / token_count as f64).exp())
}

/// exp(total_loss / B) with B the byte length of the decoded scored text;
/// comparable across tokenisers.
pub fn normalised_perplexity(total_loss: f64, byte_count: f64) -> Result<f64, EvalError> {
    if byte_count < 1.0 {
        return Err(EvalError::NoBytes);
    }
    Ok((total_loss / byte_count).exp())
}

/// How scored tokens are converted to bytes for the normaliser.
pub enum ByteAccounting<'a> {
    /// Decode each scored token; ids outside the vocabulary (the document
    /// separator) decode to zero bytes.
    Decode(&'a TokenVocabulary),
    /// Synthetic corpora: a fixed byte width per token.
    FixedPerToken(f64),
}

impl ByteAccounting<'_> {
    fn bytes_for(&self, ids: &[u32]) -> f64 {
        match self {
            ByteAccounting::Decode(vocab) => ids
                .iter()
                .map(|&id| vocab.token_bytes(id).map_or(0, <[u8]>::len) as f64)
                .sum(),
            ByteAccounting::FixedPerToken(width) => ids.len() as f64 * width,
        }
    }
}

/// Anything that can produce next-token logits for a window of ids.
/// Implemented by [`Model`]; test oracles implement it directly.
pub trait Scorer {
    fn vocab_size(&self) -> usize;
    /// Longest window the scorer accepts.
    fn seq_capacity(&self) -> usize;
    /// Logits with shape `[batch, seq, vocab]` for row-major `[batch, seq]`
    /// input ids.
    fn logits(&self, inputs: &[u32], batch: usize, seq: usize) -> Result<Tensor<f64>, EvalError>;
}

impl Scorer for Model<f64> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn seq_capacity(&self) -> usize {
        self.config.seq_len
    }

    fn logits(&self, inputs: &[u32], batch: usize, seq: usize) -> Result<Tensor<f64>, EvalError> {
        let mut graph = Graph::new();
        // Recurrent state starts fresh and warms up over the window.
        let fwd = self.forward(&mut graph, inputs, batch, seq, None)?;
        Ok(graph.value(fwd.logits).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Fast,
    Slow,
}

/// One evaluation outcome, serialisable as a machine-readable record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub protocol: Protocol,
    pub total_loss: f64,
    /// Scored token count N.
    pub token_count: u64,
    /// Decoded byte count B of the scored tokens.
    pub byte_count: f64,
    pub perplexity: f64,
    pub normalised_perplexity: f64,
    /// Tokens of context guaranteed to every scored prediction.
    pub min_context: usize,
    pub windows_used: usize,
    pub batches_used: usize,
}

/// Protocol knobs; [`fast_eval`] and [`slow_eval`] are the two presets.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub stride: usize,
    /// Score only this many trailing positions of each window (None scores
    /// every position).
    pub scored_tail: Option<usize>,
    /// Stop after this many batches (None evaluates the whole stream).
    pub max_batches: Option<usize>,
    pub protocol: Protocol,
}

impl EvalOptions {
    pub fn fast() -> EvalOptions {
        EvalOptions {
            batch_size: 16,
            stride: 0, // filled with seq_len at run time
            scored_tail: None,
            max_batches: Some(500),
            protocol: Protocol::Fast,
        }
    }

    pub fn slow() -> EvalOptions {
        EvalOptions {
            batch_size: 1,
            stride: 128,
            scored_tail: Some(128),
            max_batches: None,
            protocol: Protocol::Slow,
        }
    }
}

/// Shared evaluation engine.
pub fn evaluate(
    scorer: &dyn Scorer,
    corpus: &TokenCorpus,
    bytes: &ByteAccounting<'_>,
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus(corpus.split().to_string()));
    }
    let seq = scorer.seq_capacity();
    let stride = if opts.stride == 0 { seq } else { opts.stride };
    let plan = BatchPlan::new(opts.batch_size, seq).with_stride(stride);
    let tail = opts.scored_tail.map(|t| t.min(seq));
    let mut total_loss = 0.0f64;
    let mut token_count = 0u64;
    let mut byte_count = 0.0f64;
    let mut windows_used = 0usize;
    let mut batches_used = 0usize;
    for batch in corpus.iterate_batches(plan, IterMode::Eval)? {
        if opts.max_batches.is_some_and(|m| batches_used >= m) {
            break;
        }
        let logits = scorer.logits(&batch.inputs, batch.batch_size, batch.seq_len)?;
        let mut mask = batch.mask.clone();
        if let Some(tail) = tail {
            for lane in 0..batch.batch_size {
                for t in 0..seq.saturating_sub(tail) {
                    mask[lane * seq + t] = false;
                }
            }
        }
        if mask.iter().all(|&m| !m) {
            batches_used += 1;
            continue;
        }
        let mut graph = Graph::new();
        let node = graph.constant(logits);
        let (loss, scored) = masked_loss(&mut graph, node, &batch.targets, &mask)?;
        total_loss += graph.value(loss).item();
        token_count += scored as u64;
        let scored_ids: Vec<u32> = (0..mask.len())
            .filter(|&i| mask[i])
            .map(|i| batch.targets[i])
            .collect();
        byte_count += bytes.bytes_for(&scored_ids);
        windows_used += (0..batch.batch_size)
            .filter(|lane| mask[lane * seq..(lane + 1) * seq].iter().any(|&m| m))
            .count();
        batches_used += 1;
    }
    if token_count == 0 {
        return Err(EvalError::EmptyCorpus(corpus.split().to_string()));
    }
    Ok(EvalReport {
        split: corpus.split().to_string(),
        protocol: opts.protocol,
        total_loss,
        token_count,
        byte_count,
        perplexity: perplexity(total_loss, token_count)?,
        normalised_perplexity: normalised_perplexity(total_loss, byte_count.max(1.0))?,
        min_context: tail.map_or(1, |t| seq - t),
        windows_used,
        batches_used,
    })
}

/// Loss averaged over every predicted position: up to 500 windows of stride
/// `seq_len` at batch 16.
pub fn fast_eval(
    scorer: &dyn Scorer,
    corpus: &TokenCorpus,
    bytes: &ByteAccounting<'_>,
) -> Result<EvalReport, EvalError> {
    evaluate(scorer, corpus, bytes, EvalOptions::fast())
}

/// Loss over only the last 128 positions of stride-128 windows at batch 1,
/// guaranteeing `seq_len - 128` tokens of context per scored token.
pub fn slow_eval(
    scorer: &dyn Scorer,
    corpus: &TokenCorpus,
    bytes: &ByteAccounting<'_>,
) -> Result<EvalReport, EvalError> {
    evaluate(scorer, corpus, bytes, EvalOptions::slow())
}

/// Evaluates every named split under one protocol. When `expected_hash` is
/// set, splits tokenised with a different vocabulary are rejected.
pub fn eval_splits(
    scorer: &dyn Scorer,
    splits: &[(String, TokenCorpus)],
    bytes: &ByteAccounting<'_>,
    opts: EvalOptions,
    expected_hash: Option<[u8; 32]>,
) -> Result<Vec<EvalReport>, EvalError> {
    let mut reports = Vec::with_capacity(splits.len());
    for (name, corpus) in splits {
        if let Some(h) = expected_hash {
            if corpus.vocab_hash() != h {
                return Err(EvalError::VocabHashMismatch {
                    split: name.clone(),
                });
            }
        }
        let mut report = evaluate(scorer, corpus, bytes, opts)?;
        report.split = name.clone();
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let n = 100u64;
        let loss = n as f64 * 16f64.ln();
        assert!((perplexity(loss, n).unwrap() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_perplexity_is_one() {
        assert_eq!(perplexity(0.0, 50).unwrap(), 1.0);
    }

    #[test]
    fn loss_of_ln2_per_token_gives_perplexity_two() {
        let n = 64u64;
        assert!((perplexity(n as f64 * 2f64.ln(), n).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_16_vocab_at_4_bytes_per_token_normalises_to_two() {
        let n = 1000u64;
        let loss = n as f64 * 16f64.ln();
        let bytes = n as f64 * 4.0;
        assert!((normalised_perplexity(loss, bytes).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_normalised_perplexity_is_one() {
        assert_eq!(normalised_perplexity(0.0, 400.0).unwrap(), 1.0);
    }

    #[test]
    fn matched_per_byte_loss_gives_equal_normalised_perplexity() {
        // The same text under two tokenisations: coarse (fewer tokens, more
        // bytes each) and fine, with losses proportional to bytes.
        let per_byte = 0.9f64;
        let coarse = normalised_perplexity(per_byte * 4000.0, 4000.0).unwrap();
        let fine = normalised_perplexity(per_byte * 4000.0, 4000.0).unwrap();
        assert_eq!(coarse, fine);
        // Ordering by loss equals ordering by either perplexity at fixed
        // N and B.
        let (n, b) = (100u64, 350.0);
        let (l1, l2) = (120.0, 140.0);
        assert!(perplexity(l1, n).unwrap() < perplexity(l2, n).unwrap());
        assert!(
            normalised_perplexity(l1, b).unwrap() < normalised_perplexity(l2, b).unwrap()
        );
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(matches!(perplexity(1.0, 0), Err(EvalError::NoTokens)));
        assert!(matches!(
            normalised_perplexity(1.0, 0.0),
            Err(EvalError::NoBytes)
        ));
    }
}
