//! Forensics over a trained vocabulary and a tokenised corpus: exact
//! duplicates, near-duplicates under normalisation, Zipf structure,
//! cross-vocabulary overlap, and per-subset frequency stability.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::tokenizer::TokenVocabulary;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("zipf fit needs at least {required} distinct tokens with nonzero count, got {got}")]
    TooFewRanks { got: usize, required: usize },
    #[error("frequency table {index} is empty")]
    EmptySubset { index: usize },
    #[error("frequency stability needs at least 2 subsets, got {0}")]
    TooFewSubsets(usize),
}

/// Per-token occurrence counts over a corpus, with a rank order.
#[derive(Debug, Clone)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    total: u64,
}

impl FrequencyTable {
    /// Counts every id in `ids` against a vocabulary of `vocab_size` tokens.
    pub fn from_ids(ids: &[u32], vocab_size: usize) -> Self {
        let mut counts = vec![0u64; vocab_size];
        for &id in ids {
            counts[id as usize] += 1;
        }
        FrequencyTable {
            counts,
            total: ids.len() as u64,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        FrequencyTable { counts, total }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Token ids ordered by descending count (ties by ascending id).
    pub fn ranking(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.counts.len() as u32).collect();
        ids.sort_by(|&a, &b| {
            self.counts[b as usize]
                .cmp(&self.counts[a as usize])
                .then(a.cmp(&b))
        });
        ids
    }

    /// Counts sorted descending, zero tail dropped.
    pub fn sorted_nonzero(&self) -> Vec<u64> {
        let mut c: Vec<u64> = self.counts.iter().copied().filter(|&x| x > 0).collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        c
    }
}

/// Groups of token ids whose decoded byte strings are identical. Every group
/// has at least two members and the groups are disjoint by construction.
pub fn find_exact_duplicates(vocab: &TokenVocabulary) -> Vec<Vec<u32>> {
    let mut by_bytes: HashMap<&[u8], Vec<u32>> = HashMap::new();
    for (id, bytes) in vocab.tokens().iter().enumerate() {
        by_bytes.entry(bytes.as_slice()).or_default().push(id as u32);
    }
    let mut groups: Vec<Vec<u32>> = by_bytes
        .into_values()
        .filter(|g| g.len() >= 2)
        .collect();
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Lowercases ASCII letters, strips leading/trailing ASCII whitespace, and
/// removes ASCII punctuation bytes. Idempotent.
pub fn normalize_token(bytes: &[u8]) -> Vec<u8> {
    let trimmed: Vec<u8> = {
        let start = bytes
            .iter()
            .position(|b| !b.is_ascii_whitespace())
            .unwrap_or(bytes.len());
        let end = bytes
            .iter()
            .rposition(|b| !b.is_ascii_whitespace())
            .map_or(start, |e| e + 1);
        bytes[start..end].to_vec()
    };
    trimmed
        .into_iter()
        .filter(|b| !b.is_ascii_punctuation())
        .map(|b| b.to_ascii_lowercase())
        .collect()
}

/// Equivalence classes of ids under [`normalize_token`], restricted to
/// classes with at least two members. Tokens whose normalised form is empty
/// (pure whitespace or punctuation) are not classed together.
pub fn find_near_duplicates(vocab: &TokenVocabulary) -> Vec<Vec<u32>> {
    let mut by_norm: HashMap<Vec<u8>, Vec<u32>> = HashMap::new();
    for (id, bytes) in vocab.tokens().iter().enumerate() {
        let norm = normalize_token(bytes);
        if norm.is_empty() {
            continue;
        }
        by_norm.entry(norm).or_default().push(id as u32);
    }
    let mut classes: Vec<Vec<u32>> = by_norm.into_values().filter(|g| g.len() >= 2).collect();
    classes.sort_by_key(|g| g[0]);
    classes
}

/// Reported near-duplicate count: (members - 1) summed over classes.
pub fn near_duplicate_count(classes: &[Vec<u32>]) -> usize {
    classes.iter().map(|c| c.len() - 1).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct ZipfFit {
    /// Exponent s in count(rank) ~ rank^-s (negated regression slope).
    pub exponent: f64,
    /// R^2 of log(count) against log(rank); 0 flags a degenerate fit.
    pub r_squared: f64,
    /// False when all counts are equal (no rank structure to fit).
    pub zipf_like: bool,
    pub ranks_used: usize,
}

/// Least squares of log(count) against log(rank) over the nonzero-count
/// ranks; the zero-count tail of rare and unused tokens is excluded.
pub fn zipf_fit(freq: &FrequencyTable) -> Result<ZipfFit, AnalysisError> {
    let sorted = freq.sorted_nonzero();
    if sorted.len() < 10 {
        return Err(AnalysisError::TooFewRanks {
            got: sorted.len(),
            required: 10,
        });
    }
    let pts: Vec<(f64, f64)> = sorted
        .iter()
        .enumerate()
        .map(|(i, &c)| (((i + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    if syy <= 1e-12 * n {
        // All counts equal (up to rounding): slope 0, nothing Zipf-like.
        return Ok(ZipfFit {
            exponent: 0.0,
            r_squared: 0.0,
            zipf_like: false,
            ranks_used: pts.len(),
        });
    }
    let slope = sxy / sxx;
    let r_squared = (sxy * sxy) / (sxx * syy);
    Ok(ZipfFit {
        exponent: -slope,
        r_squared,
        zipf_like: r_squared > 0.5,
        ranks_used: pts.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapReport {
    /// Byte strings present in both vocabularies (as sets).
    pub shared: usize,
    /// Shared fraction relative to the distinct strings of each side.
    pub fraction_a: f64,
    pub fraction_b: f64,
}

/// Set intersection of decoded token strings across two vocabularies.
pub fn vocab_overlap(a: &TokenVocabulary, b: &TokenVocabulary) -> OverlapReport {
    let set_a: std::collections::HashSet<&[u8]> =
        a.tokens().iter().map(|t| t.as_slice()).collect();
    let set_b: std::collections::HashSet<&[u8]> =
        b.tokens().iter().map(|t| t.as_slice()).collect();
    let shared = set_a.intersection(&set_b).count();
    OverlapReport {
        shared,
        fraction_a: shared as f64 / set_a.len() as f64,
        fraction_b: shared as f64 / set_b.len() as f64,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// Max relative deviation from the pooled curve, per subset.
    pub max_deviation: Vec<f64>,
    /// Rank percentiles (0..=100) at which curves were compared.
    pub percentiles: Vec<u32>,
}

/// Compares each subset's sorted-count curve against the pooled curve at
/// matched rank percentiles (rank rescaled to [0, 100]); curves are
/// normalised by their totals so subsets of different sizes compare.
pub fn frequency_stability(subsets: &[FrequencyTable]) -> Result<StabilityReport, AnalysisError> {
    if subsets.len() < 2 {
        return Err(AnalysisError::TooFewSubsets(subsets.len()));
    }
    for (index, s) in subsets.iter().enumerate() {
        if s.total() == 0 {
            return Err(AnalysisError::EmptySubset { index });
        }
    }
    let vocab_size = subsets[0].counts().len();
    let mut pooled = vec![0u64; vocab_size];
    for s in subsets {
        for (p, &c) in pooled.iter_mut().zip(s.counts()) {
            *p += c;
        }
    }
    let pooled = FrequencyTable::from_counts(pooled);
    let percentiles: Vec<u32> = (0..=100).collect();
    let pooled_curve = percentile_curve(&pooled, &percentiles);
    let mut max_deviation = Vec::with_capacity(subsets.len());
    for s in subsets {
        let curve = percentile_curve(s, &percentiles);
        let dev = curve
            .iter()
            .zip(&pooled_curve)
            .map(|(&c, &p)| if p > 0.0 { (c - p).abs() / p } else { 0.0 })
            .fold(0.0f64, f64::max);
        max_deviation.push(dev);
    }
    Ok(StabilityReport {
        max_deviation,
        percentiles,
    })
}

/// Sorted-count curve sampled at rank percentiles, normalised by total count.
fn percentile_curve(freq: &FrequencyTable, percentiles: &[u32]) -> Vec<f64> {
    let sorted = freq.sorted_nonzero();
    let total = freq.total() as f64;
    percentiles
        .iter()
        .map(|&p| {
            if sorted.is_empty() {
                return 0.0;
            }
            let idx = ((p as usize) * (sorted.len() - 1)) / 100;
            sorted[idx] as f64 / total
        })
        .collect()
}

/// One line per finding, plus a machine-readable summary.
#[derive(Debug, Clone, Serialize)]
pub struct VocabReport {
    pub vocab_size: usize,
    pub exact_duplicate_groups: usize,
    pub exact_duplicate_tokens: usize,
    pub near_duplicate_classes: usize,
    pub near_duplicate_tokens: usize,
    pub zipf: Option<ZipfFit>,
    pub bytes_per_token: Option<f64>,
    pub overlap: Option<OverlapReport>,
}

/// Runs the full forensics pass. `corpus_ids` feeds the Zipf fit and
/// bytes-per-token; `other` feeds the overlap comparison.
pub fn analyze(
    vocab: &TokenVocabulary,
    corpus_ids: Option<&[u32]>,
    other: Option<&TokenVocabulary>,
) -> VocabReport {
    let exact = find_exact_duplicates(vocab);
    let near = find_near_duplicates(vocab);
    let (zipf, bytes_per_token) = match corpus_ids {
        Some(ids) if !ids.is_empty() => {
            let freq = FrequencyTable::from_ids(ids, vocab.size());
            (zipf_fit(&freq).ok(), vocab.bytes_per_token(ids).ok())
        }
        _ => (None, None),
    };
    VocabReport {
        vocab_size: vocab.size(),
        exact_duplicate_groups: exact.len(),
        exact_duplicate_tokens: exact.iter().map(|g| g.len() - 1).sum(),
        near_duplicate_classes: near.len(),
        near_duplicate_tokens: near_duplicate_count(&near),
        zipf,
        bytes_per_token,
        overlap: other.map(|o| vocab_overlap(vocab, o)),
    }
}

/// Line-delimited findings for human reading; one finding per line.
pub fn report_lines(report: &VocabReport) -> Vec<String> {
    let mut lines = vec![
        format!("vocab_size\t{}", report.vocab_size),
        format!(
            "exact_duplicates\tgroups={}\ttokens={}",
            report.exact_duplicate_groups, report.exact_duplicate_tokens
        ),
        format!(
            "near_duplicates\tclasses={}\ttokens={}",
            report.near_duplicate_classes, report.near_duplicate_tokens
        ),
    ];
    if let Some(z) = &report.zipf {
        lines.push(format!(
            "zipf\texponent={:.4}\tr_squared={:.4}\tzipf_like={}",
            z.exponent, z.r_squared, z.zipf_like
        ));
    }
    if let Some(bpt) = report.bytes_per_token {
        lines.push(format!("bytes_per_token\t{bpt:.4}"));
    }
    if let Some(o) = &report.overlap {
        lines.push(format!(
            "overlap\tshared={}\tfraction_a={:.4}\tfraction_b={:.4}",
            o.shared, o.fraction_a, o.fraction_b
        ));
    }
    lines
}
