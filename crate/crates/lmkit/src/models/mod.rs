//! The three model families: GPT-style decoder, multi-head LSTM, and
//! multi-head qLSTM with sequential and block-parallel execution.
//!
//! All families share the same trunk: token embedding, `n_layers` pre-norm
//! residual blocks (mixer sublayer + 4x MLP with ReLU), a final layer norm,
//! and an untied output head. GPT adds a learned position embedding; the
//! recurrent families rely on recurrence for order and carry no position
//! table (their parameter counts pin this down).

mod gpt;
mod lstm;
mod qlstm;

pub use lstm::{lstm_cell_forward, CellHeadParams};
pub use qlstm::{cell_states_block, cell_states_sequential};

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("sequence length {s} exceeds the trained position table of {max}")]
    SequenceTooLong { s: usize, max: usize },
    #[error("no scored positions in batch")]
    NothingToScore,
    #[error("parameter {0} missing")]
    MissingParam(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Gpt,
    Lstm,
    Qlstm,
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelFamily::Gpt => write!(f, "gpt"),
            ModelFamily::Lstm => write!(f, "lstm"),
            ModelFamily::Qlstm => write!(f, "qlstm"),
        }
    }
}

/// Architecture hyperparameters. The attention / cell width is
/// `n_heads * d_head`, which matches `d_model` for the mid-size presets but
/// not for mini or XL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// qLSTM block-parallel length; `None` selects sequential execution.
    pub block_len: Option<usize>,
}

impl ModelConfig {
    /// Width of the mixer sublayer (all heads concatenated).
    pub fn d_attn(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_head,
            self.vocab_size,
            self.seq_len,
        ];
        if positive.iter().any(|&x| x == 0) {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be positive".to_string(),
            ));
        }
        if let Some(b) = self.block_len {
            if b == 0 {
                return Err(ModelError::InvalidConfig("block_len must be positive".into()));
            }
            if self.family != ModelFamily::Qlstm {
                return Err(ModelError::InvalidConfig(
                    "block_len only applies to the qlstm family".into(),
                ));
            }
        }
        Ok(())
    }

    /// Named size presets. The published table rows use a 16,384 vocabulary
    /// and 512-token sequences; `medium` carries 24 layers, the depth its
    /// parameter and FLOP figures correspond to. The `*-desk` presets are
    /// 128-wide 2-layer configs for commodity-CPU experiments.
    pub fn preset(name: &str) -> Result<ModelConfig, ModelError> {
        let (family, rest) = match name.split_once('-') {
            Some(("gpt", r)) => (ModelFamily::Gpt, r),
            Some(("lstm", r)) => (ModelFamily::Lstm, r),
            Some(("qlstm", r)) => (ModelFamily::Qlstm, r),
            _ => return Err(ModelError::UnknownPreset(name.to_string())),
        };
        let (d_model, n_layers, n_heads, d_head, block) = match rest {
            "mini" => (512, 4, 8, 32, 16),
            "tiny" => (768, 4, 12, 64, 8),
            "small" => (768, 12, 12, 64, 16),
            "medium" => (1024, 24, 16, 64, 16),
            "large" => (1536, 24, 16, 96, 16),
            "xl" => (2048, 24, 24, 128, 16),
            "desk" => (128, 2, 4, 32, 8),
            _ => return Err(ModelError::UnknownPreset(name.to_string())),
        };
        Ok(ModelConfig {
            family,
            d_model,
            n_layers,
            n_heads,
            d_head,
            vocab_size: 16_384,
            seq_len: 512,
            block_len: (family == ModelFamily::Qlstm).then_some(block),
        })
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> ModelConfig {
        self.vocab_size = vocab_size;
        self
    }

    pub fn with_seq_len(mut self, seq_len: usize) -> ModelConfig {
        self.seq_len = seq_len;
        self
    }

    pub fn with_block_len(mut self, block_len: Option<usize>) -> ModelConfig {
        self.block_len = block_len;
        self
    }
}

/// Exact parameter count implied by a config, from shapes alone (untied
/// input and output embeddings).
pub fn count_params(config: &ModelConfig) -> u64 {
    let (d, v, s) = (
        config.d_model as u64,
        config.vocab_size as u64,
        config.seq_len as u64,
    );
    let a = config.d_attn() as u64;
    let dh = config.d_head as u64;
    let h = config.n_heads as u64;
    let mlp = (d * 4 * d + 4 * d) + (4 * d * d + d);
    let norms = 4 * d; // two layer norms, gain + bias each
    let mixer = match config.family {
        // q,k,v,o projections with biases
        ModelFamily::Gpt => 3 * (d * a + a) + (a * d + d),
        // four gates (W, b) + per-head recurrent U + output map
        ModelFamily::Lstm => 4 * (d * a + a) + 4 * (h * dh * dh) + a * d,
        // four gates (W, b) + output map
        ModelFamily::Qlstm => 4 * (d * a + a) + a * d,
    };
    let per_layer = mixer + mlp + norms;
    let pos = if config.family == ModelFamily::Gpt {
        s * d
    } else {
        0
    };
    v * d + pos + config.n_layers as u64 * per_layer + 2 * d + d * v
}

/// Named parameter tensors in fixed construction order.
#[derive(Debug, Clone)]
pub struct ModelParams<E: Element = f64> {
    entries: Vec<(String, Tensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Element> ModelParams<E> {
    pub fn new() -> Self {
        ModelParams {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<E>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>, ModelError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn entries(&self) -> &[(String, Tensor<E>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<E>)] {
        &mut self.entries
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

impl<E: Element> Default for ModelParams<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-layer recurrent state: cell vectors for both recurrent families plus
/// hidden vectors for the classic LSTM. Shapes are `[batch, n_heads*d_head]`.
#[derive(Debug, Clone)]
pub struct RecurrentState<E: Element = f64> {
    pub layers: Vec<LayerState<E>>,
}

#[derive(Debug, Clone)]
pub struct LayerState<E: Element = f64> {
    pub cell: Tensor<E>,
    pub hidden: Option<Tensor<E>>,
}

impl<E: Element> RecurrentState<E> {
    /// Fresh all-zero state for `batch` lanes.
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let a = config.d_attn();
        let hidden = matches!(config.family, ModelFamily::Lstm);
        RecurrentState {
            layers: (0..config.n_layers)
                .map(|_| LayerState {
                    cell: Tensor::zeros(&[batch, a]),
                    hidden: hidden.then(|| Tensor::zeros(&[batch, a])),
                })
                .collect(),
        }
    }
}

/// A model: config plus parameter tensors.
#[derive(Debug, Clone)]
pub struct Model<E: Element = f64> {
    pub config: ModelConfig,
    pub params: ModelParams<E>,
}

/// Result of binding parameters into a graph and running the forward pass.
pub struct ModelForward<E: Element = f64> {
    /// Logits node with shape `[batch, seq, vocab]`.
    pub logits: NodeId,
    /// One node per parameter entry, aligned with `ModelParams::entries`.
    pub param_nodes: Vec<NodeId>,
    /// Detached final recurrent state (recurrent families only).
    pub state: Option<RecurrentState<E>>,
}

impl<E: Element> Model<E> {
    /// Initialises parameters: normal(0, 0.02) for matrices, zeros for
    /// biases, ones for layer-norm gains, +1.0 for forget-gate biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model<E>, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
        let mut p = ModelParams::new();
        let (d, v, s, a) = (
            config.d_model,
            config.vocab_size,
            config.seq_len,
            config.d_attn(),
        );
        let mut mat = |p: &mut ModelParams<E>, name: &str, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<E> = (0..n)
                .map(|_| E::from_f64(normal.sample(&mut rng)))
                .collect();
            p.push(name, Tensor::from_vec(shape, data).expect("shape"));
        };
        mat(&mut p, "tok_emb", &[v, d]);
        if config.family == ModelFamily::Gpt {
            mat(&mut p, "pos_emb", &[s, d]);
        }
        for layer in 0..config.n_layers {
            let l = format!("layer{layer}");
            p.push(&format!("{l}.ln1.gain"), Tensor::full(&[d], E::one()));
            p.push(&format!("{l}.ln1.bias"), Tensor::zeros(&[d]));
            match config.family {
                ModelFamily::Gpt => {
                    for w in ["wq", "wk", "wv"] {
                        mat(&mut p, &format!("{l}.attn.{w}"), &[d, a]);
                        p.push(&format!("{l}.attn.b{}", &w[1..]), Tensor::zeros(&[a]));
                    }
                    mat(&mut p, &format!("{l}.attn.wo"), &[a, d]);
                    p.push(&format!("{l}.attn.bo"), Tensor::zeros(&[d]));
                }
                ModelFamily::Lstm => {
                    for gate in ["f", "i", "z", "o"] {
                        mat(&mut p, &format!("{l}.cell.w_{gate}"), &[d, a]);
                        for head in 0..config.n_heads {
                            mat(
                                &mut p,
                                &format!("{l}.cell.u_{gate}.h{head}"),
                                &[config.d_head, config.d_head],
                            );
                        }
                        let bias = if gate == "f" { E::one() } else { E::zero() };
                        p.push(&format!("{l}.cell.b_{gate}"), Tensor::full(&[a], bias));
                    }
                    mat(&mut p, &format!("{l}.cell.w_h"), &[a, d]);
                }
                ModelFamily::Qlstm => {
                    for gate in ["f", "i", "z", "o"] {
                        mat(&mut p, &format!("{l}.cell.w_{gate}"), &[d, a]);
                        let bias = if gate == "f" { E::one() } else { E::zero() };
                        p.push(&format!("{l}.cell.b_{gate}"), Tensor::full(&[a], bias));
                    }
                    mat(&mut p, &format!("{l}.cell.w_h"), &[a, d]);
                }
            }
            p.push(&format!("{l}.ln2.gain"), Tensor::full(&[d], E::one()));
            p.push(&format!("{l}.ln2.bias"), Tensor::zeros(&[d]));
            mat(&mut p, &format!("{l}.mlp.w1"), &[d, 4 * d]);
            p.push(&format!("{l}.mlp.b1"), Tensor::zeros(&[4 * d]));
            mat(&mut p, &format!("{l}.mlp.w2"), &[4 * d, d]);
            p.push(&format!("{l}.mlp.b2"), Tensor::zeros(&[d]));
        }
        p.push("ln_f.gain", Tensor::full(&[d], E::one()));
        p.push("ln_f.bias", Tensor::zeros(&[d]));
        mat(&mut p, "head", &[d, v]);
        Ok(Model { config, params: p })
    }

    /// Binds every parameter as a gradient-requiring leaf and runs the
    /// forward pass for `inputs` (row-major `[batch, seq]` token ids).
    /// `state` seeds the recurrence; `None` starts from zeros.
    pub fn forward(
        &self,
        graph: &mut Graph<E>,
        inputs: &[u32],
        batch: usize,
        seq: usize,
        state: Option<&RecurrentState<E>>,
    ) -> Result<ModelForward<E>, ModelError> {
        assert_eq!(inputs.len(), batch * seq, "inputs must be batch*seq ids");
        if seq > self.config.seq_len {
            return Err(ModelError::SequenceTooLong {
                s: seq,
                max: self.config.seq_len,
            });
        }
        let param_nodes: Vec<NodeId> = self
            .params
            .entries()
            .iter()
            .map(|(_, t)| graph.leaf(t.clone()))
            .collect();
        let bound = BoundParams {
            params: &self.params,
            nodes: &param_nodes,
        };
        let (logits, state) = match self.config.family {
            ModelFamily::Gpt => (
                gpt::forward(graph, &self.config, &bound, inputs, batch, seq)?,
                None,
            ),
            ModelFamily::Lstm => {
                let (logits, st) =
                    lstm::forward(graph, &self.config, &bound, inputs, batch, seq, state)?;
                (logits, Some(st))
            }
            ModelFamily::Qlstm => {
                let (logits, st) =
                    qlstm::forward(graph, &self.config, &bound, inputs, batch, seq, state)?;
                (logits, Some(st))
            }
        };
        Ok(ModelForward {
            logits,
            param_nodes,
            state,
        })
    }
}

/// Parameter name -> bound graph node lookup used by the family forwards.
pub(crate) struct BoundParams<'a, E: Element> {
    params: &'a ModelParams<E>,
    nodes: &'a [NodeId],
}

impl<E: Element> BoundParams<'_, E> {
    pub fn node(&self, name: &str) -> Result<NodeId, ModelError> {
        let idx = self
            .params
            .index
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        Ok(self.nodes[*idx])
    }
}

/// Pre-norm MLP sublayer with residual: x + W2 relu(W1 ln(x) + b1) + b2.
pub(crate) fn mlp_block<E: Element>(
    graph: &mut Graph<E>,
    p: &BoundParams<'_, E>,
    layer: &str,
    x: NodeId,
    batch: usize,
    seq: usize,
    d: usize,
) -> Result<NodeId, ModelError> {
    let ln2_g = p.node(&format!("{layer}.ln2.gain"))?;
    let ln2_b = p.node(&format!("{layer}.ln2.bias"))?;
    let h = graph.layer_norm(x, ln2_g, ln2_b)?;
    let flat = graph.reshape(h, &[batch * seq, d])?;
    let w1 = p.node(&format!("{layer}.mlp.w1"))?;
    let b1 = p.node(&format!("{layer}.mlp.b1"))?;
    let h1 = graph.matmul(flat, w1)?;
    let h1 = graph.add(h1, b1)?;
    let h1 = graph.relu(h1);
    let w2 = p.node(&format!("{layer}.mlp.w2"))?;
    let b2 = p.node(&format!("{layer}.mlp.b2"))?;
    let h2 = graph.matmul(h1, w2)?;
    let h2 = graph.add(h2, b2)?;
    let h2 = graph.reshape(h2, &[batch, seq, d])?;
    Ok(graph.add(x, h2)?)
}

/// Final layer norm and the untied output head to vocabulary logits.
pub(crate) fn output_head<E: Element>(
    graph: &mut Graph<E>,
    p: &BoundParams<'_, E>,
    x: NodeId,
    batch: usize,
    seq: usize,
    d: usize,
    vocab: usize,
) -> Result<NodeId, ModelError> {
    let g = p.node("ln_f.gain")?;
    let b = p.node("ln_f.bias")?;
    let h = graph.layer_norm(x, g, b)?;
    let flat = graph.reshape(h, &[batch * seq, d])?;
    let head = p.node("head")?;
    let logits = graph.matmul(flat, head)?;
    Ok(graph.reshape(logits, &[batch, seq, vocab])?)
}

/// Cross-entropy over the masked positions of a `[batch, seq, vocab]` logits
/// node. Returns the total-loss node and the number of scored positions.
pub fn masked_loss<E: Element>(
    graph: &mut Graph<E>,
    logits: NodeId,
    targets: &[u32],
    mask: &[bool],
) -> Result<(NodeId, usize), ModelError> {
    let shape = graph.shape(logits).to_vec();
    let vocab = *shape.last().expect("logits rank");
    let positions: usize = shape.iter().rev().skip(1).product();
    assert_eq!(targets.len(), positions, "targets must cover every position");
    assert_eq!(mask.len(), positions, "mask must cover every position");
    let flat = graph.reshape(logits, &[positions, vocab])?;
    let scored: Vec<usize> = (0..positions).filter(|&i| mask[i]).collect();
    if scored.is_empty() {
        return Err(ModelError::NothingToScore);
    }
    let scored_targets: Vec<usize> = scored.iter().map(|&i| targets[i] as usize).collect();
    let picked = graph.gather_rows(flat, &scored)?;
    let loss = graph.cross_entropy(picked, &scored_targets)?;
    Ok((loss, scored.len()))
}

// ----- checkpoint format -----------------------------------------------------

/// Header (config, format version, vocab hash) + named tensor records
/// (name, shape, 64/32-bit flag, little-endian payload).
pub fn save_checkpoint<E: Element>(
    model: &Model<E>,
    vocab_hash: [u8; 32],
    path: &Path,
) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(b"LMCK")?;
        w.write_all(&1u16.to_le_bytes())?;
        let cfg = serde_json::to_vec(&model.config)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&vocab_hash)?;
        w.write_all(&(model.params.num_entries() as u32).to_le_bytes())?;
        for (name, tensor) in model.params.entries() {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[E::BITS])?;
            w.write_all(&[tensor.rank() as u8])?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for &x in tensor.data() {
                match E::BITS {
                    32 => w.write_all(&(x.to_f64() as f32).to_le_bytes())?,
                    _ => w.write_all(&x.to_f64().to_le_bytes())?,
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, casting stored tensors into `E`.
pub fn load_checkpoint<E: Element>(path: &Path) -> Result<(Model<E>, [u8; 32]), ModelError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *cur + n > buf.len() {
            return Err(ModelError::Checkpoint("truncated".to_string()));
        }
        let s = &buf[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != b"LMCK" {
        return Err(ModelError::Checkpoint("bad magic".to_string()));
    }
    let version = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap());
    if version != 1 {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut cur, cfg_len)?)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut vocab_hash = [0u8; 32];
    vocab_hash.copy_from_slice(take(&mut cur, 32)?);
    let n_tensors = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    let mut params = ModelParams::new();
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("tensor name not UTF-8".to_string()))?;
        let bits = take(&mut cur, 1)?[0];
        let rank = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match bits {
            32 => {
                let raw = take(&mut cur, n * 4)?;
                for c in raw.chunks_exact(4) {
                    data.push(E::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
                }
            }
            64 => {
                let raw = take(&mut cur, n * 8)?;
                for c in raw.chunks_exact(8) {
                    data.push(E::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
                }
            }
            other => {
                return Err(ModelError::Checkpoint(format!("unsupported width {other}")))
            }
        }
        params.push(&name, Tensor::from_vec(&shape, data)?);
    }
    Ok((Model { config, params }, vocab_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(family: &str) -> ModelConfig {
        ModelConfig::preset(&format!("{family}-desk"))
            .unwrap()
            .with_vocab(11)
            .with_seq_len(8)
    }

    #[test]
    fn preset_table_parameter_counts() {
        // Published counts in millions; the formula must land within 1%.
        let cases = [
            ("gpt-mini", 27.6),
            ("gpt-tiny", 53.9),
            ("gpt-small", 110.6),
            ("gpt-medium", 336.4),
            ("gpt-large", 731.1),
            ("gpt-xl", 1478.2),
            ("qlstm-mini", 27.8),
            ("qlstm-tiny", 55.9),
            ("qlstm-small", 117.3),
            ("qlstm-medium", 361.1),
            ("qlstm-large", 787.0),
            ("qlstm-xl", 1628.2),
        ];
        for (name, millions) in cases {
            let config = ModelConfig::preset(name).unwrap();
            let count = count_params(&config) as f64;
            let want = millions * 1e6;
            let rel = (count - want).abs() / want;
            assert!(rel < 0.01, "{name}: {count} vs {want} (rel {rel:.4})");
        }
    }

    #[test]
    fn analytic_count_matches_instantiated_tensors() {
        for family in ["gpt", "lstm", "qlstm"] {
            let config = desk(family);
            let model = Model::<f64>::init(config.clone(), 0).unwrap();
            assert_eq!(
                model.params.num_params(),
                count_params(&config),
                "{family} analytic vs instantiated"
            );
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::<f64>::init(desk("qlstm"), 7).unwrap();
        let b = Model::<f64>::init(desk("qlstm"), 7).unwrap();
        for ((n1, t1), (n2, t2)) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        let c = Model::<f64>::init(desk("qlstm"), 8).unwrap();
        assert_ne!(
            a.params.entries()[0].1.data(),
            c.params.entries()[0].1.data()
        );
    }

    #[test]
    fn forget_gate_bias_is_one() {
        let model = Model::<f64>::init(desk("qlstm"), 0).unwrap();
        let bf = model.params.get("layer0.cell.b_f").unwrap();
        assert!(bf.data().iter().all(|&x| x == 1.0));
        let bi = model.params.get("layer0.cell.b_i").unwrap();
        assert!(bi.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(matches!(
            ModelConfig::preset("gpt-galactic"),
            Err(ModelError::UnknownPreset(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact_at_64_bit() {
        let model = Model::<f64>::init(desk("gpt"), 3).unwrap();
        let dir = std::env::temp_dir().join("lmkit_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.lmck");
        let hash = [7u8; 32];
        save_checkpoint(&model, hash, &path).unwrap();
        let (loaded, h) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(h, hash);
        assert_eq!(loaded.config, model.config);
        for ((n1, t1), (n2, t2)) in model.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_carries_32_bit_flag() {
        let model = Model::<f32>::init(desk("gpt").with_vocab(7), 3).unwrap();
        let dir = std::env::temp_dir().join("lmkit_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m32.lmck");
        save_checkpoint(&model, [0u8; 32], &path).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
        for ((_, t1), (_, t2)) in model.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(t1.data(), t2.data());
        }
        std::fs::remove_file(&path).ok();
    }
}
