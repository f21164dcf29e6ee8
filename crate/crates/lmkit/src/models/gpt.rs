//! GPT-style decoder: learned position embeddings, pre-norm residual blocks
//! of causal multi-head self-attention and a 4x ReLU MLP, final layer norm,
//! untied output head.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

use super::{BoundParams, ModelConfig, ModelError};

/// Additive causal mask: zero on and below the diagonal, a large negative
/// number above it, so masked scores underflow to zero probability.
fn causal_mask<E: Element>(seq: usize) -> Tensor<E> {
    let mut mask = Tensor::zeros(&[seq, seq]);
    let neg = E::from_f64(-1e30);
    for i in 0..seq {
        for j in i + 1..seq {
            mask.data_mut()[i * seq + j] = neg;
        }
    }
    mask
}

pub(super) fn forward<E: Element>(
    graph: &mut Graph<E>,
    config: &ModelConfig,
    p: &BoundParams<'_, E>,
    inputs: &[u32],
    batch: usize,
    seq: usize,
) -> Result<NodeId, ModelError> {
    let (d, a, dh, heads) = (
        config.d_model,
        config.d_attn(),
        config.d_head,
        config.n_heads,
    );
    let ids: Vec<usize> = inputs.iter().map(|&i| i as usize).collect();
    let tok_table = p.node("tok_emb")?;
    let tok = graph.gather_rows(tok_table, &ids)?;
    let tok = graph.reshape(tok, &[batch, seq, d])?;
    let pos_table = p.node("pos_emb")?;
    let pos = graph.slice_rows(pos_table, 0, seq)?;
    let mut x = graph.add(tok, pos)?;

    let mask = graph.constant(causal_mask::<E>(seq));
    let scale = 1.0 / (dh as f64).sqrt();

    for layer in 0..config.n_layers {
        let l = format!("layer{layer}");
        let ln1_g = p.node(&format!("{l}.ln1.gain"))?;
        let ln1_b = p.node(&format!("{l}.ln1.bias"))?;
        let h = graph.layer_norm(x, ln1_g, ln1_b)?;
        let flat = graph.reshape(h, &[batch * seq, d])?;

        let proj = |graph: &mut Graph<E>, w: &str, b: &str| -> Result<NodeId, ModelError> {
            let wn = p.node(&format!("{l}.attn.{w}"))?;
            let bn = p.node(&format!("{l}.attn.{b}"))?;
            let y = graph.matmul(flat, wn)?;
            let y = graph.add(y, bn)?;
            Ok(graph.reshape(y, &[batch, seq, a])?)
        };
        let q = proj(graph, "wq", "bq")?;
        let k = proj(graph, "wk", "bk")?;
        let v = proj(graph, "wv", "bv")?;

        let mut head_outputs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = graph.slice_cols(q, head * dh, dh)?;
            let kh = graph.slice_cols(k, head * dh, dh)?;
            let vh = graph.slice_cols(v, head * dh, dh)?;
            let kt = graph.transpose_mat(kh)?;
            let scores = graph.matmul(qh, kt)?;
            let scores = graph.scale(scores, scale);
            let scores = graph.add(scores, mask)?;
            let probs = graph.softmax_rows(scores);
            head_outputs.push(graph.matmul(probs, vh)?);
        }
        let ctx = graph.concat_cols(&head_outputs)?;
        let ctx_flat = graph.reshape(ctx, &[batch * seq, a])?;
        let wo = p.node(&format!("{l}.attn.wo"))?;
        let bo = p.node(&format!("{l}.attn.bo"))?;
        let attn = graph.matmul(ctx_flat, wo)?;
        let attn = graph.add(attn, bo)?;
        let attn = graph.reshape(attn, &[batch, seq, d])?;
        x = graph.add(x, attn)?;

        x = super::mlp_block(graph, p, &l, x, batch, seq, d)?;
    }

    super::output_head(graph, p, x, batch, seq, d, config.vocab_size)
}
