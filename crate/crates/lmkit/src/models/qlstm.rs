//! Multi-head qLSTM: gates depend only on the current input, so the whole
//! layer's gate activations come from full-sequence matmuls and the only
//! sequential work left is the elementwise cell recurrence
//! `c_t = c_{t-1} . f_t + u_t`. That recurrence runs either step by step or
//! block-parallel through the carry tensor of suffix forget-gate products.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

use super::{BoundParams, LayerState, ModelConfig, ModelError, RecurrentState};

/// Gate activations for one layer, each `[batch, seq, d_attn]`.
struct Gates {
    forget: NodeId,
    update: NodeId,
    output: NodeId,
}

fn layer_gates<E: Element>(
    graph: &mut Graph<E>,
    p: &BoundParams<'_, E>,
    layer: &str,
    h_ln: NodeId,
    batch: usize,
    seq: usize,
    d: usize,
    a: usize,
) -> Result<Gates, ModelError> {
    let flat = graph.reshape(h_ln, &[batch * seq, d])?;
    let pre = |graph: &mut Graph<E>, gate: &str| -> Result<NodeId, ModelError> {
        let w = p.node(&format!("{layer}.cell.w_{gate}"))?;
        let b = p.node(&format!("{layer}.cell.b_{gate}"))?;
        let y = graph.matmul(flat, w)?;
        let y = graph.add(y, b)?;
        Ok(graph.reshape(y, &[batch, seq, a])?)
    };
    let f_pre = pre(graph, "f")?;
    let i_pre = pre(graph, "i")?;
    let z_pre = pre(graph, "z")?;
    let o_pre = pre(graph, "o")?;
    let forget = graph.sigmoid(f_pre);
    let i = graph.sigmoid(i_pre);
    let z = graph.tanh(z_pre);
    let update = graph.mul(i, z)?;
    let output = graph.sigmoid(o_pre);
    Ok(Gates {
        forget,
        update,
        output,
    })
}

/// Step-by-step evaluation of the cell recurrence `c_t = c_{t-1} . f_t + u_t`
/// for gate tensors `[batch, seq, width]` and `c0` of `[batch, 1, width]`.
/// Returns all cell states `[batch, seq, width]`.
pub fn cell_states_sequential<E: Element>(
    graph: &mut Graph<E>,
    forget: NodeId,
    update: NodeId,
    c0: NodeId,
    seq: usize,
) -> Result<NodeId, ModelError> {
    let mut c_prev = c0;
    let mut cells = Vec::with_capacity(seq);
    for t in 0..seq {
        let f_t = graph.slice_rows(forget, t, 1)?;
        let u_t = graph.slice_rows(update, t, 1)?;
        let kept = graph.mul(c_prev, f_t)?;
        let c_t = graph.add(kept, u_t)?;
        cells.push(c_t);
        c_prev = c_t;
    }
    Ok(graph.concat_rows(&cells)?)
}

/// Block-parallel evaluation of the same recurrence: within a block of
/// `block_len` steps every cell state comes from one contraction of the
/// carry tensor with the stacked `[c_in; u]` rows; blocks chain through
/// their last cell state. A final short block uses a truncated carry tensor.
pub fn cell_states_block<E: Element>(
    graph: &mut Graph<E>,
    forget: NodeId,
    update: NodeId,
    c0: NodeId,
    seq: usize,
    block_len: usize,
) -> Result<NodeId, ModelError> {
    let mut c_in = c0;
    let mut blocks = Vec::new();
    let mut start = 0usize;
    while start < seq {
        let len = block_len.min(seq - start);
        let f_blk = graph.slice_rows(forget, start, len)?;
        let u_blk = graph.slice_rows(update, start, len)?;
        let carry = graph.carry_tensor(f_blk)?;
        let stack = graph.concat_rows(&[c_in, u_blk])?;
        let c_blk = graph.carry_apply(carry, stack)?;
        c_in = graph.slice_rows(c_blk, len - 1, 1)?;
        blocks.push(c_blk);
        start += len;
    }
    Ok(graph.concat_rows(&blocks)?)
}

pub(super) fn forward<E: Element>(
    graph: &mut Graph<E>,
    config: &ModelConfig,
    p: &BoundParams<'_, E>,
    inputs: &[u32],
    batch: usize,
    seq: usize,
    state: Option<&RecurrentState<E>>,
) -> Result<(NodeId, RecurrentState<E>), ModelError> {
    let (d, a) = (config.d_model, config.d_attn());
    let ids: Vec<usize> = inputs.iter().map(|&i| i as usize).collect();
    let tok_table = p.node("tok_emb")?;
    let tok = graph.gather_rows(tok_table, &ids)?;
    let mut x = graph.reshape(tok, &[batch, seq, d])?;

    let mut out_state = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let l = format!("layer{layer}");
        let ln1_g = p.node(&format!("{l}.ln1.gain"))?;
        let ln1_b = p.node(&format!("{l}.ln1.bias"))?;
        let h_ln = graph.layer_norm(x, ln1_g, ln1_b)?;
        let gates = layer_gates(graph, p, &l, h_ln, batch, seq, d, a)?;

        let c0_value = match state {
            Some(s) => s.layers[layer].cell.reshaped(&[batch, 1, a])?,
            None => Tensor::zeros(&[batch, 1, a]),
        };
        let c0 = graph.constant(c0_value);
        let cells = match config.block_len {
            Some(block_len) => {
                cell_states_block(graph, gates.forget, gates.update, c0, seq, block_len)?
            }
            None => cell_states_sequential(graph, gates.forget, gates.update, c0, seq)?,
        };

        let c_tanh = graph.tanh(cells);
        let hidden = graph.mul(gates.output, c_tanh)?;
        let h_flat = graph.reshape(hidden, &[batch * seq, a])?;
        let w_h = p.node(&format!("{l}.cell.w_h"))?;
        let y = graph.matmul(h_flat, w_h)?;
        let y = graph.reshape(y, &[batch, seq, d])?;
        x = graph.add(x, y)?;

        let c_last = graph.slice_rows(cells, seq - 1, 1)?;
        out_state.push(LayerState {
            cell: graph.value(c_last).reshaped(&[batch, a])?,
            hidden: None,
        });

        x = super::mlp_block(graph, p, &l, x, batch, seq, d)?;
    }

    let logits = super::output_head(graph, p, x, batch, seq, d, config.vocab_size)?;
    Ok((logits, RecurrentState { layers: out_state }))
}
