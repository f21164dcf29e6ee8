//! Multi-head LSTM: the classic cell with recurrent weight matrices, one
//! cell per head in a lower-dimensional space, run step by step.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

use super::{BoundParams, LayerState, ModelConfig, ModelError, RecurrentState};

/// Graph nodes for one head's cell parameters.
///
/// `w_*` are `[d_model, d_head]` feed-forward maps, `u_*` are
/// `[d_head, d_head]` recurrent maps, `b_*` are `[d_head]` biases.
pub struct CellHeadParams {
    pub w_f: NodeId,
    pub u_f: NodeId,
    pub b_f: NodeId,
    pub w_i: NodeId,
    pub u_i: NodeId,
    pub b_i: NodeId,
    pub w_z: NodeId,
    pub u_z: NodeId,
    pub b_z: NodeId,
    pub w_o: NodeId,
    pub u_o: NodeId,
    pub b_o: NodeId,
}

/// One step of the classic LSTM cell for a single head:
/// gates from `W x_t + U h_prev + b`, then
/// `c_t = c_prev . f + i . z` and `h_t = o . tanh(c_t)`.
///
/// `x_t` is `[batch, d_model]`; `h_prev`, `c_prev` are `[batch, d_head]`.
/// Returns `(h_t, c_t)`.
pub fn lstm_cell_forward<E: Element>(
    graph: &mut Graph<E>,
    x_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    p: &CellHeadParams,
) -> Result<(NodeId, NodeId), ModelError> {
    let gate = |graph: &mut Graph<E>, w, u, b, squash: fn(&mut Graph<E>, NodeId) -> NodeId| {
        let wx = graph.matmul(x_t, w)?;
        let uh = graph.matmul(h_prev, u)?;
        let pre = graph.add(wx, uh)?;
        let pre = graph.add(pre, b)?;
        Ok::<NodeId, ModelError>(squash(graph, pre))
    };
    let f = gate(graph, p.w_f, p.u_f, p.b_f, |g, n| g.sigmoid(n))?;
    let i = gate(graph, p.w_i, p.u_i, p.b_i, |g, n| g.sigmoid(n))?;
    let z = gate(graph, p.w_z, p.u_z, p.b_z, |g, n| g.tanh(n))?;
    let o = gate(graph, p.w_o, p.u_o, p.b_o, |g, n| g.sigmoid(n))?;
    let keep = graph.mul(c_prev, f)?;
    let write = graph.mul(i, z)?;
    let c_t = graph.add(keep, write)?;
    let c_tanh = graph.tanh(c_t);
    let h_t = graph.mul(o, c_tanh)?;
    Ok((h_t, c_t))
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
    let (d, a, dh, heads) = (
        config.d_model,
        config.d_attn(),
        config.d_head,
        config.n_heads,
    );
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

        let (c0, h0) = match state {
            Some(s) => (
                s.layers[layer].cell.clone(),
                s.layers[layer]
                    .hidden
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&[batch, a])),
            ),
            None => (Tensor::zeros(&[batch, a]), Tensor::zeros(&[batch, a])),
        };
        let mut c_prev_heads: Vec<NodeId> = Vec::with_capacity(heads);
        let mut h_prev_heads: Vec<NodeId> = Vec::with_capacity(heads);
        for head in 0..heads {
            let cslice = slice_state(&c0, head, dh);
            let hslice = slice_state(&h0, head, dh);
            c_prev_heads.push(graph.constant(cslice));
            h_prev_heads.push(graph.constant(hslice));
        }

        let head_params: Vec<CellHeadParams> = (0..heads)
            .map(|head| {
                // Per-head columns of the fused gate weights, plus the
                // head's recurrent matrix.
                let col = |graph: &mut Graph<E>, gate: &str| -> Result<(NodeId, NodeId, NodeId), ModelError> {
                    let w = p.node(&format!("{l}.cell.w_{gate}"))?;
                    let w_h = graph.slice_cols(w, head * dh, dh)?;
                    let u = p.node(&format!("{l}.cell.u_{gate}.h{head}"))?;
                    let b = p.node(&format!("{l}.cell.b_{gate}"))?;
                    let b_h = graph.slice_cols(b, head * dh, dh)?;
                    Ok((w_h, u, b_h))
                };
                let (w_f, u_f, b_f) = col(graph, "f")?;
                let (w_i, u_i, b_i) = col(graph, "i")?;
                let (w_z, u_z, b_z) = col(graph, "z")?;
                let (w_o, u_o, b_o) = col(graph, "o")?;
                Ok(CellHeadParams {
                    w_f, u_f, b_f,
                    w_i, u_i, b_i,
                    w_z, u_z, b_z,
                    w_o, u_o, b_o,
                })
            })
            .collect::<Result<_, ModelError>>()?;

        let mut step_outputs: Vec<NodeId> = Vec::with_capacity(seq);
        for t in 0..seq {
            let x_row = graph.slice_rows(h_ln, t, 1)?;
            let x_t = graph.reshape(x_row, &[batch, d])?;
            let mut h_heads = Vec::with_capacity(heads);
            for head in 0..heads {
                let (h_t, c_t) = lstm_cell_forward(
                    graph,
                    x_t,
                    h_prev_heads[head],
                    c_prev_heads[head],
                    &head_params[head],
                )?;
                h_prev_heads[head] = h_t;
                c_prev_heads[head] = c_t;
                h_heads.push(h_t);
            }
            let h_cat = graph.concat_cols(&h_heads)?;
            step_outputs.push(graph.reshape(h_cat, &[batch, 1, a])?);
        }
        let h_all = graph.concat_rows(&step_outputs)?;
        let h_flat = graph.reshape(h_all, &[batch * seq, a])?;
        let w_h = p.node(&format!("{l}.cell.w_h"))?;
        let y = graph.matmul(h_flat, w_h)?;
        let y = graph.reshape(y, &[batch, seq, d])?;
        x = graph.add(x, y)?;

        out_state.push(LayerState {
            cell: cat_values(graph, &c_prev_heads, batch, dh),
            hidden: Some(cat_values(graph, &h_prev_heads, batch, dh)),
        });

        x = super::mlp_block(graph, p, &l, x, batch, seq, d)?;
    }

    let logits = super::output_head(graph, p, x, batch, seq, d, config.vocab_size)?;
    Ok((logits, RecurrentState { layers: out_state }))
}

fn slice_state<E: Element>(full: &Tensor<E>, head: usize, dh: usize) -> Tensor<E> {
    let batch = full.rows();
    let a = full.cols();
    let mut out = Tensor::zeros(&[batch, dh]);
    for b in 0..batch {
        let src = &full.data()[b * a + head * dh..b * a + (head + 1) * dh];
        out.data_mut()[b * dh..(b + 1) * dh].copy_from_slice(src);
    }
    out
}

/// Detached concatenation of per-head state values.
fn cat_values<E: Element>(
    graph: &Graph<E>,
    heads: &[NodeId],
    batch: usize,
    dh: usize,
) -> Tensor<E> {
    let a = heads.len() * dh;
    let mut out = Tensor::zeros(&[batch, a]);
    for (h, &node) in heads.iter().enumerate() {
        let v = graph.value(node);
        for b in 0..batch {
            out.data_mut()[b * a + h * dh..b * a + (h + 1) * dh]
                .copy_from_slice(&v.data()[b * dh..(b + 1) * dh]);
        }
    }
    out
}
