//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena of operation records. Builders run the
//! forward computation eagerly and record the node; [`Graph::backward`]
//! replays the records in reverse, accumulating exactly one gradient per
//! reachable node. Parents always precede children in the arena, so reverse
//! arena order is a valid topological order.
//!
//! All operations are bitwise deterministic given identical inputs and
//! element type. A graph instance is confined to one execution stream;
//! independent graphs may run concurrently.

use crate::tensor::{trailing_broadcast_ok, Element, Tensor, TensorError};

/// Handle to a node in a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    /// Batched matrix product over the last two axes. Leading axes must be
    /// equal, or one operand may be rank-2 and is broadcast.
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Scale { x: NodeId, factor: f64 },
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    GatherRows { table: NodeId, ids: Vec<usize> },
    Reshape { x: NodeId },
    TransposeMat(NodeId),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    /// Forget-gate carry tensor: [.., L, D] -> [.., L, L+1, D].
    CarryTensor { gates: NodeId },
    /// Contraction of a carry tensor with stacked [c_in; u_1..u_L] rows.
    CarryApply { carry: NodeId, stack: NodeId },
    SumAll(NodeId),
}

struct Node<E: Element> {
    op: Op,
    value: Tensor<E>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients<E: Element = f64> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient accumulated at `id`, if any flowed there.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, with zeros when nothing flowed to it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<E> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Append-only autodiff arena.
pub struct Graph<E: Element = f64> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id` during the forward pass.
    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor<E>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Gradient-requiring input (parameters and any input whose gradient is
    /// wanted).
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient (data, masks, carried state).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    // ----- primitive operations -------------------------------------------

    /// Batched matrix product; rank-2 x rank-2 is the plain `[m,k] x [k,n]`
    /// case. Gradients: dA = dC B^T, dB = A^T dC.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
            context: "matmul",
        };
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (av.rows(), av.cols());
        let (kb, n) = (bv.rows(), bv.cols());
        if ka != kb {
            return Err(mismatch());
        }
        let lead_a = &av.shape()[..av.rank() - 2];
        let lead_b = &bv.shape()[..bv.rank() - 2];
        let out_lead: Vec<usize> = if lead_a == lead_b {
            lead_a.to_vec()
        } else if lead_b.is_empty() {
            lead_a.to_vec()
        } else if lead_a.is_empty() {
            lead_b.to_vec()
        } else {
            return Err(mismatch());
        };
        let batch: usize = out_lead.iter().product();
        let mut out_shape = out_lead;
        out_shape.push(m);
        out_shape.push(n);
        let mut out: Tensor<E> = Tensor::zeros(&out_shape);
        let (sa, sb) = (m * ka, kb * n);
        for l in 0..batch {
            let ao = if av.leading() == 1 { 0 } else { l * sa };
            let bo = if bv.leading() == 1 { 0 } else { l * sb };
            unsafe {
                E::gemm(
                    m,
                    ka,
                    n,
                    E::one(),
                    av.data().as_ptr().add(ao),
                    ka as isize,
                    1,
                    bv.data().as_ptr().add(bo),
                    n as isize,
                    1,
                    E::zero(),
                    out.data_mut().as_mut_ptr().add(l * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, out, needs))
    }

    /// Elementwise addition with trailing-dimension broadcast on either side.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_broadcast(a, b, true)
    }

    /// Hadamard product with trailing-dimension broadcast on either side.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_broadcast(a, b, false)
    }

    fn binary_broadcast(
        &mut self,
        a: NodeId,
        b: NodeId,
        is_add: bool,
    ) -> Result<NodeId, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (big, small) = if av.len() >= bv.len() { (av, bv) } else { (bv, av) };
        if !trailing_broadcast_ok(big.shape(), small.shape()) {
            return Err(TensorError::ShapeMismatch {
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
                context: if is_add { "add" } else { "mul" },
            });
        }
        let chunk = small.len().max(1);
        let mut out = Tensor::zeros(big.shape());
        let (bd, sd, od) = (big.data(), small.data(), out.data_mut());
        for (i, o) in od.iter_mut().enumerate() {
            let s = sd[i % chunk];
            *o = if is_add { bd[i] + s } else { bd[i] * s };
        }
        let needs = self.needs(a) || self.needs(b);
        let op = if is_add { Op::Add { a, b } } else { Op::Mul { a, b } };
        Ok(self.push(op, out, needs))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let half = E::from_f64(0.5);
        let v = self.nodes[x.0]
            .value
            .map(|t| half * ((t * half).tanh() + E::one()));
        let needs = self.needs(x);
        self.push(Op::Sigmoid(x), v, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(|t| t.tanh());
        let needs = self.needs(x);
        self.push(Op::Tanh(x), v, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let z = E::zero();
        let v = self.nodes[x.0].value.map(|t| if t > z { t } else { z });
        let needs = self.needs(x);
        self.push(Op::Relu(x), v, needs)
    }

    /// Multiplication by a compile-time-known scalar (no gradient for the
    /// scalar itself).
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let f = E::from_f64(factor);
        let v = self.nodes[x.0].value.map(|t| t * f);
        let needs = self.needs(x);
        self.push(Op::Scale { x, factor }, v, needs)
    }

    /// Softmax over the last axis, computed with max-subtraction. Rows sum to
    /// one within 1e-12 at 64-bit.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let cols = xv.cols().max(1);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let mut m = row[0];
            for &v in row.iter() {
                m = m.max(v);
            }
            let mut sum = E::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs(x);
        self.push(Op::SoftmaxRows(x), out, needs)
    }

    /// Per-row normalisation to zero mean and unit variance over the last
    /// axis, then the affine map `gain * xhat + bias`. Epsilon 1e-5 sits
    /// inside the square root.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
                context: "layer_norm gain/bias",
            });
        }
        let mut out = xv.clone();
        let (g, b) = (gv.data(), bv.data());
        for row in out.data_mut().chunks_mut(d) {
            let (mean, inv_sigma) = row_moments(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mean) * inv_sigma) + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out, needs))
    }

    /// Total negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` ([t, V]). Returns a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, TensorError> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() != 2 {
            return Err(TensorError::Rank {
                rank: lv.rank(),
                required: 2,
                context: "cross_entropy logits",
            });
        }
        let (t, vocab) = (lv.rows(), lv.cols());
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
                context: "cross_entropy targets",
            });
        }
        for (pos, &id) in targets.iter().enumerate() {
            if id >= vocab {
                return Err(TensorError::TargetOutOfRange {
                    id,
                    vocab,
                    position: pos,
                });
            }
        }
        let mut total = E::zero();
        for (row, &target) in lv.data().chunks(vocab).zip(targets) {
            total += log_sum_exp(row) - row[target];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(total),
            needs,
        ))
    }

    /// Row lookup into a rank-2 table; the backward pass scatter-adds into
    /// the table rows. Serves as both embedding lookup and row selection.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(TensorError::Rank {
                rank: tv.rank(),
                required: 2,
                context: "gather_rows table",
            });
        }
        let (r, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    extent: r,
                    context: "gather_rows",
                });
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            out,
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, v, needs))
    }

    /// Swap of the last two axes (batched matrix transpose).
    pub fn transpose_mat(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() < 2 {
            return Err(TensorError::Rank {
                rank: xv.rank(),
                required: 2,
                context: "transpose",
            });
        }
        let v = transpose_last_two(xv);
        let needs = self.needs(x);
        Ok(self.push(Op::TransposeMat(x), v, needs))
    }

    /// Contiguous slice along the row axis (second-to-last).
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() < 2 {
            return Err(TensorError::Rank {
                rank: xv.rank(),
                required: 2,
                context: "slice_rows",
            });
        }
        if start + len > xv.rows() {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                extent: xv.rows(),
                context: "slice_rows",
            });
        }
        let (lead, rows, cols) = (xv.leading(), xv.rows(), xv.cols());
        let mut shape = xv.shape().to_vec();
        let rank = shape.len();
        shape[rank - 2] = len;
        let mut data = Vec::with_capacity(lead * len * cols);
        for l in 0..lead {
            let base = l * rows * cols + start * cols;
            data.extend_from_slice(&xv.data()[base..base + len * cols]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start }, out, needs))
    }

    /// Contiguous slice along the last axis.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        if start + len > xv.cols() {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                extent: xv.cols(),
                context: "slice_cols",
            });
        }
        let cols = xv.cols();
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape = vec![1];
        }
        let rank = shape.len();
        shape[rank - 1] = len;
        let mut data = Vec::with_capacity(xv.len() / cols * len);
        for row in xv.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start }, out, needs))
    }

    /// Concatenation along the row axis; leading dims and cols must agree.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        self.concat(parts, true)
    }

    /// Concatenation along the last axis; leading dims and rows must agree.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        self.concat(parts, false)
    }

    fn concat(&mut self, parts: &[NodeId], by_rows: bool) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = &self.nodes[parts[0].0].value;
        let context: &'static str = if by_rows { "concat_rows" } else { "concat_cols" };
        let rank = first.rank();
        if rank < 2 {
            return Err(TensorError::Rank {
                rank,
                required: 2,
                context,
            });
        }
        let lead_shape = first.shape()[..rank - 2].to_vec();
        let (rows0, cols0) = (first.rows(), first.cols());
        let mut axis_total = 0usize;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let same_other = if by_rows {
                v.cols() == cols0
            } else {
                v.rows() == rows0
            };
            if v.rank() != rank || v.shape()[..rank - 2] != lead_shape[..] || !same_other {
                return Err(TensorError::ShapeMismatch {
                    left: first.shape().to_vec(),
                    right: v.shape().to_vec(),
                    context,
                });
            }
            axis_total += if by_rows { v.rows() } else { v.cols() };
        }
        let lead: usize = lead_shape.iter().product();
        let (out_rows, out_cols) = if by_rows {
            (axis_total, cols0)
        } else {
            (rows0, axis_total)
        };
        let mut shape = lead_shape.clone();
        shape.push(out_rows);
        shape.push(out_cols);
        let mut data = vec![E::zero(); lead * out_rows * out_cols];
        let mut offset = 0usize;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let (r, c) = (v.rows(), v.cols());
            for l in 0..lead {
                for i in 0..r {
                    let src = &v.data()[l * r * c + i * c..l * r * c + (i + 1) * c];
                    let dst_base = if by_rows {
                        l * out_rows * out_cols + (offset + i) * out_cols
                    } else {
                        l * out_rows * out_cols + i * out_cols + offset
                    };
                    data[dst_base..dst_base + c].copy_from_slice(src);
                }
            }
            offset += if by_rows { r } else { c };
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        let op = if by_rows {
            Op::ConcatRows {
                parts: parts.to_vec(),
            }
        } else {
            Op::ConcatCols {
                parts: parts.to_vec(),
            }
        };
        Ok(self.push(op, out, needs))
    }

    /// Builds the carry tensor of suffix forget-gate products from a block of
    /// gates `[.., L, D]`, giving `[.., L, L+1, D]`:
    /// row k holds `prod(f[i..=k])` in column i for `i <= k`, a one in column
    /// `k+1`, and zeros above that band.
    pub fn carry_tensor(&mut self, gates: NodeId) -> Result<NodeId, TensorError> {
        let fv = &self.nodes[gates.0].value;
        if fv.rank() < 2 {
            return Err(TensorError::Rank {
                rank: fv.rank(),
                required: 2,
                context: "carry_tensor",
            });
        }
        let (lead, big_l, d) = (fv.leading(), fv.rows(), fv.cols());
        let mut shape = fv.shape()[..fv.rank() - 2].to_vec();
        shape.extend([big_l, big_l + 1, d]);
        let mut out = Tensor::zeros(&shape);
        let row_sz = (big_l + 1) * d;
        for l in 0..lead {
            let f = &fv.data()[l * big_l * d..(l + 1) * big_l * d];
            let o = &mut out.data_mut()[l * big_l * row_sz..(l + 1) * big_l * row_sz];
            for k in 0..big_l {
                let fk = &f[k * d..(k + 1) * d];
                if k == 0 {
                    o[..d].copy_from_slice(fk);
                } else {
                    // F[k, i] = F[k-1, i] * f_k for i <= k
                    let (prev, cur) = o.split_at_mut(k * row_sz);
                    let prev = &prev[(k - 1) * row_sz..];
                    for i in 0..=k {
                        for j in 0..d {
                            cur[i * d + j] = prev[i * d + j] * fk[j];
                        }
                    }
                }
                for j in 0..d {
                    o[k * row_sz + (k + 1) * d + j] = E::one();
                }
            }
        }
        let needs = self.needs(gates);
        Ok(self.push(Op::CarryTensor { gates }, out, needs))
    }

    /// Contracts a carry tensor `[.., L, L+1, D]` with stacked rows
    /// `[.., L+1, D]` (initial cell state followed by the block's update
    /// vectors), producing all L in-block cell states at once.
    pub fn carry_apply(&mut self, carry: NodeId, stack: NodeId) -> Result<NodeId, TensorError> {
        let cv = &self.nodes[carry.0].value;
        let sv = &self.nodes[stack.0].value;
        let mismatch = || TensorError::ShapeMismatch {
            left: cv.shape().to_vec(),
            right: sv.shape().to_vec(),
            context: "carry_apply",
        };
        if cv.rank() < 3 || sv.rank() < 2 {
            return Err(mismatch());
        }
        let d = cv.cols();
        let big_l = cv.shape()[cv.rank() - 3];
        if cv.rows() != big_l + 1 || sv.rows() != big_l + 1 || sv.cols() != d {
            return Err(mismatch());
        }
        let lead_c = &cv.shape()[..cv.rank() - 3];
        let lead_s = &sv.shape()[..sv.rank() - 2];
        if lead_c != lead_s {
            return Err(mismatch());
        }
        let lead: usize = lead_c.iter().product();
        let mut shape = lead_c.to_vec();
        shape.extend([big_l, d]);
        let mut out = Tensor::zeros(&shape);
        let (carry_sz, stack_sz) = (big_l * (big_l + 1) * d, (big_l + 1) * d);
        for l in 0..lead {
            let cval = &cv.data()[l * carry_sz..(l + 1) * carry_sz];
            let s = &sv.data()[l * stack_sz..(l + 1) * stack_sz];
            let o = &mut out.data_mut()[l * big_l * d..(l + 1) * big_l * d];
            for k in 0..big_l {
                for i in 0..=big_l {
                    let f = &cval[k * stack_sz + i * d..k * stack_sz + (i + 1) * d];
                    let u = &s[i * d..(i + 1) * d];
                    for j in 0..d {
                        o[k * d + j] += f[j] * u[j];
                    }
                }
            }
        }
        let needs = self.needs(carry) || self.needs(stack);
        Ok(self.push(Op::CarryApply { carry, stack }, out, needs))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut total = E::zero();
        for &v in self.nodes[x.0].value.data() {
            total += v;
        }
        let needs = self.needs(x);
        self.push(Op::SumAll(x), Tensor::scalar(total), needs)
    }

    // ----- backward --------------------------------------------------------

    /// Reverse-mode sweep from `output`, seeding with ones. Every
    /// gradient-requiring node reachable from `output` receives exactly one
    /// accumulated gradient.
    pub fn backward(&self, output: NodeId) -> Gradients<E> {
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(
            self.nodes[output.0].value.shape(),
            E::one(),
        ));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            self.backward_op(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], id: NodeId, delta: Tensor<E>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Gradient for one operand of a broadcast binary op: sums the upstream
    /// gradient over leading axes when the operand was broadcast.
    fn reduce_to_shape(&self, grad: &Tensor<E>, shape: &[usize]) -> Tensor<E> {
        if grad.shape() == shape {
            return grad.clone();
        }
        let chunk: usize = shape.iter().product::<usize>().max(1);
        let mut out = Tensor::zeros(shape);
        let od = out.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            od[i % chunk] += g;
        }
        out
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, idx: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let value = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                let batch = value.leading();
                if self.needs(*a) {
                    let mut da: Tensor<E> = Tensor::zeros(av.shape());
                    let a_batched = av.leading() > 1 || av.rank() > 2;
                    for l in 0..batch {
                        let go = l * m * n;
                        let bo = if bv.leading() == 1 && bv.rank() == 2 { 0 } else { l * k * n };
                        let ao = if a_batched { l * m * k } else { 0 };
                        // dA += dC . B^T
                        unsafe {
                            E::gemm(
                                m,
                                n,
                                k,
                                E::one(),
                                g.data().as_ptr().add(go),
                                n as isize,
                                1,
                                bv.data().as_ptr().add(bo),
                                1,
                                n as isize,
                                E::one(),
                                da.data_mut().as_mut_ptr().add(ao),
                                k as isize,
                                1,
                            );
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db: Tensor<E> = Tensor::zeros(bv.shape());
                    let b_batched = bv.leading() > 1 || bv.rank() > 2;
                    for l in 0..batch {
                        let go = l * m * n;
                        let ao = if av.leading() == 1 && av.rank() == 2 { 0 } else { l * m * k };
                        let bo = if b_batched { l * k * n } else { 0 };
                        // dB += A^T . dC
                        unsafe {
                            E::gemm(
                                k,
                                m,
                                n,
                                E::one(),
                                self.nodes[a.0].value.data().as_ptr().add(ao),
                                1,
                                k as isize,
                                g.data().as_ptr().add(go),
                                n as isize,
                                1,
                                E::one(),
                                db.data_mut().as_mut_ptr().add(bo),
                                n as isize,
                                1,
                            );
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    let da = self.reduce_to_shape(g, self.nodes[a.0].value.shape());
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = self.reduce_to_shape(g, self.nodes[b.0].value.shape());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (achunk, bchunk) = (av.len().max(1), bv.len().max(1));
                if self.needs(*a) {
                    let mut da_full = g.clone();
                    for (i, d) in da_full.data_mut().iter_mut().enumerate() {
                        *d = *d * bv.data()[i % bchunk];
                    }
                    let da = self.reduce_to_shape(&da_full, av.shape());
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db_full = g.clone();
                    for (i, d) in db_full.data_mut().iter_mut().enumerate() {
                        *d = *d * av.data()[i % achunk];
                    }
                    let db = self.reduce_to_shape(&db_full, bv.shape());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(value.data()) {
                    *d = *d * s * (E::one() - s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = g.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(value.data()) {
                    *d = *d * (E::one() - t * t);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                    if v <= E::zero() {
                        *d = E::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Scale { x, factor } => {
                let f = E::from_f64(*factor);
                let dx = g.map(|v| v * f);
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let cols = value.cols().max(1);
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(cols).zip(value.data().chunks(cols)) {
                    let mut dot = E::zero();
                    for (d, y) in drow.iter().zip(yrow) {
                        dot += *d * *y;
                    }
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = *y * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.cols();
                let gv = self.nodes[gain.0].value.data();
                let rows = xv.len() / d;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = Tensor::zeros(&[d]);
                let mut dbias = Tensor::zeros(&[d]);
                let inv_d = E::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let xrow = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let (mean, inv_sigma) = row_moments(xrow);
                    let mut mean_dxhat = E::zero();
                    let mut mean_dxhat_xhat = E::zero();
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv_sigma;
                        let dxhat = grow[j] * gv[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgain.data_mut()[j] += grow[j] * xhat;
                        dbias.data_mut()[j] += grow[j];
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv_sigma;
                        let dxhat = grow[j] * gv[j];
                        dx.data_mut()[r * d + j] =
                            (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_sigma;
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, dgain);
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, dbias);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = &self.nodes[logits.0].value;
                let vocab = lv.cols();
                let scale = g.item();
                let mut dl = Tensor::zeros(lv.shape());
                for (r, &target) in targets.iter().enumerate() {
                    let row = &lv.data()[r * vocab..(r + 1) * vocab];
                    let mut m = row[0];
                    for &v in row {
                        m = m.max(v);
                    }
                    let mut sum = E::zero();
                    for &v in row {
                        sum += (v - m).exp();
                    }
                    let drow = &mut dl.data_mut()[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        let p = (row[j] - m).exp() / sum;
                        drow[j] = scale * (p - if j == target { E::one() } else { E::zero() });
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::GatherRows { table, ids } => {
                let tv = &self.nodes[table.0].value;
                let d = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += s;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Reshape { x } => {
                let dx = g
                    .reshaped(self.nodes[x.0].value.shape())
                    .expect("reshape backward preserves element count");
                self.accumulate(grads, *x, dx);
            }
            Op::TransposeMat(x) => {
                let dx = transpose_last_two(g);
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[x.0].value;
                let (lead, rows, cols) = (xv.leading(), xv.rows(), xv.cols());
                let len = value.rows();
                let mut dx = Tensor::zeros(xv.shape());
                for l in 0..lead {
                    let src = &g.data()[l * len * cols..(l + 1) * len * cols];
                    let dst_base = l * rows * cols + start * cols;
                    dx.data_mut()[dst_base..dst_base + len * cols].copy_from_slice(src);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let len = value.cols();
                let rows_total = xv.len() / cols;
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..rows_total {
                    let src = &g.data()[r * len..(r + 1) * len];
                    let dst = &mut dx.data_mut()[r * cols + start..r * cols + start + len];
                    dst.copy_from_slice(src);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows { parts } => {
                let lead = value.leading();
                let (out_rows, cols) = (value.rows(), value.cols());
                let mut offset = 0usize;
                for &p in parts {
                    let pv = &self.nodes[p.0].value;
                    let r = pv.rows();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(pv.shape());
                        for l in 0..lead {
                            let src_base = l * out_rows * cols + offset * cols;
                            let dst_base = l * r * cols;
                            dp.data_mut()[dst_base..dst_base + r * cols]
                                .copy_from_slice(&g.data()[src_base..src_base + r * cols]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += r;
                }
            }
            Op::ConcatCols { parts } => {
                let out_cols = value.cols();
                let rows_total = value.len() / out_cols;
                let mut offset = 0usize;
                for &p in parts {
                    let pv = &self.nodes[p.0].value;
                    let c = pv.cols();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(pv.shape());
                        for r in 0..rows_total {
                            let src = &g.data()[r * out_cols + offset..r * out_cols + offset + c];
                            dp.data_mut()[r * c..(r + 1) * c].copy_from_slice(src);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += c;
                }
            }
            Op::CarryTensor { gates } => {
                let fv = &self.nodes[gates.0].value;
                let (lead, big_l, d) = (fv.leading(), fv.rows(), fv.cols());
                let row_sz = (big_l + 1) * d;
                let mut df = Tensor::zeros(fv.shape());
                for l in 0..lead {
                    let f = &fv.data()[l * big_l * d..(l + 1) * big_l * d];
                    let fout = &value.data()[l * big_l * row_sz..(l + 1) * big_l * row_sz];
                    let dout = &g.data()[l * big_l * row_sz..(l + 1) * big_l * row_sz];
                    let dfl = &mut df.data_mut()[l * big_l * d..(l + 1) * big_l * d];
                    // Working row: accumulated dF flowing down to row k.
                    let mut w = vec![E::zero(); row_sz];
                    w.copy_from_slice(&dout[(big_l - 1) * row_sz..big_l * row_sz]);
                    for k in (0..big_l).rev() {
                        // df_k += sum_{i<=k} W[i] * F[k-1, i]; F[-1, 0] = 1.
                        for i in 0..=k {
                            for j in 0..d {
                                let prev = if k == 0 {
                                    if i == 0 {
                                        E::one()
                                    } else {
                                        E::zero()
                                    }
                                } else {
                                    fout[(k - 1) * row_sz + i * d + j]
                                };
                                dfl[k * d + j] += w[i * d + j] * prev;
                            }
                        }
                        if k > 0 {
                            let fk = &f[k * d..(k + 1) * d];
                            for i in 0..row_sz / d {
                                for j in 0..d {
                                    w[i * d + j] = w[i * d + j] * fk[j]
                                        + dout[(k - 1) * row_sz + i * d + j];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *gates, df);
            }
            Op::CarryApply { carry, stack } => {
                let cv = &self.nodes[carry.0].value;
                let sv = &self.nodes[stack.0].value;
                let d = cv.cols();
                let big_l = cv.shape()[cv.rank() - 3];
                let lead: usize = cv.shape()[..cv.rank() - 3].iter().product();
                let (carry_sz, stack_sz) = (big_l * (big_l + 1) * d, (big_l + 1) * d);
                if self.needs(*carry) {
                    let mut dc = Tensor::zeros(cv.shape());
                    for l in 0..lead {
                        let s = &sv.data()[l * stack_sz..(l + 1) * stack_sz];
                        let go = &g.data()[l * big_l * d..(l + 1) * big_l * d];
                        let dcl = &mut dc.data_mut()[l * carry_sz..(l + 1) * carry_sz];
                        for k in 0..big_l {
                            for i in 0..=big_l {
                                for j in 0..d {
                                    dcl[k * stack_sz + i * d + j] += go[k * d + j] * s[i * d + j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *carry, dc);
                }
                if self.needs(*stack) {
                    let mut ds = Tensor::zeros(sv.shape());
                    for l in 0..lead {
                        let cval = &cv.data()[l * carry_sz..(l + 1) * carry_sz];
                        let go = &g.data()[l * big_l * d..(l + 1) * big_l * d];
                        let dsl = &mut ds.data_mut()[l * stack_sz..(l + 1) * stack_sz];
                        for k in 0..big_l {
                            for i in 0..=big_l {
                                for j in 0..d {
                                    dsl[i * d + j] += go[k * d + j] * cval[k * stack_sz + i * d + j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *stack, ds);
                }
            }
            Op::SumAll(x) => {
                let dl = g.item();
                let dx = Tensor::full(self.nodes[x.0].value.shape(), dl);
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

/// Mean and inverse standard deviation of one row, with epsilon 1e-5 inside
/// the square root.
fn row_moments<E: Element>(row: &[E]) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mut mean = E::zero();
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = E::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let inv_sigma = E::one() / (var + E::from_f64(1e-5)).sqrt();
    (mean, inv_sigma)
}

fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let mut m = row[0];
    for &v in row {
        m = m.max(v);
    }
    let mut sum = E::zero();
    for &v in row {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

fn transpose_last_two<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (lead, r, c) = (x.leading(), x.rows(), x.cols());
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape.swap(rank - 2, rank - 1);
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    for l in 0..lead {
        let base = l * r * c;
        for i in 0..r {
            for j in 0..c {
                od[base + j * r + i] = x.data()[base + i * c + j];
            }
        }
    }
    out
}
