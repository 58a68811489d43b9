//! Define-by-run operation tape.
//!
//! Every forward op appends one node holding the computed value and the
//! handles of its inputs. `backward` walks the tape in reverse insertion
//! order exactly once, accumulating gradients into the nodes that asked for
//! them. A tape lives for one forward/backward pass and is rebuilt per step.

use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeId(usize);

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(TapeId, TapeId),
    /// Valid causal convolution along axis 0; bias always present.
    Conv1d {
        x: TapeId,
        w: TapeId,
        b: TapeId,
    },
    Binary {
        kind: BinaryKind,
        lhs: TapeId,
        rhs: TapeId,
    },
    Unary {
        kind: UnaryKind,
        arg: TapeId,
    },
    Concat {
        inputs: Vec<TapeId>,
        axis: usize,
    },
    /// Row e of the input is added into output row `targets[e]`.
    ScatterSum {
        messages: TapeId,
        targets: Vec<usize>,
    },
    /// Output row e is a copy of input row `rows[e]`.
    GatherRows {
        src: TapeId,
        rows: Vec<usize>,
    },
    Reshape(TapeId),
    Permute {
        src: TapeId,
        axes: Vec<usize>,
    },
    Sum(TapeId),
    Scale {
        src: TapeId,
        factor: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward pass supporting one (or repeated, accumulating) backward
/// sweeps. Single-threaded by design; spin up one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable leaf (a parameter or checked input).
    pub fn leaf(&mut self, value: Tensor) -> TapeId {
        self.push(value, true, Op::Leaf)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> TapeId {
        self.push(value, false, Op::Leaf)
    }

    /// Forward value of a node.
    pub fn value(&self, id: TapeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by `backward`, if any reached this node.
    pub fn grad(&self, id: TapeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TapeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TapeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[TapeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape_err(op: &'static str, details: String) -> TensorError {
        TensorError::ShapeMismatch { op, details }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    /// Valid (no padding) convolution along the time axis.
    ///
    /// `x` is `[T, C_in]` or `[T, N, C_in]` (per-node batch), `w` is
    /// `[K, C_in, C_out]`, `b` is `[C_out]`. Output step `t` sees input steps
    /// `t..t+K-1` only.
    pub fn conv1d(&mut self, x: TapeId, w: TapeId, b: TapeId) -> Result<TapeId, TensorError> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sw.len() != 3 {
            return Err(Self::shape_err("conv1d", format!("weight {sw:?}")));
        }
        let (k, c_in, c_out) = (sw[0], sw[1], sw[2]);
        if sb != [c_out] {
            return Err(Self::shape_err(
                "conv1d",
                format!("bias {sb:?} vs C_out {c_out}"),
            ));
        }
        let (t_len, batch) = match sx.len() {
            2 if sx[1] == c_in => (sx[0], 1),
            3 if sx[2] == c_in => (sx[0], sx[1]),
            _ => {
                return Err(Self::shape_err(
                    "conv1d",
                    format!("input {sx:?} vs weight {sw:?}"),
                ))
            }
        };
        if t_len < k {
            return Err(TensorError::WindowTooShort { t: t_len, k });
        }
        let t_out = t_len - k + 1;
        let out_shape: Vec<usize> = if sx.len() == 2 {
            vec![t_out, c_out]
        } else {
            vec![t_out, batch, c_out]
        };
        let mut out = Tensor::zeros(&out_shape);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for t in 0..t_out {
                for nb in 0..batch {
                    let o_base = (t * batch + nb) * c_out;
                    od[o_base..o_base + c_out].copy_from_slice(bd);
                    for kk in 0..k {
                        let x_base = ((t + kk) * batch + nb) * c_in;
                        for ci in 0..c_in {
                            let xv = xd[x_base + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let w_base = (kk * c_in + ci) * c_out;
                            for co in 0..c_out {
                                od[o_base + co] += xv * wd[w_base + co];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(out, rg, Op::Conv1d { x, w, b }))
    }

    fn binary(
        &mut self,
        kind: BinaryKind,
        lhs: TapeId,
        rhs: TapeId,
        op_name: &'static str,
    ) -> Result<TapeId, TensorError> {
        let (sl, sr) = (self.value(lhs).shape(), self.value(rhs).shape());
        // Identical shapes, or rhs broadcast over leading axes of lhs.
        let trailing = sl.len() >= sr.len() && sl[sl.len() - sr.len()..] == *sr;
        if !trailing {
            return Err(Self::shape_err(op_name, format!("{sl:?} vs {sr:?}")));
        }
        let rlen = self.value(rhs).len().max(1);
        let mut out = self.value(lhs).clone();
        {
            let rd = self.value(rhs).data();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let r = rd[i % rlen];
                *v = match kind {
                    BinaryKind::Add => *v + r,
                    BinaryKind::Sub => *v - r,
                    BinaryKind::Mul => *v * r,
                };
            }
        }
        let rg = self.any_requires(&[lhs, rhs]);
        Ok(self.push(out, rg, Op::Binary { kind, lhs, rhs }))
    }

    pub fn add(&mut self, lhs: TapeId, rhs: TapeId) -> Result<TapeId, TensorError> {
        self.binary(BinaryKind::Add, lhs, rhs, "add")
    }

    pub fn sub(&mut self, lhs: TapeId, rhs: TapeId) -> Result<TapeId, TensorError> {
        self.binary(BinaryKind::Sub, lhs, rhs, "sub")
    }

    pub fn mul(&mut self, lhs: TapeId, rhs: TapeId) -> Result<TapeId, TensorError> {
        self.binary(BinaryKind::Mul, lhs, rhs, "mul")
    }

    fn unary(&mut self, kind: UnaryKind, arg: TapeId) -> TapeId {
        let value = self.value(arg).map(|v| match kind {
            UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Abs => v.abs(),
        });
        let rg = self.any_requires(&[arg]);
        self.push(value, rg, Op::Unary { kind, arg })
    }

    pub fn sigmoid(&mut self, arg: TapeId) -> TapeId {
        self.unary(UnaryKind::Sigmoid, arg)
    }

    pub fn tanh(&mut self, arg: TapeId) -> TapeId {
        self.unary(UnaryKind::Tanh, arg)
    }

    pub fn relu(&mut self, arg: TapeId) -> TapeId {
        self.unary(UnaryKind::Relu, arg)
    }

    pub fn abs(&mut self, arg: TapeId) -> TapeId {
        self.unary(UnaryKind::Abs, arg)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[TapeId], axis: usize) -> Result<TapeId, TensorError> {
        let first = self
            .value(*inputs.first().ok_or(Self::shape_err("concat", "no inputs".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Self::shape_err(
                "concat",
                format!("axis {axis} for rank {}", first.len()),
            ));
        }
        let mut axis_total = 0;
        for id in inputs {
            let s = self.value(*id).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Self::shape_err(
                    "concat",
                    format!("{s:?} vs {first:?} on axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        // Copy block-wise: each input contributes contiguous runs of
        // `extent * inner` once per outer index.
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        let out_row = axis_total * inner;
        let mut axis_off = 0;
        for id in inputs {
            let src = self.value(*id);
            let extent = src.shape()[axis];
            let run = extent * inner;
            for o in 0..outer {
                let dst = o * out_row + axis_off * inner;
                out.data_mut()[dst..dst + run].copy_from_slice(&src.data()[o * run..(o + 1) * run]);
            }
            axis_off += extent;
        }
        let rg = self.any_requires(inputs);
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Sum rows of `messages` into a `[rows, d]` output by target index;
    /// rows receiving nothing stay zero.
    pub fn scatter_sum(
        &mut self,
        messages: TapeId,
        targets: &[usize],
        rows: usize,
    ) -> Result<TapeId, TensorError> {
        let s = self.value(messages).shape().to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Self::shape_err(
                "scatter_sum",
                format!("messages {s:?} vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= rows) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                len: rows,
            });
        }
        let d = s[1];
        let mut out = Tensor::zeros(&[rows, d]);
        {
            let md = self.value(messages).data();
            let od = out.data_mut();
            for (e, &t) in targets.iter().enumerate() {
                for c in 0..d {
                    od[t * d + c] += md[e * d + c];
                }
            }
        }
        let rg = self.any_requires(&[messages]);
        Ok(self.push(
            out,
            rg,
            Op::ScatterSum {
                messages,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Select rows (axis 0) of `src` by index, repeats allowed.
    pub fn gather_rows(&mut self, src: TapeId, rows: &[usize]) -> Result<TapeId, TensorError> {
        let s = self.value(src).shape().to_vec();
        if s.is_empty() {
            return Err(Self::shape_err("gather_rows", "rank-0 source".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                len: s[0],
            });
        }
        let inner: usize = s[1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[0] = rows.len();
        let mut out = Tensor::zeros(&out_shape);
        {
            let sd = self.value(src).data();
            let od = out.data_mut();
            for (e, &r) in rows.iter().enumerate() {
                od[e * inner..(e + 1) * inner].copy_from_slice(&sd[r * inner..(r + 1) * inner]);
            }
        }
        let rg = self.any_requires(&[src]);
        Ok(self.push(
            out,
            rg,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Same elements under a new shape.
    pub fn reshape(&mut self, src: TapeId, shape: Vec<usize>) -> Result<TapeId, TensorError> {
        let value = self.value(src).reshaped(shape)?;
        let rg = self.any_requires(&[src]);
        Ok(self.push(value, rg, Op::Reshape(src)))
    }

    /// Reorder axes; `axes[i]` names the source axis placed at position `i`.
    pub fn permute(&mut self, src: TapeId, axes: &[usize]) -> Result<TapeId, TensorError> {
        let value = self.value(src).permuted(axes)?;
        let rg = self.any_requires(&[src]);
        Ok(self.push(
            value,
            rg,
            Op::Permute {
                src,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Sum of all elements as a rank-0 scalar. Compensated so that batch
    /// losses (and the finite-difference oracle probing them) keep full
    /// precision regardless of element count.
    pub fn sum(&mut self, src: TapeId) -> TapeId {
        let total = neumaier_sum(self.value(src).data());
        let rg = self.any_requires(&[src]);
        self.push(Tensor::scalar(total), rg, Op::Sum(src))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, src: TapeId, factor: f64) -> TapeId {
        let value = self.value(src).map(|v| v * factor);
        let rg = self.any_requires(&[src]);
        self.push(value, rg, Op::Scale { src, factor })
    }

    /// Mean of all elements as a rank-0 scalar.
    pub fn mean(&mut self, src: TapeId) -> TapeId {
        let n = self.value(src).len().max(1);
        let s = self.sum(src);
        self.scale(s, 1.0 / n as f64)
    }

    fn accumulate(&mut self, id: TapeId, delta: &Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => g.add_scaled(delta, 1.0),
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate gradients are per-sweep scratch and reset here,
    /// otherwise a second sweep would re-propagate the first one's flow.
    pub fn backward(&mut self, loss: TapeId) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        let seed = Tensor::filled(&loss_shape, 1.0);
        self.accumulate(loss, &seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = self.value(a).shape();
                        (s[0], s[1])
                    };
                    let n = self.value(b).shape()[1];
                    if self.nodes[a.0].requires_grad {
                        // grad_a = g . b^T
                        let bt = self.value(b).permuted(&[1, 0]).unwrap();
                        let ga = matmul_raw(&grad, &bt, m, n, k);
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        // grad_b = a^T . g
                        let at = self.value(a).permuted(&[1, 0]).unwrap();
                        let gb = matmul_raw(&at, &grad, k, m, n);
                        self.accumulate(b, &gb);
                    }
                }
                Op::Conv1d { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let sw = self.value(w).shape().to_vec();
                    let (k, c_in, c_out) = (sw[0], sw[1], sw[2]);
                    let sx = self.value(x).shape().to_vec();
                    let batch = if sx.len() == 3 { sx[1] } else { 1 };
                    let t_out = grad.shape()[0];
                    let gd = grad.data();
                    if self.nodes[x.0].requires_grad {
                        let mut gx = Tensor::zeros(&sx);
                        let wd = self.value(w).data();
                        let gxd = gx.data_mut();
                        for t in 0..t_out {
                            for nb in 0..batch {
                                let g_base = (t * batch + nb) * c_out;
                                for kk in 0..k {
                                    let x_base = ((t + kk) * batch + nb) * c_in;
                                    for ci in 0..c_in {
                                        let w_base = (kk * c_in + ci) * c_out;
                                        let mut acc = 0.0;
                                        for co in 0..c_out {
                                            acc += gd[g_base + co] * wd[w_base + co];
                                        }
                                        gxd[x_base + ci] += acc;
                                    }
                                }
                            }
                        }
                        self.accumulate(x, &gx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let mut gw = Tensor::zeros(&sw);
                        let xd = self.value(x).data();
                        let gwd = gw.data_mut();
                        for t in 0..t_out {
                            for nb in 0..batch {
                                let g_base = (t * batch + nb) * c_out;
                                for kk in 0..k {
                                    let x_base = ((t + kk) * batch + nb) * c_in;
                                    for ci in 0..c_in {
                                        let xv = xd[x_base + ci];
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        let w_base = (kk * c_in + ci) * c_out;
                                        for co in 0..c_out {
                                            gwd[w_base + co] += xv * gd[g_base + co];
                                        }
                                    }
                                }
                            }
                        }
                        self.accumulate(w, &gw);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut gb = Tensor::zeros(&[c_out]);
                        let gbd = gb.data_mut();
                        for chunk in gd.chunks_exact(c_out) {
                            for (co, &g) in chunk.iter().enumerate() {
                                gbd[co] += g;
                            }
                        }
                        self.accumulate(b, &gb);
                    }
                }
                Op::Binary { kind, lhs, rhs } => {
                    let (kind, lhs, rhs) = (*kind, *lhs, *rhs);
                    if self.nodes[lhs.0].requires_grad {
                        let gl = match kind {
                            BinaryKind::Add | BinaryKind::Sub => grad.clone(),
                            BinaryKind::Mul => {
                                broadcast_mul(&grad, self.value(rhs))
                            }
                        };
                        self.accumulate(lhs, &gl);
                    }
                    if self.nodes[rhs.0].requires_grad {
                        let rhs_shape = self.value(rhs).shape().to_vec();
                        let full = match kind {
                            BinaryKind::Add => grad.clone(),
                            BinaryKind::Sub => grad.map(|v| -v),
                            BinaryKind::Mul => broadcast_mul(&grad, self.value(lhs)),
                        };
                        let gr = reduce_to_shape(&full, &rhs_shape);
                        self.accumulate(rhs, &gr);
                    }
                }
                Op::Unary { kind, arg } => {
                    let (kind, arg) = (*kind, *arg);
                    if self.nodes[arg.0].requires_grad {
                        let out_val = &self.nodes[i].value;
                        let in_val = self.value(arg);
                        let mut ga = grad.clone();
                        for (j, g) in ga.data_mut().iter_mut().enumerate() {
                            *g *= match kind {
                                // sigmoid/tanh use the saved output.
                                UnaryKind::Sigmoid => {
                                    let s = out_val.data()[j];
                                    s * (1.0 - s)
                                }
                                UnaryKind::Tanh => {
                                    let y = out_val.data()[j];
                                    1.0 - y * y
                                }
                                UnaryKind::Relu => {
                                    if in_val.data()[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                // Subgradient 0 at the tie point.
                                UnaryKind::Abs => in_val.data()[j].signum() * f64::from(in_val.data()[j] != 0.0),
                            };
                        }
                        self.accumulate(arg, &ga);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (inputs, axis) = (inputs.clone(), *axis);
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let out_row = out_shape[axis] * inner;
                    let mut axis_off = 0;
                    for id in inputs {
                        let src_shape = self.value(id).shape().to_vec();
                        let extent = src_shape[axis];
                        let run = extent * inner;
                        if self.nodes[id.0].requires_grad {
                            let mut gs = Tensor::zeros(&src_shape);
                            for o in 0..outer {
                                let from = o * out_row + axis_off * inner;
                                gs.data_mut()[o * run..(o + 1) * run]
                                    .copy_from_slice(&grad.data()[from..from + run]);
                            }
                            self.accumulate(id, &gs);
                        }
                        axis_off += extent;
                    }
                }
                Op::ScatterSum { messages, targets } => {
                    let (messages, targets) = (*messages, targets.clone());
                    if self.nodes[messages.0].requires_grad {
                        let d = self.value(messages).shape()[1];
                        let mut gm = Tensor::zeros(&[targets.len(), d]);
                        {
                            let gd = grad.data();
                            let gmd = gm.data_mut();
                            for (e, &t) in targets.iter().enumerate() {
                                gmd[e * d..(e + 1) * d].copy_from_slice(&gd[t * d..(t + 1) * d]);
                            }
                        }
                        self.accumulate(messages, &gm);
                    }
                }
                Op::GatherRows { src, rows } => {
                    let (src, rows) = (*src, rows.clone());
                    if self.nodes[src.0].requires_grad {
                        let src_shape = self.value(src).shape().to_vec();
                        let inner: usize = src_shape[1..].iter().product();
                        let mut gs = Tensor::zeros(&src_shape);
                        {
                            let gd = grad.data();
                            let gsd = gs.data_mut();
                            for (e, &r) in rows.iter().enumerate() {
                                for c in 0..inner {
                                    gsd[r * inner + c] += gd[e * inner + c];
                                }
                            }
                        }
                        self.accumulate(src, &gs);
                    }
                }
                Op::Reshape(src) => {
                    let src = *src;
                    if self.nodes[src.0].requires_grad {
                        let src_shape = self.value(src).shape().to_vec();
                        let gs = grad.reshaped(src_shape).unwrap();
                        self.accumulate(src, &gs);
                    }
                }
                Op::Permute { src, axes } => {
                    let (src, axes) = (*src, axes.clone());
                    if self.nodes[src.0].requires_grad {
                        let mut inverse = vec![0usize; axes.len()];
                        for (i, &a) in axes.iter().enumerate() {
                            inverse[a] = i;
                        }
                        let gs = grad.permuted(&inverse).unwrap();
                        self.accumulate(src, &gs);
                    }
                }
                Op::Sum(src) => {
                    let src = *src;
                    if self.nodes[src.0].requires_grad {
                        let g = grad.item();
                        let gs = Tensor::filled(self.value(src).shape(), g);
                        self.accumulate(src, &gs);
                    }
                }
                Op::Scale { src, factor } => {
                    let (src, factor) = (*src, *factor);
                    if self.nodes[src.0].requires_grad {
                        let gs = grad.map(|v| v * factor);
                        self.accumulate(src, &gs);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Neumaier variant of Kahan summation: exact to ~1 ulp of the result.
pub(crate) fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Plain `[m,k] x [k,n]` product used by forward and both backward rules.
fn matmul_raw(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `grad * other` where `other` may be trailing-broadcast against `grad`.
fn broadcast_mul(grad: &Tensor, other: &Tensor) -> Tensor {
    let olen = other.len().max(1);
    let mut out = grad.clone();
    let od = other.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= od[i % olen];
    }
    out
}

/// Sum `full` over leading axes until it matches `shape` (broadcast adjoint).
fn reduce_to_shape(full: &Tensor, shape: &[usize]) -> Tensor {
    if full.shape() == shape {
        return full.clone();
    }
    let inner: usize = shape.iter().product();
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (i, &v) in full.data().iter().enumerate() {
        od[i % inner.max(1)] += v;
    }
    out
}
