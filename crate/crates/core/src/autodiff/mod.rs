//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! Every op on a [`Graph`] computes its value eagerly and appends a node to the
//! tape, so node order is a topological order by construction. [`Graph::backward`]
//! walks the tape in reverse. Leaf gradients accumulate across backward calls until
//! [`Graph::zero_grad`]; interior gradients are recomputed on every call.
//!
//! ```
//! use alignpeft::autodiff::Graph;
//! use alignpeft::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param("x", &Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y, &[1.0]).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport, ParamAccess};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{gemm_nn, gemm_nt, gemm_tn};

/// Epsilon added to the L2 norm before dividing.
pub const L2_EPS: f64 = 1e-12;
/// Variance epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { lhs: Var, rhs: Var, rhs_t: bool },
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Mean(_) => "mean",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `rhs` broadcasts against `lhs` when it is a trailing suffix of `lhs` or a single value.
fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    numel(rhs) == 1 || (rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            label: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, label: &str, t: &Tensor) -> Var {
        self.leaf(label, t, true)
    }

    pub fn leaf(&mut self, label: &str, t: &Tensor, requires_grad: bool) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad);
        self.nodes[v.0].label = Some(label.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated")
    }

    pub fn label(&self, v: Var) -> Option<&str> {
        self.node(v).label.as_deref()
    }

    /// Name of the op that produced `v` ("leaf" for inputs and parameters).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op.name()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- ops -------------------------------------------------------------

    /// Batched matrix product. `lhs` is `[.., m, k]`; `rhs` is either `[k, n]` (shared
    /// across the batch) or `[.., k, n]` with the same leading dimensions.
    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.matmul_impl(lhs, rhs, false)
    }

    /// `lhs · rhsᵀ` over the last two axes; `rhs` is `[n, k]` or `[.., n, k]`.
    pub fn matmul_t(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.matmul_impl(lhs, rhs, true)
    }

    fn matmul_impl(&mut self, lhs: Var, rhs: Var, rhs_t: bool) -> Result<Var> {
        let id = self.next_id();
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        if ls.len() < 2 || rs.len() < 2 {
            return Err(Error::shape(id, "matmul", format!("operands must be at least rank 2, got {ls:?} and {rs:?}")));
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (rk, n) = if rhs_t {
            (rs[rs.len() - 1], rs[rs.len() - 2])
        } else {
            (rs[rs.len() - 2], rs[rs.len() - 1])
        };
        if k != rk {
            return Err(Error::shape(id, "matmul", format!("inner dimensions differ: {ls:?} x {rs:?} (transposed rhs: {rhs_t})")));
        }
        let batched = rs.len() > 2;
        if batched && ls[..ls.len() - 2] != rs[..rs.len() - 2] {
            return Err(Error::shape(id, "matmul", format!("batch dimensions differ: {ls:?} vs {rs:?}")));
        }
        let nb: usize = numel(&ls[..ls.len() - 2]);
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; nb * m * n];
        {
            let a = self.value(lhs);
            let b = self.value(rhs);
            if batched {
                for bi in 0..nb {
                    let ab = &a[bi * m * k..(bi + 1) * m * k];
                    let bb = &b[bi * k * n..(bi + 1) * k * n];
                    let cb = &mut out[bi * m * n..(bi + 1) * m * n];
                    if rhs_t {
                        gemm_nt(ab, bb, cb, m, k, n);
                    } else {
                        gemm_nn(ab, bb, cb, m, k, n);
                    }
                }
            } else if rhs_t {
                gemm_nt(a, b, &mut out, nb * m, k, n);
            } else {
                gemm_nn(a, b, &mut out, nb * m, k, n);
            }
        }
        let rg = self.rg(&[lhs, rhs]);
        Ok(self.push(out_shape, out, Op::MatMul { lhs, rhs, rhs_t }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let id = self.next_id();
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(id, "transpose", format!("needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let nb = numel(&s[..s.len() - 2]);
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        transpose_into(src, &mut out, nb, r, c);
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Transpose(x), rg))
    }

    /// Elementwise sum; `b` may broadcast as a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let id = self.next_id();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !broadcasts(&sa, &sb) {
            return Err(Error::shape(id, "add", format!("{sb:?} does not broadcast to {sa:?}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let rl = vb.len();
        let out: Vec<f64> = va.iter().enumerate().map(|(i, x)| x + vb[i % rl]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, out, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may broadcast as a trailing suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let id = self.next_id();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !broadcasts(&sa, &sb) {
            return Err(Error::shape(id, "mul", format!("{sb:?} does not broadcast to {sa:?}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let rl = vb.len();
        let out: Vec<f64> = va.iter().enumerate().map(|(i, x)| x * vb[i % rl]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Scale(x, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Exp(x), rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let id = self.next_id();
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                id,
                "layer_norm",
                format!("gain {:?} / bias {:?} must be [{d}]", self.shape(gain), self.shape(bias)),
            ));
        }
        let xs = self.value(x);
        let (gs, bs) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gs[j] + bs[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Gathers rows of a `[vocab, d]` table. Output shape is `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let id = self.next_id();
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(id, "embedding", format!("table must be rank 2, got {ts:?}")));
        }
        if numel(index_shape) != indices.len() {
            return Err(Error::shape(id, "embedding", format!("index shape {index_shape:?} does not hold {} indices", indices.len())));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some((pos, &bad)) = indices.iter().enumerate().find(|(_, &i)| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} at position {pos} is outside vocabulary of size {vocab}"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(shape, out, Op::Embedding { table, indices: indices.to_vec() }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let id = self.next_id();
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape(id, "concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(id, "concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(ax, (a, b))| ax != axis && a != b) {
                return Err(Error::shape(id, "concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let id = self.next_id();
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(id, "slice", format!("range {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![m], Op::Mean(x), rg)
    }

    /// Divides each last-axis row by `‖row‖ + L2_EPS`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(src.len() / d);
        for (row, dst) in src.chunks(d).zip(out.chunks_mut(d)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = n + L2_EPS;
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v / s;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::L2Normalize { x, norms }, rg)
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let id = self.next_id();
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(id, "cross_entropy", format!("logits {s:?} vs {} targets", targets.len())));
        }
        let c = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!("target class {t} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= targets.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let id = self.next_id();
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(id, "reshape", format!("{:?} cannot become {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    // ---- backward --------------------------------------------------------

    /// Propagates `output_grad` from `output` to every node that requires a gradient.
    pub fn backward(&mut self, output: Var, output_grad: &[f64]) -> Result<()> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward from node {} but the forward pass recorded only {} nodes",
                output.0,
                self.nodes.len()
            )));
        }
        if output_grad.len() != self.nodes[output.0].value.len() {
            return Err(Error::shape(
                output.0,
                "backward",
                format!("output grad has {} values, output has {}", output_grad.len(), self.nodes[output.0].value.len()),
            ));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads, &self.nodes, output, |g| {
            g.iter_mut().zip(output_grad).for_each(|(a, b)| *a += b)
        });
        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { lhs, rhs, rhs_t } => {
                let (lhs, rhs, rhs_t) = (*lhs, *rhs, *rhs_t);
                let ls = &nodes[lhs.0].shape;
                let rs = &nodes[rhs.0].shape;
                let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
                let n = *node.shape.last().unwrap();
                let batched = rs.len() > 2;
                let nb = numel(&ls[..ls.len() - 2]);
                let a = &nodes[lhs.0].value;
                let b = &nodes[rhs.0].value;
                if nodes[lhs.0].requires_grad {
                    accumulate(grads, nodes, lhs, |da| {
                        if batched {
                            for bi in 0..nb {
                                let gb = &g[bi * m * n..(bi + 1) * m * n];
                                let bb = &b[bi * k * n..(bi + 1) * k * n];
                                let db = &mut da[bi * m * k..(bi + 1) * m * k];
                                if rhs_t {
                                    gemm_nn(gb, bb, db, m, n, k);
                                } else {
                                    gemm_nt(gb, bb, db, m, n, k);
                                }
                            }
                        } else if rhs_t {
                            gemm_nn(g, b, da, nb * m, n, k);
                        } else {
                            gemm_nt(g, b, da, nb * m, n, k);
                        }
                    });
                }
                if nodes[rhs.0].requires_grad {
                    accumulate(grads, nodes, rhs, |dbv| {
                        if batched {
                            for bi in 0..nb {
                                let gb = &g[bi * m * n..(bi + 1) * m * n];
                                let ab = &a[bi * m * k..(bi + 1) * m * k];
                                let db = &mut dbv[bi * k * n..(bi + 1) * k * n];
                                if rhs_t {
                                    gemm_tn(gb, ab, db, m, n, k);
                                } else {
                                    gemm_tn(ab, gb, db, m, k, n);
                                }
                            }
                        } else if rhs_t {
                            gemm_tn(g, a, dbv, nb * m, n, k);
                        } else {
                            gemm_tn(a, g, dbv, nb * m, k, n);
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                let s = &node.shape;
                // node is [.., c, r]; input was [.., r, c]
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let nb = numel(&s[..s.len() - 2]);
                accumulate(grads, nodes, *x, |dx| {
                    let mut tmp = vec![0.0; g.len()];
                    transpose_into(g, &mut tmp, nb, c, r);
                    dx.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
                });
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if nodes[a.0].requires_grad {
                    accumulate(grads, nodes, a, |da| da.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if nodes[b.0].requires_grad {
                    accumulate(grads, nodes, b, |db| {
                        let rl = db.len();
                        for (i, gv) in g.iter().enumerate() {
                            db[i % rl] += gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let rl = vb.len();
                if nodes[a.0].requires_grad {
                    accumulate(grads, nodes, a, |da| {
                        for (i, x) in da.iter_mut().enumerate() {
                            *x += g[i] * vb[i % rl];
                        }
                    });
                }
                if nodes[b.0].requires_grad {
                    accumulate(grads, nodes, b, |db| {
                        for (i, gv) in g.iter().enumerate() {
                            db[i % rl] += gv * va[i];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, nodes, *x, |dx| dx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c));
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                accumulate(grads, nodes, *x, |dx| {
                    for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(v);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                accumulate(grads, nodes, *x, |dx| {
                    for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                accumulate(grads, nodes, *x, |dx| {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap();
                let y = &node.value;
                accumulate(grads, nodes, *x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gs = &nodes[gain.0].value;
                if nodes[gain.0].requires_grad {
                    accumulate(grads, nodes, *gain, |dg| {
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                }
                if nodes[bias.0].requires_grad {
                    accumulate(grads, nodes, *bias, |db| {
                        for grow in g.chunks(d) {
                            db.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                if nodes[x.0].requires_grad {
                    accumulate(grads, nodes, *x, |dx| {
                        let mut dh = vec![0.0; d];
                        for (r, ((drow, grow), hrow)) in
                            dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate()
                        {
                            for j in 0..d {
                                dh[j] = grow[j] * gs[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, indices } => {
                let d = *node.shape.last().unwrap();
                accumulate(grads, nodes, *table, |dt| {
                    for (pos, &i) in indices.iter().enumerate() {
                        let src = &g[pos * d..(pos + 1) * d];
                        dt[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let outer = numel(&node.shape[..axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].shape[axis] * inner;
                    if nodes[v.0].requires_grad {
                        accumulate(grads, nodes, v, |dv| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                dv[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (axis, start) = (*axis, *start);
                let xs = &nodes[x.0].shape;
                let outer = numel(&xs[..axis]);
                let inner = numel(&xs[axis + 1..]);
                let len = node.shape[axis];
                let full = xs[axis];
                accumulate(grads, nodes, *x, |dx| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                let gv = g[0] / n;
                accumulate(grads, nodes, *x, |dx| dx.iter_mut().for_each(|a| *a += gv));
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.shape.last().unwrap();
                let xv = &nodes[x.0].value;
                accumulate(grads, nodes, *x, |dx| {
                    for (r, ((drow, grow), xrow)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xv.chunks(d)).enumerate() {
                        let n = norms[r];
                        let s = n + L2_EPS;
                        let proj = if n > 0.0 {
                            xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>() / (n * s * s)
                        } else {
                            0.0
                        };
                        for j in 0..d {
                            drow[j] += grow[j] / s - xrow[j] * proj;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].shape[1];
                let scale = g[0] / targets.len() as f64;
                accumulate(grads, nodes, *logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                accumulate(grads, nodes, *x, |dx| dx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(buf);
}

fn transpose_into(src: &[f64], dst: &mut [f64], nb: usize, r: usize, c: usize) {
    for b in 0..nb {
        let s = &src[b * r * c..(b + 1) * r * c];
        let d = &mut dst[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
