//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output values plus the recipe for distributing gradients to its parents.
//! Nodes are appended in execution order, so the vector is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! A tape and its [`Var`] handles are confined to one thread; parallelism
//! happens inside individual kernels and is bit-deterministic.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Elementwise unary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Exp,
    Neg,
    Tanh,
    Sqrt,
    Abs,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Offset(f64),
}

/// Elementwise binary operation kinds. Operands must have equal shapes or
/// one side must be a single-element tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Backward hook for fused operations defined outside this module
/// (convolution, rasterization). `inputs` are the parents' value buffers in
/// registration order; the result must contain one gradient buffer per input,
/// each matching that input's length.
pub trait CustomGrad {
    fn backward(&self, inputs: &[&[f64]], out_values: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>>;
    fn name(&self) -> &'static str;
}

enum Step {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    /// `x*w + b` with `b` broadcast over rows.
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Unary {
        x: usize,
        kind: Unary,
    },
    Binary {
        a: usize,
        b: usize,
        kind: Binary,
    },
    Reduce {
        x: usize,
        kind: Reduce,
        axis: Option<usize>,
        /// Flat source index per output element (max only).
        arg: Vec<usize>,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomGrad>,
    },
}

impl Step {
    fn parents(&self) -> Vec<usize> {
        match self {
            Step::Leaf => vec![],
            Step::Matmul { a, b, .. } | Step::Binary { a, b, .. } => vec![*a, *b],
            Step::Affine { x, w, b } => vec![*x, *w, *b],
            Step::Softmax { x, .. }
            | Step::Unary { x, .. }
            | Step::Reduce { x, .. }
            | Step::Gather { x, .. }
            | Step::Narrow { x, .. }
            | Step::Transpose { x }
            | Step::Reshape { x } => vec![*x],
            Step::Concat { parts, .. } => parts.clone(),
            Step::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Step::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    step: Step,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording graph for one forward/backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, step: Step) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        let grad = vec![0.0; values.len()];
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                shape,
                values,
                grad,
                requires_grad,
                step,
            });
            inner.nodes.len() - 1
        };
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Leaf from a tensor, keeping its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Step::Leaf,
        )
    }

    /// Constant leaf that never receives gradient.
    pub fn constant(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::dimension(
                "constant",
                format!("shape {:?} vs {} values", shape, values.len()),
            ));
        }
        Ok(self.push(shape, values, false, Step::Leaf))
    }

    /// Trainable leaf.
    pub fn var(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::dimension(
                "var",
                format!("shape {:?} vs {} values", shape, values.len()),
            ));
        }
        Ok(self.push(shape, values, true, Step::Leaf))
    }

    /// Register a fused operation with a custom backward.
    pub fn custom(
        &self,
        inputs: &[&Var],
        out_shape: Vec<usize>,
        out_values: Vec<f64>,
        op: Box<dyn CustomGrad>,
    ) -> Result<Var> {
        if numel(&out_shape) != out_values.len() {
            return Err(Error::dimension(
                "custom",
                format!("shape {:?} vs {} values", out_shape, out_values.len()),
            ));
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = {
            let inner = self.inner.borrow();
            ids.iter().any(|&i| inner.nodes[i].requires_grad)
        };
        Ok(self.push(out_shape, out_values, rg, Step::Custom { inputs: ids, op }))
    }

    /// Reset every gradient buffer on the tape to zero.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for n in inner.nodes.iter_mut() {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulate gradients of `loss` into every node reachable from it.
    /// `loss` must hold exactly one element.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::contract("backward", "loss lives on another tape"));
        }
        let mut inner = self.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        if nodes[loss.id].values.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, has shape {:?}", nodes[loss.id].shape),
            ));
        }

        // Mark the ancestor set of the loss so unrelated nodes are skipped.
        let mut reach = vec![false; loss.id + 1];
        reach[loss.id] = true;
        let mut stack = vec![loss.id];
        while let Some(i) = stack.pop() {
            for p in nodes[i].step.parents() {
                if !reach[p] {
                    reach[p] = true;
                    stack.push(p);
                }
            }
        }

        nodes[loss.id].grad[0] += 1.0;

        for i in (0..=loss.id).rev() {
            if !reach[i] || !nodes[i].requires_grad {
                continue;
            }
            let (parents, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            let contributions = step_backward(&node.step, parents, node);
            for (pid, g) in contributions {
                if !parents[pid].requires_grad {
                    continue;
                }
                let dst = &mut parents[pid].grad;
                debug_assert_eq!(dst.len(), g.len());
                for (d, s) in dst.iter_mut().zip(&g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

/// Compute the gradient contribution of `node` to each parent.
fn step_backward(step: &Step, parents: &[Node], node: &Node) -> Vec<(usize, Vec<f64>)> {
    let g = &node.grad;
    match step {
        Step::Leaf => vec![],
        Step::Matmul { a, b, ta, tb } => {
            let (pa, pb) = (&parents[*a], &parents[*b]);
            let (ra, ca) = (pa.shape[0], pa.shape[1]);
            let (rb, cb) = (pb.shape[0], pb.shape[1]);
            let m = if *ta { ca } else { ra };
            let n = if *tb { rb } else { cb };
            let mut da = vec![0.0; pa.values.len()];
            let mut db = vec![0.0; pb.values.len()];
            // dA' = G * B'^T and dB' = A'^T * G, transposed back as stored.
            if !ta {
                kernels::matmul_acc(g, m, n, false, &pb.values, rb, cb, !tb, &mut da);
            } else {
                kernels::matmul_acc(&pb.values, rb, cb, *tb, g, m, n, true, &mut da);
            }
            if !tb {
                kernels::matmul_acc(&pa.values, ra, ca, !ta, g, m, n, false, &mut db);
            } else {
                kernels::matmul_acc(g, m, n, true, &pa.values, ra, ca, *ta, &mut db);
            }
            vec![(*a, da), (*b, db)]
        }
        Step::Affine { x, w, b } => {
            let (px, pw) = (&parents[*x], &parents[*w]);
            let (rx, cx) = (px.shape[0], px.shape[1]);
            let cw = pw.shape[1];
            let mut dx = vec![0.0; px.values.len()];
            let mut dw = vec![0.0; pw.values.len()];
            kernels::matmul_acc(g, rx, cw, false, &pw.values, cx, cw, true, &mut dx);
            kernels::matmul_acc(&px.values, rx, cx, true, g, rx, cw, false, &mut dw);
            let mut db = vec![0.0; cw];
            for row in g.chunks(cw) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![(*x, dx), (*w, dw), (*b, db)]
        }
        Step::Softmax { x, axis } => {
            let mut dx = vec![0.0; node.values.len()];
            kernels::softmax_axis_backward(&node.values, g, &node.shape, *axis, &mut dx);
            vec![(*x, dx)]
        }
        Step::Unary { x, kind } => {
            let xs = &parents[*x].values;
            let out = &node.values;
            let mut dx = vec![0.0; xs.len()];
            match kind {
                Unary::Relu => {
                    for i in 0..xs.len() {
                        if xs[i] > 0.0 {
                            dx[i] = g[i];
                        }
                    }
                }
                Unary::LeakyRelu(slope) => {
                    for i in 0..xs.len() {
                        dx[i] = if xs[i] > 0.0 { g[i] } else { g[i] * slope };
                    }
                }
                Unary::Exp => {
                    for i in 0..xs.len() {
                        dx[i] = g[i] * out[i];
                    }
                }
                Unary::Neg => {
                    for i in 0..xs.len() {
                        dx[i] = -g[i];
                    }
                }
                Unary::Tanh => {
                    for i in 0..xs.len() {
                        dx[i] = g[i] * (1.0 - out[i] * out[i]);
                    }
                }
                Unary::Sqrt => {
                    // Subgradient 0 at the origin.
                    for i in 0..xs.len() {
                        if xs[i] > 0.0 {
                            dx[i] = g[i] * 0.5 / out[i];
                        }
                    }
                }
                Unary::Abs => {
                    for i in 0..xs.len() {
                        dx[i] = g[i] * if xs[i] > 0.0 { 1.0 } else if xs[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
                Unary::Scale(c) => {
                    for i in 0..xs.len() {
                        dx[i] = g[i] * c;
                    }
                }
                Unary::Offset(_) => dx.copy_from_slice(g),
            }
            vec![(*x, dx)]
        }
        Step::Binary { a, b, kind } => {
            let (pa, pb) = (&parents[*a], &parents[*b]);
            let (na, nb) = (pa.values.len(), pb.values.len());
            let n = na.max(nb);
            let av = |i: usize| pa.values[if na == 1 { 0 } else { i }];
            let bv = |i: usize| pb.values[if nb == 1 { 0 } else { i }];
            let mut da = vec![0.0; na];
            let mut db = vec![0.0; nb];
            for i in 0..n {
                let (ia, ib) = (if na == 1 { 0 } else { i }, if nb == 1 { 0 } else { i });
                match kind {
                    Binary::Add => {
                        da[ia] += g[i];
                        db[ib] += g[i];
                    }
                    Binary::Sub => {
                        da[ia] += g[i];
                        db[ib] -= g[i];
                    }
                    Binary::Mul => {
                        da[ia] += g[i] * bv(i);
                        db[ib] += g[i] * av(i);
                    }
                }
            }
            vec![(*a, da), (*b, db)]
        }
        Step::Reduce {
            x,
            kind,
            axis,
            arg,
        } => {
            let px = &parents[*x];
            let mut dx = vec![0.0; px.values.len()];
            match (kind, axis) {
                (Reduce::Sum, None) => dx.iter_mut().for_each(|d| *d = g[0]),
                (Reduce::Mean, None) => {
                    let s = g[0] / px.values.len() as f64;
                    dx.iter_mut().for_each(|d| *d = s);
                }
                (Reduce::Max, None) => dx[arg[0]] = g[0],
                (Reduce::Sum, Some(ax)) | (Reduce::Mean, Some(ax)) => {
                    let (_, len, inner) = kernels::axis_extents(&px.shape, *ax);
                    let scale = if *kind == Reduce::Mean {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    for (o, chunk) in dx.chunks_mut(len * inner).enumerate() {
                        for a in 0..len {
                            for i in 0..inner {
                                chunk[a * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                }
                (Reduce::Max, Some(_)) => {
                    for (out_i, &src) in arg.iter().enumerate() {
                        dx[src] += g[out_i];
                    }
                }
            }
            vec![(*x, dx)]
        }
        Step::Gather { x, idx } => {
            let px = &parents[*x];
            let cols = px.values.len() / px.shape[0].max(1);
            let mut dx = vec![0.0; px.values.len()];
            for (row, &src) in idx.iter().enumerate() {
                let from = &g[row * cols..(row + 1) * cols];
                let to = &mut dx[src * cols..(src + 1) * cols];
                for (t, f) in to.iter_mut().zip(from) {
                    *t += f;
                }
            }
            vec![(*x, dx)]
        }
        Step::Concat { parts, axis } => {
            let mut grads = Vec::with_capacity(parts.len());
            if *axis == 0 {
                let mut offset = 0;
                for &p in parts {
                    let len = parents[p].values.len();
                    grads.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
            } else {
                let rows = node.shape[0];
                let total_cols = node.shape[1];
                let mut col_off = 0;
                for &p in parts {
                    let cols = parents[p].shape[1];
                    let mut dp = vec![0.0; parents[p].values.len()];
                    for r in 0..rows {
                        let src = &g[r * total_cols + col_off..r * total_cols + col_off + cols];
                        dp[r * cols..(r + 1) * cols].copy_from_slice(src);
                    }
                    grads.push((p, dp));
                    col_off += cols;
                }
            }
            grads
        }
        Step::Narrow {
            x,
            axis,
            start,
            len,
        } => {
            let px = &parents[*x];
            let mut dx = vec![0.0; px.values.len()];
            let (rows, cols) = (px.shape[0], px.shape[1]);
            if *axis == 0 {
                dx[start * cols..(start + len) * cols].copy_from_slice(g);
            } else {
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
            }
            vec![(*x, dx)]
        }
        Step::Transpose { x } => {
            let (rows, cols) = (node.shape[0], node.shape[1]);
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                for c in 0..cols {
                    dx[c * rows + r] = g[r * cols + c];
                }
            }
            vec![(*x, dx)]
        }
        Step::Reshape { x } => vec![(*x, g.clone())],
        Step::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => {
            let px = &parents[*x];
            let (rows, cols) = (px.shape[0], px.shape[1]);
            let gam = &parents[*gamma].values;
            let mut dx = vec![0.0; px.values.len()];
            let mut dgam = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for r in 0..rows {
                let xr = &px.values[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let mean = xr.iter().sum::<f64>() / cols as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                // dxhat, plus the two reduction terms of the standard formula.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for c in 0..cols {
                    let xhat = (xr[c] - mean) * inv;
                    let dxhat = gr[c] * gam[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgam[c] += gr[c] * xhat;
                    dbeta[c] += gr[c];
                }
                for c in 0..cols {
                    let xhat = (xr[c] - mean) * inv;
                    let dxhat = gr[c] * gam[c];
                    dx[r * cols + c] = inv
                        * (dxhat - sum_dxhat / cols as f64 - xhat * sum_dxhat_xhat / cols as f64);
                }
            }
            vec![(*x, dx), (*gamma, dgam), (*beta, dbeta)]
        }
        Step::Custom { inputs, op } => {
            let views: Vec<&[f64]> = inputs.iter().map(|&i| parents[i].values.as_slice()).collect();
            let grads = op.backward(&views, &node.values, g);
            assert_eq!(
                grads.len(),
                inputs.len(),
                "custom op {} returned wrong gradient count",
                op.name()
            );
            inputs.iter().copied().zip(grads).collect()
        }
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copy of the node's values.
    pub fn values(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].values.clone()
    }

    /// Single value of a scalar node.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        assert_eq!(n.values.len(), 1, "scalar_value on non-scalar");
        n.values[0]
    }

    /// Copy of the accumulated gradient.
    pub fn grad(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Detach values into a tensor (gradient dropped).
    pub fn to_tensor(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        Tensor::new(n.shape.clone(), n.values.clone(), false).expect("node shape consistent")
    }

    fn with_values<R>(&self, f: impl FnOnce(&[f64], &[usize]) -> R) -> R {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        f(&n.values, &n.shape)
    }

    fn same_tape(&self, other: &Var, op: &'static str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(Error::contract(op, "operands live on different tapes"));
        }
        Ok(())
    }

    /// Matrix product. Both operands must be rank-2.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_ex(other, false, false)
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Var) -> Result<Var> {
        self.matmul_ex(other, true, false)
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        self.matmul_ex(other, false, true)
    }

    pub fn matmul_ex(&self, other: &Var, ta: bool, tb: bool) -> Result<Var> {
        self.same_tape(other, "matmul")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dimension(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", sa, sb),
            ));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                format!("inner dimensions {} vs {} ({:?} x {:?})", k, k2, sa, sb),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].values;
            let bv = &inner.nodes[other.id].values;
            kernels::matmul_acc(av, sa[0], sa[1], ta, bv, sb[0], sb[1], tb, &mut out);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![m, n],
            out,
            rg,
            Step::Matmul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    /// `self*w + b`, `b` shape `[cols(w)]` broadcast over rows.
    pub fn affine(&self, w: &Var, b: &Var) -> Result<Var> {
        self.same_tape(w, "affine")?;
        self.same_tape(b, "affine")?;
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::dimension(
                "affine",
                format!("x {:?} incompatible with w {:?}", sx, sw),
            ));
        }
        if numel(&sb) != sw[1] {
            return Err(Error::dimension(
                "affine",
                format!("bias {:?} incompatible with w {:?}", sb, sw),
            ));
        }
        let (rows, cols) = (sx[0], sw[1]);
        let mut out = vec![0.0; rows * cols];
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.nodes[self.id].values;
            let wv = &inner.nodes[w.id].values;
            let bv = &inner.nodes[b.id].values;
            for row in out.chunks_mut(cols) {
                row.copy_from_slice(bv);
            }
            kernels::matmul_acc(xv, sx[0], sx[1], false, wv, sw[0], sw[1], false, &mut out);
        }
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            vec![rows, cols],
            out,
            rg,
            Step::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dimension(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        if shape[axis] == 0 {
            return Err(Error::dimension("softmax", "empty axis"));
        }
        let mut out = vec![0.0; self.numel()];
        self.with_values(|v, s| kernels::softmax_axis(v, s, axis, &mut out));
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(shape, out, rg, Step::Softmax { x: self.id, axis }))
    }

    pub fn unary(&self, kind: Unary) -> Var {
        let out: Vec<f64> = self.with_values(|v, _| {
            v.iter()
                .map(|&x| match kind {
                    Unary::Relu => x.max(0.0),
                    Unary::LeakyRelu(s) => {
                        if x > 0.0 {
                            x
                        } else {
                            s * x
                        }
                    }
                    Unary::Exp => x.exp(),
                    Unary::Neg => -x,
                    Unary::Tanh => x.tanh(),
                    Unary::Sqrt => x.max(0.0).sqrt(),
                    Unary::Abs => x.abs(),
                    Unary::Scale(c) => c * x,
                    Unary::Offset(c) => c + x,
                })
                .collect()
        });
        let rg = self.requires_grad();
        self.tape
            .push(self.shape(), out, rg, Step::Unary { x: self.id, kind })
    }

    pub fn relu(&self) -> Var {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn exp(&self) -> Var {
        self.unary(Unary::Exp)
    }

    pub fn neg(&self) -> Var {
        self.unary(Unary::Neg)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Unary::Tanh)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Unary::Sqrt)
    }

    pub fn abs(&self) -> Var {
        self.unary(Unary::Abs)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(Unary::Scale(c))
    }

    pub fn offset(&self, c: f64) -> Var {
        self.unary(Unary::Offset(c))
    }

    pub fn binary(&self, other: &Var, kind: Binary) -> Result<Var> {
        self.same_tape(other, "binary")?;
        let (sa, sb) = (self.shape(), other.shape());
        let (na, nb) = (numel(&sa), numel(&sb));
        if sa != sb && na != 1 && nb != 1 {
            return Err(Error::dimension(
                "binary",
                format!("shapes {:?} and {:?} are not equal and neither is scalar", sa, sb),
            ));
        }
        let out_shape = if na >= nb { sa.clone() } else { sb.clone() };
        let n = na.max(nb);
        let mut out = vec![0.0; n];
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].values;
            let bv = &inner.nodes[other.id].values;
            for (i, o) in out.iter_mut().enumerate() {
                let a = av[if na == 1 { 0 } else { i }];
                let b = bv[if nb == 1 { 0 } else { i }];
                *o = match kind {
                    Binary::Add => a + b,
                    Binary::Sub => a - b,
                    Binary::Mul => a * b,
                };
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out_shape,
            out,
            rg,
            Step::Binary {
                a: self.id,
                b: other.id,
                kind,
            },
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Mul)
    }

    pub fn reduce(&self, kind: Reduce, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape();
        if let Some(ax) = axis {
            if ax >= shape.len() {
                return Err(Error::dimension(
                    "reduce",
                    format!("axis {} out of range for shape {:?}", ax, shape),
                ));
            }
            if shape[ax] == 0 {
                return Err(Error::dimension("reduce", "empty axis"));
            }
        } else if self.numel() == 0 {
            return Err(Error::dimension("reduce", "empty tensor"));
        }
        let inner_ref = self.tape.inner.borrow();
        let v = &inner_ref.nodes[self.id].values;
        let (out_shape, out, arg) = match axis {
            None => {
                let mut arg = vec![];
                let val = match kind {
                    Reduce::Sum => v.iter().sum(),
                    Reduce::Mean => v.iter().sum::<f64>() / v.len() as f64,
                    Reduce::Max => {
                        let mut best = 0;
                        for (i, &x) in v.iter().enumerate() {
                            if x > v[best] {
                                best = i;
                            }
                        }
                        arg = vec![best];
                        v[best]
                    }
                };
                (vec![1], vec![val], arg)
            }
            Some(ax) => {
                let (outer, len, inner) = kernels::axis_extents(&shape, ax);
                let mut out_shape: Vec<usize> = shape[..ax].to_vec();
                out_shape.extend_from_slice(&shape[ax + 1..]);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                let mut out = vec![0.0; outer * inner];
                let mut arg = vec![0usize; if kind == Reduce::Max { outer * inner } else { 0 }];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut acc;
                        match kind {
                            Reduce::Sum | Reduce::Mean => {
                                acc = 0.0;
                                for a in 0..len {
                                    acc += v[(o * len + a) * inner + i];
                                }
                                if kind == Reduce::Mean {
                                    acc /= len as f64;
                                }
                            }
                            Reduce::Max => {
                                let mut best = (o * len) * inner + i;
                                for a in 1..len {
                                    let idx = (o * len + a) * inner + i;
                                    if v[idx] > v[best] {
                                        best = idx;
                                    }
                                }
                                arg[o * inner + i] = best;
                                acc = v[best];
                            }
                        }
                        out[o * inner + i] = acc;
                    }
                }
                (out_shape, out, arg)
            }
        };
        drop(inner_ref);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out_shape,
            out,
            rg,
            Step::Reduce {
                x: self.id,
                kind,
                axis,
                arg,
            },
        ))
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, axis)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, axis)
    }

    pub fn max(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Max, axis)
    }

    /// Row selection: `self` is treated as `[n, cols]`; `idx` may repeat rows.
    pub fn gather(&self, idx: &[usize]) -> Result<Var> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::dimension("gather", "rank-0 input"));
        }
        let n = shape[0];
        let cols: usize = shape[1..].iter().product::<usize>().max(1);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    op: "gather",
                    index: i,
                    len: n,
                });
            }
        }
        let mut out = vec![0.0; idx.len() * cols];
        {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].values;
            for (row, &src) in idx.iter().enumerate() {
                out[row * cols..(row + 1) * cols].copy_from_slice(&v[src * cols..(src + 1) * cols]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out_shape,
            out,
            rg,
            Step::Gather {
                x: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Concatenate rank-2 vars along `axis` (0 = rows, 1 = cols).
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dimension("concat", "no parts"));
        }
        let tape = parts[0].tape.clone();
        for p in parts.iter().skip(1) {
            parts[0].same_tape(p, "concat")?;
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            if s.len() != 2 {
                return Err(Error::dimension("concat", format!("rank-2 only, got {:?}", s)));
            }
        }
        let (out_shape, out) = if axis == 0 {
            let cols = shapes[0][1];
            if shapes.iter().any(|s| s[1] != cols) {
                return Err(Error::dimension("concat", "column counts differ"));
            }
            let rows: usize = shapes.iter().map(|s| s[0]).sum();
            let mut out = Vec::with_capacity(rows * cols);
            let inner = tape.inner.borrow();
            for p in parts {
                out.extend_from_slice(&inner.nodes[p.id].values);
            }
            (vec![rows, cols], out)
        } else {
            let rows = shapes[0][0];
            if shapes.iter().any(|s| s[0] != rows) {
                return Err(Error::dimension("concat", "row counts differ"));
            }
            let total: usize = shapes.iter().map(|s| s[1]).sum();
            let mut out = vec![0.0; rows * total];
            let inner = tape.inner.borrow();
            let mut off = 0;
            for (p, s) in parts.iter().zip(&shapes) {
                let v = &inner.nodes[p.id].values;
                for r in 0..rows {
                    out[r * total + off..r * total + off + s[1]]
                        .copy_from_slice(&v[r * s[1]..(r + 1) * s[1]]);
                }
                off += s[1];
            }
            (vec![rows, total], out)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            out_shape,
            out,
            rg,
            Step::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Contiguous slice of a rank-2 var along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 2 || axis > 1 {
            return Err(Error::dimension("narrow", format!("rank-2 only, got {:?}", shape)));
        }
        if start + len > shape[axis] {
            return Err(Error::Index {
                op: "narrow",
                index: start + len,
                len: shape[axis],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let (out_shape, out) = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].values;
            if axis == 0 {
                (
                    vec![len, cols],
                    v[start * cols..(start + len) * cols].to_vec(),
                )
            } else {
                let mut out = vec![0.0; rows * len];
                for r in 0..rows {
                    out[r * len..(r + 1) * len]
                        .copy_from_slice(&v[r * cols + start..r * cols + start + len]);
                }
                (vec![rows, len], out)
            }
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out_shape,
            out,
            rg,
            Step::Narrow {
                x: self.id,
                axis,
                start,
                len,
            },
        ))
    }

    /// Transpose a rank-2 var.
    pub fn transpose(&self) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::dimension("transpose", format!("rank-2 only, got {:?}", shape)));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![0.0; rows * cols];
        self.with_values(|v, _| {
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = v[r * cols + c];
                }
            }
        });
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(vec![cols, rows], out, rg, Step::Transpose { x: self.id }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.numel() {
            return Err(Error::dimension(
                "reshape",
                format!("{:?} incompatible with {} elements", shape, self.numel()),
            ));
        }
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(shape, self.values(), rg, Step::Reshape { x: self.id }))
    }

    /// Layer normalization over the last axis of a rank-2 var with learned
    /// gain `gamma` and shift `beta` (both `[cols]`).
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.same_tape(gamma, "layer_norm")?;
        self.same_tape(beta, "layer_norm")?;
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::dimension("layer_norm", format!("rank-2 only, got {:?}", shape)));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(Error::dimension(
                "layer_norm",
                format!("gamma/beta must have {} elements", cols),
            ));
        }
        let mut out = vec![0.0; rows * cols];
        {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].values;
            let gam = &inner.nodes[gamma.id].values;
            let bet = &inner.nodes[beta.id].values;
            parallel::for_each_chunk(&mut out, cols, |r, row| {
                let xr = &v[r * cols..(r + 1) * cols];
                let mean = xr.iter().sum::<f64>() / cols as f64;
                let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    row[c] = (xr[c] - mean) * inv * gam[c] + bet[c];
                }
            });
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Step::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(values: &[f64], shape: &[usize]) -> (Tape, Var) {
        let tape = Tape::new();
        let v = tape.var(shape.to_vec(), values.to_vec()).unwrap();
        (tape, v)
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = tape.var(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.var(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::new();
        let eye = tape
            .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = tape.var(vec![2, 3], vec![5.0, 1.0, -2.0, 0.5, 3.0, 9.0]).unwrap();
        let c = eye.matmul(&b).unwrap();
        assert_eq!(c.values(), b.values());
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let tape = Tape::new();
        let a = tape.var(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.var(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let (_tape, x) = tape_with(&[7.0, 7.0, 7.0, 7.0], &[1, 4]);
        let s = x.softmax(1).unwrap();
        for v in s.values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let (_tape, x) = tape_with(&[0.0, 3f64.ln()], &[1, 2]);
        let s = x.softmax(1).unwrap();
        let v = s.values();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn relu_and_leaky() {
        let (_t, x) = tape_with(&[-1.0, 2.0], &[2]);
        assert_eq!(x.relu().values(), vec![0.0, 2.0]);
        let (_t, x) = tape_with(&[-2.0], &[1]);
        assert!((x.leaky_relu(0.1).values()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn add_backward_passes_upstream_to_both() {
        let tape = Tape::new();
        let a = tape.var(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = tape.var(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        let s = a.add(&b).unwrap().sum(None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(a.grad(), vec![1.0, 1.0, 1.0]);
        assert_eq!(b.grad(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn reduce_examples() {
        let (tape, x) = tape_with(&[1.0, 2.0, 3.0], &[3]);
        assert_eq!(x.sum(None).unwrap().scalar_value(), 6.0);
        let m = x.mean(None).unwrap();
        tape.backward(&m).unwrap();
        for g in x.grad() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn max_routes_gradient_to_first_tie() {
        let tape = Tape::new();
        let x = tape.var(vec![3], vec![1.0, 5.0, 5.0]).unwrap();
        let m = x.max(None).unwrap();
        assert_eq!(m.scalar_value(), 5.0);
        tape.backward(&m).unwrap();
        assert_eq!(x.grad(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_identity_and_duplicates() {
        let tape = Tape::new();
        let x = tape
            .var(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let same = x.gather(&[0, 1, 2]).unwrap();
        assert_eq!(same.values(), x.values());

        let dup = x.gather(&[1, 1]).unwrap();
        let s = dup.sum(None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad(), vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);

        let empty = x.gather(&[]).unwrap();
        assert_eq!(empty.shape(), vec![0, 2]);
        assert!(empty.values().is_empty());

        assert!(x.gather(&[3]).is_err());
    }

    #[test]
    fn backward_closed_forms() {
        // loss = sum(x) -> all-ones gradient
        let tape = Tape::new();
        let x = tape.var(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let s = x.sum(None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad(), vec![1.0; 4]);

        // loss = sum(x*x) -> 2x
        let tape = Tape::new();
        let x = tape.var(vec![3], vec![1.0, -2.0, 0.25]).unwrap();
        let s = x.mul(&x).unwrap().sum(None).unwrap();
        tape.backward(&s).unwrap();
        let g = x.grad();
        for (gi, xi) in g.iter().zip(x.values()) {
            assert!((gi - 2.0 * xi).abs() < 1e-15);
        }

        // disconnected leaf keeps a zero gradient
        let tape = Tape::new();
        let x = tape.var(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.var(vec![2], vec![3.0, 4.0]).unwrap();
        let s = x.sum(None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(y.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.var(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn repeated_backward_with_reset_is_identical() {
        let tape = Tape::new();
        let x = tape.var(vec![3], vec![0.3, -1.2, 2.2]).unwrap();
        let loss = x.mul(&x).unwrap().sum(None).unwrap();
        tape.backward(&loss).unwrap();
        let g1 = x.grad();
        tape.zero_grad();
        tape.backward(&loss).unwrap();
        assert_eq!(g1, x.grad());
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let tape = Tape::new();
        let a = tape.var(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.var(vec![2, 1], vec![9.0, 8.0]).unwrap();
        let c = Var::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.values(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = c.narrow(1, 0, 2).unwrap();
        assert_eq!(back.values(), a.values());
        let s = c.narrow(1, 2, 1).unwrap().sum(None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(b.grad(), vec![1.0, 1.0]);
        assert_eq!(a.grad(), vec![0.0; 4]);
    }

    #[test]
    fn transpose_backward() {
        let tape = Tape::new();
        let a = tape.var(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.values(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let s = t.narrow(0, 0, 1).unwrap().sum(None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(a.grad(), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_mul() {
        let tape = Tape::new();
        let x = tape.var(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = tape.constant(vec![1], vec![2.0]).unwrap();
        let y = x.mul(&c).unwrap();
        assert_eq!(y.values(), vec![2.0, 4.0, 6.0]);
        let bad = tape.var(vec![2], vec![0.0; 2]).unwrap();
        assert!(x.add(&bad).is_err());
    }
}
