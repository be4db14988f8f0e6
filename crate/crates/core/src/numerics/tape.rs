//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its `f64` output and enough saved state
//! to run its vector-Jacobian product. Parents always precede children, so
//! the backward sweep is a reverse walk over node indices.

use crate::error::{dim_err, Error, Result};

use super::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction mode for [`Tape::pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Operation kinds, used for reporting and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Sigmoid,
    Relu,
    Prelu,
    Exp,
    Ln,
    Abs,
    Softmax,
    LayerNorm,
    Pool,
    Sum,
    Mean,
    Conv1d,
    Concat,
    Narrow,
    Reshape,
    OverlapAdd,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Prelu,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Abs,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Pool,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Conv1d,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::OverlapAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Prelu => "prelu",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Abs => "abs",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Pool => "pool",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Conv1d => "conv1d",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
            OpKind::OverlapAdd => "overlap_add",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Sigmoid,
    Relu,
    Exp,
    Ln,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Binary { kind: BinaryKind, a: Var, b: Var, plan: Broadcast },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Unary { kind: UnaryKind, a: Var },
    Prelu { x: Var, slope: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Pool { a: Var, axis: usize, mode: PoolMode, argmax: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Conv1d { x: Var, w: Var, bias: Option<Var>, dilation: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    OverlapAdd { frames: Var, hop: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => OpKind::Add,
                BinaryKind::Sub => OpKind::Sub,
                BinaryKind::Mul => OpKind::Mul,
                BinaryKind::Div => OpKind::Div,
            },
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Sigmoid => OpKind::Sigmoid,
                UnaryKind::Relu => OpKind::Relu,
                UnaryKind::Exp => OpKind::Exp,
                UnaryKind::Ln => OpKind::Ln,
                UnaryKind::Abs => OpKind::Abs,
            },
            Op::Prelu { .. } => OpKind::Prelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Pool { .. } => OpKind::Pool,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::OverlapAdd { .. } => OpKind::OverlapAdd,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Confined to one thread for the duration of a step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    bound: Vec<(ParamId, Var)>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong (the
    /// upstream gradient is doubled). Forward values are unaffected.
    pub fn with_fault(kind: OpKind) -> Self {
        Tape { fault: Some(kind), ..Self::default() }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    /// Differentiable leaf initialised from `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.to_f64(), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.to_f64(), Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return dim_err(format!("constant of shape {shape:?} with {} values", data.len()));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Bind a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.bound.push((id, v));
        v
    }

    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    // ---- inspection ---------------------------------------------------

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// `f32` snapshot of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_f64(n.shape.clone(), &n.value).expect("node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad_f64(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grad_f64(v)
            .map(|g| Tensor::from_f64(self.nodes[v.0].shape.clone(), g).expect("node shapes are valid"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Which side of each non-smooth point the recorded values sit on: the
    /// sign of every ReLU, abs and PReLU input, and every max-pool argmax.
    /// Two evaluations with equal patterns lie on one smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary { kind: UnaryKind::Relu | UnaryKind::Abs, a } | Op::Prelu { x: a, .. } => {
                    out.extend(self.value(*a).iter().map(|&v| usize::from(v > 0.0) + usize::from(v < 0.0) * 2));
                }
                Op::Pool { mode: PoolMode::Max, argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Add the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bound {
            let Some(g) = self.grad_f64(v) else { continue };
            let dst = store.get_mut(id).grad_mut();
            for (d, &s) in dst.iter_mut().zip(g) {
                *d += s as f32;
            }
        }
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return dim_err(format!("transpose needs a matrix, got {s:?}"));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = transpose_kernel(self.value(a), rows, cols);
        let rg = self.rg(a);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg))
    }

    // ---- elementwise --------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; plan.numel()];
        plan.for_each(|o, ia, ib| {
            let (x, y) = (va[ia], vb[ib]);
            out[o] = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
        });
        let rg = self.rg(a) || self.rg(b);
        let shape = plan.out_shape.clone();
        Ok(self.push(shape, out, Op::Binary { kind, a, b, plan }, rg))
    }

    /// Broadcasting add: operands share rank; each axis matches or is 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|v| v + c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::AddScalar { a }, rg)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Exp => f64::exp,
            UnaryKind::Ln => f64::ln,
            UnaryKind::Abs => f64::abs,
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Unary { kind, a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Contract(format!("ln of non-positive value {x}")));
        }
        Ok(self.unary(UnaryKind::Ln, a))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    /// Parametric ReLU with a single learnable slope (shape `[1]`).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return dim_err(format!("prelu slope must have one element, got {:?}", self.shape(slope)));
        }
        let s = self.value(slope)[0];
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { s * v }).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(shape, out, Op::Prelu { x, slope }, rg))
    }

    // ---- normalisation -----------------------------------------------

    /// Softmax along `axis`, stabilised by subtracting the max.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let max = (0..n).map(|i| v[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (v[at(i)] - max).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[at(i)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, rg))
    }

    /// Layer norm over the last axis followed by a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("shapes are non-empty");
        if c == 0 || self.value(gamma).len() != c || self.value(beta).len() != c {
            return dim_err(format!(
                "layer_norm over {c} channels with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = self.value(x).len() / c;
        let (v, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..c {
                let h = (row[i] - mean) * is;
                xhat[r * c + i] = h;
                out[r * c + i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    // ---- reductions ---------------------------------------------------

    /// Reduce `axis` to size 1 by max or mean. Max routes its gradient to
    /// the first maximal element.
    pub fn pool(&mut self, a: Var, axis: usize, mode: PoolMode) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let dst = o * inner + j;
                match mode {
                    PoolMode::Avg => out[dst] = (0..n).map(|i| v[at(i)]).sum::<f64>() / n as f64,
                    PoolMode::Max => {
                        let mut best = 0;
                        for i in 1..n {
                            if v[at(i)] > v[at(best)] {
                                best = i;
                            }
                        }
                        out[dst] = v[at(best)];
                        argmax[dst] = at(best);
                    }
                }
            }
        }
        shape[axis] = 1;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Pool { a, axis, mode, argmax }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean { a }, rg)
    }

    // ---- convolution --------------------------------------------------

    /// Same-length dilated cross-correlation along time.
    ///
    /// `x` is `[c_in × T]`, `w` is `[c_out × c_in × K]` with `K` odd, and the
    /// optional `bias` is `[c_out]`. Out-of-range taps read zero.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 3 || sx.len() != 2 || sw[1] != sx[0] {
            return dim_err(format!("conv1d input {sx:?} with kernel {sw:?}"));
        }
        let (cout, cin, k) = (sw[0], sw[1], sw[2]);
        let t = sx[1];
        if k % 2 == 0 {
            return Err(Error::UnsupportedKernel(k));
        }
        if dilation == 0 {
            return Err(Error::Contract("conv1d dilation must be at least 1".into()));
        }
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return dim_err(format!("conv1d bias {:?} for {cout} output channels", self.shape(b)));
            }
        }
        let bias_vals = bias.map(|b| self.value(b));
        let out = conv1d_forward(self.value(x), self.value(w), bias_vals, cin, cout, k, t, dilation);
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![cout, t], out, Op::Conv1d { x, w, bias, dilation }, rg))
    }

    // ---- shape --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat along {axis} of {base:?} and {s:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if len == 0 || start + len > n {
            return dim_err(format!("narrow [{start}, {}) of axis {axis} with size {n}", start + len));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Narrow { a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.value(a).len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape { a }, rg))
    }

    /// Overlap-add rows of `frames` (`[T × N]`) at stride `hop` into a
    /// signal of `out_len` samples; samples past `out_len` are dropped.
    pub fn overlap_add(&mut self, frames: Var, hop: usize, out_len: usize) -> Result<Var> {
        let s = self.shape(frames);
        if s.len() != 2 || hop == 0 || out_len == 0 {
            return dim_err(format!("overlap_add of {s:?} with hop {hop} into {out_len}"));
        }
        let (t, n) = (s[0], s[1]);
        let v = self.value(frames);
        let mut out = vec![0.0; out_len];
        for f in 0..t {
            let start = f * hop;
            for i in 0..n.min(out_len.saturating_sub(start)) {
                out[start + i] += v[f * n + i];
            }
        }
        let rg = self.rg(frames);
        Ok(self.push(vec![out_len], out, Op::OverlapAdd { frames, hop }, rg))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", n.shape)));
        }
        if !n.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 2.0);
            }
            self.node_backward(i, &g, &mut grads);
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Matmul { a, b, m, k, n } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (*m, *k, *n);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va[i * k + p];
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (d, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                let gt = transpose_kernel(g, *cols, *rows);
                acc(*a, &mut |ga| ga.iter_mut().zip(&gt).for_each(|(d, s)| *d += s));
            }
            Op::Binary { kind, a, b, plan } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let kind = *kind;
                acc(*a, &mut |ga| {
                    plan.for_each(|o, ia, ib| {
                        ga[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[o],
                            BinaryKind::Mul => g[o] * vb[ib],
                            BinaryKind::Div => g[o] / vb[ib],
                        }
                    })
                });
                acc(*b, &mut |gb| {
                    plan.for_each(|o, ia, ib| {
                        gb[ib] += match kind {
                            BinaryKind::Add => g[o],
                            BinaryKind::Sub => -g[o],
                            BinaryKind::Mul => g[o] * va[ia],
                            BinaryKind::Div => -g[o] * va[ia] / (vb[ib] * vb[ib]),
                        }
                    })
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            Op::AddScalar { a } | Op::Reshape { a } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s))
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let kind = *kind;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i]
                            * match kind {
                                UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                                UnaryKind::Relu => (x[i] > 0.0) as u8 as f64,
                                UnaryKind::Exp => y[i],
                                UnaryKind::Ln => 1.0 / x[i],
                                UnaryKind::Abs => sign(x[i]),
                            };
                    }
                });
            }
            Op::Prelu { x, slope } => {
                let xv = self.value(*x);
                let s = self.value(*slope)[0];
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += if xv[i] > 0.0 { g[i] } else { s * g[i] };
                    }
                });
                acc(*slope, &mut |gs| {
                    gs[0] += xv.iter().zip(g).filter(|(v, _)| **v <= 0.0).map(|(v, gv)| v * gv).sum::<f64>();
                });
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| o * n * inner + i * inner + j;
                            let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..n {
                                ga[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = *node.shape.last().expect("non-empty");
                let rows = inv_std.len();
                let gm = self.value(*gamma);
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; c];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for i in 0..c {
                            dh[i] = g[r * c + i] * gm[i];
                            s1 += dh[i];
                            s2 += dh[i] * xhat[r * c + i];
                        }
                        let k = inv_std[r] / c as f64;
                        for i in 0..c {
                            gx[r * c + i] += k * (c as f64 * dh[i] - s1 - xhat[r * c + i] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for i in 0..c {
                            gg[i] += g[r * c + i] * xhat[r * c + i];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        for i in 0..c {
                            gb[i] += g[r * c + i];
                        }
                    }
                });
            }
            Op::Pool { a, axis, mode, argmax } => match mode {
                PoolMode::Max => acc(*a, &mut |ga| {
                    for (o, &src) in argmax.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }),
                PoolMode::Avg => {
                    let (outer, n, inner) = split_axis(self.shape(*a), *axis).expect("validated in forward");
                    acc(*a, &mut |ga| {
                        for o in 0..outer {
                            for i in 0..n {
                                for j in 0..inner {
                                    ga[o * n * inner + i * inner + j] += g[o * inner + j] / n as f64;
                                }
                            }
                        }
                    });
                }
            },
            Op::Sum { a } => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { a } => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Conv1d { x, w, bias, dilation } => {
                let sw = self.shape(*w);
                let (cout, cin, k) = (sw[0], sw[1], sw[2]);
                let t = node.shape[1];
                let (xv, wv) = (self.value(*x), self.value(*w));
                let pad = dilation * (k - 1) / 2;
                acc(*x, &mut |gx| {
                    for co in 0..cout {
                        let grow = &g[co * t..(co + 1) * t];
                        for ci in 0..cin {
                            let dst = &mut gx[ci * t..(ci + 1) * t];
                            for kk in 0..k {
                                let wt = wv[(co * cin + ci) * k + kk];
                                let (lo, hi, shift) = tap_range(t, kk * dilation, pad);
                                for tt in lo..hi {
                                    dst[(tt as isize + shift) as usize] += wt * grow[tt];
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for co in 0..cout {
                        let grow = &g[co * t..(co + 1) * t];
                        for ci in 0..cin {
                            let src = &xv[ci * t..(ci + 1) * t];
                            for kk in 0..k {
                                let (lo, hi, shift) = tap_range(t, kk * dilation, pad);
                                let mut s = 0.0;
                                for tt in lo..hi {
                                    s += grow[tt] * src[(tt as isize + shift) as usize];
                                }
                                gw[(co * cin + ci) * k + kk] += s;
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for co in 0..cout {
                            gb[co] += g[co * t..(co + 1) * t].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (d, s) in gp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(&g[src..]) {
                                *d += s;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Narrow { a, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis).expect("validated in forward");
                let len = node.shape[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        for (d, s) in ga[base..base + len * inner].iter_mut().zip(&g[o * len * inner..]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::OverlapAdd { frames, hop } => {
                let s = self.shape(*frames);
                let (t, n) = (s[0], s[1]);
                let out_len = g.len();
                acc(*frames, &mut |gf| {
                    for f in 0..t {
                        let start = f * hop;
                        for i in 0..n.min(out_len.saturating_sub(start)) {
                            gf[f * n + i] += g[start + i];
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(outer, axis_len, inner)` decomposition of a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    let n = shape[axis];
    if n == 0 {
        return dim_err(format!("axis {axis} of shape {shape:?} is empty"));
    }
    Ok((outer, n, inner))
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (d, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += aip * bv;
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Output positions `lo..hi` whose tap at `offset - pad` stays in `[0, t)`,
/// plus the index shift from output to input position.
fn tap_range(t: usize, offset: usize, pad: usize) -> (usize, usize, isize) {
    let shift = offset as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).clamp(0, t as isize) as usize;
    (lo.min(hi), hi, shift)
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    cin: usize,
    cout: usize,
    k: usize,
    t: usize,
    dilation: usize,
) -> Vec<f64> {
    let pad = dilation * (k - 1) / 2;
    let mut out = vec![0.0; cout * t];
    for co in 0..cout {
        let row = &mut out[co * t..(co + 1) * t];
        if let Some(b) = bias {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..cin {
            let src = &x[ci * t..(ci + 1) * t];
            for kk in 0..k {
                let wt = w[(co * cin + ci) * k + kk];
                if wt == 0.0 {
                    continue;
                }
                let (lo, hi, shift) = tap_range(t, kk * dilation, pad);
                if lo >= hi {
                    continue;
                }
                let s0 = (lo as isize + shift) as usize;
                for (d, s) in row[lo..hi].iter_mut().zip(&src[s0..]) {
                    *d += wt * s;
                }
            }
        }
    }
    out
}

/// Index plan for same-rank broadcasting.
#[derive(Debug, Clone)]
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return dim_err(format!("cannot broadcast {a:?} with {b:?}: rank differs"));
        }
        let mut out_shape = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            if x != y && x != 1 && y != 1 {
                return dim_err(format!("cannot broadcast {a:?} with {b:?}"));
            }
            out_shape.push(x.max(y));
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; s.len()];
            let mut acc = 1;
            for d in (0..s.len()).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        Ok(Broadcast { same: a == b, a_strides: strides(a), b_strides: strides(b), out_shape })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if self.same {
            (0..n).for_each(|i| f(i, i, i));
            return;
        }
        let r = self.out_shape.len();
        let mut idx = vec![0; r];
        let (mut ia, mut ib) = (0, 0);
        for o in 0..n {
            f(o, ia, ib);
            for d in (0..r).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * self.out_shape[d];
                ib -= self.b_strides[d] * self.out_shape[d];
                idx[d] = 0;
            }
        }
    }
}
