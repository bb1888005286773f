//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are copied onto
//! the tape from [`Tensor`] values, every operation appends one node, and
//! [`Tape::backward`] walks the nodes once in reverse, accumulating
//! gradients into the leaves that asked for them.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self {
            shape,
            data,
            requires_grad,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(buf) = &mut self.grad {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2`; output keeps the input's spatial size.
    Same,
    /// No padding; output is `(H - k + 1) x (W - k + 1)`.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        pad: usize,
    },
    ClampMin(Var, f64),
    Exp(Var),
    LogSoftmax(Var, usize),
    Reduce(Reduction, Var),
    SpatialMean(Var),
    AddRowBias(Var, Var),
    Pick(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

struct Conv2dDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dDims {
    /// Output rows/cols `[lo, hi)` whose input index `o + kk - pad` is in bounds.
    fn range(&self, kk: usize, out: usize, inp: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = out.min((inp + self.pad).saturating_sub(kk));
        (lo, hi.max(lo))
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf. Existing gradients on `t` are not carried over.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data, false)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Accumulated gradient of a leaf; `None` before any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Snapshot of a node as a [`Tensor`], including any accumulated gradient.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
        };
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|x| x * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let av = na.value[i * k + l];
                let brow = &nb.value[l * n..(l + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn conv_dims(&self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Conv2dDims> {
        let (ni, nk, nb) = (self.node(input), self.node(kernel), self.node(bias));
        let mismatch = |left: &[usize], right: &[usize]| Error::ShapeMismatch {
            op: "conv2d",
            left: left.to_vec(),
            right: right.to_vec(),
        };
        if ni.shape.len() != 4 || nk.shape.len() != 4 {
            return Err(mismatch(&ni.shape, &nk.shape));
        }
        let (n, c, h, w) = (ni.shape[0], ni.shape[1], ni.shape[2], ni.shape[3]);
        let (f, kc, k, k2) = (nk.shape[0], nk.shape[1], nk.shape[2], nk.shape[3]);
        if kc != c {
            return Err(mismatch(&ni.shape, &nk.shape));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be square and odd, got {k}x{k2}"
            )));
        }
        if nb.shape != [f] {
            return Err(mismatch(&nk.shape, &nb.shape));
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => {
                if k > h || k > w {
                    return Err(Error::InvalidArgument(format!(
                        "valid conv2d kernel {k} exceeds input {h}x{w}"
                    )));
                }
                0
            }
        };
        Ok(Conv2dDims {
            n,
            c,
            h,
            w,
            f,
            k,
            pad,
            ho: h + 2 * pad - k + 1,
            wo: w + 2 * pad - k + 1,
        })
    }

    /// Stride-1 cross-correlation of `input [N,C,H,W]` with `kernel [F,C,k,k]` plus `bias [F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let d = self.conv_dims(input, kernel, bias, padding)?;
        let (x, wt, b) = (
            &self.node(input).value,
            &self.node(kernel).value,
            &self.node(bias).value,
        );
        let plane = d.ho * d.wo;
        let mut out = vec![0.0; d.n * d.f * plane];
        for n in 0..d.n {
            for f in 0..d.f {
                let o = &mut out[(n * d.f + f) * plane..][..plane];
                o.iter_mut().for_each(|v| *v = b[f]);
                for c in 0..d.c {
                    let xi = &x[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
                    for ki in 0..d.k {
                        let (y0, y1) = d.range(ki, d.ho, d.h);
                        for kj in 0..d.k {
                            let wv = wt[((f * d.c + c) * d.k + ki) * d.k + kj];
                            let (x0, x1) = d.range(kj, d.wo, d.w);
                            let len = x1 - x0;
                            let ix0 = x0 + kj - d.pad;
                            for oy in y0..y1 {
                                let iy = oy + ki - d.pad;
                                let orow = &mut o[oy * d.wo + x0..][..len];
                                let irow = &xi[iy * d.w + ix0..][..len];
                                orow.iter_mut().zip(irow).for_each(|(ov, &iv)| *ov += wv * iv);
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            vec![d.n, d.f, d.ho, d.wo],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad: d.pad,
            },
            rg,
        ))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.clamp_min(x, 0.0)
    }

    /// `max(lo, x)`; gradient flows only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&v| if v > lo { v } else { lo }).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::ClampMin(x, lo), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|v| v.exp()).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::Exp(x), rg)
    }

    /// Max-subtracted log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.node(x);
        if axis >= n.shape.len() {
            return Err(Error::InvalidArgument(format!(
                "log_softmax axis {axis} out of range for shape {:?}",
                n.shape
            )));
        }
        let (outer, len, inner) = axis_split(&n.shape, axis);
        let mut out = vec![0.0; n.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| n.value[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..len).map(|j| (n.value[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[idx(j)] = n.value[idx(j)] - max - lse;
                }
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::LogSoftmax(x, axis), rg))
    }

    /// Full reduction to a scalar (shape `[]`).
    pub fn reduce(&mut self, kind: Reduction, x: Var) -> Var {
        let n = self.node(x);
        let s: f64 = n.value.iter().sum();
        let v = match kind {
            Reduction::Sum => s,
            Reduction::Mean => s / n.value.len() as f64,
        };
        let rg = n.requires_grad;
        self.push(Vec::new(), vec![v], Op::Reduce(kind, x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Mean, x)
    }

    /// Global average pool: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "spatial_mean expects rank 4, got {:?}",
                n.shape
            )));
        }
        let (b, c, hw) = (n.shape[0], n.shape[1], n.shape[2] * n.shape[3]);
        let value = n
            .value
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = n.requires_grad;
        Ok(self.push(vec![b, c], value, Op::SpatialMean(x), rg))
    }

    /// `x [N,K] + bias [K]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x), self.node(bias));
        if nx.shape.len() != 2 || nb.shape != [nx.shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: nx.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let k = nx.shape[1];
        let value = nx
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + nb.value[i % k])
            .collect();
        let shape = nx.shape.clone();
        let rg = nx.requires_grad || nb.requires_grad;
        Ok(self.push(shape, value, Op::AddRowBias(x, bias), rg))
    }

    /// Selects `x[n, index[n]]` from a `[N,C]` node, giving `[N]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 2 || n.shape[0] != index.len() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: n.shape.clone(),
                right: vec![index.len()],
            });
        }
        let c = n.shape[1];
        if let Some(&bad) = index.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for {c} columns"
            )));
        }
        let value = index.iter().enumerate().map(|(r, &j)| n.value[r * c + j]).collect();
        let rg = n.requires_grad;
        Ok(self.push(vec![index.len()], value, Op::Pick(x, index.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    ///
    /// Calling it again without [`Tape::zero_grad`] adds to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.local_grads(id, &g) {
                match &mut adj[v.0] {
                    Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each input that needs a gradient.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let mut out = Vec::with_capacity(3);
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<f64>| {
            if self.rg(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                match kind {
                    Elementwise::Add => {
                        emit(a, &|| g.to_vec());
                        emit(b, &|| g.to_vec());
                    }
                    Elementwise::Sub => {
                        emit(a, &|| g.to_vec());
                        emit(b, &|| g.iter().map(|x| -x).collect());
                    }
                    Elementwise::Mul => {
                        emit(a, &|| g.iter().zip(vb).map(|(x, y)| x * y).collect());
                        emit(b, &|| g.iter().zip(va).map(|(x, y)| x * y).collect());
                    }
                }
            }
            &Op::Scale(a, c) => emit(a, &|| g.iter().map(|x| x * c).collect()),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(a), self.value(b));
                emit(a, &|| {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            da[i * k + l] = (0..n).map(|j| g[i * n + j] * vb[l * n + j]).sum();
                        }
                    }
                    da
                });
                emit(b, &|| {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let av = va[i * k + l];
                            let row = &mut db[l * n..(l + 1) * n];
                            row.iter_mut()
                                .zip(&g[i * n..(i + 1) * n])
                                .for_each(|(d, &gv)| *d += av * gv);
                        }
                    }
                    db
                });
            }
            &Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            } => {
                let padding = if pad == 0 { Padding::Valid } else { Padding::Same };
                let d = self
                    .conv_dims(input, kernel, bias, padding)
                    .expect("conv2d shapes were validated on the forward pass");
                let wanted = [self.rg(input), self.rg(kernel), self.rg(bias)];
                let grads = conv2d_backward(&d, self.value(input), self.value(kernel), g, wanted);
                for (grad, var) in grads.into_iter().zip([input, kernel, bias]) {
                    if let Some(grad) = grad {
                        out.push((var, grad));
                    }
                }
            }
            &Op::ClampMin(x, lo) => {
                let xv = self.value(x);
                emit(x, &|| {
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > lo { gv } else { 0.0 })
                        .collect()
                });
            }
            &Op::Exp(x) => emit(x, &|| g.iter().zip(&node.value).map(|(a, b)| a * b).collect()),
            &Op::LogSoftmax(x, axis) => {
                emit(x, &|| {
                    let (outer, len, inner) = axis_split(&node.shape, axis);
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let gs: f64 = (0..len).map(|j| g[idx(j)]).sum();
                            for j in 0..len {
                                dx[idx(j)] = g[idx(j)] - node.value[idx(j)].exp() * gs;
                            }
                        }
                    }
                    dx
                });
            }
            &Op::Reduce(kind, x) => {
                let count = self.value(x).len();
                let gv = match kind {
                    Reduction::Sum => g[0],
                    Reduction::Mean => g[0] / count as f64,
                };
                emit(x, &|| vec![gv; count]);
            }
            &Op::SpatialMean(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                emit(x, &|| {
                    g.iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw))
                        .collect()
                });
            }
            &Op::AddRowBias(x, bias) => {
                let k = self.shape(bias)[0];
                emit(x, &|| g.to_vec());
                emit(bias, &|| {
                    let mut db = vec![0.0; k];
                    for row in g.chunks_exact(k) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    db
                });
            }
            Op::Pick(x, index) => {
                let x = *x;
                let c = self.shape(x)[1];
                emit(x, &|| {
                    let mut dx = vec![0.0; index.len() * c];
                    for (r, &j) in index.iter().enumerate() {
                        dx[r * c + j] = g[r];
                    }
                    dx
                });
            }
        }
        out
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradients for (input, kernel, bias), computed only where `wanted` is set.
fn conv2d_backward(
    d: &Conv2dDims,
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    wanted: [bool; 3],
) -> [Option<Vec<f64>>; 3] {
    let plane = d.ho * d.wo;
    let [want_x, want_w, want_b] = wanted;
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; wt.len()]);
    let mut db = want_b.then(|| vec![0.0; d.f]);
    for n in 0..d.n {
        for f in 0..d.f {
            let go = &g[(n * d.f + f) * plane..][..plane];
            if let Some(db) = &mut db {
                db[f] += go.iter().sum::<f64>();
            }
            for c in 0..d.c {
                let base = (n * d.c + c) * d.h * d.w;
                for ki in 0..d.k {
                    let (y0, y1) = d.range(ki, d.ho, d.h);
                    for kj in 0..d.k {
                        let widx = ((f * d.c + c) * d.k + ki) * d.k + kj;
                        let (x0, x1) = d.range(kj, d.wo, d.w);
                        let len = x1 - x0;
                        let ix0 = x0 + kj - d.pad;
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy + ki - d.pad;
                            let grow = &go[oy * d.wo + x0..][..len];
                            let at = base + iy * d.w + ix0;
                            if want_w {
                                acc += grow
                                    .iter()
                                    .zip(&x[at..at + len])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            if let Some(dx) = &mut dx {
                                let wv = wt[widx];
                                dx[at..at + len]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(o, &gv)| *o += wv * gv);
                            }
                        }
                        if let Some(dw) = &mut dw {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    [dx, dw, db]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec(), true).unwrap()
    }

    /// Central differences of `f` around `x`, step 1e-5.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn construction() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.], false).unwrap();
        assert_eq!(a.numel(), 4);
        assert_eq!(Tensor::new(vec![3], vec![0.; 3], false).unwrap().data(), &[0.; 3]);
        assert!(matches!(
            Tensor::new(vec![2], vec![1., 2., 3.], false),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN], false),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn elementwise_ops() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1., 2.]));
        let b = tape.leaf(&t(&[2], &[3., 4.]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s), &[4., 6.]);
        let z = tape.constant(vec![2], vec![0., 0.]).unwrap();
        let m = tape.mul(a, z).unwrap();
        assert_eq!(tape.value(m), &[0., 0.]);
        let c = tape.leaf(&t(&[3], &[1., 2., 3.]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let id = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.leaf(&t(&[2, 2], &[1.5, -2., 3., 0.25]));
        let p = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(&t(&[2, 1], &[5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[17., 39.]);
        assert!(tape.matmul(b, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 3]);
        let b = random(&mut rng, &[3, 3]);
        let w = random(&mut rng, &[3, 3]);
        let loss = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let (va, vb, vw) = (tape.leaf(a), tape.leaf(b), tape.leaf(&w));
            let c = tape.matmul(va, vb).unwrap();
            let cw = tape.mul(c, vw).unwrap();
            let l = tape.sum(cw);
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.grad(va).unwrap().to_vec(), tape.grad(vb).unwrap().to_vec())
        };
        let (_, ga, gb) = loss(&a, &b);
        assert!(rel_err(&ga, &numeric_grad(&a, &|x| loss(x, &b).0)) < 1e-6);
        assert!(rel_err(&gb, &numeric_grad(&b, &|x| loss(&a, x).0)) < 1e-6);
    }

    #[test]
    fn conv2d_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random(&mut rng, &[1, 1, 5, 5]);
        let mut tape = Tape::new();
        let x = tape.leaf(&img);
        let k = tape.leaf(&t(&[1, 1, 1, 1], &[1.]));
        let b = tape.leaf(&t(&[1], &[0.]));
        let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
        assert_eq!(tape.value(y), img.data());

        let c = 0.3;
        let x = tape.leaf(&t(&[1, 1, 4, 4], &[c; 16]));
        let k = tape.leaf(&t(&[1, 1, 3, 3], &[1.; 9]));
        let y = tape.conv2d(x, k, b, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        for v in tape.value(y) {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
        let same = tape.conv2d(x, k, b, Padding::Same).unwrap();
        assert_eq!(tape.shape(same), &[1, 1, 4, 4]);
        // corner sees 4 of the 9 taps
        assert!((tape.value(same)[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 2, 4, 4]));
        let k = tape.leaf(&Tensor::zeros(vec![1, 1, 3, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![1]));
        assert!(matches!(
            tape.conv2d(x, k, b, Padding::Same),
            Err(Error::ShapeMismatch { .. })
        ));
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(tape.conv2d(x, k, b, Padding::Valid).is_err());
        let k2 = tape.leaf(&Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(tape.conv2d(x, k2, b, Padding::Same).is_err());
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for padding in [Padding::Same, Padding::Valid] {
            let x = random(&mut rng, &[1, 1, 4, 4]);
            let k = random(&mut rng, &[2, 1, 3, 3]);
            let b = random(&mut rng, &[2]);
            let out_n = if padding == Padding::Same { 32 } else { 8 };
            let w: Vec<f64> = (0..out_n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let run = |x: &Tensor, k: &Tensor, b: &Tensor| {
                let mut tape = Tape::new();
                let (vx, vk, vb) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
                let y = tape.conv2d(vx, vk, vb, padding).unwrap();
                let shape = tape.shape(y).to_vec();
                let wv = tape.constant(shape, w.clone()).unwrap();
                let yw = tape.mul(y, wv).unwrap();
                let l = tape.sum(yw);
                tape.backward(l).unwrap();
                let g = |v| tape.grad(v).unwrap().to_vec();
                (tape.scalar(l), g(vx), g(vk), g(vb))
            };
            let (_, gx, gk, gb) = run(&x, &k, &b);
            assert!(rel_err(&gx, &numeric_grad(&x, &|p| run(p, &k, &b).0)) < 1e-5);
            assert!(rel_err(&gk, &numeric_grad(&k, &|p| run(&x, p, &b).0)) < 1e-5);
            assert!(rel_err(&gb, &numeric_grad(&b, &|p| run(&x, &k, p).0)) < 1e-5);
        }
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1., 0., 2.]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0., 0., 2.]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 0., 1.]);

        let pos = tape.leaf(&t(&[2], &[0.5, 3.]));
        let y = tape.relu(pos);
        assert_eq!(tape.value(y), &[0.5, 3.]);
    }

    #[test]
    fn log_softmax_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0., 0.]));
        let y = tape.log_softmax(x, 0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(tape.value(y).iter().all(|v| (v + ln2).abs() < 1e-15));

        let x = tape.leaf(&t(&[2], &[1000., 0.]));
        let y = tape.log_softmax(x, 0).unwrap();
        assert!(tape.value(y).iter().all(|v| v.is_finite()));

        let x = tape.leaf(&t(&[3], &[1., 2., 3.]));
        let y = tape.log_softmax(x, 0).unwrap();
        // e^k / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let want: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        for (v, w) in tape.value(y).iter().zip(&want) {
            assert!((v.exp() - w).abs() < 1e-12);
        }
        assert!((want[0] - 0.0900).abs() < 5e-5);
        assert!((want[1] - 0.2447).abs() < 5e-5);
        assert!((want[2] - 0.6652).abs() < 5e-5);
        assert!(tape.log_softmax(x, 1).is_err());
    }

    #[test]
    fn log_softmax_gradient_both_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[3, 4]);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        for axis in 0..2 {
            let run = |x: &Tensor| {
                let mut tape = Tape::new();
                let vx = tape.leaf(x);
                let y = tape.log_softmax(vx, axis).unwrap();
                let wv = tape.constant(vec![3, 4], w.clone()).unwrap();
                let yw = tape.mul(y, wv).unwrap();
                let l = tape.sum(yw);
                tape.backward(l).unwrap();
                (tape.scalar(l), tape.grad(vx).unwrap().to_vec())
            };
            let g = run(&x).1;
            assert!(rel_err(&g, &numeric_grad(&x, &|p| run(p).0)) < 1e-6);
        }
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[2., 4.]));
        let m = tape.mean(x);
        assert_eq!(tape.scalar(m), 3.0);
        assert!(tape.shape(m).is_empty());
        let z = tape.leaf(&Tensor::zeros(vec![5]));
        let s = tape.sum(z);
        assert_eq!(tape.scalar(s), 0.0);
        let x4 = tape.leaf(&t(&[4], &[1., -2., 3., 0.5]));
        let m4 = tape.mean(x4);
        tape.backward(m4).unwrap();
        assert_eq!(tape.grad(x4).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[5., 7.]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1.]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 2.]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0., 0.]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_composite_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[3]);
        let feats = random(&mut rng, &[5, 4]).with_requires_grad(false);
        let labels = [0usize, 2, 1, 1, 0];
        let run = |w: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let (vf, vw, vb) = (tape.leaf(&feats), tape.leaf(w), tape.leaf(b));
            let h = tape.matmul(vf, vw).unwrap();
            let z = tape.add_row_bias(h, vb).unwrap();
            let lp = tape.log_softmax(z, 1).unwrap();
            let picked = tape.pick(lp, &labels).unwrap();
            let m = tape.mean(picked);
            let l = tape.scale(m, -1.0);
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.grad(vw).unwrap().to_vec(), tape.grad(vb).unwrap().to_vec())
        };
        let (_, gw, gb) = run(&w, &b);
        assert!(rel_err(&gw, &numeric_grad(&w, &|p| run(p, &b).0)) < 1e-4);
        assert!(rel_err(&gb, &numeric_grad(&b, &|p| run(&w, p).0)) < 1e-4);
    }

    #[test]
    fn spatial_mean_and_exp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[2, 3, 2, 2]);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let vx = tape.leaf(x);
            let e = tape.exp(vx);
            let p = tape.spatial_mean(e).unwrap();
            let sq = tape.mul(p, p).unwrap();
            let l = tape.sum(sq);
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.grad(vx).unwrap().to_vec())
        };
        let g = run(&x).1;
        assert!(rel_err(&g, &numeric_grad(&x, &|p| run(p).0)) < 1e-6);
    }

    #[test]
    fn pick_rejects_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 3]));
        assert!(tape.pick(x, &[0, 3]).is_err());
        assert!(tape.pick(x, &[0]).is_err());
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[2, 1, 6, 6]);
        let k = random(&mut rng, &[3, 1, 3, 3]);
        let b = random(&mut rng, &[3]);
        let run = || {
            let mut tape = Tape::new();
            let (vx, vk, vb) = (tape.leaf(&x), tape.leaf(&k), tape.leaf(&b));
            let y = tape.conv2d(vx, vk, vb, Padding::Same).unwrap();
            let y = tape.relu(y);
            let p = tape.spatial_mean(y).unwrap();
            tape.value(p).to_vec()
        };
        assert_eq!(run(), run());
    }
}
