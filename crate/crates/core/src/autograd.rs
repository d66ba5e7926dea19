//! A small reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar root with respect to every node that
//! depends on a gradient-requiring leaf.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dCfg};
use crate::temporal_shift::{self, ShiftLayout};
use crate::tensor::{split_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy { s: Var, x: Var },
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: Conv2dCfg,
    },
    Shift {
        x: Var,
        kernel: Option<Var>,
        fixed: Option<Tensor>,
        layout: ShiftLayout,
    },
    Upsample2x(Var),
    AvgPool {
        x: Var,
        kh: usize,
        kw: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    SpectralNorm {
        w: Var,
        /// ∂σ/∂W with the power-iteration vectors held fixed.
        dsigma: Tensor,
        sigma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    /// `s * x` where `s` is a one-element tensor.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape(format!(
                "scale_by expects a scalar, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).item();
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(s) || self.rg(x);
        Ok(self.push(v, Op::ScaleBy { s, x }, rg))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|e| if e > 0.0 { e } else { slope * e });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let last = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::Numerical(format!(
                    "softmax row has non-finite maximum {m}"
                )));
            }
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dCfg) -> Result<Var> {
        let v = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), cfg)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, cfg }, rg))
    }

    /// Temporal channel shift. With `kernel` the per-channel temporal taps are
    /// learnable; otherwise the fixed hard-shift taps for `layout` are used.
    pub fn temporal_shift(&mut self, x: Var, kernel: Option<Var>, layout: ShiftLayout) -> Result<Var> {
        let fixed = match kernel {
            Some(_) => None,
            None => Some(layout.hard_kernel()),
        };
        let k = match (kernel, &fixed) {
            (Some(k), _) => self.value(k),
            (None, Some(f)) => f,
            _ => unreachable!(),
        };
        let v = temporal_shift::shift_forward(self.value(x), k, &layout)?;
        let rg = self.rg(x) || kernel.is_some_and(|k| self.rg(k));
        Ok(self.push(
            v,
            Op::Shift {
                x,
                kernel,
                fixed,
                layout,
            },
            rg,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 4 {
            return Err(Error::Shape("upsample2x expects [B, C, H, W]".into()));
        }
        let v = kernels::upsample2x_forward(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(v, Op::Upsample2x(x), rg))
    }

    pub fn avg_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || kh == 0 || kw == 0 || s[2] < kh || s[3] < kw {
            return Err(Error::Shape(format!(
                "avg_pool {kh}x{kw} does not fit {s:?}"
            )));
        }
        let v = kernels::avg_pool_forward(self.value(x), kh, kw);
        let rg = self.rg(x);
        Ok(self.push(v, Op::AvgPool { x, kh, kw }, rg))
    }

    /// Batched matrix product of `[B, M, K]`-shaped operands (after the
    /// optional transposition of each operand's trailing two axes).
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (bn, m, ka) = if trans_a { (sa[0], sa[2], sa[1]) } else { (sa[0], sa[1], sa[2]) };
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims {ka} vs {kb} ({sa:?} x {sb:?})"
            )));
        }
        let mut out = Tensor::zeros(&[bn, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..bn {
                kernels::gemm(
                    m,
                    ka,
                    n,
                    &av[i * m * ka..(i + 1) * m * ka],
                    trans_a,
                    &bv[i * ka * n..(i + 1) * ka * n],
                    trans_b,
                    &mut od[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let v = self.value(x).narrow(axis, start, len);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Narrow { x, axis, start }, rg))
    }

    /// Divides the convolution weight `w` by the largest singular value of
    /// the linear map it applies to one `[C, H, W]` input, estimated by one
    /// power-iteration step from `u` (flattened, output-shaped). Returns the
    /// normalized weight and the refined `u`.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], input: [usize; 3], cfg: Conv2dCfg) -> Result<(Var, Vec<f64>)> {
        let wv = self.value(w);
        let (v, u_new, sigma) = kernels::conv_power_step(wv, u, input, cfg)?;
        let dsigma = kernels::conv2d_backward(&v, wv, cfg, &u_new, false, true, false)?
            .dw
            .expect("requested");
        let out = wv.map(|e| e / sigma);
        let rg = self.rg(w);
        let var = self.push(out, Op::SpectralNorm { w, dsigma, sigma }, rg);
        Ok((var, u_new.into_data()))
    }

    /// Gradients of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|e| -e));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|e| e * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::ScaleBy { s, x } => {
                if self.rg(*s) {
                    let d: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::full(self.shape(*s), d));
                }
                if self.rg(*x) {
                    let c = self.value(*s).item();
                    self.accumulate(grads, *x, g.map(|e| e * c));
                }
            }
            Op::Abs(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * sign(xv))?;
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { gv * slope })?;
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let last = *y.shape().last().unwrap();
                let mut d = Tensor::zeros(y.shape());
                for ((dr, yr), gr) in d
                    .data_mut()
                    .chunks_mut(last)
                    .zip(y.data().chunks(last))
                    .zip(g.data().chunks(last))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((de, ye), ge) in dr.iter_mut().zip(yr).zip(gr) {
                        *de = ye * (ge - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b, cfg } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *cfg,
                    g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                )?;
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Shift {
                x,
                kernel,
                fixed,
                layout,
            } => {
                let kv = match (kernel, fixed) {
                    (Some(k), _) => self.value(*k),
                    (None, Some(f)) => f,
                    _ => unreachable!(),
                };
                let need_dk = kernel.is_some_and(|k| self.rg(k));
                let (dx, dk) =
                    temporal_shift::shift_backward(self.value(*x), kv, layout, g, self.rg(*x), need_dk)?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let (Some(k), Some(dk)) = (kernel, dk) {
                    self.accumulate(grads, *k, dk);
                }
            }
            Op::Upsample2x(x) => {
                let d = kernels::upsample2x_backward(self.shape(*x), g);
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool { x, kh, kw } => {
                let d = kernels::avg_pool_backward(self.shape(*x), *kh, *kw, g);
                self.accumulate(grads, *x, d);
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bn, m, n) = (g.dim(0), g.dim(1), g.dim(2));
                let k = if *trans_a { av.dim(1) } else { av.dim(2) };
                if self.rg(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    for i in 0..bn {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        let dst = &mut da.data_mut()[i * m * k..(i + 1) * m * k];
                        if *trans_a {
                            // A stored k×m: dA = op(B) · dCᵀ
                            kernels::gemm(k, n, m, bi, *trans_b, gi, true, dst, 0.0);
                        } else {
                            // dA = dC · op(B)ᵀ
                            kernels::gemm(m, n, k, gi, false, bi, !*trans_b, dst, 0.0);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    for i in 0..bn {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut db.data_mut()[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored n×k: dB = dCᵀ · op(A)
                            kernels::gemm(n, m, k, gi, true, ai, *trans_a, dst, 0.0);
                        } else {
                            // dB = op(A)ᵀ · dC
                            kernels::gemm(k, m, n, ai, !*trans_a, gi, false, dst, 0.0);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        self.accumulate(grads, p, g.narrow(*axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let mut d = Tensor::zeros(xs);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = g.dim(*axis);
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    d.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::SpectralNorm { w, dsigma, sigma } => {
                // y = W / σ(W): dW = g / σ − (Σ g ⊙ W) / σ² · ∂σ/∂W
                let wv = self.value(*w);
                let gw: f64 = g.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
                let coef = gw / (sigma * sigma);
                let d = g.zip_map(dsigma, |a, b| a / sigma - coef * b)?;
                self.accumulate(grads, *w, d);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { Tensor::randn(&[2, 4, 3], 1.0, &mut rng) } else { Tensor::randn(&[2, 3, 4], 1.0, &mut rng) };
            let b = if tb { Tensor::randn(&[2, 5, 4], 1.0, &mut rng) } else { Tensor::randn(&[2, 4, 5], 1.0, &mut rng) };
            let w = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
            let report = check_gradients(&[a, b], 1e-6, |g, v| {
                let c = g.matmul(v[0], v[1], ta, tb)?;
                let wv = g.constant(w.clone());
                let p = g.mul(c, wv)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "{ta} {tb}: {report:?}");
        }
    }

    #[test]
    fn softmax_and_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let report = check_gradients(&[x], 1e-6, |g, v| {
            let s = g.softmax(v[0])?;
            let t = g.tanh(v[0]);
            let l = g.leaky_relu(t, 0.2);
            let sg = g.sigmoid(l);
            let p = g.mul(s, sg)?;
            let wv = g.constant(w.clone());
            let q = g.mul(p, wv)?;
            Ok(g.mean(q))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn spectral_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng);
        let m = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng);
        let cfg = Conv2dCfg { stride: 2, padding: 1, dilation: 1 };
        // Converge the power iteration first; at the fixed point the
        // constant-(u, v) gradient is exact.
        let mut u = Tensor::randn(&[4 * 3 * 3], 1.0, &mut rng).into_data();
        let mut base = Graph::new();
        let bw = base.constant(w.clone());
        for _ in 0..500 {
            u = base.spectral_norm(bw, &u, [2, 6, 6], cfg).unwrap().1;
        }
        let report = check_gradients(&[w.clone()], 1e-6, |g, v| {
            let (sn, _) = g.spectral_norm(v[0], &u, [2, 6, 6], cfg)?;
            let mv = g.constant(m.clone());
            let p = g.mul(sn, mv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn concat_narrow_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let report = check_gradients(&[a, b], 1e-6, |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let n = g.narrow(c, 1, 1, 3)?;
            let u = g.upsample2x(n)?;
            let wv = g.constant(w.clone());
            let p = g.mul(u, wv)?;
            let pooled = g.avg_pool(p, 2, 2)?;
            let sq = g.mul(pooled, pooled)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
