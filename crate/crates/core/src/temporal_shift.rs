//! Temporal channel shifting and the gated temporal-shift convolution.
//!
//! A kernel-3 temporal convolution `Y_i = w1·X_{i-1} + w2·X_i + w3·X_{i+1}`
//! splits into a multiplication-free shift of the input by −1, 0, +1 followed
//! by a multiply-accumulate. Video networks exploit this by shifting a slice
//! of feature channels between neighbouring frames and letting the next 2-D
//! convolution do the accumulation.
//!
//! Feature maps are stored as `[N·T, C, H, W]` with the time index varying
//! fastest inside each clip, i.e. row `n·T + t` holds frame `t` of clip `n`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Conv2dCfg;
use crate::tensor::Tensor;

/// Weights `(w1, w2, w3)` of a kernel-3 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftKernel([f64; 3]);

impl ShiftKernel {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        if ![w1, w2, w3].iter().all(|w| w.is_finite()) {
            return Err(Error::InvalidInput("shift kernel taps must be finite".into()));
        }
        Ok(Self([w1, w2, w3]))
    }

    pub fn taps(&self) -> [f64; 3] {
        self.0
    }
}

/// Kernel-3 convolution computed as shift (by −1, 0, +1) then
/// multiply-accumulate. Positions outside the sequence read as zero.
pub fn shift_decompose_1d(x: &[f64], w: ShiftKernel) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("sequence contains non-finite values".into()));
    }
    let n = x.len();
    let shifted = |offset: isize| -> Vec<f64> {
        (0..n as isize)
            .map(|i| {
                let j = i + offset;
                if j < 0 || j >= n as isize {
                    0.0
                } else {
                    x[j as usize]
                }
            })
            .collect()
    };
    let (prev, cur, next) = (shifted(-1), shifted(0), shifted(1));
    let [w1, w2, w3] = w.0;
    Ok((0..n)
        .map(|i| w1 * prev[i] + w2 * cur[i] + w3 * next[i])
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftDirection {
    /// Half of the shifted channels come from `t − 1`, half from `t + 1`.
    Bidirectional,
    /// All shifted channels come from `t − 1`; the future is never read.
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Fraction of all channels that is displaced, in `(0, 1]`.
    pub shift_fraction: f64,
    pub direction: ShiftDirection,
    pub learnable: bool,
}

impl ShiftSpec {
    pub const fn online(learnable: bool) -> Self {
        Self {
            shift_fraction: 0.25,
            direction: ShiftDirection::Online,
            learnable,
        }
    }

    pub const fn bidirectional(learnable: bool) -> Self {
        Self {
            shift_fraction: 0.25,
            direction: ShiftDirection::Bidirectional,
            learnable,
        }
    }

    /// Channels displaced per direction (`k`) for a map with `channels`
    /// channels. Online mode displaces `2k` channels, all from the past.
    pub fn per_direction(&self, channels: usize) -> Result<usize> {
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "shift fraction {} outside (0, 1]",
                self.shift_fraction
            )));
        }
        let k = (channels as f64 * self.shift_fraction / 2.0 + 1e-9).floor() as usize;
        if 2 * k > channels {
            return Err(Error::InvalidSpec(format!(
                "{k} channels per direction exceeds half of {channels}"
            )));
        }
        Ok(k)
    }

    pub fn layout(&self, n: usize, t: usize, channels: usize) -> Result<ShiftLayout> {
        Ok(ShiftLayout {
            n,
            t,
            k: self.per_direction(channels)?,
            direction: self.direction,
        })
    }

    /// Initial learnable taps: the hard-shift pattern.
    pub fn initial_kernel(&self, channels: usize) -> Result<Option<Tensor>> {
        if !self.learnable {
            return Ok(None);
        }
        Ok(Some(self.layout(1, 1, channels)?.hard_kernel()))
    }
}

/// Resolved shift geometry for a concrete feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftLayout {
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub direction: ShiftDirection,
}

impl ShiftLayout {
    pub fn shifted_channels(&self) -> usize {
        2 * self.k
    }

    /// Frame offsets read by each tap.
    pub fn offsets(&self) -> &'static [isize] {
        match self.direction {
            ShiftDirection::Bidirectional => &[-1, 0, 1],
            ShiftDirection::Online => &[-1, 0],
        }
    }

    /// Taps reproducing the plain (non-learnable) shift: `[2k, taps]`.
    pub fn hard_kernel(&self) -> Tensor {
        let taps = self.offsets().len();
        let mut k = Tensor::zeros(&[self.shifted_channels(), taps]);
        for s in 0..self.shifted_channels() {
            let tap = match self.direction {
                ShiftDirection::Bidirectional if s >= self.k => 2,
                _ => 0,
            };
            k.data_mut()[s * taps + tap] = 1.0;
        }
        k
    }

    fn check(&self, x: &Tensor, kernel: &Tensor) -> Result<()> {
        if x.ndim() != 4 || x.dim(0) != self.n * self.t {
            return Err(Error::Shape(format!(
                "feature map {:?} does not match {} clips x {} frames",
                x.shape(),
                self.n,
                self.t
            )));
        }
        if self.shifted_channels() > x.dim(1) {
            return Err(Error::InvalidSpec(format!(
                "{} shifted channels exceed {} channels",
                self.shifted_channels(),
                x.dim(1)
            )));
        }
        if kernel.shape() != [self.shifted_channels(), self.offsets().len()] {
            return Err(Error::Config(format!(
                "shift kernel {:?} does not match {} shifted channels",
                kernel.shape(),
                self.shifted_channels()
            )));
        }
        Ok(())
    }
}

pub(crate) fn shift_forward(x: &Tensor, kernel: &Tensor, layout: &ShiftLayout) -> Result<Tensor> {
    layout.check(x, kernel)?;
    let (c, plane) = (x.dim(1), x.dim(2) * x.dim(3));
    let offsets = layout.offsets();
    let taps = offsets.len();
    let mut out = x.clone();
    let od = out.data_mut();
    for n in 0..layout.n {
        for t in 0..layout.t {
            let row = n * layout.t + t;
            for s in 0..layout.shifted_channels() {
                let dst = &mut od[(row * c + s) * plane..(row * c + s + 1) * plane];
                dst.fill(0.0);
                for (j, &off) in offsets.iter().enumerate() {
                    let w = kernel.data()[s * taps + j];
                    let src_t = t as isize + off;
                    if w == 0.0 || src_t < 0 || src_t >= layout.t as isize {
                        continue;
                    }
                    let src_row = n * layout.t + src_t as usize;
                    let src = &x.data()[(src_row * c + s) * plane..(src_row * c + s + 1) * plane];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += w * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn shift_backward(
    x: &Tensor,
    kernel: &Tensor,
    layout: &ShiftLayout,
    gout: &Tensor,
    need_dx: bool,
    need_dk: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    layout.check(x, kernel)?;
    let (c, plane) = (x.dim(1), x.dim(2) * x.dim(3));
    let offsets = layout.offsets();
    let taps = offsets.len();
    let mut dx = need_dx.then(|| {
        let mut d = gout.clone();
        for row in 0..layout.n * layout.t {
            for s in 0..layout.shifted_channels() {
                d.data_mut()[(row * c + s) * plane..(row * c + s + 1) * plane].fill(0.0);
            }
        }
        d
    });
    let mut dk = need_dk.then(|| Tensor::zeros(kernel.shape()));
    for n in 0..layout.n {
        for t in 0..layout.t {
            let row = n * layout.t + t;
            for s in 0..layout.shifted_channels() {
                let g = &gout.data()[(row * c + s) * plane..(row * c + s + 1) * plane];
                for (j, &off) in offsets.iter().enumerate() {
                    let src_t = t as isize + off;
                    if src_t < 0 || src_t >= layout.t as isize {
                        continue;
                    }
                    let src_row = n * layout.t + src_t as usize;
                    let range = (src_row * c + s) * plane..(src_row * c + s + 1) * plane;
                    if let Some(dk) = dk.as_mut() {
                        let xs = &x.data()[range.clone()];
                        dk.data_mut()[s * taps + j] += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let w = kernel.data()[s * taps + j];
                        for (d, gv) in dx.data_mut()[range].iter_mut().zip(g) {
                            *d += w * gv;
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

/// An `N × T × C × H × W` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    n: usize,
    t: usize,
    data: Tensor,
}

impl FeatureMap {
    /// Wraps a `[N·T, C, H, W]` tensor.
    pub fn new(n: usize, t: usize, data: Tensor) -> Result<Self> {
        if n == 0 || t == 0 {
            return Err(Error::InvalidInput("feature map needs N >= 1 and T >= 1".into()));
        }
        if data.ndim() != 4 || data.dim(0) != n * t || data.dim(1) == 0 {
            return Err(Error::Shape(format!(
                "feature map data {:?} is not [{}, C>=1, H, W]",
                data.shape(),
                n * t
            )));
        }
        if !data.all_finite() {
            return Err(Error::InvalidInput("feature map contains non-finite values".into()));
        }
        Ok(Self { n, t, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn c(&self) -> usize {
        self.data.dim(1)
    }
    pub fn h(&self) -> usize {
        self.data.dim(2)
    }
    pub fn w(&self) -> usize {
        self.data.dim(3)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn get(&self, n: usize, t: usize, c: usize, y: usize, x: usize) -> f64 {
        let (cc, h, w) = (self.c(), self.h(), self.w());
        self.data.data()[(((n * self.t + t) * cc + c) * h + y) * w + x]
    }
}

/// Plain (non-learnable) temporal shift of a feature map.
pub fn temporal_shift(f: &FeatureMap, spec: &ShiftSpec) -> Result<FeatureMap> {
    let layout = spec.layout(f.n, f.t, f.c())?;
    let out = shift_forward(&f.data, &layout.hard_kernel(), &layout)?;
    Ok(FeatureMap {
        n: f.n,
        t: f.t,
        data: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        match *self {
            Activation::LeakyRelu(slope) => g.leaky_relu(x, slope),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Static description of one gated temporal-shift convolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub conv: Conv2dCfg,
    pub shift: ShiftSpec,
    pub activation: Activation,
    /// Bilinear 2x up-sampling applied before the shift and convolution.
    pub upsample: bool,
}

/// Extra feature-weight gain that offsets the sigmoid gate.
pub const FEATURE_GATE_GAIN: f64 = 2.0;

/// Parameter values for one gated temporal-shift convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedConvParams {
    pub feature_w: Tensor,
    pub feature_b: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    pub shift_kernel: Option<Tensor>,
}

impl GatedConvParams {
    /// Random feature and gate weights (fan-in scaled), zero biases, and the
    /// hard-shift initialisation of the learnable taps.
    ///
    /// The feature gain offsets both the activation and the roughly halving
    /// sigmoid gate, so activations keep their scale through deep stacks.
    pub fn init(spec: &GatedConvSpec, rng: &mut impl rand::Rng) -> Result<Self> {
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let std = (1.0 / fan_in).sqrt();
        let gain = match spec.activation {
            Activation::LeakyRelu(a) => (2.0 / (1.0 + a * a)).sqrt(),
            Activation::Tanh | Activation::Identity => 1.0,
        };
        let wshape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        Ok(Self {
            feature_w: Tensor::randn(&wshape, FEATURE_GATE_GAIN * gain * std, rng),
            feature_b: Tensor::zeros(&[spec.out_channels]),
            gate_w: Tensor::randn(&wshape, std, rng),
            gate_b: Tensor::zeros(&[spec.out_channels]),
            shift_kernel: spec.shift.initial_kernel(spec.in_channels)?,
        })
    }
}

/// Graph handles for the parameters of one gated layer.
#[derive(Clone, Copy, Debug)]
pub struct GatedConvVars {
    pub feature_w: Var,
    pub feature_b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
    pub shift_kernel: Option<Var>,
}

/// `activation(feature_conv(shift(x))) ⊙ sigmoid(gate_conv(shift(x)))`.
pub fn gated_tsm_conv_graph(
    g: &mut Graph,
    x: Var,
    n: usize,
    t: usize,
    spec: &GatedConvSpec,
    vars: &GatedConvVars,
) -> Result<Var> {
    let channels = g.shape(x)[1];
    if channels != spec.in_channels {
        return Err(Error::Config(format!(
            "layer expects {} input channels, feature map has {channels}",
            spec.in_channels
        )));
    }
    if spec.shift.learnable != vars.shift_kernel.is_some() {
        return Err(Error::Config(
            "learnable shift needs exactly one shift kernel parameter".into(),
        ));
    }
    let x = if spec.upsample { g.upsample2x(x)? } else { x };
    let layout = spec.shift.layout(n, t, channels)?;
    let shifted = g.temporal_shift(x, vars.shift_kernel, layout)?;
    // One convolution over the stacked feature and gate filters.
    let w = g.concat(&[vars.feature_w, vars.gate_w], 0)?;
    let b = g.concat(&[vars.feature_b, vars.gate_b], 0)?;
    let both = g.conv2d(shifted, w, Some(b), spec.conv)?;
    let feat = g.narrow(both, 1, 0, spec.out_channels)?;
    let gate = g.narrow(both, 1, spec.out_channels, spec.out_channels)?;
    let feat = spec.activation.apply(g, feat);
    let gate = g.sigmoid(gate);
    g.mul(feat, gate)
}

/// Evaluates one gated temporal-shift convolution on a feature map.
pub fn gated_tsm_conv(f: &FeatureMap, spec: &GatedConvSpec, params: &GatedConvParams) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(f.data.clone());
    let vars = GatedConvVars {
        feature_w: g.constant(params.feature_w.clone()),
        feature_b: g.constant(params.feature_b.clone()),
        gate_w: g.constant(params.gate_w.clone()),
        gate_b: g.constant(params.gate_b.clone()),
        shift_kernel: params.shift_kernel.clone().map(|k| g.constant(k)),
    };
    let y = gated_tsm_conv_graph(&mut g, x, f.n, f.t, spec, &vars)?;
    FeatureMap::new(f.n, f.t, g.value(y).clone())
}
