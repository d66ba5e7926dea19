//! Training losses: reconstruction, perceptual, style, adversarial and
//! expression losses, and their weighted total.
//!
//! Each loss has a graph form used by the trainer and a value form taking
//! plain tensors. Image batches are `[B, 3, H, W]` with `B` frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Conv2dCfg;
use crate::tensor::Tensor;

/// Expression classes scored by an [`ExpressionScorer`].
pub const EXPRESSION_CLASSES: [&str; 8] = [
    "surprise", "angry", "sad", "contempt", "disgust", "fear", "neutral", "happy",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_fer: f64,
    pub lambda_style: f64,
    pub lambda_vgg: f64,
    pub lambda_recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_fer: 2.0,
            lambda_style: 10.0,
            lambda_vgg: 1.0,
            lambda_recon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// `[adv, fer, style, vgg, recon]`.
    pub fn as_array(&self) -> [f64; 5] {
        [self.lambda_adv, self.lambda_fer, self.lambda_style, self.lambda_vgg, self.lambda_recon]
    }
}

/// Maps an image batch to intermediate feature tensors. Implementations
/// must be deterministic and are never trained.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn extract(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;
}

/// Maps an image batch `[B, 3, H, W]` to per-frame scores `[B, 8]`.
pub trait ExpressionScorer {
    fn name(&self) -> &str;
    fn score(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

/// Returns the input as the only stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn extract(&self, _g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ProjectionStage {
    w: Tensor,
    b: Tensor,
    conv: Conv2dCfg,
}

/// Two fixed random 3×3 convolution stages with leaky ReLU: 3→8 channels at
/// full resolution, then 8→16 at half resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjectionExtractor {
    seed: u64,
    stages: Vec<ProjectionStage>,
}

impl RandomProjectionExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stage = |cin: usize, cout: usize, stride: usize| ProjectionStage {
            w: Tensor::randn(&[cout, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt(), &mut rng),
            b: Tensor::randn(&[cout], 0.05, &mut rng),
            conv: Conv2dCfg::new(stride, 1, 1),
        };
        let stages = vec![stage(3, 8, 1), stage(8, 16, 2)];
        Self { seed, stages }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(weight, bias, stride)` of every stage, for independent re-evaluation.
    pub fn stage_weights(&self) -> Vec<(&Tensor, &Tensor, usize)> {
        self.stages.iter().map(|s| (&s.w, &s.b, s.conv.stride)).collect()
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn name(&self) -> &str {
        "random-projection"
    }

    fn extract(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let w = g.constant(s.w.clone());
            let b = g.constant(s.b.clone());
            let y = g.conv2d(h, w, Some(b), s.conv)?;
            h = g.leaky_relu(y, 0.2);
            out.push(h);
        }
        Ok(out)
    }
}

/// Averages each frame over a 4×4 grid of cells, projects the 48 cell
/// colours linearly to 8 logits and applies softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjectionScorer {
    seed: u64,
    /// `[8, 48]`.
    w: Tensor,
}

pub const SCORER_GRID: usize = 4;

impl RandomProjectionScorer {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3 * SCORER_GRID * SCORER_GRID;
        Self {
            seed,
            w: Tensor::randn(&[EXPRESSION_CLASSES.len(), d], 4.0 / (d as f64).sqrt(), &mut rng),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }
}

impl ExpressionScorer for RandomProjectionScorer {
    fn name(&self) -> &str {
        "random-projection"
    }

    fn score(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(SCORER_GRID) || !s[3].is_multiple_of(SCORER_GRID) {
            return Err(Error::Extractor(format!(
                "scorer needs [B, 3, H, W] with H and W divisible by {SCORER_GRID}, got {s:?}"
            )));
        }
        let b = s[0];
        let pooled = g.avg_pool(x, s[2] / SCORER_GRID, s[3] / SCORER_GRID)?;
        let d = 3 * SCORER_GRID * SCORER_GRID;
        let flat = g.reshape(pooled, &[1, b, d])?;
        let w = g.constant(self.w.clone().reshape(&[1, EXPRESSION_CLASSES.len(), d])?);
        let logits = g.matmul(flat, w, false, true)?;
        let logits = g.reshape(logits, &[b, EXPRESSION_CLASSES.len()])?;
        g.softmax(logits)
    }
}

/// Uniform scores for every frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantScorer;

impl ExpressionScorer for ConstantScorer {
    fn name(&self) -> &str {
        "constant"
    }

    fn score(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let k = EXPRESSION_CLASSES.len();
        Ok(g.constant(Tensor::full(&[b, k], 1.0 / k as f64)))
    }
}

fn same_shape(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn finite_scores(g: &Graph, v: Var, what: &str) -> Result<()> {
    if !g.value(v).all_finite() {
        return Err(Error::Numerical(format!("{what} scores are not finite")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn recon_loss_graph(g: &mut Graph, out: Var, gt: Var) -> Result<Var> {
    same_shape(g, out, gt)?;
    mean_abs_diff(g, out, gt)
}

/// Runs the extractor on both operands and pairs up the stages.
pub fn extract_pair(g: &mut Graph, fx: &dyn FeatureExtractor, out: Var, gt: Var) -> Result<Vec<(Var, Var)>> {
    same_shape(g, out, gt)?;
    let wrap = |e: Error| match e {
        Error::Extractor(m) => Error::Extractor(m),
        other => Error::Extractor(format!("{}: {other}", fx.name())),
    };
    let fo = fx.extract(g, out).map_err(wrap)?;
    let fg = fx.extract(g, gt).map_err(wrap)?;
    if fo.len() != fg.len() || fo.is_empty() {
        return Err(Error::Extractor(format!("{} returned mismatched stage lists", fx.name())));
    }
    Ok(fo.into_iter().zip(fg).collect())
}

/// Sum over stages of the mean absolute feature difference.
pub fn vgg_loss_graph(g: &mut Graph, fx: &dyn FeatureExtractor, out: Var, gt: Var) -> Result<Var> {
    let pairs = extract_pair(g, fx, out, gt)?;
    vgg_from_features(g, &pairs)
}

/// Perceptual term from already extracted `(output, ground truth)` stages.
pub fn vgg_from_features(g: &mut Graph, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        terms.push(mean_abs_diff(g, a, b)?);
    }
    sum_scalars(g, &terms)
}

/// Channel Gram matrices `[B, C, C]` of `[B, C, H, W]` features, divided by
/// `C·H·W`.
pub fn gram_graph(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("gram needs [B, C, H, W], got {s:?}")));
    }
    let flat = g.reshape(f, &[s[0], s[1], s[2] * s[3]])?;
    let gram = g.matmul(flat, flat, false, true)?;
    Ok(g.scale(gram, 1.0 / (s[1] * s[2] * s[3]) as f64))
}

/// Sum over stages of the mean absolute Gram difference.
pub fn style_loss_graph(g: &mut Graph, fx: &dyn FeatureExtractor, out: Var, gt: Var) -> Result<Var> {
    let pairs = extract_pair(g, fx, out, gt)?;
    style_from_features(g, &pairs)
}

/// Style term from already extracted `(output, ground truth)` stages.
pub fn style_from_features(g: &mut Graph, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let ga = gram_graph(g, a)?;
        let gb = gram_graph(g, b)?;
        terms.push(mean_abs_diff(g, ga, gb)?);
    }
    sum_scalars(g, &terms)
}

/// `mean(fake) − mean(real)`.
pub fn adv_loss_d_graph(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    finite_scores(g, real, "real")?;
    finite_scores(g, fake, "fake")?;
    let mf = g.mean(fake);
    let mr = g.mean(real);
    g.sub(mf, mr)
}

/// `−mean(fake)`.
pub fn adv_loss_g_graph(g: &mut Graph, fake: Var) -> Result<Var> {
    finite_scores(g, fake, "fake")?;
    let m = g.mean(fake);
    Ok(g.scale(m, -1.0))
}

/// Mean absolute difference between the expression scores of the ground
/// truth and the output, over frames and classes.
pub fn fer_loss_graph(g: &mut Graph, scorer: &dyn ExpressionScorer, gt: Var, out: Var) -> Result<Var> {
    same_shape(g, out, gt)?;
    let sg = scorer.score(g, gt)?;
    let so = scorer.score(g, out)?;
    let b = g.shape(gt)[0];
    for s in [sg, so] {
        if g.shape(s) != [b, EXPRESSION_CLASSES.len()] {
            return Err(Error::Contract(format!(
                "scorer {} returned {:?}, expected [{b}, {}]",
                scorer.name(),
                g.shape(s),
                EXPRESSION_CLASSES.len()
            )));
        }
    }
    mean_abs_diff(g, sg, so)
}

fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// The five loss components in weight order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv: f64,
    pub fer: f64,
    pub style: f64,
    pub vgg: f64,
    pub recon: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 5] {
        [self.adv, self.fer, self.style, self.vgg, self.recon]
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if c.as_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite loss component in {c:?}")));
    }
    Ok(c.as_array().iter().zip(w.as_array()).map(|(c, w)| c * w).sum())
}

/// Weighted sum on the tape; zero-weight terms are left out.
pub fn total_loss_graph(g: &mut Graph, terms: [Var; 5], w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (t, lambda) in terms.into_iter().zip(w.as_array()) {
        if lambda == 0.0 {
            continue;
        }
        if !g.value(t).all_finite() {
            return Err(Error::Numerical("non-finite loss component".into()));
        }
        let s = g.scale(t, lambda);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let r = f(&mut g, va, vb)?;
    Ok(g.value(r).item())
}

pub fn recon_loss(out: &Tensor, gt: &Tensor) -> Result<f64> {
    eval2(out, gt, recon_loss_graph)
}

pub fn vgg_loss(out: &Tensor, gt: &Tensor, fx: &dyn FeatureExtractor) -> Result<f64> {
    eval2(out, gt, |g, a, b| vgg_loss_graph(g, fx, a, b))
}

pub fn style_loss(out: &Tensor, gt: &Tensor, fx: &dyn FeatureExtractor) -> Result<f64> {
    eval2(out, gt, |g, a, b| style_loss_graph(g, fx, a, b))
}

pub fn adv_loss_d(real: &Tensor, fake: &Tensor) -> Result<f64> {
    eval2(real, fake, adv_loss_d_graph)
}

pub fn adv_loss_g(fake: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(fake.clone());
    let r = adv_loss_g_graph(&mut g, v)?;
    Ok(g.value(r).item())
}

pub fn fer_loss(gt: &Tensor, out: &Tensor, scorer: &dyn ExpressionScorer) -> Result<f64> {
    eval2(gt, out, |g, a, b| fer_loss_graph(g, scorer, a, b))
}

/// Scores of a frame batch as a `[B, 8]` tensor.
pub fn expression_scores(x: &Tensor, scorer: &dyn ExpressionScorer) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let s = scorer.score(&mut g, v)?;
    Ok(g.value(s).clone())
}

/// Feature stages of a frame batch.
pub fn extract_features(x: &Tensor, fx: &dyn FeatureExtractor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let fs = fx.extract(&mut g, v)?;
    Ok(fs.into_iter().map(|f| g.value(f).clone()).collect())
}

/// Feature extractor selected in a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorChoice {
    RandomProjection { seed: u64 },
    Identity,
}

impl Default for ExtractorChoice {
    fn default() -> Self {
        ExtractorChoice::RandomProjection { seed: 0 }
    }
}

impl ExtractorChoice {
    pub fn build(&self) -> Box<dyn FeatureExtractor + Send + Sync> {
        match *self {
            ExtractorChoice::RandomProjection { seed } => Box::new(RandomProjectionExtractor::new(seed)),
            ExtractorChoice::Identity => Box::new(IdentityExtractor),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ExtractorChoice::RandomProjection { seed } => format!("random-projection(seed {seed})"),
            ExtractorChoice::Identity => "identity".into(),
        }
    }
}

/// Expression scorer selected in a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerChoice {
    RandomProjection { seed: u64 },
    Constant,
}

impl Default for ScorerChoice {
    fn default() -> Self {
        ScorerChoice::RandomProjection { seed: 0 }
    }
}

impl ScorerChoice {
    pub fn build(&self) -> Box<dyn ExpressionScorer + Send + Sync> {
        match *self {
            ScorerChoice::RandomProjection { seed } => Box::new(RandomProjectionScorer::new(seed)),
            ScorerChoice::Constant => Box::new(ConstantScorer),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn rand_imgs(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 0.0, 1.0, &mut rng)
    }

    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let cout = w.dim(0);
        let (oh, ow) = ((h + 2 - 3) / stride + 1, (wd + 2 - 3) / stride + 1);
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for i in 0..n {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (y * stride + ky) as isize - 1;
                                    let ix = (xx * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * cin + c) * 3 + ky) * 3 + kx]
                                        * x.data()[((i * cin + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        let v = if acc > 0.0 { acc } else { 0.2 * acc };
                        out.data_mut()[((i * cout + o) * oh + y) * ow + xx] = v;
                    }
                }
            }
        }
        out
    }

    fn stage_oracle(fx: &RandomProjectionExtractor, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for (w, b, stride) in fx.stage_weights() {
            h = conv_oracle(&h, w, b, stride);
            out.push(h.clone());
        }
        out
    }

    fn gram_oracle(f: &Tensor) -> Vec<f64> {
        let (b, c, hw) = (f.dim(0), f.dim(1), f.dim(2) * f.dim(3));
        let mut out = vec![0.0; b * c * c];
        for n in 0..b {
            for i in 0..c {
                for j in 0..c {
                    let mut acc = 0.0;
                    for p in 0..hw {
                        acc += f.data()[(n * c + i) * hw + p] * f.data()[(n * c + j) * hw + p];
                    }
                    out[(n * c + i) * c + j] = acc / (c * hw) as f64;
                }
            }
        }
        out
    }

    fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn recon_cases() {
        let a = rand_imgs(1, &[2, 3, 4, 4]);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        let z = Tensor::zeros(&[2, 3, 4, 4]);
        let h = Tensor::full(&[2, 3, 4, 4], 0.5);
        assert_eq!(recon_loss(&h, &z).unwrap(), 0.5);
        let b = rand_imgs(2, &[2, 3, 4, 4]);
        assert!((recon_loss(&a, &b).unwrap() - mean_abs(a.data(), b.data())).abs() < 1e-7);
        assert!(matches!(recon_loss(&a, &Tensor::zeros(&[2, 3, 4, 5])), Err(Error::Shape(_))));
    }

    #[test]
    fn vgg_cases() {
        let a = rand_imgs(3, &[2, 3, 8, 8]);
        let b = rand_imgs(4, &[2, 3, 8, 8]);
        let fx = RandomProjectionExtractor::new(11);
        assert_eq!(vgg_loss(&a, &a, &fx).unwrap(), 0.0);
        assert_eq!(vgg_loss(&a, &b, &IdentityExtractor).unwrap(), recon_loss(&a, &b).unwrap());
        let (fa, fb) = (stage_oracle(&fx, &a), stage_oracle(&fx, &b));
        let expect: f64 = fa.iter().zip(&fb).map(|(x, y)| mean_abs(x.data(), y.data())).sum();
        assert!((vgg_loss(&a, &b, &fx).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn style_cases() {
        let a = rand_imgs(5, &[2, 3, 8, 8]);
        let b = rand_imgs(6, &[2, 3, 8, 8]);
        let fx = RandomProjectionExtractor::new(12);
        assert_eq!(style_loss(&a, &a, &fx).unwrap(), 0.0);
        let (fa, fb) = (stage_oracle(&fx, &a), stage_oracle(&fx, &b));
        let expect: f64 = fa.iter().zip(&fb).map(|(x, y)| mean_abs(&gram_oracle(x), &gram_oracle(y))).sum();
        assert!((style_loss(&a, &b, &fx).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn gram_orthogonal_vs_copied_channels() {
        // Channel 0 lights the left half, channel 1 the right half: an
        // orthogonal pair. The copy has both channels equal to channel 0.
        let mut orth = Tensor::zeros(&[1, 2, 2, 2]);
        let mut copy = Tensor::zeros(&[1, 2, 2, 2]);
        for y in 0..2 {
            orth.data_mut()[y * 2] = 1.0;
            orth.data_mut()[4 + y * 2 + 1] = 1.0;
            copy.data_mut()[y * 2] = 1.0;
            copy.data_mut()[4 + y * 2] = 1.0;
        }
        let gram = |f: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(f.clone());
            let r = gram_graph(&mut g, v).unwrap();
            g.value(r).data().to_vec()
        };
        assert_eq!(gram(&orth), gram_oracle(&orth));
        assert_eq!(gram(&copy), gram_oracle(&copy));
        assert_eq!(gram(&orth), vec![0.25, 0.0, 0.0, 0.25]);
        assert_eq!(gram(&copy), vec![0.25; 4]);
        let loss = eval2(&orth, &copy, |g, a, b| style_loss_graph(g, &IdentityExtractor, a, b)).unwrap();
        assert!((loss - 0.125).abs() < 1e-15);
    }

    #[test]
    fn gram_scales_quadratically() {
        let f = rand_imgs(7, &[1, 3, 4, 4]);
        let c = 1.7;
        let g1 = gram_oracle(&f);
        let mut g = Graph::new();
        let v = g.constant(f.map(|x| c * x));
        let r = gram_graph(&mut g, v).unwrap();
        for (a, b) in g.value(r).data().iter().zip(&g1) {
            assert!((a - c * c * b).abs() < 1e-12);
        }
    }

    #[test]
    fn adversarial_cases() {
        let ones = Tensor::full(&[2, 1, 4, 4], 1.0);
        let neg = Tensor::full(&[2, 1, 4, 4], -1.0);
        assert_eq!(adv_loss_d(&ones, &ones).unwrap(), 0.0);
        assert_eq!(adv_loss_d(&ones, &neg).unwrap(), -2.0);
        assert_eq!(adv_loss_g(&Tensor::zeros(&[1, 1, 2, 2])).unwrap(), 0.0);
        assert_eq!(adv_loss_g(&Tensor::full(&[1, 1, 2, 2], 3.0)).unwrap(), -3.0);
        let r = rand_imgs(8, &[3, 1, 4, 4]).map(|v| 4.0 * v - 2.0);
        let f = rand_imgs(9, &[3, 1, 4, 4]).map(|v| 4.0 * v - 2.0);
        let expect = f.mean() - r.mean();
        assert!((adv_loss_d(&r, &f).unwrap() - expect).abs() < 1e-7);
        assert!((adv_loss_g(&f).unwrap() + f.mean()).abs() < 1e-7);
        let bad = Tensor::full(&[1], f64::NAN);
        assert!(matches!(adv_loss_g(&bad), Err(Error::Numerical(_))));
    }

    #[test]
    fn adversarial_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let r = Tensor::randn(&[2, 1, 3, 3], 2.0, &mut rng);
            let f = Tensor::randn(&[2, 1, 3, 3], 2.0, &mut rng);
            let a = adv_loss_d(&r, &f).unwrap();
            let b = adv_loss_d(&f, &r).unwrap();
            assert_eq!(a, -b);
        }
    }

    fn score_oracle(s: &RandomProjectionScorer, x: &Tensor) -> Vec<f64> {
        let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (ch, cw) = (h / 4, w / 4);
        let mut out = Vec::new();
        for n in 0..b {
            let mut feat = vec![0.0; 48];
            for c in 0..3 {
                for gy in 0..4 {
                    for gx in 0..4 {
                        let mut acc = 0.0;
                        for y in gy * ch..(gy + 1) * ch {
                            for xx in gx * cw..(gx + 1) * cw {
                                acc += x.data()[((n * 3 + c) * h + y) * w + xx];
                            }
                        }
                        feat[(c * 4 + gy) * 4 + gx] = acc / (ch * cw) as f64;
                    }
                }
            }
            let logits: Vec<f64> = (0..8)
                .map(|k| (0..48).map(|d| s.weights().data()[k * 48 + d] * feat[d]).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / z));
        }
        out
    }

    #[test]
    fn fer_cases() {
        let a = rand_imgs(11, &[3, 3, 8, 8]);
        let b = rand_imgs(12, &[3, 3, 8, 8]);
        let s = RandomProjectionScorer::new(5);
        assert_eq!(fer_loss(&a, &a, &s).unwrap(), 0.0);
        assert_eq!(fer_loss(&a, &b, &ConstantScorer).unwrap(), 0.0);
        let expect = mean_abs(&score_oracle(&s, &a), &score_oracle(&s, &b));
        let got = fer_loss(&a, &b, &s).unwrap();
        assert!((got - expect).abs() < 1e-6);
        assert!(got > 0.0);
    }

    struct WrongScorer;
    impl ExpressionScorer for WrongScorer {
        fn name(&self) -> &str {
            "wrong"
        }
        fn score(&self, g: &mut Graph, x: Var) -> Result<Var> {
            let b = g.shape(x)[0];
            Ok(g.constant(Tensor::zeros(&[b, 7])))
        }
    }

    #[test]
    fn fer_rejects_wrong_dimension() {
        let a = rand_imgs(13, &[1, 3, 4, 4]);
        assert!(matches!(fer_loss(&a, &a, &WrongScorer), Err(Error::Contract(_))));
    }

    #[test]
    fn total_cases() {
        let w = LossWeights::default();
        let ones = LossComponents {
            adv: 1.0,
            fer: 1.0,
            style: 1.0,
            vgg: 1.0,
            recon: 1.0,
        };
        assert_eq!(total_loss(&ones, &w).unwrap(), 15.0);
        let zero = LossComponents {
            adv: 0.0,
            fer: 0.0,
            style: 0.0,
            vgg: 0.0,
            recon: 0.0,
        };
        assert_eq!(total_loss(&zero, &w).unwrap(), 0.0);
        let bad = LossComponents { adv: f64::INFINITY, ..zero };
        assert!(total_loss(&bad, &w).is_err());
        assert!(LossWeights { lambda_fer: -1.0, ..w }.validate().is_err());
    }

    proptest! {
        #[test]
        fn total_matches_dot_product(c in prop::array::uniform5(-10.0f64..10.0), l in prop::array::uniform5(0.0f64..20.0)) {
            let comps = LossComponents { adv: c[0], fer: c[1], style: c[2], vgg: c[3], recon: c[4] };
            let w = LossWeights { lambda_adv: l[0], lambda_fer: l[1], lambda_style: l[2], lambda_vgg: l[3], lambda_recon: l[4] };
            let dot: f64 = c.iter().zip(&l).map(|(a, b)| a * b).sum();
            prop_assert!((total_loss(&comps, &w).unwrap() - dot).abs() < 1e-9);
            // The tape version agrees.
            let mut g = Graph::new();
            let vars = c.map(|v| g.constant(Tensor::scalar(v)));
            let t = total_loss_graph(&mut g, vars, &w).unwrap();
            prop_assert!((g.value(t).item() - dot).abs() < 1e-9);
        }

        #[test]
        fn losses_nonnegative(seed in 0u64..1000) {
            let a = rand_imgs(seed, &[1, 3, 8, 8]);
            let b = rand_imgs(seed + 1, &[1, 3, 8, 8]);
            let fx = RandomProjectionExtractor::new(1);
            prop_assert!(recon_loss(&a, &b).unwrap() >= 0.0);
            prop_assert!(vgg_loss(&a, &b, &fx).unwrap() >= 0.0);
            prop_assert!(style_loss(&a, &b, &fx).unwrap() >= 0.0);
            prop_assert!(fer_loss(&a, &b, &RandomProjectionScorer::new(1)).unwrap() >= 0.0);
        }
    }

    #[test]
    fn loss_gradients() {
        let a = rand_imgs(14, &[1, 3, 4, 4]);
        let b = rand_imgs(15, &[1, 3, 4, 4]);
        let fx = RandomProjectionExtractor::new(2);
        let sc = RandomProjectionScorer::new(3);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Var, Var) -> Result<Var>>)> = vec![
            ("recon", Box::new(recon_loss_graph)),
            ("vgg", Box::new(|g: &mut Graph, x, y| vgg_loss_graph(g, &fx, x, y))),
            ("style", Box::new(|g: &mut Graph, x, y| style_loss_graph(g, &fx, x, y))),
            ("fer", Box::new(|g: &mut Graph, x, y| fer_loss_graph(g, &sc, y, x))),
        ];
        for (name, f) in cases {
            let r = check_gradients(&[a.clone()], 1e-6, |g, v| {
                let gt = g.constant(b.clone());
                f(g, v[0], gt)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-3, "{name}: {r:?}");
        }
        let r = check_gradients(&[a.clone(), b.clone()], 1e-6, |g, v| {
            let d = adv_loss_d_graph(g, v[0], v[1])?;
            let gl = adv_loss_g_graph(g, v[1])?;
            g.add(d, gl)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
