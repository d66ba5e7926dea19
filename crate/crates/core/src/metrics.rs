//! Evaluation metrics (MSE, PSNR, SSIM, LPIPS, FID) and report rendering.
//!
//! Image batches are `[B, C, H, W]`. FID is computed over frame sets using
//! globally pooled features of the extractor's last stage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{extract_features, FeatureExtractor};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    a.expect_same_shape(b)?;
    if a.ndim() != 4 {
        return Err(Error::Shape(format!("metrics need [B, C, H, W] batches, got {:?}", a.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.numel() == 0 {
        return Err(Error::InvalidInput("mse of empty tensors".into()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64)
}

/// `10·log10(peak² / mse)`, or `+∞` for identical inputs.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::InvalidInput(format!("psnr peak {peak} must be positive")));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11-tap Gaussian window (σ = 1.5) over valid
/// window positions of every channel of every frame.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    let (n, c, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n * c {
        let x = &a.data()[p * plane..(p + 1) * plane];
        let y = &b.data()[p * plane..(p + 1) * plane];
        let prod = |f: &dyn Fn(usize) -> f64| (0..plane).map(f).collect::<Vec<f64>>();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
        let syy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
        let sxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += (2.0 * ux * uy + c1) * (2.0 * cov + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-stage channel weights; `None` weighs every channel 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LpipsWeights(pub Option<Vec<Vec<f64>>>);

/// Perceptual distance: features are unit-normalized over channels at each
/// position, squared differences are weighted per channel, summed over
/// channels, averaged over positions and frames, and summed over stages.
pub fn lpips(a: &Tensor, b: &Tensor, fx: &dyn FeatureExtractor, weights: &LpipsWeights) -> Result<f64> {
    check_pair(a, b)?;
    let fa = extract_features(a, fx)?;
    let fb = extract_features(b, fx)?;
    if fa.len() != fb.len() {
        return Err(Error::Extractor(format!("{} returned mismatched stage lists", fx.name())));
    }
    let mut total = 0.0;
    for (s, (x, y)) in fa.iter().zip(&fb).enumerate() {
        let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let lin = match &weights.0 {
            Some(ws) => {
                let w = ws
                    .get(s)
                    .filter(|w| w.len() == c)
                    .ok_or_else(|| Error::Config(format!("lpips weights do not match stage {s} with {c} channels")))?;
                w.clone()
            }
            None => vec![1.0; c],
        };
        let mut acc = 0.0;
        for i in 0..n {
            for p in 0..hw {
                let at = |t: &Tensor, ch: usize| t.data()[(i * c + ch) * hw + p];
                let nx = (0..c).map(|ch| at(x, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let ny = (0..c).map(|ch| at(y, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                acc += (0..c).map(|ch| lin[ch] * (at(x, ch) / nx - at(y, ch) / ny).powi(2)).sum::<f64>();
            }
        }
        total += acc / (n * hw) as f64;
    }
    Ok(total)
}

/// Globally pooled last-stage features, one row per frame.
pub fn pooled_features(x: &Tensor, fx: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    let stages = extract_features(x, fx)?;
    let last = stages
        .last()
        .ok_or_else(|| Error::Extractor(format!("{} returned no stages", fx.name())))?;
    let (n, c, hw) = (last.dim(0), last.dim(1), last.dim(2) * last.dim(3));
    Ok((0..n)
        .map(|i| {
            (0..c)
                .map(|ch| last.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect()
        })
        .collect())
}

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mut mu = vec![0.0; d];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1) as f64;
            }
        }
    }
    (mu, cov)
}

/// Square root of a symmetric positive semi-definite matrix, with negative
/// eigenvalues clamped to 0.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `tr((Σa Σb)^½)`, via the eigenvalues of `Σa^½ Σb Σa^½`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrtm_psd(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, Vec::len);
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::Shape("fid feature rows must be non-empty and equally long".into()));
    }
    for (name, set) in [("first", a), ("second", b)] {
        if set.len() < d + 1 {
            return Err(Error::InsufficientSamples(format!(
                "fid needs at least {} frames per set for {d}-dimensional features; the {name} set has {}",
                d + 1,
                set.len()
            )));
        }
    }
    let (mu_a, sa) = mean_cov(a);
    let (mu_b, sb) = mean_cov(b);
    let dmu: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    let v = dmu + sa.trace() + sb.trace() - 2.0 * trace_sqrt_product(&sa, &sb);
    if !v.is_finite() {
        return Err(Error::Numerical("fid is not finite".into()));
    }
    Ok(v.max(0.0))
}

pub fn fid(a: &Tensor, b: &Tensor, fx: &dyn FeatureExtractor) -> Result<f64> {
    fid_from_features(&pooled_features(a, fx)?, &pooled_features(b, fx)?)
}

/// Which pixels are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    #[default]
    Full,
    /// MSE/PSNR over occluded pixels only; window and feature metrics on
    /// the bounding box of the occluded pixels.
    Masked,
}

/// Bounding box `(y0, y1, x0, x1)` (exclusive ends) of the nonzero pixels
/// of a `[B, 1, H, W]` mask.
pub fn mask_bbox(mask: &Tensor) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (mask.dim(2), mask.dim(3));
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0.0 {
            let (y, x) = ((i / w) % h, i % w);
            bb = Some(match bb {
                None => (y, y + 1, x, x + 1),
                Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1)),
            });
        }
    }
    bb
}

pub fn crop(t: &Tensor, (y0, y1, x0, x1): (usize, usize, usize, usize)) -> Tensor {
    let (b, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    let (oh, ow) = (y1 - y0, x1 - x0);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        for y in y0..y1 {
            out.extend_from_slice(&t.data()[p * h * w + y * w + x0..p * h * w + y * w + x1]);
        }
    }
    Tensor::new(&[b, c, oh, ow], out).expect("crop layout")
}

/// MSE over the pixels where the `[B, 1, H, W]` mask is 1.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (n, c, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!("mask {:?} does not match images {:?}", mask.shape(), a.shape())));
    }
    let plane = h * w;
    let (mut acc, mut count) = (0.0, 0usize);
    for i in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                if mask.data()[i * plane + p] == 1.0 {
                    let k = (i * c + ch) * plane + p;
                    acc += (a.data()[k] - b.data()[k]).powi(2);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("mask selects no pixels".into()));
    }
    Ok(acc / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mse: f64,
    /// `None` when the prediction is exact (infinite PSNR).
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub lpips: f64,
    /// `None` when too few frames were available.
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub frames: usize,
    pub values: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub label: String,
    pub clips: Vec<ClipMetrics>,
    pub aggregate: Option<MetricValues>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub extractor: String,
    pub region: Region,
    pub mask: String,
    pub models: Vec<ModelReport>,
}

/// Settings shared by every metric in an evaluation.
pub struct EvalSettings<'a> {
    pub peak: f64,
    pub region: Region,
    pub extractor: &'a dyn FeatureExtractor,
    pub lpips_weights: LpipsWeights,
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn region_views(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: Region) -> Result<(Tensor, Tensor)> {
    match region {
        Region::Full => Ok((pred.clone(), gt.clone())),
        Region::Masked => {
            let bb = mask_bbox(mask).ok_or_else(|| Error::InvalidInput("mask selects no pixels".into()))?;
            Ok((crop(pred, bb), crop(gt, bb)))
        }
    }
}

/// Scores one clip; `mask` is `[T, 1, H, W]`.
pub fn evaluate_clip(name: &str, pred: &Tensor, gt: &Tensor, mask: &Tensor, s: &EvalSettings) -> Result<ClipMetrics> {
    check_pair(pred, gt)?;
    let m = match s.region {
        Region::Full => mse(pred, gt)?,
        Region::Masked => masked_mse(pred, gt, mask)?,
    };
    let (p, g) = region_views(pred, gt, mask, s.region)?;
    let fid = match fid(&p, &g, s.extractor) {
        Ok(v) => Some(v),
        Err(Error::InsufficientSamples(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ClipMetrics {
        clip: name.to_string(),
        frames: pred.dim(0),
        values: MetricValues {
            mse: m,
            psnr: finite_or_none(psnr_from_mse(m, s.peak)),
            ssim: ssim(&p, &g, s.peak)?,
            lpips: lpips(&p, &g, s.extractor, &s.lpips_weights)?,
            fid,
        },
    })
}

/// Per-clip rows plus the aggregate: clip means for MSE/PSNR/SSIM/LPIPS and
/// FID over the pooled frames of all clips.
pub fn evaluate_model(label: &str, clips: &[(String, Tensor, Tensor, Tensor)], s: &EvalSettings) -> Result<ModelReport> {
    let rows: Vec<ClipMetrics> = clips
        .iter()
        .map(|(name, p, g, m)| evaluate_clip(name, p, g, m, s))
        .collect::<Result<_>>()?;
    let aggregate = if rows.is_empty() {
        None
    } else {
        let k = rows.len() as f64;
        let mean = |f: &dyn Fn(&MetricValues) -> f64| rows.iter().map(|r| f(&r.values)).sum::<f64>() / k;
        let psnr = if rows.iter().all(|r| r.values.psnr.is_some()) {
            Some(mean(&|v| v.psnr.unwrap_or_default()))
        } else {
            None
        };
        let mut pa = Vec::new();
        let mut ga = Vec::new();
        for (_, p, g, m) in clips {
            let (p, g) = region_views(p, g, m, s.region)?;
            pa.extend(pooled_features(&p, s.extractor)?);
            ga.extend(pooled_features(&g, s.extractor)?);
        }
        let fid = match fid_from_features(&pa, &ga) {
            Ok(v) => Some(v),
            Err(Error::InsufficientSamples(_)) => None,
            Err(e) => return Err(e),
        };
        Some(MetricValues {
            mse: mean(&|v| v.mse),
            psnr,
            ssim: mean(&|v| v.ssim),
            lpips: mean(&|v| v.lpips),
            fid,
        })
    };
    Ok(ModelReport {
        label: label.to_string(),
        clips: rows,
        aggregate,
    })
}

const HEADERS: [&str; 5] = ["MSE↓", "PSNR↑", "SSIM↑", "LPIPS↓", "FID↓"];

fn cells(v: &MetricValues) -> [String; 5] {
    let opt = |o: Option<f64>, prec: usize, none: &str| o.map_or_else(|| none.to_string(), |x| format!("{x:.prec$}"));
    [
        format!("{:.4}", v.mse),
        opt(v.psnr, 2, "inf"),
        format!("{:.4}", v.ssim),
        format!("{:.4}", v.lpips),
        opt(v.fid, 4, "n/a"),
    ]
}

/// Fixed-width table: one aggregate row per model, optionally followed by
/// per-clip rows.
pub fn render_report(r: &MetricsReport, per_clip: bool) -> String {
    let mut labels: Vec<String> = Vec::new();
    let mut rows: Vec<[String; 5]> = Vec::new();
    for m in &r.models {
        if let Some(a) = &m.aggregate {
            labels.push(m.label.clone());
            rows.push(cells(a));
        }
        if per_clip {
            for c in &m.clips {
                labels.push(format!("  {}", c.clip));
                rows.push(cells(&c.values));
            }
        }
    }
    let lw = labels.iter().map(|l| l.chars().count()).max().unwrap_or(0).max("Model".len()) + 2;
    let cw = 10;
    let mut out = String::new();
    let _ = writeln!(out, "extractor: {}  region: {}  mask: {}", r.extractor, region_name(r.region), r.mask);
    let _ = write!(out, "{:<lw$}", "Model");
    for h in HEADERS {
        let _ = write!(out, "{:>w$}", h, w = cw);
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(&rows) {
        let _ = write!(out, "{l:<lw$}");
        for c in row {
            let _ = write!(out, "{c:>cw$}");
        }
        out.push('\n');
    }
    out
}

fn region_name(r: Region) -> &'static str {
    match r {
        Region::Full => "full",
        Region::Masked => "masked",
    }
}

pub fn report_json(r: &MetricsReport) -> Result<String> {
    serde_json::to_string_pretty(r).map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))
}

/// One bar chart PNG per metric (aggregate rows), written to `dir`.
pub fn render_bar_plots(r: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let aggs: Vec<&MetricValues> = r.models.iter().filter_map(|m| m.aggregate.as_ref()).collect();
    if aggs.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = ["mse", "psnr", "ssim", "lpips", "fid"];
    let mut written = Vec::new();
    for (mi, name) in names.iter().enumerate() {
        let vals: Vec<f64> = aggs
            .iter()
            .map(|v| match mi {
                0 => v.mse,
                1 => v.psnr.unwrap_or(0.0),
                2 => v.ssim,
                3 => v.lpips,
                _ => v.fid.unwrap_or(0.0),
            })
            .collect();
        let top = vals.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let (bar, gap, height) = (24u32, 8u32, 120u32);
        let width = gap + vals.len() as u32 * (bar + gap);
        let img = image::RgbImage::from_fn(width, height, |x, y| {
            let slot = x.saturating_sub(gap) / (bar + gap);
            let within = x >= gap && (x - gap) % (bar + gap) < bar && (slot as usize) < vals.len();
            if within {
                let frac = if top > 0.0 { vals[slot as usize].abs() / top } else { 0.0 };
                let filled = (frac * (height - 10) as f64).round() as u32;
                if height - 1 - y < filled {
                    return image::Rgb([60, 110, 180]);
                }
            }
            image::Rgb([255, 255, 255])
        });
        let path = dir.join(format!("{name}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{IdentityExtractor, RandomProjectionExtractor};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_imgs(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 0.0, 1.0, &mut rng)
    }

    #[test]
    fn mse_and_psnr() {
        let a = rand_imgs(1, &[2, 3, 5, 5]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        let c = rand_imgs(2, &[2, 3, 5, 5]);
        let expect = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
        assert!((mse(&a, &c).unwrap() - expect).abs() < 1e-9);
        assert_eq!(mse(&a, &c).unwrap(), mse(&c, &a).unwrap());

        let lo = Tensor::full(&[1, 3, 4, 4], 100.0);
        let hi = Tensor::full(&[1, 3, 4, 4], 116.0);
        // 10·log10(255² / 256), evaluated independently.
        let closed = 20.0 * 255f64.log10() - 10.0 * 256f64.log10();
        let p = psnr(&lo, &hi, 255.0).unwrap();
        assert!((p - closed).abs() < 1e-12);
        assert!((p - 24.0484).abs() < 1e-4);
        assert!(psnr(&lo, &hi, 0.0).is_err());
    }

    fn ssim_oracle(a: &Tensor, b: &Tensor, peak: f64) -> f64 {
        let (n, c, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
        let g1 = gaussian_window(11, 1.5);
        let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
        let (mut total, mut count) = (0.0, 0);
        for p in 0..n * c {
            let at = |t: &Tensor, y: usize, x: usize| t.data()[p * h * w + y * w + x];
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = g1[i] * g1[j];
                            let (va, vb) = (at(a, y0 + i, x0 + j), at(b, y0 + i, x0 + j));
                            ux += k * va;
                            uy += k * vb;
                            xx += k * va * va;
                            yy += k * vb * vb;
                            xy += k * va * vb;
                        }
                    }
                    let (vx, vy, cv) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
                    total += (2.0 * ux * uy + c1) * (2.0 * cv + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_cases() {
        let a = rand_imgs(3, &[1, 2, 16, 14]);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);

        let board = Tensor::from_fn(&[1, 1, 16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
        let inv = board.map(|v| 1.0 - v);
        let got = ssim(&board, &inv, 1.0).unwrap();
        assert!((got - ssim_oracle(&board, &inv, 1.0)).abs() < 1e-10);

        let (k1, k2) = (0.3, 0.7);
        let x = Tensor::full(&[1, 1, 12, 12], k1);
        let y = Tensor::full(&[1, 1, 12, 12], k2);
        let (c1, c2) = (1e-4, 9e-4);
        let closed = (2.0 * k1 * k2 + c1) * (2.0 * 0.0 + c2) / ((k1 * k1 + k2 * k2 + c1) * (0.0 + 0.0 + c2));
        assert!((ssim(&x, &y, 1.0).unwrap() - closed).abs() < 1e-9);

        let b = rand_imgs(4, &[1, 2, 16, 14]);
        let v = ssim(&a, &b, 1.0).unwrap();
        assert!((-1.0..=1.0).contains(&v));
        assert!((v - ssim_oracle(&a, &b, 1.0)).abs() < 1e-10);
        assert!(ssim(&Tensor::zeros(&[1, 1, 10, 20]), &Tensor::zeros(&[1, 1, 10, 20]), 1.0).is_err());
    }

    fn lpips_oracle(a: &Tensor, b: &Tensor, fx: &RandomProjectionExtractor) -> f64 {
        let fa = extract_features(a, fx).unwrap();
        let fb = extract_features(b, fx).unwrap();
        let mut total = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
            let mut s = 0.0;
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let vx: Vec<f64> = (0..c).map(|ch| x.data()[((i * c + ch) * h + yy) * w + xx]).collect();
                        let vy: Vec<f64> = (0..c).map(|ch| y.data()[((i * c + ch) * h + yy) * w + xx]).collect();
                        let nx = vx.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                        let ny = vy.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                        s += vx.iter().zip(&vy).map(|(p, q)| (p / nx - q / ny).powi(2)).sum::<f64>();
                    }
                }
            }
            total += s / (n * h * w) as f64;
        }
        total
    }

    #[test]
    fn lpips_cases() {
        let fx = RandomProjectionExtractor::new(3);
        let a = rand_imgs(5, &[2, 3, 8, 8]);
        let b = rand_imgs(6, &[2, 3, 8, 8]);
        let w = LpipsWeights::default();
        assert_eq!(lpips(&a, &a, &fx, &w).unwrap(), 0.0);
        assert!((lpips(&a, &b, &fx, &w).unwrap() - lpips_oracle(&a, &b, &fx)).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = rand_imgs(7, &[4, 3, 16, 16]);
        let noise = Tensor::randn(&[4, 3, 16, 16], 1.0, &mut rng);
        let scores: Vec<f64> = [0.05, 0.1, 0.2]
            .iter()
            .map(|s| {
                let noisy = base.zip_map(&noise, |x, n| x + s * n).unwrap();
                lpips(&base, &noisy, &fx, &w).unwrap()
            })
            .collect();
        assert!(scores.windows(2).all(|p| p[0] <= p[1]), "{scores:?}");
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| Tensor::randn(&[1], 1.0, rng).item());
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    // Denman–Beavers iteration: an eigendecomposition-free square root.
    fn sqrtm_db(m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = m.clone();
        let mut z = DMatrix::identity(m.nrows(), m.ncols());
        for _ in 0..60 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            y = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
        }
        y
    }

    #[test]
    fn matrix_sqrt_against_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [1, 3, 6] {
            let a = random_spd(d, &mut rng);
            let b = random_spd(d, &mut rng);
            let r = sqrtm_psd(&a);
            assert!((&r * &r - &a).abs().max() < 1e-9);
            assert!((&r - sqrtm_db(&a)).abs().max() < 1e-8);
            // tr((AB)^½) = tr((A^½ B A^½)^½), the latter via Denman–Beavers.
            let ra = sqrtm_db(&a);
            let expect = sqrtm_db(&(&ra * &b * &ra)).trace();
            assert!((trace_sqrt_product(&a, &b) - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn fid_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s: Vec<Vec<f64>> = (0..40).map(|_| Tensor::randn(&[4], 1.0, &mut rng).into_data()).collect();
        assert!(fid_from_features(&s, &s).unwrap() <= 1e-3);

        // Standardize a 1-D sample exactly so its mean is 0 and unbiased
        // variance is 1; shifting by m then gives FID = m².
        let raw: Vec<f64> = Tensor::randn(&[50], 1.0, &mut rng).into_data();
        let v = DVector::from_vec(raw);
        let mu = v.mean();
        let sd = ((v.map(|x| (x - mu).powi(2)).sum()) / 49.0).sqrt();
        let z: Vec<Vec<f64>> = v.iter().map(|x| vec![(x - mu) / sd]).collect();
        for m in [0.5, 1.0, 2.0] {
            let shifted: Vec<Vec<f64>> = z.iter().map(|r| vec![r[0] + m]).collect();
            assert!((fid_from_features(&z, &shifted).unwrap() - m * m).abs() < 1e-4);
        }

        let few: Vec<Vec<f64>> = s[..4].to_vec();
        let err = fid_from_features(&few, &s).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples(_)));
        assert!(err.to_string().contains("at least 5"), "{err}");

        let imgs = rand_imgs(11, &[20, 3, 8, 8]);
        assert!(fid(&imgs, &imgs, &RandomProjectionExtractor::new(0)).unwrap() <= 1e-3);
    }

    #[test]
    fn masked_region_matches_precropped() {
        let a = rand_imgs(12, &[3, 3, 20, 24]);
        let b = rand_imgs(13, &[3, 3, 20, 24]);
        let mut mask = Tensor::zeros(&[3, 1, 20, 24]);
        for t in 0..3 {
            for y in 4..17 {
                for x in 5..19 {
                    mask.data_mut()[(t * 20 + y) * 24 + x] = 1.0;
                }
            }
        }
        let bb = mask_bbox(&mask).unwrap();
        assert_eq!(bb, (4, 17, 5, 19));
        let (ca, cb) = (crop(&a, bb), crop(&b, bb));
        assert!((masked_mse(&a, &b, &mask).unwrap() - mse(&ca, &cb).unwrap()).abs() < 1e-12);

        let fx = IdentityExtractor;
        let settings = |region| EvalSettings {
            peak: 1.0,
            region,
            extractor: &fx,
            lpips_weights: LpipsWeights::default(),
        };
        let m1 = evaluate_clip("c", &a, &b, &mask, &settings(Region::Masked)).unwrap();
        let ones = Tensor::full(&[3, 1, 13, 14], 1.0);
        let m2 = evaluate_clip("c", &ca, &cb, &ones, &settings(Region::Full)).unwrap();
        assert!((m1.values.mse - m2.values.mse).abs() < 1e-12);
        assert!((m1.values.ssim - m2.values.ssim).abs() < 1e-12);
        assert!((m1.values.lpips - m2.values.lpips).abs() < 1e-12);
    }

    fn fixture_values() -> MetricValues {
        MetricValues {
            mse: 0.003,
            psnr: Some(25.83),
            ssim: 0.8986,
            lpips: 0.0508,
            fid: Some(0.7675),
        }
    }

    #[test]
    fn report_layout() {
        let empty = MetricsReport {
            extractor: "identity".into(),
            region: Region::Full,
            mask: "hmd".into(),
            models: vec![],
        };
        let text = render_report(&empty, false);
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("MSE↓") && text.contains("PSNR↑") && text.contains("FID↓"));

        let fx = RandomProjectionExtractor::new(0);
        let s = EvalSettings {
            peak: 1.0,
            region: Region::Full,
            extractor: &fx,
            lpips_weights: LpipsWeights::default(),
        };
        let p = rand_imgs(14, &[20, 3, 12, 12]);
        let g = rand_imgs(15, &[20, 3, 12, 12]);
        let m = Tensor::zeros(&[20, 1, 12, 12]);
        let r = evaluate_model("full", &[("clip".into(), p, g, m)], &s).unwrap();
        assert_eq!(r.aggregate.unwrap(), r.clips[0].values);

        let report = MetricsReport {
            models: vec![ModelReport {
                label: "full".into(),
                clips: vec![],
                aggregate: Some(fixture_values()),
            }],
            ..empty
        };
        let text = render_report(&report, false);
        assert!(text.lines().nth(2).unwrap().contains("25.83"));
        let parsed: MetricsReport = serde_json::from_str(&report_json(&report).unwrap()).unwrap();
        assert_eq!(parsed, report);
    }
}
