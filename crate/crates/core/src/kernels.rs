//! Forward and backward kernels for the dense layers used by the networks.
//!
//! Everything here works on raw row-major buffers and is single-threaded, so
//! results are bit-reproducible across runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` for row-major matrices, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dCfg {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cfg: Conv2dCfg,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.cols();
    let pad = g.cfg.padding as isize;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let dy = (ky * g.cfg.dilation) as isize - pad;
                let dx = (kx * g.cfg.dilation) as isize - pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.cfg.stride) as isize + dy;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.cfg.stride) as isize + dx;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx_out: &mut [f64]) {
    let p = g.cols();
    let pad = g.cfg.padding as isize;
    for c in 0..g.c {
        let plane = &mut dx_out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let dy = (ky * g.cfg.dilation) as isize - pad;
                let dx = (kx * g.cfg.dilation) as isize - pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.cfg.stride) as isize + dy;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.cfg.stride) as isize + dx;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, cfg: Conv2dCfg) -> Result<(usize, usize, ConvGeom)> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects 4-D input and weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, wc, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if c != wc {
        return Err(Error::Config(format!(
            "conv2d weight expects {wc} input channels, feature map has {c}"
        )));
    }
    let (ho, wo) = match (cfg.out_size(h, kh), cfg.out_size(wd, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Shape(format!(
                "input {h}x{wd} too small for kernel {kh}x{kw} with {cfg:?}"
            )))
        }
    };
    Ok((
        b,
        o,
        ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            cfg,
        },
    ))
}

/// 2-D cross-correlation of `x: [B, C, H, W]` with `w: [O, C, KH, KW]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: Conv2dCfg) -> Result<Tensor> {
    let (b, o, g) = conv_geom(x, w, cfg)?;
    if let Some(bias) = bias {
        if bias.numel() != o {
            return Err(Error::Config(format!(
                "conv2d bias has {} entries for {o} output channels",
                bias.numel()
            )));
        }
    }
    let (rows, p) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[b, o, g.ho, g.wo]);
    let mut col = vec![0.0; rows * p];
    let out_data = out.data_mut();
    for bi in 0..b {
        im2col(&x.data()[bi * in_sz..(bi + 1) * in_sz], &g, &mut col);
        let dst = &mut out_data[bi * o * p..(bi + 1) * o * p];
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[oc]);
            }
        }
        gemm(o, rows, p, w.data(), false, &col, false, dst, 1.0);
    }
    Ok(out)
}

pub struct Conv2dGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    cfg: Conv2dCfg,
    gout: &Tensor,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<Conv2dGrads> {
    let (b, o, g) = conv_geom(x, w, cfg)?;
    let (rows, p) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[o]));
    let mut col = vec![0.0; rows * p];
    for bi in 0..b {
        let go = &gout.data()[bi * o * p..(bi + 1) * o * p];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in go.chunks(p).enumerate() {
                db.data_mut()[oc] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[bi * in_sz..(bi + 1) * in_sz], &g, &mut col);
            gemm(o, p, rows, go, false, &col, true, dw.data_mut(), 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, o, p, w.data(), true, go, false, &mut col, 0.0);
            col2im(&col, &g, &mut dx.data_mut()[bi * in_sz..(bi + 1) * in_sz]);
        }
    }
    Ok(Conv2dGrads { dx, dw, db })
}

/// One power-iteration step for the top singular value of the linear map
/// `x ↦ conv(x, w)` on a single `[C, H, W]` input. `u` is a flattened
/// output-shaped vector; returns the unit input direction `v`, the refined
/// unit `u` and the estimate `σ = ‖conv(v)‖`.
pub fn conv_power_step(w: &Tensor, u: &[f64], input: [usize; 3], cfg: Conv2dCfg) -> Result<(Tensor, Tensor, f64)> {
    let probe = Tensor::zeros(&[1, input[0], input[1], input[2]]);
    let (ho, wo) = match (cfg.out_size(input[1], w.dim(2)), cfg.out_size(input[2], w.dim(3))) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => return Err(Error::Shape(format!("power iteration input {input:?} is smaller than the kernel"))),
    };
    let out_shape = [1, w.dim(0), ho, wo];
    if u.len() != out_shape.iter().product::<usize>() {
        return Err(Error::Shape(format!(
            "power-iteration vector has {} entries for outputs {out_shape:?}",
            u.len()
        )));
    }
    let u = Tensor::new(&out_shape, u.to_vec())?;
    let mut v = conv2d_backward(&probe, w, cfg, &u, true, false, false)?
        .dx
        .expect("requested");
    unit(v.data_mut());
    let mut u_new = conv2d_forward(&v, w, None, cfg)?;
    let sigma = u_new.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Numerical(format!(
            "spectral norm estimate {sigma} is not positive"
        )));
    }
    unit(u_new.data_mut());
    Ok((v, u_new, sigma))
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Source taps for one output coordinate of a 2x bilinear up-sampling
/// (half-pixel centres, edge-clamped).
fn upsample_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `[B, C, H, W]` by a factor of 2 in both directions.
pub fn upsample2x_forward(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (2 * h, 2 * w);
    let ty = upsample_taps(ho, h);
    let tx = upsample_taps(wo, w);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let od = out.data_mut();
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample2x_backward(x_shape: &[usize], gout: &Tensor) -> Tensor {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let ty = upsample_taps(ho, h);
    let tx = upsample_taps(wo, w);
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    for plane in 0..b * c {
        let g = &gout.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = g[oy * wo + ox];
                dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                dst[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    dx
}

/// Non-overlapping average pooling over `[B, C, H, W]`; trailing rows and
/// columns that do not fill a window are dropped.
pub fn avg_pool_forward(x: &Tensor, kh: usize, kw: usize) -> Tensor {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as f64;
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let od = out.data_mut();
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for y in oy * kh..(oy + 1) * kh {
                    for xx in ox * kw..(ox + 1) * kw {
                        s += src[y * w + xx];
                    }
                }
                od[(plane * ho + oy) * wo + ox] = s * norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward(x_shape: &[usize], kh: usize, kw: usize, gout: &Tensor) -> Tensor {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as f64;
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    for plane in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gout.data()[(plane * ho + oy) * wo + ox] * norm;
                for y in oy * kh..(oy + 1) * kh {
                    for xx in ox * kw..(ox + 1) * kw {
                        dd[(plane * h + y) * w + xx] += g;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, cfg: Conv2dCfg) -> Tensor {
        let (bn, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let ho = cfg.out_size(h, kh).unwrap();
        let wo = cfg.out_size(wd, kw).unwrap();
        let mut out = Tensor::zeros(&[bn, o, ho, wo]);
        for bi in 0..bn {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b.data()[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * cfg.stride + ky * cfg.dilation) as isize
                                        - cfg.padding as isize;
                                    let ix = (ox * cfg.stride + kx * cfg.dilation) as isize
                                        - cfg.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((oc * c + ic) * kh + ky) * kw + kx]
                                        * x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oc) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for cfg in [
            Conv2dCfg::same(3, 1),
            Conv2dCfg::same(3, 2),
            Conv2dCfg::new(2, 1, 1),
            Conv2dCfg::new(2, 2, 1),
        ] {
            let k = if cfg.stride == 2 && cfg.padding == 1 { 4 } else if cfg.padding == 2 && cfg.stride == 2 { 5 } else { 3 };
            let x = Tensor::randn(&[2, 3, 9, 8], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[4], 1.0, &mut rng);
            let fast = conv2d_forward(&x, &w, Some(&b), cfg).unwrap();
            let slow = naive_conv(&x, &w, &b, cfg);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)> and the analogous identity for w.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = Conv2dCfg::new(2, 1, 1);
        let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 3, 4, 4], 1.0, &mut rng);
        let y = conv2d_forward(&x, &w, None, cfg).unwrap();
        let g = Tensor::randn(y.shape(), 1.0, &mut rng);
        let grads = conv2d_backward(&x, &w, cfg, &g, true, true, false).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.data().iter().zip(grads.dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.data().iter().zip(grads.dw.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::full(&[1, 2, 3, 5], 0.7);
        let y = upsample2x_forward(&x);
        assert_eq!(y.shape(), &[1, 2, 6, 10]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 2, 4, 3], 1.0, &mut rng);
        let y = upsample2x_forward(&x);
        let g = Tensor::randn(y.shape(), 1.0, &mut rng);
        let dx = upsample2x_backward(x.shape(), &g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
