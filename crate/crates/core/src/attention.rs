//! Spatial self-attention over feature maps.
//!
//! Every frame is attended independently (time folded into the batch). For
//! `P = H·W` positions, queries and keys are `C/8`-channel 1×1 projections,
//! scores are `S = QᵀK` (`P × P`), the attention matrix `A` is the softmax of
//! `S` over key positions, and the attended values `Y_A = V·Aᵀ` are projected
//! back to `C` channels and added to the input with a learnable gain `gamma`
//! that starts at zero.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Conv2dCfg;
use crate::temporal_shift::FeatureMap;
use crate::tensor::Tensor;

/// Channels used by the query/key projections for a `channels`-wide input.
pub fn qk_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub gamma: Tensor,
}

impl AttentionParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let cq = qk_channels(channels);
        let std = (1.0 / channels as f64).sqrt();
        Self {
            w_q: Tensor::randn(&[cq, channels, 1, 1], std, rng),
            b_q: Tensor::zeros(&[cq]),
            w_k: Tensor::randn(&[cq, channels, 1, 1], std, rng),
            b_k: Tensor::zeros(&[cq]),
            w_v: Tensor::randn(&[channels, channels, 1, 1], std, rng),
            b_v: Tensor::zeros(&[channels]),
            w_o: Tensor::randn(&[channels, channels, 1, 1], std, rng),
            b_o: Tensor::zeros(&[channels]),
            gamma: Tensor::zeros(&[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_v.dim(1)
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o, &self.b_o,
            &self.gamma,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AttentionVars {
        let mut put = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        AttentionVars {
            w_q: put(&self.w_q),
            b_q: put(&self.b_q),
            w_k: put(&self.w_k),
            b_k: put(&self.b_k),
            w_v: put(&self.w_v),
            b_v: put(&self.b_v),
            w_o: put(&self.w_o),
            b_o: put(&self.b_o),
            gamma: put(&self.gamma),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub gamma: Var,
}

/// Intermediate tensors of one attention evaluation, each with the frame
/// batch `B = N·T` first: `q, k: [B, Cq, P]`, `v: [B, C, P]`,
/// `s, a: [B, P, P]` (query rows, key columns), `y_a: [B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub s: Tensor,
    pub a: Tensor,
    pub y_a: Tensor,
}

struct Traced {
    q: Var,
    k: Var,
    v: Var,
    s: Var,
    a: Var,
    y_a: Var,
    out: Var,
}

fn trace(g: &mut Graph, x: Var, p: &AttentionVars) -> Result<Traced> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("attention expects [B, C, H, W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let expected = g.shape(p.w_v)[1];
    if c != expected || g.shape(p.w_q)[1] != c || g.shape(p.w_k)[1] != c {
        return Err(Error::Config(format!(
            "attention projections expect {expected} channels, feature map has {c}"
        )));
    }
    let cfg = Conv2dCfg::new(1, 0, 1);
    let pos = h * w;
    let q = g.conv2d(x, p.w_q, Some(p.b_q), cfg)?;
    let cq = g.shape(q)[1];
    let q = g.reshape(q, &[b, cq, pos])?;
    let k = g.conv2d(x, p.w_k, Some(p.b_k), cfg)?;
    let k = g.reshape(k, &[b, cq, pos])?;
    let v = g.conv2d(x, p.w_v, Some(p.b_v), cfg)?;
    let cv = g.shape(v)[1];
    let v = g.reshape(v, &[b, cv, pos])?;
    let s = g.matmul(q, k, true, false)?;
    if !g.value(s).all_finite() {
        let bad = g.value(s).data().iter().filter(|v| !v.is_finite()).count();
        return Err(Error::Numerical(format!(
            "attention scores contain {bad} non-finite entries (max |q| = {:.3e}, max |k| = {:.3e})",
            g.value(q).max_abs(),
            g.value(k).max_abs()
        )));
    }
    let a = g.softmax(s)?;
    let y = g.matmul(v, a, false, true)?;
    let y_a = g.reshape(y, &[b, cv, h, w])?;
    let proj = g.conv2d(y_a, p.w_o, Some(p.b_o), cfg)?;
    let gated = g.scale_by(p.gamma, proj)?;
    let out = g.add(x, gated)?;
    Ok(Traced {
        q,
        k,
        v,
        s,
        a,
        y_a,
        out,
    })
}

/// Residual self-attention on a `[B, C, H, W]` graph value.
pub fn self_attention_graph(g: &mut Graph, x: Var, p: &AttentionVars) -> Result<Var> {
    Ok(trace(g, x, p)?.out)
}

pub fn self_attention(f: &FeatureMap, p: &AttentionParams) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let vars = p.bind(&mut g, false);
    let out = self_attention_graph(&mut g, x, &vars)?;
    FeatureMap::new(f.n(), f.t(), g.value(out).clone())
}

/// Runs the attention block and returns its intermediate maps.
pub fn attention_maps(f: &FeatureMap, p: &AttentionParams) -> Result<AttentionMaps> {
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let vars = p.bind(&mut g, false);
    let t = trace(&mut g, x, &vars)?;
    Ok(AttentionMaps {
        q: g.value(t.q).clone(),
        k: g.value(t.k).clone(),
        v: g.value(t.v).clone(),
        s: g.value(t.s).clone(),
        a: g.value(t.a).clone(),
        y_a: g.value(t.y_a).clone(),
    })
}

/// Per-frame diagnostics of an attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSummary {
    /// `entropy[b][i]`: entropy (nats) of query position `i`'s weights.
    pub entropy: Vec<Vec<f64>>,
    /// Mean of `entropy[b]` over query positions.
    pub mean_entropy: Vec<f64>,
    /// `peak[b][i]`: key position with the largest weight for query `i`.
    pub peak: Vec<Vec<usize>>,
}

pub fn attention_rollout_stats(maps: &AttentionMaps) -> Result<AttentionSummary> {
    let a = &maps.a;
    if a.ndim() != 3 || a.dim(1) != a.dim(2) {
        return Err(Error::InvalidInput(format!(
            "attention matrix must be [B, P, P], got {:?}",
            a.shape()
        )));
    }
    if !a.all_finite() || a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("attention weights must be finite and nonnegative".into()));
    }
    let (b, p) = (a.dim(0), a.dim(1));
    let mut summary = AttentionSummary {
        entropy: Vec::with_capacity(b),
        mean_entropy: Vec::with_capacity(b),
        peak: Vec::with_capacity(b),
    };
    for frame in a.data().chunks(p * p) {
        let mut ent = Vec::with_capacity(p);
        let mut peak = Vec::with_capacity(p);
        for row in frame.chunks(p) {
            ent.push(row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>());
            let (idx, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            peak.push(idx);
        }
        summary.mean_entropy.push(ent.iter().sum::<f64>() / p as f64);
        summary.entropy.push(ent);
        summary.peak.push(peak);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight loops over channels and positions.
    pub(crate) fn naive_attention(x: &Tensor, p: &AttentionParams) -> (Tensor, Tensor) {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let pos = h * w;
        let cq = p.w_q.dim(0);
        let at = |bi: usize, ci: usize, i: usize| x.data()[(bi * c + ci) * pos + i];
        let proj = |wt: &Tensor, bt: &Tensor, bi: usize, o: usize, i: usize| {
            let mut s = bt.data()[o];
            for ci in 0..c {
                s += wt.data()[o * c + ci] * at(bi, ci, i);
            }
            s
        };
        let mut out = x.clone();
        let mut attn = Tensor::zeros(&[b, pos, pos]);
        for bi in 0..b {
            for i in 0..pos {
                let scores: Vec<f64> = (0..pos)
                    .map(|j| (0..cq).map(|o| proj(&p.w_q, &p.b_q, bi, o, i) * proj(&p.w_k, &p.b_k, bi, o, j)).sum())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let weights: Vec<f64> = e.iter().map(|v| v / z).collect();
                for (j, wv) in weights.iter().enumerate() {
                    attn.data_mut()[(bi * pos + i) * pos + j] = *wv;
                }
                let ya: Vec<f64> = (0..c)
                    .map(|cv| (0..pos).map(|j| weights[j] * proj(&p.w_v, &p.b_v, bi, cv, j)).sum())
                    .collect();
                for o in 0..c {
                    let mut s = p.b_o.data()[o];
                    for cv in 0..c {
                        s += p.w_o.data()[o * c + cv] * ya[cv];
                    }
                    out.data_mut()[(bi * c + o) * pos + i] += p.gamma.data()[0] * s;
                }
            }
        }
        (out, attn)
    }

    pub(crate) fn random_params(c: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        let mut p = AttentionParams::init(c, rng);
        p.b_q = Tensor::randn(p.b_q.shape(), 0.3, rng);
        p.b_k = Tensor::randn(p.b_k.shape(), 0.3, rng);
        p.b_v = Tensor::randn(p.b_v.shape(), 0.3, rng);
        p.b_o = Tensor::randn(p.b_o.shape(), 0.3, rng);
        p.gamma = Tensor::full(&[1], 0.8);
        p
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_params(4, &mut rng);
        let f = FeatureMap::new(1, 2, Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng)).unwrap();
        let got = self_attention(&f, &p).unwrap();
        let (want, attn) = naive_attention(f.tensor(), &p);
        for (a, b) in got.tensor().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let maps = attention_maps(&f, &p).unwrap();
        for (a, b) in maps.a.data().iter().zip(attn.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_gamma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut p = random_params(8, &mut rng);
        p.gamma = Tensor::zeros(&[1]);
        let f = FeatureMap::new(2, 1, Tensor::randn(&[2, 8, 3, 5], 1.0, &mut rng)).unwrap();
        assert_eq!(self_attention(&f, &p).unwrap(), f);
    }

    #[test]
    fn spatially_constant_input_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = random_params(4, &mut rng);
        let mut data = Tensor::zeros(&[2, 4, 3, 3]);
        for (i, v) in data.data_mut().iter_mut().enumerate() {
            *v = ((i / 9) as f64 * 0.37).sin();
        }
        let f = FeatureMap::new(1, 2, data).unwrap();
        let maps = attention_maps(&f, &p).unwrap();
        for v in maps.a.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
        for plane in maps.y_a.data().chunks(9) {
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let p = random_params(8, &mut rng);
        let f = FeatureMap::new(1, 3, Tensor::randn(&[3, 8, 4, 3], 2.0, &mut rng)).unwrap();
        let maps = attention_maps(&f, &p).unwrap();
        for row in maps.a.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn permuting_positions_permutes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let p = random_params(4, &mut rng);
        let x = Tensor::randn(&[1, 4, 2, 3], 1.0, &mut rng);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for c in 0..4 {
                for (dst, &src) in perm.iter().enumerate() {
                    out.data_mut()[c * 6 + dst] = t.data()[c * 6 + src];
                }
            }
            out
        };
        let f = FeatureMap::new(1, 1, x.clone()).unwrap();
        let fp = FeatureMap::new(1, 1, permute(&x)).unwrap();
        let a = self_attention(&f, &p).unwrap();
        let b = self_attention(&fp, &p).unwrap();
        for (u, v) in permute(a.tensor()).data().iter().zip(b.tensor().data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let p = AttentionParams::init(8, &mut rng);
        let f = FeatureMap::new(1, 1, Tensor::zeros(&[1, 4, 2, 2])).unwrap();
        assert!(matches!(self_attention(&f, &p), Err(Error::Config(_))));
    }

    #[test]
    fn huge_scores_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut p = random_params(4, &mut rng);
        p.w_q = Tensor::full(p.w_q.shape(), 1e200);
        p.w_k = Tensor::full(p.w_k.shape(), 1e200);
        let f = FeatureMap::new(1, 1, Tensor::full(&[1, 4, 2, 2], 1.0)).unwrap();
        assert!(matches!(self_attention(&f, &p), Err(Error::Numerical(_))));
    }

    #[test]
    fn entropy_extremes_and_formula() {
        let p = 5;
        let uniform = Tensor::full(&[1, p, p], 1.0 / p as f64);
        let mut one_hot = Tensor::zeros(&[1, p, p]);
        for i in 0..p {
            one_hot.data_mut()[i * p + (i + 2) % p] = 1.0;
        }
        let wrap = |a: Tensor| AttentionMaps {
            q: Tensor::zeros(&[0]),
            k: Tensor::zeros(&[0]),
            v: Tensor::zeros(&[0]),
            s: Tensor::zeros(&[0]),
            a,
            y_a: Tensor::zeros(&[0]),
        };
        let su = attention_rollout_stats(&wrap(uniform)).unwrap();
        assert!(su.entropy[0].iter().all(|e| (e - (p as f64).ln()).abs() < 1e-12));
        let so = attention_rollout_stats(&wrap(one_hot)).unwrap();
        assert!(so.entropy[0].iter().all(|e| *e == 0.0));
        assert_eq!(so.peak[0], vec![2, 3, 4, 0, 1]);

        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut rows = Tensor::uniform(&[2, p, p], 0.01, 1.0, &mut rng);
        for row in rows.data_mut().chunks_mut(p) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let stats = attention_rollout_stats(&wrap(rows.clone())).unwrap();
        for (b, frame) in rows.data().chunks(p * p).enumerate() {
            for (i, row) in frame.chunks(p).enumerate() {
                let direct: f64 = -row.iter().map(|a| a * a.ln()).sum::<f64>();
                assert!((stats.entropy[b][i] - direct).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p = random_params(8, &mut rng);
        let x = Tensor::randn(&[2, 8, 3, 3], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(p.tensors().iter().map(|t| (*t).clone()));
        let n_params: usize = inputs[1..].iter().map(Tensor::numel).sum();
        assert!(n_params <= 1000);
        let report = check_gradients(&inputs, 1e-6, |g, v| {
            let vars = AttentionVars {
                w_q: v[1],
                b_q: v[2],
                w_k: v[3],
                b_k: v[4],
                w_v: v[5],
                b_v: v[6],
                w_o: v[7],
                b_o: v[8],
                gamma: v[9],
            };
            let y = self_attention_graph(g, v[0], &vars)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
