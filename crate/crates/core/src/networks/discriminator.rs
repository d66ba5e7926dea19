//! Temporal-shift patch discriminator with spectrally normalized weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{conv_power_step, Conv2dCfg};
use crate::temporal_shift::ShiftSpec;
use crate::tensor::Tensor;

/// Frames plus mask.
pub const DISC_INPUT_CHANNELS: usize = 4;
const KERNEL: usize = 5;
/// Power-iteration steps run when a layer's vector is first created.
const POWER_WARMUP: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub slope: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            slope: 0.2,
            shift: ShiftSpec::bidirectional(false),
            seed: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv: Conv2dCfg,
    pub activate: bool,
}

impl DiscriminatorConfig {
    pub fn plan(&self) -> Vec<DiscLayer> {
        let d = self.base_channels;
        let down = Conv2dCfg::new(2, 2, 1);
        let same = Conv2dCfg::same(KERNEL, 1);
        let layer = |cin, cout, conv, activate| DiscLayer {
            in_channels: cin,
            out_channels: cout,
            conv,
            activate,
        };
        vec![
            layer(DISC_INPUT_CHANNELS, d, down, true),
            layer(d, 2 * d, down, true),
            layer(2 * d, 4 * d, down, true),
            layer(4 * d, 4 * d, down, true),
            layer(4 * d, 4 * d, same, true),
            layer(4 * d, 1, same, false),
        ]
    }

    /// Side of the output score map for a square input of side `size`.
    pub fn output_size(&self, size: usize) -> Option<usize> {
        self.plan()
            .iter()
            .try_fold(size, |s, l| l.conv.out_size(s, KERNEL).filter(|&o| o > 0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    layers: Vec<DiscLayer>,
    params: ParamStore,
    /// Power-iteration vectors, one per layer.
    u: Vec<Vec<f64>>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.base_channels == 0 || !(config.slope.is_finite() && config.slope >= 0.0) {
            return Err(Error::Config(format!("invalid discriminator config {config:?}")));
        }
        config.shift.per_direction(DISC_INPUT_CHANNELS)?;
        if config.shift.learnable {
            return Err(Error::Config("the discriminator uses a fixed shift".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config.plan();
        let mut params = ParamStore::new();
        for (i, l) in layers.iter().enumerate() {
            let fan_in = (l.in_channels * KERNEL * KERNEL) as f64;
            let w = Tensor::randn(&[l.out_channels, l.in_channels, KERNEL, KERNEL], (1.0 / fan_in).sqrt(), &mut rng);
            params.push(format!("disc{i}.w"), w);
            params.push(format!("disc{i}.b"), Tensor::zeros(&[l.out_channels]));
        }
        Ok(Self {
            config,
            u: vec![Vec::new(); layers.len()],
            layers,
            params,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DiscLayer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn power_vectors(&self) -> &[Vec<f64>] {
        &self.u
    }

    /// Replaces the power-iteration vectors. Each one is either empty or
    /// shaped like its layer's output for a single frame.
    pub fn set_power_vectors(&mut self, u: Vec<Vec<f64>>) -> Result<()> {
        if u.len() != self.layers.len()
            || u
                .iter()
                .zip(&self.layers)
                .any(|(v, l)| !v.is_empty() && v.len() % l.out_channels != 0)
        {
            return Err(Error::Checkpoint("power-iteration vectors do not match the discriminator".into()));
        }
        self.u = u;
        Ok(())
    }

    /// Patch scores `[N·T, 1, h, w]` for frames `[N·T, 3, H, W]` and masks
    /// `[N·T, 1, H, W]`. Also returns the refined power-iteration vectors.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        frames: Var,
        mask: Var,
        n: usize,
        t: usize,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "discriminator has {} parameters, {} bound",
                self.params.len(),
                vars.len()
            )));
        }
        let fs = g.shape(frames).to_vec();
        if fs.len() != 4 || fs[0] != n * t || fs[1] != 3 || g.shape(mask) != [n * t, 1, fs[2], fs[3]] {
            return Err(Error::Shape(format!(
                "discriminator needs [{}, 3, H, W] frames and matching masks, got {fs:?} and {:?}",
                n * t,
                g.shape(mask)
            )));
        }
        let mut h = g.concat(&[frames, mask], 1)?;
        let mut new_u = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let layout = self.config.shift.layout(n, t, l.in_channels)?;
            let shifted = g.temporal_shift(h, None, layout)?;
            let shape = g.shape(shifted).to_vec();
            let input = [shape[1], shape[2], shape[3]];
            let start = self.start_vector(i, g.value(vars[2 * i]), input, l.conv)?;
            let (w, u) = g.spectral_norm(vars[2 * i], start.as_deref().unwrap_or(&self.u[i]), input, l.conv)?;
            new_u.push(u);
            h = g.conv2d(shifted, w, Some(vars[2 * i + 1]), l.conv)?;
            if l.activate {
                h = g.leaky_relu(h, self.config.slope);
            }
        }
        Ok((h, new_u))
    }

    /// Fresh power-iteration vector for layer `i` when the stored one does not
    /// fit the current frame size: seeded random, then a few warm-up steps.
    fn start_vector(&self, i: usize, w: &Tensor, input: [usize; 3], cfg: Conv2dCfg) -> Result<Option<Vec<f64>>> {
        let l = &self.layers[i];
        let (ho, wo) = match (cfg.out_size(input[1], KERNEL), cfg.out_size(input[2], KERNEL)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::Shape(format!("discriminator layer {i} input {input:?} is too small"))),
        };
        if self.u[i].len() == l.out_channels * ho * wo {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(i as u64 + 1);
        let mut u = Tensor::randn(&[l.out_channels * ho * wo], 1.0, &mut rng).into_data();
        for _ in 0..POWER_WARMUP {
            u = conv_power_step(w, &u, input, cfg)?.1.into_data();
        }
        Ok(Some(u))
    }

    /// Scores without gradient tracking; power vectors are left untouched.
    pub fn score(&self, frames: &Tensor, mask: &Tensor, n: usize, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let f = g.constant(frames.clone());
        let m = g.constant(mask.clone());
        let (out, _) = self.forward_graph(&mut g, &vars, f, m, n, t)?;
        Ok(g.value(out).clone())
    }
}
