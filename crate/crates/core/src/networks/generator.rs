//! Attention-based gated temporal-shift generator.
//!
//! Encoder: a 5×5 gated layer, a strided down-sampling layer, attention, a
//! 3×3 layer, a second down-sampling layer, a 3×3 layer and attention.
//! Bottleneck: four dilated 3×3 layers and a plain 3×3 layer. Decoder: two
//! up-sampling layers and a 3×3 output layer with tanh, rescaled to `[0, 1]`.
//! Every layer shifts channels causally in time before convolving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::input::{composite_graph, GeneratorBatch, INPUT_CHANNELS};
use super::params::ParamStore;
use crate::attention::{self_attention_graph, AttentionParams, AttentionVars};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Conv2dCfg;
use crate::temporal_shift::{gated_tsm_conv_graph, Activation, GatedConvParams, GatedConvSpec, GatedConvVars, ShiftSpec};
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Width of the full-resolution layers; the two down-sampled levels use
    /// twice and four times this, capped at `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub dilations: Vec<usize>,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            max_channels: 256,
            dilations: vec![2, 4, 8, 16],
            shift: ShiftSpec::online(true),
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn widths(&self) -> (usize, usize, usize) {
        let c1 = self.base_channels;
        (c1, (2 * c1).min(self.max_channels), (4 * c1).min(self.max_channels))
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config(format!(
                "generator widths base {} / max {} are invalid",
                self.base_channels, self.max_channels
            )));
        }
        if self.dilations.contains(&0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        self.shift.per_direction(self.base_channels)?;
        Ok(())
    }

    /// Layer sequence of the generator.
    pub fn plan(&self) -> Vec<Stage> {
        let (c1, c2, c3) = self.widths();
        let leaky = Activation::LeakyRelu(SLOPE);
        let gated = |cin, cout, kernel, conv, upsample, activation| {
            Stage::Gated(GatedConvSpec {
                in_channels: cin,
                out_channels: cout,
                kernel,
                conv,
                shift: self.shift,
                activation,
                upsample,
            })
        };
        let down = Conv2dCfg::new(2, 1, 1);
        let same3 = Conv2dCfg::same(3, 1);
        let mut plan = vec![
            gated(INPUT_CHANNELS, c1, 5, Conv2dCfg::same(5, 1), false, leaky),
            gated(c1, c2, 4, down, false, leaky),
            Stage::Attention(c2),
            gated(c2, c2, 3, same3, false, leaky),
            gated(c2, c3, 4, down, false, leaky),
            gated(c3, c3, 3, same3, false, leaky),
            Stage::Attention(c3),
        ];
        for &d in &self.dilations {
            plan.push(gated(c3, c3, 3, Conv2dCfg::same(3, d), false, leaky));
        }
        plan.extend([
            gated(c3, c3, 3, same3, false, leaky),
            gated(c3, c2, 3, same3, true, leaky),
            gated(c2, c1, 3, same3, true, leaky),
            gated(c1, 3, 3, same3, false, Activation::Tanh),
        ]);
        plan
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stage {
    Gated(GatedConvSpec),
    Attention(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    stage: Stage,
    first: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    layers: Vec<Layer>,
    params: ParamStore,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let (mut gi, mut ai) = (0, 0);
        for stage in config.plan() {
            let first = params.len();
            match stage {
                Stage::Gated(spec) => {
                    let p = GatedConvParams::init(&spec, &mut rng)?;
                    params.push(format!("gated{gi}.feature_w"), p.feature_w);
                    params.push(format!("gated{gi}.feature_b"), p.feature_b);
                    params.push(format!("gated{gi}.gate_w"), p.gate_w);
                    params.push(format!("gated{gi}.gate_b"), p.gate_b);
                    if let Some(k) = p.shift_kernel {
                        params.push(format!("gated{gi}.shift"), k);
                    }
                    gi += 1;
                }
                Stage::Attention(c) => {
                    let p = AttentionParams::init(c, &mut rng);
                    let names = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "gamma"];
                    for (name, t) in names.iter().zip(p.tensors()) {
                        params.push(format!("attn{ai}.{name}"), t.clone());
                    }
                    ai += 1;
                }
            }
            layers.push(Layer { stage, first });
        }
        Ok(Self { config, layers, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_gated_layers(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l.stage, Stage::Gated(_))).count()
    }

    pub fn num_attention_layers(&self) -> usize {
        self.layers.len() - self.num_gated_layers()
    }

    fn check_input(&self, shape: &[usize], frames: usize) -> Result<()> {
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS || shape[0] != frames {
            return Err(Error::Shape(format!(
                "generator input must be [{frames}, {INPUT_CHANNELS}, H, W], got {shape:?}"
            )));
        }
        if !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "generator frame size {}x{} must be a positive multiple of 4",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Raw output in `[0, 1]`, `[N·T, 3, H, W]`, for input `x` of
    /// `[N·T, 8, H, W]` with parameters bound as `vars`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var, n: usize, t: usize) -> Result<Var> {
        self.check_input(g.shape(x), n * t)?;
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "generator has {} parameters, {} bound",
                self.params.len(),
                vars.len()
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let v = &vars[layer.first..];
            h = match layer.stage {
                Stage::Gated(spec) => {
                    let gv = GatedConvVars {
                        feature_w: v[0],
                        feature_b: v[1],
                        gate_w: v[2],
                        gate_b: v[3],
                        shift_kernel: spec.shift.learnable.then(|| v[4]),
                    };
                    gated_tsm_conv_graph(g, h, n, t, &spec, &gv)?
                }
                Stage::Attention(_) => {
                    let av = AttentionVars {
                        w_q: v[0],
                        b_q: v[1],
                        w_k: v[2],
                        b_k: v[3],
                        w_v: v[4],
                        b_v: v[5],
                        w_o: v[6],
                        b_o: v[7],
                        gamma: v[8],
                    };
                    self_attention_graph(g, h, &av)?
                }
            };
        }
        let half = g.scale(h, 0.5);
        Ok(g.add_scalar(half, 0.5))
    }

    /// Builds the forward pass for a batch and returns `(raw, composited)`.
    pub fn forward_batch(&self, g: &mut Graph, vars: &[Var], batch: &GeneratorBatch) -> Result<(Var, Var)> {
        let x = g.constant(batch.input.clone());
        let raw = self.forward_graph(g, vars, x, batch.n, batch.t)?;
        let comp = composite_graph(g, raw, &batch.masked, &batch.mask3)?;
        Ok((raw, comp))
    }

    /// Composited output of a batch without tracking gradients.
    pub fn infer(&self, batch: &GeneratorBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let (_, comp) = self.forward_batch(&mut g, &vars, batch)?;
        let out = g.value(comp).clone();
        if !out.all_finite() {
            return Err(Error::Numerical("generator produced non-finite output".into()));
        }
        Ok(out)
    }
}
