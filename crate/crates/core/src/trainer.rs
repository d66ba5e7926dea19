//! Adversarial training: one discriminator update then one generator update
//! per step, Adam on both networks, and resumable checkpoints.
//!
//! A checkpoint is a directory holding `generator.bin` and
//! `discriminator.bin` tensor archives (parameters, Adam moments and, for
//! the discriminator, the spectral-norm power vectors) and a plain-text
//! `manifest.txt` of `key = value` lines.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::data::{assemble_batch, BatchOptions, Dataset, MaskSequence};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_d_graph, adv_loss_g_graph, extract_pair, fer_loss_graph, recon_loss_graph, style_from_features,
    total_loss, total_loss_graph, vgg_from_features, ExpressionScorer, ExtractorChoice, FeatureExtractor,
    LossComponents, LossWeights, ScorerChoice,
};
use crate::networks::params::{read_archive, write_archive};
use crate::networks::{Discriminator, DiscriminatorConfig, GeneratorBatch, Generator, GeneratorConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    /// Frames per training sample.
    pub clip_length: usize,
    pub iterations: u64,
    pub seed: u64,
    pub device: String,
    /// Save every this many iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Global gradient-norm limit applied to each network, if set.
    pub grad_clip: Option<f64>,
    pub use_landmarks: bool,
    pub reference_index: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorChoice,
    pub scorer: ScorerChoice,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 9.7e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            batch_size: 2,
            clip_length: 4,
            iterations: 200,
            seed: 0,
            device: "cpu".into(),
            checkpoint_every: 0,
            d_steps: 1,
            grad_clip: None,
            use_landmarks: true,
            reference_index: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            extractor: ExtractorChoice::default(),
            scorer: ScorerChoice::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("Adam coefficients must lie in [0, 1) with a positive epsilon".into());
        }
        if self.iterations == 0 {
            return bad("iteration budget must be at least 1".into());
        }
        if self.batch_size == 0 || self.clip_length == 0 || self.d_steps == 0 {
            return bad("batch size, clip length and discriminator steps must be positive".into());
        }
        if self.device != "cpu" {
            return bad(format!("unsupported device {:?}; only \"cpu\" is available", self.device));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("gradient clip {c} must be positive"));
            }
        }
        self.weights.validate()?;
        self.generator.validate()?;
        Discriminator::new(self.discriminator.clone())?;
        Ok(())
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            batch_size: self.batch_size,
            window: self.clip_length,
            reference_index: self.reference_index,
            use_landmarks: self.use_landmarks,
            seed: self.seed,
        }
    }

    /// Hash of the settings that fix the network shapes.
    pub fn model_hash(&self) -> String {
        let text = serde_json::to_string(&(&self.generator, &self.discriminator)).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Adam moments for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) {
        self.steps += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (i, p) in params.tensors_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Losses of one step: the five generator components, their weighted total
/// and the discriminator loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub adv: f64,
    pub fer: f64,
    pub style: f64,
    pub vgg: f64,
    pub recon: f64,
    pub total: f64,
    pub disc: f64,
}

impl LossRecord {
    /// The six generator-side values in log-column order.
    pub fn columns(&self) -> [f64; 6] {
        [self.adv, self.fer, self.style, self.vgg, self.recon, self.total]
    }

    pub fn log_line(&self) -> String {
        self.columns().map(|v| format!("{v:.8e}")).join(" ")
    }

    pub fn log_header() -> &'static str {
        "# adv fer style vgg recon total"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub iteration: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator.clone())?;
        let discriminator = Discriminator::new(cfg.discriminator.clone())?;
        Ok(Self {
            iteration: 0,
            adam_g: Adam::new(generator.params()),
            adam_d: Adam::new(discriminator.params()),
            generator,
            discriminator,
            history: Vec::new(),
        })
    }

    /// Mean of each logged value over the last `window` steps.
    pub fn running_average(&self, window: usize) -> Option<LossRecord> {
        let tail = &self.history[self.history.len().saturating_sub(window)..];
        if tail.is_empty() {
            return None;
        }
        let k = tail.len() as f64;
        let mean = |f: fn(&LossRecord) -> f64| tail.iter().map(f).sum::<f64>() / k;
        Some(LossRecord {
            adv: mean(|r| r.adv),
            fer: mean(|r| r.fer),
            style: mean(|r| r.style),
            vgg: mean(|r| r.vgg),
            recon: mean(|r| r.recon),
            total: mean(|r| r.total),
            disc: mean(|r| r.disc),
        })
    }
}

/// Extractor and scorer used by the losses.
pub struct LossModels {
    pub extractor: Box<dyn FeatureExtractor + Send + Sync>,
    pub scorer: Box<dyn ExpressionScorer + Send + Sync>,
}

impl LossModels {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            extractor: cfg.extractor.build(),
            scorer: cfg.scorer.build(),
        }
    }
}

fn clip_gradients(grads: &mut [Tensor], limit: Option<f64>) {
    let Some(limit) = limit else { return };
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn numerical(batch: &GeneratorBatch, iteration: u64, what: &str) -> Error {
    Error::Numerical(format!(
        "{what} at iteration {iteration} (batch {})",
        if batch.sources.is_empty() { "unnamed".to_string() } else { batch.sources.join(", ") }
    ))
}

/// One discriminator update on real frames against the detached composited
/// output, then one generator update on the weighted total loss.
pub fn train_step(
    state: &mut TrainState,
    batch: &GeneratorBatch,
    cfg: &TrainConfig,
    models: &LossModels,
) -> Result<LossRecord> {
    let target = batch
        .target
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("training batch has no ground truth".into()))?;
    let (n, t) = (batch.n, batch.t);
    let it = state.iteration;

    let mut g = Graph::new();
    let gvars = state.generator.params().bind(&mut g, true);
    let (_, comp) = state.generator.forward_batch(&mut g, &gvars, batch)?;
    if !g.value(comp).all_finite() {
        return Err(numerical(batch, it, "generator output is not finite"));
    }

    // Discriminator: real and fake clips share one pass so the power
    // iteration advances once per update.
    let fake = g.value(comp).clone();
    let mut disc = 0.0;
    for _ in 0..cfg.d_steps {
        let mut gd = Graph::new();
        let dvars = state.discriminator.params().bind(&mut gd, true);
        let frames = gd.constant(Tensor::concat(&[target, &fake], 0)?);
        let masks = gd.constant(Tensor::concat(&[&batch.mask, &batch.mask], 0)?);
        let (scores, u) = state.discriminator.forward_graph(&mut gd, &dvars, frames, masks, 2 * n, t)?;
        let rows = n * t;
        let real = gd.narrow(scores, 0, 0, rows)?;
        let fake_s = gd.narrow(scores, 0, rows, rows)?;
        let loss_d = adv_loss_d_graph(&mut gd, real, fake_s).map_err(|_| numerical(batch, it, "discriminator scores are not finite"))?;
        disc = gd.value(loss_d).item();
        if !disc.is_finite() {
            return Err(numerical(batch, it, "discriminator loss is not finite"));
        }
        let grads = gd.backward(loss_d)?;
        let mut gs: Vec<Tensor> = dvars
            .iter()
            .zip(state.discriminator.params().iter())
            .map(|(&v, (_, p))| grads.get_or_zeros(v, p.shape()))
            .collect();
        clip_gradients(&mut gs, cfg.grad_clip);
        state.adam_d.step(state.discriminator.params_mut(), &gs, cfg);
        state.discriminator.set_power_vectors(u)?;
    }

    // Generator.
    let gt = g.constant(target.clone());
    let mask = g.constant(batch.mask.clone());
    let dvars = state.discriminator.params().bind(&mut g, false);
    let (scores, _) = state.discriminator.forward_graph(&mut g, &dvars, comp, mask, n, t)?;
    let adv = adv_loss_g_graph(&mut g, scores).map_err(|_| numerical(batch, it, "discriminator scores are not finite"))?;
    let pairs = extract_pair(&mut g, models.extractor.as_ref(), comp, gt)?;
    let vgg = vgg_from_features(&mut g, &pairs)?;
    let style = style_from_features(&mut g, &pairs)?;
    let fer = fer_loss_graph(&mut g, models.scorer.as_ref(), gt, comp)?;
    let recon = recon_loss_graph(&mut g, comp, gt)?;
    let components = LossComponents {
        adv: g.value(adv).item(),
        fer: g.value(fer).item(),
        style: g.value(style).item(),
        vgg: g.value(vgg).item(),
        recon: g.value(recon).item(),
    };
    let total_value = total_loss(&components, &cfg.weights).map_err(|_| numerical(batch, it, "loss component is not finite"))?;
    let total = total_loss_graph(&mut g, [adv, fer, style, vgg, recon], &cfg.weights)?;
    let grads = g.backward(total)?;
    let mut gs: Vec<Tensor> = gvars
        .iter()
        .zip(state.generator.params().iter())
        .map(|(&v, (_, p))| grads.get_or_zeros(v, p.shape()))
        .collect();
    if gs.iter().any(|t| !t.all_finite()) {
        return Err(numerical(batch, it, "generator gradient is not finite"));
    }
    clip_gradients(&mut gs, cfg.grad_clip);
    state.adam_g.step(state.generator.params_mut(), &gs, cfg);

    let record = LossRecord {
        adv: components.adv,
        fer: components.fer,
        style: components.style,
        vgg: components.vgg,
        recon: components.recon,
        total: total_value,
        disc,
    };
    state.iteration += 1;
    state.history.push(record);
    Ok(record)
}

/// Runs steps until `cfg.iterations` are complete, calling `after_step`
/// after each one.
pub fn train(
    state: &mut TrainState,
    ds: &Dataset,
    mask: &MaskSequence,
    cfg: &TrainConfig,
    models: &LossModels,
    mut after_step: impl FnMut(&TrainState, &LossRecord) -> Result<()>,
) -> Result<()> {
    let opts = cfg.batch_options();
    while state.iteration < cfg.iterations {
        let batch = assemble_batch(ds, mask, &opts, state.iteration)?;
        let rec = train_step(state, &batch, cfg, models)?;
        after_step(state, &rec)?;
    }
    Ok(())
}

/// Named tensors as stored in a parameter archive.
type Entries = Vec<(String, Tensor)>;

fn adam_entries(prefix: &str, store: &ParamStore, adam: &Adam) -> Entries {
    let mut out: Vec<(String, Tensor)> = store.entries().to_vec();
    for (i, (name, _)) in store.iter().enumerate() {
        out.push((format!("{prefix}adam.m.{name}"), adam.m[i].clone()));
        out.push((format!("{prefix}adam.v.{name}"), adam.v[i].clone()));
    }
    out.push((format!("{prefix}adam.steps"), Tensor::scalar(adam.steps as f64)));
    out
}

fn split_adam(entries: Entries, store: &ParamStore) -> Result<(Entries, Adam, Entries)> {
    let k = store.len();
    if entries.len() < 3 * k + 1 {
        return Err(Error::Checkpoint(format!(
            "archive holds {} tensors, expected at least {}",
            entries.len(),
            3 * k + 1
        )));
    }
    let mut it = entries.into_iter();
    let params: Vec<(String, Tensor)> = it.by_ref().take(k).collect();
    let mut m = Vec::with_capacity(k);
    let mut v = Vec::with_capacity(k);
    for (name, p) in store.iter() {
        for (kind, dst) in [("m", &mut m), ("v", &mut v)] {
            let (n, t) = it.next().expect("length checked");
            if n != format!("adam.{kind}.{name}") || t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry {n}")));
            }
            dst.push(t);
        }
    }
    let (n, steps) = it.next().expect("length checked");
    if n != "adam.steps" || steps.numel() != 1 {
        return Err(Error::Checkpoint("missing optimizer step count".into()));
    }
    let adam = Adam {
        m,
        v,
        steps: steps.item() as u64,
    };
    Ok((params, adam, it.collect()))
}

fn manifest_text(state: &TrainState, cfg: &TrainConfig) -> String {
    let w = cfg.weights;
    let mut s = String::new();
    let _ = writeln!(s, "format_version = {CHECKPOINT_FORMAT_VERSION}");
    let _ = writeln!(s, "config_hash = {}", cfg.model_hash());
    let _ = writeln!(s, "iteration = {}", state.iteration);
    let _ = writeln!(s, "lambda_adv = {}", w.lambda_adv);
    let _ = writeln!(s, "lambda_fer = {}", w.lambda_fer);
    let _ = writeln!(s, "lambda_style = {}", w.lambda_style);
    let _ = writeln!(s, "lambda_vgg = {}", w.lambda_vgg);
    let _ = writeln!(s, "lambda_recon = {}", w.lambda_recon);
    let _ = writeln!(s, "use_landmarks = {}", cfg.use_landmarks);
    let _ = writeln!(s, "reference_index = {}", cfg.reference_index);
    let _ = writeln!(s, "generator = {}", serde_json::to_string(&cfg.generator).expect("serializes"));
    let _ = writeln!(s, "discriminator = {}", serde_json::to_string(&cfg.discriminator).expect("serializes"));
    s
}

pub fn save_checkpoint(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_archive(&dir.join("generator.bin"), &adam_entries("", state.generator.params(), &state.adam_g))?;
    let mut d = adam_entries("", state.discriminator.params(), &state.adam_d);
    for (i, u) in state.discriminator.power_vectors().iter().enumerate() {
        d.push((format!("sn.u.{i}"), Tensor::new(&[u.len()], u.clone())?));
    }
    write_archive(&dir.join("discriminator.bin"), &d)?;
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest_text(state, cfg)).map_err(|e| Error::io(&path, e))
}

/// Parsed checkpoint manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub iteration: u64,
    pub weights: LossWeights,
    /// Whether the landmark channel was fed during training.
    pub use_landmarks: bool,
    pub reference_index: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut kv = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Checkpoint(format!("{}: line {} is not `key = value`", path.display(), i + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing {k}", path.display())))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{}: {k} is not a number", path.display())))
    };
    let version: u32 = get("format_version")?
        .parse()
        .map_err(|_| Error::Checkpoint("format_version is not an integer".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let json = |k: &str| -> Result<String> { Ok(get(k)?.clone()) };
    Ok(CheckpointManifest {
        format_version: version,
        config_hash: get("config_hash")?.clone(),
        iteration: get("iteration")?
            .parse()
            .map_err(|_| Error::Checkpoint("iteration is not an integer".into()))?,
        weights: LossWeights {
            lambda_adv: num("lambda_adv")?,
            lambda_fer: num("lambda_fer")?,
            lambda_style: num("lambda_style")?,
            lambda_vgg: num("lambda_vgg")?,
            lambda_recon: num("lambda_recon")?,
        },
        use_landmarks: get("use_landmarks")?
            .parse()
            .map_err(|_| Error::Checkpoint("use_landmarks is not a boolean".into()))?,
        reference_index: get("reference_index")?
            .parse()
            .map_err(|_| Error::Checkpoint("reference_index is not an integer".into()))?,
        generator: serde_json::from_str(&json("generator")?)
            .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?,
        discriminator: serde_json::from_str(&json("discriminator")?)
            .map_err(|e| Error::Checkpoint(format!("discriminator config: {e}")))?,
    })
}

/// Restores a training state. The network settings in `cfg` must match the
/// checkpoint; nothing is returned unless every file is valid.
pub fn load_checkpoint(dir: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let manifest = read_checkpoint_manifest(dir)?;
    if manifest.config_hash != cfg.model_hash() {
        return Err(Error::Checkpoint(format!(
            "{} was written for different network settings",
            dir.display()
        )));
    }
    let mut state = TrainState::new(cfg)?;
    let (gp, adam_g, rest) = split_adam(read_archive(&dir.join("generator.bin"))?, state.generator.params())?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint("generator archive has extra entries".into()));
    }
    state.generator.params_mut().load_from(&gp)?;
    let (dp, adam_d, rest) = split_adam(read_archive(&dir.join("discriminator.bin"))?, state.discriminator.params())?;
    state.discriminator.params_mut().load_from(&dp)?;
    let u = rest
        .into_iter()
        .enumerate()
        .map(|(i, (n, t))| {
            if n == format!("sn.u.{i}") {
                Ok(t.into_data())
            } else {
                Err(Error::Checkpoint(format!("unexpected discriminator entry {n}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    state.discriminator.set_power_vectors(u)?;
    state.adam_g = adam_g;
    state.adam_d = adam_d;
    state.iteration = manifest.iteration;
    Ok(state)
}

/// Generator alone, for inference; its settings come from the manifest.
pub fn load_generator(dir: &Path) -> Result<(Generator, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut generator = Generator::new(manifest.generator.clone())?;
    let (params, _, rest) = split_adam(read_archive(&dir.join("generator.bin"))?, generator.params())?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint("generator archive has extra entries".into()));
    }
    generator.params_mut().load_from(&params)?;
    Ok((generator, manifest))
}
