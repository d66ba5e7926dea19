use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use evi_core::data::io::{list_frames, read_clip, read_frame, read_mask, write_clip, write_mask};
use evi_core::data::synthetic::{generate_corpus, provider_for, write_corpus};
use evi_core::data::{make_hmd_mask, masked_reference, prepare_reference, ClipManifest, Dataset, MaskSequence, Split, VideoClip};
use evi_core::landmarks::{detect_landmarks, landmark_maps_with_fallback, read_landmark_file, write_landmark_file, DetectError};
use evi_core::metrics::{evaluate_model, render_bar_plots, render_report, report_json, EvalSettings, LpipsWeights, MetricsReport, Region};
use evi_core::networks::{Generator, GeneratorBatch, GeneratorInput};
use evi_core::trainer::{load_checkpoint, load_generator, save_checkpoint, train, LossModels, LossRecord, TrainState};
use evi_core::Tensor;
use log::{info, warn};

use crate::config::{apply, RunConfig};
use crate::{
    Cli, CliError, Command, CorpusArgs, EvalArgs, GeometryArgs, InferArgs, LandmarkArgs, MaskArgs, RegionArg, SplitArg,
    TrainArgs,
};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::MakeSyntheticCorpus(a) => make_corpus(&mut cfg, a),
        Command::MakeMasks(a) => make_masks(&mut cfg, a),
        Command::Landmarks(a) => landmarks(&mut cfg, a),
        Command::Train(a) => train_cmd(&mut cfg, a),
        Command::Infer(a) => infer(&mut cfg, a),
        Command::Evaluate(a) => evaluate(&mut cfg, a),
    }
}

fn apply_geometry(cfg: &mut RunConfig, g: &GeometryArgs) {
    apply!(
        cfg.mask.top => g.mask_top,
        cfg.mask.bottom => g.mask_bottom,
        cfg.mask.left => g.mask_left,
        cfg.mask.right => g.mask_right,
        cfg.mask.corner_radius => g.mask_corner_radius,
    );
}

/// Validates, then records the resolved config in `dir` before any work.
fn start(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let path = cfg.write_resolved(dir)?;
    info!("resolved config written to {}", path.display());
    Ok(())
}

fn mask_for(cfg: &RunConfig, h: usize, w: usize) -> Result<(MaskSequence, String), CliError> {
    match &cfg.mask_file {
        Some(path) => {
            let m = read_mask(path)?;
            if (m.h(), m.w()) != (h, w) {
                return Err(CliError::data(format!(
                    "mask {} is {}x{}, frames are {h}x{w}",
                    path.display(),
                    m.h(),
                    m.w()
                )));
            }
            Ok((m, path.display().to_string()))
        }
        None => {
            let g = cfg.mask;
            let desc = format!(
                "hmd rows {}-{} cols {}-{} radius {}",
                g.top, g.bottom, g.left, g.right, g.corner_radius
            );
            Ok((make_hmd_mask(h, w, &g)?, desc))
        }
    }
}

fn make_corpus(cfg: &mut RunConfig, a: CorpusArgs) -> Result<(), CliError> {
    apply!(
        cfg.out_dir => a.out.map(Some),
        cfg.corpus.clips => a.clips,
        cfg.corpus.frames => a.frames,
        cfg.corpus.size => a.size,
        cfg.corpus.test_clips => a.test_clips,
        cfg.corpus.seed => a.seed,
    );
    let out = cfg.out_dir()?.to_path_buf();
    start(cfg, &out)?;
    let manifest = write_corpus(&out, &cfg.corpus)?;
    info!(
        "wrote {} clips of {} frames to {}",
        manifest.clips.len(),
        cfg.corpus.frames,
        out.display()
    );
    Ok(())
}

fn make_masks(cfg: &mut RunConfig, a: MaskArgs) -> Result<(), CliError> {
    apply!(cfg.out_dir => a.out.map(Some));
    apply_geometry(cfg, &a.geometry);
    let out = cfg.out_dir()?.to_path_buf();
    start(cfg, &out)?;
    let h = a.height.unwrap_or(cfg.corpus.size);
    let w = a.width.unwrap_or(cfg.corpus.size);
    let mask = make_hmd_mask(h, w, &cfg.mask)?;
    let path = out.join("mask.png");
    write_mask(&path, &mask)?;
    info!(
        "wrote {}x{w} mask to {} (area {:.3})",
        h,
        path.display(),
        mask.area_fraction()
    );
    Ok(())
}

fn landmarks(cfg: &mut RunConfig, a: LandmarkArgs) -> Result<(), CliError> {
    apply!(cfg.manifest => a.manifest.map(Some), cfg.out_dir => a.out.map(Some));
    let manifest = ClipManifest::load(cfg.manifest()?)?;
    let out = cfg.out_dir.clone().unwrap_or_else(|| manifest.root().to_path_buf());
    start(cfg, &out)?;
    let corpus = manifest.synthetic.as_ref().ok_or_else(|| {
        CliError::config("no landmark detector is available for this dataset; only synthetic corpora can be processed")
    })?;
    let provider = provider_for(&generate_corpus(corpus)?);
    for entry in &manifest.clips {
        let clip = read_clip(&manifest.frames_dir(entry), None)?;
        let mut sets = Vec::with_capacity(clip.t());
        for t in 0..clip.t() {
            match detect_landmarks(&clip.frame(t), &provider) {
                Ok(s) => sets.push(Some(s)),
                Err(DetectError::NoFace) => {
                    warn!("{}: no face in frame {t}", entry.name);
                    sets.push(None);
                }
                Err(DetectError::Failed(e)) => return Err(e.into()),
            }
        }
        let path = match &cfg.out_dir {
            Some(dir) => dir.join(&entry.name).join("landmarks.txt"),
            None => manifest.landmarks_path(entry),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::data(format!("cannot create {}: {e}", parent.display())))?;
        }
        write_landmark_file(&path, &sets)?;
        info!("{}: {} frames -> {}", entry.name, sets.len(), path.display());
    }
    Ok(())
}

fn open_log(path: &Path, append: bool, header: Option<&str>) -> Result<std::fs::File, CliError> {
    let fresh = !append || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    if fresh {
        if let Some(h) = header {
            writeln!(f, "{h}").map_err(|e| CliError::data(e.to_string()))?;
        }
    }
    Ok(f)
}

fn train_cmd(cfg: &mut RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let t = &mut cfg.train;
    apply!(
        t.iterations => a.iterations,
        t.learning_rate => a.learning_rate,
        t.batch_size => a.batch_size,
        t.clip_length => a.clip_length,
        t.seed => a.seed,
        t.checkpoint_every => a.checkpoint_every,
        t.grad_clip => a.grad_clip.map(Some),
        t.reference_index => a.reference_index,
        t.weights.lambda_adv => a.lambda_adv,
        t.weights.lambda_fer => a.lambda_fer,
        t.weights.lambda_style => a.lambda_style,
        t.weights.lambda_vgg => a.lambda_vgg,
        t.weights.lambda_recon => a.lambda_recon,
        t.generator.base_channels => a.base_channels,
    );
    if a.no_landmarks {
        t.use_landmarks = false;
    }
    apply!(
        cfg.manifest => a.manifest.map(Some),
        cfg.out_dir => a.out.map(Some),
        cfg.mask_file => a.mask.map(Some),
    );
    apply_geometry(cfg, &a.geometry);
    let out = cfg.out_dir()?.to_path_buf();
    start(cfg, &out)?;
    let tc = &cfg.train;

    let manifest = ClipManifest::load(cfg.manifest()?)?;
    manifest.validate()?;
    let ds = Dataset::load(&manifest, Split::Train)?;
    let (mask, _) = mask_for(cfg, ds.h(), ds.w())?;
    let models = LossModels::from_config(tc);
    let mut state = match &a.resume {
        Some(dir) => {
            let s = load_checkpoint(dir, tc)?;
            info!("resuming from {} at iteration {}", dir.display(), s.iteration);
            s
        }
        None => TrainState::new(tc)?,
    };
    info!(
        "training on {} clips ({}x{}), generator {} parameters, {} iterations",
        ds.len(),
        ds.h(),
        ds.w(),
        state.generator.params().num_scalars(),
        tc.iterations
    );

    let resumed = a.resume.is_some();
    let mut losses = open_log(&out.join("losses.txt"), resumed, Some(LossRecord::log_header()))?;
    let mut jsonl = open_log(&out.join("train_log.jsonl"), resumed, None)?;
    let every = (tc.iterations / 20).max(1);
    let started = std::time::Instant::now();
    train(&mut state, &ds, &mask, tc, &models, |st, rec| {
        let io = |e: std::io::Error| evi_core::Error::InvalidInput(format!("writing logs: {e}"));
        writeln!(losses, "{}", rec.log_line()).map_err(io)?;
        let line = serde_json::json!({ "iteration": st.iteration, "losses": rec });
        writeln!(jsonl, "{line}").map_err(io)?;
        if tc.checkpoint_every > 0 && st.iteration % tc.checkpoint_every == 0 {
            save_checkpoint(&out.join("checkpoints").join(format!("iter_{:06}", st.iteration)), st, tc)?;
        }
        if st.iteration % every == 0 || st.iteration == tc.iterations {
            info!(
                "iteration {}/{}: recon {:.5} total {:.5} disc {:.5} ({:.1}s)",
                st.iteration,
                tc.iterations,
                rec.recon,
                rec.total,
                rec.disc,
                started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&ckpt, &state, tc)?;
    info!("final checkpoint at {}", ckpt.display());
    Ok(())
}

/// Runs the generator over one clip and returns the composited frames.
fn inpaint(
    generator: &Generator,
    clip: &VideoClip,
    mask: &MaskSequence,
    landmarks: Tensor,
    reference: Tensor,
    use_landmarks: bool,
) -> Result<VideoClip, CliError> {
    let frames = MaskSequence::repeat_frame(&mask.frame(0), clip.t())?;
    let mut input = GeneratorInput::from_clip(clip, &frames, landmarks, reference)?;
    if !use_landmarks {
        input = input.without_landmarks();
    }
    let batch = GeneratorBatch::from_inputs(&[input], None)?;
    Ok(VideoClip::new(generator.infer(&batch)?)?)
}

fn landmark_rasters(path: &Path, t: usize, h: usize, w: usize) -> Result<Tensor, CliError> {
    let sets = read_landmark_file(path)?;
    if sets.len() != t {
        return Err(CliError::data(format!(
            "landmark file {} has {} frames, the clip has {t}",
            path.display(),
            sets.len()
        )));
    }
    let (maps, empty) = landmark_maps_with_fallback(&sets, h, w)?;
    if !empty.is_empty() {
        warn!("{}: {} frames without landmarks", path.display(), empty.len());
    }
    Ok(maps)
}

fn infer(cfg: &mut RunConfig, a: InferArgs) -> Result<(), CliError> {
    apply!(cfg.out_dir => a.out.map(Some), cfg.mask_file => a.mask.map(Some));
    apply_geometry(cfg, &a.geometry);
    let single = a.manifest.is_none();
    if single {
        let missing: Vec<&str> = [
            (a.frames.is_none(), "--frames (input frame directory)"),
            (a.landmarks.is_none() && !a.no_landmarks, "--landmarks (landmark file)"),
            (a.reference.is_none(), "--reference (reference image)"),
        ]
        .into_iter()
        .filter_map(|(m, name)| m.then_some(name))
        .collect();
        if !missing.is_empty() {
            return Err(CliError::config(format!(
                "missing conditioning input: {}",
                missing.join(", ")
            )));
        }
    } else {
        apply!(cfg.manifest => a.manifest.map(Some));
    }
    let out = cfg.out_dir()?.to_path_buf();
    start(cfg, &out)?;
    let (generator, ckpt) = load_generator(&a.checkpoint)?;
    let use_landmarks = ckpt.use_landmarks && !a.no_landmarks;

    if single {
        let clip = read_clip(a.frames.as_deref().expect("checked"), None)?;
        let (h, w) = (clip.h(), clip.w());
        let (mask, _) = mask_for(cfg, h, w)?;
        let landmarks = match &a.landmarks {
            Some(p) if use_landmarks => landmark_rasters(p, clip.t(), h, w)?,
            _ => Tensor::zeros(&[clip.t(), 1, h, w]),
        };
        let reference_path = a.reference.as_deref().expect("checked");
        let image = read_frame(reference_path)?;
        if image.shape() != [3, h, w] {
            return Err(CliError::data(format!(
                "reference {} is {:?}, frames are 3x{h}x{w}",
                reference_path.display(),
                image.shape()
            )));
        }
        let reference = masked_reference(&image, &mask.frame(0))?;
        let result = inpaint(&generator, &clip, &mask, landmarks, reference, use_landmarks)?;
        write_clip(&out, &result)?;
        info!("wrote {} frames to {}", result.t(), out.display());
        return Ok(());
    }

    let manifest = ClipManifest::load(cfg.manifest()?)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    for entry in manifest.split(split) {
        let clip = read_clip(&manifest.frames_dir(entry), None)?;
        let (h, w) = (clip.h(), clip.w());
        let (mask, _) = mask_for(cfg, h, w)?;
        let landmarks = landmark_rasters(&manifest.landmarks_path(entry), clip.t(), h, w)?;
        let full = MaskSequence::repeat_frame(&mask.frame(0), clip.t())?;
        let reference = prepare_reference(&clip, &full, ckpt.reference_index)?;
        let result = inpaint(&generator, &clip, &mask, landmarks, reference, use_landmarks)?;
        let dir = out.join(&entry.name);
        write_clip(&dir, &result)?;
        info!("{}: wrote {} frames to {}", entry.name, result.t(), dir.display());
    }
    Ok(())
}

/// Clip directories under `root`: `root` itself when it holds frames,
/// otherwise its subdirectories, sorted by name.
fn clip_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    if !root.is_dir() {
        return Err(CliError::data(format!("{} is not a directory", root.display())));
    }
    if !list_frames(root)?.is_empty() {
        let name = root.file_name().map_or_else(|| "clip".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, root.to_path_buf())]);
    }
    let mut dirs: Vec<(String, PathBuf)> = std::fs::read_dir(root)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn frame_names(dir: &Path) -> Result<Vec<String>, CliError> {
    Ok(list_frames(dir)?
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

fn parse_pred(spec: &str) -> Result<(String, PathBuf), CliError> {
    match spec.split_once('=') {
        Some((label, dir)) if !label.is_empty() && !dir.is_empty() => Ok((label.to_string(), PathBuf::from(dir))),
        _ => Err(CliError::config(format!("--pred expects LABEL=DIR, got {spec:?}"))),
    }
}

fn evaluate(cfg: &mut RunConfig, a: EvalArgs) -> Result<(), CliError> {
    apply!(cfg.out_dir => a.out.map(Some), cfg.mask_file => a.mask.map(Some));
    apply_geometry(cfg, &a.geometry);
    if let Some(r) = a.region {
        cfg.eval.region = match r {
            RegionArg::Full => Region::Full,
            RegionArg::Masked => Region::Masked,
        };
    }
    if a.per_clip {
        cfg.eval.per_clip = true;
    }
    let preds = a.preds.iter().map(|s| parse_pred(s)).collect::<Result<Vec<_>, _>>()?;
    let out = cfg.out_dir()?.to_path_buf();
    start(cfg, &out)?;

    // Clips are those of the first prediction set; every set and the ground
    // truth must hold the same clips with the same frame files.
    let clips = clip_dirs(&preds[0].1)?;
    if clips.is_empty() {
        return Err(CliError::data(format!("{} holds no clips", preds[0].1.display())));
    }
    let single = clips.len() == 1 && clips[0].1 == preds[0].1;
    let mut problems = Vec::new();
    let mut gt_dirs = Vec::new();
    for (name, _) in &clips {
        let gt_dir = if single { a.gt.clone() } else { a.gt.join(name) };
        let expected = if gt_dir.is_dir() { frame_names(&gt_dir)? } else { Vec::new() };
        if expected.is_empty() {
            problems.push(format!("ground truth has no frames for clip {name} ({})", gt_dir.display()));
        }
        for (label, root) in &preds {
            let dir = if single { root.clone() } else { root.join(name) };
            let got = if dir.is_dir() { frame_names(&dir)? } else { Vec::new() };
            for f in expected.iter().filter(|f| !got.contains(f)) {
                problems.push(format!("{label}: missing {}", dir.join(f).display()));
            }
            for f in got.iter().filter(|f| !expected.contains(f)) {
                problems.push(format!("{label}: unexpected {} (not in ground truth)", dir.join(f).display()));
            }
        }
        gt_dirs.push(gt_dir);
    }
    if !problems.is_empty() {
        return Err(CliError::data(format!(
            "predictions and ground truth are misaligned:\n  {}",
            problems.join("\n  ")
        )));
    }

    let extractor = cfg.train.extractor.build();
    let settings = EvalSettings {
        peak: cfg.eval.peak,
        region: cfg.eval.region,
        extractor: extractor.as_ref(),
        lpips_weights: LpipsWeights::default(),
    };
    let mut gts = Vec::with_capacity(clips.len());
    for dir in &gt_dirs {
        gts.push(read_clip(dir, None)?);
    }
    let (mask_frame, mask_desc) = mask_for(cfg, gts[0].h(), gts[0].w())?;
    let mut models = Vec::with_capacity(preds.len());
    for (label, root) in &preds {
        let mut rows = Vec::with_capacity(clips.len());
        for ((name, _), gt) in clips.iter().zip(&gts) {
            let dir = if single { root.clone() } else { root.join(name) };
            let pred = read_clip(&dir, None)?;
            let mask = MaskSequence::repeat_frame(&mask_frame.frame(0), gt.t())?;
            rows.push((name.clone(), pred.into_tensor(), gt.tensor().clone(), mask.tensor().clone()));
        }
        models.push(evaluate_model(label, &rows, &settings)?);
    }
    let report = MetricsReport {
        extractor: cfg.train.extractor.describe(),
        region: cfg.eval.region,
        mask: mask_desc,
        models,
    };
    let text = render_report(&report, cfg.eval.per_clip);
    print!("{text}");
    let write = |name: &str, body: &str| -> Result<(), CliError> {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| CliError::data(format!("cannot write {}: {e}", p.display())))
    };
    write("report.txt", &text)?;
    write("report.json", &report_json(&report)?)?;
    let plots = render_bar_plots(&report, &out.join("plots"))?;
    info!("report written to {} ({} plots)", out.display(), plots.len());
    Ok(())
}
