//! Parametric cartoon faces with known 68-point landmarks.
//!
//! Each clip is one face whose head drifts slowly while it blinks, smiles,
//! opens its mouth and raises its brows on independent periodic schedules.
//! Frames are rendered from the same floating-point landmark geometry that
//! is written to the landmark files (rounded to integer pixels), so the
//! files are exact ground truth for the synthetic provider.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{quantize_tensor, write_clip};
use super::manifest::{ClipEntry, ClipManifest, Split};
use super::VideoClip;
use crate::error::{Error, Result};
use crate::landmarks::{write_landmark_file, LandmarkSet, Point, SyntheticProvider, NUM_LANDMARKS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub clips: usize,
    pub frames: usize,
    /// Square frame side in pixels.
    pub size: usize,
    /// The last `test_clips` clips go to the test split.
    pub test_clips: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            clips: 8,
            frames: 16,
            size: 64,
            test_clips: 2,
            seed: 7,
        }
    }
}

/// A periodic schedule `amp * wave(2π (t / period + phase))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub amp: f64,
    pub period: f64,
    pub phase: f64,
}

impl Cycle {
    fn angle(&self, t: f64) -> f64 {
        2.0 * PI * (t / self.period + self.phase)
    }

    fn sample(rng: &mut impl Rng, amp: (f64, f64), period: (f64, f64)) -> Self {
        Self {
            amp: rng.random_range(amp.0..amp.1),
            period: rng.random_range(period.0..period.1),
            phase: rng.random_range(0.0..1.0),
        }
    }
}

/// Identity and motion of one synthetic face; lengths are fractions of the
/// frame side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub lip: [f64; 3],
    pub iris: [f64; 3],
    pub background: [f64; 3],
    pub drift: (Cycle, Cycle),
    pub blink: Cycle,
    pub smile: Cycle,
    pub mouth: Cycle,
    pub brow: Cycle,
}

impl FaceParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut color = |lo: [f64; 3], hi: [f64; 3]| -> [f64; 3] {
            [0, 1, 2].map(|c| rng.random_range(lo[c]..hi[c]))
        };
        let skin = color([0.55, 0.38, 0.28], [0.95, 0.78, 0.66]);
        let hair = color([0.08, 0.05, 0.02], [0.45, 0.32, 0.2]);
        let lip = color([0.6, 0.18, 0.2], [0.85, 0.35, 0.38]);
        let iris = color([0.1, 0.15, 0.1], [0.35, 0.5, 0.55]);
        let background = color([0.15, 0.2, 0.3], [0.7, 0.8, 0.9]);
        Self {
            center: (rng.random_range(0.46..0.54), rng.random_range(0.48..0.52)),
            radii: (rng.random_range(0.3..0.35), rng.random_range(0.36..0.41)),
            skin,
            hair,
            lip,
            iris,
            background,
            drift: (
                Cycle::sample(rng, (0.005, 0.025), (14.0, 30.0)),
                Cycle::sample(rng, (0.003, 0.015), (14.0, 30.0)),
            ),
            blink: Cycle::sample(rng, (0.9, 1.0), (6.0, 11.0)),
            smile: Cycle::sample(rng, (0.3, 1.0), (8.0, 20.0)),
            mouth: Cycle::sample(rng, (0.4, 1.0), (5.0, 12.0)),
            brow: Cycle::sample(rng, (0.3, 1.0), (7.0, 16.0)),
        }
    }

    pub fn expression_at(&self, t: usize) -> Expression {
        let t = t as f64;
        let closed = self.blink.amp * self.blink.angle(t).cos().max(0.0).powi(8);
        Expression {
            eye_open: 1.0 - closed,
            smile: self.smile.amp * self.smile.angle(t).sin(),
            mouth_open: self.mouth.amp * self.mouth.angle(t).sin().max(0.0),
            brow_raise: self.brow.amp * self.brow.angle(t).sin(),
        }
    }

    pub fn state_at(&self, t: usize, size: usize) -> FaceState {
        let s = size as f64;
        let tf = t as f64;
        FaceState {
            cx: s * (self.center.0 + self.drift.0.amp * self.drift.0.angle(tf).sin()),
            cy: s * (self.center.1 + self.drift.1.amp * self.drift.1.angle(tf).sin()),
            rx: s * self.radii.0,
            ry: s * self.radii.1,
            expr: self.expression_at(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Expression {
    /// 1 = fully open, 0 = closed.
    pub eye_open: f64,
    /// Signed: positive lifts the mouth corners.
    pub smile: f64,
    pub mouth_open: f64,
    pub brow_raise: f64,
}

/// Pixel-space head placement and expression of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceState {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub expr: Expression,
}

type P2 = (f64, f64);

/// Floating-point landmark geometry in the 68-point order.
pub fn face_points(s: &FaceState) -> [P2; NUM_LANDMARKS] {
    let e = s.expr;
    let (cx, cy, rx, ry) = (s.cx, s.cy, s.rx, s.ry);
    let mut p = [(0.0, 0.0); NUM_LANDMARKS];

    for (i, q) in p[0..17].iter_mut().enumerate() {
        let th = -0.2 + i as f64 * (PI + 0.4) / 16.0;
        let drop = 1.0 + 0.06 * e.mouth_open * th.sin().max(0.0);
        *q = (cx - rx * th.cos(), cy + ry * th.sin() * drop);
    }
    for j in 0..5 {
        let u = j as f64 / 4.0;
        let y = cy - ry * (0.42 + 0.08 * e.brow_raise + 0.06 * (PI * u).sin());
        p[17 + j] = (cx - rx * (0.62 - 0.45 * u), y);
        p[22 + j] = (cx + rx * (0.17 + 0.45 * u), y);
    }
    for j in 0..4 {
        p[27 + j] = (cx, cy - ry * (0.3 - 0.12 * j as f64));
    }
    for j in 0..5 {
        let bump = 1.0 - (j as f64 - 2.0).abs() / 2.0;
        p[31 + j] = (cx + rx * (-0.16 + 0.08 * j as f64), cy + ry * (0.12 + 0.04 * bump));
    }

    let (hw, hh) = (0.16 * rx, 0.11 * ry * e.eye_open);
    let ey = cy - 0.2 * ry;
    let eye = |ex: f64| -> [P2; 6] {
        [
            (ex - hw, ey),
            (ex - hw / 3.0, ey - hh),
            (ex + hw / 3.0, ey - hh),
            (ex + hw, ey),
            (ex + hw / 3.0, ey + hh),
            (ex - hw / 3.0, ey + hh),
        ]
    };
    p[36..42].copy_from_slice(&eye(cx - 0.36 * rx));
    p[42..48].copy_from_slice(&eye(cx + 0.36 * rx));

    let (mx, my) = (cx, cy + 0.48 * ry);
    let hw = 0.3 * rx * (1.0 + 0.2 * e.smile);
    let corner = my - 0.08 * ry * e.smile;
    let hu = 0.09 * ry;
    let hl = 0.09 * ry + 0.12 * ry * e.mouth_open;
    let outer = [
        (mx - hw, corner),
        (mx - 0.6 * hw, my - 0.8 * hu),
        (mx - 0.25 * hw, my - hu),
        (mx, my - 0.85 * hu),
        (mx + 0.25 * hw, my - hu),
        (mx + 0.6 * hw, my - 0.8 * hu),
        (mx + hw, corner),
        (mx + 0.6 * hw, my + 0.85 * hl),
        (mx + 0.25 * hw, my + hl),
        (mx, my + hl),
        (mx - 0.25 * hw, my + hl),
        (mx - 0.6 * hw, my + 0.85 * hl),
    ];
    p[48..60].copy_from_slice(&outer);

    let iw = 0.75 * hw;
    let ic = my - 0.06 * ry * e.smile;
    let open = 0.12 * ry * e.mouth_open;
    let top = my - 0.25 * hu;
    let inner = [
        (mx - iw, ic),
        (mx - 0.4 * iw, top),
        (mx, top - 0.05 * hu),
        (mx + 0.4 * iw, top),
        (mx + iw, ic),
        (mx + 0.4 * iw, top + open),
        (mx, top - 0.05 * hu + open),
        (mx - 0.4 * iw, top + open),
    ];
    p[60..68].copy_from_slice(&inner);
    p
}

pub fn landmarks_of(s: &FaceState) -> LandmarkSet {
    let pts = face_points(s)
        .iter()
        .map(|&(x, y)| Point::new(x.round() as i32, y.round() as i32))
        .collect();
    LandmarkSet::new(pts).expect("68 points")
}

fn inside_polygon(poly: &[P2], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(a: P2, b: P2, x: f64, y: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 == 0.0 {
        0.0
    } else {
        (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((a.0 + u * dx - x).powi(2) + (a.1 + u * dy - y).powi(2)).sqrt()
}

fn polyline_distance(pts: &[P2], x: f64, y: f64) -> f64 {
    pts.windows(2)
        .map(|w| segment_distance(w[0], w[1], x, y))
        .fold(f64::INFINITY, f64::min)
}

/// Renders one `[3, size, size]` frame quantized to 8-bit levels.
pub fn render_face(params: &FaceParams, s: &FaceState, size: usize) -> Tensor {
    let p = face_points(s);
    let e = s.expr;
    let mut img = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let shade = 1.0 + 0.15 * (y / size as f64 - 0.5);
            let mut c = params.background.map(|v| v * shade);

            let hx = (x - s.cx) / (1.06 * s.rx);
            let hy = (y - (s.cy - 0.12 * s.ry)) / (1.02 * s.ry);
            if hx * hx + hy * hy <= 1.0 {
                c = params.hair;
            }
            let fx = (x - s.cx) / s.rx;
            let fy = (y - s.cy) / s.ry;
            let in_face = fx * fx + fy * fy <= 1.0 && !(fy < -0.55 && fx * fx + (fy + 0.2) * (fy + 0.2) > 0.55);
            if in_face {
                let light = 1.0 - 0.18 * fx * fx - 0.05 * fy;
                c = params.skin.map(|v| v * light);

                if polyline_distance(&p[27..31], x, y) <= 0.6 || polyline_distance(&p[31..36], x, y) <= 0.6 {
                    c = params.skin.map(|v| v * 0.72);
                }
                for brow in [&p[17..22], &p[22..27]] {
                    if polyline_distance(brow, x, y) <= 1.0 {
                        c = params.hair;
                    }
                }
                for eye in [&p[36..42], &p[42..48]] {
                    let (ex, ey) = ((eye[0].0 + eye[3].0) / 2.0, eye[0].1);
                    if e.eye_open < 0.25 {
                        if segment_distance(eye[0], eye[3], x, y) <= 0.6 {
                            c = params.hair.map(|v| v * 0.6);
                        }
                    } else if inside_polygon(eye, x, y) {
                        let r = ((x - ex).powi(2) + (y - ey).powi(2)).sqrt();
                        c = if r <= 0.05 * s.rx {
                            [0.05, 0.05, 0.05]
                        } else if r <= 0.09 * s.rx {
                            params.iris
                        } else {
                            [0.94, 0.94, 0.92]
                        };
                    }
                }
                if inside_polygon(&p[48..60], x, y) {
                    c = params.lip;
                    if e.mouth_open > 0.1 && inside_polygon(&p[60..68], x, y) {
                        c = [0.22, 0.06, 0.07];
                    }
                }
            }
            for (ch, v) in c.iter().enumerate() {
                img.data_mut()[ch * plane + yi * size + xi] = v.clamp(0.0, 1.0);
            }
        }
    }
    quantize_tensor(&img)
}

/// One rendered clip together with its generating parameters.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub name: String,
    pub params: FaceParams,
    pub clip: VideoClip,
    pub landmarks: Vec<LandmarkSet>,
    pub expressions: Vec<Expression>,
}

pub fn generate_clip(name: &str, params: &FaceParams, frames: usize, size: usize) -> Result<SyntheticClip> {
    if frames == 0 || size < 16 {
        return Err(Error::Config(format!(
            "synthetic clips need at least one frame and a side of 16 pixels, got {frames} frames of {size}"
        )));
    }
    let mut data = Vec::with_capacity(frames * 3 * size * size);
    let mut landmarks = Vec::with_capacity(frames);
    let mut expressions = Vec::with_capacity(frames);
    for t in 0..frames {
        let s = params.state_at(t, size);
        data.extend_from_slice(render_face(params, &s, size).data());
        landmarks.push(landmarks_of(&s));
        expressions.push(s.expr);
    }
    Ok(SyntheticClip {
        name: name.to_string(),
        params: params.clone(),
        clip: VideoClip::new(Tensor::new(&[frames, 3, size, size], data)?)?,
        landmarks,
        expressions,
    })
}

pub fn clip_name(i: usize) -> String {
    format!("clip_{i:03}")
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SyntheticClip>> {
    if cfg.clips == 0 || cfg.test_clips > cfg.clips {
        return Err(Error::Config(format!(
            "corpus needs at least one clip and no more test clips than clips, got {} / {}",
            cfg.clips, cfg.test_clips
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.clips)
        .map(|i| {
            let params = FaceParams::sample(&mut rng);
            generate_clip(&clip_name(i), &params, cfg.frames, cfg.size)
        })
        .collect()
}

/// Provider that knows every frame of the given clips.
pub fn provider_for(clips: &[SyntheticClip]) -> SyntheticProvider {
    let mut p = SyntheticProvider::new();
    for c in clips {
        for (t, lm) in c.landmarks.iter().enumerate() {
            p.register(&c.clip.frame(t), lm.clone());
        }
    }
    p
}

/// Writes the corpus (frames, landmark files, manifest) under `dir`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<ClipManifest> {
    let clips = generate_corpus(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let frames = PathBuf::from(&c.name);
        write_clip(&dir.join(&frames), &c.clip)?;
        let landmarks = frames.join("landmarks.txt");
        let sets: Vec<Option<LandmarkSet>> = c.landmarks.iter().cloned().map(Some).collect();
        write_landmark_file(&dir.join(&landmarks), &sets)?;
        entries.push(ClipEntry {
            name: c.name.clone(),
            frames,
            landmarks,
            split: if i + cfg.test_clips >= cfg.clips { Split::Test } else { Split::Train },
        });
    }
    let mut manifest = ClipManifest::new(dir, cfg.frames, cfg.size, cfg.size, entries);
    manifest.synthetic = Some(cfg.clone());
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::read_landmark_file;

    fn small() -> CorpusConfig {
        CorpusConfig {
            clips: 3,
            frames: 12,
            size: 48,
            test_clips: 1,
            seed: 3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.landmarks, y.landmarks);
        }
        assert_ne!(a[0].clip, a[1].clip);
    }

    #[test]
    fn expressions_vary_within_a_clip() {
        let c = &generate_corpus(&CorpusConfig::default()).unwrap()[0];
        let opens: Vec<f64> = c.expressions.iter().map(|e| e.eye_open).collect();
        let lo = opens.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(lo < 0.5, "no blink in {opens:?}");
        let mouth: Vec<_> = c.landmarks.iter().map(|l| l.points()[57]).collect();
        assert!(mouth.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn landmarks_stay_in_frame() {
        for c in generate_corpus(&CorpusConfig::default()).unwrap() {
            for lm in &c.landmarks {
                assert!(lm.out_of_frame(64, 64).iter().all(|o| !o));
            }
        }
    }

    #[test]
    fn eyes_are_rendered_inside_their_landmarks() {
        let params = FaceParams::sample(&mut ChaCha8Rng::seed_from_u64(1));
        let mut s = params.state_at(0, 64);
        s.expr.eye_open = 1.0;
        let img = render_face(&params, &s, 64);
        let p = face_points(&s);
        let ex = ((p[36].0 + p[39].0) / 2.0).floor() as usize;
        let ey = p[36].1.floor() as usize;
        // The pupil is near-black; skin never is.
        let v: f64 = (0..3).map(|c| img.data()[c * 4096 + ey * 64 + ex]).sum();
        assert!(v < 0.3, "{v}");
    }

    #[test]
    fn written_corpus_matches_generator() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = write_corpus(dir.path(), &cfg).unwrap();
        m.validate().unwrap();
        let loaded = ClipManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.clips, m.clips);
        assert_eq!(loaded.synthetic, Some(cfg.clone()));
        assert_eq!(loaded.split(Split::Test).count(), 1);
        let clips = generate_corpus(&cfg).unwrap();
        for (entry, c) in loaded.clips.iter().zip(&clips) {
            let sets = read_landmark_file(&loaded.landmarks_path(entry)).unwrap();
            let expect: Vec<_> = c.landmarks.iter().cloned().map(Some).collect();
            assert_eq!(sets, expect);
            let frames = crate::data::io::read_clip(&loaded.frames_dir(entry), None).unwrap();
            assert_eq!(frames, c.clip);
        }
    }

    #[test]
    fn provider_recognises_rendered_frames() {
        use crate::landmarks::{detect_landmarks, DetectError};
        let clips = generate_corpus(&small()).unwrap();
        let p = provider_for(&clips);
        let lm = detect_landmarks(&clips[1].clip.frame(4), &p).unwrap();
        assert_eq!(lm, clips[1].landmarks[4]);
        let blank = Tensor::full(&[3, 48, 48], 0.5);
        assert!(matches!(detect_landmarks(&blank, &p), Err(DetectError::NoFace)));
    }
}
