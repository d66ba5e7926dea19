//! 68-point facial landmarks and their contour rasters.
//!
//! Points follow the usual 68-point annotation order: jaw 0–16, brows
//! 17–26, nose 27–35, eyes 36–47, mouth 48–67. Contours join consecutive
//! points inside each group; eyes and lips are closed loops.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 68;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LandmarkGroup {
    pub name: &'static str,
    pub first: usize,
    pub last: usize,
    pub closed: bool,
}

impl LandmarkGroup {
    const fn new(name: &'static str, first: usize, last: usize, closed: bool) -> Self {
        Self {
            name,
            first,
            last,
            closed,
        }
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index pairs joined by a segment.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let open = (self.first..self.last).map(|i| (i, i + 1));
        let close = self.closed.then_some((self.last, self.first));
        open.chain(close)
    }
}

pub const GROUPS: [LandmarkGroup; 9] = [
    LandmarkGroup::new("jaw", 0, 16, false),
    LandmarkGroup::new("right_brow", 17, 21, false),
    LandmarkGroup::new("left_brow", 22, 26, false),
    LandmarkGroup::new("nose_bridge", 27, 30, false),
    LandmarkGroup::new("nose_base", 31, 35, false),
    LandmarkGroup::new("right_eye", 36, 41, true),
    LandmarkGroup::new("left_eye", 42, 47, true),
    LandmarkGroup::new("outer_lip", 48, 59, true),
    LandmarkGroup::new("inner_lip", 60, 67, true),
];

/// Total number of contour segments drawn for one face.
pub fn segment_count() -> usize {
    GROUPS.iter().map(|g| g.segments().count()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
    confidence: Option<Vec<f64>>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidInput(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        Ok(Self {
            points,
            confidence: None,
        })
    }

    pub fn with_confidence(mut self, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != NUM_LANDMARKS || confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput(
                "confidence needs 68 values in [0, 1]".into(),
            ));
        }
        self.confidence = Some(confidence);
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn confidence(&self) -> Option<&[f64]> {
        self.confidence.as_deref()
    }

    /// Per-point flag: does the point fall outside an `h × w` frame?
    pub fn out_of_frame(&self, h: usize, w: usize) -> Vec<bool> {
        self.points
            .iter()
            .map(|p| p.x < 0 || p.y < 0 || p.x >= w as i32 || p.y >= h as i32)
            .collect()
    }

    pub fn translated(&self, dx: i32, dy: i32) -> Self {
        Self {
            points: self.points.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect(),
            confidence: self.confidence.clone(),
        }
    }
}

/// Integer Bresenham line from `a` to `b`, both endpoints included.
pub fn bresenham(a: Point, b: Point) -> Vec<Point> {
    let (mut x, mut y) = (a.x, a.y);
    let dx = (b.x - a.x).abs();
    let dy = -(b.y - a.y).abs();
    let sx = if a.x < b.x { 1 } else { -1 };
    let sy = if a.y < b.y { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push(Point::new(x, y));
        if x == b.x && y == b.y {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterStyle {
    /// Hard `{0, 1}` lines.
    #[default]
    Binary,
    /// Lines at 1 with a half-intensity one-pixel fringe.
    AntiAliased,
}

/// A single-channel `H × W` contour raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkMap {
    raster: Tensor,
}

impl LandmarkMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            raster: Tensor::zeros(&[h, w]),
        }
    }

    pub fn h(&self) -> usize {
        self.raster.dim(0)
    }

    pub fn w(&self) -> usize {
        self.raster.dim(1)
    }

    pub fn raster(&self) -> &Tensor {
        &self.raster
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.raster.data()[y * self.w() + x]
    }
}

pub fn rasterize_contours(lm: &LandmarkSet, h: usize, w: usize) -> Result<LandmarkMap> {
    rasterize_contours_with(lm, h, w, RasterStyle::Binary)
}

pub fn rasterize_contours_with(lm: &LandmarkSet, h: usize, w: usize, style: RasterStyle) -> Result<LandmarkMap> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("raster size {h}x{w} must be positive")));
    }
    let mut map = LandmarkMap::zeros(h, w);
    let (hi, wi) = (h as i32, w as i32);
    let data = map.raster.data_mut();
    let mut put = |x: i32, y: i32, v: f64| {
        if x >= 0 && y >= 0 && x < wi && y < hi {
            let cell = &mut data[(y * wi + x) as usize];
            *cell = cell.max(v);
        }
    };
    let pts = lm.points();
    for group in &GROUPS {
        for (i, j) in group.segments() {
            for p in bresenham(pts[i], pts[j]) {
                if style == RasterStyle::AntiAliased {
                    for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                        put(p.x + dx, p.y + dy, 0.5);
                    }
                }
                put(p.x, p.y, 1.0);
            }
        }
    }
    Ok(map)
}

/// Stacks per-frame landmark sets into a `[T, 1, H, W]` raster tensor.
///
/// A frame without a detection reuses the most recent earlier detection in
/// the clip; when there is none the frame gets an empty raster. The returned
/// indices are the frames that fell back to an empty raster.
pub fn landmark_maps_with_fallback(
    sets: &[Option<LandmarkSet>],
    h: usize,
    w: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let mut out = Tensor::zeros(&[sets.len(), 1, h, w]);
    let mut last: Option<&LandmarkSet> = None;
    let mut empty = Vec::new();
    for (t, set) in sets.iter().enumerate() {
        if let Some(s) = set {
            last = Some(s);
        }
        match last {
            Some(s) => {
                let map = rasterize_contours(s, h, w)?;
                out.data_mut()[t * h * w..(t + 1) * h * w].copy_from_slice(map.raster.data());
            }
            None => {
                log::warn!("frame {t}: no landmarks and no earlier detection; using an empty landmark map");
                empty.push(t);
            }
        }
    }
    Ok((out, empty))
}

/// Why a provider returned no landmarks.
#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("no face detected")]
    NoFace,
    #[error(transparent)]
    Failed(#[from] Error),
}

/// Source of 68-point landmarks for an RGB frame (`[3, H, W]`, values in `[0, 1]`).
pub trait LandmarkProvider {
    fn name(&self) -> &str;

    fn detect(&self, frame: &Tensor) -> std::result::Result<LandmarkSet, DetectError>;

    /// Whether `detect` may be called concurrently.
    fn thread_safe(&self) -> bool {
        false
    }
}

struct Serialized<P>(Mutex<P>);

impl<P: LandmarkProvider> LandmarkProvider for Serialized<P> {
    fn name(&self) -> &str {
        "serialized"
    }

    fn detect(&self, frame: &Tensor) -> std::result::Result<LandmarkSet, DetectError> {
        let guard = self.0.lock().map_err(|_| Error::InvalidInput("landmark provider lock poisoned".into()))?;
        guard.detect(frame)
    }

    fn thread_safe(&self) -> bool {
        true
    }
}

struct Shared<P>(P);

impl<P: LandmarkProvider> LandmarkProvider for Shared<P> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn detect(&self, frame: &Tensor) -> std::result::Result<LandmarkSet, DetectError> {
        self.0.detect(frame)
    }

    fn thread_safe(&self) -> bool {
        true
    }
}

/// Wraps a provider for shared use, serializing calls unless it declares
/// itself thread-safe.
pub fn shared_provider<P>(provider: P) -> Arc<dyn LandmarkProvider + Send + Sync>
where
    P: LandmarkProvider + Send + Sync + 'static,
{
    if provider.thread_safe() {
        Arc::new(Shared(provider))
    } else {
        Arc::new(Serialized(Mutex::new(provider)))
    }
}

fn frame_key(frame: &Tensor) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    frame.shape().hash(&mut h);
    for v in frame.data() {
        ((v * 255.0).round() as i64).hash(&mut h);
    }
    h.finish()
}

/// Provider for rendered synthetic faces: it knows the exact landmarks of
/// every frame it was shown at construction time and reports no face for
/// anything else.
#[derive(Clone, Debug, Default)]
pub struct SyntheticProvider {
    known: HashMap<u64, LandmarkSet>,
}

impl SyntheticProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, frame: &Tensor, landmarks: LandmarkSet) {
        self.known.insert(frame_key(frame), landmarks);
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }
}

impl LandmarkProvider for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn detect(&self, frame: &Tensor) -> std::result::Result<LandmarkSet, DetectError> {
        self.known.get(&frame_key(frame)).cloned().ok_or(DetectError::NoFace)
    }

    fn thread_safe(&self) -> bool {
        true
    }
}

pub fn detect_landmarks(frame: &Tensor, provider: &dyn LandmarkProvider) -> std::result::Result<LandmarkSet, DetectError> {
    if frame.ndim() != 3 || frame.dim(0) != 3 || !frame.all_finite() {
        return Err(DetectError::Failed(Error::InvalidInput(format!(
            "expected a finite [3, H, W] frame, got {:?}",
            frame.shape()
        ))));
    }
    provider.detect(frame)
}

/// Renders landmark sets in the plain-text landmark file format: one line
/// per frame, `index,x0,y0,...,x67,y67`, or `index,none` for a frame without
/// a detection.
pub fn format_landmark_file(sets: &[Option<LandmarkSet>]) -> String {
    let mut out = String::new();
    for (i, s) in sets.iter().enumerate() {
        let _ = write!(out, "{i}");
        match s {
            Some(s) => {
                for p in s.points() {
                    let _ = write!(out, ",{},{}", p.x, p.y);
                }
            }
            None => out.push_str(",none"),
        }
        out.push('\n');
    }
    out
}

pub fn parse_landmark_file(text: &str) -> Result<Vec<Option<LandmarkSet>>> {
    let mut out: Vec<Option<LandmarkSet>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::InvalidInput(format!("landmark file line {}: {what}", lineno + 1));
        let mut fields = line.split(',').map(str::trim);
        let idx: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("missing frame index"))?;
        if idx != out.len() {
            return Err(bad(&format!("expected frame index {}, found {idx}", out.len())));
        }
        let rest: Vec<&str> = fields.collect();
        if rest == ["none"] {
            out.push(None);
            continue;
        }
        if rest.len() != 2 * NUM_LANDMARKS {
            return Err(bad(&format!("expected {} coordinates, found {}", 2 * NUM_LANDMARKS, rest.len())));
        }
        let coords: Vec<i32> = rest
            .iter()
            .map(|f| f.parse().map_err(|_| bad(&format!("bad coordinate {f:?}"))))
            .collect::<Result<_>>()?;
        let points = coords.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
        out.push(Some(LandmarkSet::new(points)?));
    }
    Ok(out)
}

pub fn read_landmark_file(path: &Path) -> Result<Vec<Option<LandmarkSet>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmark_file(&text)
}

pub fn write_landmark_file(path: &Path, sets: &[Option<LandmarkSet>]) -> Result<()> {
    std::fs::write(path, format_landmark_file(sets)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn face(points: impl Fn(usize) -> Point) -> LandmarkSet {
        LandmarkSet::new((0..NUM_LANDMARKS).map(points).collect()).unwrap()
    }

    fn ring(i: usize) -> Point {
        let a = i as f64 / NUM_LANDMARKS as f64 * std::f64::consts::TAU;
        Point::new(32 + (20.0 * a.cos()).round() as i32, 32 + (14.0 * (3.0 * a).sin()).round() as i32)
    }

    #[test]
    fn segment_count_from_scheme() {
        // Open groups contribute len - 1 segments, closed loops len.
        let expected: usize = GROUPS
            .iter()
            .map(|g| if g.closed { g.len() } else { g.len() - 1 })
            .sum();
        assert_eq!(segment_count(), expected);
        assert_eq!(segment_count(), 63);
        let covered: usize = GROUPS.iter().map(LandmarkGroup::len).sum();
        assert_eq!(covered, NUM_LANDMARKS);
    }

    #[test]
    fn vertical_segment_pixels() {
        // Everything collapsed onto (0, 0) except one jaw point at (0, 5).
        let lm = face(|i| if i == 1 { Point::new(0, 5) } else { Point::new(0, 0) });
        let map = rasterize_contours(&lm, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let on = x == 0 && y <= 5;
                assert_eq!(map.get(y, x), if on { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }
        assert_eq!(map.raster().sum(), 6.0);
    }

    #[test]
    fn degenerate_face_is_single_pixel() {
        let lm = face(|_| Point::new(3, 4));
        let map = rasterize_contours(&lm, 8, 8).unwrap();
        assert_eq!(map.raster().sum(), 1.0);
        assert_eq!(map.get(4, 3), 1.0);
    }

    #[test]
    fn raster_sum_counts_distinct_segment_pixels() {
        let lm = face(ring);
        let map = rasterize_contours(&lm, 64, 64).unwrap();
        let mut pixels = HashSet::new();
        for g in &GROUPS {
            for (i, j) in g.segments() {
                pixels.extend(bresenham(lm.points()[i], lm.points()[j]));
            }
        }
        assert_eq!(map.raster().sum(), pixels.len() as f64);
        assert_eq!(map, rasterize_contours(&lm, 64, 64).unwrap());
    }

    #[test]
    fn anti_aliased_values_stay_in_unit_interval() {
        let map = rasterize_contours_with(&face(ring), 64, 64, RasterStyle::AntiAliased).unwrap();
        assert!(map.raster().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.raster().data().contains(&0.5));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(LandmarkSet::new(vec![Point::new(0, 0); 5]).is_err());
        assert!(rasterize_contours(&face(ring), 0, 4).is_err());
    }

    #[test]
    fn out_of_frame_flags() {
        let lm = face(|i| if i == 7 { Point::new(-1, 3) } else { Point::new(2, 2) });
        let flags = lm.out_of_frame(4, 4);
        assert!(flags[7]);
        assert_eq!(flags.iter().filter(|f| **f).count(), 1);
    }

    #[test]
    fn fallback_reuses_previous_detection() {
        let a = face(ring);
        let sets = vec![None, Some(a.clone()), None];
        let (maps, empty) = landmark_maps_with_fallback(&sets, 64, 64).unwrap();
        assert_eq!(empty, vec![0]);
        let plane = 64 * 64;
        assert!(maps.data()[..plane].iter().all(|v| *v == 0.0));
        assert_eq!(maps.data()[plane..2 * plane], maps.data()[2 * plane..]);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let sets = vec![Some(face(ring)), None, Some(face(|i| Point::new(i as i32, 1)))];
        let text = format_landmark_file(&sets);
        assert_eq!(parse_landmark_file(&text).unwrap(), sets);
        assert!(parse_landmark_file("0,1,2\n").is_err());
        assert!(parse_landmark_file("1,none\n").is_err());
    }

    #[test]
    fn synthetic_provider_contract() {
        let frame = Tensor::from_fn(&[3, 4, 4], |i| (i % 7) as f64 / 7.0);
        let mut p = SyntheticProvider::new();
        p.register(&frame, face(ring));
        assert_eq!(detect_landmarks(&frame, &p).unwrap(), face(ring));
        assert_eq!(detect_landmarks(&frame, &p).unwrap(), detect_landmarks(&frame, &p).unwrap());
        let blank = Tensor::zeros(&[3, 4, 4]);
        assert!(matches!(detect_landmarks(&blank, &p), Err(DetectError::NoFace)));
        let shared = shared_provider(p);
        assert!(shared.detect(&frame).is_ok());
    }

    proptest! {
        #[test]
        fn translation_commutes_with_rasterization(dx in -6i32..6, dy in -6i32..6, seed in 0u64..1000) {
            // Keep every point at least 6 px inside a 40x40 frame so nothing clips.
            let lm = face(|i| {
                let v = (seed as usize * 31 + i * 17) % 529;
                Point::new(6 + (v % 23) as i32 + (i % 5) as i32, 6 + (v / 23) as i32)
            });
            let (h, w) = (40usize, 40usize);
            let a = rasterize_contours(&lm, h, w).unwrap();
            let b = rasterize_contours(&lm.translated(dx, dy), h, w).unwrap();
            for y in 0..h as i32 {
                for x in 0..w as i32 {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && sx < w as i32 && sy < h as i32 {
                        prop_assert_eq!(a.get(y as usize, x as usize), b.get(sy as usize, sx as usize));
                    }
                }
            }
        }
    }
}
