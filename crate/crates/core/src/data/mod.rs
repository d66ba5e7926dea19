//! Video clips, HMD occlusion masks, reference frames and batch assembly.

mod batch;
pub mod io;
mod manifest;
pub mod synthetic;

pub use batch::{assemble_batch, BatchOptions, Dataset, LoadedClip};
pub use manifest::{ClipEntry, ClipManifest, Split};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `T`-frame RGB clip with values in `[0, 1]`, stored channel-first as
/// `[T, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    fps: Option<f64>,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 4 || frames.dim(0) == 0 || frames.dim(1) != 3 {
            return Err(Error::Shape(format!(
                "video clip must be [T>=1, 3, H, W], got {:?}",
                frames.shape()
            )));
        }
        if let Some(bad) = frames.data().iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidInput(format!(
                "video clip value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { frames, fps: None })
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = Some(fps);
        self
    }

    pub fn fps(&self) -> Option<f64> {
        self.fps
    }

    pub fn t(&self) -> usize {
        self.frames.dim(0)
    }
    pub fn h(&self) -> usize {
        self.frames.dim(2)
    }
    pub fn w(&self) -> usize {
        self.frames.dim(3)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    /// Frame `t` as `[3, H, W]`.
    pub fn frame(&self, t: usize) -> Tensor {
        self.frames
            .narrow(0, t, 1)
            .reshape(&[3, self.h(), self.w()])
            .expect("frame reshape")
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.t() {
            return Err(Error::InvalidInput(format!(
                "window [{start}, {}) outside a {}-frame clip",
                start + len,
                self.t()
            )));
        }
        Ok(Self {
            frames: self.frames.narrow(0, start, len),
            fps: self.fps,
        })
    }
}

/// Per-frame binary occlusion masks, `[T, 1, H, W]`, 1 = occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSequence {
    masks: Tensor,
}

impl MaskSequence {
    pub fn new(masks: Tensor) -> Result<Self> {
        if masks.ndim() != 4 || masks.dim(0) == 0 || masks.dim(1) != 1 {
            return Err(Error::Shape(format!(
                "mask sequence must be [T>=1, 1, H, W], got {:?}",
                masks.shape()
            )));
        }
        if masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { masks })
    }

    /// Repeats an `[H, W]` mask over `t` frames.
    pub fn repeat_frame(mask: &Tensor, t: usize) -> Result<Self> {
        if mask.ndim() != 2 {
            return Err(Error::Shape(format!("mask frame must be [H, W], got {:?}", mask.shape())));
        }
        let (h, w) = (mask.dim(0), mask.dim(1));
        let mut data = Vec::with_capacity(t * h * w);
        for _ in 0..t {
            data.extend_from_slice(mask.data());
        }
        Self::new(Tensor::new(&[t, 1, h, w], data)?)
    }

    pub fn t(&self) -> usize {
        self.masks.dim(0)
    }
    pub fn h(&self) -> usize {
        self.masks.dim(2)
    }
    pub fn w(&self) -> usize {
        self.masks.dim(3)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.masks
    }

    /// Frame `t` as `[H, W]`.
    pub fn frame(&self, t: usize) -> Tensor {
        self.masks.narrow(0, t, 1).reshape(&[self.h(), self.w()]).expect("mask reshape")
    }

    /// Every frame equals frame 0.
    pub fn is_static(&self) -> bool {
        let plane = self.h() * self.w();
        let first = &self.masks.data()[..plane];
        self.masks.data().chunks(plane).all(|f| f == first)
    }

    pub fn area_fraction(&self) -> f64 {
        self.masks.mean()
    }

    fn check_against(&self, t: usize, h: usize, w: usize) -> Result<()> {
        if (self.t(), self.h(), self.w()) != (t, h, w) {
            return Err(Error::Shape(format!(
                "mask is {}x{}x{}, clip is {t}x{h}x{w}",
                self.t(),
                self.h(),
                self.w()
            )));
        }
        Ok(())
    }
}

/// Rounded-rectangle occluder, in fractions of the frame size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskGeometry {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
    /// Corner radius as a fraction of `min(H, W)`.
    pub corner_radius: f64,
}

impl Default for MaskGeometry {
    fn default() -> Self {
        Self {
            top: 0.25,
            bottom: 0.55,
            left: 0.15,
            right: 0.85,
            corner_radius: 0.05,
        }
    }
}

impl MaskGeometry {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !(unit(self.top) && unit(self.bottom) && unit(self.left) && unit(self.right))
            || self.top > self.bottom
            || self.left > self.right
            || !(self.corner_radius.is_finite() && self.corner_radius >= 0.0)
        {
            return Err(Error::Config(format!("mask geometry out of bounds: {self:?}")));
        }
        Ok(())
    }
}

/// Single-frame HMD mask covering the upper-face band.
pub fn make_hmd_mask(h: usize, w: usize, geom: &MaskGeometry) -> Result<MaskSequence> {
    geom.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("mask size {h}x{w} must be positive")));
    }
    let (y0, y1) = (geom.top * h as f64, geom.bottom * h as f64);
    let (x0, x1) = (geom.left * w as f64, geom.right * w as f64);
    let r = (geom.corner_radius * h.min(w) as f64)
        .min((y1 - y0) / 2.0)
        .min((x1 - x0) / 2.0);
    let mut mask = Tensor::zeros(&[1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if py < y0 || py > y1 || px < x0 || px > x1 {
                continue;
            }
            // Distance from the nearest corner-circle centre, if in a corner box.
            let cy = py.clamp(y0 + r, y1 - r);
            let cx = px.clamp(x0 + r, x1 - r);
            let inside = (py - cy).powi(2) + (px - cx).powi(2) <= r * r;
            if inside {
                mask.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    MaskSequence::new(mask)
}

/// Zeroes the occluded pixels of every frame.
pub fn apply_mask(clip: &VideoClip, mask: &MaskSequence) -> Result<VideoClip> {
    mask.check_against(clip.t(), clip.h(), clip.w())?;
    let plane = clip.h() * clip.w();
    let mut out = clip.frames.clone();
    for t in 0..clip.t() {
        let m = &mask.masks.data()[t * plane..(t + 1) * plane];
        for c in 0..3 {
            let base = (t * 3 + c) * plane;
            for (v, &mv) in out.data_mut()[base..base + plane].iter_mut().zip(m) {
                if mv == 1.0 {
                    *v = 0.0;
                }
            }
        }
    }
    VideoClip::new(out)
}

/// `clip[index] ⊙ mask[index]`: the reference keeps only the occluded region.
pub fn prepare_reference(clip: &VideoClip, mask: &MaskSequence, index: usize) -> Result<Tensor> {
    mask.check_against(clip.t(), clip.h(), clip.w())?;
    if index >= clip.t() {
        return Err(Error::InvalidInput(format!(
            "reference index {index} outside a {}-frame clip",
            clip.t()
        )));
    }
    masked_reference(&clip.frame(index), &mask.frame(index))
}

/// Zeroes a `[3, H, W]` image outside an `[H, W]` mask.
pub fn masked_reference(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (h, w) = (mask.dim(0), mask.dim(1));
    if image.shape() != [3, h, w] {
        return Err(Error::Shape(format!(
            "reference image {:?} does not match mask {h}x{w}",
            image.shape()
        )));
    }
    let mut out = image.clone();
    for c in 0..3 {
        for (v, &m) in out.data_mut()[c * h * w..(c + 1) * h * w].iter_mut().zip(mask.data()) {
            if m != 1.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
