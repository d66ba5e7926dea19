//! Generator inputs and frame batches.

use crate::autograd::{Graph, Var};
use crate::data::{apply_mask, MaskSequence, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channels of the stacked generator input: masked RGB, mask, landmark
/// raster, reference RGB.
pub const INPUT_CHANNELS: usize = 8;

/// Everything the generator sees for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInput {
    /// Frames with the occluded region zeroed, `[T, 3, H, W]`.
    pub masked: VideoClip,
    pub mask: MaskSequence,
    /// Landmark contour rasters, `[T, 1, H, W]`.
    pub landmarks: Tensor,
    /// Reference image restricted to the occluded region, `[3, H, W]`.
    pub reference: Tensor,
}

impl GeneratorInput {
    pub fn new(masked: VideoClip, mask: MaskSequence, landmarks: Tensor, reference: Tensor) -> Result<Self> {
        let (t, h, w) = (masked.t(), masked.h(), masked.w());
        if (mask.t(), mask.h(), mask.w()) != (t, h, w) {
            return Err(Error::Shape(format!(
                "mask {:?} does not match {t} frames of {h}x{w}",
                mask.tensor().shape()
            )));
        }
        if landmarks.shape() != [t, 1, h, w] {
            return Err(Error::Shape(format!(
                "landmark rasters {:?} do not match {t} frames of {h}x{w}",
                landmarks.shape()
            )));
        }
        if reference.shape() != [3, h, w] {
            return Err(Error::Shape(format!(
                "reference {:?} does not match {h}x{w}",
                reference.shape()
            )));
        }
        Ok(Self {
            masked,
            mask,
            landmarks,
            reference,
        })
    }

    /// Masks `clip` and bundles it with the other conditioning inputs.
    pub fn from_clip(clip: &VideoClip, mask: &MaskSequence, landmarks: Tensor, reference: Tensor) -> Result<Self> {
        Self::new(apply_mask(clip, mask)?, mask.clone(), landmarks, reference)
    }

    pub fn t(&self) -> usize {
        self.masked.t()
    }
    pub fn h(&self) -> usize {
        self.masked.h()
    }
    pub fn w(&self) -> usize {
        self.masked.w()
    }

    /// Same input with an all-zero landmark channel.
    pub fn without_landmarks(mut self) -> Self {
        self.landmarks = Tensor::zeros(self.landmarks.shape());
        self
    }

    /// `[T, 8, H, W]`, channels in [`INPUT_CHANNELS`] order.
    pub fn to_tensor(&self) -> Tensor {
        let (t, h, w) = (self.t(), self.h(), self.w());
        let plane = h * w;
        let mut out = Vec::with_capacity(t * INPUT_CHANNELS * plane);
        for f in 0..t {
            out.extend_from_slice(&self.masked.tensor().data()[f * 3 * plane..(f + 1) * 3 * plane]);
            out.extend_from_slice(&self.mask.tensor().data()[f * plane..(f + 1) * plane]);
            out.extend_from_slice(&self.landmarks.data()[f * plane..(f + 1) * plane]);
            out.extend_from_slice(self.reference.data());
        }
        Tensor::new(&[t, INPUT_CHANNELS, h, w], out).expect("input layout")
    }
}

/// `N` clips of `T` frames each, stacked frame-major as `[N·T, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBatch {
    pub n: usize,
    pub t: usize,
    pub input: Tensor,
    /// Masked frames, `[N·T, 3, H, W]`.
    pub masked: Tensor,
    /// Masks broadcast to three channels, `[N·T, 3, H, W]`.
    pub mask3: Tensor,
    /// Single-channel masks, `[N·T, 1, H, W]`.
    pub mask: Tensor,
    /// Ground-truth frames when known, `[N·T, 3, H, W]`.
    pub target: Option<Tensor>,
    /// Where each sample came from, for diagnostics.
    pub sources: Vec<String>,
}

impl GeneratorBatch {
    pub fn from_inputs(inputs: &[GeneratorInput], targets: Option<&[VideoClip]>) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let (t, h, w) = (first.t(), first.h(), first.w());
        if inputs.iter().any(|i| (i.t(), i.h(), i.w()) != (t, h, w)) {
            return Err(Error::Shape("batch inputs differ in length or size".into()));
        }
        let n = inputs.len();
        let stack = |parts: Vec<Tensor>| -> Result<Tensor> {
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::concat(&refs, 0)
        };
        let input = stack(inputs.iter().map(GeneratorInput::to_tensor).collect())?;
        let masked = stack(inputs.iter().map(|i| i.masked.tensor().clone()).collect())?;
        let mask = stack(inputs.iter().map(|i| i.mask.tensor().clone()).collect())?;
        let target = match targets {
            Some(ts) => {
                if ts.len() != n || ts.iter().any(|c| (c.t(), c.h(), c.w()) != (t, h, w)) {
                    return Err(Error::Shape("targets do not match the batch inputs".into()));
                }
                Some(stack(ts.iter().map(|c| c.tensor().clone()).collect())?)
            }
            None => None,
        };
        Ok(Self {
            n,
            t,
            input,
            masked,
            mask3: broadcast_mask(&mask),
            mask,
            target,
            sources: Vec::new(),
        })
    }

    pub fn frames(&self) -> usize {
        self.n * self.t
    }
}

/// `[B, 1, H, W]` to `[B, 3, H, W]`.
pub fn broadcast_mask(mask: &Tensor) -> Tensor {
    let (b, h, w) = (mask.dim(0), mask.dim(2), mask.dim(3));
    let plane = h * w;
    let mut out = Vec::with_capacity(b * 3 * plane);
    for f in 0..b {
        for _ in 0..3 {
            out.extend_from_slice(&mask.data()[f * plane..(f + 1) * plane]);
        }
    }
    Tensor::new(&[b, 3, h, w], out).expect("mask layout")
}

/// `mask ⊙ raw + (1 − mask) ⊙ masked`: generated pixels inside the
/// occlusion, observed pixels elsewhere.
pub fn composite_graph(g: &mut Graph, raw: Var, masked: &Tensor, mask3: &Tensor) -> Result<Var> {
    let m = g.constant(mask3.clone());
    let keep = g.constant(masked.zip_map(mask3, |x, m| x * (1.0 - m))?);
    let inside = g.mul(raw, m)?;
    g.add(inside, keep)
}

pub fn composite_output(raw: &Tensor, masked: &Tensor, mask3: &Tensor) -> Result<Tensor> {
    raw.expect_same_shape(masked)?;
    raw.expect_same_shape(mask3)?;
    let data = raw
        .data()
        .iter()
        .zip(masked.data())
        .zip(mask3.data())
        .map(|((r, x), m)| m * r + (1.0 - m) * x)
        .collect();
    Tensor::new(raw.shape(), data)
}
