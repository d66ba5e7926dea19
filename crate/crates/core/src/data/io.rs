//! PNG frame directories and mask images.
//!
//! A clip on disk is a directory of `frame_00000.png`, `frame_00001.png`, ...
//! 8-bit RGB images; values are mapped to `[0, 1]` by dividing by 255. Masks
//! are 8-bit grayscale with 255 for occluded pixels.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};

use super::{MaskSequence, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest multiple of 1/255, as a PNG round trip does.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f64 / 255.0)
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Frame paths of a clip directory, sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("frame_") && name.ends_with(".png") {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

/// Reads a `[3, H, W]` frame.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    if frame.ndim() != 3 || frame.dim(0) != 3 {
        return Err(Error::Shape(format!("frame must be [3, H, W], got {:?}", frame.shape())));
    }
    let (h, w) = (frame.dim(1), frame.dim(2));
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| quantize(frame.data()[(c * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads every frame of a clip directory (or the first `limit`).
pub fn read_clip(dir: &Path, limit: Option<usize>) -> Result<VideoClip> {
    let mut paths = list_frames(dir)?;
    if let Some(n) = limit {
        paths.truncate(n);
    }
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("no frame_*.png files in {}", dir.display())));
    }
    let frames: Vec<Tensor> = paths.iter().map(|p| read_frame(p)).collect::<Result<_>>()?;
    let shape = frames[0].shape().to_vec();
    if let Some((p, f)) = paths.iter().zip(&frames).find(|(_, f)| f.shape() != shape.as_slice()) {
        return Err(Error::Shape(format!(
            "{} is {:?}, earlier frames are {:?}",
            p.display(),
            f.shape(),
            shape
        )));
    }
    let t = frames.len();
    let refs: Vec<&Tensor> = frames.iter().collect();
    let stacked = Tensor::concat(&refs, 0)?.reshape(&[t, 3, shape[1], shape[2]])?;
    VideoClip::new(stacked)
}

pub fn write_clip(dir: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..clip.t() {
        write_frame(&dir.join(frame_file_name(t)), &clip.frame(t))?;
    }
    Ok(())
}

/// Reads a single-frame mask; any value above 127 counts as occluded.
pub fn read_mask(path: &Path) -> Result<MaskSequence> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] > 127 { 1.0 } else { 0.0 }).collect();
    MaskSequence::new(Tensor::new(&[1, 1, h, w], data)?)
}

/// Writes frame 0 of the mask sequence.
pub fn write_mask(path: &Path, mask: &MaskSequence) -> Result<()> {
    let (h, w) = (mask.h(), mask.w());
    let f = mask.frame(0);
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if f.data()[y as usize * w + x as usize] == 1.0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}
