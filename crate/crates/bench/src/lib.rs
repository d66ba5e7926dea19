//! Seeded inputs shared by the benchmarks.

use evi_core::data::{make_hmd_mask, prepare_reference, MaskGeometry, MaskSequence, VideoClip};
use evi_core::networks::{GeneratorBatch, GeneratorInput};
use evi_core::{FeatureMap, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn feature_map(seed: u64, n: usize, t: usize, c: usize, side: usize) -> FeatureMap {
    let data = Tensor::randn(&[n * t, c, side, side], 1.0, &mut rng(seed));
    FeatureMap::new(n, t, data).expect("feature map shape")
}

/// `n` random clips of `t` frames behind the default occluder.
pub fn generator_batch(seed: u64, n: usize, t: usize, side: usize) -> GeneratorBatch {
    let mut r = rng(seed);
    let mask = make_hmd_mask(side, side, &MaskGeometry::default()).expect("mask");
    let frames = MaskSequence::repeat_frame(&mask.frame(0), t).expect("mask frames");
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let clip = VideoClip::new(Tensor::uniform(&[t, 3, side, side], 0.0, 1.0, &mut r)).expect("clip");
        let reference = prepare_reference(&clip, &frames, 0).expect("reference");
        let landmarks = Tensor::uniform(&[t, 1, side, side], 0.0, 1.0, &mut r).map(|v| (v > 0.9) as u8 as f64);
        inputs.push(GeneratorInput::from_clip(&clip, &frames, landmarks, reference).expect("input"));
        targets.push(clip);
    }
    GeneratorBatch::from_inputs(&inputs, Some(&targets)).expect("batch")
}
