//! Generator, discriminator and their parameter storage.

mod discriminator;
mod generator;
mod input;
pub mod params;

pub use discriminator::{DiscLayer, Discriminator, DiscriminatorConfig, DISC_INPUT_CHANNELS};
pub use generator::{Generator, GeneratorConfig, Stage};
pub use input::{
    broadcast_mask, composite_graph, composite_output, GeneratorBatch, GeneratorInput, INPUT_CHANNELS,
};
pub use params::ParamStore;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::qk_channels;
    use crate::autograd::Graph;
    use crate::data::{make_hmd_mask, MaskGeometry, MaskSequence, VideoClip};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_generator() -> Generator {
        Generator::new(GeneratorConfig {
            base_channels: 4,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn batch(n: usize, t: usize, size: usize, seed: u64) -> GeneratorBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = make_hmd_mask(size, size, &MaskGeometry::default()).unwrap();
        let mask = MaskSequence::repeat_frame(&mask.frame(0), t).unwrap();
        let inputs: Vec<GeneratorInput> = (0..n)
            .map(|_| {
                let clip = VideoClip::new(Tensor::uniform(&[t, 3, size, size], 0.0, 1.0, &mut rng)).unwrap();
                let lm = Tensor::zeros(&[t, 1, size, size]);
                let reference = crate::data::prepare_reference(&clip, &mask, 0).unwrap();
                GeneratorInput::from_clip(&clip, &mask, lm, reference).unwrap()
            })
            .collect();
        GeneratorBatch::from_inputs(&inputs, None).unwrap()
    }

    // Independent count from the layer table: two convolutions per gated
    // layer, learnable taps on the shifted channels, and the attention
    // projections with their residual scale.
    fn expected_generator_params(c1: usize) -> usize {
        let (c2, c3) = (2 * c1, 4 * c1);
        let gated = |cin: usize, cout: usize, k: usize| {
            let per_dir = cin / 8;
            2 * (cin * cout * k * k + cout) + 2 * per_dir * 2
        };
        let attn = |c: usize| {
            let cq = qk_channels(c);
            2 * (cq * c + cq) + 2 * (c * c + c) + 1
        };
        gated(8, c1, 5)
            + gated(c1, c2, 4)
            + attn(c2)
            + gated(c2, c2, 3)
            + gated(c2, c3, 4)
            + gated(c3, c3, 3)
            + attn(c3)
            + 5 * gated(c3, c3, 3)
            + gated(c3, c2, 3)
            + gated(c2, c1, 3)
            + gated(c1, 3, 3)
    }

    #[test]
    fn generator_layer_counts_and_params() {
        for base in [4, 8, 16] {
            let g = Generator::new(GeneratorConfig {
                base_channels: base,
                ..GeneratorConfig::default()
            })
            .unwrap();
            assert_eq!(g.num_gated_layers(), 13);
            assert_eq!(g.num_attention_layers(), 2);
            assert_eq!(g.params().num_scalars(), expected_generator_params(base), "base {base}");
        }
    }

    #[test]
    fn generator_output_shape_and_range() {
        let gen = tiny_generator();
        let b = batch(2, 3, 16, 1);
        let mut g = Graph::new();
        let vars = gen.params().bind(&mut g, false);
        let (raw, comp) = gen.forward_batch(&mut g, &vars, &b).unwrap();
        assert_eq!(g.shape(raw), &[6, 3, 16, 16]);
        assert!(g.value(raw).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Outside the mask the composite is the observed input.
        let c = g.value(comp);
        for ((&cv, &m), &x) in c.data().iter().zip(b.mask3.data()).zip(b.masked.data()) {
            if m == 0.0 {
                assert_eq!(cv, x);
            }
        }
    }

    #[test]
    fn generator_is_causal_in_time() {
        let gen = tiny_generator();
        let b1 = batch(1, 4, 16, 3);
        let mut b2 = b1.clone();
        let frame = 8 * 16 * 16;
        for v in &mut b2.input.data_mut()[3 * frame..] {
            *v = 0.3;
        }
        let o1 = gen.infer(&b1).unwrap();
        let o2 = gen.infer(&b2).unwrap();
        let out_frame = 3 * 16 * 16;
        assert_eq!(o1.data()[..3 * out_frame], o2.data()[..3 * out_frame]);
    }

    #[test]
    fn generator_rejects_bad_sizes() {
        let gen = tiny_generator();
        let mut g = Graph::new();
        let vars = gen.params().bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[2, 8, 18, 16]));
        assert!(matches!(gen.forward_graph(&mut g, &vars, x, 1, 2), Err(crate::Error::Shape(_))));
        let x = g.constant(Tensor::zeros(&[2, 7, 16, 16]));
        assert!(gen.forward_graph(&mut g, &vars, x, 1, 2).is_err());
    }

    #[test]
    fn discriminator_patch_map_sizes() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.output_size(128), Some(8));
        assert_eq!(cfg.output_size(64), Some(4));
        let d = Discriminator::new(DiscriminatorConfig {
            base_channels: 4,
            ..cfg
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = Tensor::uniform(&[4, 3, 64, 64], 0.0, 1.0, &mut rng);
        let mask = Tensor::zeros(&[4, 1, 64, 64]);
        let s = d.score(&frames, &mask, 2, 2).unwrap();
        assert_eq!(s.shape(), &[4, 1, 4, 4]);
        assert!(s.all_finite());
        let expected: usize = d.layers().iter().map(|l| l.out_channels * (l.in_channels * 25 + 1)).sum();
        assert_eq!(d.params().num_scalars(), expected);
    }

    #[test]
    fn spectral_norm_bounds_layer_gain() {
        // Once the power iteration settles, the normalized first layer has
        // operator norm 1 on 16x16 frames. Oracle: top singular value of the
        // dense matrix built column by column from unit inputs.
        let mut d = Discriminator::new(DiscriminatorConfig::default()).unwrap();
        let frames = Tensor::full(&[1, 3, 16, 16], 0.5);
        let mask = Tensor::zeros(&[1, 1, 16, 16]);
        for _ in 0..200 {
            let mut g = Graph::new();
            let vars = d.params().bind(&mut g, false);
            let f = g.constant(frames.clone());
            let m = g.constant(mask.clone());
            let (_, u) = d.forward_graph(&mut g, &vars, f, m, 1, 1).unwrap();
            d.set_power_vectors(u).unwrap();
        }
        let layer = d.layers()[0];
        let mut g = Graph::new();
        let wv = g.constant(d.params().get(0).clone());
        let (wn, _) = g
            .spectral_norm(wv, &d.power_vectors()[0], [layer.in_channels, 16, 16], layer.conv)
            .unwrap();
        let wn = g.value(wn).clone();
        let cols = layer.in_channels * 16 * 16;
        let mut columns = Vec::with_capacity(cols);
        for c in 0..cols {
            let e = Tensor::from_fn(&[1, layer.in_channels, 16, 16], |k| if k == c { 1.0 } else { 0.0 });
            columns.push(crate::kernels::conv2d_forward(&e, &wn, None, layer.conv).unwrap().into_data());
        }
        let rows = columns[0].len();
        let dense = nalgebra::DMatrix::from_fn(rows, cols, |r, c| columns[c][r]);
        let top = dense.singular_values().max();
        assert!((top - 1.0).abs() < 1e-4, "{top}");
    }

}
