use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ranlen::backbones::{degree_pre_refinement, Intermediate};
use ranlen::data::{rgb_to_tensor, tensor_to_rgb};
use ranlen::losses::{gradient_smooth_loss, loss_area_c, LossWeights};
use ranlen::masks::{derive_band, sample_circle, BandMode, BinaryMap};
use ranlen::metrics::{masked_psnr, masked_ssim};
use ranlen::nn::ParamStore;
use ranlen::ranlen::{normalize, RanlenLayer, RanlenLayerConfig, StatsMode};
use ranlen::{Checkpoint, Model, ModelConfig, Tape, Tensor};

fn noise(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut s = seed ^ 0x5DEE_CE66_D;
    Tensor::from_fn(shape, |_, _, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_metrics_ignore_pixels_outside_a(seed in any::<u64>(), fill in 0.0f64..1.0) {
        let (h, w) = (24, 24);
        let part = sample_circle(h, w, seed).unwrap().0.partition();
        let reference = noise([1, 3, h, w], seed, 0.0, 1.0);
        let enhanced = noise([1, 3, h, w], seed.wrapping_add(1), 0.0, 1.0);
        let mut edited = enhanced.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if !part.area_a.get(y, x) {
                        edited.set(0, c, y, x, fill);
                    }
                }
            }
        }
        prop_assert_eq!(masked_psnr(&enhanced, &reference, &part).unwrap(), masked_psnr(&edited, &reference, &part).unwrap());
        prop_assert_eq!(masked_ssim(&enhanced, &reference, &part.area_a).unwrap(), masked_ssim(&edited, &reference, &part.area_a).unwrap());
    }

    #[test]
    fn band_loss_vanishes_on_affine_maps(
        a in -4i32..4, b in -4i32..4, c in -4i32..4, seed in any::<u64>(),
    ) {
        let (h, w) = (9, 11);
        let input = noise([1, 3, h, w], seed, 0.02, 1.0);
        // Interior band: replicate padding bends affine maps at the border.
        let band = BinaryMap::from_fn(h, w, |y, x| y > 0 && x > 0 && y + 1 < h && x + 1 < w);
        let target = Tensor::<f64>::from_fn([1, 3, h, w], |_, ch, y, x| {
            (a as f64 * x as f64 + b as f64 * y as f64 + c as f64 * ch as f64) / 8.0
        });
        let l = gradient_smooth_loss(&target, &input, &[band], &LossWeights::default())[0];
        prop_assert_eq!(l, 0.0);
    }

    #[test]
    fn band_loss_is_nonnegative_and_scales_quadratically(seed in any::<u64>(), k in 0.1f64..4.0) {
        let (h, w) = (8, 8);
        let input = noise([1, 3, h, w], seed, 0.02, 1.0);
        let target = noise([1, 3, h, w], seed.wrapping_add(7), 0.0, 1.0);
        let band = sample_circle(h, w, seed).unwrap().0.partition().area_b;
        let weights = LossWeights::default();
        let l = gradient_smooth_loss(&target, &input, &[band.clone()], &weights)[0];
        let lk = gradient_smooth_loss(&target.map(|v| k * v), &input, &[band], &weights)[0];
        prop_assert!(l >= 0.0);
        prop_assert!((lk - k * k * l).abs() <= 1e-9 * lk.abs().max(1.0));
    }

    #[test]
    fn c_loss_is_zero_iff_c_matches_input(seed in any::<u64>(), delta in 0.01f64..0.5) {
        let (h, w) = (16, 16);
        let part = sample_circle(h, w, seed).unwrap().0.partition();
        prop_assume!(!part.area_c.is_empty());
        let input = noise([1, 3, h, w], seed, 0.0, 0.5);
        let mut out = input.clone();
        for y in 0..h {
            for x in 0..w {
                if !part.area_c.get(y, x) {
                    out.set(0, 0, y, x, 1.0);
                }
            }
        }
        prop_assert_eq!(loss_area_c(&out, &input, &[part.area_c.clone()])[0], 0.0);
        let shifted = out.map(|v| v + delta);
        prop_assert!(loss_area_c(&shifted, &input, &[part.area_c])[0] > 0.0);
    }

    #[test]
    fn retinex_degree_darkens_with_alpha(seed in any::<u64>(), lo in 0.3f64..1.0, hi in 1.0f64..2.0) {
        let (h, w) = (8, 8);
        let image = noise([1, 3, h, w], seed, 0.0, 0.3);
        let illum = Intermediate::Illumination(noise([1, 3, h, w], seed.wrapping_add(3), 0.2, 1.0));
        let bright = degree_pre_refinement(&image, &illum, lo).unwrap();
        let dark = degree_pre_refinement(&image, &illum, hi).unwrap();
        for (b, d) in bright.data().iter().zip(dark.data()) {
            prop_assert!(b >= d);
        }
        prop_assert!(bright.sum() > dark.sum());
    }

    #[test]
    fn derived_band_contains_area_a(seed in any::<u64>(), radius in 1usize..5, erode in any::<bool>()) {
        let (h, w) = (20, 20);
        let area = sample_circle(h, w, seed).unwrap().0.inner().clone();
        let mode = if erode { BandMode::ErodeIn } else { BandMode::DilateOut };
        let derived = derive_band(&area, mode, radius).unwrap().mask;
        for y in 0..h {
            for x in 0..w {
                prop_assert!(!derived.inner().get(y, x) || derived.outer().get(y, x));
                match mode {
                    BandMode::DilateOut => prop_assert_eq!(derived.inner().get(y, x), area.get(y, x)),
                    BandMode::ErodeIn => prop_assert_eq!(derived.outer().get(y, x), area.get(y, x)),
                }
            }
        }
    }

    #[test]
    fn normalization_output_has_zero_mean(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let h = noise([2, 3, 6, 6], seed, -1.0, 1.0).map(|v| v * scale + shift);
        let out = normalize(&h, StatsMode::PerSample);
        for n in 0..2 {
            for c in 0..3 {
                let plane = out.channel_plane(n, c);
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                prop_assert!(mean.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fresh_ranlen_layer_is_plain_normalization(seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = RanlenLayer::new(&mut store, "n", RanlenLayerConfig::new(3), &mut rng).unwrap();
        let act = noise([1, 3, 10, 10], seed, -2.0, 2.0);
        let mask = sample_circle(10, 10, seed).unwrap().0.to_tensor::<f64>();
        let tape = Tape::new();
        let params = store.bind(&tape, false);
        let a = tape.constant(act.clone());
        let out = layer.forward(&tape, &params, a, &mask, StatsMode::PerSample);
        prop_assert!(tape.value(out).max_abs_diff(&normalize(&act, StatsMode::PerSample)) < 1e-12);
    }

    #[test]
    fn rgb_round_trip_is_lossless(seed in any::<u64>()) {
        let t = noise([1, 3, 5, 7], seed, 0.0, 1.0).map(|v| (v * 255.0).round() / 255.0);
        let img = tensor_to_rgb(&t, 0).unwrap();
        let back: Tensor<f64> = rgb_to_tensor(&img);
        prop_assert!(back.max_abs_diff(&t) < 1e-12);
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let (model, params) = Model::new::<f32>(ModelConfig::default(), 3).unwrap();
    let ck = Checkpoint {
        model: model.config().clone(),
        train: None,
        epoch: 2,
        step: 17,
        rng: None,
        params,
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ck);
}
