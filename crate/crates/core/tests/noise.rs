use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcl_core::noise::{
    apply_nlf_noise, bayer_channel, demosaic_bilinear, derive_rng, downsample2x, gen_procedural_image, make_noisy_pair, mosaic,
    sample_nlf_noise, sample_nlf_params, NoiseParams, NoiseRange,
};
use rcl_core::tensor::Tensor;

const DRAWS: usize = 100_000;

fn empirical_variance(y: f64, p: NoiseParams, seed: u64) -> f64 {
    let clean = Tensor::full(&[1, 1, 1, DRAWS], y);
    let noisy = apply_nlf_noise(&clean, p, &mut ChaCha8Rng::seed_from_u64(seed));
    let d: Vec<f64> = noisy.data().iter().map(|v| v - y).collect();
    let mean = d.iter().sum::<f64>() / DRAWS as f64;
    d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (DRAWS - 1) as f64
}

#[test]
fn variance_follows_the_noise_level_function() {
    let p = NoiseParams::new(0.01, 0.0004).unwrap();
    for (i, y) in [0.1, 0.5, 1.0].into_iter().enumerate() {
        let expected = 0.01 * y + 0.0004;
        let v = empirical_variance(y, p, i as u64);
        assert!((v / expected - 1.0).abs() < 0.05, "y={y}: {v} vs {expected}");
    }
    let v = empirical_variance(0.5, p, 7);
    assert!((v / 0.0054 - 1.0).abs() < 0.03, "{v}");
}

#[test]
fn shot_noise_scales_with_intensity() {
    let p = NoiseParams::new(0.02, 0.0).unwrap();
    let ratio = empirical_variance(1.0, p, 1) / empirical_variance(0.5, p, 2);
    assert!((ratio / 2.0 - 1.0).abs() < 0.05, "{ratio}");
}

#[test]
fn noise_is_zero_mean() {
    let p = NoiseParams::new(0.01, 0.001).unwrap();
    let n = sample_nlf_noise(&Tensor::full(&[DRAWS], 0.7), p, &mut ChaCha8Rng::seed_from_u64(3));
    let sd = p.variance_at(0.7).sqrt();
    // five standard errors
    assert!(n.mean().abs() < 5.0 * sd / (DRAWS as f64).sqrt());
}

#[test]
fn zero_parameters_leave_the_image_untouched() {
    let y = gen_procedural_image(4, 16, 16).unwrap();
    assert_eq!(apply_nlf_noise(&y, NoiseParams::zero(), &mut ChaCha8Rng::seed_from_u64(0)), y);
    let p = sample_nlf_params(NoiseRange::new(0.0, 0.0).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p, NoiseParams::zero());
}

#[test]
fn degenerate_range_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in [0.0, 1.0 / 255.0, 0.05, 20.0 / 255.0, 0.3] {
        let p = sample_nlf_params(NoiseRange::new(s, s).unwrap(), &mut rng).unwrap();
        assert_eq!(p.lambda_shot, s * s / 2.0);
        assert_eq!(p.lambda_read, s * s / 2.0);
        assert!((p.variance_at(1.0) - s * s).abs() <= f64::EPSILON * s * s);
    }
}

fn ks_uniform(mut x: Vec<f64>, lo: f64, hi: f64) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn parameter_roots_are_uniform() {
    let range = NoiseRange::default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut shot, mut read) = (Vec::with_capacity(DRAWS), Vec::with_capacity(DRAWS));
    for _ in 0..DRAWS {
        let p = sample_nlf_params(range, &mut rng).unwrap();
        shot.push(p.lambda_shot.sqrt());
        read.push(p.lambda_read.sqrt());
    }
    let hi = 20.0 / (255.0 * 2f64.sqrt());
    assert!(ks_uniform(shot.clone(), 0.0, hi) < 0.01);
    assert!(ks_uniform(read.clone(), 0.0, hi) < 0.01);
    // the two roots are drawn independently
    let corr = {
        let (ms, mr) = (shot.iter().sum::<f64>() / DRAWS as f64, read.iter().sum::<f64>() / DRAWS as f64);
        let cov: f64 = shot.iter().zip(&read).map(|(a, b)| (a - ms) * (b - mr)).sum();
        let vs: f64 = shot.iter().map(|a| (a - ms).powi(2)).sum();
        let vr: f64 = read.iter().map(|b| (b - mr).powi(2)).sum();
        cov / (vs * vr).sqrt()
    };
    assert!(corr.abs() < 0.02, "{corr}");
}

#[test]
fn invalid_ranges_are_rejected() {
    assert!(NoiseRange::new(0.2, 0.1).is_err());
    assert!(NoiseRange::new(-0.1, 0.1).is_err());
    assert!(NoiseRange::new(0.0, f64::NAN).is_err());
    assert!(NoiseParams::new(-1.0, 0.0).is_err());
    let bad = NoiseRange { sigma_min: 0.3, sigma_max: 0.1 };
    assert!(sample_nlf_params(bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn noisy_pairs_share_parameters_but_not_noise() {
    let y = gen_procedural_image(8, 32, 32).unwrap();
    let (x1, x2, p) = make_noisy_pair(&y, NoiseRange::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert!(p.lambda_shot > 0.0 || p.lambda_read > 0.0);
    assert_ne!(x1, x2);
    let n1 = x1.sub(&y).unwrap();
    let n2 = x2.sub(&y).unwrap();
    let corr: f64 = n1.data().iter().zip(n2.data()).map(|(a, b)| a * b).sum::<f64>()
        / (n1.data().iter().map(|a| a * a).sum::<f64>() * n2.data().iter().map(|b| b * b).sum::<f64>()).sqrt();
    assert!(corr.abs() < 0.1, "{corr}");
    let (z1, z2, _) = make_noisy_pair(&y, NoiseRange::new(0.0, 0.0).unwrap(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(z1, y);
    assert_eq!(z2, y);
}

#[test]
fn derived_streams_differ() {
    assert_eq!(derive_rng(1, 0).random::<u64>(), derive_rng(1, 0).random::<u64>());
    let mut seen = std::collections::HashSet::new();
    for seed in 0..4 {
        for idx in 0..4 {
            assert!(seen.insert(derive_rng(seed, idx).random::<u64>()));
        }
    }
}

#[test]
fn procedural_images_are_deterministic_and_bounded() {
    let a = gen_procedural_image(3, 64, 48).unwrap();
    assert_eq!(a.shape(), &[1, 3, 64, 48]);
    assert_eq!(a, gen_procedural_image(3, 64, 48).unwrap());
    assert_ne!(a, gen_procedural_image(4, 64, 48).unwrap());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    // not flat
    let m = a.mean();
    assert!(a.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / a.numel() as f64 > 1e-3);
    assert!(gen_procedural_image(0, 8, 32).is_err());
}

#[test]
fn downsampling_averages_blocks() {
    let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]).unwrap();
    let d = downsample2x(&x).unwrap();
    assert_eq!(d.shape(), &[1, 1, 1, 2]);
    assert_eq!(d.data(), &[2.5, 6.5]);
}

#[test]
fn bayer_layout_is_rggb() {
    assert_eq!([bayer_channel(0, 0), bayer_channel(0, 1), bayer_channel(1, 0), bayer_channel(1, 1)], [0, 1, 1, 2]);
    assert_eq!(bayer_channel(4, 7), 1);
}

#[test]
fn mosaic_picks_the_pattern_channel() {
    let rgb = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64);
    let raw = mosaic(&rgb).unwrap();
    assert_eq!(raw.shape(), &[1, 1, 4, 4]);
    for r in 0..4 {
        for c in 0..4 {
            let ch = bayer_channel(r, c);
            assert_eq!(raw.data()[r * 4 + c], rgb.data()[ch * 16 + r * 4 + c]);
        }
    }
    assert!(mosaic(&Tensor::zeros(&[1, 3, 3, 4])).is_err());
    assert!(mosaic(&Tensor::zeros(&[1, 1, 4, 4])).is_err());
}

#[test]
fn demosaic_reproduces_flat_and_linear_fields() {
    let flat = Tensor::full(&[1, 3, 8, 8], 0.4);
    let d = demosaic_bilinear(&mosaic(&flat).unwrap()).unwrap();
    assert!(d.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    // a ramp is reproduced exactly away from the border
    let ramp = Tensor::from_fn(&[1, 3, 8, 8], |i| {
        let (r, c) = ((i % 64) / 8, i % 8);
        0.1 * r as f64 + 0.03 * c as f64
    });
    let d = demosaic_bilinear(&mosaic(&ramp).unwrap()).unwrap();
    for ch in 0..3 {
        for r in 1..7 {
            for c in 1..7 {
                let k = ch * 64 + r * 8 + c;
                assert!((d.data()[k] - ramp.data()[k]).abs() < 1e-12, "ch {ch} ({r},{c})");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn mosaic_of_demosaic_is_identity(seed in any::<u64>(), hh in 1usize..6, ww in 1usize..6, n in 1usize..3) {
        let (h, w) = (2 * hh, 2 * ww);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::from_fn(&[n, 1, h, w], |_| rng.random());
        let rgb = demosaic_bilinear(&raw).unwrap();
        prop_assert_eq!(rgb.shape(), &[n, 3, h, w][..]);
        prop_assert_eq!(mosaic(&rgb).unwrap(), raw);
    }

    #[test]
    fn demosaic_stays_within_sample_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::from_fn(&[1, 1, 6, 8], |_| rng.random());
        let (lo, hi) = raw.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let rgb = demosaic_bilinear(&raw).unwrap();
        prop_assert!(rgb.data().iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
    }

    #[test]
    fn sampled_parameters_stay_in_range(lo in 0.0..0.2f64, width in 0.0..0.2f64, seed in any::<u64>()) {
        let range = NoiseRange::new(lo, lo + width).unwrap();
        let p = sample_nlf_params(range, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for l in [p.lambda_shot, p.lambda_read] {
            let s = (2.0 * l).sqrt();
            prop_assert!(s >= lo - 1e-12 && s <= lo + width + 1e-12);
        }
    }
}
