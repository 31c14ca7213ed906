use std::f64::consts::PI;

use hairsynth::autodiff::IndexMap;
use hairsynth::pipeline::gradsuite;
use hairsynth::rng;
use hairsynth::structure::*;
use hairsynth::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn bank() -> GaborBank {
    GaborBank::new(BankParams::default()).unwrap()
}

/// Fraction of pixels at least `margin` from the border labelled `want`.
fn interior_share(map: &IndexMap, want: usize, margin: usize) -> f64 {
    let (mut hit, mut total) = (0, 0);
    for y in margin..map.height - margin {
        for x in margin..map.width - margin {
            hit += (map.get(y, x) == want) as usize;
            total += 1;
        }
    }
    hit as f64 / total as f64
}

#[test]
fn bank_angles_are_recovered_from_gratings() {
    let b = bank();
    let margin = b.support() / 2;
    for (k, &theta) in b.orientations().iter().enumerate() {
        for phase in [0.0, 1.0, 2.5] {
            let pair = extract(&grating(48, theta, 4.0, phase), &b).unwrap();
            let raw = interior_share(&pair.raw_orientation_index, k, margin);
            let refined = interior_share(&pair.orientation_index, k, margin);
            assert!(raw >= 0.9, "angle {k} phase {phase}: raw {raw}");
            assert!(refined >= 0.9, "angle {k} phase {phase}: refined {refined}");
        }
    }
}

#[test]
fn off_grid_angle_goes_to_the_nearest_bin() {
    let b = bank();
    let theta = PI / 6.0;
    let k = b.nearest_index(theta);
    assert_eq!(k, 1);
    let pair = extract(&grating(48, theta, 4.0, 0.4), &b).unwrap();
    let share = interior_share(&pair.raw_orientation_index, k, b.support() / 2);
    assert!(share >= 0.8, "{share}");
}

#[test]
fn second_application_sharpens_the_orientation_histogram() {
    let b = bank();
    let img = noisy_grating(32, PI / 6.0, 4.0, 0.1, 0);
    let pair = extract(&img, &b).unwrap();
    let h0 = orientation_entropy(&pair.raw_orientation_index, b.len(), 0);
    let h1 = orientation_entropy(&pair.orientation_index, b.len(), 0);
    assert!(h1 <= h0, "{h1} > {h0}");
}

#[test]
fn noisy_grating_is_seeded() {
    let a = noisy_grating(16, 0.3, 4.0, 0.1, 9);
    assert_eq!(a, noisy_grating(16, 0.3, 4.0, 0.1, 9));
    assert_ne!(a, noisy_grating(16, 0.3, 4.0, 0.1, 10));
    let clean = grating(16, 0.3, 4.0, 0.0);
    let resid: Vec<f64> = a
        .data()
        .iter()
        .zip(clean.data())
        .map(|(x, y)| x - y)
        .collect();
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    assert!((sd - 0.1).abs() < 0.02, "{sd}");
}

#[test]
fn kernels_match_direct_evaluation() {
    let b = bank();
    let p = *b.params();
    let h = (p.support / 2) as isize;
    let mut r = rng::stream(1, "structure-test", 0);
    for _ in 0..50 {
        let k = r.gen_range(0..p.count);
        let (u, v) = (r.gen_range(-h..=h), r.gen_range(-h..=h));
        let theta = k as f64 * PI / p.count as f64;
        let direct = gabor_value(p.sigma_u, p.sigma_v, p.lambda, theta, u as f64, v as f64);
        assert!((b.raw_at(k, u, v) - direct).abs() < 1e-12);
    }
}

#[test]
fn dc_correction_is_a_constant_shift_up_to_the_grid() {
    let b = bank();
    let s = b.support();
    let plane = s * s;
    for k in 0..b.len() {
        let raw = &b.raw_kernels().data()[k * plane..(k + 1) * plane];
        let fixed = &b.kernels().data()[k * plane..(k + 1) * plane];
        let mean = raw.iter().sum::<f64>() / plane as f64;
        for (a, c) in raw.iter().zip(fixed) {
            assert!((a - mean - c).abs() < 1e-12);
        }
    }
}

#[test]
fn extraction_gradient_matches_finite_differences() {
    let suite =
        gradsuite::run_cases(&gradsuite::structure_cases(), &gradsuite::SUITE_SEEDS).unwrap();
    assert!(suite.passed(), "{:?}", suite.failures());
}

#[test]
fn non_finite_images_are_rejected() {
    let mut img = Tensor::full(&[1, 16, 16], 0.5);
    img.data_mut()[7] = f64::NAN;
    assert!(extract(&img, &bank()).is_err());
}

#[test]
fn maps_keep_the_image_size() {
    let pair = extract(&Tensor::full(&[3, 12, 20], 0.3), &bank()).unwrap();
    for t in [
        &pair.texture,
        &pair.raw_texture,
        &pair.orientation,
        &pair.raw_orientation,
    ] {
        assert_eq!(t.shape(), &[1, 12, 20]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn orientation_ignores_contrast_and_offset(a in 0.2f64..3.0, c in -1.0f64..1.0, k in 0usize..8) {
        let b = bank();
        // A phase offset keeps every pixel off the zero crossings, where all
        // responses vanish and the argmax is rounding noise.
        let g = grating(32, b.orientations()[k], 4.0, 0.4);
        let base = extract(&g, &b).unwrap();
        let shifted = extract(&g.map(|x| a * x + c), &b).unwrap();
        let m = b.support() / 2;
        prop_assert_eq!(
            interior_share(&base.raw_orientation_index, k, m),
            interior_share(&shifted.raw_orientation_index, k, m)
        );
        let scaled = base.raw_texture.scaled(a);
        prop_assert!(scaled.max_abs_diff(&shifted.raw_texture) < 1e-9 * a.max(1.0));
    }

    #[test]
    fn angle_distance_is_a_pi_periodic_metric(x in -10.0f64..10.0, y in -10.0f64..10.0) {
        let d = angle_distance(x, y);
        prop_assert!((0.0..=PI / 2.0 + 1e-12).contains(&d));
        prop_assert!((d - angle_distance(y, x)).abs() < 1e-12);
        prop_assert!((d - angle_distance(x + PI, y)).abs() < 1e-9);
    }
}
