use std::f64::consts::LN_2;

use hairsynth::losses::*;
use hairsynth::rng;
use hairsynth::structure::{BankParams, GaborBank, LUMA};
use hairsynth::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, 0.0, 1.0, &mut rng::stream(seed, "loss-test", 0))
}

/// `G[i][j] = Σ_hw F[i,h,w] F[j,h,w] / (C H W)`, summed term by term.
fn naive_gram(f: &Tensor) -> Vec<f64> {
    let (c, h, w) = f.dims3().unwrap();
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += f.at3(i, y, x) * f.at3(j, y, x);
                }
            }
            g[i * c + j] = acc / (c * h * w) as f64;
        }
    }
    g
}

#[test]
fn gram_matches_the_double_sum() {
    for (shape, seed) in [
        ([3, 4, 4], 1),
        ([5, 3, 7], 2),
        ([1, 1, 1], 3),
        ([16, 8, 8], 4),
    ] {
        let f = random(&shape, seed).map(|v| 2.0 * v - 1.0);
        let g = gram(&f).unwrap();
        for (a, b) in g.data().iter().zip(naive_gram(&f)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn gram_is_positive_semidefinite() {
    let f = random(&[6, 5, 5], 9).map(|v| v - 0.5);
    let g = gram(&f).unwrap();
    let mut r = rng::stream(9, "psd", 0);
    for _ in 0..100 {
        let x: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let q: f64 = (0..6)
            .flat_map(|i| (0..6).map(move |j| (i, j)))
            .map(|(i, j)| x[i] * g.data()[i * 6 + j] * x[j])
            .sum();
        assert!(q >= -1e-12, "{q}");
    }
}

#[test]
fn identical_inputs_cost_nothing() {
    let a = random(&[3, 8, 8], 5);
    assert_eq!(pixel_loss(&a, &a).unwrap(), 0.0);
    assert_eq!(style_loss(&a, &a, &FeatureExtractor::new(7)).unwrap(), 0.0);
    let feats = vec![random(&[4, 4, 4], 6), random(&[8, 2, 2], 7)];
    assert_eq!(fm_loss(&feats, &feats).unwrap(), 0.0);
    let bank = GaborBank::new(BankParams::default()).unwrap();
    assert_eq!(texture_loss(&a, &a, &bank).unwrap(), 0.0);
}

#[test]
fn style_ignores_pixel_positions_under_the_identity_extractor() {
    let target = random(&[3, 8, 8], 11);
    let mut order: Vec<usize> = (0..64).collect();
    order.shuffle(&mut rng::stream(11, "perm", 0));
    let shuffled = Tensor::from_fn(&[3, 8, 8], |i| {
        let (c, p) = (i / 64, i % 64);
        target.data()[c * 64 + order[p]]
    });
    let loss = style_loss(&shuffled, &target, &FeatureExtractor::identity()).unwrap();
    assert!(loss.abs() < 1e-24, "{loss}");
    assert!(style_loss(&shuffled, &target, &FeatureExtractor::new(7)).unwrap() > 0.0);
}

#[test]
fn adversarial_losses_at_even_odds() {
    let half = Tensor::full(&[1, 8, 8], 0.5);
    assert!((adv_loss_generator(&half).unwrap() - LN_2).abs() < 1e-12);
    assert!((adv_loss_discriminator(&half, &half).unwrap() - 2.0 * LN_2).abs() < 1e-12);
    // Scores outside the clamp cost a lot but stay finite.
    let wrong = Tensor::zeros(&[1, 2, 2]);
    assert!((adv_loss_generator(&wrong).unwrap() - 7.0 * std::f64::consts::LN_10).abs() < 1e-9);
    assert!(adv_loss_discriminator(&wrong, &Tensor::ones(&[1, 2, 2]))
        .unwrap()
        .is_finite());
    // The logit form: 0 is a score of 0.5, and saturation stays finite.
    assert!((adv_loss_generator_logits(&Tensor::zeros(&[1, 8, 8])).unwrap() - LN_2).abs() < 1e-12);
    let far = Tensor::full(&[1, 2, 2], -1e4);
    assert_eq!(adv_loss_generator_logits(&far).unwrap(), 1e4);
    assert!(adv_loss_discriminator_logits(&far, &far.scaled(-1.0))
        .unwrap()
        .is_finite());
}

#[test]
fn feature_matching_by_hand() {
    let real = vec![
        Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap(),
        Tensor::new(&[1, 1, 1], vec![0.5]).unwrap(),
    ];
    let fake = vec![
        Tensor::new(&[1, 1, 2], vec![0.0, 4.0]).unwrap(),
        Tensor::new(&[1, 1, 1], vec![-0.5]).unwrap(),
    ];
    // mean(|1|, |2|) + mean(|1|)
    assert_eq!(fm_loss(&real, &fake).unwrap(), 2.5);
    assert!(fm_loss(&real, &fake[..1]).is_err());
}

#[test]
fn pixel_loss_by_hand() {
    let a = Tensor::new(&[1, 2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
    let b = Tensor::new(&[1, 2, 2], vec![1.0, 0.5, 0.0, 0.75]).unwrap();
    assert_eq!(pixel_loss(&a, &b).unwrap(), 0.625);
    assert!(pixel_loss(&a, &Tensor::zeros(&[1, 2, 3])).is_err());
}

/// Luminance, reflect-padded filtering and per-pixel max, written out
/// without the tape or the im2col path.
fn recompute_texture(image: &Tensor, bank: &GaborBank) -> Vec<f64> {
    let (c, h, w) = image.dims3().unwrap();
    let lum: Vec<f64> = (0..h * w)
        .map(|p| {
            if c == 1 {
                image.data()[p]
            } else {
                (0..3)
                    .map(|ch| LUMA[ch] * image.data()[ch * h * w + p])
                    .sum()
            }
        })
        .collect();
    let half = (bank.support() / 2) as isize;
    let fold = |i: isize, n: usize| -> usize {
        let n = n as isize;
        (if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        }) as usize
    };
    let mut out = vec![f64::NEG_INFINITY; h * w];
    for k in 0..bank.len() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for v in -half..=half {
                    for u in -half..=half {
                        let sy = fold(y as isize + v, h);
                        let sx = fold(x as isize + u, w);
                        acc += bank.kernel_at(k, u, v) * lum[sy * w + sx];
                    }
                }
                out[y * w + x] = out[y * w + x].max(acc);
            }
        }
    }
    out
}

#[test]
fn texture_loss_matches_an_independent_recomputation() {
    let bank = GaborBank::new(BankParams::default()).unwrap();
    let a = random(&[3, 16, 16], 21);
    let b = random(&[3, 16, 16], 22);
    let (ta, tb) = (recompute_texture(&a, &bank), recompute_texture(&b, &bank));
    let want: f64 = ta.iter().zip(&tb).map(|(x, y)| (x - y).abs()).sum();
    let got = texture_loss(&a, &b, &bank).unwrap();
    assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
    let map = texture_map(&a, &bank).unwrap();
    for (x, y) in map.data().iter().zip(&ta) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn extractor_is_seeded() {
    let a = FeatureExtractor::new(3);
    let b = FeatureExtractor::new(3);
    let c = FeatureExtractor::new(4);
    assert_eq!(a.params().tensors(), b.params().tensors());
    assert_ne!(a.params().tensors(), c.params().tensors());
    let img = random(&[3, 16, 16], 1);
    let feats = a.features(&img).unwrap();
    assert_eq!(feats.len(), a.tap_count());
    assert_eq!(feats[0].shape(), &[32, 16, 16]);
    assert_eq!(feats[1].shape(), &[64, 8, 8]);
}

#[test]
fn weights_and_objective() {
    assert!(LossWeights::new(-1.0, 1.0, 1.0, 1.0).is_err());
    assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).is_err());
    assert!(LossWeights::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
    let w = LossWeights::new(2.0, 3.0, 5.0, 7.0).unwrap();
    let parts = LossParts {
        pixel: 1.0,
        adv: 1.0,
        style: 1.0,
        fm: 1.0,
    };
    assert_eq!(total_objective(&parts, &w).unwrap(), 17.0);
    let bad = LossParts {
        fm: f64::INFINITY,
        ..parts
    };
    assert!(total_objective(&bad, &w).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_are_nonnegative_and_symmetric(seed in any::<u64>()) {
        let a = random(&[3, 8, 8], seed);
        let b = random(&[3, 8, 8], seed.wrapping_add(1));
        let p = pixel_loss(&a, &b).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert_eq!(p, pixel_loss(&b, &a).unwrap());
        let fx = FeatureExtractor::identity();
        let s = style_loss(&a, &b, &fx).unwrap();
        prop_assert!(s >= 0.0);
        prop_assert!((s - style_loss(&b, &a, &fx).unwrap()).abs() < 1e-15);
    }
}
