use hairsynth::autodiff::Tape;
use hairsynth::conv::{conv2d_forward, Padding};
use hairsynth::htx;
use hairsynth::pipeline::gradsuite;
use hairsynth::rng;
use hairsynth::{Error, Tensor};
use proptest::prelude::*;

/// Direct quadruple loop; indices outside the image come from `pad`.
fn naive_conv(input: &Tensor, kernels: &Tensor, padding: Padding) -> Tensor {
    let (c, h, w) = input.dims3().unwrap();
    let (o, k) = (kernels.shape()[0], kernels.shape()[2]);
    let r = (k / 2) as isize;
    let fetch = |ch: usize, y: isize, x: isize| -> f64 {
        let fold = |i: isize, n: usize| -> Option<usize> {
            let n = n as isize;
            if (0..n).contains(&i) {
                Some(i as usize)
            } else {
                match padding {
                    Padding::Zero => None,
                    Padding::Reflect => Some(if i < 0 { -i } else { 2 * (n - 1) - i } as usize),
                }
            }
        };
        match (fold(y, h), fold(x, w)) {
            (Some(y), Some(x)) => input.at3(ch, y, x),
            _ => 0.0,
        }
    };
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ch in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let kv = kernels.data()[((oc * c + ch) * k + dy) * k + dx];
                            acc += kv
                                * fetch(
                                    ch,
                                    y as isize + dy as isize - r,
                                    x as isize + dx as isize - r,
                                );
                        }
                    }
                }
                out[(oc * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(&[o, h, w], out).unwrap()
}

#[test]
fn convolution_matches_direct_loop() {
    let mut r = rng::stream(5, "ops-test", 0);
    for (c, o, h, w, k) in [
        (1, 1, 5, 5, 3),
        (2, 3, 4, 6, 3),
        (3, 2, 7, 7, 5),
        (2, 4, 3, 3, 1),
        (1, 8, 12, 12, 11),
    ] {
        let x = Tensor::rand_uniform(&[c, h, w], -1.0, 1.0, &mut r);
        let kern = Tensor::rand_uniform(&[o, c, k, k], -1.0, 1.0, &mut r);
        for pad in [Padding::Zero, Padding::Reflect] {
            if pad == Padding::Reflect && k / 2 >= h.min(w) {
                continue;
            }
            let fast = conv2d_forward(&x, &kern, pad).unwrap();
            let slow = naive_conv(&x, &kern, pad);
            assert!(
                fast.max_abs_diff(&slow) < 1e-12,
                "{c} {o} {h} {w} {k} {pad:?}"
            );
        }
    }
}

#[test]
fn reflect_padding_needs_room() {
    let x = Tensor::zeros(&[1, 4, 4]);
    let k = Tensor::zeros(&[1, 1, 11, 11]);
    assert!(conv2d_forward(&x, &k, Padding::Reflect).is_err());
    assert!(conv2d_forward(&x, &k, Padding::Zero).is_ok());
}

#[test]
fn matmul_matches_naive_product() {
    let mut r = rng::stream(6, "ops-test", 0);
    let a = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let want: f64 = (0..5)
                .map(|k| a.data()[i * 5 + k] * b.data()[k * 4 + j])
                .sum();
            assert!((tape.value(c).data()[i * 4 + j] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn resampling_ops_on_small_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let up = tape.upsample2(x).unwrap();
    assert_eq!(
        tape.value(up).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    let down = tape.avg_pool2(up).unwrap();
    assert_eq!(tape.value(down).data(), &[1.0, 2.0, 3.0, 4.0]);
    let odd = tape.constant(Tensor::zeros(&[1, 3, 3]));
    assert!(tape.avg_pool2(odd).is_err());
}

#[test]
fn foreign_vars_are_rejected() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.constant(Tensor::scalar(1.0));
    let y = b.constant(Tensor::scalar(2.0));
    assert!(matches!(b.add(x, y), Err(Error::ForeignVar)));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 3]));
    let y = t.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.add(x, y), Err(Error::Shape(_))));
    assert!(t.matmul(x, x).is_err());
}

#[test]
fn backward_through_a_shared_input_accumulates() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    let s = t.sum(z);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0, -3.0]);
}

#[test]
fn op_and_loss_checks_pass_and_a_broken_rule_does_not() {
    let mut cases = gradsuite::op_cases();
    cases.extend(gradsuite::loss_cases());
    let suite = gradsuite::run_cases(&cases, &gradsuite::SUITE_SEEDS).unwrap();
    let failures: Vec<_> = suite
        .failures()
        .into_iter()
        .map(|r| r.name.clone())
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
    let broken = gradsuite::run_cases(&[gradsuite::corrupted_case()], &[0]).unwrap();
    assert!(!broken.passed());
}

#[test]
fn htx_rejects_truncation_and_bad_magic() {
    let t = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25);
    let bytes = htx::encode(&t);
    assert_eq!(htx::decode(&bytes).unwrap(), t);
    for cut in 0..bytes.len() {
        assert!(htx::decode(&bytes[..cut]).is_err(), "prefix of {cut} bytes");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(htx::decode(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(htx::decode(&long).is_err());
}

proptest! {
    #[test]
    fn htx_round_trips(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let mut r = rng::stream(seed, "htx", 0);
        let mut t = Tensor::rand_uniform(&shape, -1e6, 1e6, &mut r);
        // Values are stored as f32.
        t.round_to_f32();
        prop_assert_eq!(htx::decode(&htx::encode(&t)).unwrap(), t);
    }

    #[test]
    fn htx_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = htx::decode(&bytes);
    }

    #[test]
    fn htx_decode_survives_mutated_headers(seed in any::<u64>(), pos in 0usize..24, byte in any::<u8>()) {
        let mut r = rng::stream(seed, "htx", 1);
        let t = Tensor::rand_uniform(&[2, 2, 2], -1.0, 1.0, &mut r);
        let mut bytes = htx::encode(&t);
        let p = pos.min(bytes.len() - 1);
        bytes[p] = byte;
        let _ = htx::decode(&bytes);
    }
}
