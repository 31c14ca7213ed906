//! End-to-end acceptance gate. Runs every criterion in order on one thread,
//! prints a pass/fail line for each and fails if any of them failed.
//!
//! The two training fixtures run the full default schedule twice each, so
//! this target takes most of an hour on a single core.

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use hairsynth::autodiff::IndexMap;
use hairsynth::data::{write_dataset, DatasetSpec};
use hairsynth::losses::{self, FeatureExtractor};
use hairsynth::pipeline::{
    evaluate_dir, gradsuite, run_remaining, EvalReport, Stage, Task, TrainConfig,
};
use hairsynth::rng;
use hairsynth::structure::*;
use hairsynth::Tensor;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Outcome {
    let suite = gradsuite::grad_check_suite().unwrap();
    let failures: Vec<String> = suite.failures().iter().map(|r| r.name.clone()).collect();
    let checked = suite.reports.len();
    outcome(
        failures.is_empty() && suite.elapsed < Duration::from_secs(60),
        format!(
            "{checked} checks, failures {failures:?}, {:.1?}",
            suite.elapsed
        ),
    )
}

fn gabor_oracle() -> Outcome {
    let bank = GaborBank::new(BankParams::default()).unwrap();
    let p = *bank.params();
    let h = (p.support / 2) as isize;
    let mut r = rng::stream(2, "acceptance-gabor", 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = r.gen_range(0..p.count);
        let (u, v) = (r.gen_range(-h..=h), r.gen_range(-h..=h));
        let theta = k as f64 * PI / p.count as f64;
        let direct = gabor_value(p.sigma_u, p.sigma_v, p.lambda, theta, u as f64, v as f64);
        worst = worst.max((bank.raw_at(k, u, v) - direct).abs());
    }
    let k0 = bank.raw_at(0, 2, 0);
    outcome(
        worst <= 1e-12 && (k0 + 0.53940).abs() < 1e-5,
        format!("worst probe error {worst:.1e}, K0(2,0) = {k0:.5}"),
    )
}

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

fn orientation_recovery() -> Outcome {
    let start = Instant::now();
    let bank = GaborBank::new(BankParams::default()).unwrap();
    let margin = bank.support() / 2;
    let mut worst = 1.0f64;
    for (k, &theta) in bank.orientations().iter().enumerate() {
        let pair = extract(&grating(48, theta, 4.0, 0.4), &bank).unwrap();
        worst = worst.min(interior_share(&pair.raw_orientation_index, k, margin));
    }
    let off = PI / 6.0;
    let near = bank.nearest_index(off);
    let pair = extract(&grating(48, off, 4.0, 0.4), &bank).unwrap();
    let off_share = interior_share(&pair.raw_orientation_index, near, margin);
    let elapsed = start.elapsed();
    outcome(
        worst >= 0.9 && off_share >= 0.8 && elapsed < Duration::from_secs(10),
        format!(
            "worst on-grid {worst:.3}, 30 degrees -> bin {near} on {off_share:.3}, {elapsed:.1?}"
        ),
    )
}

fn refinement_entropy() -> Outcome {
    let bank = GaborBank::new(BankParams::default()).unwrap();
    let pair = extract(&noisy_grating(32, PI / 6.0, 4.0, 0.1, 0), &bank).unwrap();
    let h0 = orientation_entropy(&pair.raw_orientation_index, bank.len(), 0);
    let h1 = orientation_entropy(&pair.orientation_index, bank.len(), 0);
    outcome(h1 <= h0, format!("entropy {h0:.4} -> {h1:.4}"))
}

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

fn loss_identities() -> Outcome {
    let mut r = rng::stream(5, "acceptance-loss", 0);
    let img = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut r);
    let bank = GaborBank::new(BankParams::default()).unwrap();
    let feats = FeatureExtractor::new(7).features(&img).unwrap();
    let zeros = [
        losses::pixel_loss(&img, &img).unwrap(),
        losses::style_loss(&img, &img, &FeatureExtractor::new(7)).unwrap(),
        losses::fm_loss(&feats, &feats).unwrap(),
        losses::texture_loss(&img, &img, &bank).unwrap(),
    ];
    let half = Tensor::full(&[1, 8, 8], 0.5);
    let adv_err = (losses::adv_loss_generator(&half).unwrap() - LN_2).abs();
    let f = Tensor::rand_uniform(&[16, 8, 8], -1.0, 1.0, &mut r);
    let gram = losses::gram(&f).unwrap();
    let gram_err = gram
        .data()
        .iter()
        .zip(naive_gram(&f))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        zeros.iter().all(|&z| z == 0.0) && adv_err <= 1e-12 && gram_err <= 1e-10,
        format!("identical-input losses {zeros:?}, |adv - ln 2| {adv_err:.1e}, gram error {gram_err:.1e}"),
    )
}

struct Fixture {
    report: EvalReport,
    elapsed: Duration,
}

fn train_and_evaluate(root: &Path, data: &Path, task: Task) -> Fixture {
    let start = Instant::now();
    let config = TrainConfig {
        task,
        ..TrainConfig::default()
    };
    let ckpt = root.join(task.name());
    run_remaining(&config, data, &ckpt).unwrap();
    let report = evaluate_dir(
        task,
        &ckpt,
        data,
        &root.join(format!("{}.json", task.name())),
    )
    .unwrap();
    Fixture {
        report,
        elapsed: start.elapsed(),
    }
}

fn sketch_fixture(f: &Fixture) -> Outcome {
    let (c, r) = (&f.report.mean_coarse, &f.report.mean_refined);
    outcome(
        r.texture < c.texture
            && r.pixel <= 1.05 * c.pixel
            && f.elapsed < Duration::from_secs(30 * 60),
        format!(
            "{} test images, texture {:.3} -> {:.3}, pixel {:.4} -> {:.4}, {:.1?}",
            f.report.count, c.texture, r.texture, c.pixel, r.pixel, f.elapsed
        ),
    )
}

fn sr_fixture(f: &Fixture) -> Outcome {
    let base = f
        .report
        .mean_baseline
        .as_ref()
        .expect("super-resolution reports carry a baseline");
    let r = &f.report.mean_refined;
    outcome(
        r.texture < base.texture && f.elapsed < Duration::from_secs(30 * 60),
        format!(
            "{} test images, texture bicubic {:.3} refined {:.3}, {:.1?}",
            f.report.count, base.texture, r.texture, f.elapsed
        ),
    )
}

/// Files under `root` that must match byte for byte between two runs.
fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for task in [Task::Sketch2hair, Task::HairSr4] {
        let name = task.name();
        out.push((
            format!("{name}.json"),
            fs::read(root.join(format!("{name}.json"))).unwrap(),
        ));
        for stage in Stage::ORDER {
            let rel = format!("{name}/losses_{}.csv", stage.name());
            out.push((rel.clone(), fs::read(root.join(&rel)).unwrap()));
        }
    }
    out
}

fn end_to_end(root: &Path) -> [Outcome; 3] {
    let run = |dir: &Path| {
        let data = dir.join("data");
        let manifest = write_dataset(&data, &DatasetSpec::new(0, 62, 64)).unwrap();
        assert_eq!((manifest.train.len(), manifest.test.len()), (50, 12));
        let sketch = train_and_evaluate(dir, &data, Task::Sketch2hair);
        let sr = train_and_evaluate(dir, &data, Task::HairSr4);
        (sketch, sr)
    };
    let (first, second) = (root.join("first"), root.join("second"));
    let (sketch, sr) = run(&first);
    let c6 = sketch_fixture(&sketch);
    let c7 = sr_fixture(&sr);
    run(&second);
    let (a, b) = (artifacts(&first), artifacts(&second));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let c8 = outcome(
        differing.is_empty(),
        format!("{} files compared, differing {differing:?}", a.len()),
    );
    [c6, c7, c8]
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let mut results = vec![
        (1, gradient_suite()),
        (2, gabor_oracle()),
        (3, orientation_recovery()),
        (4, refinement_entropy()),
        (5, loss_identities()),
    ];
    for (n, o) in (6..).zip(end_to_end(root.path())) {
        results.push((n, o));
    }
    for (n, o) in &results {
        println!(
            "criterion {n}: {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed: Vec<i32> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}
