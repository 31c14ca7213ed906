use std::f64::consts::PI;

use hairsynth::data::*;
use hairsynth::structure::{angle_distance, extract, BankParams, GaborBank};
use hairsynth::Tensor;

#[test]
fn synthesis_is_deterministic() {
    let a = synth_ground_truth(4, 32, 120).unwrap();
    let b = synth_ground_truth(4, 32, 120).unwrap();
    assert_eq!(a.rendered, b.rendered);
    assert_eq!(a.strands, b.strands);
    assert_ne!(a.rendered, synth_ground_truth(5, 32, 120).unwrap().rendered);
    assert!(synth_ground_truth(4, 32, 0).is_err());
    assert!(synth_ground_truth(4, 20, 10).is_err());
}

#[test]
fn images_stay_in_range() {
    let f = synth_ground_truth(2, 32, 200).unwrap();
    assert_eq!(f.rendered.shape(), &[3, 32, 32]);
    assert!(f.rendered.min() >= 0.0 && f.rendered.max() <= 1.0);
    assert!(f.flow.min() >= 0.0 && f.flow.max() < PI);
}

/// The filter orientation is across the strands, so a quarter turn should
/// land on the generating flow.
#[test]
fn extracted_orientation_follows_the_flow() {
    let bank = GaborBank::new(BankParams::default()).unwrap();
    let bin = PI / bank.len() as f64;
    for seed in 0..10 {
        let f = synth_ground_truth(seed, 64, DEFAULT_STRAND_COUNT).unwrap();
        let pair = extract(&f.rendered, &bank).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for p in 0..64 * 64 {
            if f.mask.data()[p] < 0.5 {
                continue;
            }
            let est = pair.raw_orientation.data()[p] + PI / 2.0;
            hit += (angle_distance(est, f.flow.data()[p]) <= bin) as usize;
            total += 1;
        }
        let share = hit as f64 / total as f64;
        assert!(share >= 0.7, "seed {seed}: {share:.3}");
    }
}

fn stroke_pixels(sketch: &Tensor) -> Vec<usize> {
    let plane = sketch.len() / 2;
    (0..plane)
        .filter(|&p| sketch.data()[plane + p] < 0.5)
        .collect()
}

#[test]
fn strokes_come_from_strands_inside_the_mask() {
    let f = synth_ground_truth(8, 64, 300).unwrap();
    let sketch = derive_sketch(&f, DEFAULT_STROKE_FRACTION).unwrap();
    assert_eq!(sketch.shape(), &[2, 64, 64]);
    assert_eq!(&sketch.data()[..64 * 64], f.mask.data());
    let strokes = stroke_pixels(&sketch);
    assert!(!strokes.is_empty());
    assert!(strokes.iter().all(|&p| f.mask.data()[p] > 0.5));
    let mask_area = f.mask.data().iter().filter(|&&m| m > 0.5).count();
    let share = strokes.len() as f64 / mask_area as f64;
    assert!(share <= 0.05, "{share}");
}

#[test]
fn full_stroke_fraction_draws_every_strand() {
    let f = synth_ground_truth(8, 32, 80).unwrap();
    let sketch = derive_sketch(&f, 1.0).unwrap();
    let want: std::collections::BTreeSet<usize> = f
        .strands
        .iter()
        .flat_map(|s| rasterize(s, 32))
        .filter(|&p| f.mask.data()[p] > 0.5)
        .collect();
    let got: std::collections::BTreeSet<usize> = stroke_pixels(&sketch).into_iter().collect();
    assert_eq!(got, want);
    assert!(derive_sketch(&f, 0.0).is_err());
    assert!(derive_sketch(&f, 1.5).is_err());
}

#[test]
fn stroke_budget_is_respected() {
    let f = synth_ground_truth(13, 64, DEFAULT_STRAND_COUNT).unwrap();
    let total: usize = f
        .strands
        .iter()
        .map(|s| {
            rasterize(s, 64)
                .into_iter()
                .filter(|&p| f.mask.data()[p] > 0.5)
                .count()
        })
        .sum();
    let sketch = derive_sketch(&f, 0.1).unwrap();
    // Overlapping strands share pixels, so the drawn count can only be lower.
    assert!(stroke_pixels(&sketch).len() as f64 <= 0.1 * total as f64);
}

#[test]
fn low_resolution_inputs() {
    let f = synth_ground_truth(1, 64, 100).unwrap();
    assert_eq!(downsample_input(&f, 4).unwrap().shape(), &[3, 16, 16]);
    assert_eq!(downsample_input(&f, 8).unwrap().shape(), &[3, 8, 8]);
    assert!(downsample_input(&f, 2).is_err());
    let flat = Tensor::full(&[3, 16, 16], 0.37);
    assert!(
        downsample(&flat, 4)
            .unwrap()
            .max_abs_diff(&Tensor::full(&[3, 4, 4], 0.37))
            < 1e-15
    );
    assert!(downsample(&flat, 3).is_err());
}

#[test]
fn bicubic_keeps_constants_and_stays_close_on_smooth_images() {
    let flat = Tensor::full(&[3, 4, 4], 0.6);
    assert!(
        bicubic_upsample(&flat, 4)
            .unwrap()
            .max_abs_diff(&Tensor::full(&[3, 16, 16], 0.6))
            < 1e-12
    );
    let ramp = Tensor::from_fn(&[1, 32, 32], |i| 0.2 + 0.5 * (i % 32) as f64 / 31.0);
    let up = bicubic_upsample(&downsample(&ramp, 4).unwrap(), 4).unwrap();
    let mae = up
        .data()
        .iter()
        .zip(ramp.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / ramp.len() as f64;
    assert!(mae < 0.01, "{mae}");
}

#[test]
fn split_is_disjoint_and_covering() {
    let (train, test) = split(7, 62, DEFAULT_SPLIT_RATIO).unwrap();
    assert_eq!((train.len(), test.len()), (50, 12));
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..62).collect::<Vec<_>>());
    assert_eq!(split(7, 10, 0.8).unwrap().0.len(), 8);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::new(3, 6, 32);
    let written = write_dataset(dir.path(), &spec).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, written);
    let s = ds.load(ds.manifest.test[0]).unwrap();
    assert_eq!(s.gt.shape(), &[3, 32, 32]);
    assert_eq!(s.sketch.shape(), &[2, 32, 32]);
    assert_eq!(s.lr4.shape(), &[3, 8, 8]);
    assert_eq!(s.lr8.shape(), &[3, 4, 4]);
    assert_eq!(ds.load_split(false).unwrap().len(), written.train.len());

    let other = tempfile::tempdir().unwrap();
    write_dataset(other.path(), &spec).unwrap();
    for sub in [
        "gt/0000.png",
        "sketch/0000.htx",
        "lr4/0003.png",
        "manifest.json",
    ] {
        let a = std::fs::read(dir.path().join(sub)).unwrap();
        let b = std::fs::read(other.path().join(sub)).unwrap();
        assert_eq!(a, b, "{sub}");
    }
}

#[test]
fn tampered_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_dataset(dir.path(), &DatasetSpec::new(3, 6, 32)).unwrap();
    let good = serde_json::to_value(&m).unwrap();
    let edits: [(&str, serde_json::Value); 5] = [
        ("format", "other".into()),
        ("size", 30.into()),
        ("count", 0.into()),
        ("split_ratio", 1.5.into()),
        ("test", serde_json::json!([0])),
    ];
    for (key, value) in edits {
        let mut bad = good.clone();
        bad[key] = value;
        assert!(DatasetManifest::parse(&bad.to_string()).is_err(), "{key}");
    }
    assert!(DatasetManifest::parse("{").is_err());
    assert!(Dataset::open(dir.path().join("missing")).is_err());
}
