use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tmoe::pose::PoseAngles;
use tmoe::synthdata::*;

#[test]
fn frontal_projection_is_scaled_template() {
    let cfg = GenConfig::noiseless(96);
    let s = generate_sample(&PoseAngles::zero(), 42, &cfg).unwrap();
    let t = Template3D::standard();
    let c = 47.5;
    let r = 0.3 * 96.0;
    for (i, p) in t.points.iter().enumerate() {
        let (x, y) = s.gt.point(i);
        assert_eq!(x, round6(c + r * p[0]));
        assert_eq!(y, round6(c - r * p[1]));
    }
    assert_eq!(s.bbox, BBox { x: c - r, y: c - r, h: 2.0 * r, w: 2.0 * r });
}

#[test]
fn mirrored_seed_mirrors_landmarks() {
    let t = Template3D::standard();
    let cfg = GenConfig::default();
    for (yaw, pitch, roll, seed) in [(30.0, 5.0, 10.0, 7u64), (-75.0, -12.0, 3.0, 99), (90.0, 0.0, -15.0, 1234)] {
        let p = PoseAngles::from_degrees(yaw, pitch, roll).unwrap();
        let a = generate_sample(&p, seed, &cfg).unwrap();
        let b = generate_sample(&p.mirrored(), seed | MIRROR_BIT, &cfg).unwrap();
        let w = 95.0;
        for i in 0..t.landmarks() {
            let (xa, ya) = a.gt.point(t.mirror[i]);
            let (xb, yb) = b.gt.point(i);
            assert!((w - xa - xb).abs() <= 1e-9, "x of {i}: {} vs {xb}", w - xa);
            assert!((ya - yb).abs() <= 1e-9);
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let p = PoseAngles::from_degrees(50.0, -10.0, 4.0).unwrap();
    let a = generate_sample(&p, 5, &GenConfig::default()).unwrap();
    let b = generate_sample(&p, 5, &GenConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = generate_sample(&p, 6, &GenConfig::default()).unwrap();
    assert_ne!(a.gt, c.gt);
}

#[test]
fn pose_stored_exactly() {
    let p = PoseAngles::new(0.7, -0.123456789, 0.2).unwrap();
    let s = generate_sample(&p, 3, &GenConfig::default()).unwrap();
    assert_eq!(s.pose, Some(p));
}

#[test]
fn yaw_histogram_is_uniform() {
    let cfg = DatasetConfig {
        n: 10_000,
        seed: 17,
        ..Default::default()
    };
    let bins = 18;
    let mut counts = vec![0usize; bins];
    for id in 0..cfg.n as u64 {
        let yaw = sample_pose(&cfg, id).yaw_degrees();
        let b = (((yaw + 90.0) / 180.0) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let expected = cfg.n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}, counts {counts:?}");
}

#[test]
fn sample_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let p = PoseAngles::from_degrees(-63.3, 8.1, -2.2).unwrap();
    let mut s = generate_sample(&p, 77, &GenConfig::default()).unwrap();
    s.id = 31;
    write_sample(&s, dir.path()).unwrap();
    let back = read_sample(&sample_stem(dir.path(), 31)).unwrap();
    assert_eq!(back, s);
    for (a, b) in back.gt.as_slice().iter().zip(s.gt.as_slice()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

fn written_sample(dir: &Path) -> std::path::PathBuf {
    let mut s = generate_sample(&PoseAngles::zero(), 1, &GenConfig::default()).unwrap();
    s.id = 2;
    write_sample(&s, dir).unwrap();
    sample_stem(dir, 2)
}

#[test]
fn truncated_image_names_pixel_count() {
    let dir = tempfile::tempdir().unwrap();
    let stem = written_sample(dir.path());
    let pgm = stem.with_extension("pgm");
    let bytes = fs::read(&pgm).unwrap();
    fs::write(&pgm, &bytes[..bytes.len() - 100]).unwrap();
    let err = read_sample(&stem).unwrap_err().to_string();
    assert!(err.contains("expected 9216 pixels"), "{err}");
}

#[test]
fn odd_coordinate_count_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stem = written_sample(dir.path());
    let pts = stem.with_extension("pts");
    let mut text = fs::read_to_string(&pts).unwrap();
    text.push_str("12.5\n");
    fs::write(&pts, text).unwrap();
    let err = read_sample(&stem).unwrap_err().to_string();
    assert!(err.contains("odd coordinate count"), "{err}");
}

#[test]
fn malformed_landmark_line_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let stem = written_sample(dir.path());
    let pts = stem.with_extension("pts");
    let text = fs::read_to_string(&pts).unwrap().replacen("\n", "\nfoo bar\n", 1);
    fs::write(&pts, text).unwrap();
    let err = read_sample(&stem).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn dataset_split_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n: 10,
        seed: 3,
        split: 0.8,
        ..Default::default()
    };
    assert_eq!(generate_dataset(dir.path(), &cfg).unwrap(), (8, 2));
    let count = |d: &str, ext: &str| {
        fs::read_dir(dir.path().join(d))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == ext)
            .count()
    };
    for ext in ["pgm", "pts", "meta"] {
        assert_eq!(count("train", ext), 8);
        assert_eq!(count("test", ext), 2);
    }
    let (train, test) = read_dataset(dir.path()).unwrap();
    let (mtrain, mtest) = generate_split(&cfg).unwrap();
    assert_eq!(train, mtrain);
    assert_eq!(test, mtest);
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_trees() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = DatasetConfig {
        n: 12,
        seed: 8,
        ..Default::default()
    };
    generate_dataset(a.path(), &cfg).unwrap();
    generate_dataset(b.path(), &cfg).unwrap();
    let ta = tree_bytes(a.path());
    assert_eq!(ta.len(), 3 * 12 + 1);
    assert_eq!(ta, tree_bytes(b.path()));
}

#[test]
fn unwritable_directory_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    let cfg = DatasetConfig {
        n: 2,
        ..Default::default()
    };
    assert!(generate_dataset(&file, &cfg).is_err());
}

#[test]
fn generator_rejects_bad_configs() {
    let bad = DatasetConfig {
        n: 1,
        ..Default::default()
    };
    assert!(generate_split(&bad).is_err());
    let p = PoseAngles::from_degrees(0.0, 95.0, 0.0).unwrap();
    assert!(generate_sample(&p, 0, &GenConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn landmarks_stay_inside_image(
        yaw in -90.0f64..=90.0,
        pitch in -90.0f64..=90.0,
        roll in -45.0f64..=45.0,
        seed in 0u64..1_000_000,
    ) {
        let p = PoseAngles::from_degrees(yaw, pitch, roll).unwrap();
        let s = generate_sample(&p, seed, &GenConfig::default()).unwrap();
        for (x, y) in s.gt.points() {
            prop_assert!((0.0..=95.0).contains(&x) && (0.0..=95.0).contains(&y), "({x}, {y})");
        }
    }

    #[test]
    fn image_flip_is_an_involution(seed in 0u64..1000, yaw in -90.0f64..90.0) {
        let p = PoseAngles::from_degrees(yaw, 0.0, 0.0).unwrap();
        let s = generate_sample(&p, seed, &GenConfig::noiseless(32)).unwrap();
        prop_assert_eq!(s.image.flipped_horizontal().flipped_horizontal(), s.image);
    }
}
