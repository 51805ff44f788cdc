use proptest::prelude::*;
use tmoe::metrics::*;
use tmoe::pose::PoseAngles;
use tmoe::representation::Shape2D;
use tmoe::synthdata::{generate_sample, GenConfig, Sample, Template3D};

fn shape(v: Vec<f64>) -> Shape2D {
    Shape2D::new(v).unwrap()
}

#[test]
fn interpupil_offset_by_pupil_distance_is_one() {
    let gt = shape(vec![0.0, 0.0, 3.0, 4.0]);
    // every landmark displaced by 5 = |pupil_l − pupil_r|
    let pred = shape(vec![5.0, 0.0, 3.0, -1.0]);
    assert!((nme_interpupil(&pred, &gt, 0, 1).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn bbox_offset_by_side_is_one() {
    let gt = shape(vec![1.0, 1.0, 2.0, 5.0, -3.0, 0.5]);
    let d = 7.0;
    let pred = shape(gt.as_slice().iter().enumerate().map(|(i, v)| if i % 2 == 1 { v + d } else { *v }).collect());
    assert!((nme_bbox(&pred, &gt, d, d).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn bbox_normalizer_is_geometric_mean() {
    let gt = shape(vec![0.0, 0.0, 1.0, 1.0]);
    let pred = shape(vec![0.3, 0.4, 1.0, 1.5]);
    let a = nme_bbox(&pred, &gt, 4.0, 9.0).unwrap();
    let b = nme_bbox(&pred, &gt, 8.0, 4.5).unwrap();
    assert_eq!(a, b);
    assert!((a - 0.5 / 6.0).abs() < 1e-15);
}

struct Oracle;

impl ShapePredictor for Oracle {
    fn predict_shape(&self, s: &Sample) -> tmoe::Result<Shape2D> {
        Ok(s.gt.clone())
    }
}

struct Shifted(f64);

impl ShapePredictor for Shifted {
    fn predict_shape(&self, s: &Sample) -> tmoe::Result<Shape2D> {
        Ok(shape(s.gt.as_slice().iter().map(|v| v + self.0 * (s.id as f64 + 1.0)).collect()))
    }
}

fn dataset(yaws: &[f64]) -> Vec<Sample> {
    yaws.iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut s = generate_sample(&PoseAngles::from_degrees(y, 0.0, 0.0).unwrap(), i as u64, &GenConfig::default()).unwrap();
            s.id = i as u64;
            s
        })
        .collect()
}

#[test]
fn perfect_predictor_reports_zero() {
    let data = dataset(&[-80.0, -45.0, 0.0, 10.0, 65.0]);
    let (rows, r) = evaluate(&Oracle, &data, Template3D::standard().pupils).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(r.nme_bbox, 0.0);
    assert_eq!(r.nme_interpupil, Some(0.0));
    assert!(r.buckets.iter().all(|b| b.nme_bbox == Some(0.0)));
    assert_eq!(r.buckets.iter().map(|b| b.count).sum::<usize>(), 5);
}

#[test]
fn single_sample_fills_one_bucket() {
    let data = dataset(&[45.0]);
    let (_, r) = evaluate(&Shifted(0.5), &data, Template3D::standard().pupils).unwrap();
    let counts: Vec<usize> = r.buckets.iter().map(|b| b.count).collect();
    assert_eq!(counts, vec![0, 1, 0]);
    assert!(r.buckets[0].nme_bbox.is_none() && r.buckets[2].nme_bbox.is_none());
    assert_eq!(r.bucket_mean_bbox, r.buckets[1].nme_bbox.unwrap());
    assert_eq!(r.warnings.len(), 2);
}

#[test]
fn overall_is_sample_mean_and_buckets_reaggregate() {
    let yaws = [-85.0, -70.0, -50.0, -20.0, 0.0, 5.0, 33.0, 59.9, 60.0, 89.0];
    let data = dataset(&yaws);
    let (rows, r) = evaluate(&Shifted(0.3), &data, Template3D::standard().pupils).unwrap();
    let mean = rows.iter().map(|x| x.nme_bbox).sum::<f64>() / rows.len() as f64;
    assert!((r.nme_bbox - mean).abs() <= 1e-12);
    let mut per = [(0.0, 0usize); 3];
    for row in &rows {
        let b = if row.yaw_deg.abs() < 30.0 { 0 } else if row.yaw_deg.abs() < 60.0 { 1 } else { 2 };
        per[b].0 += row.nme_bbox;
        per[b].1 += 1;
    }
    for (b, (s, n)) in per.iter().enumerate() {
        assert_eq!(r.buckets[b].count, *n);
        assert!((r.buckets[b].nme_bbox.unwrap() - s / *n as f64).abs() <= 1e-12);
    }
    let bm = per.iter().map(|(s, n)| s / *n as f64).sum::<f64>() / 3.0;
    assert!((r.bucket_mean_bbox - bm).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn nme_scale_invariant(
        gt in prop::collection::vec(-50.0f64..50.0, 8),
        noise in prop::collection::vec(-5.0f64..5.0, 8),
        alpha in 0.01f64..100.0,
    ) {
        let pred: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| g + n).collect();
        let (g, p) = (shape(gt.clone()), shape(pred.clone()));
        prop_assume!((gt[0] - gt[2]).hypot(gt[1] - gt[3]) > 1e-3);
        let a = nme_interpupil(&p, &g, 0, 1).unwrap();
        let gs = shape(gt.iter().map(|v| v * alpha).collect());
        let ps = shape(pred.iter().map(|v| v * alpha).collect());
        let b = nme_interpupil(&ps, &gs, 0, 1).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        let c = nme_bbox(&p, &g, 10.0, 20.0).unwrap();
        let d = nme_bbox(&ps, &gs, 10.0 * alpha, 20.0 * alpha).unwrap();
        prop_assert!((c - d).abs() <= 1e-12 * c.max(1.0));
    }

    #[test]
    fn nme_translation_invariant(
        gt in prop::collection::vec(-50.0f64..50.0, 6),
        noise in prop::collection::vec(-5.0f64..5.0, 6),
        tx in -100.0f64..100.0,
        ty in -100.0f64..100.0,
    ) {
        let pred: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| g + n).collect();
        prop_assume!((gt[0] - gt[2]).hypot(gt[1] - gt[3]) > 1e-3);
        let mv = |v: &[f64]| shape(v.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { tx } else { ty }).collect());
        let a = nme_interpupil(&shape(pred.clone()), &shape(gt.clone()), 0, 1).unwrap();
        let b = nme_interpupil(&mv(&pred), &mv(&gt), 0, 1).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        let c = nme_bbox(&shape(pred.clone()), &shape(gt.clone()), 3.0, 4.0).unwrap();
        let d = nme_bbox(&mv(&pred), &mv(&gt), 3.0, 4.0).unwrap();
        prop_assert!((c - d).abs() <= 1e-9 * c.max(1.0));
    }

    #[test]
    fn nme_nonnegative_and_zero_iff_equal(
        gt in prop::collection::vec(-50.0f64..50.0, 6),
        noise in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let pred: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| g + n).collect();
        let v = nme_bbox(&shape(pred.clone()), &shape(gt.clone()), 2.0, 2.0).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, pred == gt);
        prop_assert_eq!(nme_bbox(&shape(gt.clone()), &shape(gt), 2.0, 2.0).unwrap(), 0.0);
    }
}
