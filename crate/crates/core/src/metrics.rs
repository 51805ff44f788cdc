//! Normalized mean errors and per-pose aggregation.

use rayon::prelude::*;

use crate::cascade::CascadeModel;
use crate::error::{Error, Result};
use crate::representation::Shape2D;
use crate::synthdata::Sample;

fn mean_point_distance(pred: &Shape2D, gt: &Shape2D) -> Result<f64> {
    if pred.as_slice().len() != gt.as_slice().len() {
        return Err(Error::DimensionMismatch {
            op: "nme",
            left: vec![pred.as_slice().len()],
            right: vec![gt.as_slice().len()],
        });
    }
    let total: f64 = pred
        .points()
        .zip(gt.points())
        .map(|((a, b), (c, d))| (a - c).hypot(b - d))
        .sum();
    Ok(total / pred.landmarks() as f64)
}

/// Mean landmark distance over the inter-pupil distance of `gt`.
pub fn nme_interpupil(pred: &Shape2D, gt: &Shape2D, pupil_left: usize, pupil_right: usize) -> Result<f64> {
    let p = gt.landmarks();
    if pupil_left >= p || pupil_right >= p {
        return Err(Error::invalid(format!("pupil index out of range for {p} landmarks")));
    }
    let (l, r) = (gt.point(pupil_left), gt.point(pupil_right));
    let d = (l.0 - r.0).hypot(l.1 - r.1);
    if d == 0.0 {
        return Err(Error::invalid("coincident pupils: inter-pupil distance is zero"));
    }
    Ok(mean_point_distance(pred, gt)? / d)
}

/// Mean landmark distance over √(h·w).
pub fn nme_bbox(pred: &Shape2D, gt: &Shape2D, box_h: f64, box_w: f64) -> Result<f64> {
    if !(box_h > 0.0 && box_w > 0.0) {
        return Err(Error::invalid(format!("box {box_h}x{box_w} must be positive")));
    }
    Ok(mean_point_distance(pred, gt)? / (box_h * box_w).sqrt())
}

/// |yaw| ranges in degrees; the last one is closed and absorbs anything
/// beyond 90°.
pub const BUCKETS: [(f64, f64); 3] = [(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)];

pub fn bucket_label(i: usize) -> String {
    let (lo, hi) = BUCKETS[i];
    if i + 1 == BUCKETS.len() {
        format!("[{lo},{hi}]")
    } else {
        format!("[{lo},{hi})")
    }
}

pub fn yaw_bucket(yaw_deg: f64) -> usize {
    let a = yaw_deg.abs();
    BUCKETS
        .iter()
        .position(|&(_, hi)| a < hi)
        .unwrap_or(BUCKETS.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub id: u64,
    pub yaw_deg: f64,
    pub nme_bbox: f64,
    /// `None` when the pupils coincide.
    pub nme_interpupil: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStats {
    pub count: usize,
    /// Mean bbox NME, fraction.
    pub nme_bbox: Option<f64>,
    pub nme_interpupil: Option<f64>,
}

/// NMEs are fractions; multiply by 100 for percent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub nme_bbox: f64,
    pub nme_interpupil: Option<f64>,
    pub buckets: Vec<BucketStats>,
    /// Unweighted mean over the populated buckets.
    pub bucket_mean_bbox: f64,
    pub bucket_mean_interpupil: Option<f64>,
    pub warnings: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates per-sample errors into overall and per-bucket means.
pub fn aggregate(rows: &[SampleEval]) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let mut buckets = Vec::with_capacity(BUCKETS.len());
    let mut warnings = Vec::new();
    for b in 0..BUCKETS.len() {
        let members: Vec<&SampleEval> = rows.iter().filter(|r| yaw_bucket(r.yaw_deg) == b).collect();
        if members.is_empty() {
            warnings.push(format!("bucket {} is empty and excluded from the bucket mean", bucket_label(b)));
        }
        buckets.push(BucketStats {
            count: members.len(),
            nme_bbox: mean(members.iter().map(|r| r.nme_bbox)),
            nme_interpupil: mean(members.iter().filter_map(|r| r.nme_interpupil)),
        });
    }
    Ok(EvalReport {
        count: rows.len(),
        nme_bbox: mean(rows.iter().map(|r| r.nme_bbox)).expect("non-empty"),
        nme_interpupil: mean(rows.iter().filter_map(|r| r.nme_interpupil)),
        bucket_mean_bbox: mean(buckets.iter().filter_map(|b| b.nme_bbox)).expect("non-empty"),
        bucket_mean_interpupil: mean(buckets.iter().filter_map(|b| b.nme_interpupil)),
        buckets,
        warnings,
    })
}

/// Anything that maps a sample to a predicted shape.
pub trait ShapePredictor: Sync {
    fn predict_shape(&self, sample: &Sample) -> Result<Shape2D>;
}

impl ShapePredictor for CascadeModel {
    fn predict_shape(&self, sample: &Sample) -> Result<Shape2D> {
        Ok(self.predict(sample)?.prediction().clone())
    }
}

/// Per-sample errors of `predictor`, sorted by sample id.
pub fn evaluate_samples(
    predictor: &dyn ShapePredictor,
    samples: &[Sample],
    pupils: (usize, usize),
) -> Result<Vec<SampleEval>> {
    let mut rows = samples
        .par_iter()
        .map(|s| {
            let pred = predictor.predict_shape(s)?;
            let pose = s.pose.ok_or(Error::MissingPose)?;
            let ip = match nme_interpupil(&pred, &s.gt, pupils.0, pupils.1) {
                Ok(v) => Some(v),
                Err(Error::InvalidArgument(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(SampleEval {
                id: s.id,
                yaw_deg: pose.yaw.to_degrees(),
                nme_bbox: nme_bbox(&pred, &s.gt, s.bbox.h, s.bbox.w)?,
                nme_interpupil: ip,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| r.id);
    Ok(rows)
}

pub fn evaluate(
    predictor: &dyn ShapePredictor,
    samples: &[Sample],
    pupils: (usize, usize),
) -> Result<(Vec<SampleEval>, EvalReport)> {
    let rows = evaluate_samples(predictor, samples, pupils)?;
    let report = aggregate(&rows)?;
    Ok((rows, report))
}

/// Formats with 9 significant digits, like C's `%.9g`.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..9).contains(&exp) {
        let s = format!("{v:.8e}");
        let (mant, e) = s.split_once('e').expect("exponent form");
        let mant = trim_zeros(mant);
        let e: i32 = e.parse().expect("integer exponent");
        return format!("{mant}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(v: &[f64]) -> Shape2D {
        Shape2D::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_shapes_score_zero() {
        let g = shape(&[0.0, 0.0, 4.0, 0.0, 2.0, 3.0]);
        assert_eq!(nme_interpupil(&g, &g, 0, 1).unwrap(), 0.0);
        assert_eq!(nme_bbox(&g, &g, 10.0, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn errors_rejected() {
        let g = shape(&[1.0, 1.0, 1.0, 1.0]);
        assert!(nme_interpupil(&g, &g, 0, 1).is_err());
        assert!(nme_bbox(&g, &g, 0.0, 1.0).is_err());
        assert!(nme_bbox(&g, &g, 1.0, -1.0).is_err());
    }

    #[test]
    fn buckets() {
        assert_eq!(yaw_bucket(0.0), 0);
        assert_eq!(yaw_bucket(-29.999), 0);
        assert_eq!(yaw_bucket(30.0), 1);
        assert_eq!(yaw_bucket(-60.0), 2);
        assert_eq!(yaw_bucket(90.0), 2);
        assert_eq!(yaw_bucket(95.0), 2);
    }

    #[test]
    fn sig9_format() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(0.123456789123), "0.123456789");
        assert_eq!(fmt_sig9(123456.789012), "123456.789");
        assert_eq!(fmt_sig9(-2.5e-7), "-2.5e-07");
        assert_eq!(fmt_sig9(1.5e12), "1.5e+12");
    }

    #[test]
    fn aggregate_skips_empty_buckets() {
        let rows = vec![SampleEval {
            id: 0,
            yaw_deg: 45.0,
            nme_bbox: 0.2,
            nme_interpupil: Some(0.5),
        }];
        let r = aggregate(&rows).unwrap();
        assert_eq!(r.buckets[1].count, 1);
        assert_eq!(r.buckets[0].count + r.buckets[2].count, 0);
        assert_eq!(r.bucket_mean_bbox, 0.2);
        assert_eq!(r.warnings.len(), 2);
    }
}
