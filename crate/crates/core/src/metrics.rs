//! Scene-flow evaluation metrics: EPE3D, Acc3DS, Acc3DR, Outliers3D, and the
//! projected EPE2D / Acc2D.

use serde::{Deserialize, Serialize};

use crate::camera::{project_points, CameraIntrinsics};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::losses::{warp, FlowField};

/// Guard for the relative-error denominator at zero ground-truth flow.
pub const RELATIVE_EPS: f64 = 1e-12;

/// Metric thresholds. One place, overridable; `evaluate_3d` and
/// `evaluate_2d` use [`MetricThresholds::default`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricThresholds {
    /// Acc3DS: error < 0.05 m or relative error < 5%.
    pub acc_strict_abs: f64,
    pub acc_strict_rel: f64,
    /// Acc3DR: error < 0.1 m or relative error < 10%.
    pub acc_relax_abs: f64,
    pub acc_relax_rel: f64,
    /// Outliers3D: error > 0.3 m and relative error > 10%.
    pub outlier_abs: f64,
    pub outlier_rel: f64,
    /// Acc2D: error < 3 px or relative error < 5%.
    pub acc2d_px: f64,
    pub acc2d_rel: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            acc_strict_abs: 0.05,
            acc_strict_rel: 0.05,
            acc_relax_abs: 0.1,
            acc_relax_rel: 0.1,
            outlier_abs: 0.3,
            outlier_rel: 0.1,
            acc2d_px: 3.0,
            acc2d_rel: 0.05,
        }
    }
}

/// Scene-flow metrics over one prediction/ground-truth pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Mean 3D end-point error (meters).
    pub epe3d: f64,
    pub acc3ds: f64,
    pub acc3dr: f64,
    pub outliers3d: f64,
    /// Mean projected end-point error (pixels); present only when intrinsics
    /// and a source cloud were supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epe2d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc2d: Option<f64>,
    pub n_points: usize,
}

/// 3D metrics with the default thresholds.
pub fn evaluate_3d(pred: &FlowField, gt: &FlowField) -> Result<MetricsReport> {
    evaluate_3d_with(pred, gt, &MetricThresholds::default())
}

/// Per-point error `e = |pred - gt|`, relative error `e / max(|gt|, eps)`.
/// Accuracies count points under the absolute OR relative threshold;
/// outliers count points over both.
pub fn evaluate_3d_with(
    pred: &FlowField,
    gt: &FlowField,
    thresholds: &MetricThresholds,
) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted flows for {} ground-truth flows",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("metrics need at least one point".into()));
    }
    let n = pred.len() as f64;
    let mut epe_sum = 0.0;
    let (mut strict, mut relax, mut outliers) = (0usize, 0usize, 0usize);
    for (p, g) in pred.vectors.iter().zip(&gt.vectors) {
        let e = (p - g).norm();
        let r = e / g.norm().max(RELATIVE_EPS);
        epe_sum += e;
        if e < thresholds.acc_strict_abs || r < thresholds.acc_strict_rel {
            strict += 1;
        }
        if e < thresholds.acc_relax_abs || r < thresholds.acc_relax_rel {
            relax += 1;
        }
        if e > thresholds.outlier_abs && r > thresholds.outlier_rel {
            outliers += 1;
        }
    }
    Ok(MetricsReport {
        epe3d: epe_sum / n,
        acc3ds: strict as f64 / n,
        acc3dr: relax as f64 / n,
        outliers3d: outliers as f64 / n,
        epe2d: None,
        acc2d: None,
        n_points: pred.len(),
    })
}

/// 2D metrics: project the source warped by the predicted and ground-truth
/// flows, measure per-point pixel error. Both warped clouds must stay in
/// front of the camera.
pub fn evaluate_2d(
    pred: &FlowField,
    gt: &FlowField,
    source: &PointCloud,
    intr: &CameraIntrinsics,
) -> Result<(f64, f64)> {
    evaluate_2d_with(pred, gt, source, intr, &MetricThresholds::default())
}

pub fn evaluate_2d_with(
    pred: &FlowField,
    gt: &FlowField,
    source: &PointCloud,
    intr: &CameraIntrinsics,
    thresholds: &MetricThresholds,
) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.len() != source.len() {
        return Err(Error::Shape(format!(
            "2D metrics need aligned inputs: {} pred, {} gt, {} source points",
            pred.len(),
            gt.len(),
            source.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("metrics need at least one point".into()));
    }
    let pred_px = project_points(&warp(source, pred)?, intr)?;
    let gt_px = project_points(&warp(source, gt)?, intr)?;
    let src_px = project_points(source, intr)?;
    let n = pred.len() as f64;
    let mut epe_sum = 0.0;
    let mut accurate = 0usize;
    for ((p, g), s) in pred_px.iter().zip(&gt_px).zip(&src_px) {
        let du = p.u - g.u;
        let dv = p.v - g.v;
        let e = (du * du + dv * dv).sqrt();
        let gt_du = g.u - s.u;
        let gt_dv = g.v - s.v;
        let gt_norm = (gt_du * gt_du + gt_dv * gt_dv).sqrt();
        let r = e / gt_norm.max(RELATIVE_EPS);
        epe_sum += e;
        if e < thresholds.acc2d_px || r < thresholds.acc2d_rel {
            accurate += 1;
        }
    }
    Ok((epe_sum / n, accurate as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn perfect_prediction() {
        let gt = FlowField::new(vec![
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(0.0, 0.2, 0.0),
        ]);
        let report = evaluate_3d(&gt, &gt).unwrap();
        assert_eq!(report.epe3d, 0.0);
        assert_eq!(report.acc3ds, 1.0);
        assert_eq!(report.acc3dr, 1.0);
        assert_eq!(report.outliers3d, 0.0);
    }

    #[test]
    fn relative_branch_counts_toward_strict() {
        // gt norm 2 m, error 0.08 m: absolute branch fails Acc3DS
        // (0.08 >= 0.05) but the relative branch passes (0.04 < 0.05);
        // Acc3DR passes outright (0.08 < 0.1).
        let gt = FlowField::new(vec![Vector3::new(2.0, 0.0, 0.0)]);
        let pred = FlowField::new(vec![Vector3::new(2.0, 0.08, 0.0)]);
        let e = (pred.vectors[0] - gt.vectors[0]).norm();
        assert!((e - 0.08).abs() < 1e-12);
        let report = evaluate_3d(&pred, &gt).unwrap();
        assert_eq!(report.acc3ds, 1.0);
        assert_eq!(report.acc3dr, 1.0);
        assert_eq!(report.outliers3d, 0.0);
    }

    #[test]
    fn four_point_fixture() {
        // Errors (0, 0.06, 0.2, 0.5) against unit-norm ground truths:
        // EPE3D 0.19, Acc3DS 0.25, Acc3DR 0.5, Outliers3D 0.25.
        let gt = FlowField::new(vec![Vector3::new(1.0, 0.0, 0.0); 4]);
        let pred = FlowField::new(vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 0.06, 0.0),
            Vector3::new(1.0, 0.2, 0.0),
            Vector3::new(1.0, 0.5, 0.0),
        ]);
        let report = evaluate_3d(&pred, &gt).unwrap();
        assert!((report.epe3d - 0.19).abs() < 1e-12);
        assert_eq!(report.acc3ds, 0.25);
        assert_eq!(report.acc3dr, 0.5);
        assert_eq!(report.outliers3d, 0.25);
    }

    #[test]
    fn strict_points_are_nested_in_relaxed() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(1..16);
            let gt = FlowField::new(
                (0..n)
                    .map(|_| {
                        Vector3::new(
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        )
                    })
                    .collect(),
            );
            let pred = FlowField::new(
                gt.vectors
                    .iter()
                    .map(|v| {
                        v + Vector3::new(
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.3..0.3),
                        )
                    })
                    .collect(),
            );
            let report = evaluate_3d(&pred, &gt).unwrap();
            assert!(report.acc3ds <= report.acc3dr);
        }
    }

    #[test]
    fn epe_is_permutation_invariant() {
        let gt = FlowField::new(vec![
            Vector3::new(0.3, 0.0, 0.1),
            Vector3::new(-0.2, 0.4, 0.0),
            Vector3::new(0.05, -0.1, 0.7),
        ]);
        let pred = FlowField::new(vec![
            Vector3::new(0.25, 0.02, 0.1),
            Vector3::new(-0.2, 0.38, 0.01),
            Vector3::new(0.0, -0.1, 0.72),
        ]);
        let base = evaluate_3d(&pred, &gt).unwrap();
        let perm = [2, 0, 1];
        let gt_p = FlowField::new(perm.iter().map(|&i| gt.vectors[i]).collect());
        let pred_p = FlowField::new(perm.iter().map(|&i| pred.vectors[i]).collect());
        let permuted = evaluate_3d(&pred_p, &gt_p).unwrap();
        assert!((base.epe3d - permuted.epe3d).abs() < 1e-12);
        assert_eq!(base.acc3dr, permuted.acc3dr);
    }

    #[test]
    fn epe_scales_linearly() {
        let gt = FlowField::new(vec![Vector3::new(0.5, -0.25, 1.0); 3]);
        let pred = FlowField::new(vec![Vector3::new(0.6, -0.20, 0.9); 3]);
        let base = evaluate_3d(&pred, &gt).unwrap();
        let s = 3.0;
        let gt_s = FlowField::new(gt.vectors.iter().map(|v| s * v).collect());
        let pred_s = FlowField::new(pred.vectors.iter().map(|v| s * v).collect());
        let scaled = evaluate_3d(&pred_s, &gt_s).unwrap();
        assert!((scaled.epe3d - s * base.epe3d).abs() < 1e-12);
    }

    #[test]
    fn evaluate_2d_perfect_and_near() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0);
        let source = PointCloud::new(vec![Vector3::new(0.0, 0.0, 1.0)]).unwrap();
        let gt = FlowField::new(vec![Vector3::new(0.0, 0.0, 0.0)]);
        let (epe, acc) = evaluate_2d(&gt, &gt, &source, &intr).unwrap();
        assert_eq!(epe, 0.0);
        assert_eq!(acc, 1.0);

        // Lateral 0.01 m difference at z = 1 under fx = 100 is about 1 px.
        let pred = FlowField::new(vec![Vector3::new(0.01, 0.0, 0.0)]);
        let (epe, acc) = evaluate_2d(&pred, &gt, &source, &intr).unwrap();
        assert!((epe - 1.0).abs() < 1e-9);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn doubling_fx_doubles_lateral_epe2d() {
        let source = PointCloud::new(vec![Vector3::new(0.0, 0.0, 1.0)]).unwrap();
        let gt = FlowField::new(vec![Vector3::new(0.0, 0.0, 0.0)]);
        let pred = FlowField::new(vec![Vector3::new(0.02, 0.0, 0.0)]);
        let intr1 = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0);
        let intr2 = CameraIntrinsics::new(200.0, 100.0, 50.0, 50.0);
        let (epe1, _) = evaluate_2d(&pred, &gt, &source, &intr1).unwrap();
        let (epe2, _) = evaluate_2d(&pred, &gt, &source, &intr2).unwrap();
        assert!((epe2 - 2.0 * epe1).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_reported() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0);
        let source = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.5)]).unwrap();
        let gt = FlowField::new(vec![Vector3::new(0.0, 0.0, -1.0)]);
        let err = evaluate_2d(&gt, &gt, &source, &intr).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { index: 0, .. }));
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let a = FlowField::zeros(2);
        let b = FlowField::zeros(3);
        assert!(matches!(evaluate_3d(&a, &b), Err(Error::Shape(_))));
    }
}
