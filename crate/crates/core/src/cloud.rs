//! Point-cloud container and the refinement stages: edge cropping,
//! statistical outlier removal, and random subsampling.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::build_index;

/// Ordered 3D points in the camera frame (meters), optionally annotated with
/// the pixel each point was back-projected from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Parallel `(u, v)` provenance, when the cloud came from a depth map.
    pub source_pixels: Option<Vec<[f64; 2]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::MalformedInput(format!(
                    "point {i} has non-finite coordinates ({}, {}, {})",
                    p.x, p.y, p.z
                )));
            }
        }
        Ok(Self {
            points,
            source_pixels: None,
        })
    }

    pub fn with_source_pixels(points: Vec<Vector3<f64>>, pixels: Vec<[f64; 2]>) -> Result<Self> {
        if pixels.len() != points.len() {
            return Err(Error::Shape(format!(
                "{} source pixels for {} points",
                pixels.len(),
                points.len()
            )));
        }
        let mut cloud = Self::new(points)?;
        cloud.source_pixels = Some(pixels);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The subset selected by `keep`, order preserved, provenance carried
    /// along.
    pub fn filter(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::Shape(format!(
                "mask of {} entries for {} points",
                keep.len(),
                self.len()
            )));
        }
        let points = self
            .points
            .iter()
            .zip(keep)
            .filter_map(|(p, k)| k.then_some(*p))
            .collect();
        let source_pixels = self.source_pixels.as_ref().map(|px| {
            px.iter()
                .zip(keep)
                .filter_map(|(p, k)| k.then_some(*p))
                .collect()
        });
        Ok(Self {
            points,
            source_pixels,
        })
    }

    /// The subset at `indices` (which must be sorted if order preservation
    /// matters to the caller; this function copies in the order given).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            source_pixels: self
                .source_pixels
                .as_ref()
                .map(|px| indices.iter().map(|&i| px[i]).collect()),
        }
    }
}

/// Axis-aligned crop region; `None` on a side means unbounded. Bounds are
/// closed: a point exactly on a bound is kept.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CropBox {
    pub min: [Option<f64>; 3],
    pub max: [Option<f64>; 3],
}

impl CropBox {
    pub fn new(min: [Option<f64>; 3], max: [Option<f64>; 3]) -> Result<Self> {
        for axis in 0..3 {
            if let (Some(lo), Some(hi)) = (min[axis], max[axis]) {
                if lo > hi {
                    return Err(Error::Config(format!(
                        "crop box min {lo} exceeds max {hi} on axis {axis}"
                    )));
                }
            }
        }
        Ok(Self { min, max })
    }

    /// No bounds; cropping with this box is the identity.
    pub fn unbounded() -> Self {
        Self::default()
    }

    /// Driving-scene default in the camera frame (x right, y down,
    /// z forward): x in [-30, 30], y in [-3, 3], z in [0, 60] meters.
    pub fn driving_default() -> Self {
        Self {
            min: [Some(-30.0), Some(-3.0), Some(0.0)],
            max: [Some(30.0), Some(3.0), Some(60.0)],
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|axis| {
            self.min[axis].is_none_or(|lo| p[axis] >= lo)
                && self.max[axis].is_none_or(|hi| p[axis] <= hi)
        })
    }
}

/// Which population the outlier threshold is computed over. See
/// [`remove_outliers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// One threshold from the mean and sample standard deviation of all
    /// per-point mean neighbor distances. This is the reading that actually
    /// discriminates outliers and the default.
    #[default]
    Global,
    /// A per-point threshold from that point's own m neighbor distances
    /// (1/(m-1) normalization), compared against its nearest-neighbor
    /// distance. Kept selectable for comparison; since the nearest distance
    /// never exceeds the mean distance, this variant removes nothing for
    /// alpha >= 0.
    PerPoint,
}

/// Statistical outlier removal parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierParams {
    /// Neighbor count m.
    pub m: usize,
    /// Threshold scaling factor alpha.
    pub alpha: f64,
    #[serde(default)]
    pub scope: ThresholdScope,
}

impl Default for OutlierParams {
    fn default() -> Self {
        // m = 8, alpha = 2 is the best-performing cell of the removal
        // parameter sweep.
        Self {
            m: 8,
            alpha: 2.0,
            scope: ThresholdScope::Global,
        }
    }
}

impl OutlierParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config("outlier neighbor count m must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "outlier alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Result of [`remove_outliers`].
#[derive(Debug, Clone)]
pub struct OutlierRemoval {
    pub cloud: PointCloud,
    pub kept: Vec<bool>,
    /// The distance threshold actually applied. For the per-point scope this
    /// is the mean of the per-point thresholds.
    pub d_max: f64,
}

/// Keeps exactly the points inside `bounds` (closed intervals); returns the
/// surviving cloud and the kept mask, order preserved.
pub fn crop_edges(cloud: &PointCloud, bounds: &CropBox) -> (PointCloud, Vec<bool>) {
    let kept: Vec<bool> = cloud.points.iter().map(|p| bounds.contains(p)).collect();
    let filtered = cloud.filter(&kept).expect("mask built from the same cloud");
    (filtered, kept)
}

/// Removes statistical outliers.
///
/// For each point the mean Euclidean distance to its `m` nearest neighbors
/// (excluding itself) is computed. Under the global scope the threshold is
/// `d_max = mean + alpha * std` over all those per-point means (sample
/// standard deviation, 1/(N-1)); a point is removed iff its mean neighbor
/// distance is strictly greater than `d_max`.
pub fn remove_outliers(cloud: &PointCloud, params: &OutlierParams) -> Result<OutlierRemoval> {
    params.validate()?;
    let n = cloud.len();
    if n < params.m + 1 {
        return Err(Error::InsufficientPoints(format!(
            "outlier removal with m = {} needs at least {} points, got {n}",
            params.m,
            params.m + 1
        )));
    }
    let index = build_index(cloud)?;
    // (mean neighbor distance, nearest distance, per-point std of the m
    // neighbor distances)
    let stats: Vec<(f64, f64, f64)> = cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let hits = index.knn_excluding(p, params.m, Some(i));
            let dists: Vec<f64> = hits.iter().map(|(_, d2)| d2.sqrt()).collect();
            let mean = dists.iter().sum::<f64>() / dists.len() as f64;
            let nearest = dists[0];
            let var = if dists.len() > 1 {
                dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                    / (dists.len() - 1) as f64
            } else {
                0.0
            };
            (mean, nearest, var.sqrt())
        })
        .collect();

    let (kept, d_max) = match params.scope {
        ThresholdScope::Global => {
            let mu = stats.iter().map(|s| s.0).sum::<f64>() / n as f64;
            let var = stats.iter().map(|s| (s.0 - mu) * (s.0 - mu)).sum::<f64>()
                / (n - 1) as f64;
            let d_max = mu + params.alpha * var.sqrt();
            let kept: Vec<bool> = stats.iter().map(|s| s.0 <= d_max).collect();
            (kept, d_max)
        }
        ThresholdScope::PerPoint => {
            let thresholds: Vec<f64> = stats
                .iter()
                .map(|(mean, _, std)| mean + params.alpha * std)
                .collect();
            let kept: Vec<bool> = stats
                .iter()
                .zip(&thresholds)
                .map(|((_, nearest, _), t)| nearest <= t)
                .collect();
            let d_max = thresholds.iter().sum::<f64>() / n as f64;
            (kept, d_max)
        }
    };
    let filtered = cloud.filter(&kept)?;
    Ok(OutlierRemoval {
        cloud: filtered,
        kept,
        d_max,
    })
}

/// Uniform sample without replacement of `n` points, deterministic for a
/// fixed seed, relative order preserved. Identity when the cloud already has
/// at most `n` points.
pub fn random_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    if cloud.len() <= n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, cloud.len(), n).into_vec();
    indices.sort_unstable();
    Ok(cloud.select(&indices))
}
