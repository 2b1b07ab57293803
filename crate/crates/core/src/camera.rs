//! Pinhole camera model: back-projection of depth maps to pseudo-LiDAR
//! clouds, disparity-to-depth conversion, forward projection, and bilinear
//! depth sampling.
//!
//! Pixel convention: `(u, v)` are zero-based indices addressing pixel
//! centers, `u` along columns and `v` along rows. A depth value is the
//! z-coordinate of the surface point in the camera frame (x right, y down,
//! z forward), not the ray length.

use nalgebra::Vector3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Pinhole intrinsics, plus the stereo baseline when one exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Horizontal focal length (pixels).
    pub fx: f64,
    /// Vertical focal length (pixels).
    pub fy: f64,
    /// Principal point x (pixels).
    pub cx: f64,
    /// Principal point y (pixels).
    pub cy: f64,
    /// Stereo baseline (meters). Only required for disparity conversion.
    pub baseline: Option<f64>,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            baseline: None,
        }
    }

    pub fn with_baseline(mut self, baseline: f64) -> Self {
        self.baseline = Some(baseline);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0) || !(self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be finite and positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Config(format!(
                "principal point must be finite (cx = {}, cy = {})",
                self.cx, self.cy
            )));
        }
        if let Some(b) = self.baseline {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!(
                    "baseline must be finite and positive, got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// Dense per-pixel grid with a validity mask, row-major storage.
///
/// Shared layout for [`DepthMap`] and [`DisparityMap`]; invalid pixels exist
/// in the grid but are never read as values.
#[derive(Debug, Clone)]
pub struct Grid {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

/// Logical equality: same shape, same mask, same values at valid pixels.
/// Stored values behind invalid pixels (often NaN) do not participate.
impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.valid == other.valid
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.valid)
                .all(|((a, b), valid)| !valid || a == b)
    }
}

impl Grid {
    /// Builds a grid from raw values, deriving the mask: a pixel is valid iff
    /// its value is finite and strictly positive.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "grid of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// Builds a grid with an explicit mask. Values at invalid pixels are kept
    /// as stored but never read.
    pub fn from_parts(
        width: usize,
        height: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Shape(format!(
                "grid of {width}x{height} needs {} values and mask entries, got {} / {}",
                width * height,
                values.len(),
                valid.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        u < self.width && v < self.height && self.valid[v * self.width + u]
    }

    /// Value at `(u, v)` if the pixel is in bounds and valid.
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        if self.is_valid(u, v) {
            Some(self.values[v * self.width + u])
        } else {
            None
        }
    }

    /// Raw stored value, ignoring the mask. Used by I/O and error reporting.
    pub fn raw(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }
}

/// Per-pixel depth in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(pub Grid);

/// Per-pixel stereo disparity in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap(pub Grid);

impl std::ops::Deref for DepthMap {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

impl std::ops::Deref for DisparityMap {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// A point expressed in image coordinates: fractional pixel position plus the
/// depth it carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Valid depth interval applied during disparity conversion; depths outside
/// it are marked invalid rather than kept. Distant pixels are the unreliable
/// ones, so the cap removes them deterministically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 90.0,
        }
    }
}

/// Back-projects every valid pixel on the stride grid into a 3D point:
/// `x = d (u - cx) / fx`, `y = d (v - cy) / fy`, `z = d`.
///
/// Output is row-major over the strided pixels; each point records its
/// source pixel. An all-invalid map yields an empty cloud, not an error, but
/// a non-finite or non-positive depth at a pixel flagged valid is rejected.
pub fn backproject_depth_map(
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    stride: usize,
) -> Result<PointCloud> {
    intr.validate()?;
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in (0..depth.height()).step_by(stride) {
        for u in (0..depth.width()).step_by(stride) {
            if !depth.is_valid(u, v) {
                continue;
            }
            let d = depth.raw(u, v);
            if !d.is_finite() || d <= 0.0 {
                return Err(Error::MalformedInput(format!(
                    "depth {d} at valid-flagged pixel ({u}, {v})"
                )));
            }
            let x = d * (u as f64 - intr.cx) / intr.fx;
            let y = d * (v as f64 - intr.cy) / intr.fy;
            points.push(Vector3::new(x, y, d));
            pixels.push([u as f64, v as f64]);
        }
    }
    PointCloud::with_source_pixels(points, pixels)
}

/// Converts a disparity map to a depth map: `d = b * fx / z`.
///
/// Pixels whose depth would fall outside `range` are invalidated, as are
/// pixels with non-positive disparity (no division is attempted for them).
pub fn disparity_to_depth(
    disp: &DisparityMap,
    intr: &CameraIntrinsics,
    range: DepthRange,
) -> Result<DepthMap> {
    intr.validate()?;
    let baseline = intr.baseline.ok_or_else(|| {
        Error::Config("disparity conversion requires a stereo baseline".into())
    })?;
    let mut values = vec![f64::NAN; disp.width() * disp.height()];
    let mut valid = vec![false; disp.width() * disp.height()];
    for v in 0..disp.height() {
        for u in 0..disp.width() {
            if !disp.is_valid(u, v) {
                continue;
            }
            let z = disp.raw(u, v);
            if !z.is_finite() || z <= 0.0 {
                continue; // singularity guard: marked invalid, no division
            }
            let d = baseline * intr.fx / z;
            if d < range.min_depth || d > range.max_depth {
                continue;
            }
            values[v * disp.width() + u] = d;
            valid[v * disp.width() + u] = true;
        }
    }
    Ok(DepthMap(Grid::from_parts(
        disp.width(),
        disp.height(),
        values,
        valid,
    )?))
}

/// Projects a single camera-frame point to image coordinates. Exact inverse
/// of the back-projection: `u = x fx / z + cx`, `v = y fy / z + cy`.
pub fn project_point(point: &Vector3<f64>, intr: &CameraIntrinsics) -> PixelSample {
    PixelSample {
        u: point.x * intr.fx / point.z + intr.cx,
        v: point.y * intr.fy / point.z + intr.cy,
        depth: point.z,
    }
}

/// Projects every point of a cloud, preserving order. A point with `z <= 0`
/// cannot be projected and is reported with its index.
pub fn project_points(cloud: &PointCloud, intr: &CameraIntrinsics) -> Result<Vec<PixelSample>> {
    intr.validate()?;
    cloud
        .points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p.z > 0.0 {
                Ok(project_point(p, intr))
            } else {
                Err(Error::BehindCamera { index, z: p.z })
            }
        })
        .collect()
}

/// The four corners of the bilinear cell containing `(u, v)`, clamped so the
/// cell stays inside the grid. Returns the cell origin; weights derive from
/// the offset to it.
pub(crate) fn bilinear_cell(map: &Grid, u: f64, v: f64) -> Option<(usize, usize)> {
    let w = map.width();
    let h = map.height();
    if w == 0 || h == 0 {
        return None;
    }
    if !(u >= 0.0 && v >= 0.0) || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return None;
    }
    let u0 = (u.floor() as usize).min(w.saturating_sub(2));
    let v0 = (v.floor() as usize).min(h.saturating_sub(2));
    Some((u0, v0))
}

/// Reads the cell corners `[c00, c10, c01, c11]`; `None` when any corner is
/// invalid. Degenerate 1-wide or 1-tall grids duplicate the edge row/column.
pub(crate) fn cell_corners(map: &Grid, u0: usize, v0: usize) -> Option<[f64; 4]> {
    let u1 = (u0 + 1).min(map.width() - 1);
    let v1 = (v0 + 1).min(map.height() - 1);
    Some([
        map.get(u0, v0)?,
        map.get(u1, v0)?,
        map.get(u0, v1)?,
        map.get(u1, v1)?,
    ])
}

pub(crate) fn bilinear_from_corners(corners: &[f64; 4], au: f64, av: f64) -> f64 {
    let [c00, c10, c01, c11] = *corners;
    (1.0 - au) * (1.0 - av) * c00 + au * (1.0 - av) * c10 + (1.0 - au) * av * c01 + au * av * c11
}

/// Standard 4-neighbor bilinear interpolation of the grid at `(u, v)`.
///
/// Absent (not an error) when the query falls outside `[0, W-1] x [0, H-1]`
/// or any of the four neighbors is invalid. A query exactly on a valid node
/// returns that pixel's value directly.
pub fn bilinear_sample(map: &Grid, u: f64, v: f64) -> Option<f64> {
    if u.fract() == 0.0 && v.fract() == 0.0 && u >= 0.0 && v >= 0.0 {
        if let Some(value) = map.get(u as usize, v as usize) {
            return Some(value);
        }
    }
    let (u0, v0) = bilinear_cell(map, u, v)?;
    let corners = cell_corners(map, u0, v0)?;
    Some(bilinear_from_corners(&corners, u - u0 as f64, v - v0 as f64))
}
