//! The warping operator and the four self-supervised scene-flow losses:
//! Chamfer, flow smoothness, Laplacian-coordinate regularization, and
//! disparity consistency. Each loss yields a scalar and an analytic gradient
//! with respect to the flow field.
//!
//! The Chamfer, Laplacian, and disparity losses are piecewise smooth: their
//! discrete choices (nearest-neighbor assignments, interpolation weights,
//! bilinear cells) change as points move. Gradients here use the standard
//! subgradient treatment and hold those choices fixed at the current
//! iterate. [`LossSetup::freeze`] captures the choices explicitly so a
//! solver can reuse them across several descent steps and so gradient
//! checks can difference the exact same function the gradient belongs to.
//! The smoothness loss has position-based (hence constant) neighborhoods
//! and its gradient is exact.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    bilinear_cell, bilinear_from_corners, cell_corners, project_point, CameraIntrinsics, DepthMap,
};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::index::{build_index, NnIndex};

/// Guard added to inverse-distance weights so coincident points stay finite.
pub const IDW_EPSILON: f64 = 1e-8;

/// Per-point 3D motion vectors, index-aligned with a source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Vec<Vector3<f64>>,
}

impl FlowField {
    pub fn new(vectors: Vec<Vector3<f64>>) -> Self {
        Self { vectors }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.vectors
            .iter()
            .all(|v| v.x.is_finite() && v.y.is_finite() && v.z.is_finite())
    }
}

/// Loss term weights and the per-level weights of the multi-level total.
/// `level_weights[0]` belongs to the finest level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_chamfer: f64,
    pub lambda_smooth: f64,
    pub lambda_laplace: f64,
    pub lambda_disp: f64,
    pub level_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_chamfer: 1.0,
            lambda_smooth: 0.2,
            lambda_laplace: 0.2,
            lambda_disp: 1.0,
            level_weights: vec![0.02, 0.04, 0.08, 0.16],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_chamfer,
            self.lambda_smooth,
            self.lambda_laplace,
            self.lambda_disp,
        ];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {all:?}")));
        }
        if self.level_weights.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("level weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Size of the local neighborhood R(.) used by the smoothness and Laplacian
/// terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub k: usize,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        Self { k: 8 }
    }
}

impl NeighborhoodSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("neighborhood size k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether the two Chamfer sums stay literal sums or are normalized to
/// per-point means. The literal sum is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChamferVariant {
    #[default]
    Sum,
    Mean,
}

/// Which depth the sampled target depth is compared against in the
/// disparity-consistency residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisparityMode {
    /// Compare against the warped point's z: the physically consistent
    /// residual. Default.
    #[default]
    WarpedZ,
    /// Compare against the source point's z, the literal printed form.
    Literal,
}

/// Raw per-term values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub chamfer: f64,
    pub smoothness: f64,
    pub laplacian: f64,
    pub disparity_consistency: f64,
    pub disparity_contributing: usize,
}

impl LossComponents {
    pub fn weighted_total(&self, weights: &LossWeights) -> f64 {
        weights.lambda_chamfer * self.chamfer
            + weights.lambda_smooth * self.smoothness
            + weights.lambda_laplace * self.laplacian
            + weights.lambda_disp * self.disparity_consistency
    }
}

/// One full loss evaluation: raw components, their weighted total, and the
/// gradient of that total with respect to the flow field.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub chamfer: f64,
    pub smoothness: f64,
    pub laplacian: f64,
    pub disparity_consistency: f64,
    pub total: f64,
    pub disparity_contributing: usize,
    pub gradient: FlowField,
}

/// Warps a cloud by a flow field: pointwise sum, provenance carried along.
pub fn warp(cloud: &PointCloud, flow: &FlowField) -> Result<PointCloud> {
    if flow.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "flow of {} vectors for cloud of {} points",
            flow.len(),
            cloud.len()
        )));
    }
    Ok(PointCloud {
        points: cloud
            .points
            .iter()
            .zip(&flow.vectors)
            .map(|(p, f)| p + f)
            .collect(),
        source_pixels: cloud.source_pixels.clone(),
    })
}

// ---------------------------------------------------------------------------
// Assignment helpers (the discrete choices that get frozen)
// ---------------------------------------------------------------------------

fn nearest_assignments(queries: &[Vector3<f64>], index: &NnIndex) -> Vec<u32> {
    queries
        .par_iter()
        .map(|q| index.knn(q, 1)[0].0 as u32)
        .collect()
}

fn self_neighborhoods(points: &[Vector3<f64>], index: &NnIndex, k: usize) -> Vec<Vec<u32>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            index
                .knn_excluding(p, k, Some(i))
                .into_iter()
                .map(|(j, _)| j as u32)
                .collect()
        })
        .collect()
}

/// Laplacian coordinate vector of point `i`: the point minus the centroid of
/// its `k` nearest neighbors (excluding itself). Translation-invariant and
/// rotation-equivariant.
pub fn laplacian_vector(
    cloud: &PointCloud,
    i: usize,
    nbhd: NeighborhoodSpec,
    index: &NnIndex,
) -> Vector3<f64> {
    let p = &cloud.points[i];
    let hits = index.knn_excluding(p, nbhd.k, Some(i));
    let mut centroid = Vector3::zeros();
    for (j, _) in &hits {
        centroid += cloud.points[*j];
    }
    centroid /= hits.len() as f64;
    p - centroid
}

fn all_laplacians(points: &[Vector3<f64>], index: &NnIndex, k: usize) -> Vec<Vector3<f64>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let hits = index.knn_excluding(p, k, Some(i));
            let mut centroid = Vector3::zeros();
            for (j, _) in &hits {
                centroid += points[*j];
            }
            centroid /= hits.len() as f64;
            p - centroid
        })
        .collect()
}

/// Inverse-distance-weighted average of `values` attached to the `k` nearest
/// points of `index` around `query`. Weights are `1 / (d + eps)`, normalized.
fn idw_interpolate(
    query: &Vector3<f64>,
    index: &NnIndex,
    values: &[Vector3<f64>],
    k: usize,
) -> Vector3<f64> {
    let hits = index.knn(query, k);
    let mut total = 0.0;
    let mut acc = Vector3::zeros();
    for (j, d2) in &hits {
        let w = 1.0 / (d2.sqrt() + IDW_EPSILON);
        total += w;
        acc += w * values[*j];
    }
    acc / total
}

#[derive(Debug, Clone, Copy)]
struct FrozenCell {
    u0: f64,
    v0: f64,
    corners: [f64; 4],
}

// ---------------------------------------------------------------------------
// Term evaluators. Each computes the raw scalar and optionally accumulates
// `lambda *` gradient into `grad`. Reduction order is sequential by index so
// results are bitwise deterministic.
// ---------------------------------------------------------------------------

fn chamfer_term(
    warped: &[Vector3<f64>],
    target: &[Vector3<f64>],
    fwd_nn: &[u32],
    bwd_nn: &[u32],
    variant: ChamferVariant,
    mut grad: Option<(&mut [Vector3<f64>], f64)>,
) -> f64 {
    let (fwd_scale, bwd_scale) = match variant {
        ChamferVariant::Sum => (1.0, 1.0),
        ChamferVariant::Mean => (1.0 / warped.len() as f64, 1.0 / target.len() as f64),
    };
    let mut fwd = 0.0;
    for (i, w) in warped.iter().enumerate() {
        let diff = w - target[fwd_nn[i] as usize];
        fwd += diff.norm_squared();
        if let Some((g, lambda)) = grad.as_mut() {
            g[i] += *lambda * fwd_scale * 2.0 * diff;
        }
    }
    let mut bwd = 0.0;
    for (j, t) in target.iter().enumerate() {
        let wi = bwd_nn[j] as usize;
        let diff = warped[wi] - t;
        bwd += diff.norm_squared();
        if let Some((g, lambda)) = grad.as_mut() {
            g[wi] += *lambda * bwd_scale * 2.0 * diff;
        }
    }
    fwd * fwd_scale + bwd * bwd_scale
}

fn smoothness_term(
    flow: &[Vector3<f64>],
    neighborhoods: &[Vec<u32>],
    mut grad: Option<(&mut [Vector3<f64>], f64)>,
) -> f64 {
    let mut loss = 0.0;
    for (i, nbrs) in neighborhoods.iter().enumerate() {
        let inv = 1.0 / nbrs.len() as f64;
        for &j in nbrs {
            let diff = flow[i] - flow[j as usize];
            loss += inv * diff.norm_squared();
            if let Some((g, lambda)) = grad.as_mut() {
                let contrib = *lambda * inv * 2.0 * diff;
                g[i] += contrib;
                g[j as usize] -= contrib;
            }
        }
    }
    loss
}

fn laplacian_term(
    warped: &[Vector3<f64>],
    neighborhoods: &[Vec<u32>],
    target_vectors: &[Vector3<f64>],
    mut grad: Option<(&mut [Vector3<f64>], f64)>,
) -> f64 {
    let mut loss = 0.0;
    for (i, nbrs) in neighborhoods.iter().enumerate() {
        let inv = 1.0 / nbrs.len() as f64;
        let mut centroid = Vector3::zeros();
        for &j in nbrs {
            centroid += warped[j as usize];
        }
        let residual = warped[i] - centroid * inv - target_vectors[i];
        let norm = residual.norm();
        loss += norm;
        if norm > 0.0 {
            if let Some((g, lambda)) = grad.as_mut() {
                let unit = residual / norm;
                g[i] += *lambda * unit;
                for &j in nbrs {
                    g[j as usize] -= *lambda * inv * unit;
                }
            }
        }
    }
    loss
}

/// Evaluates the disparity residuals over the frozen contributing set.
/// Within the frozen cell the sampled depth is smooth in the projected
/// coordinates, and the projection is smooth in the flow, so the only frozen
/// choices are the cell and the set itself.
fn disparity_term(
    warped: &[Vector3<f64>],
    reference_z: &[f64],
    cells: &[Option<FrozenCell>],
    contributing: usize,
    intr: &CameraIntrinsics,
    mode: DisparityMode,
    mut grad: Option<(&mut [Vector3<f64>], f64)>,
) -> f64 {
    if contributing == 0 {
        return 0.0;
    }
    let inv = 1.0 / contributing as f64;
    let mut loss = 0.0;
    for (i, cell) in cells.iter().enumerate() {
        let Some(cell) = cell else { continue };
        let w = &warped[i];
        if w.z <= 1e-12 {
            // Drifted behind the camera inside a frozen window; its term is
            // dropped for this evaluation.
            continue;
        }
        let sample = project_point(w, intr);
        let au = sample.u - cell.u0;
        let av = sample.v - cell.v0;
        let sampled = bilinear_from_corners(&cell.corners, au, av);
        let residual = match mode {
            DisparityMode::WarpedZ => sampled - w.z,
            DisparityMode::Literal => sampled - reference_z[i],
        };
        loss += inv * residual.abs();
        let Some((g, lambda)) = grad.as_mut() else {
            continue;
        };
        let sign = if residual > 0.0 {
            1.0
        } else if residual < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign == 0.0 {
            continue;
        }
        let [c00, c10, c01, c11] = cell.corners;
        let ds_du = (1.0 - av) * (c10 - c00) + av * (c11 - c01);
        let ds_dv = (1.0 - au) * (c01 - c00) + au * (c11 - c10);
        // Projection Jacobian at the current warped position.
        let du_dw = Vector3::new(intr.fx / w.z, 0.0, -intr.fx * w.x / (w.z * w.z));
        let dv_dw = Vector3::new(0.0, intr.fy / w.z, -intr.fy * w.y / (w.z * w.z));
        let mut dr_dw = ds_du * du_dw + ds_dv * dv_dw;
        if mode == DisparityMode::WarpedZ {
            dr_dw.z -= 1.0;
        }
        g[i] += *lambda * inv * sign * dr_dw;
    }
    loss
}

// ---------------------------------------------------------------------------
// Setup + frozen state
// ---------------------------------------------------------------------------

/// Target depth map and intrinsics enabling the disparity-consistency term.
#[derive(Debug, Clone, Copy)]
pub struct DisparityTarget<'a> {
    pub depth: &'a DepthMap,
    pub intr: &'a CameraIntrinsics,
}

/// Per-(source, target) pair context: everything that does not move when the
/// flow moves. Build once per pyramid level.
pub struct LossSetup<'a> {
    pub source: &'a PointCloud,
    pub target: &'a PointCloud,
    pub target_index: &'a NnIndex,
    pub weights: LossWeights,
    pub nbhd: NeighborhoodSpec,
    pub chamfer_variant: ChamferVariant,
    pub disparity_mode: DisparityMode,
    pub disparity: Option<DisparityTarget<'a>>,
    source_neighborhoods: Vec<Vec<u32>>,
    target_laplacians: Vec<Vector3<f64>>,
}

impl<'a> LossSetup<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        source: &'a PointCloud,
        target: &'a PointCloud,
        target_index: &'a NnIndex,
        nbhd: NeighborhoodSpec,
        mut weights: LossWeights,
        chamfer_variant: ChamferVariant,
        disparity_mode: DisparityMode,
        disparity: Option<DisparityTarget<'a>>,
    ) -> Result<Self> {
        nbhd.validate()?;
        weights.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::EmptyInput(
                "loss evaluation needs non-empty source and target clouds".into(),
            ));
        }
        if disparity.is_none() {
            weights.lambda_disp = 0.0;
        }
        if let Some(d) = &disparity {
            d.intr.validate()?;
        }
        if weights.lambda_smooth > 0.0 && source.len() <= nbhd.k {
            return Err(Error::InsufficientPoints(format!(
                "smoothness with k = {} needs more than {} source points",
                nbhd.k,
                nbhd.k
            )));
        }
        if weights.lambda_laplace > 0.0 && (source.len() <= nbhd.k || target.len() <= nbhd.k) {
            return Err(Error::InsufficientPoints(format!(
                "laplacian regularization with k = {} needs more than {} points per cloud",
                nbhd.k, nbhd.k
            )));
        }
        let source_index;
        let source_neighborhoods = if weights.lambda_smooth > 0.0 {
            source_index = build_index(source)?;
            self_neighborhoods(&source.points, &source_index, nbhd.k)
        } else {
            Vec::new()
        };
        let target_laplacians = if weights.lambda_laplace > 0.0 {
            all_laplacians(&target.points, target_index, nbhd.k)
        } else {
            Vec::new()
        };
        Ok(Self {
            source,
            target,
            target_index,
            weights,
            nbhd,
            chamfer_variant,
            disparity_mode,
            disparity,
            source_neighborhoods,
            target_laplacians,
        })
    }

    /// Warped positions under `flow`.
    fn warped(&self, flow: &FlowField) -> Result<Vec<Vector3<f64>>> {
        if flow.len() != self.source.len() {
            return Err(Error::Shape(format!(
                "flow of {} vectors for source of {} points",
                flow.len(),
                self.source.len()
            )));
        }
        Ok(self
            .source
            .points
            .iter()
            .zip(&flow.vectors)
            .map(|(p, f)| p + f)
            .collect())
    }

    /// Captures the discrete correspondences at the warped positions under
    /// `flow`: Chamfer nearest-neighbor assignments both ways, warped-cloud
    /// neighborhoods, the interpolated target Laplacian vectors, and the
    /// bilinear cells of the disparity term.
    pub fn freeze(&self, flow: &FlowField) -> Result<FrozenLosses> {
        let warped = self.warped(flow)?;
        if warped
            .iter()
            .any(|w| !(w.x.is_finite() && w.y.is_finite() && w.z.is_finite()))
        {
            return Err(Error::MalformedInput(
                "warped cloud has non-finite coordinates".into(),
            ));
        }
        let need_warped_index =
            self.weights.lambda_chamfer > 0.0 || self.weights.lambda_laplace > 0.0;
        let warped_index = if need_warped_index {
            Some(NnIndex::build(&warped)?)
        } else {
            None
        };

        let (fwd_nn, bwd_nn) = if self.weights.lambda_chamfer > 0.0 {
            (
                nearest_assignments(&warped, self.target_index),
                nearest_assignments(&self.target.points, warped_index.as_ref().unwrap()),
            )
        } else {
            (Vec::new(), Vec::new())
        };

        let (lap_neighborhoods, lap_targets) = if self.weights.lambda_laplace > 0.0 {
            let index = warped_index.as_ref().unwrap();
            let nbrs = self_neighborhoods(&warped, index, self.nbhd.k);
            let targets: Vec<Vector3<f64>> = warped
                .par_iter()
                .map(|w| {
                    idw_interpolate(w, self.target_index, &self.target_laplacians, self.nbhd.k)
                })
                .collect();
            (nbrs, targets)
        } else {
            (Vec::new(), Vec::new())
        };

        let mut disparity_contributing = 0;
        let disparity_cells = if self.weights.lambda_disp > 0.0 {
            let d = self.disparity.as_ref().unwrap();
            let cells: Vec<Option<FrozenCell>> = warped
                .par_iter()
                .map(|w| {
                    if w.z <= 0.0 {
                        return None;
                    }
                    let sample = project_point(w, d.intr);
                    let (u0, v0) = bilinear_cell(d.depth, sample.u, sample.v)?;
                    let corners = cell_corners(d.depth, u0, v0)?;
                    Some(FrozenCell {
                        u0: u0 as f64,
                        v0: v0 as f64,
                        corners,
                    })
                })
                .collect();
            disparity_contributing = cells.iter().filter(|c| c.is_some()).count();
            cells
        } else {
            Vec::new()
        };

        Ok(FrozenLosses {
            fwd_nn,
            bwd_nn,
            lap_neighborhoods,
            lap_targets,
            disparity_cells,
            disparity_contributing,
        })
    }

    /// Loss components and gradient at `flow`, with correspondences captured
    /// at `flow` itself. Equivalent to `freeze` followed by `report`.
    pub fn evaluate(&self, flow: &FlowField) -> Result<LossReport> {
        let frozen = self.freeze(flow)?;
        frozen.report(self, flow)
    }
}

/// Discrete correspondences captured by [`LossSetup::freeze`]. Evaluations
/// against a frozen state are smooth in the flow (up to the kinks of the
/// unsquared norms), which is what backtracking line search and finite
/// difference checks need.
pub struct FrozenLosses {
    fwd_nn: Vec<u32>,
    bwd_nn: Vec<u32>,
    lap_neighborhoods: Vec<Vec<u32>>,
    lap_targets: Vec<Vector3<f64>>,
    disparity_cells: Vec<Option<FrozenCell>>,
    disparity_contributing: usize,
}

impl FrozenLosses {
    pub fn disparity_contributing(&self) -> usize {
        self.disparity_contributing
    }

    fn components_impl(
        &self,
        setup: &LossSetup,
        flow: &FlowField,
        mut grad: Option<&mut [Vector3<f64>]>,
    ) -> Result<LossComponents> {
        let warped = setup.warped(flow)?;
        let w = &setup.weights;
        let chamfer = if w.lambda_chamfer > 0.0 {
            chamfer_term(
                &warped,
                &setup.target.points,
                &self.fwd_nn,
                &self.bwd_nn,
                setup.chamfer_variant,
                grad.as_deref_mut().map(|g| (g, w.lambda_chamfer)),
            )
        } else {
            0.0
        };
        let smoothness = if w.lambda_smooth > 0.0 {
            smoothness_term(
                &flow.vectors,
                &setup.source_neighborhoods,
                grad.as_deref_mut().map(|g| (g, w.lambda_smooth)),
            )
        } else {
            0.0
        };
        let laplacian = if w.lambda_laplace > 0.0 {
            laplacian_term(
                &warped,
                &self.lap_neighborhoods,
                &self.lap_targets,
                grad.as_deref_mut().map(|g| (g, w.lambda_laplace)),
            )
        } else {
            0.0
        };
        let disparity = if w.lambda_disp > 0.0 {
            let d = setup.disparity.as_ref().unwrap();
            let reference_z: Vec<f64> = match setup.disparity_mode {
                DisparityMode::WarpedZ => Vec::new(),
                DisparityMode::Literal => setup.source.points.iter().map(|p| p.z).collect(),
            };
            disparity_term(
                &warped,
                &reference_z,
                &self.disparity_cells,
                self.disparity_contributing,
                d.intr,
                setup.disparity_mode,
                grad.map(|g| (g, w.lambda_disp)),
            )
        } else {
            0.0
        };
        Ok(LossComponents {
            chamfer,
            smoothness,
            laplacian,
            disparity_consistency: disparity,
            disparity_contributing: self.disparity_contributing,
        })
    }

    /// Raw components at `flow` under the frozen correspondences.
    pub fn components(&self, setup: &LossSetup, flow: &FlowField) -> Result<LossComponents> {
        self.components_impl(setup, flow, None)
    }

    /// The weighted total at `flow` under the frozen correspondences.
    pub fn total(&self, setup: &LossSetup, flow: &FlowField) -> Result<f64> {
        Ok(self.components(setup, flow)?.weighted_total(&setup.weights))
    }

    /// Components, weighted total, and gradient of the weighted total.
    pub fn report(&self, setup: &LossSetup, flow: &FlowField) -> Result<LossReport> {
        let mut gradient = vec![Vector3::zeros(); flow.len()];
        let components = self.components_impl(setup, flow, Some(&mut gradient))?;
        Ok(LossReport {
            chamfer: components.chamfer,
            smoothness: components.smoothness,
            laplacian: components.laplacian,
            disparity_consistency: components.disparity_consistency,
            total: components.weighted_total(&setup.weights),
            disparity_contributing: components.disparity_contributing,
            gradient: FlowField::new(gradient),
        })
    }
}

// ---------------------------------------------------------------------------
// Standalone per-loss entry points
// ---------------------------------------------------------------------------

/// Two-sided Chamfer loss between a warped cloud and the target, as literal
/// sums of squared nearest-neighbor distances. The gradient is with respect
/// to the warped points, correspondences frozen at the current positions.
pub fn chamfer_loss(
    warped: &PointCloud,
    target: &PointCloud,
    target_index: &NnIndex,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    chamfer_loss_with(warped, target, target_index, ChamferVariant::Sum)
}

pub fn chamfer_loss_with(
    warped: &PointCloud,
    target: &PointCloud,
    target_index: &NnIndex,
    variant: ChamferVariant,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if warped.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput("chamfer loss needs non-empty clouds".into()));
    }
    let warped_index = build_index(warped)?;
    let fwd_nn = nearest_assignments(&warped.points, target_index);
    let bwd_nn = nearest_assignments(&target.points, &warped_index);
    let mut grad = vec![Vector3::zeros(); warped.len()];
    let value = chamfer_term(
        &warped.points,
        &target.points,
        &fwd_nn,
        &bwd_nn,
        variant,
        Some((&mut grad, 1.0)),
    );
    Ok((value, grad))
}

/// Flow smoothness over source-cloud neighborhoods. Neighborhoods are
/// position based, hence constant with respect to the flow, and the gradient
/// is exact.
pub fn smoothness_loss(
    source: &PointCloud,
    flow: &FlowField,
    nbhd: NeighborhoodSpec,
    source_index: &NnIndex,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    nbhd.validate()?;
    if flow.len() != source.len() {
        return Err(Error::Shape(format!(
            "flow of {} vectors for source of {} points",
            flow.len(),
            source.len()
        )));
    }
    if source.len() <= nbhd.k {
        return Err(Error::InsufficientPoints(format!(
            "smoothness with k = {} needs more than {} points",
            nbhd.k, nbhd.k
        )));
    }
    let neighborhoods = self_neighborhoods(&source.points, source_index, nbhd.k);
    let mut grad = vec![Vector3::zeros(); flow.len()];
    let value = smoothness_term(&flow.vectors, &neighborhoods, Some((&mut grad, 1.0)));
    Ok((value, grad))
}

/// Per-point contributions of the Laplacian regularization: the Euclidean
/// distance between each warped point's Laplacian vector and the
/// inverse-distance-weighted interpolation of the target cloud's Laplacian
/// vectors at the warped position.
pub fn laplacian_loss_terms(
    warped: &PointCloud,
    target: &PointCloud,
    nbhd: NeighborhoodSpec,
    warped_index: &NnIndex,
    target_index: &NnIndex,
) -> Result<Vec<f64>> {
    nbhd.validate()?;
    if warped.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput("laplacian loss needs non-empty clouds".into()));
    }
    if warped.len() <= nbhd.k || target.len() <= nbhd.k {
        return Err(Error::InsufficientPoints(format!(
            "laplacian regularization with k = {} needs more than {} points per cloud",
            nbhd.k, nbhd.k
        )));
    }
    let target_laplacians = all_laplacians(&target.points, target_index, nbhd.k);
    let neighborhoods = self_neighborhoods(&warped.points, warped_index, nbhd.k);
    Ok(warped
        .points
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut centroid = Vector3::zeros();
            for &j in &neighborhoods[i] {
                centroid += warped.points[j as usize];
            }
            centroid /= neighborhoods[i].len() as f64;
            let own = w - centroid;
            let interpolated = idw_interpolate(w, target_index, &target_laplacians, nbhd.k);
            (own - interpolated).norm()
        })
        .collect())
}

/// Laplacian regularization: sum of the per-point contributions, with the
/// gradient under frozen neighborhoods and interpolation weights.
pub fn laplacian_loss(
    warped: &PointCloud,
    target: &PointCloud,
    nbhd: NeighborhoodSpec,
    warped_index: &NnIndex,
    target_index: &NnIndex,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    nbhd.validate()?;
    if warped.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput("laplacian loss needs non-empty clouds".into()));
    }
    if warped.len() <= nbhd.k || target.len() <= nbhd.k {
        return Err(Error::InsufficientPoints(format!(
            "laplacian regularization with k = {} needs more than {} points per cloud",
            nbhd.k, nbhd.k
        )));
    }
    let target_laplacians = all_laplacians(&target.points, target_index, nbhd.k);
    let neighborhoods = self_neighborhoods(&warped.points, warped_index, nbhd.k);
    let lap_targets: Vec<Vector3<f64>> = warped
        .points
        .par_iter()
        .map(|w| idw_interpolate(w, target_index, &target_laplacians, nbhd.k))
        .collect();
    let mut grad = vec![Vector3::zeros(); warped.len()];
    let value = laplacian_term(
        &warped.points,
        &neighborhoods,
        &lap_targets,
        Some((&mut grad, 1.0)),
    );
    Ok((value, grad))
}

/// Result of the disparity-consistency loss. `contributing == 0` signals the
/// degenerate case (no point projected onto a valid region); the loss is then
/// reported as zero so a solver can drop the term.
#[derive(Debug, Clone)]
pub struct DisparityLoss {
    pub value: f64,
    pub gradient: Vec<Vector3<f64>>,
    pub contributing: usize,
}

/// Disparity-consistency loss: warp the source by the flow, project every
/// warped point into the target depth map, bilinearly sample it there, and
/// average the absolute difference between the sampled depth and the warped
/// point's z. Points projecting outside the image or onto invalid pixels are
/// excluded from the mean.
pub fn disparity_consistency_loss(
    source: &PointCloud,
    flow: &FlowField,
    target_depth: &DepthMap,
    intr: &CameraIntrinsics,
) -> Result<DisparityLoss> {
    disparity_consistency_loss_with(source, flow, target_depth, intr, DisparityMode::WarpedZ)
}

pub fn disparity_consistency_loss_with(
    source: &PointCloud,
    flow: &FlowField,
    target_depth: &DepthMap,
    intr: &CameraIntrinsics,
    mode: DisparityMode,
) -> Result<DisparityLoss> {
    intr.validate()?;
    if flow.len() != source.len() {
        return Err(Error::Shape(format!(
            "flow of {} vectors for source of {} points",
            flow.len(),
            source.len()
        )));
    }
    let warped: Vec<Vector3<f64>> = source
        .points
        .iter()
        .zip(&flow.vectors)
        .map(|(p, f)| p + f)
        .collect();
    let cells: Vec<Option<FrozenCell>> = warped
        .iter()
        .map(|w| {
            if w.z <= 0.0 {
                return None;
            }
            let sample = project_point(w, intr);
            let (u0, v0) = bilinear_cell(target_depth, sample.u, sample.v)?;
            let corners = cell_corners(target_depth, u0, v0)?;
            Some(FrozenCell {
                u0: u0 as f64,
                v0: v0 as f64,
                corners,
            })
        })
        .collect();
    let contributing = cells.iter().filter(|c| c.is_some()).count();
    let reference_z: Vec<f64> = match mode {
        DisparityMode::WarpedZ => Vec::new(),
        DisparityMode::Literal => source.points.iter().map(|p| p.z).collect(),
    };
    let mut grad = vec![Vector3::zeros(); source.len()];
    let value = disparity_term(
        &warped,
        &reference_z,
        &cells,
        contributing,
        intr,
        mode,
        Some((&mut grad, 1.0)),
    );
    Ok(DisparityLoss {
        value,
        gradient: grad,
        contributing,
    })
}

/// Multi-level weighted total: `sum_l level_weights[l] * reports[l].total`,
/// where each report's total is already the lambda-weighted sum of its four
/// components. Reports must be index-aligned with `level_weights`
/// (finest first).
pub fn total_loss(reports: &[LossReport], weights: &LossWeights) -> Result<f64> {
    if reports.len() != weights.level_weights.len() {
        return Err(Error::Shape(format!(
            "{} level reports for {} level weights",
            reports.len(),
            weights.level_weights.len()
        )));
    }
    Ok(reports
        .iter()
        .zip(&weights.level_weights)
        .map(|(r, lw)| lw * r.total)
        .sum())
}

/// Outcome of [`smooth_l1_depth_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthErrorReport {
    /// Sum of the smooth-L1 kernel over the evaluated samples.
    pub error: f64,
    pub n_evaluated: usize,
    /// Samples that landed on invalid predicted pixels.
    pub n_skipped: usize,
}

/// Smooth-L1 depth error of a predicted depth map against sparse ground
/// truth samples `(u, v, depth)`. The kernel is `0.5 e^2` for `|e| < 1` and
/// `|e| - 0.5` otherwise. Samples at invalid predicted pixels are skipped
/// and counted.
pub fn smooth_l1_depth_error(pred: &DepthMap, sparse_gt: &[(usize, usize, f64)]) -> DepthErrorReport {
    let mut error = 0.0;
    let mut n_evaluated = 0;
    let mut n_skipped = 0;
    for &(u, v, gt) in sparse_gt {
        match pred.get(u, v) {
            Some(d) => {
                let e = gt - d;
                error += if e.abs() < 1.0 {
                    0.5 * e * e
                } else {
                    e.abs() - 0.5
                };
                n_evaluated += 1;
            }
            None => n_skipped += 1,
        }
    }
    DepthErrorReport {
        error,
        n_evaluated,
        n_skipped,
    }
}
