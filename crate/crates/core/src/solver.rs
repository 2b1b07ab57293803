//! Coarse-to-fine direct optimization of a per-point flow field.
//!
//! The optimization variable is the flow field itself. Starting from zero
//! flow on the coarsest subsample, each pyramid level runs gradient descent
//! with backtracking line search on that level's weighted loss, re-freezing
//! the discrete correspondences every few iterations, then upsamples the
//! flow to the next finer level by inverse-distance interpolation. Every
//! random choice is seeded, so identical inputs produce bitwise-identical
//! flow fields.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, DepthMap};
use crate::cloud::{random_sample, PointCloud};
use crate::error::{Error, Result};
use crate::index::{build_index, NnIndex};
use crate::losses::{
    ChamferVariant, DisparityMode, DisparityTarget, FlowField, LossSetup, LossWeights,
    NeighborhoodSpec, IDW_EPSILON,
};
use crate::seed::derive_seed;

/// Upper bound on step halvings within one backtracking search.
const MAX_BACKTRACKS: usize = 10;

/// Smoothness weight floor during the coarse warmup phase. The warmup
/// resolves the large shared motion, where a near-rigid consensus prior
/// pulls individual points out of crossed nearest-neighbor pairings.
const WARMUP_SMOOTHNESS: f64 = 5.0;

/// Neighbor count for flow upsampling between pyramid levels.
const UPSAMPLE_NEIGHBORS: usize = 3;

/// Full solver configuration. Deserializes from a flat JSON document;
/// every key is optional and defaults are echoed back on serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Pyramid depth L.
    pub num_levels: usize,
    /// Gradient-descent iterations per level.
    pub iterations: usize,
    /// Initial step size (meters per unit gradient).
    pub step: f64,
    /// Step multiplier applied on each backtrack.
    pub decay: f64,
    /// Convergence threshold on the relative loss change; 0 disables early
    /// stopping.
    pub tolerance: f64,
    /// Iterations between re-freezing the discrete correspondences.
    pub nn_refresh_interval: usize,
    /// Iterations at the start of every level run on a warmup objective:
    /// Chamfer plus a strengthened smoothness term, no Laplacian term. The
    /// warmup resolves the shared motion of each surface: the strong
    /// smoothness diffuses edge anchors across flat faces whose interior
    /// carries no in-plane signal, and the Laplacian term stays out because
    /// its norm-type gradient keeps a constant magnitude however far the
    /// flow is from alignment, which can trap the search in crossed
    /// pairings. Near alignment both effects vanish and the full objective
    /// takes over cleanly.
    pub warmup_iterations: usize,
    /// Subsampling ratio between adjacent pyramid levels.
    pub pyramid_ratio: usize,
    pub lambda_chamfer: f64,
    pub lambda_smooth: f64,
    pub lambda_laplace: f64,
    pub lambda_disp: f64,
    /// Per-level weights, finest level first.
    pub level_weights: Vec<f64>,
    /// Neighborhood size for the smoothness and Laplacian terms.
    pub k_neighbors: usize,
    /// Normalize the Chamfer sums to per-point means.
    pub chamfer_mean: bool,
    /// Evaluate the disparity term only at the finest level.
    pub disparity_finest_only: bool,
    /// Compare sampled depth against the source point's z instead of the
    /// warped point's z.
    pub disparity_literal: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            num_levels: 4,
            iterations: 200,
            step: 0.05,
            decay: 0.5,
            tolerance: 0.0,
            nn_refresh_interval: 10,
            warmup_iterations: 100,
            pyramid_ratio: 4,
            lambda_chamfer: 1.0,
            lambda_smooth: 0.2,
            lambda_laplace: 0.2,
            lambda_disp: 1.0,
            level_weights: vec![0.02, 0.04, 0.08, 0.16],
            k_neighbors: 8,
            chamfer_mean: false,
            disparity_finest_only: true,
            disparity_literal: false,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 1 {
            return Err(Error::Config("num_levels must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be >= 0, got {}",
                self.tolerance
            )));
        }
        if self.nn_refresh_interval < 1 {
            return Err(Error::Config("nn_refresh_interval must be >= 1".into()));
        }
        if self.pyramid_ratio < 2 {
            return Err(Error::Config("pyramid_ratio must be >= 2".into()));
        }
        if self.level_weights.len() != self.num_levels {
            return Err(Error::Config(format!(
                "{} level weights for {} levels",
                self.level_weights.len(),
                self.num_levels
            )));
        }
        self.weights().validate()?;
        self.nbhd().validate()?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_chamfer: self.lambda_chamfer,
            lambda_smooth: self.lambda_smooth,
            lambda_laplace: self.lambda_laplace,
            lambda_disp: self.lambda_disp,
            level_weights: self.level_weights.clone(),
        }
    }

    pub fn nbhd(&self) -> NeighborhoodSpec {
        NeighborhoodSpec {
            k: self.k_neighbors,
        }
    }

    fn chamfer_variant(&self) -> ChamferVariant {
        if self.chamfer_mean {
            ChamferVariant::Mean
        } else {
            ChamferVariant::Sum
        }
    }

    fn disparity_mode(&self) -> DisparityMode {
        if self.disparity_literal {
            DisparityMode::Literal
        } else {
            DisparityMode::WarpedZ
        }
    }
}

/// One pyramid level: a subsample of the finer level plus its index.
#[derive(Debug)]
pub struct PyramidLevel {
    pub cloud: PointCloud,
    pub index: NnIndex,
}

/// Multi-resolution hierarchy, coarsest level first. The finest level equals
/// the input cloud.
#[derive(Debug)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    /// Levels from coarsest to finest.
    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn coarsest(&self) -> &PyramidLevel {
        &self.levels[0]
    }

    pub fn finest(&self) -> &PyramidLevel {
        self.levels.last().unwrap()
    }
}

/// Builds a pyramid of `config.num_levels` levels by seeded random
/// subsampling: each coarser level keeps `ceil(n / pyramid_ratio)` of the
/// finer level's points. The coarsest level must keep more than
/// `k_neighbors` points.
pub fn build_pyramid(cloud: &PointCloud, config: &SolverConfig) -> Result<Pyramid> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot build a pyramid over an empty cloud".into()));
    }
    let mut sizes = vec![cloud.len()];
    for level in 1..config.num_levels {
        let finer = sizes[level - 1];
        sizes.push(finer.div_ceil(config.pyramid_ratio));
    }
    let coarsest = *sizes.last().unwrap();
    if coarsest < config.k_neighbors + 1 {
        return Err(Error::Config(format!(
            "coarsest pyramid level (level {}) would keep {} points; needs at least {} \
             for k_neighbors = {}",
            config.num_levels - 1,
            coarsest,
            config.k_neighbors + 1,
            config.k_neighbors
        )));
    }

    // Built finest-first, stored coarsest-first.
    let mut clouds = vec![cloud.clone()];
    for (level, &size) in sizes.iter().enumerate().skip(1) {
        let seed = derive_seed(config.seed, &format!("pyramid/level{level}"));
        let coarser = random_sample(clouds.last().unwrap(), size, seed)?;
        clouds.push(coarser);
    }
    clouds.reverse();
    let levels = clouds
        .into_iter()
        .map(|cloud| {
            let index = build_index(&cloud)?;
            Ok(PyramidLevel { cloud, index })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pyramid { levels })
}

/// Transfers a coarse flow field to a finer cloud: each fine point receives
/// the inverse-distance-weighted average of the flows of its 3 nearest
/// coarse points.
pub fn upsample_flow(
    coarse_cloud: &PointCloud,
    coarse_flow: &FlowField,
    fine_cloud: &PointCloud,
) -> Result<FlowField> {
    if coarse_cloud.is_empty() {
        return Err(Error::EmptyInput("cannot upsample from an empty cloud".into()));
    }
    if coarse_flow.len() != coarse_cloud.len() {
        return Err(Error::Shape(format!(
            "coarse flow of {} vectors for cloud of {} points",
            coarse_flow.len(),
            coarse_cloud.len()
        )));
    }
    let index = build_index(coarse_cloud)?;
    let vectors = fine_cloud
        .points
        .iter()
        .map(|p| {
            let hits = index.knn(p, UPSAMPLE_NEIGHBORS);
            let mut total = 0.0;
            let mut acc = Vector3::zeros();
            for (j, d2) in &hits {
                let w = 1.0 / (d2.sqrt() + IDW_EPSILON);
                total += w;
                acc += w * coarse_flow.vectors[*j];
            }
            acc / total
        })
        .collect();
    Ok(FlowField::new(vectors))
}

/// Loss components recorded at the start of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub chamfer: f64,
    pub smoothness: f64,
    pub laplacian: f64,
    pub disparity_consistency: f64,
    pub total: f64,
    /// Step size accepted at this iteration (0 when no step was taken).
    pub step: f64,
}

/// Per-level record of the optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    /// 0 = coarsest.
    pub level: usize,
    pub n_points: usize,
    pub level_weight: f64,
    pub iterations: Vec<IterationTrace>,
    /// Contributing-point count of the disparity term at the last freeze.
    pub disparity_contributing: usize,
}

/// Full trace of a solve: per-level, per-iteration loss components.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveTrace {
    pub levels: Vec<LevelTrace>,
}

/// Output of [`solve`].
#[derive(Debug)]
pub struct Solution {
    pub flow: FlowField,
    pub trace: SolveTrace,
}

/// Estimates the scene flow from `cloud_t` to `cloud_t1` by minimizing the
/// multi-level self-supervised loss over an explicit flow field.
///
/// `target_depth` and `intr` must be both present or both absent; absence
/// disables the disparity-consistency term. On a non-finite loss the error
/// carries the trace collected so far.
pub fn solve(
    cloud_t: &PointCloud,
    cloud_t1: &PointCloud,
    target_depth: Option<&DepthMap>,
    intr: Option<&CameraIntrinsics>,
    config: &SolverConfig,
) -> Result<Solution> {
    config.validate()?;
    if cloud_t.is_empty() || cloud_t1.is_empty() {
        return Err(Error::EmptyInput("solve needs two non-empty clouds".into()));
    }
    let disparity = match (target_depth, intr) {
        (Some(depth), Some(intr)) => Some(DisparityTarget { depth, intr }),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "target depth and intrinsics must be both present or both absent".into(),
            ));
        }
    };

    let pyramid_t = build_pyramid(cloud_t, config)?;
    let pyramid_t1 = build_pyramid(cloud_t1, config)?;
    let num_levels = config.num_levels;
    let weights = config.weights();

    let mut trace = SolveTrace::default();
    let mut flow = FlowField::zeros(pyramid_t.coarsest().cloud.len());

    for level in 0..num_levels {
        let src = &pyramid_t.levels()[level];
        let tgt = &pyramid_t1.levels()[level];
        // level_weights is finest-first; pyramid levels are coarsest-first.
        let level_weight = weights.level_weights[num_levels - 1 - level];
        let finest = level == num_levels - 1;

        let mut level_weights = weights.clone();
        if config.disparity_finest_only && !finest {
            level_weights.lambda_disp = 0.0;
        }
        let setup = LossSetup::new(
            &src.cloud,
            &tgt.cloud,
            &tgt.index,
            config.nbhd(),
            level_weights.clone(),
            config.chamfer_variant(),
            config.disparity_mode(),
            disparity,
        )?;
        let warmup_end = config.warmup_iterations.min(config.iterations);
        let warmup_setup = if warmup_end > 0 {
            let mut warmup_weights = level_weights.clone();
            warmup_weights.lambda_laplace = 0.0;
            warmup_weights.lambda_smooth = warmup_weights.lambda_smooth.max(WARMUP_SMOOTHNESS);
            Some(LossSetup::new(
                &src.cloud,
                &tgt.cloud,
                &tgt.index,
                config.nbhd(),
                warmup_weights,
                config.chamfer_variant(),
                config.disparity_mode(),
                disparity,
            )?)
        } else {
            None
        };
        let setup_at = |iteration: usize| -> &LossSetup {
            match &warmup_setup {
                Some(warm) if iteration < warmup_end => warm,
                _ => &setup,
            }
        };

        let mut level_trace = LevelTrace {
            level,
            n_points: src.cloud.len(),
            level_weight,
            iterations: Vec::with_capacity(config.iterations),
            disparity_contributing: 0,
        };

        let diverged = |level: usize, iteration: usize, mut trace: SolveTrace, lt: LevelTrace| {
            trace.levels.push(lt);
            Error::SolverDiverged {
                level,
                iteration,
                trace: Box::new(trace),
            }
        };

        let mut active = setup_at(0);
        let mut frozen = active.freeze(&flow)?;
        level_trace.disparity_contributing = frozen.disparity_contributing();
        let mut base_step = config.step;
        let mut prev_total: Option<f64> = None;
        // Trust-region bookkeeping across refresh windows: a window is only
        // kept if it did not increase the freshly re-frozen loss. Without
        // this the correspondence-chasing terms can creep the true loss
        // upward while every individual step decreases the frozen one.
        let mut window_flow = flow.clone();
        let mut window_true = frozen.total(active, &flow)?;

        let mut iteration = 0;
        while iteration < config.iterations {
            let phase_switch = warmup_end > 0 && iteration >= warmup_end
                && !std::ptr::eq(active, &setup);
            if iteration > 0 && (iteration % config.nn_refresh_interval == 0 || phase_switch) {
                if !flow.is_finite() {
                    return Err(diverged(level, iteration, trace, level_trace));
                }
                let previous = active as *const LossSetup;
                active = setup_at(iteration);
                let candidate = active.freeze(&flow)?;
                let true_now = candidate.total(active, &flow)?;
                let same_objective = std::ptr::eq(previous, active);
                if same_objective && true_now > window_true {
                    // Reject the window: back to its start with a smaller
                    // step. Re-freezing the rolled-back flow reproduces the
                    // window's original correspondences.
                    flow = window_flow.clone();
                    base_step *= config.decay;
                    frozen = active.freeze(&flow)?;
                } else {
                    frozen = candidate;
                    window_flow = flow.clone();
                    window_true = true_now;
                }
                level_trace.disparity_contributing = frozen.disparity_contributing();
                // The step survives refreshes otherwise: backtracking
                // ratchets it down as the flow settles, which damps the
                // constant-magnitude gradients of the norm-type terms.
                prev_total = None;
            }

            // The descent runs on the unweighted level loss: scaling by the
            // level weight would not move the minimizer, only shrink every
            // step. The weight enters the reported multi-level total instead.
            let report = frozen.report(active, &flow)?;
            let current = report.total;
            if !current.is_finite() {
                level_trace.iterations.push(IterationTrace {
                    iteration,
                    chamfer: report.chamfer,
                    smoothness: report.smoothness,
                    laplacian: report.laplacian,
                    disparity_consistency: report.disparity_consistency,
                    total: current,
                    step: 0.0,
                });
                return Err(diverged(level, iteration, trace, level_trace));
            }

            let grad_norm2: f64 = report.gradient.vectors.iter().map(|g| g.norm_squared()).sum();
            let mut accepted_step = 0.0;

            if grad_norm2 > 0.0 {
                // Converged within this frozen window?
                let converged = prev_total
                    .is_some_and(|prev| (prev - current).abs() <= config.tolerance * prev.abs());
                if !converged {
                    let mut trial = base_step;
                    for _ in 0..=MAX_BACKTRACKS {
                        let candidate = FlowField::new(
                            flow.vectors
                                .iter()
                                .zip(&report.gradient.vectors)
                                .map(|(f, g)| f - trial * g)
                                .collect(),
                        );
                        let candidate_total = frozen.total(active, &candidate)?;
                        if candidate_total.is_finite() && candidate_total <= current {
                            flow = candidate;
                            base_step = trial;
                            accepted_step = trial;
                            break;
                        }
                        trial *= config.decay;
                    }
                }
            }

            level_trace.iterations.push(IterationTrace {
                iteration,
                chamfer: report.chamfer,
                smoothness: report.smoothness,
                laplacian: report.laplacian,
                disparity_consistency: report.disparity_consistency,
                total: current,
                step: accepted_step,
            });
            prev_total = Some(current);

            if accepted_step == 0.0 {
                // Stationary (or fully backtracked) under the frozen
                // correspondences: jump to the next refresh point.
                let next_refresh = ((iteration / config.nn_refresh_interval) + 1)
                    * config.nn_refresh_interval;
                if next_refresh >= config.iterations {
                    break;
                }
                iteration = next_refresh;
                continue;
            }
            iteration += 1;
        }

        // The last window gets the same guard as the interior ones.
        if flow.is_finite() {
            let final_frozen = active.freeze(&flow)?;
            if final_frozen.total(active, &flow)? > window_true {
                flow = window_flow;
            }
        } else {
            flow = window_flow;
        }

        trace.levels.push(level_trace);

        if level + 1 < num_levels {
            let fine = &pyramid_t.levels()[level + 1];
            flow = upsample_flow(&src.cloud, &flow, &fine.cloud)?;
        }
    }

    Ok(Solution { flow, trace })
}
