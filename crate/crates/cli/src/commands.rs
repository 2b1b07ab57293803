//! Subcommand implementations.

use std::path::Path;

use serde::Serialize;

use pseudoflow_core::camera::{
    backproject_depth_map, disparity_to_depth, CameraIntrinsics, DepthMap, DepthRange,
    DisparityMap,
};
use pseudoflow_core::cloud::{
    crop_edges, random_sample, remove_outliers, CropBox, OutlierParams, PointCloud,
};
use pseudoflow_core::io::{
    read_camera_file, read_json, read_pfm, read_ply, write_json, write_pfm, write_ply, PlyData,
    PlyFormat,
};
use pseudoflow_core::losses::FlowField;
use pseudoflow_core::metrics::{evaluate_2d, evaluate_3d, MetricsReport};
use pseudoflow_core::seed::{derive_seed, fnv1a64};
use pseudoflow_core::solver::{solve, SolverConfig};
use pseudoflow_core::synth::{generate, SceneSpec};
use pseudoflow_core::{Error, Result};

/// Deterministic record of one run: resolved configuration fingerprint,
/// seeds, and the files touched. Written next to every command's output.
#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    config_hash: String,
    seeds: Vec<(String, u64)>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &'static str, resolved_config_json: &str) -> Self {
        Self {
            command,
            config_hash: format!("{:016x}", fnv1a64(resolved_config_json.as_bytes())),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.push((name.to_string(), value));
        self
    }

    fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Records just the file name; used where outputs live in a directory
    /// the manifest itself sits in, keeping manifests byte-identical across
    /// output locations.
    fn output_name(mut self, path: &Path) -> Self {
        self.outputs
            .push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        self
    }
}

/// `out.ply` -> `out.manifest.json`, `dir/metrics.json` -> `dir/metrics.manifest.json`.
fn sidecar(path: &Path, suffix: &str) -> std::path::PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn synth(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let spec: SceneSpec = read_json(spec_path)?;
    let frame = generate(&spec)?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let depth_t = out_dir.join("depth_t.pfm");
    let depth_t1 = out_dir.join("depth_t1.pfm");
    let cloud_t = out_dir.join("cloud_t.ply");
    let cloud_t1 = out_dir.join("cloud_t1.ply");
    let gt_flow = out_dir.join("gt_flow.ply");
    let manifest_path = out_dir.join("manifest.json");

    let (n_t, n_t1) = (frame.cloud_t.len(), frame.cloud_t1.len());
    write_pfm(&depth_t, &frame.depth_t)?;
    write_pfm(&depth_t1, &frame.depth_t1)?;
    write_ply(&cloud_t, &PlyData::cloud(frame.cloud_t.clone()), PlyFormat::default())?;
    write_ply(&cloud_t1, &PlyData::cloud(frame.cloud_t1), PlyFormat::default())?;
    // The ground-truth sidecar: source points, true flow, and the occlusion
    // and planted-outlier annotations.
    let gt = PlyData {
        flow: Some(frame.gt_flow),
        occluded: Some(frame.occluded),
        outlier: Some(frame.outlier_mask),
        ..PlyData::cloud(frame.cloud_t)
    };
    write_ply(&gt_flow, &gt, PlyFormat::default())?;

    let resolved = serde_json::to_string(&spec).expect("spec serializes");
    let manifest = Manifest::new("synth", &resolved)
        .seed("scene", spec.seed)
        .input(spec_path)
        .output_name(&depth_t)
        .output_name(&depth_t1)
        .output_name(&cloud_t)
        .output_name(&cloud_t1)
        .output_name(&gt_flow);
    write_json(&manifest_path, &manifest)?;
    println!(
        "synth: {n_t} points at t, {n_t1} at t+1, written to {}",
        out_dir.display()
    );
    Ok(())
}

pub fn backproject(
    depth_path: &Path,
    intrinsics_path: &Path,
    out: &Path,
    stride: usize,
    disparity: bool,
) -> Result<()> {
    let camera = read_camera_file(intrinsics_path)?;
    let intr: CameraIntrinsics = camera.intrinsics();
    let grid = read_pfm(depth_path)?;
    if (grid.width(), grid.height()) != (camera.width, camera.height) {
        return Err(Error::MalformedInput(format!(
            "map is {}x{} but intrinsics declare {}x{}",
            grid.width(),
            grid.height(),
            camera.width,
            camera.height
        )));
    }
    let depth = if disparity {
        disparity_to_depth(&DisparityMap(grid), &intr, DepthRange::default())?
    } else {
        DepthMap(grid)
    };
    let cloud = backproject_depth_map(&depth, &intr, stride)?;
    if cloud.is_empty() {
        eprintln!("warning: no valid pixels; writing an empty cloud");
    }
    let n = cloud.len();
    write_ply(out, &PlyData::cloud(cloud), PlyFormat::default())?;
    let resolved = format!("{{\"stride\":{stride},\"disparity\":{disparity}}}");
    let manifest = Manifest::new("backproject", &resolved)
        .input(depth_path)
        .input(intrinsics_path)
        .output(out);
    write_json(sidecar(out, "manifest.json"), &manifest)?;
    println!("backproject: {n} points");
    Ok(())
}

fn parse_bound(token: &str) -> Result<Option<f64>> {
    match token {
        "" | "inf" | "+inf" | "-inf" => Ok(None),
        _ => token
            .parse::<f64>()
            .map(Some)
            .map_err(|e| Error::Config(format!("bad crop bound {token:?}: {e}"))),
    }
}

/// Parses `x:lo:hi,y:lo:hi,z:lo:hi` (axes optional, `none` for no crop).
fn parse_crop(spec: &str) -> Result<Option<CropBox>> {
    if spec == "none" {
        return Ok(None);
    }
    let mut min = [None; 3];
    let mut max = [None; 3];
    for part in spec.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        let [axis, lo, hi] = fields.as_slice() else {
            return Err(Error::Config(format!(
                "bad crop component {part:?}, expected axis:lo:hi"
            )));
        };
        let index = match *axis {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            other => return Err(Error::Config(format!("bad crop axis {other:?}"))),
        };
        min[index] = parse_bound(lo)?;
        max[index] = parse_bound(hi)?;
    }
    CropBox::new(min, max).map(Some)
}

pub fn clean(input: &Path, out: &Path, crop: Option<&str>, m: usize, alpha: f64) -> Result<()> {
    let data = read_ply(input)?;
    let n_input = data.cloud.len();

    let select =
        |mask: &[bool], flow: &Option<FlowField>| -> Option<FlowField> {
            flow.as_ref().map(|f| {
                FlowField::new(
                    f.vectors
                        .iter()
                        .zip(mask)
                        .filter_map(|(v, keep)| keep.then_some(*v))
                        .collect(),
                )
            })
        };

    let bounds = match crop {
        None => Some(CropBox::driving_default()),
        Some(spec) => parse_crop(spec)?,
    };
    let (cropped_cloud, crop_mask) = match &bounds {
        Some(bounds) => crop_edges(&data.cloud, bounds),
        None => (data.cloud.clone(), vec![true; n_input]),
    };
    let cropped_flow = select(&crop_mask, &data.flow);
    let crop_removed = n_input - cropped_cloud.len();

    let params = OutlierParams {
        m,
        alpha,
        ..OutlierParams::default()
    };
    let removal = remove_outliers(&cropped_cloud, &params)?;
    let outlier_removed = cropped_cloud.len() - removal.cloud.len();
    let flow = select(&removal.kept, &cropped_flow);
    let kept = removal.cloud.len();

    write_ply(
        out,
        &PlyData {
            cloud: removal.cloud,
            flow,
            occluded: None,
            outlier: None,
        },
        PlyFormat::default(),
    )?;
    let resolved = format!(
        "{{\"crop\":{:?},\"m\":{m},\"alpha\":{alpha}}}",
        crop.unwrap_or("default")
    );
    let manifest = Manifest::new("clean", &resolved).input(input).output(out);
    write_json(sidecar(out, "manifest.json"), &manifest)?;
    println!(
        "clean: input={n_input} crop_removed={crop_removed} outlier_removed={outlier_removed} \
         kept={kept} d_max={:.6}",
        removal.d_max
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn estimate(
    cloud_t_path: &Path,
    cloud_t1_path: &Path,
    config_path: &Path,
    out_flow: &Path,
    target_depth: Option<&Path>,
    intrinsics: Option<&Path>,
    n_sample: usize,
    seed: Option<u64>,
) -> Result<()> {
    let mut config: SolverConfig = read_json(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let base_seed = config.seed;
    config.seed = derive_seed(base_seed, "solver");
    config.validate()?;

    let cloud_t = read_ply(cloud_t_path)?.cloud;
    let cloud_t1 = read_ply(cloud_t1_path)?.cloud;
    // One derived seed for both draws: identical input clouds then yield
    // identical subsets (and exactly zero estimated flow).
    let sample_seed = derive_seed(base_seed, "sample");
    let sampled_t = random_sample(&cloud_t, n_sample, sample_seed)?;
    let sampled_t1 = random_sample(&cloud_t1, n_sample, sample_seed)?;

    let depth = match target_depth {
        Some(path) => Some(DepthMap(read_pfm(path)?)),
        None => None,
    };
    let intr = match intrinsics {
        Some(path) => Some(read_camera_file(path)?.intrinsics()),
        None => None,
    };

    let trace_path = sidecar(out_flow, "trace.json");
    let solution = match solve(&sampled_t, &sampled_t1, depth.as_ref(), intr.as_ref(), &config) {
        Ok(solution) => solution,
        Err(Error::SolverDiverged {
            level,
            iteration,
            trace,
        }) => {
            // The trace still goes out so the failure can be inspected.
            write_json(&trace_path, trace.as_ref())?;
            return Err(Error::SolverDiverged {
                level,
                iteration,
                trace,
            });
        }
        Err(other) => return Err(other),
    };

    write_ply(
        out_flow,
        &PlyData::with_flow(sampled_t, solution.flow)?,
        PlyFormat::default(),
    )?;
    write_json(&trace_path, &solution.trace)?;
    let resolved = serde_json::to_string(&config).expect("config serializes");
    let manifest = Manifest::new("estimate", &resolved)
        .seed("base", base_seed)
        .seed("sample", sample_seed)
        .seed("solver", config.seed)
        .input(cloud_t_path)
        .input(cloud_t1_path)
        .input(config_path)
        .output(out_flow)
        .output(&trace_path);
    write_json(sidecar(out_flow, "manifest.json"), &manifest)?;

    let last = solution
        .trace
        .levels
        .last()
        .and_then(|l| l.iterations.last());
    if let Some(last) = last {
        println!(
            "estimate: final level loss {:.6e} (chamfer {:.3e}, smooth {:.3e}, laplace {:.3e}, \
             disparity {:.3e})",
            last.total, last.chamfer, last.smoothness, last.laplacian, last.disparity_consistency
        );
    }
    Ok(())
}

pub fn eval(
    pred_path: &Path,
    gt_path: &Path,
    out: &Path,
    intrinsics: Option<&Path>,
    source: Option<&Path>,
) -> Result<()> {
    let pred = read_ply(pred_path)?;
    let gt = read_ply(gt_path)?;
    let pred_flow = pred.flow.ok_or_else(|| Error::Schema {
        path: pred_path.display().to_string(),
        message: "missing flow_x/flow_y/flow_z properties".into(),
    })?;
    let gt_flow = gt.flow.ok_or_else(|| Error::Schema {
        path: gt_path.display().to_string(),
        message: "missing flow_x/flow_y/flow_z properties".into(),
    })?;

    let mut report: MetricsReport = evaluate_3d(&pred_flow, &gt_flow)?;
    if let (Some(intrinsics_path), Some(source_path)) = (intrinsics, source) {
        let intr = read_camera_file(intrinsics_path)?.intrinsics();
        let source_cloud: PointCloud = read_ply(source_path)?.cloud;
        let (epe2d, acc2d) = evaluate_2d(&pred_flow, &gt_flow, &source_cloud, &intr)?;
        report.epe2d = Some(epe2d);
        report.acc2d = Some(acc2d);
    }
    write_json(out, &report)?;
    let manifest = Manifest::new("eval", "{}")
        .input(pred_path)
        .input(gt_path)
        .output(out);
    write_json(sidecar(out, "manifest.json"), &manifest)?;

    println!("metric       value");
    println!("epe3d        {:.6}", report.epe3d);
    println!("acc3ds       {:.6}", report.acc3ds);
    println!("acc3dr       {:.6}", report.acc3dr);
    println!("outliers3d   {:.6}", report.outliers3d);
    if let (Some(epe2d), Some(acc2d)) = (report.epe2d, report.acc2d) {
        println!("epe2d        {epe2d:.6}");
        println!("acc2d        {acc2d:.6}");
    }
    println!("n_points     {}", report.n_points);
    Ok(())
}
