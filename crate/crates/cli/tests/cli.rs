//! Subcommand behavior tests driven through the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;

use pseudoflow_core::camera::Grid;
use pseudoflow_core::cloud::PointCloud;
use pseudoflow_core::io::{read_json, read_ply, write_pfm, write_ply, PlyData, PlyFormat};
use pseudoflow_core::losses::FlowField;
use pseudoflow_core::metrics::MetricsReport;
use pseudoflow_core::solver::SolveTrace;
use pseudoflow_core::synth::{generate, SceneSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pseudoflow"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn write_intrinsics(path: &Path, fx: f64, fy: f64, cx: f64, cy: f64, w: usize, h: usize) {
    std::fs::write(
        path,
        format!(
            "{{\"fx\": {fx}, \"fy\": {fy}, \"cx\": {cx}, \"cy\": {cy}, \
             \"baseline\": 0.5, \"width\": {w}, \"height\": {h}}}"
        ),
    )
    .unwrap();
}

#[test]
fn synth_default_spec_writes_six_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), "{}").unwrap();
    let out = run(&["synth", "spec.json", "out"], dir.path());
    assert_ok(&out);
    let mut files: Vec<String> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        vec![
            "cloud_t.ply",
            "cloud_t1.ply",
            "depth_t.pfm",
            "depth_t1.pfm",
            "gt_flow.ply",
            "manifest.json"
        ]
    );
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), "{\"noise_sigma\": 0.01}").unwrap();
    assert_ok(&run(&["synth", "spec.json", "a"], dir.path()));
    assert_ok(&run(&["synth", "spec.json", "b"], dir.path()));
    for name in ["cloud_t.ply", "gt_flow.ply", "manifest.json"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn synth_invalid_spec_exits_2_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), "{\"outlier_fraction\": 2.0}").unwrap();
    let out = run(&["synth", "spec.json", "out"], dir.path());
    assert_eq!(exit_code(&out), 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn backproject_counts_valid_strided_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let mut values = vec![2.0; 8 * 6];
    values[3] = f64::NAN;
    let grid = Grid::from_values(8, 6, values).unwrap();
    write_pfm(dir.path().join("depth.pfm"), &grid).unwrap();
    write_intrinsics(&dir.path().join("intr.json"), 100.0, 100.0, 4.0, 3.0, 8, 6);
    let out = run(
        &["backproject", "depth.pfm", "intr.json", "out.ply"],
        dir.path(),
    );
    assert_ok(&out);
    let cloud = read_ply(dir.path().join("out.ply")).unwrap().cloud;
    assert_eq!(cloud.len(), 47);
}

#[test]
fn backproject_disparity_chains_conversion() {
    let dir = tempfile::tempdir().unwrap();
    // b = 0.5, f = 100, z = 25 -> depth 2.0 everywhere
    let grid = Grid::from_values(4, 4, vec![25.0; 16]).unwrap();
    write_pfm(dir.path().join("disp.pfm"), &grid).unwrap();
    write_intrinsics(&dir.path().join("intr.json"), 100.0, 100.0, 2.0, 2.0, 4, 4);
    let out = run(
        &["backproject", "disp.pfm", "intr.json", "out.ply", "--disparity"],
        dir.path(),
    );
    assert_ok(&out);
    let cloud = read_ply(dir.path().join("out.ply")).unwrap().cloud;
    assert_eq!(cloud.len(), 16);
    for p in &cloud.points {
        assert!((p.z - 2.0).abs() < 1e-6);
    }
}

#[test]
fn backproject_missing_baseline_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::from_values(2, 2, vec![25.0; 4]).unwrap();
    write_pfm(dir.path().join("disp.pfm"), &grid).unwrap();
    std::fs::write(
        dir.path().join("intr.json"),
        "{\"fx\": 100, \"fy\": 100, \"cx\": 1, \"cy\": 1, \"width\": 2, \"height\": 2}",
    )
    .unwrap();
    let out = run(
        &["backproject", "disp.pfm", "intr.json", "out.ply", "--disparity"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn backproject_all_invalid_writes_empty_cloud_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::from_values(4, 4, vec![f64::NAN; 16]).unwrap();
    write_pfm(dir.path().join("depth.pfm"), &grid).unwrap();
    write_intrinsics(&dir.path().join("intr.json"), 100.0, 100.0, 2.0, 2.0, 4, 4);
    let out = run(
        &["backproject", "depth.pfm", "intr.json", "out.ply"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(read_ply(dir.path().join("out.ply")).unwrap().cloud.is_empty());
}

/// A meter-scale object cloud with 5% of points displaced by 10 m Gaussian
/// offsets: the statistical-removal regime where inlier neighbor distances
/// are far below the planted displacement scale.
fn planted_outlier_fixture(dir: &Path) -> (PathBuf, Vec<bool>) {
    let spec = SceneSpec {
        intrinsics: pseudoflow_core::synth::IntrinsicsSpec {
            fx: 160.0,
            fy: 160.0,
            cx: 63.5,
            cy: 47.5,
            baseline: Some(0.5),
        },
        objects: vec![pseudoflow_core::synth::ObjectSpec {
            shape: pseudoflow_core::synth::ShapeKind::Box,
            center: [0.0, 0.0, 2.6],
            rotation: [0.5, 0.6, 0.2],
            half_extents: Some([0.5, 0.5, 0.5]),
            radius: None,
            motion: Default::default(),
        }],
        outlier_fraction: 0.05,
        outlier_sigma: 10.0,
        ..SceneSpec::default()
    };
    let frame = generate(&spec).unwrap();
    assert!(frame.cloud_t.len() >= 4000, "fixture has {} points", frame.cloud_t.len());
    let path = dir.join("noisy.ply");
    write_ply(
        &path,
        &PlyData::cloud(frame.cloud_t.clone()),
        PlyFormat::default(),
    )
    .unwrap();
    (path, frame.outlier_mask)
}

#[test]
fn clean_removes_planted_outliers() {
    let dir = tempfile::tempdir().unwrap();
    let (input, planted) = planted_outlier_fixture(dir.path());
    let out = run(
        &[
            "clean",
            input.to_str().unwrap(),
            "cleaned.ply",
            "--crop",
            "none",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let cleaned = read_ply(dir.path().join("cleaned.ply")).unwrap().cloud;
    // Outliers are identified by their source pixels, which survive cleaning.
    let input_cloud = read_ply(&input).unwrap().cloud;
    let kept_pixels: std::collections::BTreeSet<(u64, u64)> = cleaned
        .source_pixels
        .as_ref()
        .unwrap()
        .iter()
        .map(|px| (px[0].to_bits(), px[1].to_bits()))
        .collect();
    let mut planted_total = 0;
    let mut planted_removed = 0;
    for (px, is_outlier) in input_cloud
        .source_pixels
        .as_ref()
        .unwrap()
        .iter()
        .zip(&planted)
    {
        if *is_outlier {
            planted_total += 1;
            if !kept_pixels.contains(&(px[0].to_bits(), px[1].to_bits())) {
                planted_removed += 1;
            }
        }
    }
    assert!(planted_total > 100);
    let recall = planted_removed as f64 / planted_total as f64;
    assert!(recall >= 0.95, "recall = {recall}");

    // Kept + removed counts printed on stdout sum to the input size.
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let field = |name: &str| -> usize {
        stdout
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix(&format!("{name}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(
        field("input"),
        field("crop_removed") + field("outlier_removed") + field("kept")
    );
}

#[test]
fn clean_with_no_crop_and_huge_alpha_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let frame = generate(&SceneSpec::default()).unwrap();
    write_ply(
        dir.path().join("cloud.ply"),
        &PlyData::cloud(frame.cloud_t.clone()),
        PlyFormat::default(),
    )
    .unwrap();
    let out = run(
        &[
            "clean",
            "cloud.ply",
            "cleaned.ply",
            "--crop",
            "none",
            "--alpha",
            "1e9",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let cleaned = read_ply(dir.path().join("cleaned.ply")).unwrap().cloud;
    assert_eq!(cleaned.len(), frame.cloud_t.len());
}

#[test]
fn clean_too_few_points_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 1.0); 3]).unwrap();
    write_ply(
        dir.path().join("tiny.ply"),
        &PlyData::cloud(cloud),
        PlyFormat::default(),
    )
    .unwrap();
    let out = run(
        &["clean", "tiny.ply", "out.ply", "--crop", "none"],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn estimate_identical_clouds_gives_zero_flow() {
    let dir = tempfile::tempdir().unwrap();
    let frame = generate(&SceneSpec::default()).unwrap();
    let data = PlyData::cloud(frame.cloud_t);
    write_ply(dir.path().join("t.ply"), &data, PlyFormat::default()).unwrap();
    write_ply(dir.path().join("t1.ply"), &data, PlyFormat::default()).unwrap();
    std::fs::write(
        dir.path().join("config.json"),
        "{\"num_levels\": 2, \"level_weights\": [0.02, 0.04], \"iterations\": 40}",
    )
    .unwrap();
    let out = run(
        &[
            "estimate", "t.ply", "t1.ply", "config.json", "flow.ply",
            "--n-sample", "1024",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let flow = read_ply(dir.path().join("flow.ply")).unwrap().flow.unwrap();
    for v in &flow.vectors {
        assert!(v.norm() <= 1e-9, "expected zero flow, got {v:?}");
    }

    // Without --target-depth the disparity component is identically zero.
    let trace: SolveTrace = read_json(dir.path().join("flow.trace.json")).unwrap();
    assert!(!trace.levels.is_empty());
    for level in &trace.levels {
        for it in &level.iterations {
            assert_eq!(it.disparity_consistency, 0.0);
        }
    }
}

#[test]
fn estimate_recovers_translation_scene() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SceneSpec::default();
    for obj in &mut spec.objects {
        obj.motion = Default::default();
    }
    let frame = generate(&spec).unwrap();
    let delta = Vector3::new(0.3, 0.0, 0.2);
    let translated = PointCloud::new(
        frame.cloud_t.points.iter().map(|p| p + delta).collect(),
    )
    .unwrap();
    write_ply(
        dir.path().join("t.ply"),
        &PlyData::cloud(frame.cloud_t.clone()),
        PlyFormat::default(),
    )
    .unwrap();
    write_ply(
        dir.path().join("t1.ply"),
        &PlyData::cloud(translated),
        PlyFormat::default(),
    )
    .unwrap();
    let gt = FlowField::new(vec![delta; frame.cloud_t.len()]);
    write_ply(
        dir.path().join("gt.ply"),
        &PlyData::with_flow(frame.cloud_t, gt).unwrap(),
        PlyFormat::default(),
    )
    .unwrap();
    std::fs::write(dir.path().join("config.json"), "{}").unwrap();
    assert_ok(&run(
        &[
            "estimate", "t.ply", "t1.ply", "config.json", "flow.ply",
            "--n-sample", "100000", "--seed", "3",
        ],
        dir.path(),
    ));
    assert_ok(&run(&["eval", "flow.ply", "gt.ply", "metrics.json"], dir.path()));
    let report: MetricsReport = read_json(dir.path().join("metrics.json")).unwrap();
    assert!(report.epe3d < 0.01, "EPE3D = {}", report.epe3d);
}

#[test]
fn eval_perfect_prediction_scores_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0); 8]).unwrap();
    let flow = FlowField::new(vec![Vector3::new(0.1, 0.0, 0.0); 8]);
    let data = PlyData::with_flow(cloud, flow).unwrap();
    write_ply(dir.path().join("flow.ply"), &data, PlyFormat::default()).unwrap();
    let out = run(
        &["eval", "flow.ply", "flow.ply", "metrics.json"],
        dir.path(),
    );
    assert_ok(&out);
    let report: MetricsReport = read_json(dir.path().join("metrics.json")).unwrap();
    assert_eq!(report.epe3d, 0.0);
    assert_eq!(report.acc3ds, 1.0);
    assert_eq!(report.acc3dr, 1.0);
    assert_eq!(report.outliers3d, 0.0);
    // 2D fields absent without --intrinsics.
    assert!(report.epe2d.is_none());
    let text = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    assert!(!text.contains("epe2d"));
}

#[test]
fn eval_four_point_fixture_matches_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0); 4]).unwrap();
    let gt = FlowField::new(vec![Vector3::new(1.0, 0.0, 0.0); 4]);
    let pred = FlowField::new(vec![
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(1.0, 0.06, 0.0),
        Vector3::new(1.0, 0.2, 0.0),
        Vector3::new(1.0, 0.5, 0.0),
    ]);
    write_ply(
        dir.path().join("pred.ply"),
        &PlyData::with_flow(cloud.clone(), pred).unwrap(),
        PlyFormat::default(),
    )
    .unwrap();
    write_ply(
        dir.path().join("gt.ply"),
        &PlyData::with_flow(cloud, gt).unwrap(),
        PlyFormat::default(),
    )
    .unwrap();
    let out = run(&["eval", "pred.ply", "gt.ply", "metrics.json"], dir.path());
    assert_ok(&out);
    let report: MetricsReport = read_json(dir.path().join("metrics.json")).unwrap();
    // f32 storage rounds the flows; the derived errors stay well within 1e-6.
    assert!((report.epe3d - 0.19).abs() < 1e-6);
    assert_eq!(report.acc3ds, 0.25);
    assert_eq!(report.acc3dr, 0.5);
    assert_eq!(report.outliers3d, 0.25);
}

#[test]
fn thread_cap_env_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), "{}").unwrap();
    let out = bin()
        .args(["synth", "spec.json", "out"])
        .env("PSEUDOFLOW_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .expect("binary runs");
    assert_ok(&out);
}

#[test]
fn eval_misaligned_sizes_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let make = |n: usize, name: &str| {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 5.0); n]).unwrap();
        let flow = FlowField::zeros(n);
        write_ply(
            dir.path().join(name),
            &PlyData::with_flow(cloud, flow).unwrap(),
            PlyFormat::default(),
        )
        .unwrap();
    };
    make(4, "pred.ply");
    make(5, "gt.ply");
    let out = run(&["eval", "pred.ply", "gt.ply", "metrics.json"], dir.path());
    assert_eq!(exit_code(&out), 2);
}
