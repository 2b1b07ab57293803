//! Pipeline driver: synthetic scenes, back-projection, cloud refinement,
//! scene-flow estimation, and evaluation as composable subcommands.
//!
//! Exit codes are a stable contract: 0 success, 2 input or schema problem,
//! 3 degenerate data, 4 numerical failure.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use pseudoflow_core::Error;

#[derive(Parser)]
#[command(
    name = "pseudoflow",
    about = "Pseudo-LiDAR point-cloud pipeline and self-supervised 3D scene-flow estimation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: depth maps, clouds, and ground-truth flow.
    Synth {
        /// Scene description (JSON); `{}` selects the default desk scene.
        spec: PathBuf,
        /// Output directory, created if missing.
        out_dir: PathBuf,
    },
    /// Back-project a depth (or disparity) map into a point-cloud PLY.
    Backproject {
        /// Input PFM map.
        depth: PathBuf,
        /// Camera intrinsics (JSON with fx, fy, cx, cy, baseline, width, height).
        intrinsics: PathBuf,
        /// Output PLY.
        out: PathBuf,
        /// Keep every stride-th pixel per axis.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Treat the input as a disparity map and convert through the
        /// stereo baseline first.
        #[arg(long)]
        disparity: bool,
    },
    /// Crop scene edges and remove statistical outliers from a cloud.
    Clean {
        input: PathBuf,
        out: PathBuf,
        /// Crop box as `x:lo:hi,y:lo:hi,z:lo:hi` (each bound a number or
        /// `inf`/`-inf`), or `none`. Defaults to the driving-scene box
        /// `x:-30:30,y:-3:3,z:0:60`.
        #[arg(long)]
        crop: Option<String>,
        /// Neighbor count of the outlier statistic.
        #[arg(long, default_value_t = 8)]
        m: usize,
        /// Threshold scaling factor.
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
    },
    /// Estimate per-point scene flow between two clouds.
    Estimate {
        cloud_t: PathBuf,
        cloud_t1: PathBuf,
        /// Solver configuration (JSON); `{}` selects all defaults.
        config: PathBuf,
        /// Output flow PLY; the solve trace is written next to it as
        /// `<stem>.trace.json`.
        out_flow: PathBuf,
        /// Frame-t+1 depth map enabling the disparity-consistency term.
        #[arg(long, requires = "intrinsics")]
        target_depth: Option<PathBuf>,
        /// Camera intrinsics, required with --target-depth.
        #[arg(long, requires = "target_depth")]
        intrinsics: Option<PathBuf>,
        /// Random subsample size applied to both clouds before solving.
        #[arg(long, default_value_t = 4096)]
        n_sample: usize,
        /// Base seed; overrides the config seed when given.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a predicted flow against ground truth.
    Eval {
        pred_flow: PathBuf,
        gt_flow: PathBuf,
        /// Output metrics JSON.
        out: PathBuf,
        /// Camera intrinsics enabling the 2D metrics (needs --source).
        #[arg(long, requires = "source")]
        intrinsics: Option<PathBuf>,
        /// Source cloud the flows are anchored to, for the 2D metrics.
        #[arg(long, requires = "intrinsics")]
        source: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MalformedInput(_)
        | Error::Config(_)
        | Error::Shape(_)
        | Error::BehindCamera { .. }
        | Error::Parse { .. }
        | Error::Schema { .. }
        | Error::Io { .. } => 2,
        Error::EmptyInput(_) | Error::InsufficientPoints(_) => 3,
        Error::SolverDiverged { .. } => 4,
    }
}

fn configure_thread_pool() {
    if let Ok(value) = std::env::var("PSEUDOFLOW_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid PSEUDOFLOW_THREADS={value:?}"),
        }
    }
}

fn main() -> ExitCode {
    configure_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out_dir } => commands::synth(&spec, &out_dir),
        Command::Backproject {
            depth,
            intrinsics,
            out,
            stride,
            disparity,
        } => commands::backproject(&depth, &intrinsics, &out, stride, disparity),
        Command::Clean {
            input,
            out,
            crop,
            m,
            alpha,
        } => commands::clean(&input, &out, crop.as_deref(), m, alpha),
        Command::Estimate {
            cloud_t,
            cloud_t1,
            config,
            out_flow,
            target_depth,
            intrinsics,
            n_sample,
            seed,
        } => commands::estimate(
            &cloud_t,
            &cloud_t1,
            &config,
            &out_flow,
            target_depth.as_deref(),
            intrinsics.as_deref(),
            n_sample,
            seed,
        ),
        Command::Eval {
            pred_flow,
            gt_flow,
            out,
            intrinsics,
            source,
        } => commands::eval(
            &pred_flow,
            &gt_flow,
            &out,
            intrinsics.as_deref(),
            source.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pseudoflow_core::solver::SolveTrace;

    #[test]
    fn exit_codes_are_a_stable_contract() {
        assert_eq!(exit_code_for(&Error::Config("x".into())), 2);
        assert_eq!(exit_code_for(&Error::Shape("x".into())), 2);
        assert_eq!(
            exit_code_for(&Error::Schema {
                path: "f".into(),
                message: "m".into()
            }),
            2
        );
        assert_eq!(exit_code_for(&Error::EmptyInput("x".into())), 3);
        assert_eq!(exit_code_for(&Error::InsufficientPoints("x".into())), 3);
        assert_eq!(
            exit_code_for(&Error::SolverDiverged {
                level: 0,
                iteration: 0,
                trace: Box::new(SolveTrace::default())
            }),
            4
        );
    }
}
