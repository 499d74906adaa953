use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use shapematch::flow::pose_induced_flow;
use shapematch::geometry::{CameraIntrinsics, RigidPose};
use shapematch::harness::{run_ablation, run_benchmark, BenchmarkReport, ScenarioSpec};
use shapematch::imaging::ColorImage;
use shapematch::mesh::load_mesh;
use shapematch::metrics::evaluate;
use shapematch::refiner::{refine_with_reference, Reference, RefinerConfig};
use shapematch::render::rasterize;
use shapematch::Error;

/// Render-and-compare pose refinement with shape-constrained flow.
#[derive(Parser)]
#[command(name = "shapematch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed; overrides the seed in --config (and in the scenario for bench/ablate).
    #[arg(long)]
    seed: Option<u64>,
    /// Refiner settings as JSON.
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Worker threads for batch runs (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a mesh: color.png, mask.png, depth and coordinate dumps.
    Render {
        #[arg(long)]
        mesh: String,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pose-induced flow from pose A to pose B as a .flo file.
    Flow {
        #[arg(long)]
        mesh: String,
        #[arg(long)]
        pose_a: PathBuf,
        #[arg(long)]
        pose_b: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Refine an initial pose against an observed image; writes a trace directory.
    Refine {
        #[arg(long)]
        mesh: String,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Ground-truth pose for per-iteration diagnostics.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Seeded Monte-Carlo benchmark; writes the per-trial CSV and companions.
    Bench {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Overrides the scenario's trial count.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// ADD / ADD-S of a predicted pose, printed as JSON.
    Eval {
        #[arg(long)]
        mesh: String,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Paired shape-constraint vs standard lookup benchmark.
    Ablate {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::Usage(m),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::from(Error::Io {
            path: path.into(),
            source: e,
        })
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{what} {}: {e}", path.display())))
}

fn refiner_config(common: &Common) -> CliResult<RefinerConfig> {
    let mut cfg = match &common.config {
        Some(p) => read_json(p, "config")?,
        None => RefinerConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scenario(path: Option<&Path>, trials: Option<usize>, common: &Common) -> CliResult<ScenarioSpec> {
    let mut spec = match path {
        Some(p) => read_json(p, "scenario")?,
        None => ScenarioSpec::default(),
    };
    if let Some(n) = trials {
        spec.trials = n;
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn intrinsics(path: &Path) -> CliResult<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path, "intrinsics")?;
    k.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(k)
}

fn pose(path: &Path) -> CliResult<RigidPose> {
    let p: RigidPose = read_json(path, "pose")?;
    p.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(p)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::from(Error::Io {
            path: dir.into(),
            source: e,
        })
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| {
        Failure::from(Error::Io {
            path: path.into(),
            source: e,
        })
    })
}

fn set_threads(common: &Common) -> CliResult<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

/// `<dir>/<stem>.<suffix>` next to `out`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or("report".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> shapematch::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn write_report(report: &BenchmarkReport, out: &Path) -> CliResult<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, &csv_bytes(|b| report.write_csv(b))?)?;
    write_file(
        &sibling(out, "iterations.csv"),
        &csv_bytes(|b| report.write_iteration_csv(b))?,
    )?;
    write_file(&sibling(out, "timing.csv"), &csv_bytes(|b| report.write_timing_csv(b))?)?;
    let summary = serde_json::to_string_pretty(&report.summary()).map_err(Error::from)?;
    write_file(&sibling(out, "summary.json"), summary.as_bytes())
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Render {
            mesh,
            pose: pose_path,
            intrinsics: k_path,
            out,
            common,
        } => {
            refiner_config(&common)?;
            let (k, p) = (intrinsics(&k_path)?, pose(&pose_path)?);
            let mesh = load_mesh(&mesh)?;
            let buffers = rasterize(&mesh, &p, &k);
            buffers.save(&out)?;
            log::info!("rendered {} mask pixels to {}", buffers.mask_count(), out.display());
        }
        Command::Flow {
            mesh,
            pose_a,
            pose_b,
            intrinsics: k_path,
            out,
            common,
        } => {
            refiner_config(&common)?;
            let (k, a, b) = (intrinsics(&k_path)?, pose(&pose_a)?, pose(&pose_b)?);
            let mesh = load_mesh(&mesh)?;
            let buffers = rasterize(&mesh, &a, &k);
            let flow = pose_induced_flow(&buffers, &a, &b, &k);
            flow.write_flo(&out)?;
            log::info!(
                "{} valid pixels, max |flow| {:.3} px",
                flow.valid_count(),
                flow.max_magnitude()
            );
        }
        Command::Refine {
            mesh,
            image,
            init,
            intrinsics: k_path,
            gt,
            out,
            common,
        } => {
            let cfg = refiner_config(&common)?;
            let (k, p0) = (intrinsics(&k_path)?, pose(&init)?);
            let gt = gt.map(|g| pose(&g)).transpose()?;
            let mesh = load_mesh(&mesh)?;
            let target = ColorImage::load_png(&image)?;
            let reference = gt.as_ref().map(|p| Reference { pose: p, depth: None });
            let trace = refine_with_reference(&target, &mesh, &p0, &k, &cfg, reference)?;
            trace.save(&out, Some(&target))?;
            if let Some(f) = &trace.failure {
                return Err(Failure::Runtime(format!("refinement stopped at {f}")));
            }
        }
        Command::Bench {
            scenario: s,
            trials,
            out,
            common,
        } => {
            let cfg = refiner_config(&common)?;
            let spec = scenario(s.as_deref(), trials, &common)?;
            set_threads(&common)?;
            let report = run_benchmark(&spec, &cfg)?;
            write_report(&report, &out)?;
            let n = cfg.iterations;
            println!(
                "{} trials: success@0.1d {:.3}, success@0.05d {:.3} after {n} iterations",
                report.trials.len(),
                report.success_rate(n, 0.1),
                report.success_rate(n, 0.05)
            );
        }
        Command::Eval { mesh, gt, pred, common } => {
            refiner_config(&common)?;
            let (g, p) = (pose(&gt)?, pose(&pred)?);
            let mesh = load_mesh(&mesh)?;
            let report = evaluate(&mesh, &g, &p)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
        }
        Command::Ablate {
            scenario: s,
            trials,
            out,
            common,
        } => {
            let cfg = refiner_config(&common)?;
            let spec = scenario(s.as_deref(), trials, &common)?;
            set_threads(&common)?;
            let report = run_ablation(&spec, &cfg)?;
            create_dir(&out)?;
            write_report(&report.shape_constraint, &out.join("shape_constraint.csv"))?;
            write_report(&report.standard, &out.join("standard.csv"))?;
            write_file(&out.join("paired.csv"), &csv_bytes(|b| report.write_paired_csv(b))?)?;
            write_file(
                &out.join("iterations.csv"),
                &csv_bytes(|b| report.write_iteration_csv(b))?,
            )?;
            let n = cfg.iterations;
            println!(
                "success@0.05d after {n} iterations: shape_constraint {:.3}, standard {:.3}",
                report.shape_constraint.success_rate(n, 0.05),
                report.standard.success_rate(n, 0.05)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
