use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod failure;
mod grid;

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "mvboot", version, about = "Multiview bootstrapping: triangulate weak detections, mine frames, plan camera setups")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Robustly triangulate every frame of a detections file.
    Triangulate(TriangulateArgs),
    /// Run the bootstrapping loop on a synthetic capture, or emit labels
    /// from an existing triangulation file.
    Bootstrap(BootstrapArgs),
    /// Tabulate true and false positive rates for camera setups.
    Plan(PlanArgs),
    /// PCK curves and the viewing-angle outlier heatmap.
    Eval(EvalArgs),
    /// Write a synthetic capture: calibration, detections and 2D ground truth.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct TriangulateArgs {
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// TOML configuration; only the `ransac` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output JSON lines; standard output when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `paths.output_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Select frames and emit labels from this triangulation file instead
    /// of simulating. Requires `--calibration`.
    #[arg(long, requires = "calibration")]
    pub triangulations: Option<PathBuf>,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Overrides `bootstrap.iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Camera counts: repeat the flag, or give a list `5,31` or range `2:10`.
    #[arg(long)]
    pub views: Vec<String>,
    #[arg(long)]
    pub inliers: Vec<String>,
    #[arg(long)]
    pub sigma: Vec<String>,
    #[arg(long)]
    pub width: Vec<String>,
    /// Detector PCK values, e.g. `0:1:0.05`.
    #[arg(long)]
    pub pck: Vec<String>,
    #[arg(long)]
    pub keypoints: Vec<String>,
    /// Check every row by simulation, e.g. `trials=1e5` or `trials=1e5,seed=7`.
    #[arg(long)]
    pub verify_mc: Option<String>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions in the detections CSV layout.
    #[arg(long, requires = "truth")]
    pub predictions: Option<PathBuf>,
    /// Ground truth, `frame,view,keypoint,x,y`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Error scale in pixels.
    #[arg(long, conflicts_with = "head_length")]
    pub scale: Option<f64>,
    /// Head length in pixels; the error scale is 0.7 times this.
    #[arg(long)]
    pub head_length: Option<f64>,
    /// Normalized thresholds, e.g. `0:0.5:0.01`.
    #[arg(long, default_value = "0:0.5:0.01")]
    pub thresholds: String,
    /// Triangulation file for the heatmap.
    #[arg(long, requires_all = ["calibration", "detections"])]
    pub triangulations: Option<PathBuf>,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Heatmap bin size in degrees.
    #[arg(long, default_value_t = 20.0)]
    pub bin: f64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Scene and detector settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub pck: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop all occluders.
    #[arg(long)]
    pub no_occluders: bool,
    /// Noise-free detections of every keypoint with confidence 1.
    #[arg(long)]
    pub exact: bool,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global().map_err(|e| Failure::other(e.to_string()))?;
    }
    if cli.dump_defaults {
        print!("{}", mvboot::config::PipelineConfig::default().to_toml_string());
        return Ok(());
    }
    match cli.command {
        Some(Command::Triangulate(a)) => commands::triangulate(&a),
        Some(Command::Bootstrap(a)) => commands::bootstrap(&a),
        Some(Command::Plan(a)) => commands::plan(&a),
        Some(Command::Eval(a)) => commands::eval(&a),
        Some(Command::Simulate(a)) => commands::simulate(&a),
        None => Err(Failure::parse("no command given; see --help")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
