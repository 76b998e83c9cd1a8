mod commands;
mod report;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ensemserve", version, about = "Allocate and serve model ensembles on CPUs and GPUs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Worst-fit placement then greedy search; caches the best matrix.
    Optimize(Common),
    /// Benchmark one allocation matrix.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Matrix document or cache entry to run.
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Size the search space and the neighborhood of the worst-fit matrix.
    Count {
        #[command(flatten)]
        common: Common,
        /// Count for a bare shape instead of spec files: MENU,DEVICES,MODELS.
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<u32>>,
    },
    /// Compare the one-model-per-GPU batch scan against the optimizer.
    Baseline(Common),
    /// Run the HTTP prediction service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        serve: ServeArgs,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Device spec file(s).
    #[arg(long, num_args = 1..)]
    cluster: Vec<PathBuf>,
    /// Model spec file(s).
    #[arg(long, num_args = 1..)]
    ensemble: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bench runs per matrix (median is reported).
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 10)]
    max_iter: usize,
    #[arg(long, default_value_t = 100)]
    max_neighs: usize,
    /// Batch size for the initial placement [default: smallest in the menu].
    #[arg(long)]
    default_batch: Option<u32>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// How matrices are scored during search.
    #[arg(long, value_enum, default_value_t = BenchKind::Synthetic)]
    bench: BenchKind,
    /// Scales every synthetic sleep.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Calibration samples per bench run.
    #[arg(long, default_value_t = 512)]
    calib_samples: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    /// Closed-form cost model, no threads.
    Analytic,
    /// Full pipeline with sleeping synthetic predictors.
    Synthetic,
    /// Full pipeline with instant zero predictors.
    FakeZero,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleKind {
    Avg,
    Vote,
    Wavg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Synthetic,
    FakeZero,
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    /// Matrix document or cache entry; otherwise looked up in --cache-dir.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, default_value_t = 50)]
    flush_timeout_ms: u64,
    #[arg(long, value_enum, default_value_t = RuleKind::Avg)]
    rule: RuleKind,
    /// Per-model weights for --rule wavg.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f32>,
    /// Predictors behind the service.
    #[arg(long, value_enum, default_value_t = BackendKind::Synthetic)]
    backend: BackendKind,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize(common) => commands::optimize(&common),
        Command::Bench { common, matrix } => commands::bench(&common, &matrix),
        Command::Count { common, shape } => commands::count(&common, shape.as_deref()),
        Command::Baseline(common) => commands::baseline(&common),
        Command::Serve { common, serve } => commands::serve(&common, &serve),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
