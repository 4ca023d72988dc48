use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bilevel_bench::fetch::{fetch, FetchRequest};
use bilevel_bench::{cache_optimum, run_experiment, run_gridsearch, summarize_dir, Aggregation, ExperimentConfig, Manifest, RunOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bilevel-bench", version, about = "Benchmark runner for stochastic bilevel solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file, or a manifest.json to replay.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
    /// Added to every configured seed (a replayed manifest supplies its own).
    #[arg(long)]
    seed_offset: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (solver, seed) cell.
    Run(Common),
    /// Grid-search step sizes for every solver.
    Grid(Common),
    /// Aggregate an output directory over seeds.
    Summarize {
        /// Directory written by `run`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "median")]
        agg: Aggregation,
    },
    /// Download a dataset file and verify its SHA-256.
    FetchData {
        #[arg(long)]
        url: String,
        #[arg(long)]
        name: Option<String>,
        /// Expected digest; otherwise `<url>.sha256` is used.
        #[arg(long)]
        expect_sha256: Option<String>,
        /// Target directory; defaults to $BILEVEL_DATA_DIR or ./data.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Compute and store the reference optimum of the configured problem.
    CacheOptimum {
        #[arg(long)]
        config: PathBuf,
        /// Cache file (overrides `optimum_cache`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Reads an experiment file, or the experiment recorded in a manifest.
fn load(path: &Path) -> bilevel_bench::Result<(ExperimentConfig, String, Option<u64>)> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::load(path)?;
        let config = manifest.experiment()?;
        return Ok((config, manifest.config, Some(manifest.seed_offset)));
    }
    let (config, text) = ExperimentConfig::load(path)?;
    Ok((config, text, None))
}

fn options(common: &Common, recorded_offset: Option<u64>) -> RunOptions {
    RunOptions {
        out: common.out.clone(),
        jobs: common.jobs,
        seed_offset: common.seed_offset.or(recorded_offset).unwrap_or(0),
    }
}

fn execute(cli: Cli) -> bilevel_bench::Result<()> {
    match cli.command {
        Command::Run(common) => {
            let (config, text, offset) = load(&common.config)?;
            let outcome = run_experiment(&config, &text, &options(&common, offset))?;
            println!(
                "{} cells ({} diverged) -> {}",
                outcome.manifest.cells.len(),
                outcome.manifest.diverged(),
                outcome.out_dir.display()
            );
        }
        Command::Grid(common) => {
            let (config, text, offset) = load(&common.config)?;
            let report = run_gridsearch(&config, &text, &options(&common, offset))?;
            for entry in &report.entries {
                match &entry.best {
                    Some(c) => println!("{}: alpha {:e} beta {:e} objective {:?}", entry.method, c.alpha, c.beta, c.objective),
                    None => println!("{}: every cell diverged", entry.method),
                }
            }
        }
        Command::Summarize { out, agg } => {
            let (curves, path) = summarize_dir(&out, agg)?;
            println!("{} points -> {}", curves.len(), path.display());
        }
        Command::FetchData {
            url,
            name,
            expect_sha256,
            dir,
        } => {
            let dir = dir.unwrap_or_else(bilevel::problems::dataset::data_dir);
            let path = fetch(&FetchRequest {
                url,
                name,
                expect_sha256,
                dir,
            })?;
            println!("{}", path.display());
        }
        Command::CacheOptimum { config, out } => {
            let (config, _) = ExperimentConfig::load(&config)?;
            let (path, entry) = cache_optimum(&config, out.as_deref())?;
            println!("h* = {:.12e} -> {}", entry.h_star, path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
