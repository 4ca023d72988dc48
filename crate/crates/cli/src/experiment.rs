//! Executes experiment files: every (solver, seed) cell, or the step-size
//! grid for every solver.

use std::fs::File;
use std::path::{Path, PathBuf};

use bilevel::metrics::{reference_optimum, CachedOptimum, Evaluator, ExactSolveConfig, ReferenceConfig};
use bilevel::solvers::{self, grid_search, GridCell, RunRecord, RunStatus};
use bilevel::{BilevelOracle, BilevelProblem, JointState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SolverSpec};
use crate::error::{config_err, CliError, IoContext, Result};
use crate::manifest::{CellEntry, Manifest, CELL_DIR, MANIFEST_FILE, MERGED_FILE};
use crate::problem::AnyProblem;
use crate::table::{records_to_rows, write_csv, ResultRow};

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Overrides the configured output directory.
    pub out: Option<PathBuf>,
    pub jobs: usize,
    /// Added to every configured seed.
    pub seed_offset: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out: None,
            jobs: 1,
            seed_offset: 0,
        }
    }
}

pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub records: Vec<(String, RunRecord)>,
    pub manifest: Manifest,
}

fn prepare_out_dir(config: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let dir = opts.out.clone().unwrap_or_else(|| config.out_dir.clone());
    std::fs::create_dir_all(dir.join(CELL_DIR)).at(&dir)?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| config_err("out_dir", format!("{} is not writable: {e}", dir.display())))?;
    std::fs::remove_file(&probe).at(&probe)?;
    Ok(dir)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| config_err("--jobs", e.to_string()))
}

fn initial_state(problem: &AnyProblem) -> JointState {
    let mut state = JointState::zeros(problem.dims());
    state.x = problem.initial_outer();
    state
}

/// Ground truth evaluator; a configured reference cache supplies `h*` for
/// problems without a closed form.
fn evaluator<'a>(problem: &'a AnyProblem, config: &ExperimentConfig) -> Result<Evaluator<'a, AnyProblem>> {
    let eval = Evaluator::new(problem, ExactSolveConfig::default())?;
    if eval.h_star().is_some() {
        return Ok(eval);
    }
    match &config.optimum_cache {
        Some(path) if path.exists() => {
            let entry = CachedOptimum::load(path, problem)?;
            Ok(eval.with_optimum(entry.h_star))
        }
        Some(path) => {
            log::warn!("no reference optimum at {}; suboptimality is not logged", path.display());
            Ok(eval)
        }
        None => Ok(eval),
    }
}

fn load_problem(config: &ExperimentConfig) -> Result<AnyProblem> {
    config.validate()?;
    let problem = AnyProblem::build(&config.problem)?;
    config.validate_for(problem.dims())?;
    Ok(problem)
}

/// Runs every (solver, seed) cell on a pool of `opts.jobs` workers and
/// writes one CSV per cell, the merged CSV and the manifest. Diverged cells
/// are recorded, not fatal.
pub fn run_experiment(config: &ExperimentConfig, config_text: &str, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let problem = load_problem(config)?;
    let out_dir = prepare_out_dir(config, opts)?;
    let monitor = evaluator(&problem, config)?;
    let init = initial_state(&problem);
    let cells: Vec<(&SolverSpec, u64)> = config
        .solvers
        .iter()
        .flat_map(|s| config.seeds.iter().map(move |&seed| (s, seed + opts.seed_offset)))
        .collect();

    let results: Vec<(String, RunRecord, CellEntry, Vec<ResultRow>)> = pool(opts.jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(spec, seed)| {
                let label = spec.label();
                let record = solvers::run(&problem, &spec.to_config(seed, config), &monitor, &init)?;
                let rows = records_to_rows(&label, &record);
                let csv = format!("{CELL_DIR}/{label}_seed{seed}.csv");
                let path = out_dir.join(&csv);
                write_csv(File::create(&path).at(&path)?, &rows)?;
                match &record.status {
                    RunStatus::Diverged { t, reason } => log::warn!("{label} seed {seed}: diverged at t = {t} ({reason})"),
                    status => log::info!("{label} seed {seed}: {status:?} after {} iterations", record.iterations),
                }
                let entry = CellEntry {
                    method: label.clone(),
                    seed,
                    status: record.status.clone(),
                    iterations: record.iterations,
                    oracle_calls: record.counts.total(),
                    csv,
                };
                Ok((label, record, entry, rows))
            })
            .collect::<Result<_>>()
    })?;

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for (label, record, entry, cell_rows) in results {
        rows.extend(cell_rows);
        records.push((label, record));
        entries.push(entry);
    }
    let merged = out_dir.join(MERGED_FILE);
    write_csv(File::create(&merged).at(&merged)?, &rows)?;
    let manifest = Manifest::new(config_text, opts.seed_offset, entries);
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    if manifest.diverged() > 0 {
        log::warn!("{} of {} cells diverged", manifest.diverged(), manifest.cells.len());
    }
    Ok(ExperimentOutcome {
        out_dir,
        rows,
        records,
        manifest,
    })
}

/// Best step sizes of one solver entry; `best` is `None` when every cell
/// diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub method: String,
    pub best: Option<GridCell>,
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub config_sha256: String,
    pub seed_offset: u64,
    pub entries: Vec<GridEntry>,
}

pub const GRID_REPORT_FILE: &str = "grid_report.json";

/// Grid-searches `(alpha, beta / alpha)` for every solver entry, keeping the
/// pair with the smallest median final objective. Replicate `r` of a cell
/// uses seed `seeds[0] + seed_offset + r`.
pub fn run_gridsearch(config: &ExperimentConfig, config_text: &str, opts: &RunOptions) -> Result<GridReport> {
    let (spec, objective) = config
        .grid_spec()
        .ok_or_else(|| config_err("grid", "the grid subcommand needs a [grid] block"))?;
    let problem = load_problem(config)?;
    let out_dir = prepare_out_dir(config, opts)?;
    let monitor = evaluator(&problem, config)?;
    let init = initial_state(&problem);
    let base_seed = config.seeds[0] + opts.seed_offset;
    let workers = pool(opts.jobs)?;

    let mut entries = Vec::new();
    for solver in &config.solvers {
        let label = solver.label();
        let base = solver.to_config(base_seed, config);
        let entry = match workers.install(|| grid_search(&problem, &base, &monitor, &init, &spec, objective)) {
            Ok(result) => {
                let best = result.best_cell().clone();
                log::info!(
                    "{label}: best alpha {:e}, beta {:e} (objective {:?})",
                    best.alpha,
                    best.beta,
                    best.objective
                );
                GridEntry {
                    method: label.clone(),
                    best: Some(best),
                    cells: result.cells,
                }
            }
            Err(bilevel::Error::NoConvergentCell) => {
                log::warn!("{label}: every grid cell diverged");
                GridEntry {
                    method: label.clone(),
                    best: None,
                    cells: Vec::new(),
                }
            }
            Err(e) => return Err(e.into()),
        };
        let path = out_dir.join(format!("grid_{label}.csv"));
        let mut w = csv::Writer::from_writer(File::create(&path).at(&path)?);
        for cell in &entry.cells {
            w.serialize(cell)?;
        }
        w.flush().at(&path)?;
        entries.push(entry);
    }
    let report = GridReport {
        config_sha256: crate::manifest::sha256_hex(config_text.as_bytes()),
        seed_offset: opts.seed_offset,
        entries,
    };
    let path = out_dir.join(GRID_REPORT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).at(&path)?;
    Ok(report)
}

/// Computes the reference optimum of the configured problem and stores it at
/// `out`, else at the configured `optimum_cache`.
pub fn cache_optimum(config: &ExperimentConfig, out: Option<&Path>) -> Result<(PathBuf, CachedOptimum)> {
    let path = out
        .map(Path::to_path_buf)
        .or_else(|| config.optimum_cache.clone())
        .ok_or_else(|| config_err("optimum_cache", "no cache path configured and none given"))?;
    let problem = AnyProblem::build(&config.problem)?;
    let cfg = ReferenceConfig::default();
    let run = reference_optimum(&problem, None, &cfg)?;
    log::info!(
        "{}: h* = {:.12e} after {} iterations (|grad| {:e})",
        problem.name(),
        run.h_star,
        run.iters,
        run.grad_norm
    );
    let entry = CachedOptimum::new(&problem, &run, cfg.grad_tol);
    entry.save(&path).map_err(CliError::from)?;
    Ok((path, entry))
}
