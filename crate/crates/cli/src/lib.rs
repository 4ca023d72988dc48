//! Benchmark runner for the bilevel solvers: declarative TOML experiments,
//! multi-seed orchestration, step-size grid search, and CSV/JSON output for
//! external plotting.

pub mod config;
pub mod error;
pub mod experiment;
pub mod fetch;
pub mod manifest;
pub mod problem;
pub mod summary;
pub mod table;

pub use config::{ExperimentConfig, GridAxis, GridBlock, ProblemSpec, SolverSpec};
pub use error::{CliError, Result};
pub use experiment::{cache_optimum, run_experiment, run_gridsearch, ExperimentOutcome, GridReport, RunOptions};
pub use manifest::{CellEntry, Manifest};
pub use problem::AnyProblem;
pub use summary::{summarize, summarize_dir, Aggregation, CurveRow};
pub use table::{read_csv, records_to_rows, write_csv, ResultRow};
