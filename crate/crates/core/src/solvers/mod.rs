//! The joint `(z, v, x)` update loop and the two-loop baselines.

mod framework;
mod grid;
mod neumann;
mod record;
mod schedule;
mod two_loop;

pub use framework::{run_framework, Estimator};
pub use grid::{grid_search, log_grid, GridCell, GridObjective, GridResult, GridSpec};
pub use neumann::{draw_truncation, hia, hia_operator, shia, shia_operator};
pub use record::{RunRecord, RunRow, RunStatus};
pub use schedule::{StepSchedule, ALLOWED_EXPONENTS};
pub use two_loop::run_two_loop;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::Monitor;
use crate::oracle::{BatchSpec, BilevelOracle, JointState, ProblemDims};

/// Iterate norm above which a run is declared diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Soba,
    Saba,
    FullBatch,
    TwoLoopShia,
    TwoLoopHia,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Soba,
        Method::Saba,
        Method::FullBatch,
        Method::TwoLoopShia,
        Method::TwoLoopHia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Soba => "soba",
            Method::Saba => "saba",
            Method::FullBatch => "full-batch",
            Method::TwoLoopShia => "two-loop-shia",
            Method::TwoLoopHia => "two-loop-hia",
        }
    }

    pub fn estimator(self) -> Option<Estimator> {
        match self {
            Method::Soba => Some(Estimator::Soba),
            Method::Saba => Some(Estimator::Saba),
            Method::FullBatch => Some(Estimator::Full),
            Method::TwoLoopShia | Method::TwoLoopHia => None,
        }
    }

    /// Default `(a, b)` step exponents.
    pub fn default_exponents(self) -> (f64, f64) {
        match self {
            Method::Soba => (0.5, 0.5),
            _ => (0.0, 0.0),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

/// Starting memory for the SAGA-style estimator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryInit {
    /// Every slot evaluated at the initial state.
    #[default]
    InitialState,
    /// All slots zero.
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub schedule: StepSchedule,
    pub batch: BatchSpec,
    pub total_iters: usize,
    #[serde(default)]
    pub seed: u64,
    /// Inner SGD steps per outer iteration (two-loop only).
    #[serde(default = "default_ten")]
    pub inner_steps: usize,
    /// Neumann terms (two-loop only).
    #[serde(default = "default_ten")]
    pub neumann_steps: usize,
    /// Neumann step; defaults to `schedule.alpha`.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Rolling-mean refresh period for the SAGA-style memory. `None` picks
    /// `10·max(n_b, m_b)`; `Some(0)` never refreshes.
    #[serde(default)]
    pub recompute_every: Option<usize>,
    #[serde(default)]
    pub memory_init: MemoryInit,
    /// Stop once the cumulative oracle calls would exceed this.
    #[serde(default)]
    pub oracle_budget: Option<u64>,
    /// Stop once solver wall time (excluding evaluation) exceeds this.
    #[serde(default)]
    pub wall_budget_seconds: Option<f64>,
}

fn default_ten() -> usize {
    10
}

fn default_one() -> usize {
    1
}

impl SolverConfig {
    /// Single-sample batches, method-default exponents, evaluation every step.
    pub fn new(method: Method, alpha: f64, beta: f64, total_iters: usize) -> Self {
        let (a, b) = method.default_exponents();
        Self {
            method,
            schedule: StepSchedule { alpha, beta, a, b },
            batch: BatchSpec::single(),
            total_iters,
            seed: 0,
            inner_steps: 10,
            neumann_steps: 10,
            eta: None,
            eval_every: 1,
            recompute_every: None,
            memory_init: MemoryInit::InitialState,
            oracle_budget: None,
            wall_budget_seconds: None,
        }
    }

    pub fn validate(&self, dims: ProblemDims) -> Result<()> {
        self.schedule.validate()?;
        self.batch.validate(dims)?;
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be at least 1"));
        }
        if self.method.estimator().is_none() {
            if self.inner_steps == 0 || self.neumann_steps == 0 {
                return Err(invalid("two-loop methods need inner_steps ≥ 1 and neumann_steps ≥ 1"));
            }
            if let Some(eta) = self.eta {
                if !(eta > 0.0) {
                    return Err(invalid("eta must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(self.schedule.alpha)
    }
}

/// Runs any method from `init`; metrics come from `monitor` and are not
/// counted against the oracle.
pub fn run<O, M>(oracle: &O, config: &SolverConfig, monitor: &M, init: &JointState) -> Result<RunRecord>
where
    O: BilevelOracle + ?Sized,
    M: Monitor + ?Sized,
{
    match config.method.estimator() {
        Some(estimator) => run_framework(oracle, config, estimator, monitor, init),
        None => run_two_loop(oracle, config, monitor, init),
    }
}

pub(crate) fn divergence_reason(state: &JointState) -> Option<String> {
    if !state.is_finite() {
        Some("non-finite iterate".to_string())
    } else if state.max_norm() > DIVERGENCE_THRESHOLD {
        Some(format!("iterate norm {:e} above {DIVERGENCE_THRESHOLD:e}", state.max_norm()))
    } else {
        None
    }
}
