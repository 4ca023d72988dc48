use serde::{Deserialize, Serialize};

use super::Method;
use crate::metrics::Observation;
use crate::oracle::{JointState, OracleCounts};

/// One logged evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub t: usize,
    pub value: f64,
    pub grad_norm_sq: f64,
    /// Mean of `grad_norm_sq` over the rows logged so far.
    pub grad_norm_sq_avg: f64,
    /// Minimum of `grad_norm_sq` over the rows logged so far.
    pub grad_norm_sq_inf: f64,
    pub suboptimality: Option<f64>,
    pub delta_z: f64,
    pub delta_v: f64,
    pub test_error: Option<f64>,
    pub grad_calls: u64,
    pub hvp_calls: u64,
    pub wall_seconds: f64,
}

impl RunRow {
    pub fn oracle_calls(&self) -> u64 {
        self.grad_calls + self.hvp_calls
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    /// Stopped on an oracle or wall-clock budget.
    BudgetExhausted { t: usize },
    Diverged { t: usize, reason: String },
}

impl RunStatus {
    pub fn is_diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub rows: Vec<RunRow>,
    pub status: RunStatus,
    /// Iterations actually performed.
    pub iterations: usize,
    pub counts: OracleCounts,
    pub final_state: JointState,
}

impl RunRecord {
    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }
}

/// Accumulates rows and the running statistics.
pub(crate) struct RowLog {
    rows: Vec<RunRow>,
    sum: f64,
    inf: f64,
}

impl RowLog {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            sum: 0.0,
            inf: f64::INFINITY,
        }
    }

    pub fn push(&mut self, t: usize, obs: &Observation, counts: OracleCounts, wall_seconds: f64) {
        self.sum += obs.grad_norm_sq;
        self.inf = self.inf.min(obs.grad_norm_sq);
        self.rows.push(RunRow {
            t,
            value: obs.value,
            grad_norm_sq: obs.grad_norm_sq,
            grad_norm_sq_avg: self.sum / (self.rows.len() + 1) as f64,
            grad_norm_sq_inf: self.inf,
            suboptimality: obs.suboptimality,
            delta_z: obs.delta_z,
            delta_v: obs.delta_v,
            test_error: obs.test_error,
            grad_calls: counts.grads,
            hvp_calls: counts.hvps,
            wall_seconds,
        });
    }

    pub fn last_t(&self) -> Option<usize> {
        self.rows.last().map(|r| r.t)
    }

    pub fn into_rows(self) -> Vec<RunRow> {
        self.rows
    }
}
