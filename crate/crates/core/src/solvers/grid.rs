use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::record::RunRecord;
use super::{run, SolverConfig, StepSchedule};
use crate::error::{invalid, Error, Result};
use crate::metrics::Monitor;
use crate::oracle::{BilevelOracle, JointState};

/// Step grid with `beta = alpha / ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub ratios: Vec<f64>,
    pub runs_per_cell: usize,
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

/// Final quantity minimized by the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridObjective {
    Value,
    Suboptimality,
    GradNormSq,
    /// Running mean of `‖∇h‖²` over the logged rows.
    AvgGradNormSq,
    TestError,
}

impl GridObjective {
    fn of(self, record: &RunRecord) -> Option<f64> {
        let row = record.last()?;
        let value = match self {
            GridObjective::Value => Some(row.value),
            GridObjective::Suboptimality => row.suboptimality,
            GridObjective::GradNormSq => Some(row.grad_norm_sq),
            GridObjective::AvgGradNormSq => Some(row.grad_norm_sq_avg),
            GridObjective::TestError => row.test_error,
        };
        value.filter(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub ratio: f64,
    pub beta: f64,
    /// Median final objective; `None` when any replicate diverged.
    pub objective: Option<f64>,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }

    pub fn worst_objective(&self) -> Option<f64> {
        self.cells.iter().filter_map(|c| c.objective).reduce(f64::max)
    }
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

/// Runs every `(alpha, ratio)` cell `runs_per_cell` times (seeds
/// `base.seed + r`), cells in parallel, and keeps the cell with the smallest
/// median final objective. The base exponents are kept.
pub fn grid_search<O, M>(
    oracle: &O,
    base: &SolverConfig,
    monitor: &M,
    init: &JointState,
    spec: &GridSpec,
    objective: GridObjective,
) -> Result<GridResult>
where
    O: BilevelOracle + ?Sized,
    M: Monitor + Sync + ?Sized,
{
    if spec.alphas.is_empty() || spec.ratios.is_empty() || spec.runs_per_cell == 0 {
        return Err(invalid("grid needs at least one alpha, one ratio and one run per cell"));
    }
    let pairs: Vec<(f64, f64)> = spec
        .alphas
        .iter()
        .flat_map(|&a| spec.ratios.iter().map(move |&r| (a, r)))
        .collect();
    let cells = pairs
        .par_iter()
        .map(|&(alpha, ratio)| -> Result<GridCell> {
            let schedule = StepSchedule::from_ratio(alpha, ratio, base.schedule.a, base.schedule.b);
            let mut finals = Vec::with_capacity(spec.runs_per_cell);
            let mut diverged = 0;
            for r in 0..spec.runs_per_cell {
                let config = SolverConfig {
                    schedule,
                    seed: base.seed + r as u64,
                    ..base.clone()
                };
                let record = run(oracle, &config, monitor, init)?;
                match (record.status.is_diverged(), objective.of(&record)) {
                    (false, Some(v)) => finals.push(v),
                    _ => diverged += 1,
                }
            }
            Ok(GridCell {
                alpha,
                ratio,
                beta: schedule.beta,
                objective: if diverged == 0 { median(&mut finals) } else { None },
                diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = cells
        .iter()
        .enumerate()
        .filter_map(|(k, c)| c.objective.map(|v| (k, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .ok_or(Error::NoConvergentCell)?;
    Ok(GridResult { cells, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(2f64.powi(-5), 8.0, 9);
        assert_eq!(g.len(), 9);
        assert!((g[0] - 1.0 / 32.0).abs() < 1e-15 && (g[8] - 8.0).abs() < 1e-12);
        assert!((g[5] - 1.0).abs() < 1e-12);
        assert_eq!(log_grid(0.5, 3.0, 1), vec![0.5]);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [1.0, 100.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
