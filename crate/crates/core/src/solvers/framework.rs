use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::record::{RowLog, RunRecord, RunStatus};
use super::{divergence_reason, MemoryInit, SolverConfig};
use crate::directions::{
    add_full_directions, add_soba_directions, saba_directions_into, DirectionTriple, IndexDraw, IndexSampler,
    SabaMemory,
};
use crate::error::{invalid, Result};
use crate::linalg;
use crate::metrics::Monitor;
use crate::oracle::{BatchSpec, BilevelOracle, JointState, OracleCounts};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Soba,
    Saba,
    Full,
}

/// What a run loop does after each step.
pub(crate) enum Outcome {
    Continue,
    Stop(RunStatus),
}

/// Shared bookkeeping of the solver loops: counts, budgets, timing,
/// divergence and out-of-band evaluation.
pub(crate) struct Driver<'a, M: ?Sized> {
    config: &'a SolverConfig,
    monitor: &'a M,
    pub counts: OracleCounts,
    log: RowLog,
    solver_seconds: f64,
    started: Instant,
}

impl<'a, M: Monitor + ?Sized> Driver<'a, M> {
    pub fn new(config: &'a SolverConfig, monitor: &'a M) -> Self {
        Self {
            config,
            monitor,
            counts: OracleCounts::default(),
            log: RowLog::new(),
            solver_seconds: 0.0,
            started: Instant::now(),
        }
    }

    /// Starts the solver clock.
    pub fn tick(&mut self) {
        self.started = Instant::now();
    }

    /// Stops the solver clock.
    pub fn tock(&mut self) {
        self.solver_seconds += self.started.elapsed().as_secs_f64();
    }

    pub fn would_exceed(&self, cost: OracleCounts) -> bool {
        self.config
            .oracle_budget
            .is_some_and(|budget| (self.counts + cost).total() > budget)
    }

    fn observe(&mut self, t: usize, state: &JointState) -> Outcome {
        match self.monitor.observe(state) {
            Ok(obs) => {
                self.log.push(t, &obs, self.counts, self.solver_seconds);
                Outcome::Continue
            }
            Err(e) => Outcome::Stop(RunStatus::Diverged {
                t,
                reason: format!("evaluation failed: {e}"),
            }),
        }
    }

    pub fn initial(&mut self, state: &JointState) -> Outcome {
        self.observe(0, state)
    }

    /// Checks the state after step `t` and logs it on the evaluation cadence.
    pub fn after_step(&mut self, t: usize, state: &JointState) -> Outcome {
        if let Some(reason) = divergence_reason(state) {
            log::debug!("{} diverged at t={t}: {reason}", self.config.method);
            return Outcome::Stop(RunStatus::Diverged { t, reason });
        }
        if t % self.config.eval_every == 0 || t == self.config.total_iters {
            if let Outcome::Stop(status) = self.observe(t, state) {
                return Outcome::Stop(status);
            }
        }
        if self
            .config
            .wall_budget_seconds
            .is_some_and(|budget| self.solver_seconds > budget)
        {
            return Outcome::Stop(RunStatus::BudgetExhausted { t });
        }
        Outcome::Continue
    }

    /// Logs the last state of a run stopped on a budget if it was not logged.
    pub fn finish(mut self, status: RunStatus, iterations: usize, state: JointState) -> RunRecord {
        if matches!(status, RunStatus::BudgetExhausted { .. }) && self.log.last_t() != Some(iterations) {
            if let Outcome::Stop(failure) = self.observe(iterations, &state) {
                return self.finish(failure, iterations, state);
            }
        }
        RunRecord {
            method: self.config.method,
            seed: self.config.seed,
            rows: self.log.into_rows(),
            status,
            iterations,
            counts: self.counts,
            final_state: state,
        }
    }
}

fn recompute_period(config: &SolverConfig, memory: &SabaMemory) -> usize {
    match config.recompute_every {
        Some(period) => period,
        None => 10 * memory.inner_slots().max(memory.outer_slots()),
    }
}

/// Joint updates `z ← z − ρ^t D_z`, `v ← v − ρ^t D_v`, `x ← x − γ^t D_x` with
/// directions from `estimator` and a fresh independent block draw per step.
pub fn run_framework<O, M>(
    oracle: &O,
    config: &SolverConfig,
    estimator: Estimator,
    monitor: &M,
    init: &JointState,
) -> Result<RunRecord>
where
    O: BilevelOracle + ?Sized,
    M: Monitor + ?Sized,
{
    let dims = oracle.dims();
    config.validate(dims)?;
    init.validate(dims)?;
    if config.method.estimator() != Some(estimator) {
        return Err(invalid(format!("method {} does not use the {estimator:?} estimator", config.method)));
    }
    let batch = match estimator {
        Estimator::Full => BatchSpec::full(dims),
        _ => config.batch,
    };
    let inner = batch.inner_blocks(dims);
    let outer = batch.outer_blocks(dims);
    let mut sampler = IndexSampler::new(rng::stream(config.seed, Stream::Indices), inner.count(), outer.count());
    let mut state = init.clone();
    let mut dirs = DirectionTriple::zeros(dims);
    let mut driver = Driver::new(config, monitor);

    if let Outcome::Stop(status) = driver.initial(&state) {
        return Ok(driver.finish(status, 0, state));
    }

    driver.tick();
    let mut memory = match estimator {
        Estimator::Saba => {
            let mut memory = SabaMemory::uninitialized(dims, batch)?;
            match config.memory_init {
                MemoryInit::InitialState => {
                    memory.init_at(&state, oracle)?;
                    driver.counts += OracleCounts::for_samples(dims.n, dims.m);
                }
                MemoryInit::Zeros => memory.init_zeros(),
            }
            Some(memory)
        }
        _ => None,
    };
    let period = memory.as_ref().map_or(0, |m| recompute_period(config, m));
    driver.tock();

    let mut status = RunStatus::Completed;
    let mut t = 0;
    while t < config.total_iters {
        let draw = match estimator {
            Estimator::Full => IndexDraw { i: 0, j: 0 },
            _ => sampler.draw(),
        };
        let cost = OracleCounts::for_samples(inner.range(draw.i).len(), outer.range(draw.j).len());
        if driver.would_exceed(cost) {
            status = RunStatus::BudgetExhausted { t };
            break;
        }
        driver.tick();
        match (&mut memory, estimator) {
            (Some(memory), _) => saba_directions_into(&state, draw, memory, oracle, &mut dirs)?,
            (None, Estimator::Full) => {
                dirs = DirectionTriple::zeros(dims);
                add_full_directions(&state, oracle, &mut dirs);
            }
            (None, _) => {
                dirs = DirectionTriple::zeros(dims);
                add_soba_directions(&state, draw, oracle, &inner, &outer, &mut dirs);
            }
        }
        t += 1;
        let rho = config.schedule.rho(t);
        let gamma = config.schedule.gamma(t);
        linalg::axpy(-rho, &dirs.dz, &mut state.z);
        linalg::axpy(-rho, &dirs.dv, &mut state.v);
        linalg::axpy(-gamma, &dirs.dx, &mut state.x);
        if let Some(memory) = &mut memory {
            if period > 0 && t % period == 0 {
                memory.recompute_averages(true);
            }
        }
        driver.counts += cost;
        driver.tock();
        if let Outcome::Stop(stop) = driver.after_step(t, &state) {
            status = stop;
            break;
        }
    }
    Ok(driver.finish(status, t, state))
}
