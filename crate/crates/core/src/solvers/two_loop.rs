use super::framework::{Driver, Outcome};
use super::neumann::{draw_truncation, hia_operator, sampled_hvp, shia_operator};
use super::record::{RunRecord, RunStatus};
use super::{Method, SolverConfig};
use crate::directions::IndexSampler;
use crate::error::{invalid, Result};
use crate::linalg;
use crate::metrics::Monitor;
use crate::oracle::{BilevelOracle, JointState, OracleCounts};
use crate::rng::{self, Stream};

/// Per outer iteration `t`: `K` inner SGD steps with step `ρ^t`, an SHIA or
/// HIA estimate `v̂ ≈ −[∇²₁₁G]⁻¹∇₁F_j`, then `x ← x − γ^t (∇²₂₁G_i v̂ + ∇₂F_j)`.
/// The logged `v` is the latest `v̂`.
pub fn run_two_loop<O, M>(oracle: &O, config: &SolverConfig, monitor: &M, init: &JointState) -> Result<RunRecord>
where
    O: BilevelOracle + ?Sized,
    M: Monitor + ?Sized,
{
    let dims = oracle.dims();
    config.validate(dims)?;
    init.validate(dims)?;
    let use_shia = match config.method {
        Method::TwoLoopShia => true,
        Method::TwoLoopHia => false,
        other => return Err(invalid(format!("{other} is not a two-loop method"))),
    };
    let inner = config.batch.inner_blocks(dims);
    let outer = config.batch.outer_blocks(dims);
    let mut sampler = IndexSampler::new(rng::stream(config.seed, Stream::Indices), inner.count(), outer.count());
    let mut neumann_rng = rng::stream(config.seed, Stream::Neumann);
    let eta = config.eta();
    let b = config.neumann_steps;
    let mut state = init.clone();
    let mut driver = Driver::new(config, monitor);
    let mut grad_in = vec![0.0; dims.p];
    let mut grad_out = vec![0.0; dims.d];

    if let Outcome::Stop(status) = driver.initial(&state) {
        return Ok(driver.finish(status, 0, state));
    }

    let mut status = RunStatus::Completed;
    let mut t = 0;
    while t < config.total_iters {
        // worst case: every sampled block is a full-size one
        let worst_inner = inner.size() as u64;
        let worst_outer = outer.size() as u64;
        let worst = OracleCounts {
            grads: config.inner_steps as u64 * worst_inner + 2 * worst_outer,
            hvps: (b as u64 + 1) * worst_inner,
        };
        if driver.would_exceed(worst) {
            status = RunStatus::BudgetExhausted { t };
            break;
        }
        driver.tick();
        t += 1;
        let rho = config.schedule.rho(t);
        let gamma = config.schedule.gamma(t);

        for _ in 0..config.inner_steps {
            let k = sampler.draw_inner();
            let range = inner.range(k);
            let scale = inner.weight(k) / range.len() as f64;
            grad_in.iter_mut().for_each(|g| *g = 0.0);
            for i in range.clone() {
                oracle.add_grad_g_in(i, &state.z, &state.x, scale, &mut grad_in);
            }
            driver.counts.grads += range.len() as u64;
            linalg::axpy(-rho, &grad_in, &mut state.z);
        }

        let j = sampler.draw_outer();
        let range = outer.range(j);
        let scale = outer.weight(j) / range.len() as f64;
        grad_in.iter_mut().for_each(|g| *g = 0.0);
        grad_out.iter_mut().for_each(|g| *g = 0.0);
        for jj in range.clone() {
            oracle.add_f_terms(jj, &state.z, &state.x, scale, &mut grad_in, &mut grad_out);
        }
        driver.counts.grads += 2 * range.len() as u64;

        let mut hvp_samples = 0;
        let estimate = {
            let truncation = if use_shia { b } else { draw_truncation(&mut neumann_rng, b) };
            let hvp = sampled_hvp(oracle, inner, &state.z, &state.x, &mut neumann_rng, &mut hvp_samples);
            if use_shia {
                shia_operator(hvp, &grad_in, b, eta)
            } else {
                hia_operator(hvp, &grad_in, b, truncation, eta)
            }
        };
        driver.counts.hvps += hvp_samples;
        state.v = estimate.into_iter().map(|e| -e).collect();

        let k = sampler.draw_inner();
        let range = inner.range(k);
        let scale = inner.weight(k) / range.len() as f64;
        for i in range.clone() {
            oracle.add_cross_g(i, &state.z, &state.x, &state.v, scale, &mut grad_out);
        }
        driver.counts.hvps += range.len() as u64;
        linalg::axpy(-gamma, &grad_out, &mut state.x);
        driver.tock();

        if let Outcome::Stop(stop) = driver.after_step(t, &state) {
            status = stop;
            break;
        }
    }
    Ok(driver.finish(status, t, state))
}
