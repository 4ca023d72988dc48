//! Reference optimum `h*` for problems without a closed form: L-BFGS on the
//! exact value function.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{value_and_grad, ExactSolveConfig};
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg;
use crate::oracle::BilevelProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    /// Target `‖∇h(x)‖`.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub history: usize,
    pub solve: ExactSolveConfig,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            max_iters: 1000,
            history: 10,
            solve: ExactSolveConfig {
                inner_tol: 1e-12,
                linear_tol: 1e-12,
                max_iters: 500,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRun {
    pub x_star: Vec<f64>,
    pub h_star: f64,
    pub grad_norm: f64,
    pub iters: usize,
}

fn two_loop_direction(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * linalg::dot(s, &q);
        linalg::axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        linalg::scale(linalg::dot(s, y) / linalg::norm_sq(y), &mut q);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * linalg::dot(y, &q);
        linalg::axpy(a - b, s, &mut q);
    }
    linalg::scale(-1.0, &mut q);
    q
}

/// Minimizes `h` from `x0` (default: the problem's initial point).
pub fn reference_optimum<P: BilevelProblem>(
    problem: &P,
    x0: Option<&[f64]>,
    cfg: &ReferenceConfig,
) -> Result<ReferenceRun> {
    if !(cfg.grad_tol > 0.0) || cfg.history == 0 {
        return Err(invalid("reference run needs grad_tol > 0 and history ≥ 1"));
    }
    let mut x = match x0 {
        Some(x0) => {
            check_len("x0", x0, problem.dims().d)?;
            x0.to_vec()
        }
        None => problem.initial_outer(),
    };
    let mut cur = value_and_grad(problem, &x, &cfg.solve)?;
    let mut history = VecDeque::with_capacity(cfg.history);
    let mut iters = 0;
    loop {
        let gnorm = linalg::norm(&cur.grad);
        if gnorm <= cfg.grad_tol {
            break;
        }
        if iters == cfg.max_iters {
            return Err(Error::ToleranceNotMet {
                what: "reference run",
                iters,
                residual: gnorm,
                tol: cfg.grad_tol,
            });
        }
        iters += 1;
        let mut dir = two_loop_direction(&cur.grad, &history);
        let mut slope = linalg::dot(&dir, &cur.grad);
        if slope >= 0.0 {
            history.clear();
            dir = cur.grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
        }
        let mut t = if history.is_empty() { 1.0 / gnorm.max(1.0) } else { 1.0 };
        let mut next = None;
        for _ in 0..60 {
            let mut trial = x.clone();
            linalg::axpy(t, &dir, &mut trial);
            if trial == x {
                break;
            }
            // trial points can leave the strongly convex region; shrink on failure
            if let Ok(vg) = value_and_grad(problem, &trial, &cfg.solve) {
                let decrease = vg.value < cur.value && vg.value <= cur.value + 1e-4 * t * slope;
                // below the resolution of h, fall back to the gradient norm
                let unresolved = (vg.value - cur.value).abs() <= 8.0 * f64::EPSILON * cur.value.abs();
                let flat = unresolved && linalg::norm(&vg.grad) < 0.9 * gnorm;
                if decrease || flat {
                    next = Some((trial, vg));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_next, vg)) = next else {
            // no further progress resolvable in floating point
            break;
        };
        let s: Vec<f64> = x_next.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = vg.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let sy = linalg::dot(&s, &y);
        if sy > 1e-16 * linalg::norm(&s) * linalg::norm(&y) {
            if history.len() == cfg.history {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_next;
        cur = vg;
    }
    Ok(ReferenceRun {
        grad_norm: linalg::norm(&cur.grad),
        h_star: cur.value,
        x_star: x,
        iters,
    })
}
