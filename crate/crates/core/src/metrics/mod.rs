//! Ground-truth evaluation with exact (deterministic, full-batch) solves.
//!
//! Nothing here samples, and nothing here goes through the solvers' oracle
//! counters: evaluation is out of band.

mod cache;
mod reference;

pub use cache::{CachedOptimum, CACHE_VERSION};
pub use reference::{reference_optimum, ReferenceConfig, ReferenceRun};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg;
use crate::oracle::{BilevelOracle, BilevelProblem, JointState, SampledOp, SampledOps};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactSolveConfig {
    /// Target `‖∇₁G(z, x)‖`.
    pub inner_tol: f64,
    /// Target adjoint residual `‖∇²₁₁G v + ∇₁F‖`.
    pub linear_tol: f64,
    pub max_iters: usize,
}

impl Default for ExactSolveConfig {
    fn default() -> Self {
        Self {
            inner_tol: 1e-10,
            linear_tol: 1e-10,
            max_iters: 500,
        }
    }
}

impl ExactSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_tol > 0.0) || !(self.linear_tol > 0.0) {
            return Err(invalid("solve tolerances must be positive"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        Ok(())
    }
}

fn inner_hvp<'a, O: BilevelOracle>(oracle: &'a O, z: &[f64], x: &[f64]) -> impl Fn(&[f64], &mut [f64]) + 'a {
    let n = oracle.dims().n;
    let z = z.to_vec();
    let x = x.to_vec();
    move |v, out| {
        let scale = 1.0 / n as f64;
        for i in 0..n {
            oracle.add_hvp_g(i, &z, &x, v, scale, out);
        }
    }
}

/// Minimizes `G(·, x)` to `‖∇₁G‖ ≤ inner_tol` with a truncated Newton method
/// (conjugate-gradient Newton steps, Armijo backtracking), starting from `z0`
/// or from zero.
pub fn solve_inner<O: BilevelOracle>(
    oracle: &O,
    x: &[f64],
    cfg: &ExactSolveConfig,
    z0: Option<&[f64]>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dims = oracle.dims();
    check_len("x", x, dims.d)?;
    let mut z = match z0 {
        Some(z0) => {
            check_len("z0", z0, dims.p)?;
            z0.to_vec()
        }
        None => vec![0.0; dims.p],
    };
    let mut value = oracle.g_full(&z, x);
    let mut grad = oracle.full_mean(SampledOp::GradGIn, &z, x, &[])?;
    let mut gnorm = linalg::norm(&grad);
    let mut iters = 0;
    while gnorm > cfg.inner_tol {
        if iters == cfg.max_iters || !gnorm.is_finite() {
            return Err(Error::ToleranceNotMet {
                what: "inner solve",
                iters,
                residual: gnorm,
                tol: cfg.inner_tol,
            });
        }
        iters += 1;
        let forcing = gnorm.sqrt().min(0.5) * gnorm;
        let neg_grad: Vec<f64> = grad.iter().map(|g| -g).collect();
        let (mut step, _, _) =
            linalg::conjugate_gradient(inner_hvp(oracle, &z, x), &neg_grad, None, forcing, 2 * dims.p + 20);
        if linalg::dot(&step, &grad) >= 0.0 {
            step = neg_grad;
        }
        let slope = linalg::dot(&step, &grad);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = z.clone();
            linalg::axpy(t, &step, &mut trial);
            let trial_value = oracle.g_full(&trial, x);
            if trial_value <= value + 1e-4 * t * slope {
                accepted = Some((trial, trial_value));
                break;
            }
            // close to the optimum the values stop resolving; accept any
            // step that still shrinks the gradient
            let trial_grad = oracle.full_mean(SampledOp::GradGIn, &trial, x, &[])?;
            if linalg::norm(&trial_grad) < gnorm {
                accepted = Some((trial, trial_value));
                break;
            }
            t *= 0.5;
        }
        let Some((next, next_value)) = accepted else {
            return Err(Error::ToleranceNotMet {
                what: "inner solve",
                iters,
                residual: gnorm,
                tol: cfg.inner_tol,
            });
        };
        z = next;
        value = next_value;
        grad = oracle.full_mean(SampledOp::GradGIn, &z, x, &[])?;
        gnorm = linalg::norm(&grad);
    }
    Ok(z)
}

/// Solves `∇²₁₁G(z, x) v = −∇₁F(z, x)` by conjugate gradient on
/// Hessian-vector products.
pub fn solve_adjoint<O: BilevelOracle>(
    oracle: &O,
    z_star: &[f64],
    x: &[f64],
    cfg: &ExactSolveConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dims = oracle.dims();
    check_len("z", z_star, dims.p)?;
    check_len("x", x, dims.d)?;
    let rhs: Vec<f64> = oracle
        .full_mean(SampledOp::GradFIn, z_star, x, &[])?
        .into_iter()
        .map(|g| -g)
        .collect();
    let max_iters = cfg.max_iters.max(4 * dims.p);
    let apply = inner_hvp(oracle, z_star, x);
    let (mut v, mut residual, mut iters) = linalg::conjugate_gradient(&apply, &rhs, None, cfg.linear_tol, max_iters);
    // one restart from the current iterate absorbs the loss of conjugacy
    if residual > cfg.linear_tol {
        let (v2, r2, i2) = linalg::conjugate_gradient(&apply, &rhs, Some(&v), cfg.linear_tol, max_iters);
        v = v2;
        residual = r2;
        iters += i2;
    }
    if residual > cfg.linear_tol || !linalg::all_finite(&v) {
        return Err(Error::ToleranceNotMet {
            what: "adjoint solve",
            iters,
            residual,
            tol: cfg.linear_tol,
        });
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueAndGrad {
    pub value: f64,
    pub grad: Vec<f64>,
    pub z_star: Vec<f64>,
    pub v_star: Vec<f64>,
}

/// `h(x) = F(z*(x), x)` and `∇h(x) = ∇₂F(z*, x) + ∇²₂₁G(z*, x) v*`.
pub fn value_and_grad<O: BilevelOracle>(oracle: &O, x: &[f64], cfg: &ExactSolveConfig) -> Result<ValueAndGrad> {
    let z_star = solve_inner(oracle, x, cfg, None)?;
    let v_star = solve_adjoint(oracle, &z_star, x, cfg)?;
    let value = oracle.f_full(&z_star, x);
    let mut grad = oracle.full_mean(SampledOp::GradFOut, &z_star, x, &[])?;
    let cross = oracle.full_mean(SampledOp::CrossG, &z_star, x, &v_star)?;
    linalg::axpy(1.0, &cross, &mut grad);
    Ok(ValueAndGrad {
        value,
        grad,
        z_star,
        v_star,
    })
}

/// `h(x) − h*`. Fails when no reference optimum is known.
pub fn suboptimality<O: BilevelOracle>(
    oracle: &O,
    x: &[f64],
    h_star: Option<f64>,
    cfg: &ExactSolveConfig,
) -> Result<f64> {
    let h_star = h_star.ok_or_else(|| Error::UnsupportedMetric("no reference optimum registered".into()))?;
    let z_star = solve_inner(oracle, x, cfg, None)?;
    Ok(oracle.f_full(&z_star, x) - h_star)
}

/// `(‖z − z*(x)‖², ‖v − v*(x)‖²)`.
pub fn delta_diagnostics<O: BilevelOracle>(
    oracle: &O,
    state: &JointState,
    cfg: &ExactSolveConfig,
) -> Result<(f64, f64)> {
    state.validate(oracle.dims())?;
    let z_star = solve_inner(oracle, &state.x, cfg, None)?;
    let v_star = solve_adjoint(oracle, &z_star, &state.x, cfg)?;
    Ok((linalg::dist_sq(&state.z, &z_star), linalg::dist_sq(&state.v, &v_star)))
}

/// Misclassification rate of the inner variable on the problem's test set.
pub fn test_error<P: BilevelProblem + ?Sized>(problem: &P, z: &[f64]) -> Result<f64> {
    check_len("z", z, problem.dims().p)?;
    problem
        .test_error(z)
        .ok_or_else(|| Error::UnsupportedMetric(format!("{} has no test set", problem.name())))
}

/// Metrics logged at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub value: f64,
    pub grad_norm_sq: f64,
    pub suboptimality: Option<f64>,
    pub delta_z: f64,
    pub delta_v: f64,
    pub test_error: Option<f64>,
}

/// Something that turns a joint state into logged metrics.
pub trait Monitor {
    fn observe(&self, state: &JointState) -> Result<Observation>;
}

/// Exact evaluator over a problem, with an optional reference optimum.
pub struct Evaluator<'a, P: ?Sized> {
    problem: &'a P,
    cfg: ExactSolveConfig,
    h_star: Option<f64>,
}

impl<'a, P: BilevelProblem + ?Sized> Evaluator<'a, P> {
    /// Uses the closed-form optimum when the problem has one.
    pub fn new(problem: &'a P, cfg: ExactSolveConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            problem,
            cfg,
            h_star: problem.closed_form_optimum(),
        })
    }

    pub fn with_optimum(mut self, h_star: f64) -> Self {
        self.h_star = Some(h_star);
        self
    }

    pub fn h_star(&self) -> Option<f64> {
        self.h_star
    }

    pub fn config(&self) -> &ExactSolveConfig {
        &self.cfg
    }
}

impl<P: BilevelProblem> Monitor for Evaluator<'_, P> {
    fn observe(&self, state: &JointState) -> Result<Observation> {
        state.validate(self.problem.dims())?;
        let vg = value_and_grad(self.problem, &state.x, &self.cfg)?;
        Ok(Observation {
            value: vg.value,
            grad_norm_sq: linalg::norm_sq(&vg.grad),
            suboptimality: self.h_star.map(|h| vg.value - h),
            delta_z: linalg::dist_sq(&state.z, &vg.z_star),
            delta_v: linalg::dist_sq(&state.v, &vg.v_star),
            test_error: self.problem.test_error(&vg.z_star),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ProblemDims;
    use crate::problems::{make_quadratic, make_toy_ridge, QuadraticBilevel, QuadraticOuter};
    use crate::linalg::DenseMatrix;

    fn quad() -> QuadraticBilevel {
        make_quadratic(3, ProblemDims::new(5, 4, 5, 3).unwrap(), 0.3).unwrap()
    }

    #[test]
    fn inner_solve_matches_closed_form() {
        let q = quad();
        let cfg = ExactSolveConfig::default();
        let x = [0.3, -1.0, 2.0];
        let z = solve_inner(&q, &x, &cfg, None).unwrap();
        let bound = 10.0 * cfg.inner_tol / q.strong_convexity(&x).unwrap();
        assert!(linalg::max_abs_diff(&z, &q.inner_solution(&x)) <= bound);
    }

    #[test]
    fn identity_hessian_cases() {
        // G = ½‖z − c‖², F = ½‖z‖² + ½‖x‖²
        let c = vec![1.0, -2.0];
        let q = QuadraticBilevel::new(
            vec![DenseMatrix::identity(2)],
            vec![DenseMatrix::zeros(1, 2)],
            vec![c.iter().map(|v| -v).collect()],
            vec![QuadraticOuter {
                zz: DenseMatrix::identity(2),
                zx: DenseMatrix::zeros(2, 1),
                xx: DenseMatrix::identity(1),
                lin_z: vec![0.0; 2],
                lin_x: vec![0.0],
            }],
        )
        .unwrap();
        let cfg = ExactSolveConfig::default();
        let z = solve_inner(&q, &[0.7], &cfg, None).unwrap();
        assert!(linalg::max_abs_diff(&z, &c) < 1e-12);
        let v = solve_adjoint(&q, &z, &[0.7], &cfg).unwrap();
        assert!(linalg::max_abs_diff(&v, &[-1.0, 2.0]) < 1e-12);
        let v0 = solve_adjoint(&q, &[0.0, 0.0], &[0.7], &cfg).unwrap();
        assert_eq!(v0, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_matches_closed_form_hypergradient() {
        let q = quad();
        let cfg = ExactSolveConfig::default();
        let x = [1.0, 0.5, -0.25];
        let vg = value_and_grad(&q, &x, &cfg).unwrap();
        assert!(linalg::max_abs_diff(&vg.grad, &q.hypergradient(&x)) <= 1e-8);
        assert!((vg.value - q.value(&x)).abs() <= 1e-10);
    }

    #[test]
    fn decoupled_gradient_is_identity() {
        let q = QuadraticBilevel::decoupled(3, 2, 4, 3).unwrap();
        let x = [0.1, -3.0, 2.5];
        let vg = value_and_grad(&q, &x, &ExactSolveConfig::default()).unwrap();
        assert!(linalg::max_abs_diff(&vg.grad, &x) < 1e-12);
    }

    #[test]
    fn ridge_inner_solves_normal_equations() {
        let r = make_toy_ridge(1);
        let x = [0.5];
        let z = solve_inner(&r, &x, &ExactSolveConfig::default(), None).unwrap();
        let a = r.train_inputs();
        let n = a.rows() as f64;
        let mut gram = DenseMatrix::from_fn(a.cols(), a.cols(), |i, j| {
            (0..a.rows()).map(|k| a[(k, i)] * a[(k, j)]).sum::<f64>() / n
        });
        for k in 0..a.cols() {
            gram[(k, k)] += x[0];
        }
        let rhs: Vec<f64> = a.matvec_t(r.train_targets()).iter().map(|v| v / n).collect();
        let direct = gram.cholesky().unwrap().solve(&rhs);
        assert!(linalg::max_abs_diff(&z, &direct) < 1e-9);
    }

    #[test]
    fn deltas_vanish_at_the_solution() {
        let q = quad();
        let x = vec![0.2, 0.2, -0.4];
        let cfg = ExactSolveConfig::default();
        let z = q.inner_solution(&x);
        let v = q.adjoint_solution(&x);
        let dims = q.dims();
        let (dz, dv) = delta_diagnostics(&q, &JointState::new(z.clone(), v, x.clone(), dims).unwrap(), &cfg).unwrap();
        assert!(dz < 1e-18 && dv < 1e-18);
        let (dz2, _) = delta_diagnostics(&q, &JointState::new(z, vec![5.0; 5], x, dims).unwrap(), &cfg).unwrap();
        assert_eq!(dz, dz2);
    }

    #[test]
    fn suboptimality_needs_an_optimum() {
        let r = make_toy_ridge(0);
        let err = suboptimality(&r, &[1.0], None, &ExactSolveConfig::default());
        assert!(matches!(err, Err(Error::UnsupportedMetric(_))));
        assert!(matches!(test_error(&r, &vec![0.0; 10]), Err(Error::UnsupportedMetric(_))));
        let q = quad();
        let (x_star, h_star) = q.optimum().unwrap();
        let gap = suboptimality(&q, &x_star, Some(h_star), &ExactSolveConfig::default()).unwrap();
        assert!(gap.abs() <= 1e-10);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let q = quad();
        let ev = Evaluator::new(&q, ExactSolveConfig::default()).unwrap();
        let s = JointState::zeros(q.dims());
        assert_eq!(ev.observe(&s).unwrap(), ev.observe(&s).unwrap());
        assert!(ev.h_star().is_some());
    }

    #[test]
    fn bad_tolerances_are_rejected() {
        let cfg = ExactSolveConfig {
            inner_tol: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
