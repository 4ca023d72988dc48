//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test -p bilevel --test acceptance -- --nocapture`.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use bilevel::directions::{
    full_directions, saba_directions, saba_init, soba_directions, DirectionTriple, IndexDraw, SabaMemory,
};
use bilevel::linalg::{self, DenseMatrix};
use bilevel::metrics::{value_and_grad, Evaluator, ExactSolveConfig, Monitor, Observation};
use bilevel::oracle::{BatchSpec, BilevelOracle, BilevelProblem, CountingOracle, JointState, ProblemDims};
use bilevel::problems::{
    make_quadratic, make_synthetic_hyperclean, make_synthetic_logreg, make_toy_ridge, QuadraticBilevel, QuadraticOuter,
};
use bilevel::rng::{self, Stream};
use bilevel::solvers::{
    grid_search, hia, log_grid, run, shia, GridObjective, GridSpec, Method, RunRecord, SolverConfig, StepSchedule,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

/// Criteria run one at a time so each measured runtime is its own.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let ok = pass && elapsed <= limit;
    println!(
        "criterion {id:>2}: {} {name} ({detail}; {:.2}s of {:.0}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(elapsed <= limit, "criterion {id} over its time limit");
}

fn gaussian(rng: &mut rng::Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng::normal(rng)).collect()
}

fn random_state(dims: ProblemDims, seed: u64) -> JointState {
    let mut r = rng::stream(seed, Stream::Evaluation);
    JointState {
        z: gaussian(&mut r, dims.p),
        v: gaussian(&mut r, dims.p),
        x: gaussian(&mut r, dims.d),
    }
}

fn testbed() -> QuadraticBilevel {
    make_quadratic(0, ProblemDims::new(64, 64, 10, 10).unwrap(), 1.0).unwrap()
}

fn exact() -> ExactSolveConfig {
    ExactSolveConfig::default()
}

fn mean_triple(dirs: &[DirectionTriple]) -> DirectionTriple {
    let mut out = DirectionTriple {
        dz: vec![0.0; dirs[0].dz.len()],
        dv: vec![0.0; dirs[0].dv.len()],
        dx: vec![0.0; dirs[0].dx.len()],
    };
    let w = 1.0 / dirs.len() as f64;
    for d in dirs {
        linalg::axpy(w, &d.dz, &mut out.dz);
        linalg::axpy(w, &d.dv, &mut out.dv);
        linalg::axpy(w, &d.dx, &mut out.dx);
    }
    out
}

#[test]
fn criterion_01_unbiasedness_by_enumeration() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let q = make_quadratic(1, ProblemDims::new(6, 6, 4, 3).unwrap(), 0.5).unwrap();
    let state = random_state(q.dims(), 1);
    let full = full_directions(&state, &q).unwrap();
    let pairs: Vec<IndexDraw> = (0..6).flat_map(|i| (0..6).map(move |j| IndexDraw { i, j })).collect();

    let soba: Vec<_> = pairs
        .iter()
        .map(|&d| soba_directions(&state, d, &q, BatchSpec::single()).unwrap())
        .collect();
    let soba_err = mean_triple(&soba).max_abs_diff(&full);

    // memory taken at another state and held fixed across the draws
    let memory = saba_init(&random_state(q.dims(), 2), &q, BatchSpec::single()).unwrap();
    let saba: Vec<_> = pairs
        .iter()
        .map(|&d| saba_directions(&state, d, &mut memory.clone(), &q).unwrap())
        .collect();
    let saba_err = mean_triple(&saba).max_abs_diff(&full);

    report(
        1,
        "unbiasedness by enumeration",
        soba_err <= 1e-12 && saba_err <= 1e-12,
        start.elapsed(),
        Duration::from_secs(1),
        format!("soba err {soba_err:.1e}, saba err {saba_err:.1e}"),
    );
}

/// Relative error of `value_and_grad` against coordinate-wise central
/// differences of `h` with step `1e-6`.
fn fd_rel_error<P: BilevelProblem>(problem: &P, x: &[f64], cfg: &ExactSolveConfig) -> f64 {
    let grad = value_and_grad(problem, x, cfg).unwrap().grad;
    let h = |x: &[f64]| value_and_grad(problem, x, cfg).unwrap().value;
    let step = 1e-6;
    let mut diff = 0.0;
    for k in 0..x.len() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[k] += step;
        minus[k] -= step;
        let fd = (h(&plus) - h(&minus)) / (2.0 * step);
        diff += (fd - grad[k]).powi(2);
    }
    diff.sqrt() / linalg::norm(&grad)
}

#[test]
fn criterion_02_hypergradient_matches_finite_differences() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let cfg = ExactSolveConfig {
        inner_tol: 1e-12,
        linear_tol: 1e-12,
        max_iters: 500,
    };
    let mut r = rng::stream(2, Stream::Evaluation);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let q = make_quadratic(2, ProblemDims::new(20, 20, 6, 4).unwrap(), 0.5).unwrap();
    let e = (0..10).map(|_| fd_rel_error(&q, &gaussian(&mut r, 4), &cfg)).fold(0.0, f64::max);
    worst.push(("quadratic", e));

    let ridge = make_toy_ridge(2);
    let e = (0..10)
        .map(|_| fd_rel_error(&ridge, &[r.random_range(0.01..2.0)], &cfg))
        .fold(0.0, f64::max);
    worst.push(("ridge", e));

    let logreg = make_synthetic_logreg(2, 200, 100, 8, 0.5).unwrap();
    let e = (0..10)
        .map(|_| {
            let x: Vec<f64> = gaussian(&mut r, 8).iter().map(|v| v - 2.0).collect();
            fd_rel_error(&logreg, &x, &cfg)
        })
        .fold(0.0, f64::max);
    worst.push(("logistic", e));

    let clean = make_synthetic_hyperclean(2, 60, 30, 30, 5, 3, 1.0, 0.5, 0.2).unwrap();
    let e = (0..10)
        .map(|_| fd_rel_error(&clean, &gaussian(&mut r, 60), &cfg))
        .fold(0.0, f64::max);
    worst.push(("hyper-cleaning", e));

    let pass = worst.iter().all(|&(_, e)| e < 1e-5);
    let detail = worst
        .iter()
        .map(|(name, e)| format!("{name} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(2, "hypergradient vs finite differences", pass, start.elapsed(), Duration::from_secs(30), detail);
}

#[test]
fn criterion_03_fixed_point_is_stationary() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let q = testbed();
    let dims = q.dims();
    let size = 2 * dims.p + dims.d;
    // the joint directions are affine in (z, v, x): recover the map column by
    // column and solve D = 0 with a dense LU factorization
    let pack = |d: &DirectionTriple| -> DVector<f64> {
        DVector::from_iterator(size, d.dz.iter().chain(&d.dv).chain(&d.dx).copied())
    };
    let unpack = |w: &[f64]| JointState {
        z: w[..dims.p].to_vec(),
        v: w[dims.p..2 * dims.p].to_vec(),
        x: w[2 * dims.p..].to_vec(),
    };
    let offset = pack(&full_directions(&JointState::zeros(dims), &q).unwrap());
    let mut jac = DMatrix::zeros(size, size);
    for k in 0..size {
        let mut unit = vec![0.0; size];
        unit[k] = 1.0;
        let col = pack(&full_directions(&unpack(&unit), &q).unwrap()) - &offset;
        jac.set_column(k, &col);
    }
    let root = jac.lu().solve(&(-offset)).expect("non-singular joint system");
    let state = unpack(root.as_slice());
    let residual = linalg::norm(&pack(&full_directions(&state, &q).unwrap()).as_slice().to_vec());
    let grad = value_and_grad(&q, &state.x, &exact()).unwrap().grad;
    let gnorm = linalg::norm(&grad);
    report(
        3,
        "zero of the joint directions is stationary",
        gnorm <= 1e-7,
        start.elapsed(),
        Duration::from_secs(5),
        format!("‖D‖ {residual:.1e}, ‖∇h‖ {gnorm:.1e}"),
    );
}

/// Records nothing; used where only iterates matter.
struct NoMetrics;

impl Monitor for NoMetrics {
    fn observe(&self, _state: &JointState) -> bilevel::Result<Observation> {
        Ok(Observation {
            value: 0.0,
            grad_norm_sq: 0.0,
            suboptimality: None,
            delta_z: 0.0,
            delta_v: 0.0,
            test_error: None,
        })
    }
}

/// Plain SAGA on `z ↦ G(z, x0)`, written against the per-sample gradient only.
fn saga_reference<O: BilevelOracle>(oracle: &O, z0: &[f64], x0: &[f64], step: f64, steps: usize, seed: u64) -> Vec<Vec<f64>> {
    let dims = oracle.dims();
    let (n, p) = (dims.n, dims.p);
    let grad = |i: usize, z: &[f64]| {
        let mut g = vec![0.0; p];
        oracle.add_grad_g_in(i, z, x0, 1.0, &mut g);
        g
    };
    let mut table: Vec<Vec<f64>> = (0..n).map(|i| grad(i, z0)).collect();
    let mut avg = vec![0.0; p];
    for row in &table {
        for c in 0..p {
            avg[c] += (1.0 / n as f64) * row[c];
        }
    }
    let mut rng = rng::stream(seed, Stream::Indices);
    let mut z = z0.to_vec();
    let mut iterates = Vec::with_capacity(steps);
    for _ in 0..steps {
        let i = rng.random_range(0..n);
        let _outer: usize = rng.random_range(0..dims.m);
        let fresh = grad(i, &z);
        let mut dir = vec![0.0; p];
        for c in 0..p {
            let delta = fresh[c] - table[i][c];
            dir[c] = delta + avg[c];
            avg[c] += delta / n as f64;
        }
        table[i] = fresh;
        for c in 0..p {
            z[c] += -step * dir[c];
        }
        iterates.push(z.clone());
    }
    iterates
}

#[test]
fn criterion_04_saga_reduction() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let q = make_quadratic(4, ProblemDims::new(12, 9, 5, 3).unwrap(), 0.5).unwrap();
    let init = random_state(q.dims(), 4);
    let steps = 500;
    let rho = 0.05;
    let reference = saga_reference(&q, &init.z, &init.x, rho, steps, 11);

    let mut cfg = SolverConfig::new(Method::Saba, rho, 0.0, 0);
    cfg.seed = 11;
    cfg.recompute_every = Some(0);
    cfg.eval_every = steps;
    let mut mismatches = 0;
    for t in 1..=steps {
        cfg.total_iters = t;
        let rec = run(&q, &cfg, &NoMetrics, &init).unwrap();
        let same = rec.final_state.z.iter().zip(&reference[t - 1]).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || rec.final_state.x != init.x {
            mismatches += 1;
        }
    }
    report(
        4,
        "SABA with frozen x is SAGA",
        mismatches == 0,
        start.elapsed(),
        Duration::from_secs(5),
        format!("{mismatches} of {steps} iterates differ bitwise"),
    );
}

fn linear_fit_r2(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, sxy * sxy / (sxx * syy))
}

#[test]
fn criterion_05_linear_convergence_of_saba() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let q = testbed();
    let ev = Evaluator::new(&q, exact()).unwrap();
    let init = JointState::zeros(q.dims());

    let mut base = SolverConfig::new(Method::Saba, 0.1, 0.1, 2000);
    base.eval_every = 2000;
    let spec = GridSpec {
        alphas: log_grid(2f64.powi(-5), 8.0, 9),
        ratios: log_grid(1e-2, 10.0, 7),
        runs_per_cell: 1,
    };
    let grid = grid_search(&q, &base, &ev, &init, &spec, GridObjective::Suboptimality).unwrap();
    let best = grid.best_cell().clone();

    let mut cfg = base.clone();
    cfg.schedule = StepSchedule::constant(best.alpha, best.beta);
    cfg.total_iters = 200_000;
    cfg.eval_every = 100;
    let rec = run(&q, &cfg, &ev, &init).unwrap();
    let reached = rec
        .rows
        .iter()
        .find(|r| r.suboptimality.unwrap() < 1e-8)
        .map(|r| r.t);
    // converging segment: until the gap reaches the floating-point floor
    let segment: Vec<_> = rec
        .rows
        .iter()
        .take_while(|r| r.suboptimality.unwrap() > 1e-12)
        .collect();
    let ts: Vec<f64> = segment.iter().map(|r| r.t as f64).collect();
    let logs: Vec<f64> = segment.iter().map(|r| r.suboptimality.unwrap().log10()).collect();
    let (slope, r2) = linear_fit_r2(&ts, &logs);
    report(
        5,
        "linear convergence of SABA",
        reached.is_some() && r2 > 0.95 && slope < 0.0,
        start.elapsed(),
        Duration::from_secs(120),
        format!(
            "alpha {:.3}, beta {:.3}, gap < 1e-8 at t = {reached:?}, R² {r2:.4}, slope {slope:.2e} over {} points",
            best.alpha,
            best.beta,
            ts.len()
        ),
    );
}

fn tuned_run<O: BilevelProblem>(
    problem: &O,
    base: &SolverConfig,
    spec: &GridSpec,
    objective: GridObjective,
    init: &JointState,
    ev: &Evaluator<'_, O>,
) -> (RunRecord, f64, f64) {
    let grid = grid_search(problem, base, ev, init, spec, objective).unwrap();
    let best = grid.best_cell();
    let mut cfg = base.clone();
    cfg.schedule.alpha = best.alpha;
    cfg.schedule.beta = best.beta;
    (run(problem, &cfg, ev, init).unwrap(), best.alpha, best.beta)
}

#[test]
fn criterion_06_rate_separation() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let q = testbed();
    let ev = Evaluator::new(&q, exact()).unwrap();
    let init = JointState::zeros(q.dims());
    let spec = GridSpec {
        alphas: log_grid(2f64.powi(-5), 8.0, 9),
        ratios: log_grid(1e-2, 10.0, 7),
        runs_per_cell: 1,
    };
    let mut finals = Vec::new();
    for method in [Method::Saba, Method::Soba] {
        let mut base = SolverConfig::new(method, 1.0, 1.0, usize::MAX);
        base.oracle_budget = Some(100_000);
        base.eval_every = 40;
        // steps picked on a coarse metric cadence, compared on every iterate
        let (_, alpha, beta) = tuned_run(&q, &base, &spec, GridObjective::AvgGradNormSq, &init, &ev);
        let mut cfg = base.clone();
        cfg.schedule.alpha = alpha;
        cfg.schedule.beta = beta;
        cfg.eval_every = 1;
        let rec = run(&q, &cfg, &ev, &init).unwrap();
        let last = *rec.last().unwrap();
        assert!(last.oracle_calls() <= 100_000);
        finals.push((method, last.grad_norm_sq_avg, alpha, beta, last.oracle_calls()));
    }
    let ratio = finals[1].1 / finals[0].1;
    report(
        6,
        "SABA vs SOBA at a matched budget",
        ratio >= 10.0,
        start.elapsed(),
        Duration::from_secs(120),
        format!(
            "avg ‖∇h‖²: saba {:.2e} (α {:.3}, β {:.3}, {} calls), soba {:.2e} (α {:.3}, β {:.3}, {} calls), ratio {ratio:.1}",
            finals[0].1, finals[0].2, finals[0].3, finals[0].4, finals[1].1, finals[1].2, finals[1].3, finals[1].4
        ),
    );
}

/// Empirical variance written as a mean of pairwise squared distances, so
/// identical samples give exactly zero.
fn variance(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len() as f64;
    let mut total = 0.0;
    for a in samples {
        for b in samples {
            total += linalg::dist_sq(a, b);
        }
    }
    total / (2.0 * n * n)
}

#[test]
fn criterion_07_variance_collapse() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let q = make_quadratic(7, ProblemDims::new(8, 8, 5, 4).unwrap(), 0.5).unwrap();
    let x = {
        let mut r = rng::stream(7, Stream::Evaluation);
        gaussian(&mut r, 4)
    };
    let vg = value_and_grad(&q, &x, &exact()).unwrap();
    let state = JointState {
        z: vg.z_star,
        v: vg.v_star,
        x,
    };
    let memory = saba_init(&state, &q, BatchSpec::single()).unwrap();
    let mut saba_dx = Vec::new();
    let mut soba_dx = Vec::new();
    for i in 0..8 {
        for j in 0..8 {
            let draw = IndexDraw { i, j };
            saba_dx.push(saba_directions(&state, draw, &mut memory.clone(), &q).unwrap().dx);
            soba_dx.push(soba_directions(&state, draw, &q, BatchSpec::single()).unwrap().dx);
        }
    }
    let (saba_var, soba_var) = (variance(&saba_dx), variance(&soba_dx));
    report(
        7,
        "variance collapse with current memory",
        saba_var == 0.0 && soba_var > 0.0,
        start.elapsed(),
        Duration::from_secs(1),
        format!("saba var {saba_var:e}, soba var {soba_var:.3e}"),
    );
}

/// Single-sample quadratic whose inner Hessian is the given SPD matrix.
fn fixed_hessian_problem(h: &DenseMatrix) -> QuadraticBilevel {
    let p = h.rows();
    QuadraticBilevel::new(
        vec![h.clone()],
        vec![DenseMatrix::zeros(1, p)],
        vec![vec![0.0; p]],
        vec![QuadraticOuter {
            zz: DenseMatrix::identity(p),
            zx: DenseMatrix::zeros(p, 1),
            xx: DenseMatrix::identity(1),
            lin_z: vec![0.0; p],
            lin_x: vec![0.0],
        }],
    )
    .unwrap()
}

#[test]
fn criterion_08_neumann_baselines() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let eigenvalues = [1.0, 2.0, 3.0, 5.0, 9.0];
    let mut r = rng::stream(8, Stream::Evaluation);
    let basis = DMatrix::from_fn(5, 5, |_, _| rng::normal(&mut r)).qr().q();
    let dense = &basis * DMatrix::from_diagonal(&DVector::from_row_slice(&eigenvalues)) * basis.transpose();
    let dense = (&dense + dense.transpose()) * 0.5;
    let h = DenseMatrix::from_fn(5, 5, |i, j| dense[(i, j)]);
    let g = vec![1.0, -0.5, 2.0, 0.25, -1.0];
    let direct = dense.clone().lu().solve(&DVector::from_row_slice(&g)).unwrap();
    let direct = direct.as_slice();
    let rel = |est: &[f64]| linalg::dist_sq(est, direct).sqrt() / linalg::norm(direct);

    let problem = fixed_hessian_problem(&h);
    let full = BatchSpec::full(problem.dims());
    let (z, x) = (vec![0.0; 5], vec![0.0]);
    let lambda_max = 9.0;
    let shia_err = rel(&shia(&problem, &z, &x, &g, 200, 1.0 / lambda_max, full, 0).unwrap());

    let draws = 10_000;
    let mut mean = vec![0.0; 5];
    for seed in 0..draws {
        let est = hia(&problem, &z, &x, &g, 50, 0.9 / lambda_max, full, seed).unwrap();
        linalg::axpy(1.0 / draws as f64, &est, &mut mean);
    }
    let hia_err = rel(&mean);
    report(
        8,
        "Neumann approximations",
        shia_err < 1e-6 && hia_err < 0.05,
        start.elapsed(),
        Duration::from_secs(30),
        format!("shia rel err {shia_err:.1e}, hia mean rel err {hia_err:.3}"),
    );
}

#[test]
fn criterion_09_rolling_mean_drift() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let q = testbed();
    let dims = q.dims();
    let mut state = random_state(dims, 9);
    let mut memory: SabaMemory = saba_init(&state, &q, BatchSpec::single()).unwrap();
    let mut rng = rng::stream(9, Stream::Indices);
    let (rho, gamma) = (0.03, 0.01);
    for _ in 0..100_000 {
        let draw = IndexDraw {
            i: rng.random_range(0..dims.n),
            j: rng.random_range(0..dims.m),
        };
        let d = saba_directions(&state, draw, &mut memory, &q).unwrap();
        linalg::axpy(-rho, &d.dz, &mut state.z);
        linalg::axpy(-rho, &d.dv, &mut state.v);
        linalg::axpy(-gamma, &d.dx, &mut state.x);
    }
    let drift = memory.recompute_averages(false);
    report(
        9,
        "rolling-mean drift",
        drift.max() < 1e-9 && state.is_finite(),
        start.elapsed(),
        Duration::from_secs(60),
        format!("max drift {:.1e} over tables {:?}", drift.max(), drift.per_table),
    );
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

#[test]
fn criterion_10_hyper_cleaning_behaviour() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let problem = make_synthetic_hyperclean(10, 2000, 500, 1000, 32, 10, 0.5, 0.5, 0.2).unwrap();
    let ev = Evaluator::new(&problem, exact()).unwrap();
    let init = JointState::zeros(problem.dims());
    let budget = 1_000_000;
    let spec = GridSpec {
        alphas: log_grid(1e-2, 10.0, 4),
        ratios: log_grid(1e-5, 1e-2, 4),
        runs_per_cell: 1,
    };
    let mut summary = Vec::new();
    let mut splits = Vec::new();
    for method in [Method::Saba, Method::Soba] {
        let mut base = SolverConfig::new(method, 1.0, 1.0, usize::MAX);
        base.batch = BatchSpec::new(64, 64, problem.dims()).unwrap();
        base.oracle_budget = Some(budget);
        base.eval_every = usize::MAX;
        let grid = grid_search(&problem, &base, &ev, &init, &spec, GridObjective::Value).unwrap();
        let best = grid.best_cell().clone();
        let mut errors = Vec::new();
        for seed in 0..10 {
            let mut cfg = base.clone();
            cfg.schedule.alpha = best.alpha;
            cfg.schedule.beta = best.beta;
            cfg.seed = 100 + seed;
            let rec = run(&problem, &cfg, &ev, &init).unwrap();
            errors.push(rec.last().unwrap().test_error.unwrap());
            if method == Method::Saba {
                splits.push(problem.weight_split(&rec.final_state.x));
            }
        }
        summary.push((method, median(errors), best.alpha, best.beta));
    }
    let corrupted = median(splits.iter().map(|s| s.0).collect());
    let clean = median(splits.iter().map(|s| s.1).collect());
    let saba_lower = splits.iter().all(|&(c, k)| c < k);
    report(
        10,
        "hyper-cleaning down-weights corrupted samples",
        saba_lower && summary[0].1 <= summary[1].1,
        start.elapsed(),
        Duration::from_secs(600),
        format!(
            "median σ(λ): corrupted {corrupted:.3} vs clean {clean:.3}; median test error saba {:.3} (α {:.2}, β {:.0}) vs soba {:.3} (α {:.2}, β {:.0})",
            summary[0].1, summary[0].2, summary[0].3, summary[1].1, summary[1].2, summary[1].3
        ),
    );
}

#[test]
fn criterion_11_determinism_and_accounting() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let q = make_quadratic(11, ProblemDims::new(20, 15, 6, 4).unwrap(), 0.5).unwrap();
    let ev = Evaluator::new(&q, exact()).unwrap();
    let init = JointState::zeros(q.dims());
    let mut failures = Vec::new();
    for method in Method::ALL {
        let mut cfg = SolverConfig::new(method, 0.05, 0.01, 60);
        cfg.batch = BatchSpec::new(3, 4, q.dims()).unwrap();
        cfg.seed = 5;
        cfg.eval_every = 7;
        let counting = CountingOracle::new(&q);
        let a = run(&counting, &cfg, &ev, &init).unwrap();
        let b = run(&q, &cfg, &ev, &init).unwrap();
        let metrics = |r: &RunRecord| {
            r.rows
                .iter()
                .map(|w| {
                    (
                        w.t,
                        w.value.to_bits(),
                        w.grad_norm_sq.to_bits(),
                        w.suboptimality.map(f64::to_bits),
                        w.delta_z.to_bits(),
                        w.delta_v.to_bits(),
                        w.grad_calls,
                        w.hvp_calls,
                    )
                })
                .collect::<Vec<_>>()
        };
        if metrics(&a) != metrics(&b) {
            failures.push(format!("{method}: metrics differ"));
        }
        if a.counts != counting.counts() {
            failures.push(format!("{method}: reported {:?}, counted {:?}", a.counts, counting.counts()));
        }
    }
    report(
        11,
        "determinism and oracle accounting",
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(60),
        if failures.is_empty() {
            "5 methods bitwise reproducible, counts exact".to_string()
        } else {
            failures.join("; ")
        },
    );
}
