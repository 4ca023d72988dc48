//! Quadratic bilevel testbed with every ground-truth quantity in closed form.
//!
//! `G_i(z, x) = ½ zᵀA_i z + xᵀB_i z + c_iᵀz` and
//! `F_j(z, x) = ½ zᵀP_j z + zᵀR_j x + ½ xᵀS_j x + a_jᵀz + b_jᵀx`,
//! so `z*(x)` is affine in `x` and `h` is a convex quadratic.

use sha2::{Digest, Sha256};

use crate::error::{check_len, invalid, Result};
use crate::linalg::{self, Cholesky, DenseMatrix};
use crate::oracle::{BilevelOracle, BilevelProblem, GTerms, ProblemDims};
use crate::rng::{self, Stream};

/// One outer sample: the `(z, x)` Hessian blocks and linear terms.
#[derive(Debug, Clone)]
pub struct QuadraticOuter {
    pub zz: DenseMatrix,
    pub zx: DenseMatrix,
    pub xx: DenseMatrix,
    pub lin_z: Vec<f64>,
    pub lin_x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    dims: ProblemDims,
    a: Vec<DenseMatrix>,
    b: Vec<DenseMatrix>,
    c: Vec<Vec<f64>>,
    outer: Vec<QuadraticOuter>,
    mean_a: DenseMatrix,
    mean_b: DenseMatrix,
    mean_c: Vec<f64>,
    mean_outer: QuadraticOuter,
    chol_a: Cholesky,
    mu: f64,
}

fn gaussian_matrix(rng: &mut rng::Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| std * crate::rng::normal(rng))
}

fn gaussian_vec(rng: &mut rng::Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * crate::rng::normal(rng)).collect()
}

fn mean_of(mats: &[DenseMatrix]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(mats[0].rows(), mats[0].cols());
    let w = 1.0 / mats.len() as f64;
    for m in mats {
        out.add_scaled(w, m);
    }
    out
}

fn mean_vec(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    let w = 1.0 / vs.len() as f64;
    for v in vs {
        linalg::axpy(w, v, &mut out);
    }
    out
}

fn is_symmetric(m: &DenseMatrix) -> bool {
    let n = m.rows();
    m.cols() == n
        && (0..n).all(|r| (0..r).all(|c| (m[(r, c)] - m[(c, r)]).abs() <= 1e-12 * (1.0 + m[(r, c)].abs())))
}

/// Random instance: `A_i = M_iM_iᵀ + μI` and `P_j`-blocks from `N_jN_jᵀ + μI`
/// with Gaussian `M_i, N_j` (entries of variance `1/p` and `1/(p+d)`), so
/// every `G_i` is `μ`-strongly convex and `h` is strongly convex.
pub fn make_quadratic(seed: u64, dims: ProblemDims, mu: f64) -> Result<QuadraticBilevel> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(invalid(format!("strong convexity target must be positive, got {mu}")));
    }
    let ProblemDims { n, m, p, d } = dims;
    let mut rng = rng::stream(seed, Stream::Problem);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let std_p = 1.0 / (p as f64).sqrt();
    for _ in 0..n {
        let mi = gaussian_matrix(&mut rng, p, p, std_p);
        let mut ai = mi.matmul(&mi.transpose());
        ai.add_scaled(mu, &DenseMatrix::identity(p));
        a.push(ai);
        b.push(gaussian_matrix(&mut rng, d, p, std_p));
        c.push(gaussian_vec(&mut rng, p, 1.0));
    }
    let k = p + d;
    let std_k = 1.0 / (k as f64).sqrt();
    let mut outer = Vec::with_capacity(m);
    for _ in 0..m {
        let nj = gaussian_matrix(&mut rng, k, k, std_k);
        let mut h = nj.matmul(&nj.transpose());
        h.add_scaled(mu, &DenseMatrix::identity(k));
        outer.push(QuadraticOuter {
            zz: DenseMatrix::from_fn(p, p, |r, c| h[(r, c)]),
            zx: DenseMatrix::from_fn(p, d, |r, c| h[(r, p + c)]),
            xx: DenseMatrix::from_fn(d, d, |r, c| h[(p + r, p + c)]),
            lin_z: gaussian_vec(&mut rng, p, 1.0),
            lin_x: gaussian_vec(&mut rng, d, 1.0),
        });
    }
    let mut problem = QuadraticBilevel::new(a, b, c, outer)?;
    problem.mu = problem.mu.max(mu);
    Ok(problem)
}

impl QuadraticBilevel {
    /// Validates shapes and requires the mean inner Hessian to be positive definite.
    pub fn new(
        a: Vec<DenseMatrix>,
        b: Vec<DenseMatrix>,
        c: Vec<Vec<f64>>,
        outer: Vec<QuadraticOuter>,
    ) -> Result<Self> {
        let n = a.len();
        let m = outer.len();
        if n == 0 || b.len() != n || c.len() != n || m == 0 {
            return Err(invalid("quadratic problem needs n ≥ 1 matching A, B, c and m ≥ 1 outer terms"));
        }
        let p = a[0].rows();
        let d = b[0].rows();
        let dims = ProblemDims::new(n, m, p, d)?;
        for i in 0..n {
            if !is_symmetric(&a[i]) || a[i].rows() != p {
                return Err(invalid(format!("A_{i} must be symmetric {p}×{p}")));
            }
            if (b[i].rows(), b[i].cols()) != (d, p) {
                return Err(invalid(format!("B_{i} must be {d}×{p}")));
            }
            check_len("c_i", &c[i], p)?;
        }
        for (j, o) in outer.iter().enumerate() {
            if !is_symmetric(&o.zz) || o.zz.rows() != p || !is_symmetric(&o.xx) || o.xx.rows() != d {
                return Err(invalid(format!("outer term {j}: diagonal blocks must be symmetric")));
            }
            if (o.zx.rows(), o.zx.cols()) != (p, d) {
                return Err(invalid(format!("outer term {j}: cross block must be {p}×{d}")));
            }
            check_len("a_j", &o.lin_z, p)?;
            check_len("b_j", &o.lin_x, d)?;
        }
        let mean_a = mean_of(&a);
        let chol_a = mean_a
            .cholesky()
            .ok_or_else(|| invalid("mean inner Hessian is not positive definite"))?;
        let zz: Vec<DenseMatrix> = outer.iter().map(|o| o.zz.clone()).collect();
        let zx: Vec<DenseMatrix> = outer.iter().map(|o| o.zx.clone()).collect();
        let xx: Vec<DenseMatrix> = outer.iter().map(|o| o.xx.clone()).collect();
        let lz: Vec<Vec<f64>> = outer.iter().map(|o| o.lin_z.clone()).collect();
        let lx: Vec<Vec<f64>> = outer.iter().map(|o| o.lin_x.clone()).collect();
        let mean_outer = QuadraticOuter {
            zz: mean_of(&zz),
            zx: mean_of(&zx),
            xx: mean_of(&xx),
            lin_z: mean_vec(&lz),
            lin_x: mean_vec(&lx),
        };
        let mut problem = Self {
            dims,
            mean_b: mean_of(&b),
            mean_c: mean_vec(&c),
            a,
            b,
            c,
            outer,
            mean_a,
            mean_outer,
            chol_a,
            mu: 0.0,
        };
        problem.mu = problem.min_eigenvalue_mean_a();
        Ok(problem)
    }

    /// `A_i = I`, `B_i = 0`, `c_i = 0`, `F = ½‖x‖²`: `z*(x) = 0` and `∇h(x) = x`.
    pub fn decoupled(n: usize, m: usize, p: usize, d: usize) -> Result<Self> {
        let a = vec![DenseMatrix::identity(p); n];
        let b = vec![DenseMatrix::zeros(d, p); n];
        let c = vec![vec![0.0; p]; n];
        let outer = vec![
            QuadraticOuter {
                zz: DenseMatrix::zeros(p, p),
                zx: DenseMatrix::zeros(p, d),
                xx: DenseMatrix::identity(d),
                lin_z: vec![0.0; p],
                lin_x: vec![0.0; d],
            };
            m
        ];
        Self::new(a, b, c, outer)
    }

    fn min_eigenvalue_mean_a(&self) -> f64 {
        // inverse power iteration
        let p = self.dims.p;
        let mut x = vec![1.0 / (p as f64).sqrt(); p];
        let mut inv_lambda = 0.0;
        for _ in 0..500 {
            let y = self.chol_a.solve(&x);
            let ny = linalg::norm(&y);
            inv_lambda = linalg::dot(&x, &y);
            x = y.into_iter().map(|v| v / ny).collect();
        }
        1.0 / inv_lambda
    }

    pub fn mean_inner_hessian(&self) -> &DenseMatrix {
        &self.mean_a
    }

    pub fn inner_hessian(&self, i: usize) -> &DenseMatrix {
        &self.a[i]
    }

    /// `z*(x) = −Ā⁻¹(B̄ᵀx + c̄)`
    pub fn inner_solution(&self, x: &[f64]) -> Vec<f64> {
        let mut rhs = self.mean_b.matvec_t(x);
        linalg::axpy(1.0, &self.mean_c, &mut rhs);
        let mut z = self.chol_a.solve(&rhs);
        linalg::scale(-1.0, &mut z);
        z
    }

    fn mean_grad_f_in(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let o = &self.mean_outer;
        let mut g = o.lin_z.clone();
        o.zz.add_matvec(1.0, z, &mut g);
        o.zx.add_matvec(1.0, x, &mut g);
        g
    }

    fn mean_grad_f_out(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let o = &self.mean_outer;
        let mut g = o.lin_x.clone();
        o.zx.add_matvec_t(1.0, z, &mut g);
        o.xx.add_matvec(1.0, x, &mut g);
        g
    }

    /// `v*(x) = −Ā⁻¹∇₁F(z*(x), x)`
    pub fn adjoint_solution(&self, x: &[f64]) -> Vec<f64> {
        let z = self.inner_solution(x);
        let mut v = self.chol_a.solve(&self.mean_grad_f_in(&z, x));
        linalg::scale(-1.0, &mut v);
        v
    }

    /// `h(x) = F(z*(x), x)`
    pub fn value(&self, x: &[f64]) -> f64 {
        let z = self.inner_solution(x);
        self.mean_f_value(&z, x)
    }

    fn mean_f_value(&self, z: &[f64], x: &[f64]) -> f64 {
        let o = &self.mean_outer;
        0.5 * linalg::dot(z, &o.zz.matvec(z))
            + linalg::dot(z, &o.zx.matvec(x))
            + 0.5 * linalg::dot(x, &o.xx.matvec(x))
            + linalg::dot(&o.lin_z, z)
            + linalg::dot(&o.lin_x, x)
    }

    /// `∇h(x) = ∇₂F(z*, x) + B̄ v*`
    pub fn hypergradient(&self, x: &[f64]) -> Vec<f64> {
        let z = self.inner_solution(x);
        let v = self.adjoint_solution(x);
        let mut g = self.mean_grad_f_out(&z, x);
        self.mean_b.add_matvec(1.0, &v, &mut g);
        g
    }

    /// Hessian `Q` and linear term `q` of `h(x) = ½xᵀQx + qᵀx + const`.
    fn outer_quadratic(&self) -> (DenseMatrix, Vec<f64>) {
        let p = self.dims.p;
        let d = self.dims.d;
        // z*(x) = K x + k0
        let mut k = DenseMatrix::zeros(p, d);
        k.add_scaled(-1.0, &self.chol_a.solve_matrix(&self.mean_b.transpose()));
        let k0 = self.inner_solution(&vec![0.0; d]);
        let o = &self.mean_outer;
        let kt = k.transpose();
        let mut q = kt.matmul(&o.zz).matmul(&k);
        q.add_scaled(1.0, &kt.matmul(&o.zx));
        q.add_scaled(1.0, &o.zx.transpose().matmul(&k));
        q.add_scaled(1.0, &o.xx);
        let mut lin = kt.matvec(&o.zz.matvec(&k0));
        linalg::axpy(1.0, &o.zx.matvec_t(&k0), &mut lin);
        linalg::axpy(1.0, &kt.matvec(&o.lin_z), &mut lin);
        linalg::axpy(1.0, &o.lin_x, &mut lin);
        (q, lin)
    }

    /// `(x*, h*)` when `h` is strongly convex.
    pub fn optimum(&self) -> Option<(Vec<f64>, f64)> {
        let (q, lin) = self.outer_quadratic();
        let chol = q.cholesky()?;
        let mut x = chol.solve(&lin);
        linalg::scale(-1.0, &mut x);
        let h = self.value(&x);
        Some((x, h))
    }

    /// Largest eigenvalue of the Hessian of `h`.
    pub fn outer_smoothness(&self) -> f64 {
        self.outer_quadratic().0.spectral_radius_sym(500)
    }

    /// Largest eigenvalue among the per-sample inner Hessians.
    pub fn inner_smoothness(&self) -> f64 {
        self.a
            .iter()
            .map(|a| a.spectral_radius_sym(500))
            .fold(0.0, f64::max)
    }
}

impl BilevelOracle for QuadraticBilevel {
    fn dims(&self) -> ProblemDims {
        self.dims
    }

    fn g_value(&self, i: usize, z: &[f64], x: &[f64]) -> f64 {
        0.5 * linalg::dot(z, &self.a[i].matvec(z)) + linalg::dot(x, &self.b[i].matvec(z)) + linalg::dot(&self.c[i], z)
    }

    fn f_value(&self, j: usize, z: &[f64], x: &[f64]) -> f64 {
        let o = &self.outer[j];
        0.5 * linalg::dot(z, &o.zz.matvec(z))
            + linalg::dot(z, &o.zx.matvec(x))
            + 0.5 * linalg::dot(x, &o.xx.matvec(x))
            + linalg::dot(&o.lin_z, z)
            + linalg::dot(&o.lin_x, x)
    }

    fn add_grad_g_in(&self, i: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        self.a[i].add_matvec(scale, z, out);
        self.b[i].add_matvec_t(scale, x, out);
        linalg::axpy(scale, &self.c[i], out);
    }

    fn add_hvp_g(&self, i: usize, _z: &[f64], _x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        self.a[i].add_matvec(scale, v, out);
    }

    fn add_cross_g(&self, i: usize, _z: &[f64], _x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        self.b[i].add_matvec(scale, v, out);
    }

    fn add_grad_f_in(&self, j: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        let o = &self.outer[j];
        o.zz.add_matvec(scale, z, out);
        o.zx.add_matvec(scale, x, out);
        linalg::axpy(scale, &o.lin_z, out);
    }

    fn add_grad_f_out(&self, j: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        let o = &self.outer[j];
        o.zx.add_matvec_t(scale, z, out);
        o.xx.add_matvec(scale, x, out);
        linalg::axpy(scale, &o.lin_x, out);
    }

    fn add_g_terms(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: GTerms<'_>) {
        self.add_grad_g_in(i, z, x, scale, out.grad);
        self.a[i].add_matvec(scale, v, out.hvp);
        self.b[i].add_matvec(scale, v, out.cross);
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn strong_convexity(&self, _x: &[f64]) -> Option<f64> {
        Some(self.mu)
    }

    fn closed_form_optimum(&self) -> Option<f64> {
        self.optimum().map(|(_, h)| h)
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"quadratic");
        for dim in [self.dims.n, self.dims.m, self.dims.p, self.dims.d] {
            hasher.update((dim as u64).to_le_bytes());
        }
        let mut put = |xs: &[f64]| {
            for v in xs {
                hasher.update(v.to_le_bytes());
            }
        };
        for i in 0..self.dims.n {
            put(self.a[i].as_slice());
            put(self.b[i].as_slice());
            put(&self.c[i]);
        }
        for o in &self.outer {
            put(o.zz.as_slice());
            put(o.zx.as_slice());
            put(o.xx.as_slice());
            put(&o.lin_z);
            put(&o.lin_x);
        }
        hex::encode(hasher.finalize())
    }
}
