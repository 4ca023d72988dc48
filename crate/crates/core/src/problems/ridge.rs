//! Ridge-regression hyperparameter selection on a synthetic misspecified
//! linear model (scalar outer variable `λ`).

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::linalg::{self, DenseMatrix};
use crate::oracle::{BilevelOracle, BilevelProblem, GTerms, ProblemDims};
use crate::rng::{self, Stream};

pub const TOY_SAMPLES: usize = 1000;
pub const TOY_TRAIN: usize = 750;
pub const TOY_FEATURES: usize = 10;

/// `G_i(θ, λ) = ½(x_iᵀθ − y_i)² + (λ/2)‖θ‖²` on the training pairs and
/// `F_j(θ, λ) = ½(x_jᵀθ − y_j)²` on the validation pairs.
#[derive(Debug, Clone)]
pub struct ToyRidgeProblem {
    train_x: DenseMatrix,
    train_y: Vec<f64>,
    val_x: DenseMatrix,
    val_y: Vec<f64>,
    gram_min_eig: f64,
}

/// Draws 1000 samples `x ~ N(0, I₁₀)`, `β ~ N(0, I₁₀)`,
/// `W_ij = 1 + u_j v_ij` with `v_ij ~ U[0,1]` and `u_j ~ U[0,1]` for the first
/// five features, `U[0,10]` for the last five, `y = (X ⊙ W)β + ε` with
/// `ε ~ N(0, 0.01)`; the first 750 pairs train, the rest validate.
pub fn make_toy_ridge(seed: u64) -> ToyRidgeProblem {
    let mut rng = rng::stream(seed, Stream::Problem);
    let p = TOY_FEATURES;
    let x = DenseMatrix::from_fn(TOY_SAMPLES, p, |_, _| StandardNormal.sample(&mut rng));
    let beta: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let u: Vec<f64> = (0..p)
        .map(|j| {
            let hi = if j < 5 { 1.0 } else { 10.0 };
            rng.random::<f64>() * hi
        })
        .collect();
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let y: Vec<f64> = (0..TOY_SAMPLES)
        .map(|i| {
            let mut yi = 0.0;
            for j in 0..p {
                let w = 1.0 + u[j] * rng.random::<f64>();
                yi += x[(i, j)] * w * beta[j];
            }
            yi + noise.sample(&mut rng)
        })
        .collect();
    let train_x = DenseMatrix::from_fn(TOY_TRAIN, p, |r, c| x[(r, c)]);
    let val_x = DenseMatrix::from_fn(TOY_SAMPLES - TOY_TRAIN, p, |r, c| x[(TOY_TRAIN + r, c)]);
    ToyRidgeProblem::new(train_x, y[..TOY_TRAIN].to_vec(), val_x, y[TOY_TRAIN..].to_vec())
}

impl ToyRidgeProblem {
    pub fn new(train_x: DenseMatrix, train_y: Vec<f64>, val_x: DenseMatrix, val_y: Vec<f64>) -> Self {
        assert_eq!(train_x.rows(), train_y.len());
        assert_eq!(val_x.rows(), val_y.len());
        assert_eq!(train_x.cols(), val_x.cols());
        let n = train_y.len() as f64;
        let raw = train_x.transpose().matmul(&train_x);
        let gram = DenseMatrix::from_fn(raw.rows(), raw.cols(), |r, c| raw[(r, c)] / n);
        let gram_min_eig = min_eigenvalue(&gram);
        Self {
            train_x,
            train_y,
            val_x,
            val_y,
            gram_min_eig,
        }
    }

    pub fn train_inputs(&self) -> &DenseMatrix {
        &self.train_x
    }

    pub fn train_targets(&self) -> &[f64] {
        &self.train_y
    }

    pub fn val_inputs(&self) -> &DenseMatrix {
        &self.val_x
    }

    pub fn val_targets(&self) -> &[f64] {
        &self.val_y
    }

    fn train_residual(&self, i: usize, theta: &[f64]) -> f64 {
        linalg::dot(self.train_x.row(i), theta) - self.train_y[i]
    }

    fn val_residual(&self, j: usize, theta: &[f64]) -> f64 {
        linalg::dot(self.val_x.row(j), theta) - self.val_y[j]
    }
}

fn min_eigenvalue(sym: &DenseMatrix) -> f64 {
    let Some(chol) = sym.cholesky() else {
        return 0.0;
    };
    let n = sym.rows();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut inv = 0.0;
    for _ in 0..500 {
        let y = chol.solve(&x);
        let ny = linalg::norm(&y);
        inv = linalg::dot(&x, &y);
        x = y.into_iter().map(|v| v / ny).collect();
    }
    1.0 / inv
}

impl BilevelOracle for ToyRidgeProblem {
    fn dims(&self) -> ProblemDims {
        ProblemDims {
            n: self.train_y.len(),
            m: self.val_y.len(),
            p: self.train_x.cols(),
            d: 1,
        }
    }

    fn g_value(&self, i: usize, z: &[f64], x: &[f64]) -> f64 {
        let r = self.train_residual(i, z);
        0.5 * r * r + 0.5 * x[0] * linalg::norm_sq(z)
    }

    fn f_value(&self, j: usize, z: &[f64], _x: &[f64]) -> f64 {
        let r = self.val_residual(j, z);
        0.5 * r * r
    }

    fn add_grad_g_in(&self, i: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        let r = self.train_residual(i, z);
        linalg::axpy(scale * r, self.train_x.row(i), out);
        linalg::axpy(scale * x[0], z, out);
    }

    fn add_hvp_g(&self, i: usize, _z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        let row = self.train_x.row(i);
        linalg::axpy(scale * linalg::dot(row, v), row, out);
        linalg::axpy(scale * x[0], v, out);
    }

    fn add_cross_g(&self, _i: usize, z: &[f64], _x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        out[0] += scale * linalg::dot(z, v);
    }

    fn add_grad_f_in(&self, j: usize, z: &[f64], _x: &[f64], scale: f64, out: &mut [f64]) {
        let r = self.val_residual(j, z);
        linalg::axpy(scale * r, self.val_x.row(j), out);
    }

    fn add_grad_f_out(&self, _j: usize, _z: &[f64], _x: &[f64], _scale: f64, _out: &mut [f64]) {}

    fn add_g_terms(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: GTerms<'_>) {
        let row = self.train_x.row(i);
        let r = linalg::dot(row, z) - self.train_y[i];
        let rv = linalg::dot(row, v);
        linalg::axpy(scale * r, row, out.grad);
        linalg::axpy(scale * x[0], z, out.grad);
        linalg::axpy(scale * rv, row, out.hvp);
        linalg::axpy(scale * x[0], v, out.hvp);
        out.cross[0] += scale * linalg::dot(z, v);
    }
}

impl BilevelProblem for ToyRidgeProblem {
    fn name(&self) -> &str {
        "toy-ridge"
    }

    fn initial_outer(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn strong_convexity(&self, x: &[f64]) -> Option<f64> {
        Some(self.gram_min_eig + x[0])
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"toy-ridge");
        for v in self
            .train_x
            .as_slice()
            .iter()
            .chain(&self.train_y)
            .chain(self.val_x.as_slice())
            .chain(&self.val_y)
        {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_follow_the_recipe() {
        let pb = make_toy_ridge(0);
        let dims = pb.dims();
        assert_eq!((dims.n, dims.m, dims.p, dims.d), (750, 250, 10, 1));
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(make_toy_ridge(4).fingerprint(), make_toy_ridge(4).fingerprint());
        assert_ne!(make_toy_ridge(4).fingerprint(), make_toy_ridge(5).fingerprint());
    }

    #[test]
    fn gram_is_well_conditioned() {
        let pb = make_toy_ridge(0);
        let mu = pb.strong_convexity(&[0.0]).unwrap();
        assert!(mu > 0.5 && mu < 1.0, "{mu}");
    }
}
