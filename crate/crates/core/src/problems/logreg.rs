//! Per-feature penalized logistic regression: one regularization weight
//! `e^{λ_k}` per feature, selected on a validation set.

use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::oracle::{BilevelOracle, BilevelProblem, GTerms, ProblemDims};
use crate::problems::dataset::{synthetic_binary, SparseDataset};
use crate::rng::{self, Stream};

/// IJCNN1 sizes `(n, m, p)`; the desk-scale synthetic stand-in keeps `p`.
pub const IJCNN1_DIMS: (usize, usize, usize) = (49_990, 91_701, 22);

/// `φ(u) = log(1 + e^{−u})`
pub fn logistic_loss(u: f64) -> f64 {
    if u > 0.0 {
        (-u).exp().ln_1p()
    } else {
        -u + u.exp().ln_1p()
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `φ'(u) = −σ(−u)`
pub fn logistic_loss_d1(u: f64) -> f64 {
    -sigmoid(-u)
}

/// `φ''(u) = σ(u)σ(−u)`
pub fn logistic_loss_d2(u: f64) -> f64 {
    sigmoid(u) * sigmoid(-u)
}

/// `G_i(θ, λ) = φ(y_i⟨d_i, θ⟩) + ½ Σ_k e^{λ_k} θ_k²` on training rows and
/// `F_j(θ, λ) = φ(y_j⟨d_j, θ⟩)` on validation rows.
#[derive(Debug, Clone)]
pub struct LogRegHyperProblem {
    train: SparseDataset,
    val: SparseDataset,
}

pub fn make_logreg_hyper(train: SparseDataset, val: SparseDataset) -> Result<LogRegHyperProblem> {
    for (name, ds) in [("train", &train), ("validation", &val)] {
        if ds.num_rows() == 0 {
            return Err(invalid(format!("{name} set is empty")));
        }
        if let Some(i) = ds.labels().iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(invalid(format!(
                "{name} row {i}: label {} is not ±1",
                ds.labels()[i]
            )));
        }
    }
    let p = train.num_features().max(val.num_features());
    if p == 0 {
        return Err(invalid("datasets have no features"));
    }
    Ok(LogRegHyperProblem {
        train: train.with_num_features(p)?,
        val: val.with_num_features(p)?,
    })
}

/// Synthetic stand-in: `n` train and `m` validation rows of a ±1 logistic
/// model in `p` features, each present with probability `density`.
pub fn make_synthetic_logreg(seed: u64, n: usize, m: usize, p: usize, density: f64) -> Result<LogRegHyperProblem> {
    let mut rng = rng::stream(seed, Stream::Problem);
    let all = synthetic_binary(&mut rng, n + m, p, density);
    make_logreg_hyper(all.slice(0..n), all.slice(n..n + m))
}

impl LogRegHyperProblem {
    pub fn train(&self) -> &SparseDataset {
        &self.train
    }

    pub fn validation(&self) -> &SparseDataset {
        &self.val
    }
}

impl BilevelOracle for LogRegHyperProblem {
    fn dims(&self) -> ProblemDims {
        let p = self.train.num_features();
        ProblemDims {
            n: self.train.num_rows(),
            m: self.val.num_rows(),
            p,
            d: p,
        }
    }

    fn g_value(&self, i: usize, z: &[f64], x: &[f64]) -> f64 {
        let margin = self.train.label(i) * self.train.row(i).dot(z);
        let penalty: f64 = z.iter().zip(x).map(|(t, l)| l.exp() * t * t).sum();
        logistic_loss(margin) + 0.5 * penalty
    }

    fn f_value(&self, j: usize, z: &[f64], _x: &[f64]) -> f64 {
        logistic_loss(self.val.label(j) * self.val.row(j).dot(z))
    }

    fn add_grad_g_in(&self, i: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        let y = self.train.label(i);
        let row = self.train.row(i);
        row.axpy(scale * logistic_loss_d1(y * row.dot(z)) * y, out);
        for k in 0..out.len() {
            out[k] += scale * x[k].exp() * z[k];
        }
    }

    fn add_hvp_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        let y = self.train.label(i);
        let row = self.train.row(i);
        row.axpy(scale * logistic_loss_d2(y * row.dot(z)) * row.dot(v), out);
        for k in 0..out.len() {
            out[k] += scale * x[k].exp() * v[k];
        }
    }

    fn add_cross_g(&self, _i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        for k in 0..out.len() {
            out[k] += scale * x[k].exp() * z[k] * v[k];
        }
    }

    fn add_grad_f_in(&self, j: usize, z: &[f64], _x: &[f64], scale: f64, out: &mut [f64]) {
        let y = self.val.label(j);
        let row = self.val.row(j);
        row.axpy(scale * logistic_loss_d1(y * row.dot(z)) * y, out);
    }

    fn add_grad_f_out(&self, _j: usize, _z: &[f64], _x: &[f64], _scale: f64, _out: &mut [f64]) {}

    fn add_g_terms(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: GTerms<'_>) {
        let y = self.train.label(i);
        let row = self.train.row(i);
        let margin = y * row.dot(z);
        row.axpy(scale * logistic_loss_d1(margin) * y, out.grad);
        row.axpy(scale * logistic_loss_d2(margin) * row.dot(v), out.hvp);
        for k in 0..z.len() {
            let w = scale * x[k].exp();
            out.grad[k] += w * z[k];
            out.hvp[k] += w * v[k];
            out.cross[k] += w * z[k] * v[k];
        }
    }
}

impl BilevelProblem for LogRegHyperProblem {
    fn name(&self) -> &str {
        "logreg"
    }

    fn strong_convexity(&self, x: &[f64]) -> Option<f64> {
        Some(x.iter().map(|l| l.exp()).fold(f64::INFINITY, f64::min))
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"logreg");
        self.train.hash_into(&mut hasher);
        self.val.hash_into(&mut hasher);
        hex::encode(hasher.finalize())
    }
}
