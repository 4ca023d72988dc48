//! Data hyper-cleaning: a multinomial logistic model trained with one
//! learnable weight `σ(λ_i)` per training sample, tuned on clean validation data.

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::linalg;
use crate::oracle::{BilevelOracle, BilevelProblem, GTerms, ProblemDims};
use crate::problems::dataset::{class_centers, synthetic_multiclass, SparseDataset};
use crate::problems::logreg::sigmoid;
use crate::rng::{self, Stream};

/// MNIST experiment sizes: train, validation, test, features, classes.
pub const MNIST_SIZES: (usize, usize, usize, usize, usize) = (20_000, 5_000, 10_000, 784, 10);

/// Regularization constant used for MNIST hyper-cleaning.
pub const DEFAULT_CR: f64 = 0.2;

/// Resamples each label uniformly from `0..num_classes` with probability
/// `p_corrupt`. The mask marks resampled positions, including those whose
/// new label happens to equal the old one.
pub fn corrupt_labels(
    labels: &[usize],
    p_corrupt: f64,
    num_classes: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p_corrupt) {
        return Err(invalid(format!("corruption probability {p_corrupt} outside [0, 1]")));
    }
    if num_classes == 0 {
        return Err(invalid("need at least one class"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(invalid(format!("label {y} outside 0..{num_classes}")));
    }
    let mut rng = rng::stream(seed, Stream::Corruption);
    let mut out = Vec::with_capacity(labels.len());
    let mut mask = Vec::with_capacity(labels.len());
    for &y in labels {
        if rng.random::<f64>() < p_corrupt {
            out.push(rng.random_range(0..num_classes));
            mask.push(true);
        } else {
            out.push(y);
            mask.push(false);
        }
    }
    Ok((out, mask))
}

#[derive(Debug, Clone)]
struct Split {
    data: SparseDataset,
    labels: Vec<usize>,
}

/// `G_i(θ, λ) = σ(λ_i) ℓ(θd_i, y_i) + C_r‖θ‖²`, `F_j(θ, λ) = ℓ(θd_j, y_j)` with
/// `ℓ` the cross-entropy and `θ` a `classes × features` matrix stored row-major.
#[derive(Debug, Clone)]
pub struct HyperCleanProblem {
    train: Split,
    val: Split,
    test: Split,
    corrupted: Vec<bool>,
    classes: usize,
    features: usize,
    c_r: f64,
}

fn split(data: SparseDataset, classes: usize) -> Result<Split> {
    let labels = data.class_labels(classes)?;
    Ok(Split { data, labels })
}

/// Corrupts the training labels only and builds the problem.
pub fn make_hyperclean(
    train: SparseDataset,
    val: SparseDataset,
    test: SparseDataset,
    num_classes: usize,
    p_corrupt: f64,
    c_r: f64,
    seed: u64,
) -> Result<HyperCleanProblem> {
    if !(c_r >= 0.0) || !c_r.is_finite() {
        return Err(invalid(format!("regularization constant {c_r} must be ≥ 0")));
    }
    if train.num_rows() == 0 || val.num_rows() == 0 {
        return Err(invalid("train and validation sets must be non-empty"));
    }
    let features = train
        .num_features()
        .max(val.num_features())
        .max(test.num_features());
    let clean = train.class_labels(num_classes)?;
    let (noisy, corrupted) = corrupt_labels(&clean, p_corrupt, num_classes, seed)?;
    let train = train
        .with_labels(noisy.iter().map(|&y| y as f64).collect())?
        .with_num_features(features)?;
    Ok(HyperCleanProblem {
        train: split(train, num_classes)?,
        val: split(val.with_num_features(features)?, num_classes)?,
        test: split(test.with_num_features(features)?, num_classes)?,
        corrupted,
        classes: num_classes,
        features,
        c_r,
    })
}

/// Desk-scale stand-in: a Gaussian mixture with `classes` centers in
/// `features` dimensions split into train / validation / test.
#[allow(clippy::too_many_arguments)]
pub fn make_synthetic_hyperclean(
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    features: usize,
    classes: usize,
    separation: f64,
    p_corrupt: f64,
    c_r: f64,
) -> Result<HyperCleanProblem> {
    let mut rng = rng::stream(seed, Stream::Problem);
    let centers = class_centers(&mut rng, classes, features, separation);
    let train = synthetic_multiclass(&mut rng, &centers, n_train);
    let val = synthetic_multiclass(&mut rng, &centers, n_val);
    let test = synthetic_multiclass(&mut rng, &centers, n_test);
    make_hyperclean(train, val, test, classes, p_corrupt, c_r, seed)
}

/// `log Σ exp` and the softmax of `logits`, written into `probs`.
fn softmax(logits: &[f64], probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

impl HyperCleanProblem {
    pub fn corruption_mask(&self) -> &[bool] {
        &self.corrupted
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn regularization(&self) -> f64 {
        self.c_r
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.train.labels
    }

    /// `σ(λ_i)` for every training sample.
    pub fn sample_weights(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&l| sigmoid(l)).collect()
    }

    /// Mean weight over corrupted and over clean samples.
    pub fn weight_split(&self, x: &[f64]) -> (f64, f64) {
        let (mut sc, mut nc, mut sk, mut nk) = (0.0, 0usize, 0.0, 0usize);
        for (&l, &bad) in x.iter().zip(&self.corrupted) {
            if bad {
                sc += sigmoid(l);
                nc += 1;
            } else {
                sk += sigmoid(l);
                nk += 1;
            }
        }
        (sc / nc.max(1) as f64, sk / nk.max(1) as f64)
    }

    fn logits(&self, ds: &SparseDataset, i: usize, theta: &[f64], out: &mut [f64]) {
        let row = ds.row(i);
        for (c, o) in out.iter_mut().enumerate() {
            *o = row.dot(&theta[c * self.features..(c + 1) * self.features]);
        }
    }

    /// Cross-entropy of sample `i`; leaves the softmax in `probs`.
    fn loss(&self, split: &Split, i: usize, theta: &[f64], logits: &mut [f64], probs: &mut [f64]) -> f64 {
        self.logits(&split.data, i, theta, logits);
        let lse = softmax(logits, probs);
        lse - logits[split.labels[i]]
    }

    /// `out += a · r ⊗ d_i`
    fn add_outer(&self, ds: &SparseDataset, i: usize, r: &[f64], a: f64, out: &mut [f64]) {
        let row = ds.row(i);
        for (c, &rc) in r.iter().enumerate() {
            if rc != 0.0 {
                row.axpy(a * rc, &mut out[c * self.features..(c + 1) * self.features]);
            }
        }
    }

    /// `u = V d_i`, then `(diag(s) − ssᵀ) u`.
    fn softmax_hvp(&self, ds: &SparseDataset, i: usize, probs: &[f64], v: &[f64], u: &mut [f64]) {
        self.logits(ds, i, v, u);
        let su: f64 = probs.iter().zip(u.iter()).map(|(s, x)| s * x).sum();
        for (x, s) in u.iter_mut().zip(probs) {
            *x = s * (*x - su);
        }
    }

    pub fn error_rate(&self, theta: &[f64], ds: &SparseDataset, labels: &[usize]) -> f64 {
        let mut logits = vec![0.0; self.classes];
        let wrong = (0..ds.num_rows())
            .filter(|&i| {
                self.logits(ds, i, theta, &mut logits);
                argmax(&logits) != labels[i]
            })
            .count();
        wrong as f64 / ds.num_rows().max(1) as f64
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = k;
        }
    }
    best
}

impl BilevelOracle for HyperCleanProblem {
    fn dims(&self) -> ProblemDims {
        ProblemDims {
            n: self.train.labels.len(),
            m: self.val.labels.len(),
            p: self.classes * self.features,
            d: self.train.labels.len(),
        }
    }

    fn g_value(&self, i: usize, z: &[f64], x: &[f64]) -> f64 {
        let mut logits = vec![0.0; self.classes];
        let mut probs = vec![0.0; self.classes];
        let loss = self.loss(&self.train, i, z, &mut logits, &mut probs);
        sigmoid(x[i]) * loss + self.c_r * linalg::norm_sq(z)
    }

    fn f_value(&self, j: usize, z: &[f64], _x: &[f64]) -> f64 {
        let mut logits = vec![0.0; self.classes];
        let mut probs = vec![0.0; self.classes];
        self.loss(&self.val, j, z, &mut logits, &mut probs)
    }

    fn add_grad_g_in(&self, i: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        let mut logits = vec![0.0; self.classes];
        let mut probs = vec![0.0; self.classes];
        self.loss(&self.train, i, z, &mut logits, &mut probs);
        probs[self.train.labels[i]] -= 1.0;
        self.add_outer(&self.train.data, i, &probs, scale * sigmoid(x[i]), out);
        linalg::axpy(scale * 2.0 * self.c_r, z, out);
    }

    fn add_hvp_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        let mut logits = vec![0.0; self.classes];
        let mut probs = vec![0.0; self.classes];
        self.loss(&self.train, i, z, &mut logits, &mut probs);
        let mut u = vec![0.0; self.classes];
        self.softmax_hvp(&self.train.data, i, &probs, v, &mut u);
        self.add_outer(&self.train.data, i, &u, scale * sigmoid(x[i]), out);
        linalg::axpy(scale * 2.0 * self.c_r, v, out);
    }

    fn add_cross_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        let mut logits = vec![0.0; self.classes];
        let mut probs = vec![0.0; self.classes];
        self.loss(&self.train, i, z, &mut logits, &mut probs);
        probs[self.train.labels[i]] -= 1.0;
        let mut u = vec![0.0; self.classes];
        self.logits(&self.train.data, i, v, &mut u);
        let s = sigmoid(x[i]);
        out[i] += scale * s * (1.0 - s) * linalg::dot(&probs, &u);
    }

    fn add_grad_f_in(&self, j: usize, z: &[f64], _x: &[f64], scale: f64, out: &mut [f64]) {
        let mut logits = vec![0.0; self.classes];
        let mut probs = vec![0.0; self.classes];
        self.loss(&self.val, j, z, &mut logits, &mut probs);
        probs[self.val.labels[j]] -= 1.0;
        self.add_outer(&self.val.data, j, &probs, scale, out);
    }

    fn add_grad_f_out(&self, _j: usize, _z: &[f64], _x: &[f64], _scale: f64, _out: &mut [f64]) {}

    fn add_g_terms(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: GTerms<'_>) {
        let c = self.classes;
        let mut logits = vec![0.0; c];
        let mut probs = vec![0.0; c];
        self.loss(&self.train, i, z, &mut logits, &mut probs);
        let s = sigmoid(x[i]);
        // u = V d_i, reused by the hvp and the cross term
        let mut vd = vec![0.0; c];
        self.logits(&self.train.data, i, v, &mut vd);
        let svd: f64 = linalg::dot(&probs, &vd);
        let hu: Vec<f64> = probs.iter().zip(&vd).map(|(p, u)| p * (u - svd)).collect();
        let mut resid = probs;
        resid[self.train.labels[i]] -= 1.0;
        self.add_outer(&self.train.data, i, &resid, scale * s, out.grad);
        linalg::axpy(scale * 2.0 * self.c_r, z, out.grad);
        self.add_outer(&self.train.data, i, &hu, scale * s, out.hvp);
        linalg::axpy(scale * 2.0 * self.c_r, v, out.hvp);
        out.cross[i] += scale * s * (1.0 - s) * linalg::dot(&resid, &vd);
    }
}

impl BilevelProblem for HyperCleanProblem {
    fn name(&self) -> &str {
        "hyperclean"
    }

    fn strong_convexity(&self, _x: &[f64]) -> Option<f64> {
        Some(2.0 * self.c_r)
    }

    fn test_error(&self, z: &[f64]) -> Option<f64> {
        Some(self.error_rate(z, &self.test.data, &self.test.labels))
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"hyperclean");
        hasher.update(self.c_r.to_le_bytes());
        hasher.update((self.classes as u64).to_le_bytes());
        for s in [&self.train, &self.val, &self.test] {
            s.data.hash_into(&mut hasher);
        }
        hex::encode(hasher.finalize())
    }
}
