//! Per-sample derivative interface of a finite-sum bilevel problem.
//!
//! A problem is `G = (1/n) Σ G_i` (inner) and `F = (1/m) Σ F_j` (outer) with
//! inner variable `z ∈ ℝ^p` and outer variable `x ∈ ℝ^d`. Implementations
//! supply closed-form derivatives of every summand; nothing here ever forms a
//! Hessian matrix.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    /// number of inner samples `G_i`
    pub n: usize,
    /// number of outer samples `F_j`
    pub m: usize,
    /// inner dimension
    pub p: usize,
    /// outer dimension
    pub d: usize,
}

impl ProblemDims {
    pub fn new(n: usize, m: usize, p: usize, d: usize) -> Result<Self> {
        if n == 0 || m == 0 || p == 0 || d == 0 {
            return Err(invalid(format!(
                "problem dimensions must be positive (n={n}, m={m}, p={p}, d={d})"
            )));
        }
        Ok(Self { n, m, p, d })
    }
}

/// The joint iterate `(z, v, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub x: Vec<f64>,
}

impl JointState {
    pub fn zeros(dims: ProblemDims) -> Self {
        Self {
            z: vec![0.0; dims.p],
            v: vec![0.0; dims.p],
            x: vec![0.0; dims.d],
        }
    }

    pub fn new(z: Vec<f64>, v: Vec<f64>, x: Vec<f64>, dims: ProblemDims) -> Result<Self> {
        let state = Self { z, v, x };
        state.validate(dims)?;
        Ok(state)
    }

    pub fn validate(&self, dims: ProblemDims) -> Result<()> {
        check_len("z", &self.z, dims.p)?;
        check_len("v", &self.v, dims.p)?;
        check_len("x", &self.x, dims.d)?;
        if !self.is_finite() {
            return Err(invalid("joint state has non-finite entries"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        linalg::all_finite(&self.z) && linalg::all_finite(&self.v) && linalg::all_finite(&self.x)
    }

    /// Largest Euclidean norm among the three blocks.
    pub fn max_norm(&self) -> f64 {
        linalg::norm(&self.z)
            .max(linalg::norm(&self.v))
            .max(linalg::norm(&self.x))
    }
}

/// Mini-batch sizes for the inner and outer sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub inner: usize,
    pub outer: usize,
}

impl BatchSpec {
    pub fn new(inner: usize, outer: usize, dims: ProblemDims) -> Result<Self> {
        let spec = Self { inner, outer };
        spec.validate(dims)?;
        Ok(spec)
    }

    /// One sample per block.
    pub fn single() -> Self {
        Self { inner: 1, outer: 1 }
    }

    /// One block spanning each sum.
    pub fn full(dims: ProblemDims) -> Self {
        Self {
            inner: dims.n,
            outer: dims.m,
        }
    }

    pub fn validate(&self, dims: ProblemDims) -> Result<()> {
        if self.inner == 0 || self.inner > dims.n {
            return Err(invalid(format!(
                "inner batch size {} outside [1, {}]",
                self.inner, dims.n
            )));
        }
        if self.outer == 0 || self.outer > dims.m {
            return Err(invalid(format!(
                "outer batch size {} outside [1, {}]",
                self.outer, dims.m
            )));
        }
        Ok(())
    }

    pub fn inner_blocks(&self, dims: ProblemDims) -> Blocks {
        Blocks { len: dims.n, size: self.inner }
    }

    pub fn outer_blocks(&self, dims: ProblemDims) -> Blocks {
        Blocks { len: dims.m, size: self.outer }
    }
}

/// Contiguous partition of `0..len` into blocks `[k·size, min((k+1)·size, len))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocks {
    len: usize,
    size: usize,
}

impl Blocks {
    pub fn new(len: usize, size: usize) -> Result<Self> {
        if size == 0 || size > len {
            return Err(invalid(format!("block size {size} outside [1, {len}]")));
        }
        Ok(Self { len, size })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `⌈len / size⌉`
    pub fn count(&self) -> usize {
        self.len.div_ceil(self.size)
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        assert!(k < self.count(), "block {k} out of range for {} blocks", self.count());
        let start = k * self.size;
        start..(start + self.size).min(self.len)
    }

    /// Index of the block holding sample `i`.
    pub fn block_of(&self, i: usize) -> usize {
        i / self.size
    }

    /// Factor applied to a block mean so that the uniform average over blocks
    /// is the full mean; exactly 1 when `size` divides `len`.
    pub fn weight(&self, k: usize) -> f64 {
        let r = self.range(k);
        ((r.end - r.start) * self.count()) as f64 / self.len as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.count()).map(|k| self.range(k))
    }
}

/// The three inner-sum quantities of one sample, evaluated together.
pub struct GTerms<'a> {
    pub grad: &'a mut [f64],
    pub hvp: &'a mut [f64],
    pub cross: &'a mut [f64],
}

/// Sampled derivatives of a finite-sum bilevel problem.
///
/// All `add_*` methods accumulate `out += scale * term` and assume the index is
/// in range and the slices have the problem's dimensions; they panic otherwise.
/// The checked, allocating forms live on [`SampledOps`].
pub trait BilevelOracle: Sync {
    fn dims(&self) -> ProblemDims;

    fn g_value(&self, i: usize, z: &[f64], x: &[f64]) -> f64;

    fn f_value(&self, j: usize, z: &[f64], x: &[f64]) -> f64;

    /// `∇₁G_i(z, x)`
    fn add_grad_g_in(&self, i: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]);

    /// `∇²₁₁G_i(z, x) v`
    fn add_hvp_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]);

    /// `∇²₂₁G_i(z, x) v`, a vector of length `d`.
    fn add_cross_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]);

    /// `∇₁F_j(z, x)`
    fn add_grad_f_in(&self, j: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]);

    /// `∇₂F_j(z, x)`
    fn add_grad_f_out(&self, j: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]);

    /// Fused evaluation of the three `G_i` quantities; override to share work
    /// such as the prediction `⟨z, d_i⟩`.
    fn add_g_terms(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: GTerms<'_>) {
        self.add_grad_g_in(i, z, x, scale, out.grad);
        self.add_hvp_g(i, z, x, v, scale, out.hvp);
        self.add_cross_g(i, z, x, v, scale, out.cross);
    }

    /// Fused evaluation of both `F_j` gradients.
    fn add_f_terms(
        &self,
        j: usize,
        z: &[f64],
        x: &[f64],
        scale: f64,
        grad_in: &mut [f64],
        grad_out: &mut [f64],
    ) {
        self.add_grad_f_in(j, z, x, scale, grad_in);
        self.add_grad_f_out(j, z, x, scale, grad_out);
    }
}

/// A concrete problem: the oracle plus what the metrics and the runner need.
pub trait BilevelProblem: BilevelOracle {
    fn name(&self) -> &str;

    /// Starting outer point used by the solvers.
    fn initial_outer(&self) -> Vec<f64> {
        vec![0.0; self.dims().d]
    }

    /// A lower bound on the strong convexity of `G(·, x)`, when known.
    fn strong_convexity(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Misclassification rate of the inner model on held-out data.
    fn test_error(&self, _z: &[f64]) -> Option<f64> {
        None
    }

    /// `h* = min_x h(x)` when it has a closed form.
    fn closed_form_optimum(&self) -> Option<f64> {
        None
    }

    /// Hex digest identifying the problem data; keys reference caches.
    fn fingerprint(&self) -> String;
}

/// The five sampled quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampledOp {
    GradGIn,
    HvpG,
    CrossG,
    GradFIn,
    GradFOut,
}

impl SampledOp {
    fn is_inner(self) -> bool {
        matches!(self, SampledOp::GradGIn | SampledOp::HvpG | SampledOp::CrossG)
    }

    fn out_len(self, dims: ProblemDims) -> usize {
        match self {
            SampledOp::GradGIn | SampledOp::HvpG | SampledOp::GradFIn => dims.p,
            SampledOp::CrossG | SampledOp::GradFOut => dims.d,
        }
    }
}

fn add_op<O: BilevelOracle + ?Sized>(
    oracle: &O,
    op: SampledOp,
    idx: usize,
    z: &[f64],
    x: &[f64],
    v: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    match op {
        SampledOp::GradGIn => oracle.add_grad_g_in(idx, z, x, scale, out),
        SampledOp::HvpG => oracle.add_hvp_g(idx, z, x, v, scale, out),
        SampledOp::CrossG => oracle.add_cross_g(idx, z, x, v, scale, out),
        SampledOp::GradFIn => oracle.add_grad_f_in(idx, z, x, scale, out),
        SampledOp::GradFOut => oracle.add_grad_f_out(idx, z, x, scale, out),
    }
}

fn check_state(dims: ProblemDims, z: &[f64], x: &[f64], v: Option<&[f64]>) -> Result<()> {
    check_len("z", z, dims.p)?;
    check_len("x", x, dims.d)?;
    if let Some(v) = v {
        check_len("v", v, dims.p)?;
    }
    Ok(())
}

/// Arithmetic mean of a sampled quantity over a contiguous index block.
/// `v` is ignored by the ops that do not take it.
pub fn batch_mean<O: BilevelOracle + ?Sized>(
    oracle: &O,
    op: SampledOp,
    block: Range<usize>,
    z: &[f64],
    x: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    let dims = oracle.dims();
    let len = if op.is_inner() { dims.n } else { dims.m };
    if block.is_empty() {
        return Err(invalid("empty block"));
    }
    if block.end > len {
        return Err(Error::IndexOutOfRange {
            index: block.end - 1,
            len,
        });
    }
    let needs_v = matches!(op, SampledOp::HvpG | SampledOp::CrossG);
    check_state(dims, z, x, needs_v.then_some(v))?;
    let scale = 1.0 / block.len() as f64;
    let mut out = vec![0.0; op.out_len(dims)];
    for idx in block {
        add_op(oracle, op, idx, z, x, v, scale, &mut out);
    }
    Ok(out)
}

/// Checked single-sample and full-batch accessors.
pub trait SampledOps: BilevelOracle {
    fn grad_g_in(&self, i: usize, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        single(self, SampledOp::GradGIn, i, z, x, &[])
    }

    fn hvp_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        single(self, SampledOp::HvpG, i, z, x, v)
    }

    fn cross_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        single(self, SampledOp::CrossG, i, z, x, v)
    }

    fn grad_f_in(&self, j: usize, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        single(self, SampledOp::GradFIn, j, z, x, &[])
    }

    fn grad_f_out(&self, j: usize, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        single(self, SampledOp::GradFOut, j, z, x, &[])
    }

    /// Full-batch mean of a sampled quantity.
    fn full_mean(&self, op: SampledOp, z: &[f64], x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let dims = self.dims();
        let len = if op.is_inner() { dims.n } else { dims.m };
        batch_mean(self, op, 0..len, z, x, v)
    }

    /// `G(z, x)`
    fn g_full(&self, z: &[f64], x: &[f64]) -> f64 {
        let n = self.dims().n;
        (0..n).map(|i| self.g_value(i, z, x)).sum::<f64>() / n as f64
    }

    /// `F(z, x)`
    fn f_full(&self, z: &[f64], x: &[f64]) -> f64 {
        let m = self.dims().m;
        (0..m).map(|j| self.f_value(j, z, x)).sum::<f64>() / m as f64
    }
}

impl<O: BilevelOracle + ?Sized> SampledOps for O {}

fn single<O: BilevelOracle + ?Sized>(
    oracle: &O,
    op: SampledOp,
    idx: usize,
    z: &[f64],
    x: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    let dims = oracle.dims();
    let len = if op.is_inner() { dims.n } else { dims.m };
    if idx >= len {
        return Err(Error::IndexOutOfRange { index: idx, len });
    }
    batch_mean(oracle, op, idx..idx + 1, z, x, v)
}

/// Oracle-call tallies: gradients (`∇₁G_i`, `∇₁F_j`, `∇₂F_j`) and
/// Hessian-type products (`∇²₁₁G_i v`, `∇²₂₁G_i v`), one per sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCounts {
    pub grads: u64,
    pub hvps: u64,
}

impl OracleCounts {
    pub fn total(&self) -> u64 {
        self.grads + self.hvps
    }

    /// Cost of evaluating the fused `G` terms on `inner` samples and the fused
    /// `F` terms on `outer` samples.
    pub fn for_samples(inner: usize, outer: usize) -> Self {
        Self {
            grads: inner as u64 + 2 * outer as u64,
            hvps: 2 * inner as u64,
        }
    }
}

impl std::ops::AddAssign for OracleCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.grads += rhs.grads;
        self.hvps += rhs.hvps;
    }
}

impl std::ops::Add for OracleCounts {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

/// Wraps an oracle and counts every per-sample evaluation.
pub struct CountingOracle<'a, O: ?Sized> {
    inner: &'a O,
    grads: AtomicU64,
    hvps: AtomicU64,
}

impl<'a, O: BilevelOracle + ?Sized> CountingOracle<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self {
            inner,
            grads: AtomicU64::new(0),
            hvps: AtomicU64::new(0),
        }
    }

    pub fn counts(&self) -> OracleCounts {
        OracleCounts {
            grads: self.grads.load(Ordering::Relaxed),
            hvps: self.hvps.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.grads.store(0, Ordering::Relaxed);
        self.hvps.store(0, Ordering::Relaxed);
    }

    fn grad(&self, k: u64) {
        self.grads.fetch_add(k, Ordering::Relaxed);
    }

    fn hvp(&self, k: u64) {
        self.hvps.fetch_add(k, Ordering::Relaxed);
    }
}

impl<O: BilevelOracle + ?Sized> BilevelOracle for CountingOracle<'_, O> {
    fn dims(&self) -> ProblemDims {
        self.inner.dims()
    }

    fn g_value(&self, i: usize, z: &[f64], x: &[f64]) -> f64 {
        self.inner.g_value(i, z, x)
    }

    fn f_value(&self, j: usize, z: &[f64], x: &[f64]) -> f64 {
        self.inner.f_value(j, z, x)
    }

    fn add_grad_g_in(&self, i: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        self.grad(1);
        self.inner.add_grad_g_in(i, z, x, scale, out)
    }

    fn add_hvp_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        self.hvp(1);
        self.inner.add_hvp_g(i, z, x, v, scale, out)
    }

    fn add_cross_g(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        self.hvp(1);
        self.inner.add_cross_g(i, z, x, v, scale, out)
    }

    fn add_grad_f_in(&self, j: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        self.grad(1);
        self.inner.add_grad_f_in(j, z, x, scale, out)
    }

    fn add_grad_f_out(&self, j: usize, z: &[f64], x: &[f64], scale: f64, out: &mut [f64]) {
        self.grad(1);
        self.inner.add_grad_f_out(j, z, x, scale, out)
    }

    fn add_g_terms(&self, i: usize, z: &[f64], x: &[f64], v: &[f64], scale: f64, out: GTerms<'_>) {
        self.grad(1);
        self.hvp(2);
        self.inner.add_g_terms(i, z, x, v, scale, out)
    }

    fn add_f_terms(
        &self,
        j: usize,
        z: &[f64],
        x: &[f64],
        scale: f64,
        grad_in: &mut [f64],
        grad_out: &mut [f64],
    ) {
        self.grad(2);
        self.inner.add_f_terms(j, z, x, scale, grad_in, grad_out)
    }
}

/// Accumulates the fused `G` terms of a block, scaled so that the uniform
/// average over blocks is the full mean (see [`Blocks::weight`]).
pub(crate) fn add_block_g_terms<O: BilevelOracle + ?Sized>(
    oracle: &O,
    blocks: &Blocks,
    k: usize,
    z: &[f64],
    x: &[f64],
    v: &[f64],
    grad: &mut [f64],
    hvp: &mut [f64],
    cross: &mut [f64],
) {
    let range = blocks.range(k);
    let scale = blocks.weight(k) / range.len() as f64;
    for i in range {
        oracle.add_g_terms(i, z, x, v, scale, GTerms { grad: &mut *grad, hvp: &mut *hvp, cross: &mut *cross });
    }
}

pub(crate) fn add_block_f_terms<O: BilevelOracle + ?Sized>(
    oracle: &O,
    blocks: &Blocks,
    k: usize,
    z: &[f64],
    x: &[f64],
    grad_in: &mut [f64],
    grad_out: &mut [f64],
) {
    let range = blocks.range(k);
    let scale = blocks.weight(k) / range.len() as f64;
    for j in range {
        oracle.add_f_terms(j, z, x, scale, grad_in, grad_out);
    }
}
