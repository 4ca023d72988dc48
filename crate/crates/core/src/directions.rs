//! The joint directions `(D_z, D_v, D_x)` and their estimators.
//!
//! ```text
//! D_z = ∇₁G(z, x)
//! D_v = ∇²₁₁G(z, x) v + ∇₁F(z, x)
//! D_x = ∇²₂₁G(z, x) v + ∇₂F(z, x)
//! ```
//!
//! Every term is a sample mean, so the stochastic estimators below only ever
//! evaluate one inner block `i` and one outer block `j` per step.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle::{
    add_block_f_terms, add_block_g_terms, BatchSpec, BilevelOracle, Blocks, JointState, OracleCounts,
    ProblemDims,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirectionTriple {
    pub dz: Vec<f64>,
    pub dv: Vec<f64>,
    pub dx: Vec<f64>,
}

impl DirectionTriple {
    pub fn zeros(dims: ProblemDims) -> Self {
        Self {
            dz: vec![0.0; dims.p],
            dv: vec![0.0; dims.p],
            dx: vec![0.0; dims.d],
        }
    }

    fn clear(&mut self) {
        for buf in [&mut self.dz, &mut self.dv, &mut self.dx] {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        linalg::max_abs_diff(&self.dz, &other.dz)
            .max(linalg::max_abs_diff(&self.dv, &other.dv))
            .max(linalg::max_abs_diff(&self.dx, &other.dx))
    }
}

/// A pair of block indices drawn independently and uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexDraw {
    pub i: usize,
    pub j: usize,
}

/// Uniform block sampler. Each draw takes the inner index first, then the
/// outer index, from the same stream.
#[derive(Debug, Clone)]
pub struct IndexSampler {
    rng: Rng,
    inner_blocks: usize,
    outer_blocks: usize,
}

impl IndexSampler {
    pub fn new(rng: Rng, inner_blocks: usize, outer_blocks: usize) -> Self {
        Self {
            rng,
            inner_blocks,
            outer_blocks,
        }
    }

    pub fn draw(&mut self) -> IndexDraw {
        let i = self.rng.random_range(0..self.inner_blocks);
        let j = self.rng.random_range(0..self.outer_blocks);
        IndexDraw { i, j }
    }

    /// Draws a single inner block index (two-loop baselines).
    pub fn draw_inner(&mut self) -> usize {
        self.rng.random_range(0..self.inner_blocks)
    }

    pub fn draw_outer(&mut self) -> usize {
        self.rng.random_range(0..self.outer_blocks)
    }
}

fn check_draw(draw: IndexDraw, inner: &Blocks, outer: &Blocks) -> Result<()> {
    if draw.i >= inner.count() {
        return Err(Error::IndexOutOfRange {
            index: draw.i,
            len: inner.count(),
        });
    }
    if draw.j >= outer.count() {
        return Err(Error::IndexOutOfRange {
            index: draw.j,
            len: outer.count(),
        });
    }
    Ok(())
}

/// Exact directions: full means over all samples.
pub fn full_directions<O: BilevelOracle + ?Sized>(state: &JointState, oracle: &O) -> Result<DirectionTriple> {
    let dims = oracle.dims();
    state.validate(dims)?;
    let mut out = DirectionTriple::zeros(dims);
    add_full_directions(state, oracle, &mut out);
    Ok(out)
}

pub(crate) fn add_full_directions<O: BilevelOracle + ?Sized>(
    state: &JointState,
    oracle: &O,
    out: &mut DirectionTriple,
) {
    let dims = oracle.dims();
    let full = BatchSpec::full(dims);
    add_block_g_terms(
        oracle,
        &full.inner_blocks(dims),
        0,
        &state.z,
        &state.x,
        &state.v,
        &mut out.dz,
        &mut out.dv,
        &mut out.dx,
    );
    add_block_f_terms(oracle, &full.outer_blocks(dims), 0, &state.z, &state.x, &mut out.dv, &mut out.dx);
}

/// Single-draw unbiased directions: inner block `draw.i` for every `G` term
/// and outer block `draw.j` for every `F` term, all at the same point.
pub fn soba_directions<O: BilevelOracle + ?Sized>(
    state: &JointState,
    draw: IndexDraw,
    oracle: &O,
    batch: BatchSpec,
) -> Result<DirectionTriple> {
    let dims = oracle.dims();
    state.validate(dims)?;
    batch.validate(dims)?;
    let inner = batch.inner_blocks(dims);
    let outer = batch.outer_blocks(dims);
    check_draw(draw, &inner, &outer)?;
    let mut out = DirectionTriple::zeros(dims);
    add_soba_directions(state, draw, oracle, &inner, &outer, &mut out);
    Ok(out)
}

pub(crate) fn add_soba_directions<O: BilevelOracle + ?Sized>(
    state: &JointState,
    draw: IndexDraw,
    oracle: &O,
    inner: &Blocks,
    outer: &Blocks,
    out: &mut DirectionTriple,
) {
    add_block_g_terms(
        oracle, inner, draw.i, &state.z, &state.x, &state.v, &mut out.dz, &mut out.dv, &mut out.dx,
    );
    add_block_f_terms(oracle, outer, draw.j, &state.z, &state.x, &mut out.dv, &mut out.dx);
}

/// Identifies one of the five memory tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table {
    /// `∇₁G`
    GGrad,
    /// `∇²₁₁G v`
    GHvp,
    /// `∇²₂₁G v`
    GCross,
    /// `∇₁F`
    FIn,
    /// `∇₂F`
    FOut,
}

impl Table {
    pub const ALL: [Table; 5] = [Table::GGrad, Table::GHvp, Table::GCross, Table::FIn, Table::FOut];
}

/// A flat table of `slots × width` floats and its running mean.
#[derive(Debug, Clone, PartialEq)]
struct MemoryTable {
    width: usize,
    slots: usize,
    data: Vec<f64>,
    mean: Vec<f64>,
}

impl MemoryTable {
    fn new(slots: usize, width: usize) -> Self {
        Self {
            width,
            slots,
            data: vec![0.0; slots * width],
            mean: vec![0.0; width],
        }
    }

    fn slot(&self, k: usize) -> &[f64] {
        &self.data[k * self.width..(k + 1) * self.width]
    }

    fn exact_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        let w = 1.0 / self.slots as f64;
        for k in 0..self.slots {
            linalg::axpy(w, self.slot(k), &mut out);
        }
        out
    }

    /// Writes `fresh` into slot `k` and returns the estimate
    /// `(fresh − stored_k) + mean`, then updates `mean += (fresh − stored_k) / slots`.
    fn swap_in(&mut self, k: usize, fresh: &[f64], estimate: &mut [f64]) {
        let slots = self.slots as f64;
        let stored = &mut self.data[k * self.width..(k + 1) * self.width];
        for c in 0..self.width {
            let delta = fresh[c] - stored[c];
            estimate[c] = delta + self.mean[c];
            self.mean[c] += delta / slots;
            stored[c] = fresh[c];
        }
    }
}

/// Stored per-block derivative evaluations for the SAGA-style estimator.
///
/// Five tables: `∇₁G`, `∇²₁₁G v`, `∇²₂₁G v` over the inner blocks and `∇₁F`,
/// `∇₂F` over the outer blocks, each with a running mean maintained in O(1)
/// per update.
#[derive(Debug, Clone, PartialEq)]
pub struct SabaMemory {
    dims: ProblemDims,
    batch: BatchSpec,
    initialized: bool,
    g_grad: MemoryTable,
    g_hvp: MemoryTable,
    g_cross: MemoryTable,
    f_in: MemoryTable,
    f_out: MemoryTable,
    scratch: DirectionTriple,
    scratch_f: (Vec<f64>, Vec<f64>),
}

/// Per-table maximum deviation between maintained and recomputed means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub per_table: [f64; 5],
}

impl DriftReport {
    pub fn max(&self) -> f64 {
        self.per_table.iter().copied().fold(0.0, f64::max)
    }
}

impl SabaMemory {
    /// Allocates the tables without evaluating anything; every use before
    /// [`SabaMemory::init_at`] or [`SabaMemory::init_zeros`] is an error.
    pub fn uninitialized(dims: ProblemDims, batch: BatchSpec) -> Result<Self> {
        batch.validate(dims)?;
        let nb = batch.inner_blocks(dims).count();
        let mb = batch.outer_blocks(dims).count();
        Ok(Self {
            dims,
            batch,
            initialized: false,
            g_grad: MemoryTable::new(nb, dims.p),
            g_hvp: MemoryTable::new(nb, dims.p),
            g_cross: MemoryTable::new(nb, dims.d),
            f_in: MemoryTable::new(mb, dims.p),
            f_out: MemoryTable::new(mb, dims.d),
            scratch: DirectionTriple::zeros(dims),
            scratch_f: (vec![0.0; dims.p], vec![0.0; dims.d]),
        })
    }

    /// Fills every slot with its block evaluated at `state`.
    pub fn init_at<O: BilevelOracle + ?Sized>(&mut self, state: &JointState, oracle: &O) -> Result<()> {
        state.validate(self.dims)?;
        let inner = self.batch.inner_blocks(self.dims);
        let outer = self.batch.outer_blocks(self.dims);
        for k in 0..inner.count() {
            self.scratch.clear();
            add_block_g_terms(
                oracle,
                &inner,
                k,
                &state.z,
                &state.x,
                &state.v,
                &mut self.scratch.dz,
                &mut self.scratch.dv,
                &mut self.scratch.dx,
            );
            self.g_grad.data[k * self.dims.p..(k + 1) * self.dims.p].copy_from_slice(&self.scratch.dz);
            self.g_hvp.data[k * self.dims.p..(k + 1) * self.dims.p].copy_from_slice(&self.scratch.dv);
            self.g_cross.data[k * self.dims.d..(k + 1) * self.dims.d].copy_from_slice(&self.scratch.dx);
        }
        for k in 0..outer.count() {
            let (fin, fout) = &mut self.scratch_f;
            fin.iter_mut().for_each(|v| *v = 0.0);
            fout.iter_mut().for_each(|v| *v = 0.0);
            add_block_f_terms(oracle, &outer, k, &state.z, &state.x, fin, fout);
            self.f_in.data[k * self.dims.p..(k + 1) * self.dims.p].copy_from_slice(fin);
            self.f_out.data[k * self.dims.d..(k + 1) * self.dims.d].copy_from_slice(fout);
        }
        self.initialized = true;
        self.recompute_averages(true);
        Ok(())
    }

    /// All-zero memory (ablation): the first visit to each slot then carries
    /// no correction.
    pub fn init_zeros(&mut self) {
        for t in self.tables_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
            t.mean.iter_mut().for_each(|v| *v = 0.0);
        }
        self.initialized = true;
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn batch(&self) -> BatchSpec {
        self.batch
    }

    pub fn inner_slots(&self) -> usize {
        self.g_grad.slots
    }

    pub fn outer_slots(&self) -> usize {
        self.f_in.slots
    }

    /// Stored floats: `n_b·p + (n_b + m_b)·(p + d)`.
    pub fn float_count(&self) -> usize {
        self.tables().iter().map(|t| t.data.len()).sum()
    }

    fn tables(&self) -> [&MemoryTable; 5] {
        [&self.g_grad, &self.g_hvp, &self.g_cross, &self.f_in, &self.f_out]
    }

    fn tables_mut(&mut self) -> [&mut MemoryTable; 5] {
        [
            &mut self.g_grad,
            &mut self.g_hvp,
            &mut self.g_cross,
            &mut self.f_in,
            &mut self.f_out,
        ]
    }

    fn table(&self, which: Table) -> &MemoryTable {
        match which {
            Table::GGrad => &self.g_grad,
            Table::GHvp => &self.g_hvp,
            Table::GCross => &self.g_cross,
            Table::FIn => &self.f_in,
            Table::FOut => &self.f_out,
        }
    }

    pub fn slot(&self, which: Table, k: usize) -> &[f64] {
        self.table(which).slot(k)
    }

    /// The maintained running mean of a table.
    pub fn average(&self, which: Table) -> &[f64] {
        &self.table(which).mean
    }

    /// Recomputes each table mean from scratch and reports the deviation of
    /// the maintained means; with `overwrite` the exact means replace them.
    pub fn recompute_averages(&mut self, overwrite: bool) -> DriftReport {
        let mut per_table = [0.0; 5];
        for (k, t) in self.tables_mut().into_iter().enumerate() {
            let exact = t.exact_mean();
            per_table[k] = linalg::max_abs_diff(&exact, &t.mean);
            if overwrite {
                t.mean = exact;
            }
        }
        DriftReport { per_table }
    }

    /// Per-step oracle cost of [`saba_directions`] with this memory.
    pub fn step_cost(&self, draw: IndexDraw) -> OracleCounts {
        let inner = self.batch.inner_blocks(self.dims).range(draw.i).len();
        let outer = self.batch.outer_blocks(self.dims).range(draw.j).len();
        OracleCounts::for_samples(inner, outer)
    }
}

/// Builds a memory evaluated at `state0`.
pub fn saba_init<O: BilevelOracle + ?Sized>(
    state0: &JointState,
    oracle: &O,
    batch: BatchSpec,
) -> Result<SabaMemory> {
    let mut memory = SabaMemory::uninitialized(oracle.dims(), batch)?;
    memory.init_at(state0, oracle)?;
    Ok(memory)
}

/// SAGA-style directions. For each table, with `φ_k` the fresh evaluation of
/// the drawn block at `state`, returns `φ_k − stored_k + mean` and stores
/// `φ_k` in slot `k`; the other slots are untouched.
pub fn saba_directions<O: BilevelOracle + ?Sized>(
    state: &JointState,
    draw: IndexDraw,
    memory: &mut SabaMemory,
    oracle: &O,
) -> Result<DirectionTriple> {
    let mut out = DirectionTriple::zeros(oracle.dims());
    saba_directions_into(state, draw, memory, oracle, &mut out)?;
    Ok(out)
}

pub(crate) fn saba_directions_into<O: BilevelOracle + ?Sized>(
    state: &JointState,
    draw: IndexDraw,
    memory: &mut SabaMemory,
    oracle: &O,
    out: &mut DirectionTriple,
) -> Result<()> {
    if !memory.initialized {
        return Err(Error::Uninitialized);
    }
    let dims = memory.dims;
    if oracle.dims() != dims {
        return Err(crate::error::invalid("memory was built for a different problem"));
    }
    let inner = memory.batch.inner_blocks(dims);
    let outer = memory.batch.outer_blocks(dims);
    check_draw(draw, &inner, &outer)?;

    let mut fresh = std::mem::take(&mut memory.scratch);
    let (mut fin, mut fout) = std::mem::take(&mut memory.scratch_f);
    fresh.clear();
    fin.iter_mut().for_each(|v| *v = 0.0);
    fout.iter_mut().for_each(|v| *v = 0.0);
    add_block_g_terms(
        oracle, &inner, draw.i, &state.z, &state.x, &state.v, &mut fresh.dz, &mut fresh.dv, &mut fresh.dx,
    );
    add_block_f_terms(oracle, &outer, draw.j, &state.z, &state.x, &mut fin, &mut fout);

    let mut est_in = vec![0.0; dims.p];
    let mut est_out = vec![0.0; dims.d];
    memory.g_grad.swap_in(draw.i, &fresh.dz, &mut out.dz);
    memory.g_hvp.swap_in(draw.i, &fresh.dv, &mut out.dv);
    memory.g_cross.swap_in(draw.i, &fresh.dx, &mut out.dx);
    memory.f_in.swap_in(draw.j, &fin, &mut est_in);
    memory.f_out.swap_in(draw.j, &fout, &mut est_out);
    linalg::axpy(1.0, &est_in, &mut out.dv);
    linalg::axpy(1.0, &est_out, &mut out.dx);

    memory.scratch = fresh;
    memory.scratch_f = (fin, fout);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_quadratic, QuadraticBilevel};
    use crate::rng::{stream, Stream};

    fn small() -> QuadraticBilevel {
        make_quadratic(11, ProblemDims::new(6, 6, 4, 3).unwrap(), 0.5).unwrap()
    }

    fn state(q: &QuadraticBilevel, seed: u64) -> JointState {
        let mut rng = stream(seed, Stream::Evaluation);
        let dims = q.dims();
        let mut g = |k: usize| -> Vec<f64> { (0..k).map(|_| crate::rng::normal(&mut rng)).collect() };
        JointState::new(g(dims.p), g(dims.p), g(dims.d), dims).unwrap()
    }

    #[test]
    fn zero_adjoint_leaves_only_outer_terms() {
        let q = small();
        let mut s = state(&q, 1);
        s.v = vec![0.0; 4];
        let dirs = full_directions(&s, &q).unwrap();
        use crate::oracle::{SampledOp, SampledOps};
        let fin = q.full_mean(SampledOp::GradFIn, &s.z, &s.x, &[]).unwrap();
        let fout = q.full_mean(SampledOp::GradFOut, &s.z, &s.x, &[]).unwrap();
        assert!(linalg::max_abs_diff(&dirs.dv, &fin) < 1e-14);
        assert!(linalg::max_abs_diff(&dirs.dx, &fout) < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let q = small();
        let mut s = state(&q, 1);
        s.x.push(0.0);
        assert!(matches!(full_directions(&s, &q), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn out_of_range_draw_is_rejected() {
        let q = small();
        let s = state(&q, 1);
        let err = soba_directions(&s, IndexDraw { i: 6, j: 0 }, &q, BatchSpec::single());
        assert!(matches!(err, Err(Error::IndexOutOfRange { .. })));
        let mut mem = saba_init(&s, &q, BatchSpec::single()).unwrap();
        let err = saba_directions(&s, IndexDraw { i: 0, j: 9 }, &mut mem, &q);
        assert!(matches!(err, Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn uninitialized_memory_is_a_state_error() {
        let q = small();
        let s = state(&q, 2);
        let mut mem = SabaMemory::uninitialized(q.dims(), BatchSpec::single()).unwrap();
        assert!(matches!(
            saba_directions(&s, IndexDraw { i: 0, j: 0 }, &mut mem, &q),
            Err(Error::Uninitialized)
        ));
    }

    #[test]
    fn init_collapses_to_full_directions() {
        let q = small();
        let s = state(&q, 3);
        let full = full_directions(&s, &q).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut mem = saba_init(&s, &q, BatchSpec::single()).unwrap();
                let d = saba_directions(&s, IndexDraw { i, j }, &mut mem, &q).unwrap();
                assert!(d.max_abs_diff(&full) < 1e-12);
            }
        }
        let mem = saba_init(&s, &q, BatchSpec::single()).unwrap();
        assert!(linalg::max_abs_diff(mem.average(Table::GGrad), &full.dz) < 1e-12);
        assert_eq!(mem.clone().recompute_averages(false).max(), 0.0);
    }

    #[test]
    fn memory_float_count_matches_accounting() {
        let q = make_quadratic(0, ProblemDims::new(10, 7, 4, 3).unwrap(), 0.5).unwrap();
        let batch = BatchSpec::new(3, 2, q.dims()).unwrap();
        let mem = saba_init(&JointState::zeros(q.dims()), &q, batch).unwrap();
        let (nb, mb, p, d) = (4, 4, 4, 3);
        assert_eq!(mem.inner_slots(), nb);
        assert_eq!(mem.outer_slots(), mb);
        assert_eq!(mem.float_count(), nb * p + (nb + mb) * (p + d));
    }

    #[test]
    fn step_touches_one_slot_per_table() {
        let q = small();
        let s0 = state(&q, 4);
        let s1 = state(&q, 5);
        let mut mem = saba_init(&s0, &q, BatchSpec::single()).unwrap();
        let before = mem.clone();
        let draw = IndexDraw { i: 2, j: 4 };
        saba_directions(&s1, draw, &mut mem, &q).unwrap();
        for table in Table::ALL {
            let (slots, hit) = match table {
                Table::GGrad | Table::GHvp | Table::GCross => (6, draw.i),
                Table::FIn | Table::FOut => (6, draw.j),
            };
            for k in 0..slots {
                let same = mem.slot(table, k) == before.slot(table, k);
                assert_eq!(same, k != hit, "{table:?} slot {k}");
            }
        }
    }

    #[test]
    fn zero_init_is_supported() {
        let q = small();
        let s = state(&q, 6);
        let mut mem = SabaMemory::uninitialized(q.dims(), BatchSpec::single()).unwrap();
        mem.init_zeros();
        let d = saba_directions(&s, IndexDraw { i: 1, j: 1 }, &mut mem, &q).unwrap();
        assert!(d.dz.iter().all(|v| v.is_finite()));
        assert_eq!(mem.recompute_averages(false).max() < 1e-15, true);
    }

    #[test]
    fn sampler_is_reproducible() {
        let mut a = IndexSampler::new(stream(3, Stream::Indices), 5, 7);
        let mut b = IndexSampler::new(stream(3, Stream::Indices), 5, 7);
        for _ in 0..100 {
            let d = a.draw();
            assert_eq!(d, b.draw());
            assert!(d.i < 5 && d.j < 7);
        }
    }
}
