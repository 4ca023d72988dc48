//! Truncated Neumann-series approximations of `[∇²₁₁G]⁻¹ g`, used by the
//! two-loop baselines.

use rand::Rng as _;

use crate::error::{check_len, invalid, Result};
use crate::linalg;
use crate::oracle::{BatchSpec, BilevelOracle, Blocks};
use crate::rng::{self, Rng, Stream};

/// `η Σ_{k=0}^{b} v^k` with `v⁰ = g` and `v^{k+1} = v^k − η H_k v^k`, where
/// each call of `hvp` applies one (possibly sampled) Hessian `H_k`,
/// accumulating into a zeroed output.
pub fn shia_operator(mut hvp: impl FnMut(&[f64], &mut [f64]), g: &[f64], b: usize, eta: f64) -> Vec<f64> {
    let mut v = g.to_vec();
    let mut s = g.to_vec();
    let mut hv = vec![0.0; g.len()];
    for _ in 0..b {
        hv.iter_mut().for_each(|h| *h = 0.0);
        hvp(&v, &mut hv);
        linalg::axpy(-eta, &hv, &mut v);
        linalg::axpy(1.0, &v, &mut s);
    }
    linalg::scale(eta, &mut s);
    s
}

/// Uniform truncation level in `0..b`.
pub fn draw_truncation(rng: &mut Rng, b: usize) -> usize {
    assert!(b >= 1, "HIA needs at least one term");
    rng.random_range(0..b)
}

/// Applies `p` factors `(I − η H_k)` to `g` and returns `b·η·v^p`. With `p`
/// from [`draw_truncation`] the expectation is `η Σ_{k<b} (I − ηH)^k g`.
pub fn hia_operator(mut hvp: impl FnMut(&[f64], &mut [f64]), g: &[f64], b: usize, p: usize, eta: f64) -> Vec<f64> {
    let mut v = g.to_vec();
    let mut hv = vec![0.0; g.len()];
    for _ in 0..p {
        hv.iter_mut().for_each(|h| *h = 0.0);
        hvp(&v, &mut hv);
        linalg::axpy(-eta, &hv, &mut v);
    }
    linalg::scale(b as f64 * eta, &mut v);
    v
}

/// Applies the Hessian of one uniformly drawn inner block at `(z, x)`.
pub(crate) fn sampled_hvp<'a, O: BilevelOracle + ?Sized>(
    oracle: &'a O,
    blocks: Blocks,
    z: &'a [f64],
    x: &'a [f64],
    rng: &'a mut Rng,
    samples: &'a mut u64,
) -> impl FnMut(&[f64], &mut [f64]) + 'a {
    move |v, out| {
        let k = rng.random_range(0..blocks.count());
        let range = blocks.range(k);
        *samples += range.len() as u64;
        let scale = blocks.weight(k) / range.len() as f64;
        for i in range {
            oracle.add_hvp_g(i, z, x, v, scale, out);
        }
    }
}

fn check_inputs<O: BilevelOracle + ?Sized>(oracle: &O, z: &[f64], x: &[f64], g: &[f64], eta: f64) -> Result<()> {
    let dims = oracle.dims();
    check_len("z", z, dims.p)?;
    check_len("x", x, dims.d)?;
    check_len("g", g, dims.p)?;
    if !(eta > 0.0) {
        return Err(invalid("eta must be positive"));
    }
    Ok(())
}

/// SHIA on the inner Hessian at `(z, x)`, one block of `batch` samples per
/// factor (the full Hessian when `batch` spans all samples).
pub fn shia<O: BilevelOracle + ?Sized>(
    oracle: &O,
    z: &[f64],
    x: &[f64],
    g: &[f64],
    b: usize,
    eta: f64,
    batch: BatchSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    check_inputs(oracle, z, x, g, eta)?;
    batch.validate(oracle.dims())?;
    let mut rng = rng::stream(seed, Stream::Neumann);
    let mut samples = 0;
    let hvp = sampled_hvp(oracle, batch.inner_blocks(oracle.dims()), z, x, &mut rng, &mut samples);
    Ok(shia_operator(hvp, g, b, eta))
}

/// HIA on the inner Hessian at `(z, x)`; the truncation and the sampled
/// blocks both come from the `seed` stream.
pub fn hia<O: BilevelOracle + ?Sized>(
    oracle: &O,
    z: &[f64],
    x: &[f64],
    g: &[f64],
    b: usize,
    eta: f64,
    batch: BatchSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    check_inputs(oracle, z, x, g, eta)?;
    batch.validate(oracle.dims())?;
    if b == 0 {
        return Err(invalid("HIA needs b ≥ 1"));
    }
    let mut rng = rng::stream(seed, Stream::Neumann);
    let p = draw_truncation(&mut rng, b);
    let mut samples = 0;
    let hvp = sampled_hvp(oracle, batch.inner_blocks(oracle.dims()), z, x, &mut rng, &mut samples);
    Ok(hia_operator(hvp, g, b, p, eta))
}
