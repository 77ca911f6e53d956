//! Dense and randomized truncated SVD, and rank selection by spectral energy.
//!
//! The randomized path is a Gaussian range finder with subspace (power)
//! iteration. Large products are split into fixed 4096-row blocks so that
//! results do not depend on the number of worker threads: each output entry
//! is reduced in the same order no matter how blocks are scheduled, and
//! partial sums over blocks are combined sequentially.

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `rows * cols` accepted by [`dense_svd`].
pub const DENSE_GUARD: usize = 100_000_000;

pub const DEFAULT_ENERGY_THRESHOLD: f64 = 0.9;
pub const DEFAULT_OVERSAMPLING: usize = 10;
pub const DEFAULT_POWER_ITERS: usize = 2;
pub const DEFAULT_START_RANK: usize = 16;

const ROW_BLOCK: usize = 4096;

#[derive(Debug, Clone)]
pub struct DenseSvd {
    /// All `min(rows, cols)` singular values, nonincreasing.
    pub singular_values: Vec<f64>,
    /// `rows x min(rows, cols)` left singular vectors.
    pub u: DMatrix<f64>,
    /// `min(rows, cols) x cols` right singular vectors, transposed.
    pub v_t: DMatrix<f64>,
}

fn check_finite(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::EmptyInput("matrix has no entries"));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Thin SVD with singular triplets sorted by descending singular value.
fn sorted_svd(a: DMatrix<f64>) -> Result<DenseSvd> {
    let svd = SVD::try_new(a, true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::InvalidInput("SVD failed to converge".into()))?;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));
    let singular_values = order.iter().map(|&i| sv[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    Ok(DenseSvd {
        singular_values,
        u,
        v_t,
    })
}

/// Exact thin SVD, guarded to `rows * cols <= DENSE_GUARD`.
pub fn dense_svd(a: &DMatrix<f64>) -> Result<DenseSvd> {
    check_finite(a)?;
    if a.nrows().saturating_mul(a.ncols()) > DENSE_GUARD {
        return Err(Error::TooLarge {
            rows: a.nrows(),
            cols: a.ncols(),
            limit: DENSE_GUARD,
        });
    }
    sorted_svd(a.clone())
}

/// Singular values from the eigenvalues of `A^T A`. Loses half the digits of
/// the small singular values; only suitable as a cross-check.
pub fn gram_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let gram = a.tr_mul(a);
    let eig = SymmetricEigen::new(gram);
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.truncate(a.nrows().min(a.ncols()));
    sv
}

fn row_blocks(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(ROW_BLOCK)
        .map(|start| (start, ROW_BLOCK.min(n - start)))
        .collect()
}

/// `a * b` for tall `a`, computed block-row by block-row.
pub fn mul_tall(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    let blocks = row_blocks(a.nrows());
    if blocks.len() <= 1 {
        return a * b;
    }
    let parts: Vec<DMatrix<f64>> = blocks
        .par_iter()
        .map(|&(start, len)| a.rows(start, len) * b)
        .collect();
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    for (&(start, len), part) in blocks.iter().zip(parts) {
        out.rows_mut(start, len).copy_from(&part);
    }
    out
}

/// `a^T * b` for tall `a` and `b` with equal row counts. Block partial sums
/// are added in block order.
pub fn tr_mul_tall(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "row counts differ");
    let blocks = row_blocks(a.nrows());
    if blocks.len() <= 1 {
        return a.tr_mul(b);
    }
    let parts: Vec<DMatrix<f64>> = blocks
        .par_iter()
        .map(|&(start, len)| a.rows(start, len).tr_mul(&b.rows(start, len)))
        .collect();
    let mut parts = parts.into_iter();
    let mut acc = parts.next().expect("at least one block");
    for part in parts {
        acc += part;
    }
    acc
}

fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    nalgebra::QR::new(y).q()
}

/// Sum of squared entries, i.e. the total spectral energy.
pub fn frobenius_sq(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomizedParams {
    pub oversampling: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for RandomizedParams {
    fn default() -> Self {
        Self {
            oversampling: DEFAULT_OVERSAMPLING,
            power_iters: DEFAULT_POWER_ITERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Leading `target_rank` singular values, nonincreasing.
    pub singular_values: Vec<f64>,
    /// `rows x target_rank`, orthonormal columns.
    pub u: DMatrix<f64>,
}

pub fn randomized_truncated_svd(
    a: &DMatrix<f64>,
    target_rank: usize,
    params: RandomizedParams,
) -> Result<TruncatedSvd> {
    check_finite(a)?;
    let min_dim = a.nrows().min(a.ncols());
    let width = target_rank + params.oversampling;
    if target_rank == 0 || width > min_dim {
        return Err(Error::config(format!(
            "target rank {target_rank} plus oversampling {} must be between 1 and min(rows, cols) = {min_dim}",
            params.oversampling
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let omega = DMatrix::from_fn(a.ncols(), width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(mul_tall(a, &omega));
    for _ in 0..params.power_iters {
        let z = orthonormalize(tr_mul_tall(a, &q));
        q = orthonormalize(mul_tall(a, &z));
    }
    // B = Q^T A is width x cols; its SVD gives the leading triplets of A
    let b = tr_mul_tall(&q, a);
    let small = sorted_svd(b)?;
    let u_b = small.u.columns(0, target_rank).into_owned();
    let u = mul_tall(&q, &u_b);
    Ok(TruncatedSvd {
        singular_values: small.singular_values[..target_rank].to_vec(),
        u,
    })
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!(
            "energy threshold must lie in (0, 1], got {threshold}"
        )));
    }
    Ok(())
}

fn check_spectrum(singular_values: &[f64]) -> Result<()> {
    if singular_values.is_empty() {
        return Err(Error::DegenerateSpectrum);
    }
    if singular_values.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidInput(
            "singular values must be finite and nonnegative".into(),
        ));
    }
    if singular_values.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidInput(
            "singular values must be nonincreasing".into(),
        ));
    }
    Ok(())
}

/// Smallest `k` whose leading `k` squared singular values reach
/// `threshold * total_energy`, or `None` if the given values fall short.
pub fn energy_rank_partial(singular_values: &[f64], total_energy: f64, threshold: f64) -> Option<usize> {
    let target = threshold * total_energy;
    let mut cumulative = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        cumulative += s * s;
        if cumulative >= target {
            return Some(i + 1);
        }
    }
    None
}

/// Smallest `k` with `sum_{j<=k} s_j^2 >= threshold * sum_j s_j^2` over a full spectrum.
pub fn energy_rank(singular_values: &[f64], threshold: f64) -> Result<usize> {
    check_threshold(threshold)?;
    check_spectrum(singular_values)?;
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    // the full cumulative sum equals `total` bit for bit, so this always hits
    Ok(energy_rank_partial(singular_values, total, threshold).unwrap_or(singular_values.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvdMethod {
    #[default]
    Randomized,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceOptions {
    pub energy_threshold: f64,
    pub method: SvdMethod,
    pub oversampling: usize,
    pub power_iters: usize,
    /// First target rank tried by the randomized path; doubled until the
    /// captured components hold enough energy.
    pub start_rank: usize,
    pub seed: u64,
}

impl Default for SubspaceOptions {
    fn default() -> Self {
        Self {
            energy_threshold: DEFAULT_ENERGY_THRESHOLD,
            method: SvdMethod::Randomized,
            oversampling: DEFAULT_OVERSAMPLING,
            power_iters: DEFAULT_POWER_ITERS,
            start_rank: DEFAULT_START_RANK,
            seed: 0,
        }
    }
}

/// Leading singular subspace chosen by the energy rule.
#[derive(Debug, Clone)]
pub struct SubspaceModel {
    pub k: usize,
    /// Every singular value that was computed, nonincreasing; at least `k` long.
    pub singular_values: Vec<f64>,
    /// `rows x k`, orthonormal columns.
    pub u_k: DMatrix<f64>,
    pub energy_ratio: f64,
    pub energy_threshold: f64,
    pub total_energy: f64,
    /// Whether `singular_values` is the complete spectrum.
    pub full_spectrum: bool,
}

fn model(
    k: usize,
    singular_values: Vec<f64>,
    u: &DMatrix<f64>,
    total_energy: f64,
    energy_threshold: f64,
    full_spectrum: bool,
) -> SubspaceModel {
    let captured: f64 = singular_values[..k].iter().map(|s| s * s).sum();
    SubspaceModel {
        k,
        u_k: u.columns(0, k).into_owned(),
        energy_ratio: (captured / total_energy).min(1.0),
        singular_values,
        energy_threshold,
        total_energy,
        full_spectrum,
    }
}

/// Computes the energy-selected subspace of `a`.
///
/// The randomized path needs only the leading components: the total energy
/// is the squared Frobenius norm, so the energy rule can be applied as soon
/// as enough leading components have been captured.
pub fn fit_subspace(a: &DMatrix<f64>, opts: &SubspaceOptions) -> Result<SubspaceModel> {
    check_threshold(opts.energy_threshold)?;
    check_finite(a)?;
    match opts.method {
        SvdMethod::Dense => {
            let svd = dense_svd(a)?;
            let k = energy_rank(&svd.singular_values, opts.energy_threshold)?;
            let total = svd.singular_values.iter().map(|s| s * s).sum();
            Ok(model(k, svd.singular_values, &svd.u, total, opts.energy_threshold, true))
        }
        SvdMethod::Randomized => {
            let total = frobenius_sq(a);
            if total == 0.0 {
                return Err(Error::DegenerateSpectrum);
            }
            let min_dim = a.nrows().min(a.ncols());
            let mut target = opts.start_rank.clamp(1, min_dim);
            loop {
                let params = RandomizedParams {
                    oversampling: opts.oversampling.min(min_dim - target),
                    power_iters: opts.power_iters,
                    seed: opts.seed,
                };
                let t = randomized_truncated_svd(a, target, params)?;
                let full = target == min_dim;
                let found = energy_rank_partial(&t.singular_values, total, opts.energy_threshold);
                if found.is_some() || full {
                    // at full width the captured energy equals the total up to rounding
                    let k = found.unwrap_or(target);
                    log::debug!("energy rank {k} found with target rank {target}");
                    return Ok(model(k, t.singular_values, &t.u, total, opts.energy_threshold, full));
                }
                target = (target * 2).min(min_dim);
            }
        }
    }
}

/// `max |U^T U - I|`.
pub fn orthonormality_error(u: &DMatrix<f64>) -> f64 {
    let gram = tr_mul_tall(u, u);
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}
