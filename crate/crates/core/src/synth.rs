//! Synthetic inputs with known structure: planted low-rank matrices and
//! model-free activation dumps.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dump::{DumpManifest, DumpWriter, SampleDump};
use crate::error::{Error, Result};
use crate::repr::ReprMatrix;
use crate::svd::mul_tall;

/// `X = G1 diag(spectrum) G2^T + noise_sigma * E + 1 mean_offset^T` with
/// orthonormal `G1` (`n x r`), `G2` (`d x r`) and i.i.d. standard normal `E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n: usize,
    pub d: usize,
    pub true_rank: usize,
    pub spectrum: Vec<f64>,
    pub noise_sigma: f64,
    /// Added to every row; empty means zero.
    #[serde(default)]
    pub mean_offset: Vec<f64>,
    pub seed: u64,
}

impl PlantedSpec {
    /// Planted matrix whose noise holds roughly `residual_fraction` of the total energy.
    pub fn with_residual_fraction(n: usize, d: usize, spectrum: Vec<f64>, residual_fraction: f64, seed: u64) -> Self {
        let noise_sigma = noise_sigma_for_residual(&spectrum, n, d, residual_fraction);
        Self {
            n,
            d,
            true_rank: spectrum.len(),
            spectrum,
            noise_sigma,
            mean_offset: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::config("planted matrix needs n >= 1 and d >= 1"));
        }
        if self.true_rank == 0 || self.true_rank > self.n.min(self.d) {
            return Err(Error::config(format!(
                "true_rank {} must lie in 1..=min(n, d) = {}",
                self.true_rank,
                self.n.min(self.d)
            )));
        }
        if self.spectrum.len() != self.true_rank {
            return Err(Error::config(format!(
                "spectrum has {} values for true_rank {}",
                self.spectrum.len(),
                self.true_rank
            )));
        }
        if self.spectrum.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.spectrum.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::config("spectrum must be positive and nonincreasing"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be finite and nonnegative"));
        }
        if !self.mean_offset.is_empty() && self.mean_offset.len() != self.d {
            return Err(Error::config(format!(
                "mean_offset has {} entries, expected d = {}",
                self.mean_offset.len(),
                self.d
            )));
        }
        Ok(())
    }
}

/// Noise level at which i.i.d. noise carries `fraction` of the total energy
/// in expectation.
pub fn noise_sigma_for_residual(spectrum: &[f64], n: usize, d: usize, fraction: f64) -> f64 {
    let signal: f64 = spectrum.iter().map(|s| s * s).sum();
    (fraction / (1.0 - fraction) * signal / (n * d) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct PlantedMatrix {
    pub matrix: ReprMatrix,
    /// `n x r` orthonormal basis of the planted column space.
    pub left_basis: DMatrix<f64>,
    /// `d x r` orthonormal basis of the planted row space.
    pub right_basis: DMatrix<f64>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn gen_planted_matrix(spec: &PlantedSpec) -> Result<PlantedMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let left_basis = nalgebra::QR::new(gaussian(spec.n, spec.true_rank, &mut rng)).q();
    let right_basis = nalgebra::QR::new(gaussian(spec.d, spec.true_rank, &mut rng)).q();
    let scaled = &left_basis * DMatrix::from_diagonal(&DVector::from_column_slice(&spec.spectrum));
    let mut data = mul_tall(&scaled, &right_basis.transpose());
    if spec.noise_sigma > 0.0 {
        for x in data.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x += spec.noise_sigma * e;
        }
    }
    if !spec.mean_offset.is_empty() {
        for (mut col, &m) in data.column_iter_mut().zip(&spec.mean_offset) {
            col.add_scalar_mut(m);
        }
    }
    let ids = (0..spec.n).map(|i| format!("p{i:07}")).collect();
    Ok(PlantedMatrix {
        matrix: ReprMatrix::new(ids, data)?,
        left_basis,
        right_basis,
    })
}

/// Parameters of a synthetic activation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDumpSpec {
    pub num_samples: usize,
    /// Inclusive range of visual-token counts.
    pub n_v: (usize, usize),
    /// Inclusive range of instruction-token counts.
    pub n_u: (usize, usize),
    pub hidden_dim: usize,
    /// Dimension of the Gaussian latent behind the hidden states.
    pub latent_rank: usize,
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for SynthDumpSpec {
    fn default() -> Self {
        Self {
            num_samples: 100,
            n_v: (8, 64),
            n_u: (1, 16),
            hidden_dim: 32,
            latent_rank: 6,
            shard_size: 1000,
            seed: 0,
        }
    }
}

impl SynthDumpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be at least 1"));
        }
        if self.n_v.0 == 0 || self.n_v.0 > self.n_v.1 {
            return Err(Error::config(format!("bad n_v range {:?}", self.n_v)));
        }
        if self.n_u.0 == 0 || self.n_u.0 > self.n_u.1 {
            return Err(Error::config(format!("bad n_u range {:?}", self.n_u)));
        }
        if self.hidden_dim == 0 || self.latent_rank == 0 {
            return Err(Error::config("hidden_dim and latent_rank must be positive"));
        }
        if self.shard_size == 0 {
            return Err(Error::config("shard_size must be at least 1"));
        }
        Ok(())
    }
}

/// Draws one synthetic sample.
///
/// Each visual token gets a heavy-tailed salience shared by all instruction
/// rows; each row multiplies it by per-entry jitter, normalizes to 1, then
/// scales by a factor in `[0.3, 1)` standing in for the attention mass
/// spent on non-visual tokens. Hidden states are Gaussian around a
/// per-sample point of a shared low-dimensional latent space.
fn synth_sample(id: String, spec: &SynthDumpSpec, latent_basis: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> SampleDump {
    let n_v = rng.random_range(spec.n_v.0..=spec.n_v.1);
    let n_u = rng.random_range(spec.n_u.0..=spec.n_u.1);
    let d = spec.hidden_dim;

    let salience: Vec<f64> = (0..n_v)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            e * e + 1e-3
        })
        .collect();
    let mut attn = Vec::with_capacity(n_u * n_v);
    for _ in 0..n_u {
        let row: Vec<f64> = salience
            .iter()
            .map(|s| {
                let jitter: f64 = Exp1.sample(rng);
                s * (0.5 + jitter)
            })
            .collect();
        let total: f64 = row.iter().sum();
        let visual_share = rng.random_range(0.3..1.0);
        attn.extend(row.iter().map(|x| (x / total * visual_share) as f32));
    }

    let center: Vec<f64> = (0..spec.latent_rank).map(|_| StandardNormal.sample(rng)).collect();
    let mut hidden = Vec::with_capacity(n_v * d);
    for _ in 0..n_v {
        let z: Vec<f64> = center
            .iter()
            .map(|c| {
                let e: f64 = StandardNormal.sample(rng);
                c + 0.5 * e
            })
            .collect();
        for col in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            let signal: f64 = (0..spec.latent_rank).map(|r| z[r] * latent_basis[(r, col)]).sum();
            hidden.push((signal + 0.3 * e) as f32);
        }
    }
    SampleDump::new(id, n_u, n_v, d, attn, hidden).expect("shapes match by construction")
}

pub fn gen_synthetic_dump(spec: &SynthDumpSpec, dir: impl AsRef<Path>) -> Result<DumpManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent_basis = gaussian(spec.latent_rank, spec.hidden_dim, &mut rng);
    let producer = format!("subsel synth seed={}", spec.seed);
    let mut writer = DumpWriter::create(dir, spec.shard_size, producer)?;
    for i in 0..spec.num_samples {
        let sample = synth_sample(format!("sample-{i:06}"), spec, &latent_basis, &mut rng);
        writer.push(&sample)?;
    }
    writer.finish()
}
