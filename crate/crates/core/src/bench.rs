//! Verification and timing harnesses: the relative-error subspace check for
//! leverage-based selection, wall-clock scaling of the selection stage, and
//! the attention-mass threshold sweep.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::build_matrix;
use crate::select::{
    center_columns, leverage_scores, projection_error, run_selection, sample_leverage, select_top, SelectConfig,
    SelectionMode,
};
use crate::svd::dense_svd;
use crate::synth::{gen_planted_matrix, PlantedSpec};

/// Numerators below this share of `||X_c||_F` count as an exact fit.
const EXACT_FIT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CxBoundReport {
    pub mode: SelectionMode,
    pub trials: usize,
    pub passes: usize,
    pub pass_rate: f64,
    pub epsilon: f64,
    pub rank: usize,
    pub budget: usize,
    /// `||X_c - P_S X_c||_F / ||X_c - X_k||_F` per trial.
    pub ratios: Vec<f64>,
}

impl CxBoundReport {
    pub fn to_text(&self) -> String {
        let max = self.ratios.iter().cloned().fold(f64::NAN, f64::max);
        let mean = self.ratios.iter().sum::<f64>() / self.ratios.len() as f64;
        format!(
            "mode       {}\nrank       {}\nbudget     {}\nepsilon    {}\ntrials     {}\npasses     {}\npass_rate  {:.4}\nratio      mean {:.6}  max {:.6}  bound {:.6}\n",
            self.mode, self.rank, self.budget, self.epsilon, self.trials, self.passes, self.pass_rate, mean, max,
            1.0 + self.epsilon
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,ratio,pass\n");
        for (t, r) in self.ratios.iter().enumerate() {
            out.push_str(&format!("{t},{r},{}\n", *r <= 1.0 + self.epsilon));
        }
        out
    }
}

/// Ratio of the residual after projecting onto the selected rows to the
/// best rank-`k` residual. Exact fits report 0.
pub fn residual_ratio(selected_error: f64, best_error: f64, scale: f64) -> f64 {
    if selected_error <= EXACT_FIT_TOL * scale {
        0.0
    } else if best_error == 0.0 {
        f64::INFINITY
    } else {
        selected_error / best_error
    }
}

/// Runs `trials` seeded trials of selecting rows from a planted matrix and
/// compares the selected rows' projection residual with the best rank-`k`
/// residual, `k` being the planted rank. Trial `t` uses planted seed
/// `spec.seed + t` and selection seed `cfg.seed + t`.
pub fn cx_bound_trial(spec: &PlantedSpec, cfg: &SelectConfig, trials: usize) -> Result<CxBoundReport> {
    cfg.validate()?;
    spec.validate()?;
    if trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    let k = spec.true_rank;
    let budget = cfg.budget.resolve(spec.n, k, cfg.epsilon)?;
    let ratios: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let trial_spec = PlantedSpec { seed: spec.seed.wrapping_add(t), ..spec.clone() };
            let planted = gen_planted_matrix(&trial_spec)?;
            let x_c = if cfg.center {
                center_columns(&planted.matrix.data)?.0
            } else {
                planted.matrix.data
            };
            let svd = dense_svd(&x_c)?;
            let best: f64 = svd.singular_values[k.min(svd.singular_values.len())..]
                .iter()
                .map(|s| s * s)
                .sum::<f64>()
                .sqrt();
            let scores = leverage_scores(&svd.u.columns(0, k).into_owned())?;
            let ids = &planted.matrix.ids;
            let selection = match cfg.mode {
                SelectionMode::TopLeverage => select_top(&scores, ids, budget)?,
                SelectionMode::LeverageSample => sample_leverage(&scores, ids, budget, cfg.seed.wrapping_add(t))?,
            };
            let err = projection_error(&x_c, &selection.selected)?;
            Ok(residual_ratio(err, best, x_c.norm()))
        })
        .collect::<Result<_>>()?;
    let passes = ratios.iter().filter(|&&r| r <= 1.0 + cfg.epsilon).count();
    Ok(CxBoundReport {
        mode: cfg.mode,
        trials,
        passes,
        pass_rate: passes as f64 / trials as f64,
        epsilon: cfg.epsilon,
        rank: k,
        budget,
        ratios,
    })
}

/// Projection residuals of `trials` uniformly random row subsets of size `size`.
pub fn uniform_subset_errors(x_c: &nalgebra::DMatrix<f64>, size: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    if size == 0 || size > x_c.nrows() {
        return Err(Error::config(format!("subset size {size} out of range")));
    }
    (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
            let rows = index::sample(&mut rng, x_c.nrows(), size).into_vec();
            projection_error(x_c, &rows)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub k_used: usize,
    pub median_secs: f64,
    pub times_secs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub d: usize,
    pub repetitions: usize,
    pub workers: usize,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln(time)` against `ln(n)`; needs two or more sizes.
    pub slope: Option<f64>,
}

impl ScalingReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:>10}  {:>6}  {:>12}\n", "n", "k_used", "median_s");
        for r in &self.rows {
            out.push_str(&format!("{:>10}  {:>6}  {:>12.6}\n", r.n, r.k_used, r.median_secs));
        }
        match self.slope {
            Some(s) => out.push_str(&format!("log-log slope {s:.4} (d = {}, workers = {})\n", self.d, self.workers)),
            None => out.push_str(&format!("log-log slope undefined (d = {}, workers = {})\n", self.d, self.workers)),
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,k_used,median_secs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.n, r.k_used, r.median_secs));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Rank-8 planted matrix with 5% residual noise energy used for timing.
pub fn scaling_spec(n: usize, d: usize, seed: u64) -> PlantedSpec {
    let spectrum: Vec<f64> = (0..8).map(|j| 100.0 * 0.85f64.powi(j)).collect();
    PlantedSpec::with_residual_fraction(n, d, spectrum, 0.05, seed)
}

/// Times `run_selection` (selection stage only, matrix already in memory)
/// on planted matrices of each size, reporting the median of `repetitions`
/// runs after one untimed warm-up.
pub fn scaling_bench(sizes: &[usize], d: usize, repetitions: usize, cfg: &SelectConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("sizes must be nonempty and strictly ascending"));
    }
    if repetitions == 0 {
        return Err(Error::config("repetitions must be at least 1"));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let spec = scaling_spec(n, d, cfg.seed);
        let x = gen_planted_matrix(&spec)?.matrix;
        let warm = run_selection(&x, cfg)?;
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            let r = run_selection(&x, cfg)?;
            times.push(start.elapsed().as_secs_f64());
            debug_assert_eq!(r.selected, warm.selected);
        }
        log::info!("n = {n}: median {:.4}s", median(&times));
        rows.push(ScalingRow {
            n,
            k_used: warm.k_used,
            median_secs: median(&times),
            times_secs: times,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_secs.ln()).collect();
    Ok(ScalingReport {
        d,
        repetitions,
        workers: rayon::current_num_threads(),
        slope: fit_slope(&xs, &ys),
        rows,
    })
}

pub const REFERENCE_TAU: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub mean_retained_ratio: f64,
    pub k_used: usize,
    pub num_samples: usize,
    pub num_selected: usize,
    /// Jaccard overlap of the selected ids with the reference-tau run.
    pub jaccard_vs_reference: f64,
    /// `(selected tokens, n_v)` per kept sample.
    #[serde(skip)]
    pub token_counts: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSweepReport {
    pub reference_tau: f64,
    pub rows: Vec<TauRow>,
}

impl TauSweepReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>6}  {:>14}  {:>6}  {:>9}  {:>9}  {:>8}\n",
            "tau", "retained_ratio", "k_used", "samples", "selected", "jaccard"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6.3}  {:>14.4}  {:>6}  {:>9}  {:>9}  {:>8.4}\n",
                r.tau, r.mean_retained_ratio, r.k_used, r.num_samples, r.num_selected, r.jaccard_vs_reference
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,mean_retained_ratio,k_used,num_samples,num_selected,jaccard_vs_reference\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.tau, r.mean_retained_ratio, r.k_used, r.num_samples, r.num_selected, r.jaccard_vs_reference
            ));
        }
        out
    }
}

pub fn jaccard(a: &[String], b: &[String]) -> f64 {
    let a: HashSet<&String> = a.iter().collect();
    let b: HashSet<&String> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Rebuilds representations and reruns selection for each `tau`, comparing
/// the selected ids against a run at [`REFERENCE_TAU`]. `cfg.tau` is ignored.
pub fn tau_sweep(dump_dir: impl AsRef<Path>, taus: &[f64], cfg: &SelectConfig) -> Result<TauSweepReport> {
    let dump_dir = dump_dir.as_ref();
    if taus.is_empty() {
        return Err(Error::config("no tau values given"));
    }
    let run = |tau: f64| -> Result<(TauRow, Vec<String>)> {
        let cfg = SelectConfig { tau, ..cfg.clone() };
        cfg.validate()?;
        let built = build_matrix(dump_dir, tau)?;
        let selection = run_selection(&built.matrix, &cfg)?;
        let row = TauRow {
            tau,
            mean_retained_ratio: built.mean_retained_ratio(),
            k_used: selection.k_used,
            num_samples: built.matrix.nrows(),
            num_selected: selection.selected.len(),
            jaccard_vs_reference: f64::NAN,
            token_counts: built.token_counts,
        };
        Ok((row, selection.selected_ids))
    };
    let (_, reference) = run(REFERENCE_TAU)?;
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let (mut row, ids) = run(tau)?;
        row.jaccard_vs_reference = jaccard(&ids, &reference);
        rows.push(row);
    }
    Ok(TauSweepReport {
        reference_tau: REFERENCE_TAU,
        rows,
    })
}
