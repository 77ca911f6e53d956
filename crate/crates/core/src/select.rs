//! Leverage-score subset selection.
//!
//! The representation matrix is column-centered, its energy-selected left
//! singular subspace `U_k` is computed, and each row is scored by its
//! squared row norm in `U_k`. Rows are then either taken greedily by score
//! or drawn at random with probability proportional to score.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{self, AtomicFile};
use crate::repr::{check_tau, ReprMatrix, DEFAULT_TAU};
use crate::svd::{
    self, fit_subspace, SubspaceOptions, SvdMethod, DEFAULT_ENERGY_THRESHOLD, DEFAULT_OVERSAMPLING,
    DEFAULT_POWER_ITERS, DEFAULT_START_RANK,
};

pub const DEFAULT_EPSILON: f64 = 0.5;

/// Tolerance on `max |U^T U - I|` accepted by [`leverage_scores`].
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

/// Relative rank cutoff used by [`projection_error`].
pub const PROJECTION_RANK_TOL: f64 = 1e-10;

pub const SELECTED_IDS_FILE: &str = "selected.ids";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const SELECTION_META_FILE: &str = "selection.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    #[default]
    TopLeverage,
    LeverageSample,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::TopLeverage => "top-leverage",
            SelectionMode::LeverageSample => "leverage-sample",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top-leverage" | "top" => Ok(SelectionMode::TopLeverage),
            "leverage-sample" | "sample" => Ok(SelectionMode::LeverageSample),
            _ => Err(Error::config(format!(
                "unknown mode {s:?} (expected top-leverage or leverage-sample)"
            ))),
        }
    }
}

/// How many samples to keep: an absolute count, a share of `N` written as a
/// percentage, or `auto`, the leverage-sampling size `ceil(4 k ln k / eps^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
    Auto,
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Budget::Count(0) => Err(Error::config("budget must be at least 1")),
            Budget::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::config(format!(
                "budget fraction must lie in (0, 100%], got {}%",
                f * 100.0
            ))),
            _ => Ok(()),
        }
    }

    /// Sample-count form of the budget for `n` samples and subspace rank `k`.
    pub fn resolve(&self, n: usize, k: usize, epsilon: f64) -> Result<usize> {
        self.validate()?;
        let count = match *self {
            Budget::Count(c) => c,
            Budget::Fraction(f) => ((f * n as f64).round() as usize).max(1),
            Budget::Auto => sampling_budget(k, epsilon).min(n),
        };
        if count > n {
            return Err(Error::config(format!("budget {count} exceeds the {n} available samples")));
        }
        Ok(count)
    }
}

/// `ceil(4 k ln k / eps^2)`, and never less than `k`.
pub fn sampling_budget(k: usize, epsilon: f64) -> usize {
    let k_f = k as f64;
    let c = (4.0 * k_f * k_f.ln() / (epsilon * epsilon)).ceil();
    (c as usize).max(k).max(1)
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(c) => write!(f, "{c}"),
            Budget::Fraction(x) => write!(f, "{}%", x * 100.0),
            Budget::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let budget = if s == "auto" {
            Budget::Auto
        } else if let Some(pct) = s.strip_suffix('%') {
            let p: f64 = pct
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad budget percentage {s:?}")))?;
            Budget::Fraction(p / 100.0)
        } else {
            let c: usize = s
                .parse()
                .map_err(|_| Error::config(format!("bad budget {s:?} (use a count like 1000, a share like 16%, or auto)")))?;
            Budget::Count(c)
        };
        budget.validate()?;
        Ok(budget)
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Count(c) => serializer.serialize_u64(*c as u64),
            other => serializer.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Count(c) => {
                let b = Budget::Count(c as usize);
                b.validate().map_err(serde::de::Error::custom)?;
                Ok(b)
            }
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Every knob of a selection run. Also the on-disk config file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub tau: f64,
    pub energy_threshold: f64,
    pub budget: Budget,
    pub mode: SelectionMode,
    /// Accuracy parameter for leverage sampling; sets the `auto` budget.
    pub epsilon: f64,
    pub seed: u64,
    /// Column-center before the SVD. Disabling it lets a large mean vector
    /// swamp the spectrum; kept for ablations.
    pub center: bool,
    pub svd: SvdMethod,
    pub oversampling: usize,
    pub power_iters: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            energy_threshold: DEFAULT_ENERGY_THRESHOLD,
            budget: Budget::Fraction(0.16),
            mode: SelectionMode::TopLeverage,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            center: true,
            svd: SvdMethod::Randomized,
            oversampling: DEFAULT_OVERSAMPLING,
            power_iters: DEFAULT_POWER_ITERS,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.energy_threshold > 0.0 && self.energy_threshold <= 1.0) {
            return Err(Error::config(format!(
                "energy threshold must lie in (0, 1], got {}",
                self.energy_threshold
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        self.budget.validate()
    }

    pub fn subspace_options(&self) -> SubspaceOptions {
        SubspaceOptions {
            energy_threshold: self.energy_threshold,
            method: self.svd,
            oversampling: self.oversampling,
            power_iters: self.power_iters,
            start_rank: DEFAULT_START_RANK,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub mode: SelectionMode,
    /// Sample ids in matrix row order.
    #[serde(skip)]
    pub ids: Vec<String>,
    /// Leverage score per row, aligned with `ids`.
    #[serde(skip)]
    pub scores: Vec<f64>,
    /// Row indices by descending score, ties to the lower index.
    #[serde(skip)]
    pub ranking: Vec<usize>,
    /// Selected row indices, in selection order.
    pub selected: Vec<usize>,
    pub selected_ids: Vec<String>,
    pub k_used: usize,
    pub energy_ratio: Option<f64>,
    pub seed: Option<u64>,
    /// Number of selected rows taken from the zero-score pool because fewer
    /// than `budget` rows had positive score.
    pub zero_score_fill: usize,
    pub singular_values: Vec<f64>,
    pub column_means: Option<Vec<f64>>,
}

/// Column means (f64), removed in place. A second pass removes the rounding
/// residue of the first.
pub fn center_in_place(x: &mut DMatrix<f64>) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mut means = Vec::with_capacity(x.ncols());
    for mut col in x.column_iter_mut() {
        let mut total = 0.0;
        for _ in 0..2 {
            let mean = col.iter().sum::<f64>() / n as f64;
            col.iter_mut().for_each(|v| *v -= mean);
            total += mean;
        }
        means.push(total);
    }
    Ok(means)
}

pub fn center_columns(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut centered = x.clone();
    let means = center_in_place(&mut centered)?;
    Ok((centered, means))
}

/// Squared row norms of `u_k`. Requires orthonormal columns, so the scores
/// sum to `k` and each lies in `[0, 1]`.
pub fn leverage_scores(u_k: &DMatrix<f64>) -> Result<Vec<f64>> {
    let err = svd::orthonormality_error(u_k);
    if err.is_nan() || err > ORTHONORMALITY_TOL {
        return Err(Error::NotOrthonormal(err));
    }
    let (n, k) = u_k.shape();
    Ok((0..n)
        .into_par_iter()
        .map(|i| (0..k).map(|j| u_k[(i, j)] * u_k[(i, j)]).sum())
        .collect())
}

fn check_scores(scores: &[f64], ids: &[String], budget: usize) -> Result<()> {
    if scores.len() != ids.len() {
        return Err(Error::InvalidInput(format!("{} scores for {} ids", scores.len(), ids.len())));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::InvalidInput(format!("scores must be finite and nonnegative, found {s}")));
    }
    if budget == 0 || budget > scores.len() {
        return Err(Error::config(format!(
            "budget {budget} must be between 1 and the {} available samples",
            scores.len()
        )));
    }
    Ok(())
}

/// Row indices by descending score, ties broken by ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

fn base_result(mode: SelectionMode, scores: &[f64], ids: &[String], selected: Vec<usize>) -> SelectionResult {
    let total: f64 = scores.iter().sum();
    SelectionResult {
        mode,
        ids: ids.to_vec(),
        scores: scores.to_vec(),
        ranking: rank_by_score(scores),
        selected_ids: selected.iter().map(|&i| ids[i].clone()).collect(),
        selected,
        k_used: total.round() as usize,
        energy_ratio: None,
        seed: None,
        zero_score_fill: 0,
        singular_values: Vec::new(),
        column_means: None,
    }
}

/// The `budget` highest-scoring rows.
pub fn select_top(scores: &[f64], ids: &[String], budget: usize) -> Result<SelectionResult> {
    check_scores(scores, ids, budget)?;
    let ranking = rank_by_score(scores);
    let selected = ranking[..budget].to_vec();
    Ok(base_result(SelectionMode::TopLeverage, scores, ids, selected))
}

/// Binary sum tree over nonnegative weights supporting weighted draws and
/// removal in `O(log n)`. Parents are recomputed from their children on
/// removal, so no rounding drift accumulates.
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(weights: &[f64]) -> Self {
        let leaves = weights.len().next_power_of_two();
        let mut nodes = vec![0.0; 2 * leaves];
        nodes[leaves..leaves + weights.len()].copy_from_slice(weights);
        for p in (1..leaves).rev() {
            nodes[p] = nodes[2 * p] + nodes[2 * p + 1];
        }
        Self { leaves, nodes }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf whose cumulative weight interval contains `u`; only ever lands
    /// on a positive-weight leaf while the total is positive.
    fn find(&self, mut u: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = self.nodes[2 * node];
            let right = self.nodes[2 * node + 1];
            if left > 0.0 && (u < left || right <= 0.0) {
                node *= 2;
            } else {
                u -= left;
                node = 2 * node + 1;
            }
        }
        node - self.leaves
    }

    fn remove(&mut self, i: usize) {
        let mut node = i + self.leaves;
        self.nodes[node] = 0.0;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }
}

/// Draws `budget` distinct rows one at a time, each with probability
/// proportional to its score among the rows not yet drawn. If fewer than
/// `budget` rows have positive score, the remainder is filled from the
/// zero-score rows in ascending index order and counted in `zero_score_fill`.
pub fn sample_leverage(scores: &[f64], ids: &[String], budget: usize, seed: u64) -> Result<SelectionResult> {
    check_scores(scores, ids, budget)?;
    if scores.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidInput("scores sum to zero; nothing to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = SumTree::new(scores);
    let mut selected = Vec::with_capacity(budget);
    while selected.len() < budget && tree.total() > 0.0 {
        let u = rng.random::<f64>() * tree.total();
        let i = tree.find(u);
        tree.remove(i);
        selected.push(i);
    }
    let drawn = selected.len();
    if drawn < budget {
        let mut taken = vec![false; scores.len()];
        selected.iter().for_each(|&i| taken[i] = true);
        selected.extend((0..scores.len()).filter(|&i| !taken[i]).take(budget - drawn));
    }
    let mut result = base_result(SelectionMode::LeverageSample, scores, ids, selected);
    result.seed = Some(seed);
    result.zero_score_fill = budget - drawn;
    Ok(result)
}

/// `||X_c - X_c V V^T||_F`, where the columns of `V` are an orthonormal basis
/// of the row space of the selected rows (singular values below
/// `PROJECTION_RANK_TOL * sigma_max` are dropped).
pub fn projection_error(x_c: &DMatrix<f64>, subset_rows: &[usize]) -> Result<f64> {
    if subset_rows.is_empty() {
        return Err(Error::InvalidInput("subset is empty".into()));
    }
    if let Some(&bad) = subset_rows.iter().find(|&&r| r >= x_c.nrows()) {
        return Err(Error::InvalidInput(format!("row {bad} out of range for {} rows", x_c.nrows())));
    }
    let sub = x_c.select_rows(subset_rows);
    let svd = svd::dense_svd(&sub)?;
    let sigma_max = svd.singular_values[0];
    let rank = svd
        .singular_values
        .iter()
        .take_while(|&&s| sigma_max > 0.0 && s > PROJECTION_RANK_TOL * sigma_max)
        .count();
    if rank == 0 {
        return Ok(x_c.norm());
    }
    let basis = svd.v_t.rows(0, rank).transpose();
    let coords = svd::mul_tall(x_c, &basis);
    let residual = x_c - svd::mul_tall(&coords, &basis.transpose());
    Ok(residual.norm())
}

/// Full selection: center, fit the energy-selected subspace, score, select.
pub fn run_selection(x: &ReprMatrix, cfg: &SelectConfig) -> Result<SelectionResult> {
    cfg.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mut data = x.data.clone();
    let column_means = if cfg.center {
        Some(center_in_place(&mut data)?)
    } else {
        None
    };
    let model = fit_subspace(&data, &cfg.subspace_options())?;
    drop(data);
    let scores = leverage_scores(&model.u_k)?;
    let budget = cfg.budget.resolve(n, model.k, cfg.epsilon)?;
    let mut result = match cfg.mode {
        SelectionMode::TopLeverage => select_top(&scores, &x.ids, budget)?,
        SelectionMode::LeverageSample => sample_leverage(&scores, &x.ids, budget, cfg.seed)?,
    };
    result.k_used = model.k;
    result.energy_ratio = Some(model.energy_ratio);
    result.singular_values = model.singular_values;
    result.column_means = column_means;
    Ok(result)
}

#[derive(Debug, Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    score: f64,
    rank: usize,
}

#[derive(Debug, Serialize)]
pub struct SelectionMeta<'a> {
    pub mode: SelectionMode,
    pub num_samples: usize,
    pub budget: usize,
    pub k_used: usize,
    pub energy_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub zero_score_fill: usize,
    pub singular_values: &'a [f64],
    pub column_means: Option<&'a [f64]>,
    pub config: &'a SelectConfig,
}

impl SelectionResult {
    pub fn meta<'a>(&'a self, config: &'a SelectConfig) -> SelectionMeta<'a> {
        SelectionMeta {
            mode: self.mode,
            num_samples: self.ids.len(),
            budget: self.selected.len(),
            k_used: self.k_used,
            energy_ratio: self.energy_ratio,
            seed: self.seed,
            zero_score_fill: self.zero_score_fill,
            singular_values: &self.singular_values,
            column_means: self.column_means.as_deref(),
            config,
        }
    }

    /// Writes the selected ids, per-sample scores (in rank order) and run
    /// metadata into `dir`. Returns the paths written.
    pub fn write(&self, dir: impl AsRef<Path>, config: &SelectConfig) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        let ids_path = dir.join(SELECTED_IDS_FILE);
        let mut ids = AtomicFile::create(&ids_path)?;
        for id in &self.selected_ids {
            writeln!(ids, "{id}").map_err(|e| Error::io(&ids_path, e))?;
        }
        ids.commit()?;

        let scores_path = dir.join(SCORES_FILE);
        let mut scores = AtomicFile::create(&scores_path)?;
        for (rank, &i) in self.ranking.iter().enumerate() {
            let line = ScoreLine {
                id: &self.ids[i],
                score: self.scores[i],
                rank: rank + 1,
            };
            let mut bytes = serde_json::to_vec(&line).map_err(|source| Error::Json {
                path: scores_path.clone(),
                source,
            })?;
            bytes.push(b'\n');
            scores.write_all(&bytes)?;
        }
        scores.commit()?;

        let meta_path = dir.join(SELECTION_META_FILE);
        fsutil::write_json_atomic(&meta_path, &self.meta(config))?;
        Ok(vec![ids_path, scores_path, meta_path])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn random_orthonormal(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        nalgebra::QR::new(g).q()
    }

    #[test]
    fn centering_examples() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (c, means) = center_columns(&x).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 1.0]));
        assert_eq!(means, [2.0, 3.0]);
        let same = DMatrix::from_row_slice(3, 2, &[0.3, -7.0, 0.3, -7.0, 0.3, -7.0]);
        assert_eq!(center_columns(&same).unwrap().0, DMatrix::zeros(3, 2));
        let (again, second) = center_columns(&c).unwrap();
        assert_eq!(again, c);
        assert!(second.iter().all(|m| m.abs() < 1e-15));
        assert!(matches!(center_columns(&DMatrix::zeros(1, 3)), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn centered_columns_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(500, 7, |_, j| 1e3 * j as f64 + rng.random::<f64>());
        let (c, _) = center_columns(&x).unwrap();
        for col in c.column_iter() {
            let max = col.amax();
            assert!((col.sum() / 500.0).abs() <= 1e-10 * max);
        }
    }

    #[test]
    fn leverage_examples() {
        let u = DMatrix::identity(3, 3).columns(0, 2).into_owned();
        assert_eq!(leverage_scores(&u).unwrap(), [1.0, 1.0, 0.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v = DMatrix::from_column_slice(2, 1, &[h, h]);
        for s in leverage_scores(&v).unwrap() {
            assert!((s - 0.5).abs() < 1e-15);
        }
        let mut flipped = random_orthonormal(30, 4, 2);
        let before = leverage_scores(&flipped).unwrap();
        flipped.column_mut(2).neg_mut();
        assert_eq!(leverage_scores(&flipped).unwrap(), before);
        let bad = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(leverage_scores(&bad), Err(Error::NotOrthonormal(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn leverage_sum_and_rotation_invariance(n in 5usize..300, k in 1usize..5, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let u = random_orthonormal(n, k, seed);
            let pi = leverage_scores(&u).unwrap();
            let sum: f64 = pi.iter().sum();
            prop_assert!((sum - k as f64).abs() <= 1e-9 * k as f64);
            prop_assert!(pi.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)));
            let q = random_orthonormal(k, k, seed ^ 0xABCD);
            let rotated = leverage_scores(&(&u * q)).unwrap();
            for (a, b) in pi.iter().zip(&rotated) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn top_selection_examples() {
        let r = select_top(&[0.1, 0.9, 0.5], &ids(3), 2).unwrap();
        assert_eq!(r.selected, [1, 2]);
        assert_eq!(r.selected_ids, ["s1", "s2"]);
        let all = select_top(&[0.1, 0.9, 0.5], &ids(3), 3).unwrap();
        assert_eq!(all.selected, all.ranking);
        assert_eq!(select_top(&[0.5; 3], &ids(3), 2).unwrap().selected, [0, 1]);
        assert!(select_top(&[0.5; 3], &ids(3), 4).unwrap_err().is_usage());
        assert!(select_top(&[0.5; 3], &ids(3), 0).is_err());
    }

    #[test]
    fn sampling_examples() {
        let point = sample_leverage(&[1.0, 0.0, 0.0], &ids(3), 1, 7).unwrap();
        assert_eq!(point.selected, [0]);
        assert_eq!(point.zero_score_fill, 0);

        let mut all = sample_leverage(&[0.25; 4], &ids(4), 4, 3).unwrap().selected;
        all.sort_unstable();
        assert_eq!(all, [0, 1, 2, 3]);

        let filled = sample_leverage(&[0.0, 2.0, 0.0, 0.0], &ids(4), 3, 1).unwrap();
        assert_eq!(filled.selected, [1, 0, 2]);
        assert_eq!(filled.zero_score_fill, 2);

        let a = sample_leverage(&[0.3, 0.2, 0.4, 0.1, 0.0, 0.9], &ids(6), 3, 42).unwrap();
        let b = sample_leverage(&[0.3, 0.2, 0.4, 0.1, 0.0, 0.9], &ids(6), 3, 42).unwrap();
        assert_eq!(a, b);
        assert!(sample_leverage(&[0.0; 2], &ids(2), 1, 0).is_err());
    }

    #[test]
    fn sampling_frequency_matches_weights() {
        let ids = ids(2);
        let trials = 100_000u64;
        let hits = (0..trials)
            .filter(|&seed| sample_leverage(&[0.75, 0.25], &ids, 1, seed).unwrap().selected[0] == 0)
            .count();
        let rate = hits as f64 / trials as f64;
        assert!((rate - 0.75).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn sum_tree_never_returns_removed_leaves() {
        let mut tree = SumTree::new(&[0.5, 1e-300, 0.0, 3.0, 0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = Vec::new();
        while tree.total() > 0.0 {
            let i = tree.find(rng.random::<f64>() * tree.total());
            assert!(!seen.contains(&i) && i != 2);
            tree.remove(i);
            seen.push(i);
        }
        seen.sort_unstable();
        assert_eq!(seen, [0, 1, 3, 4]);
    }

    #[test]
    fn projection_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let left = DMatrix::from_fn(40, 3, |_, _| normal(&mut rng));
        let right = DMatrix::from_fn(3, 10, |_, _| normal(&mut rng));
        let x = left * right;
        let all: Vec<usize> = (0..40).collect();
        assert!(projection_error(&x, &all).unwrap() <= 1e-8 * x.norm());
        assert!(projection_error(&x, &[4, 17, 30]).unwrap() <= 1e-8 * x.norm());
        let partial = projection_error(&x, &[4]).unwrap();
        assert!(partial > 1e-3 * x.norm());
        assert!(projection_error(&x, &[]).is_err());
        assert!(projection_error(&x, &[40]).is_err());
        assert_eq!(projection_error(&x, &[0]).unwrap(), projection_error(&x, &[0, 0]).unwrap());
    }

    #[test]
    fn budget_parsing_and_resolution() {
        assert_eq!("100000".parse::<Budget>().unwrap(), Budget::Count(100000));
        assert_eq!("16%".parse::<Budget>().unwrap(), Budget::Fraction(0.16));
        assert_eq!("auto".parse::<Budget>().unwrap(), Budget::Auto);
        assert!("0".parse::<Budget>().unwrap_err().is_usage());
        assert!("0%".parse::<Budget>().is_err());
        assert!("150%".parse::<Budget>().is_err());
        assert!("1.5".parse::<Budget>().is_err());
        assert_eq!(Budget::Fraction(0.16).resolve(1000, 3, 0.5).unwrap(), 160);
        assert_eq!(Budget::Count(1000).resolve(1000, 3, 0.5).unwrap(), 1000);
        assert!(Budget::Count(1001).resolve(1000, 3, 0.5).is_err());
        // ceil(4 * 8 * ln 8 / 0.25) = ceil(266.17)
        assert_eq!(Budget::Auto.resolve(2000, 8, 0.5).unwrap(), 267);
        assert_eq!(sampling_budget(1, 0.5), 1);

        let json = serde_json::to_string(&[Budget::Count(5), Budget::Fraction(0.16), Budget::Auto]).unwrap();
        assert_eq!(json, r#"[5,"16%","auto"]"#);
        let back: Vec<Budget> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, [Budget::Count(5), Budget::Fraction(0.16), Budget::Auto]);
    }

    #[test]
    fn config_roundtrips_and_rejects_unknown_keys() {
        let cfg = SelectConfig { budget: Budget::Count(16), seed: 5, ..Default::default() };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SelectConfig>(&json).unwrap(), cfg);
        let partial: SelectConfig = serde_json::from_str(r#"{"budget": "10%", "mode": "leverage-sample"}"#).unwrap();
        assert_eq!(partial.mode, SelectionMode::LeverageSample);
        assert_eq!(partial.tau, 0.9);
        assert!(serde_json::from_str::<SelectConfig>(r#"{"budjet": 3}"#).is_err());
        assert!(SelectConfig { epsilon: 1.0, ..Default::default() }.validate().is_err());
        assert!(SelectConfig { energy_threshold: 0.0, ..Default::default() }.validate().is_err());
    }

    fn small_matrix(n: usize, d: usize, seed: u64) -> ReprMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = DMatrix::from_fn(3, d, |_, _| normal(&mut rng));
        let coeffs = DMatrix::from_fn(n, 3, |_, j| normal(&mut rng) * (3.0 - j as f64));
        let noise = DMatrix::from_fn(n, d, |_, _| 0.01 * normal(&mut rng));
        ReprMatrix::new(ids(n), coeffs * basis + noise).unwrap()
    }

    #[test]
    fn run_selection_invariants() {
        let x = small_matrix(200, 12, 4);
        let cfg = SelectConfig { budget: Budget::Count(20), ..Default::default() };
        let r = run_selection(&x, &cfg).unwrap();
        assert_eq!(r.selected.len(), 20);
        assert_eq!(r.selected, r.ranking[..20]);
        let total: f64 = r.scores.iter().sum();
        assert!((total - r.k_used as f64).abs() <= 1e-9 * r.k_used as f64);
        assert!(r.energy_ratio.unwrap() >= 0.9);
        assert_eq!(r.column_means.as_ref().unwrap().len(), 12);

        for c in [2.0, 3.7, 0.01, 1e3] {
            let scaled = ReprMatrix::new(x.ids.clone(), &x.data * c).unwrap();
            assert_eq!(run_selection(&scaled, &cfg).unwrap().ranking, r.ranking, "scale {c}");
        }

        let sampled = run_selection(&x, &SelectConfig { mode: SelectionMode::LeverageSample, seed: 3, ..cfg.clone() }).unwrap();
        assert_eq!(sampled.seed, Some(3));
        let mut uniq = sampled.selected.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 20);

        let frac = run_selection(&small_matrix(1000, 8, 5), &SelectConfig::default()).unwrap();
        assert_eq!(frac.selected.len(), 160);
    }

    #[test]
    fn write_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SelectConfig { budget: Budget::Count(2), ..Default::default() };
        let r = select_top(&[0.1, 0.9, 0.5], &ids(3), 2).unwrap();
        r.write(dir.path(), &cfg).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join(SELECTED_IDS_FILE)).unwrap(), "s1\ns2\n");
        let scores = std::fs::read_to_string(dir.path().join(SCORES_FILE)).unwrap();
        assert_eq!(scores.lines().next().unwrap(), r#"{"id":"s1","score":0.9,"rank":1}"#);
        let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(SELECTION_META_FILE)).unwrap()).unwrap();
        assert_eq!(meta["mode"], "top-leverage");
        assert_eq!(meta["config"]["budget"], 2);
    }
}
