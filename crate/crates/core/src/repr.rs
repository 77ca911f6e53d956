//! Instruction-conditioned sample representations.
//!
//! For each sample the attention every instruction token pays to each visual
//! token is summed into a per-token score, the smallest set of top-scoring
//! visual tokens holding a `tau` share of the total score is kept, and their
//! hidden states are mean-pooled into one row of the representation matrix.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::{read_dump, SampleDump};
use crate::error::{Error, Result};
use crate::fsutil::{self, AtomicFile};

pub const DEFAULT_TAU: f64 = 0.9;

pub const REPR_HEADER_FILE: &str = "repr.json";
pub const REPR_PAYLOAD_FILE: &str = "repr.f64";
pub const REPR_IDS_FILE: &str = "repr.ids";

/// Records pulled from the dump per parallel batch.
const BATCH: usize = 512;

/// Aggregated attention received by each visual token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub alpha: Vec<f64>,
}

impl TokenScores {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Column sums of a row-major `n_u x n_v` attention block, in f64.
pub fn aggregate_attention(attn: &[f32], n_v: usize) -> Result<TokenScores> {
    if n_v == 0 || !attn.len().is_multiple_of(n_v) {
        return Err(Error::InvalidInput(format!(
            "attention block of {} entries is not a multiple of n_v = {n_v}",
            attn.len()
        )));
    }
    if attn.is_empty() {
        return Err(Error::NoInstructionTokens);
    }
    let mut alpha = vec![0.0f64; n_v];
    for row in attn.chunks_exact(n_v) {
        for (acc, &a) in alpha.iter_mut().zip(row) {
            *acc += f64::from(a);
        }
    }
    Ok(TokenScores { alpha })
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::config(format!("tau must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

/// Smallest prefix of visual tokens, ranked by descending score with ties
/// going to the lower index, whose cumulative score reaches `tau` times the
/// total. Indices are 0-based and returned in rank order.
///
/// The total is accumulated in rank order so that `tau = 1` stops exactly
/// after the last positive-score token.
pub fn select_token_set(scores: &TokenScores, tau: f64) -> Result<Vec<usize>> {
    check_tau(tau)?;
    let alpha = &scores.alpha;
    if let Some(bad) = alpha.iter().find(|a| !a.is_finite() || **a < 0.0) {
        return Err(Error::InvalidInput(format!(
            "token scores must be finite and nonnegative, found {bad}"
        )));
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&i, &j| {
        alpha[j]
            .partial_cmp(&alpha[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let total: f64 = order.iter().map(|&i| alpha[i]).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateAttention);
    }
    let target = tau * total;
    let mut cumulative = 0.0;
    for (taken, &i) in order.iter().enumerate() {
        cumulative += alpha[i];
        if cumulative >= target {
            order.truncate(taken + 1);
            return Ok(order);
        }
    }
    // unreachable for tau <= 1, kept for robustness against rounding
    let positive = order.iter().take_while(|&&i| alpha[i] > 0.0).count();
    order.truncate(positive.max(1));
    Ok(order)
}

/// Mean of the selected hidden-state rows, accumulated in f64.
pub fn pool_representation(dump: &SampleDump, selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::InvalidInput("cannot pool an empty token set".into()));
    }
    let mut acc = vec![0.0f64; dump.hidden_dim];
    for &v in selected {
        if v >= dump.n_v {
            return Err(Error::InvalidInput(format!(
                "visual token {v} out of range for n_v = {}",
                dump.n_v
            )));
        }
        for (a, &h) in acc.iter_mut().zip(dump.hidden_row(v)) {
            *a += f64::from(h);
        }
    }
    let n = selected.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// One sample's pooled representation and how many tokens went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRepr {
    pub row: Vec<f64>,
    pub selected: usize,
    pub n_v: usize,
}

pub fn represent_sample(dump: &SampleDump, tau: f64) -> Result<SampleRepr> {
    let scores = aggregate_attention(&dump.attn, dump.n_v)?;
    let selected = select_token_set(&scores, tau)?;
    let row = pool_representation(dump, &selected)?;
    Ok(SampleRepr {
        row,
        selected: selected.len(),
        n_v: dump.n_v,
    })
}

/// Stacked sample representations, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprMatrix {
    pub ids: Vec<String>,
    pub data: DMatrix<f64>,
}

impl ReprMatrix {
    pub fn new(ids: Vec<String>, data: DMatrix<f64>) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(Error::InvalidInput(format!(
                "{} ids for {} rows",
                ids.len(),
                data.nrows()
            )));
        }
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::EmptyInput("representation matrix has no entries"));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            let row = pos % data.nrows();
            return Err(Error::Validation {
                sample_id: ids[row].clone(),
                message: "representation has a non-finite entry".into(),
            });
        }
        Ok(Self { ids, data })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[f64], d: usize) -> Result<Self> {
        if d == 0 || rows.len() != ids.len() * d {
            return Err(Error::InvalidInput(format!(
                "{} values do not form {} rows of width {d}",
                rows.len(),
                ids.len()
            )));
        }
        Self::new(ids.clone(), DMatrix::from_row_slice(ids.len(), d, rows))
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn save(&self, dir: impl AsRef<Path>, tau: Option<f64>, skipped: &[SkippedSample]) -> Result<ReprHeader> {
        let dir = dir.as_ref();
        if let Some(id) = self.ids.iter().find(|id| id.contains(['\n', '\r'])) {
            return Err(Error::InvalidInput(format!(
                "sample id {id:?} contains a line break and cannot be written to the ids file"
            )));
        }
        let header = ReprHeader {
            num_samples: self.nrows(),
            hidden_dim: self.ncols(),
            tau,
            skipped: skipped.to_vec(),
            payload: REPR_PAYLOAD_FILE.into(),
            ids: REPR_IDS_FILE.into(),
        };

        let mut payload = AtomicFile::create(dir.join(REPR_PAYLOAD_FILE))?;
        let mut row = Vec::with_capacity(self.ncols() * 8);
        for i in 0..self.nrows() {
            row.clear();
            for x in self.data.row(i).iter() {
                row.extend_from_slice(&x.to_le_bytes());
            }
            payload.write_all(&row)?;
        }
        payload.commit()?;

        let mut ids = AtomicFile::create(dir.join(REPR_IDS_FILE))?;
        for id in &self.ids {
            writeln!(ids, "{id}").map_err(|e| Error::io(dir.join(REPR_IDS_FILE), e))?;
        }
        ids.commit()?;

        fsutil::write_json_atomic(dir.join(REPR_HEADER_FILE), &header)?;
        Ok(header)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ReprHeader)> {
        let dir = dir.as_ref();
        let header_path = dir.join(REPR_HEADER_FILE);
        if !header_path.is_file() {
            return Err(Error::ManifestMissing(header_path));
        }
        let header: ReprHeader = fsutil::read_json(&header_path)?;
        let ids_path = dir.join(&header.ids);
        let file = fs::File::open(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&ids_path, e))?;
        let payload_path = dir.join(&header.payload);
        let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        let expected = header.num_samples * header.hidden_dim * 8;
        if ids.len() != header.num_samples || bytes.len() != expected {
            return Err(Error::Format {
                path: payload_path,
                message: format!(
                    "header says {}x{}, found {} ids and {} payload bytes",
                    header.num_samples,
                    header.hidden_dim,
                    ids.len(),
                    bytes.len()
                ),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let matrix = Self::from_rows(ids, &values, header.hidden_dim)?;
        Ok((matrix, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprHeader {
    pub num_samples: usize,
    pub hidden_dim: usize,
    pub tau: Option<f64>,
    pub skipped: Vec<SkippedSample>,
    pub payload: String,
    pub ids: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    /// Position of the record in the dump.
    pub index: usize,
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub matrix: ReprMatrix,
    pub skipped: Vec<SkippedSample>,
    /// `(selected tokens, n_v)` for every kept row.
    pub token_counts: Vec<(usize, usize)>,
}

impl BuildOutput {
    pub fn mean_retained_ratio(&self) -> f64 {
        let n = self.token_counts.len() as f64;
        self.token_counts
            .iter()
            .map(|&(s, n_v)| s as f64 / n_v as f64)
            .sum::<f64>()
            / n
    }
}

/// Builds the representation matrix for every sample in a dump. Samples
/// without usable attention (no instruction tokens, or zero mass on every
/// visual token) are left out and listed in `skipped`.
pub fn build_matrix(dump_dir: impl AsRef<Path>, tau: f64) -> Result<BuildOutput> {
    check_tau(tau)?;
    let (manifest, mut reader) = read_dump(dump_dir)?;
    let d = manifest.hidden_dim as usize;

    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    let mut token_counts = Vec::new();
    let mut skipped = Vec::new();
    let mut index = 0usize;
    let mut batch = Vec::with_capacity(BATCH);

    loop {
        batch.clear();
        for record in reader.by_ref().take(BATCH) {
            batch.push(record?);
        }
        if batch.is_empty() {
            break;
        }
        let reprs: Vec<Result<SampleRepr>> = batch.par_iter().map(|s| represent_sample(s, tau)).collect();
        for (sample, repr) in batch.drain(..).zip(reprs) {
            match repr {
                Ok(r) => {
                    if !seen.insert(sample.sample_id.clone()) {
                        return Err(Error::DuplicateId(sample.sample_id));
                    }
                    rows.extend_from_slice(&r.row);
                    token_counts.push((r.selected, r.n_v));
                    ids.push(sample.sample_id);
                }
                Err(e @ (Error::DegenerateAttention | Error::NoInstructionTokens)) => {
                    skipped.push(SkippedSample {
                        index,
                        sample_id: sample.sample_id,
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
            index += 1;
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} of {index} samples without usable attention", skipped.len());
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput("no samples with usable attention"));
    }
    let matrix = ReprMatrix::from_rows(ids, &rows, d)?;
    Ok(BuildOutput {
        matrix,
        skipped,
        token_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> TokenScores {
        TokenScores { alpha: v.to_vec() }
    }

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate_attention(&[0.2, 0.3, 0.5, 0.1, 0.6, 0.3], 3).unwrap();
        let expected = [0.2f32 as f64 + 0.1f32 as f64, 0.3f32 as f64 + 0.6f32 as f64, 0.5f32 as f64 + 0.3f32 as f64];
        assert_eq!(a.alpha, expected);
        for (got, want) in a.alpha.iter().zip([0.3, 0.9, 0.8]) {
            assert!((got - want).abs() < 1e-7);
        }
        assert_eq!(aggregate_attention(&[1.0, 0.0, 0.0], 3).unwrap().alpha, [1.0, 0.0, 0.0]);
        assert_eq!(aggregate_attention(&[0.0; 3], 3).unwrap().alpha, [0.0; 3]);
        assert!(matches!(aggregate_attention(&[], 3), Err(Error::NoInstructionTokens)));
    }

    #[test]
    fn token_set_examples() {
        assert_eq!(sorted(select_token_set(&scores(&[0.5, 0.3, 0.2]), 0.9).unwrap()), [0, 1, 2]);
        assert_eq!(sorted(select_token_set(&scores(&[0.5, 0.3, 0.2]), 0.8).unwrap()), [0, 1]);
        assert_eq!(select_token_set(&scores(&[0.4, 0.4, 0.2]), 0.5).unwrap(), [0, 1]);
        assert_eq!(sorted(select_token_set(&scores(&[0.2, 0.0, 0.5, 0.0, 0.3]), 1.0).unwrap()), [0, 2, 4]);
    }

    #[test]
    fn token_set_errors() {
        assert!(matches!(select_token_set(&scores(&[0.0, 0.0]), 0.9), Err(Error::DegenerateAttention)));
        for tau in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(select_token_set(&scores(&[0.5]), tau).unwrap_err().is_usage());
        }
    }

    fn dump(hidden: Vec<f32>, n_v: usize, d: usize) -> SampleDump {
        SampleDump::new("s", 1, n_v, d, vec![1.0 / n_v as f32; n_v], hidden).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let s = dump(vec![1.0, 1.0, 3.0, 3.0], 2, 2);
        assert_eq!(pool_representation(&s, &[0, 1]).unwrap(), [2.0, 2.0]);
        assert_eq!(pool_representation(&s, &[1]).unwrap(), [3.0, 3.0]);
        let c = dump(vec![0.7; 8], 4, 2);
        assert_eq!(pool_representation(&c, &[0, 2, 3]).unwrap(), [0.7f32 as f64; 2]);
        assert!(pool_representation(&s, &[]).is_err());
        assert!(pool_representation(&s, &[2]).is_err());
    }

    fn alpha_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..20).prop_filter("some mass", |v| v.iter().any(|&x| x > 0.0))
    }

    proptest! {
        #[test]
        fn selection_is_minimal_prefix(alpha in alpha_strategy(), tau in 0.05f64..=1.0) {
            let s = scores(&alpha);
            let set = select_token_set(&s, tau).unwrap();
            let total: f64 = alpha.iter().sum();
            let mass: f64 = set.iter().map(|&i| alpha[i]).sum();
            prop_assert!(mass >= tau * total * (1.0 - 1e-12));
            let without_last: f64 = set[..set.len() - 1].iter().map(|&i| alpha[i]).sum();
            prop_assert!(without_last < tau * total * (1.0 + 1e-12));
        }

        #[test]
        fn selection_is_monotone_in_tau(alpha in alpha_strategy(), a in 0.05f64..=1.0, b in 0.05f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s = scores(&alpha);
            let small: HashSet<_> = select_token_set(&s, lo).unwrap().into_iter().collect();
            let large: HashSet<_> = select_token_set(&s, hi).unwrap().into_iter().collect();
            prop_assert!(small.is_subset(&large));
        }

        #[test]
        fn selection_is_scale_invariant(alpha in alpha_strategy(), tau in 0.05f64..=1.0, exp in -20i32..20) {
            // power-of-two scaling is exact in floating point
            let c = 2f64.powi(exp);
            let scaled: Vec<f64> = alpha.iter().map(|a| a * c).collect();
            prop_assert_eq!(select_token_set(&scores(&alpha), tau).unwrap(), select_token_set(&scores(&scaled), tau).unwrap());
        }

        #[test]
        fn pooling_is_permutation_equivariant(
            n_v in 1usize..10,
            seed in any::<u64>(),
            tau in 0.1f64..=1.0,
        ) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let n_u = 2;
            // distinct column sums so the ranking has no ties
            let attn: Vec<f32> = (0..n_u * n_v).map(|_| rng.random_range(0.0..1.0f32) / n_v as f32).collect();
            let hidden: Vec<f32> = (0..n_v * d).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            let base = SampleDump::new("p", n_u, n_v, d, attn.clone(), hidden.clone()).unwrap();
            let alpha = aggregate_attention(&attn, n_v).unwrap().alpha;
            let mut uniq = alpha.clone();
            uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
            uniq.dedup();
            prop_assume!(uniq.len() == n_v);

            let mut perm: Vec<usize> = (0..n_v).collect();
            perm.shuffle(&mut rng);
            let p_attn: Vec<f32> = (0..n_u).flat_map(|u| perm.iter().map(move |&j| (u, j))).map(|(u, j)| attn[u * n_v + j]).collect();
            let p_hidden: Vec<f32> = perm.iter().flat_map(|&j| hidden[j * d..(j + 1) * d].to_vec()).collect();
            let permuted = SampleDump::new("p", n_u, n_v, d, p_attn, p_hidden).unwrap();

            let a = represent_sample(&base, tau).unwrap();
            let b = represent_sample(&permuted, tau).unwrap();
            prop_assert_eq!(a.selected, b.selected);
            for (x, y) in a.row.iter().zip(&b.row) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn build_matrix_composes_per_sample_steps_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let d = 2;
        let samples = vec![
            SampleDump::new("a", 2, 3, d, vec![0.2, 0.3, 0.5, 0.1, 0.6, 0.3], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap(),
            SampleDump::new("zero", 1, 3, d, vec![0.0; 3], vec![1.0; 6]).unwrap(),
            SampleDump::new("b", 1, 3, d, vec![1.0, 0.0, 0.0], vec![5.0, 6.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            SampleDump::new("no-instr", 0, 2, d, vec![], vec![1.0; 4]).unwrap(),
        ];
        crate::dump::write_dump(&samples, dir.path(), 3).unwrap();
        let out = build_matrix(dir.path(), 0.9).unwrap();
        assert_eq!(out.matrix.ids, ["a", "b"]);
        assert_eq!(out.skipped.len(), 2);
        assert_eq!(out.skipped[0].sample_id, "zero");
        assert_eq!(out.skipped[0].index, 1);
        assert_eq!(out.skipped[1].index, 3);
        for (row, s) in [(0, &samples[0]), (1, &samples[2])] {
            let want = represent_sample(s, 0.9).unwrap().row;
            let got: Vec<f64> = out.matrix.data.row(row).iter().copied().collect();
            assert_eq!(got, want);
        }
        // 0.8 < 0.9 on the top two tokens, so sample a pools all three
        assert_eq!(out.token_counts, [(3, 3), (1, 3)]);
    }

    #[test]
    fn build_matrix_rejects_all_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let s = SampleDump::new("z", 1, 2, 1, vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        crate::dump::write_dump([s], dir.path(), 3).unwrap();
        assert!(matches!(build_matrix(dir.path(), 0.9), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ReprMatrix::from_rows(vec!["x".into(), "y".into()], &[1.0, -2.5, 1e-300, f64::MAX], 2).unwrap();
        let skipped = vec![SkippedSample { index: 4, sample_id: "q".into(), reason: "r".into() }];
        m.save(dir.path(), Some(0.9), &skipped).unwrap();
        let (back, header) = ReprMatrix::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.skipped, skipped);
        assert_eq!(header.tau, Some(0.9));
    }

    #[test]
    fn repr_matrix_rejects_bad_input() {
        assert!(ReprMatrix::from_rows(vec!["a".into(), "a".into()], &[1.0, 2.0], 1).is_err());
        assert!(ReprMatrix::from_rows(vec!["a".into()], &[f64::NAN], 1).is_err());
        assert!(ReprMatrix::from_rows(vec![], &[], 1).is_err());
    }
}
