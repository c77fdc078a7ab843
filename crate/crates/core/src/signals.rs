//! Membership signals queried from a trained model, multi-query averaging and
//! per-sample score tables.
//!
//! Every signal is oriented so that a higher score is more member-like.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, softmax, CrossEntropy, MlpClassifier};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    /// Negated cross-entropy.
    Loss,
    /// Softmax probability of the true label.
    Confidence,
    /// Negated L2 norm of the parameter gradient of the cross-entropy.
    Gradnorm,
}

impl std::str::FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Self::Loss),
            "confidence" => Ok(Self::Confidence),
            "gradnorm" => Ok(Self::Gradnorm),
            other => Err(Error::invalid(format!("unknown signal kind `{other}`"))),
        }
    }
}

/// How many times each sample is queried and how much feature jitter the
/// extra queries receive. Query 1 is always the clean input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    pub num_queries: usize,
    pub augmentation_noise_std: f64,
    pub seed: u64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            augmentation_noise_std: 0.05,
            seed: 0,
        }
    }
}

impl QueryConfig {
    pub fn single() -> Self {
        Self {
            num_queries: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::invalid("num_queries must be at least 1"));
        }
        if !(self.augmentation_noise_std >= 0.0 && self.augmentation_noise_std.is_finite()) {
            return Err(Error::invalid("augmentation_noise_std must be nonnegative"));
        }
        Ok(())
    }

    /// The query inputs for one sample. The jitter stream depends only on
    /// `(seed, sample_id)`, so every model sees the same perturbed copies.
    pub fn query_inputs(&self, x: &[f64], sample_id: u64) -> Vec<Vec<f64>> {
        let mut inputs = Vec::with_capacity(self.num_queries);
        inputs.push(x.to_vec());
        if self.num_queries > 1 {
            let mut rng = seed::rng(seed::derive(self.seed, "query", sample_id));
            for _ in 1..self.num_queries {
                inputs.push(
                    x.iter()
                        .map(|&v| {
                            let z: f64 = rng.sample(StandardNormal);
                            v + self.augmentation_noise_std * z
                        })
                        .collect(),
                );
            }
        }
        inputs
    }
}

/// Single-query membership score of `(x, y)` under `model`.
pub fn signal(model: &MlpClassifier, x: &[f64], y: usize, kind: SignalKind) -> Result<f64> {
    match kind {
        SignalKind::Loss => Ok(-cross_entropy(&model.forward(x)?, y)?),
        SignalKind::Confidence => {
            let logits = model.forward(x)?;
            if y >= logits.len() {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            Ok(softmax(&logits)[y])
        }
        SignalKind::Gradnorm => {
            let (grads, _) = model.example_gradient(&CrossEntropy, x, y)?;
            Ok(-grads.l2_norm())
        }
    }
}

/// Mean signal over the clean input and `num_queries - 1` jittered copies.
pub fn averaged_signal(
    model: &MlpClassifier,
    x: &[f64],
    y: usize,
    kind: SignalKind,
    query: &QueryConfig,
    sample_id: u64,
) -> Result<f64> {
    query.validate()?;
    if query.num_queries == 1 || query.augmentation_noise_std == 0.0 {
        // all queries coincide with the clean one
        return signal(model, x, y, kind);
    }
    mean_over(model, &query.query_inputs(x, sample_id), y, kind)
}

fn mean_over(model: &MlpClassifier, inputs: &[Vec<f64>], y: usize, kind: SignalKind) -> Result<f64> {
    let mut total = 0.0;
    for input in inputs {
        total += signal(model, input, y, kind)?;
    }
    Ok(total / inputs.len() as f64)
}

/// Scores of every `(model, sample)` pair: `result[s][m]` is model `m` on
/// sample `ids[s]`. Samples are processed in parallel; the output does not
/// depend on scheduling.
pub fn score_matrix(
    models: &[&MlpClassifier],
    dataset: &TabularDataset,
    ids: &[usize],
    kind: SignalKind,
    query: &QueryConfig,
) -> Result<Vec<Vec<f64>>> {
    query.validate()?;
    ids.par_iter()
        .map(|&id| {
            let x = dataset.row(id);
            let y = dataset.label(id);
            let inputs = if query.augmentation_noise_std == 0.0 {
                vec![x.to_vec()]
            } else {
                query.query_inputs(x, id as u64)
            };
            models.iter().map(|m| mean_over(m, &inputs, y, kind)).collect()
        })
        .collect()
}

/// LiRA-style logit rescaling `ln(p / (1 - p))`, clamped away from 0 and 1.
pub fn logit_scale(p: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    (p / (1.0 - p)).ln()
}

/// A sample to score, addressed by its index in the parent dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub id: usize,
    pub is_member: bool,
}

/// Member samples first, then non-members.
pub fn candidates(members: &[usize], non_members: &[usize]) -> Vec<Candidate> {
    members
        .iter()
        .map(|&id| Candidate { id, is_member: true })
        .chain(non_members.iter().map(|&id| Candidate { id, is_member: false }))
        .collect()
}

/// Per-sample scores with ground-truth membership.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<usize>,
    pub is_member: Vec<bool>,
    pub raw: Vec<f64>,
    pub calibrated: Option<Vec<f64>>,
    pub final_score: Option<Vec<f64>>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.is_member.len() != n || self.raw.len() != n {
            return Err(Error::invalid("score table columns have different lengths"));
        }
        for col in [Some(&self.raw), self.calibrated.as_ref(), self.final_score.as_ref()]
            .into_iter()
            .flatten()
        {
            if col.len() != n {
                return Err(Error::invalid("score table columns have different lengths"));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("score table contains a non-finite score"));
            }
        }
        if self.ids.iter().collect::<HashSet<_>>().len() != n {
            return Err(Error::invalid("score table ids are not unique"));
        }
        Ok(())
    }

    /// Writes `id,is_member,raw,calibrated,final`; absent scores are empty cells.
    /// A leading `# config_digest: ...` comment is written when a digest is given.
    pub fn write_csv(&self, path: &Path, digest: Option<&str>) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        if let Some(d) = digest {
            writeln!(file, "# config_digest: {d}").map_err(|e| Error::io(path, e))?;
        }
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["id", "is_member", "raw", "calibrated", "final"])?;
        let cell = |col: &Option<Vec<f64>>, i: usize| col.as_ref().map_or(String::new(), |c| c[i].to_string());
        for i in 0..self.len() {
            writer.write_record([
                self.ids[i].to_string(),
                u8::from(self.is_member[i]).to_string(),
                self.raw[i].to_string(),
                cell(&self.calibrated, i),
                cell(&self.final_score, i),
            ])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let mut table = ScoreTable {
            ids: Vec::new(),
            is_member: Vec::new(),
            raw: Vec::new(),
            calibrated: Some(Vec::new()),
            final_score: Some(Vec::new()),
        };
        let mut has_cal = false;
        let mut has_final = false;
        let bad = |row: usize, column: &str, message: &str| Error::Parse {
            path: path.display().to_string(),
            row,
            column: column.to_string(),
            message: message.to_string(),
        };
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let row = i + 1;
            if record.len() != 5 {
                return Err(bad(row, "-", "expected 5 columns"));
            }
            table.ids.push(record[0].parse().map_err(|_| bad(row, "id", "not an integer"))?);
            table.is_member.push(match &record[1] {
                "1" => true,
                "0" => false,
                _ => return Err(bad(row, "is_member", "expected 0 or 1")),
            });
            table.raw.push(record[2].parse().map_err(|_| bad(row, "raw", "not a number"))?);
            for (idx, name, col, seen) in [
                (3, "calibrated", &mut table.calibrated, &mut has_cal),
                (4, "final", &mut table.final_score, &mut has_final),
            ] {
                let cell = &record[idx];
                if cell.is_empty() {
                    if *seen {
                        return Err(bad(row, name, "column is only partially filled"));
                    }
                    *col = None;
                } else {
                    if col.is_none() {
                        return Err(bad(row, name, "column is only partially filled"));
                    }
                    *seen = true;
                    col.as_mut().unwrap().push(cell.parse().map_err(|_| bad(row, name, "not a number"))?);
                }
            }
        }
        table.validate()?;
        Ok(table)
    }
}

/// Raw multi-query scores of `model` on every candidate.
pub fn build_score_table(
    model: &MlpClassifier,
    dataset: &TabularDataset,
    candidates: &[Candidate],
    kind: SignalKind,
    query: &QueryConfig,
) -> Result<ScoreTable> {
    if candidates.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let ids: Vec<usize> = candidates.iter().map(|c| c.id).collect();
    let raw = score_matrix(&[model], dataset, &ids, kind, query)?
        .into_iter()
        .map(|row| row[0])
        .collect();
    let table = ScoreTable {
        ids,
        is_member: candidates.iter().map(|c| c.is_member).collect(),
        raw,
        calibrated: None,
        final_score: None,
    };
    table.validate()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, make_split, DistributionSpec};
    use crate::nn::{init_classifier, train, ParamSet, TrainingConfig};

    fn zero_model() -> MlpClassifier {
        MlpClassifier::from_params(&[2, 2], ParamSet::zeros(&[2, 2])).unwrap()
    }

    #[test]
    fn uniform_logits_signals() {
        let m = zero_model();
        let loss = signal(&m, &[0.3, 0.1], 1, SignalKind::Loss).unwrap();
        assert!((loss + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(signal(&m, &[0.3, 0.1], 1, SignalKind::Confidence).unwrap(), 0.5);
        assert!(signal(&m, &[0.3], 1, SignalKind::Loss).is_err());
    }

    #[test]
    fn gradnorm_vanishes_after_convergence() {
        let x = [1.0, -1.0];
        let ds = TabularDataset::new(vec![x.to_vec()], vec![1], 2).unwrap();
        let cfg = TrainingConfig {
            epochs: 500,
            batch_size: 1,
            weight_decay: 0.0,
            cosine_schedule: false,
            ..TrainingConfig::default()
        };
        let trained = train(&ds, &[0], &cfg, &[2, 4, 2]).unwrap();
        let fresh = init_classifier(&[2, 4, 2], 99).unwrap();
        let s_trained = signal(&trained, &x, 1, SignalKind::Gradnorm).unwrap();
        let s_fresh = signal(&fresh, &x, 1, SignalKind::Gradnorm).unwrap();
        assert!(s_trained > -1e-3, "{s_trained}");
        assert!(s_trained > s_fresh);
    }

    #[test]
    fn averaging_degenerates_to_single_query() {
        let m = init_classifier(&[3, 5, 2], 4).unwrap();
        let x = [0.2, -0.7, 1.1];
        for kind in [SignalKind::Loss, SignalKind::Confidence, SignalKind::Gradnorm] {
            let single = signal(&m, &x, 0, kind).unwrap();
            let one = QueryConfig { num_queries: 1, augmentation_noise_std: 0.3, seed: 1 };
            assert_eq!(averaged_signal(&m, &x, 0, kind, &one, 7).unwrap(), single);
            let still = QueryConfig { num_queries: 8, augmentation_noise_std: 0.0, seed: 1 };
            assert_eq!(averaged_signal(&m, &x, 0, kind, &still, 7).unwrap(), single);
        }
        let zero = QueryConfig { num_queries: 0, ..QueryConfig::default() };
        assert!(averaged_signal(&m, &x, 0, SignalKind::Loss, &zero, 0).is_err());
    }

    #[test]
    fn averaging_does_not_increase_variance() {
        let m = init_classifier(&[3, 8, 2], 12).unwrap();
        let x = [0.4, 0.1, -0.2];
        let var = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let mut averaged = Vec::new();
        let mut single_perturbed = Vec::new();
        for s in 0..200 {
            let q = QueryConfig { num_queries: 8, augmentation_noise_std: 0.05, seed: s };
            averaged.push(averaged_signal(&m, &x, 1, SignalKind::Loss, &q, 0).unwrap());
            let jittered = &q.query_inputs(&x, 0)[1];
            single_perturbed.push(signal(&m, jittered, 1, SignalKind::Loss).unwrap());
        }
        assert!(var(&averaged) <= var(&single_perturbed));
    }

    #[test]
    fn query_stream_depends_on_seed_and_id_only() {
        let q = QueryConfig { num_queries: 3, augmentation_noise_std: 0.1, seed: 5 };
        let x = [1.0, 2.0];
        assert_eq!(q.query_inputs(&x, 3), q.query_inputs(&x, 3));
        assert_ne!(q.query_inputs(&x, 3), q.query_inputs(&x, 4));
        assert_eq!(q.query_inputs(&x, 3)[0], x.to_vec());
    }

    #[test]
    fn table_small_and_deterministic() {
        let spec = DistributionSpec::random_means(2, 3, 1.0, 1.0, 2).unwrap();
        let ds = generate_synthetic(&spec, 10).unwrap();
        let m = init_classifier(&[3, 4, 2], 1).unwrap();
        let cands = candidates(&[0, 1], &[2, 3]);
        let q = QueryConfig { num_queries: 4, augmentation_noise_std: 0.1, seed: 3 };
        let t = build_score_table(&m, &ds, &cands, SignalKind::Loss, &q).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.is_member, vec![true, true, false, false]);
        assert!(t.raw.iter().all(|v| v.is_finite() && *v <= 0.0));
        assert_eq!(t, build_score_table(&m, &ds, &cands, SignalKind::Loss, &q).unwrap());
        assert!(build_score_table(&m, &ds, &[], SignalKind::Loss, &q).is_err());
    }

    #[test]
    fn overfit_model_separates_members() {
        let spec = DistributionSpec::random_means(2, 10, 0.35, 1.0, 3).unwrap();
        let ds = generate_synthetic(&spec, 600).unwrap();
        let plan = make_split(&ds, 1).unwrap();
        let cfg = TrainingConfig { epochs: 60, ..TrainingConfig::default() };
        let m = train(&ds, &plan.target_train, &cfg, &[10, 64, 2]).unwrap();
        let cands = candidates(&plan.target_train, &plan.target_test);
        let t = build_score_table(&m, &ds, &cands, SignalKind::Loss, &QueryConfig::single()).unwrap();
        let mean = |member: bool| {
            let v: Vec<f64> = t.raw.iter().zip(&t.is_member).filter(|(_, &m)| m == member).map(|(s, _)| *s).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false));
    }

    #[test]
    fn csv_roundtrip_with_missing_columns() {
        let t = ScoreTable {
            ids: vec![4, 9],
            is_member: vec![true, false],
            raw: vec![-0.1, -2.000000000000001],
            calibrated: Some(vec![0.4, 1e-300]),
            final_score: None,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        t.write_csv(f.path(), Some("abc")).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("# config_digest: abc\nid,is_member,raw,calibrated,final\n"));
        assert_eq!(ScoreTable::read_csv(f.path()).unwrap(), t);
    }

    #[test]
    fn logit_scale_is_monotone_and_finite() {
        assert_eq!(logit_scale(0.5), 0.0);
        assert!(logit_scale(1.0).is_finite() && logit_scale(0.0).is_finite());
        assert!(logit_scale(0.9) > logit_scale(0.8));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn loss_nonpositive_confidence_in_unit(seed in 0u64..1000, x0 in -5.0f64..5.0, x1 in -5.0f64..5.0, y in 0usize..3) {
                let m = init_classifier(&[2, 6, 3], seed).unwrap();
                let loss = signal(&m, &[x0, x1], y, SignalKind::Loss).unwrap();
                let conf = signal(&m, &[x0, x1], y, SignalKind::Confidence).unwrap();
                prop_assert!(loss <= 0.0);
                prop_assert!((0.0..=1.0).contains(&conf));
            }

            #[test]
            fn permuting_candidates_permutes_rows(seed in 0u64..1000) {
                let spec = DistributionSpec::random_means(2, 3, 1.0, 1.0, seed).unwrap();
                let ds = generate_synthetic(&spec, 12).unwrap();
                let m = init_classifier(&[3, 4, 2], seed).unwrap();
                let q = QueryConfig { num_queries: 3, augmentation_noise_std: 0.2, seed };
                let fwd = candidates(&[0, 1, 2], &[3, 4, 5]);
                let mut rev = fwd.clone();
                rev.reverse();
                let a = build_score_table(&m, &ds, &fwd, SignalKind::Loss, &q).unwrap();
                let b = build_score_table(&m, &ds, &rev, SignalKind::Loss, &q).unwrap();
                let mut b_raw = b.raw.clone();
                b_raw.reverse();
                prop_assert_eq!(a.raw, b_raw);
            }
        }
    }
}
