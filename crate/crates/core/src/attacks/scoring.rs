//! The scoring-model attack: a small sigmoid MLP over the pair (raw score,
//! calibrated score), trained on shadow-model membership labels. Keeping the
//! raw score as an input lets the model overrule calibration when the raw
//! loss is too large for a member.

use serde::{Deserialize, Serialize};

use super::AttackOutput;
use crate::dataset::TabularDataset;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, train_with, BinaryCrossEntropy, MlpClassifier, TrainingConfig};
use crate::signals::ScoreTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Hidden widths between the 2-unit input and the single output.
    pub hidden_layers: Vec<usize>,
    pub training: TrainingConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64, 64],
            training: TrainingConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                batch_size: 64,
                epochs: 40,
                cosine_schedule: true,
                augmentation_noise_std: 0.0,
                seed: 0,
                dp: None,
            },
        }
    }
}

impl ScoringConfig {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![2];
        sizes.extend(&self.hidden_layers);
        sizes.push(1);
        sizes
    }
}

/// MLP plus the z-scoring statistics of its two inputs, taken from shadow data.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringModel {
    pub mlp: MlpClassifier,
    pub means: [f64; 2],
    pub stds: [f64; 2],
}

fn column_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // a constant column carries no information; leave it centered at zero
    (mean, if std > 0.0 { std } else { 1.0 })
}

impl ScoringModel {
    /// Trains on `(raw[i], second[i])` against membership labels.
    pub fn fit(raw: &[f64], second: &[f64], is_member: &[bool], config: &ScoringConfig) -> Result<Self> {
        if raw.len() != second.len() || raw.len() != is_member.len() {
            return Err(Error::invalid("scoring inputs have different lengths"));
        }
        let members = is_member.iter().filter(|&&m| m).count();
        if members == 0 || members == is_member.len() {
            return Err(Error::invalid(
                "scoring model needs both members and non-members in the shadow data",
            ));
        }
        if raw.iter().chain(second).any(|v| !v.is_finite()) {
            return Err(Error::invalid("scoring inputs must be finite"));
        }
        let (m0, s0) = column_stats(raw);
        let (m1, s1) = column_stats(second);
        let means = [m0, m1];
        let stds = [s0, s1];
        let rows: Vec<Vec<f64>> = raw
            .iter()
            .zip(second)
            .map(|(&a, &b)| vec![(a - m0) / s0, (b - m1) / s1])
            .collect();
        let labels: Vec<usize> = is_member.iter().map(|&m| usize::from(m)).collect();
        let data = TabularDataset::new(rows, labels, 2)?;
        let indices: Vec<usize> = (0..data.len()).collect();
        let report = train_with(
            &BinaryCrossEntropy,
            &data,
            &indices,
            &config.training,
            &config.layer_sizes(),
        )?;
        Ok(Self {
            mlp: report.model,
            means,
            stds,
        })
    }

    /// Membership probability in the open interval (0, 1).
    pub fn score(&self, raw: f64, second: f64) -> Result<f64> {
        let z = [
            (raw - self.means[0]) / self.stds[0],
            (second - self.means[1]) / self.stds[1],
        ];
        let logit = self.mlp.forward(&z)?[0];
        Ok(sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    pub fn score_all(&self, raw: &[f64], second: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != second.len() {
            return Err(Error::invalid("scoring inputs have different lengths"));
        }
        raw.iter().zip(second).map(|(&a, &b)| self.score(a, b)).collect()
    }

    /// The classifier JSON format with `feature_means` and `feature_stds` added.
    pub fn to_json(&self) -> Result<String> {
        let mut value: serde_json::Value = serde_json::from_str(&self.mlp.to_json()?)?;
        let obj = value.as_object_mut().expect("model JSON is an object");
        obj.insert("feature_means".into(), serde_json::to_value(self.means)?);
        obj.insert("feature_stds".into(), serde_json::to_value(self.stds)?);
        Ok(serde_json::to_string(&value)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::invalid("scoring model JSON must be an object"))?;
        let take = |obj: &mut serde_json::Map<String, serde_json::Value>, key: &str| -> Result<[f64; 2]> {
            let v = obj
                .remove(key)
                .ok_or_else(|| Error::invalid(format!("scoring model JSON lacks `{key}`")))?;
            Ok(serde_json::from_value(v)?)
        };
        let means = take(obj, "feature_means")?;
        let stds = take(obj, "feature_stds")?;
        let mlp = MlpClassifier::from_json(&serde_json::to_string(&value)?)?;
        if mlp.input_dim() != 2 || mlp.output_dim() != 1 {
            return Err(Error::invalid("scoring model must map 2 inputs to 1 output"));
        }
        Ok(Self { mlp, means, stds })
    }
}

/// Trains the scoring model on a shadow table's `(raw, calibrated)` columns.
pub fn train_scoring_model(shadow: &ScoreTable, config: &ScoringConfig) -> Result<ScoringModel> {
    let calibrated = shadow
        .calibrated
        .as_ref()
        .ok_or_else(|| Error::invalid("shadow table has no calibrated scores"))?;
    ScoringModel::fit(&shadow.raw, calibrated, &shadow.is_member, config)
}

/// `sigmoid(MLP(standardize(raw, calibrated)))` for every target sample.
pub fn attack_rapid(target: &ScoreTable, model: &ScoringModel) -> Result<AttackOutput> {
    let calibrated = target
        .calibrated
        .as_ref()
        .ok_or_else(|| Error::invalid("target table has no calibrated scores"))?;
    Ok(AttackOutput::new(
        "rapid",
        target.ids.clone(),
        model.score_all(&target.raw, calibrated)?,
    ))
}

/// Same mechanics as [`attack_rapid`] with LiRA-offline scores in place of
/// the calibrated column. `model` must have been fit on shadow `(raw, lira)` pairs.
pub fn attack_shortcut_lira(target: &ScoreTable, lira_scores: &[f64], model: &ScoringModel) -> Result<AttackOutput> {
    if lira_scores.len() != target.len() {
        return Err(Error::invalid("one LiRA score per target sample is required"));
    }
    Ok(AttackOutput::new(
        "shortcut_lira",
        target.ids.clone(),
        model.score_all(&target.raw, lira_scores)?,
    ))
}
