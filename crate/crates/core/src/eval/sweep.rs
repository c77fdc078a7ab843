use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::config::{ExperimentConfig, SamplingMode};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::nn::MlpClassifier;
use crate::pipeline::{evaluate, prepare_data, train_models, train_references};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumReferenceModels,
    NumQueries,
    ReferenceSamplingMode,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NumReferenceModels => "num_reference_models",
            SweepAxis::NumQueries => "num_queries",
            SweepAxis::ReferenceSamplingMode => "reference_sampling_mode",
        }
    }

    /// Applies one axis value (as written on the command line) to a config.
    pub fn apply(self, config: &mut ExperimentConfig, value: &str) -> Result<()> {
        let count = || -> Result<usize> {
            match value.parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::invalid(format!("{}: `{value}` is not a positive integer", self.name()))),
            }
        };
        match self {
            SweepAxis::NumReferenceModels => config.num_reference_models = count()?,
            SweepAxis::NumQueries => config.query.num_queries = count()?,
            SweepAxis::ReferenceSamplingMode => config.reference_sampling_mode = value.parse()?,
        }
        Ok(())
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::NumReferenceModels,
            SweepAxis::NumQueries,
            SweepAxis::ReferenceSamplingMode,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown sweep axis `{s}`")))
    }
}

/// Metrics of every attack for one `(axis value, seed)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub value: String,
    pub seed: u64,
    pub metrics: Vec<(AttackKind, MetricsReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub metric: String,
    pub result: f64,
}

/// Reruns the affected stage for every axis value under every master seed.
/// Target and shadow models are trained once per seed; reference models are
/// trained once per sampling mode and truncated for smaller counts.
pub fn sweep(
    config: &ExperimentConfig,
    base_dir: &Path,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::invalid("a sweep needs at least one value"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("a sweep needs at least one seed"));
    }
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| {
            let mut c = config.clone();
            axis.apply(&mut c, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;

    let per_seed: Vec<Vec<SweepCell>> = seeds
        .par_iter()
        .map(|&s| {
            let seeded: Vec<ExperimentConfig> = configs
                .iter()
                .map(|c| ExperimentConfig { seed: s, ..c.clone() })
                .collect();
            let base = ExperimentConfig { seed: s, ..config.clone() };
            let data = prepare_data(&base, base_dir)?;
            let mut trained = train_models(&ExperimentConfig { num_reference_models: 1, ..base.clone() }, &data)?;
            trained.references.clear();

            let mut refs: Vec<(SamplingMode, Vec<MlpClassifier>)> = Vec::new();
            for mode in [SamplingMode::Fixed, SamplingMode::Random] {
                let need = seeded
                    .iter()
                    .filter(|c| c.reference_sampling_mode == mode)
                    .map(|c| c.num_reference_models)
                    .max();
                if let Some(n) = need {
                    refs.push((mode, train_references(&base, &data, mode, n)?));
                }
            }

            seeded
                .iter()
                .zip(values)
                .map(|(c, v)| {
                    let pool = &refs
                        .iter()
                        .find(|(m, _)| *m == c.reference_sampling_mode)
                        .expect("trained above")
                        .1;
                    let uses_refs = c.attacks.iter().any(|&a| a != AttackKind::Loss);
                    let prefix = if uses_refs { &pool[..c.num_reference_models] } else { &pool[..0] };
                    let outcome = evaluate(c, &data, &trained.target, &trained.shadow, prefix)?;
                    Ok(SweepCell {
                        value: v.clone(),
                        seed: s,
                        metrics: outcome.metrics.into_iter().collect(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(SweepResult {
        axis,
        cells: per_seed.into_iter().flatten().collect(),
    })
}

impl SweepResult {
    /// Long format, ordered by value, then seed, then attack and metric.
    pub fn rows(&self) -> Vec<SweepRow> {
        let mut cells: Vec<(usize, &SweepCell)> = Vec::new();
        let mut order: Vec<&str> = Vec::new();
        for cell in &self.cells {
            if !order.contains(&cell.value.as_str()) {
                order.push(&cell.value);
            }
        }
        for cell in &self.cells {
            cells.push((order.iter().position(|v| *v == cell.value).unwrap(), cell));
        }
        cells.sort_by_key(|(k, c)| (*k, c.seed));

        let mut rows = Vec::new();
        for (_, cell) in cells {
            for (attack, m) in &cell.metrics {
                let mut push = |metric: String, result: f64| {
                    rows.push(SweepRow {
                        axis: self.axis.name().to_string(),
                        value: cell.value.clone(),
                        seed: cell.seed,
                        metric,
                        result,
                    })
                };
                let name = attack.name();
                push(format!("{name}.auc"), m.auc);
                push(format!("{name}.balanced_accuracy"), m.balanced_accuracy);
                let mut levels: Vec<(&String, f64)> = m.tpr_at_fpr.iter().map(|(k, v)| (k, v.tpr)).collect();
                levels.sort_by(|a, b| {
                    let pa: f64 = a.0.parse().unwrap_or(f64::NAN);
                    let pb: f64 = b.0.parse().unwrap_or(f64::NAN);
                    pa.total_cmp(&pb)
                });
                for (level, tpr) in levels {
                    push(format!("{name}.tpr@{level}"), tpr);
                }
            }
        }
        rows
    }

    /// Mean of one metric across seeds for one axis value.
    pub fn mean(&self, value: &str, attack: AttackKind, metric: impl Fn(&MetricsReport) -> f64) -> Option<f64> {
        let picked: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.value == value)
            .filter_map(|c| c.metrics.iter().find(|(a, _)| *a == attack).map(|(_, m)| metric(m)))
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }

    /// `axis,value,seed,metric,result` with a digest comment line.
    pub fn write_csv(&self, path: &Path, config_digest: &str) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# config_digest: {config_digest}").map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        for row in self.rows() {
            writer.serialize(row)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        reader
            .deserialize()
            .map(|r| r.map_err(Error::from))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::pipeline::run_experiment;

    fn tiny(seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.data = DataConfig::Synthetic {
            num_samples: 300,
            num_classes: 2,
            feature_dim: 3,
            separation: 0.5,
            covariance_scale: 1.0,
            seed: None,
        };
        c.hidden_layers = vec![8];
        c.num_reference_models = 2;
        c.query.num_queries = 3;
        for stage in [&mut c.target, &mut c.shadow, &mut c.reference] {
            stage.epochs = 3;
        }
        c.scoring.hidden_layers = vec![4, 4, 4];
        c.scoring.epochs = 2;
        c.game_rounds = 50;
        c
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn axis_names_parse() {
        for a in [SweepAxis::NumReferenceModels, SweepAxis::NumQueries, SweepAxis::ReferenceSamplingMode] {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("learning_rate".parse::<SweepAxis>().is_err());
        let mut c = tiny(0);
        assert!(SweepAxis::NumQueries.apply(&mut c, "0").is_err());
        assert!(SweepAxis::ReferenceSamplingMode.apply(&mut c, "sometimes").is_err());
    }

    #[test]
    fn single_value_matches_plain_run() {
        let mut c = tiny(5);
        c.query.num_queries = 1;
        let plain = run_experiment(&c, Path::new(".")).unwrap();
        for axis in [SweepAxis::NumQueries, SweepAxis::NumReferenceModels] {
            let value = if axis == SweepAxis::NumQueries { "1" } else { "2" };
            let res = sweep(&c, Path::new("."), axis, &strings(&[value]), &[5]).unwrap();
            assert_eq!(res.cells.len(), 1);
            let swept: Vec<(AttackKind, MetricsReport)> = plain.metrics.clone().into_iter().collect();
            assert_eq!(res.cells[0].metrics, swept, "{}", axis.name());
        }
    }

    #[test]
    fn long_format_cardinality_and_roundtrip() {
        let c = tiny(6);
        let values = strings(&["1", "2", "4", "8"]);
        let res = sweep(&c, Path::new("."), SweepAxis::NumQueries, &values, &[1, 2]).unwrap();
        // per attack: auc, balanced accuracy, one TPR per level
        let per_cell = c.attacks.len() * (2 + c.fpr_levels.len());
        let rows = res.rows();
        assert_eq!(rows.len(), values.len() * 2 * per_cell);
        assert_eq!(rows[0].value, "1");
        assert_eq!(rows.last().unwrap().value, "8");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        res.write_csv(&path, "dg").unwrap();
        assert_eq!(SweepResult::read_rows(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_digest: dg\naxis,value,seed,metric,result\n"));
    }

    #[test]
    fn rejects_empty_inputs() {
        let c = tiny(0);
        assert!(sweep(&c, Path::new("."), SweepAxis::NumQueries, &[], &[0]).is_err());
        assert!(sweep(&c, Path::new("."), SweepAxis::NumQueries, &strings(&["1"]), &[]).is_err());
    }
}
