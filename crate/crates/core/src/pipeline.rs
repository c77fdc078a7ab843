//! End-to-end audit: split, train target/shadow/reference models, build score
//! tables, run the selected attacks and evaluate them.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::{
    attack_calibration, attack_lira_offline, attack_loss, calibrate, AttackKind, AttackOutput, ScoringModel,
};
use crate::config::{ExperimentConfig, SamplingMode};
use crate::dataset::{make_split, sample_reference_subset, SplitPlan, TabularDataset};
use crate::error::{Error, Result};
use crate::eval::{
    calibrate_threshold, loss_bucket_report, roc, run_security_game, GameResult, LossBucketReport, MetricsReport,
};
use crate::nn::{accuracy, cross_entropy, train, MlpClassifier};
use crate::seed;
use crate::signals::{candidates, score_matrix, ScoreTable};

/// Datasets and splits. The target side always comes from `target`; the
/// shadow and reference side from `attacker` when one is configured.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub target: TabularDataset,
    pub target_plan: SplitPlan,
    pub attacker: Option<TabularDataset>,
    pub attacker_plan: Option<SplitPlan>,
}

impl PreparedData {
    pub fn attacker_data(&self) -> &TabularDataset {
        self.attacker.as_ref().unwrap_or(&self.target)
    }

    pub fn attacker_split(&self) -> &SplitPlan {
        self.attacker_plan.as_ref().unwrap_or(&self.target_plan)
    }
}

pub fn prepare_data(config: &ExperimentConfig, base_dir: &Path) -> Result<PreparedData> {
    let split_seed = config
        .split_seed
        .unwrap_or_else(|| seed::derive(config.seed, "split", 0));
    let target = config.data.load(config.seed, "data", base_dir)?;
    let target_plan = make_split(&target, split_seed)?;
    let (attacker, attacker_plan) = match &config.attacker_data {
        None => (None, None),
        Some(source) => {
            let ds = source.load(config.seed, "attacker-data", base_dir)?;
            if ds.feature_dim() != target.feature_dim() || ds.num_classes() != target.num_classes() {
                return Err(Error::Config(format!(
                    "attacker_data: shape {}x{} classes differs from data {}x{}",
                    ds.feature_dim(),
                    ds.num_classes(),
                    target.feature_dim(),
                    target.num_classes()
                )));
            }
            let plan = make_split(&ds, seed::derive(split_seed, "attacker", 0))?;
            (Some(ds), Some(plan))
        }
    };
    Ok(PreparedData {
        target,
        target_plan,
        attacker,
        attacker_plan,
    })
}

pub fn layer_sizes(config: &ExperimentConfig, data: &TabularDataset) -> Vec<usize> {
    let mut sizes = vec![data.feature_dim()];
    sizes.extend(&config.hidden_layers);
    sizes.push(data.num_classes());
    sizes
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub target: MlpClassifier,
    pub shadow: MlpClassifier,
    /// Reference model `i` depends only on `(master seed, i)`, so a prefix of
    /// this list is what a run with fewer references would train.
    pub references: Vec<MlpClassifier>,
}

enum Job {
    Target,
    Shadow,
    Reference(usize),
}

fn train_job(config: &ExperimentConfig, data: &PreparedData, mode: SamplingMode, job: &Job) -> Result<MlpClassifier> {
    let dp = config.dp.as_ref();
    let master = config.seed;
    let (ds, indices, training) = match *job {
        Job::Target => (
            &data.target,
            data.target_plan.target_train.clone(),
            config
                .target
                .training(seed::derive(master, "target", 0), dp.map(|d| d.config())),
        ),
        Job::Shadow => (
            data.attacker_data(),
            data.attacker_split().shadow_train.clone(),
            config.shadow.training(
                seed::derive(master, "shadow", 0),
                dp.filter(|d| d.apply_to_shadow).map(|d| d.config()),
            ),
        ),
        Job::Reference(i) => {
            let plan = data.attacker_split();
            let indices = match mode {
                SamplingMode::Fixed => plan.reference_pool.clone(),
                SamplingMode::Random => sample_reference_subset(
                    plan,
                    config.reference_fraction,
                    seed::derive(master, "ref-subset", i as u64),
                )?,
            };
            (
                data.attacker_data(),
                indices,
                config.reference.training(
                    seed::derive(master, "ref", i as u64),
                    dp.filter(|d| d.apply_to_reference).map(|d| d.config()),
                ),
            )
        }
    };
    train(ds, &indices, &training, &layer_sizes(config, ds))
}

fn run_jobs(config: &ExperimentConfig, data: &PreparedData, mode: SamplingMode, jobs: &[Job]) -> Result<Vec<MlpClassifier>> {
    jobs.par_iter().map(|j| train_job(config, data, mode, j)).collect()
}

/// Trains `count` reference models under the given sampling mode.
pub fn train_references(
    config: &ExperimentConfig,
    data: &PreparedData,
    mode: SamplingMode,
    count: usize,
) -> Result<Vec<MlpClassifier>> {
    let jobs: Vec<Job> = (0..count).map(Job::Reference).collect();
    run_jobs(config, data, mode, &jobs)
}

/// Trains the target, the shadow and, when any selected attack needs them,
/// the reference models, all concurrently.
pub fn train_models(config: &ExperimentConfig, data: &PreparedData) -> Result<TrainedModels> {
    let refs = if needs_references(config) { config.num_reference_models } else { 0 };
    let mut jobs = vec![Job::Target, Job::Shadow];
    jobs.extend((0..refs).map(Job::Reference));
    let mut models = run_jobs(config, data, config.reference_sampling_mode, &jobs)?.into_iter();
    let target = models.next().expect("target job");
    let shadow = models.next().expect("shadow job");
    Ok(TrainedModels {
        target,
        shadow,
        references: models.collect(),
    })
}

fn needs_references(config: &ExperimentConfig) -> bool {
    config.attacks.iter().any(|&a| a != AttackKind::Loss)
}

/// Everything a run computes, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_digest: String,
    pub target_table: ScoreTable,
    pub shadow_table: ScoreTable,
    pub outputs: BTreeMap<AttackKind, AttackOutput>,
    pub shadow_outputs: BTreeMap<AttackKind, AttackOutput>,
    pub metrics: BTreeMap<AttackKind, MetricsReport>,
    pub loss_buckets: Option<LossBucketReport>,
    pub target_train_accuracy: f64,
    pub target_test_accuracy: f64,
}

struct Side<'a> {
    data: &'a TabularDataset,
    table: ScoreTable,
    ref_scores: Vec<Vec<f64>>,
}

fn build_side<'a>(
    config: &ExperimentConfig,
    data: &'a TabularDataset,
    model: &MlpClassifier,
    references: &[MlpClassifier],
    members: &[usize],
    nonmembers: &[usize],
) -> Result<Side<'a>> {
    let cands = candidates(members, nonmembers);
    let ids: Vec<usize> = cands.iter().map(|c| c.id).collect();
    let query = config.query_config();
    let raw: Vec<f64> = score_matrix(&[model], data, &ids, config.signal, &query)?
        .into_iter()
        .map(|row| row[0])
        .collect();
    let (calibrated, ref_scores) = if references.is_empty() {
        (None, Vec::new())
    } else {
        let refs: Vec<&MlpClassifier> = references.iter().collect();
        let ref_scores = score_matrix(&refs, data, &ids, config.signal, &query)?;
        (Some(calibrate(&raw, &ref_scores)?), ref_scores)
    };
    let table = ScoreTable {
        ids,
        is_member: cands.iter().map(|c| c.is_member).collect(),
        raw,
        calibrated,
        final_score: None,
    };
    table.validate()?;
    Ok(Side {
        data,
        table,
        ref_scores,
    })
}

/// Runs every selected attack on both sides and evaluates the target side.
/// `references` may be a prefix of the trained list.
pub fn evaluate(
    config: &ExperimentConfig,
    data: &PreparedData,
    target: &MlpClassifier,
    shadow: &MlpClassifier,
    references: &[MlpClassifier],
) -> Result<RunOutcome> {
    config.validate()?;
    let digest = config.digest()?;
    if needs_references(config) && references.is_empty() {
        return Err(Error::invalid("the selected attacks need at least one reference model"));
    }
    let tplan = &data.target_plan;
    let aplan = data.attacker_split();
    let (t_side, s_side) = rayon::join(
        || build_side(config, &data.target, target, references, &tplan.target_train, &tplan.target_test),
        || build_side(config, data.attacker_data(), shadow, references, &aplan.shadow_train, &aplan.shadow_test),
    );
    let (t_side, s_side) = (t_side?, s_side?);

    let mut outputs = BTreeMap::new();
    let mut shadow_outputs = BTreeMap::new();
    let wants = |a| config.wants(a);
    if wants(AttackKind::Loss) {
        outputs.insert(AttackKind::Loss, attack_loss(&t_side.table)?);
        shadow_outputs.insert(AttackKind::Loss, attack_loss(&s_side.table)?);
    }
    if wants(AttackKind::Calibration) {
        outputs.insert(AttackKind::Calibration, attack_calibration(&t_side.table)?);
        shadow_outputs.insert(AttackKind::Calibration, attack_calibration(&s_side.table)?);
    }
    let lira_needed = wants(AttackKind::LiraOffline) || wants(AttackKind::ShortcutLira);
    let lira = if lira_needed {
        Some((
            attack_lira_offline(&t_side.table, &t_side.ref_scores)?,
            attack_lira_offline(&s_side.table, &s_side.ref_scores)?,
        ))
    } else {
        None
    };
    if wants(AttackKind::LiraOffline) {
        let (t, s) = lira.clone().expect("computed above");
        outputs.insert(AttackKind::LiraOffline, t);
        shadow_outputs.insert(AttackKind::LiraOffline, s);
    }

    let scoring_jobs: Vec<(AttackKind, &str)> = [(AttackKind::Rapid, "scoring"), (AttackKind::ShortcutLira, "scoring-lira")]
        .into_iter()
        .filter(|(a, _)| wants(*a))
        .collect();
    let scored: Vec<(AttackKind, AttackOutput, AttackOutput)> = scoring_jobs
        .par_iter()
        .map(|&(attack, label)| {
            let (t_second, s_second) = match attack {
                AttackKind::Rapid => (
                    t_side.table.calibrated.clone().expect("references present"),
                    s_side.table.calibrated.clone().expect("references present"),
                ),
                _ => {
                    let (t, s) = lira.as_ref().expect("computed above");
                    (t.scores.clone(), s.scores.clone())
                }
            };
            let cfg = config.scoring.scoring(seed::derive(config.seed, label, 0));
            let model = ScoringModel::fit(&s_side.table.raw, &s_second, &s_side.table.is_member, &cfg)?;
            let t_scores = model.score_all(&t_side.table.raw, &t_second)?;
            let s_scores = model.score_all(&s_side.table.raw, &s_second)?;
            Ok((
                attack,
                AttackOutput::new(attack.name(), t_side.table.ids.clone(), t_scores),
                AttackOutput::new(attack.name(), s_side.table.ids.clone(), s_scores),
            ))
        })
        .collect::<Result<_>>()?;
    for (attack, t, s) in scored {
        outputs.insert(attack, t);
        shadow_outputs.insert(attack, s);
    }

    let mut metrics = BTreeMap::new();
    for (k, (attack, out)) in outputs.iter_mut().enumerate() {
        let shadow_out = &shadow_outputs[attack];
        out.config_digest = digest.clone();
        out.seed = config.seed;
        let mut report = MetricsReport::compute(
            attack.name(),
            &digest,
            &out.scores,
            &t_side.table.is_member,
            &config.fpr_levels,
            Some((&shadow_out.scores, &s_side.table.is_member)),
        )?;
        let threshold = calibrate_threshold(&shadow_out.scores, &s_side.table.is_member, config.game_fpr)?;
        let game = run_security_game(
            &t_side.table.ids,
            &out.scores,
            &t_side.table.is_member,
            threshold,
            config.game_rounds,
            seed::derive(config.seed, "game", k as u64),
        )?;
        report.security_game = Some(GameResult {
            threshold,
            rounds: config.game_rounds,
            accuracy: game.accuracy,
        });
        metrics.insert(*attack, report);
    }

    let loss_buckets = match &t_side.table.calibrated {
        Some(cal) => {
            let losses = t_side
                .table
                .ids
                .iter()
                .map(|&id| cross_entropy(&target.forward(t_side.data.row(id))?, t_side.data.label(id)))
                .collect::<Result<Vec<f64>>>()?;
            Some(loss_bucket_report(&losses, cal, &t_side.table.is_member)?)
        }
        None => None,
    };

    Ok(RunOutcome {
        config_digest: digest,
        target_train_accuracy: accuracy(target, &data.target, &tplan.target_train)?,
        target_test_accuracy: accuracy(target, &data.target, &tplan.target_test)?,
        target_table: t_side.table,
        shadow_table: s_side.table,
        outputs,
        shadow_outputs,
        metrics,
        loss_buckets,
    })
}

/// Data preparation, training and evaluation in one call.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let data = prepare_data(config, base_dir)?;
    let models = train_models(config, &data)?;
    evaluate(config, &data, &models.target, &models.shadow, &models.references)
}

pub const INCOMPLETE_MARKER: &str = "RUN_INCOMPLETE";

#[derive(Serialize)]
struct ConfigArtifact<'a> {
    config_digest: &'a str,
    config: &'a ExperimentConfig,
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_artifacts(config: &ExperimentConfig, outcome: &RunOutcome, dir: &Path) -> Result<()> {
    let digest = &outcome.config_digest;
    let config_path = dir.join("config.json");
    let text = serde_json::to_string_pretty(&ConfigArtifact {
        config_digest: digest,
        config,
    })? + "\n";
    std::fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;

    outcome
        .target_table
        .write_csv(&dir.join("score_table_target.csv"), Some(digest))?;
    outcome
        .shadow_table
        .write_csv(&dir.join("score_table_shadow.csv"), Some(digest))?;
    for (attack, out) in &outcome.outputs {
        let name = attack.name();
        out.write(dir, &format!("scores_{name}"))?;
        roc(&out.scores, &outcome.target_table.is_member)?.write_csv(&dir.join(format!("roc_{name}.csv")), digest)?;
        outcome.metrics[attack].write(&dir.join(format!("metrics_{name}.json")))?;
    }
    if let Some(buckets) = &outcome.loss_buckets {
        buckets.write_csv(&dir.join("loss_buckets.csv"), digest)?;
    }
    Ok(())
}

/// Runs the experiment into `out_dir`. A `RUN_INCOMPLETE` marker exists
/// while the run is in progress and stays behind, holding the error, if it fails.
pub fn run_to_dir(config: &ExperimentConfig, base_dir: &Path, out_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join(INCOMPLETE_MARKER);
    std::fs::write(&marker, "running\n").map_err(|e| Error::io(&marker, e))?;
    let result = run_experiment(config, base_dir).and_then(|outcome| {
        write_artifacts(config, &outcome, out_dir)?;
        Ok(outcome)
    });
    match result {
        Ok(outcome) => {
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            Ok(outcome)
        }
        Err(e) => {
            // best effort: the original error matters more than a failed marker write
            let _ = std::fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;

    fn small_config(seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.data = DataConfig::Synthetic {
            num_samples: 600,
            num_classes: 2,
            feature_dim: 4,
            separation: 0.5,
            covariance_scale: 1.0,
            seed: None,
        };
        c.hidden_layers = vec![16];
        c.num_reference_models = 2;
        c.query.num_queries = 2;
        for stage in [&mut c.target, &mut c.shadow, &mut c.reference] {
            stage.epochs = 5;
        }
        c.scoring.epochs = 3;
        c.scoring.hidden_layers = vec![8, 8, 8];
        c.game_rounds = 200;
        c
    }

    #[test]
    fn run_produces_every_selected_attack() {
        let c = small_config(1);
        let out = run_experiment(&c, Path::new(".")).unwrap();
        assert_eq!(out.outputs.len(), 5);
        assert_eq!(out.target_table.len(), 200);
        for m in out.metrics.values() {
            assert!((0.0..=1.0).contains(&m.auc));
            assert_eq!(m.tpr_at_fpr.len(), 3);
            assert!(m.security_game.as_ref().unwrap().accuracy.is_some());
        }
        assert!(out.loss_buckets.is_some());
    }

    #[test]
    fn loss_only_skips_references() {
        let mut c = small_config(2);
        c.attacks = vec![AttackKind::Loss];
        let data = prepare_data(&c, Path::new(".")).unwrap();
        let models = train_models(&c, &data).unwrap();
        assert!(models.references.is_empty());
        let out = evaluate(&c, &data, &models.target, &models.shadow, &models.references).unwrap();
        assert_eq!(out.outputs.keys().copied().collect::<Vec<_>>(), vec![AttackKind::Loss]);
        assert!(out.target_table.calibrated.is_none());
        assert!(out.loss_buckets.is_none());
    }

    #[test]
    fn reference_models_are_nested() {
        let mut c = small_config(3);
        let data = prepare_data(&c, Path::new(".")).unwrap();
        let four = train_references(&c, &data, SamplingMode::Random, 3).unwrap();
        c.num_reference_models = 1;
        let one = train_references(&c, &data, SamplingMode::Random, 1).unwrap();
        assert_eq!(one[0], four[0]);
    }

    #[test]
    fn attacker_data_keeps_target_side() {
        let mut c = small_config(4);
        c.attacks = vec![AttackKind::Loss, AttackKind::Calibration];
        let base = run_experiment(&c, Path::new(".")).unwrap();
        c.attacker_data = Some(c.data.clone());
        if let Some(DataConfig::Synthetic { seed, .. }) = c.attacker_data.as_mut() {
            *seed = Some(99);
        }
        let split = run_experiment(&c, Path::new(".")).unwrap();
        assert_eq!(split.target_table.ids, base.target_table.ids);
        assert_eq!(split.target_table.raw, base.target_table.raw);
        assert_ne!(split.shadow_table.raw, base.shadow_table.raw);
    }
}
