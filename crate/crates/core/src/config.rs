//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 3
//! hidden_layers = [64]
//! signal = "loss"
//! num_reference_models = 4
//! reference_sampling_mode = "fixed"
//! attacks = ["loss", "calibration", "lira_offline", "rapid", "shortcut_lira"]
//! fpr_levels = [0.001, 0.01, 0.1]
//!
//! [data]
//! source = "synthetic"
//! num_samples = 6000
//! feature_dim = 20
//!
//! [target]
//! epochs = 60
//!
//! [dp]
//! clip_norm = 10.0
//! noise_multiplier = 1.0
//! ```
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, ScoringConfig};
use crate::dataset::{generate_synthetic, load_csv, DistributionSpec, TabularDataset};
use crate::error::{Error, Result};
use crate::nn::{DpConfig, TrainingConfig};
use crate::seed;
use crate::signals::{QueryConfig, SignalKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Every reference model trains on the whole reference pool.
    Fixed,
    /// Each reference model trains on its own random subset of the pool.
    Random,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "random" => Ok(Self::Random),
            other => Err(Error::invalid(format!("unknown sampling mode `{other}`"))),
        }
    }
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Fixed => "fixed",
            SamplingMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Isotropic Gaussian mixture with class means drawn from `N(0, separation^2 I)`.
    Synthetic {
        #[serde(default = "default_num_samples")]
        num_samples: usize,
        #[serde(default = "default_num_classes")]
        num_classes: usize,
        #[serde(default = "default_feature_dim")]
        feature_dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_covariance_scale")]
        covariance_scale: f64,
        /// Defaults to a seed derived from the master seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv { path: PathBuf },
}

fn default_num_samples() -> usize {
    6000
}
fn default_num_classes() -> usize {
    2
}
fn default_feature_dim() -> usize {
    20
}
fn default_separation() -> f64 {
    0.3
}
fn default_covariance_scale() -> f64 {
    1.0
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            num_samples: default_num_samples(),
            num_classes: default_num_classes(),
            feature_dim: default_feature_dim(),
            separation: default_separation(),
            covariance_scale: default_covariance_scale(),
            seed: None,
        }
    }
}

impl DataConfig {
    /// Materializes the dataset. Relative CSV paths resolve against `base_dir`.
    pub fn load(&self, master_seed: u64, label: &str, base_dir: &Path) -> Result<TabularDataset> {
        match self {
            DataConfig::Synthetic {
                num_samples,
                num_classes,
                feature_dim,
                separation,
                covariance_scale,
                seed: data_seed,
            } => {
                let s = data_seed.unwrap_or_else(|| seed::derive(master_seed, label, 0));
                let mut spec = DistributionSpec::random_means(
                    *num_classes,
                    *feature_dim,
                    *separation,
                    *covariance_scale,
                    s,
                )?;
                spec.seed = seed::derive(s, "samples", 0);
                generate_synthetic(&spec, *num_samples)
            }
            DataConfig::Csv { path } => load_csv(&base_dir.join(path)),
        }
    }
}

/// SGD settings of one training stage. The stage's seed is derived from the
/// master seed and never set directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cosine_schedule: bool,
    /// Gaussian input jitter during training; 0 turns it off.
    pub augmentation_noise_std: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            cosine_schedule: t.cosine_schedule,
            augmentation_noise_std: t.augmentation_noise_std,
        }
    }
}

impl StageConfig {
    pub fn training(&self, seed: u64, dp: Option<DpConfig>) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            cosine_schedule: self.cosine_schedule,
            augmentation_noise_std: self.augmentation_noise_std,
            seed,
            dp,
        }
    }
}

/// DP-SGD for the target model, optionally also for the attacker's models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    #[serde(default)]
    pub apply_to_shadow: bool,
    #[serde(default)]
    pub apply_to_reference: bool,
}

impl DpSection {
    pub fn config(&self) -> DpConfig {
        DpConfig {
            clip_norm: self.clip_norm,
            noise_multiplier: self.noise_multiplier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySection {
    pub num_queries: usize,
    pub augmentation_noise_std: f64,
}

impl Default for QuerySection {
    fn default() -> Self {
        let q = QueryConfig::default();
        Self {
            num_queries: q.num_queries,
            augmentation_noise_std: q.augmentation_noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cosine_schedule: bool,
}

impl Default for ScoringSection {
    fn default() -> Self {
        let s = ScoringConfig::default();
        Self {
            hidden_layers: s.hidden_layers,
            learning_rate: s.training.learning_rate,
            momentum: s.training.momentum,
            weight_decay: s.training.weight_decay,
            batch_size: s.training.batch_size,
            epochs: s.training.epochs,
            cosine_schedule: s.training.cosine_schedule,
        }
    }
}

impl ScoringSection {
    pub fn scoring(&self, seed: u64) -> ScoringConfig {
        ScoringConfig {
            hidden_layers: self.hidden_layers.clone(),
            training: TrainingConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                batch_size: self.batch_size,
                epochs: self.epochs,
                cosine_schedule: self.cosine_schedule,
                augmentation_noise_std: 0.0,
                seed,
                dp: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Defaults to a seed derived from the master seed.
    pub split_seed: Option<u64>,
    /// Classifier hidden widths; input and output sizes come from the data.
    pub hidden_layers: Vec<usize>,
    pub signal: SignalKind,
    pub num_reference_models: usize,
    pub reference_sampling_mode: SamplingMode,
    /// Share of the reference pool each model sees in random mode.
    pub reference_fraction: f64,
    pub attacks: Vec<AttackKind>,
    pub fpr_levels: Vec<f64>,
    pub game_rounds: usize,
    /// The game threshold is chosen on shadow scores to reach this FPR.
    pub game_fpr: f64,
    pub data: DataConfig,
    /// Separate data for shadow and reference models. When absent the
    /// attacker's splits come from `data`.
    pub attacker_data: Option<DataConfig>,
    pub query: QuerySection,
    pub target: StageConfig,
    pub shadow: StageConfig,
    pub reference: StageConfig,
    pub dp: Option<DpSection>,
    pub scoring: ScoringSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split_seed: None,
            hidden_layers: vec![64],
            signal: SignalKind::Loss,
            num_reference_models: 4,
            reference_sampling_mode: SamplingMode::Fixed,
            reference_fraction: 0.5,
            attacks: AttackKind::ALL.to_vec(),
            fpr_levels: vec![0.001, 0.01, 0.1],
            game_rounds: 10_000,
            game_fpr: 0.5,
            data: DataConfig::default(),
            attacker_data: None,
            query: QuerySection::default(),
            target: StageConfig::default(),
            shadow: StageConfig::default(),
            reference: StageConfig::default(),
            dp: None,
            scoring: ScoringSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.num_reference_models == 0 {
            return bad("num_reference_models", "must be at least 1");
        }
        if !(self.reference_fraction > 0.0 && self.reference_fraction <= 1.0) {
            return bad("reference_fraction", "must lie in (0, 1]");
        }
        if self.attacks.is_empty() {
            return bad("attacks", "must name at least one attack");
        }
        if let Some(l) = self.fpr_levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return bad("fpr_levels", &format!("{l} is outside (0, 1)"));
        }
        if !(self.game_fpr > 0.0 && self.game_fpr < 1.0) {
            return bad("game_fpr", "must lie in (0, 1)");
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden_layers", "widths must be positive");
        }
        if self.query.num_queries == 0 {
            return bad("query.num_queries", "must be at least 1");
        }
        if !(self.query.augmentation_noise_std >= 0.0 && self.query.augmentation_noise_std.is_finite()) {
            return bad("query.augmentation_noise_std", "must be nonnegative");
        }
        for (name, stage) in [("target", &self.target), ("shadow", &self.shadow), ("reference", &self.reference)] {
            stage
                .training(0, None)
                .validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.scoring
            .scoring(0)
            .training
            .validate()
            .map_err(|e| Error::Config(format!("scoring: {e}")))?;
        if let Some(dp) = &self.dp {
            dp.config().validate().map_err(|e| Error::Config(format!("dp: {e}")))?;
        }
        for (name, data) in std::iter::once(("data", &self.data)).chain(self.attacker_data.iter().map(|d| ("attacker_data", d))) {
            if let DataConfig::Synthetic {
                num_samples,
                num_classes,
                feature_dim,
                separation,
                covariance_scale,
                ..
            } = data
            {
                if *num_classes < 2 || *feature_dim == 0 {
                    return bad(name, "need at least 2 classes and 1 feature");
                }
                if *num_samples < 6 {
                    return bad(&format!("{name}.num_samples"), "must be at least 6");
                }
                if !(*separation > 0.0 && *covariance_scale > 0.0) {
                    return bad(name, "separation and covariance_scale must be positive");
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the config's canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(seed::digest_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn query_config(&self) -> QueryConfig {
        QueryConfig {
            num_queries: self.query.num_queries,
            augmentation_noise_std: self.query.augmentation_noise_std,
            seed: seed::derive(self.seed, "query", 0),
        }
    }

    pub fn wants(&self, attack: AttackKind) -> bool {
        self.attacks.contains(&attack)
    }
}
