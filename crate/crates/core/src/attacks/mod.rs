//! Membership inference attacks. Each maps score tables to one final score per
//! sample; thresholding happens in [`crate::eval`].

mod gaussian;
mod scoring;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::ScoreTable;

pub use gaussian::{
    attack_lira_offline, fit_gaussian, gaussian_difference, normal_cdf, GaussianFit, GaussianPair,
    VARIANCE_FLOOR,
};
pub use scoring::{attack_rapid, attack_shortcut_lira, train_scoring_model, ScoringConfig, ScoringModel};

/// The attacks an experiment can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Loss,
    Calibration,
    LiraOffline,
    Rapid,
    ShortcutLira,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Loss,
        AttackKind::Calibration,
        AttackKind::LiraOffline,
        AttackKind::Rapid,
        AttackKind::ShortcutLira,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Loss => "loss",
            AttackKind::Calibration => "calibration",
            AttackKind::LiraOffline => "lira_offline",
            AttackKind::Rapid => "rapid",
            AttackKind::ShortcutLira => "shortcut_lira",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attack `{s}`")))
    }
}

/// Final per-sample scores of one attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutput {
    pub attack: String,
    pub config_digest: String,
    pub seed: u64,
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    attack: String,
    config_digest: String,
    seed: u64,
}

impl AttackOutput {
    pub fn new(attack: &str, ids: Vec<usize>, scores: Vec<f64>) -> Self {
        Self {
            attack: attack.to_string(),
            config_digest: String::new(),
            seed: 0,
            ids,
            scores,
        }
    }

    pub fn with_provenance(mut self, config_digest: &str, seed: u64) -> Self {
        self.config_digest = config_digest.to_string();
        self.seed = seed;
        self
    }

    /// Writes `<stem>.csv` (`id,score`) and the `<stem>.json` sidecar.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        writeln!(file, "# config_digest: {}", self.config_digest).map_err(|e| Error::io(&csv_path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["id", "score"])?;
        for (id, s) in self.ids.iter().zip(&self.scores) {
            writer.write_record([id.to_string(), s.to_string()])?;
        }
        writer.flush().map_err(|e| Error::io(&csv_path, e))?;

        let json_path = dir.join(format!("{stem}.json"));
        let sidecar = Sidecar {
            attack: self.attack.clone(),
            config_digest: self.config_digest.clone(),
            seed: self.seed,
        };
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)? + "\n")
            .map_err(|e| Error::io(&json_path, e))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(dir.join(format!("{stem}.csv")))?;
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        for record in reader.deserialize() {
            let (id, score): (usize, f64) = record?;
            ids.push(id);
            scores.push(score);
        }
        Ok(Self {
            attack: sidecar.attack,
            config_digest: sidecar.config_digest,
            seed: sidecar.seed,
            ids,
            scores,
        })
    }
}

/// Loss-threshold baseline: the raw score is the final score.
pub fn attack_loss(table: &ScoreTable) -> Result<AttackOutput> {
    table.validate()?;
    Ok(AttackOutput::new("loss", table.ids.clone(), table.raw.clone()))
}

/// Difficulty calibration: `raw[i] - mean_m(ref_scores[i][m])`.
pub fn calibrate(raw: &[f64], ref_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    if raw.len() != ref_scores.len() {
        return Err(Error::invalid(format!(
            "{} raw scores but {} reference rows",
            raw.len(),
            ref_scores.len()
        )));
    }
    raw.iter()
        .zip(ref_scores)
        .map(|(&s, refs)| {
            if refs.is_empty() {
                return Err(Error::invalid("calibration needs at least one reference model"));
            }
            Ok(s - refs.iter().sum::<f64>() / refs.len() as f64)
        })
        .collect()
}

/// Final score is the calibrated score.
pub fn attack_calibration(table: &ScoreTable) -> Result<AttackOutput> {
    let calibrated = table
        .calibrated
        .as_ref()
        .ok_or_else(|| Error::invalid("score table has no calibrated scores"))?;
    Ok(AttackOutput::new("calibration", table.ids.clone(), calibrated.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(raw: Vec<f64>, calibrated: Option<Vec<f64>>) -> ScoreTable {
        ScoreTable {
            ids: (0..raw.len()).collect(),
            is_member: vec![false; raw.len()],
            raw,
            calibrated,
            final_score: None,
        }
    }

    #[test]
    fn loss_attack_passes_scores_through() {
        let out = attack_loss(&table(vec![-0.1, -2.0], None)).unwrap();
        assert_eq!(out.scores, vec![-0.1, -2.0]);
        assert_eq!(out.attack, "loss");
        assert!(attack_loss(&table(vec![], None)).unwrap().scores.is_empty());
    }

    #[test]
    fn calibrate_examples() {
        let c = calibrate(&[-0.1, -2.0], &[vec![-0.5], vec![-0.5]]).unwrap();
        assert!((c[0] - 0.4).abs() < 1e-15 && (c[1] + 1.5).abs() < 1e-15);

        let c = calibrate(&[-0.3, -1.2], &[vec![-0.3, -0.3], vec![-1.2]]).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);

        let c = calibrate(&[-0.2], &[vec![-0.1, -0.3, -0.2, -0.4]]).unwrap();
        assert!((c[0] - 0.05).abs() < 1e-15);

        assert!(calibrate(&[-0.2], &[vec![]]).is_err());
        assert!(calibrate(&[-0.2, 0.0], &[vec![1.0]]).is_err());
    }

    #[test]
    fn calibration_attack_orderings() {
        // low-difficulty non-member: very small loss, but references agree
        let easy = calibrate(&[-0.05], &[vec![-0.04]]).unwrap()[0];
        assert!((easy + 0.01).abs() < 1e-15);
        // a typical member: moderate loss, references much worse
        let member = calibrate(&[-0.3], &[vec![-1.0]]).unwrap()[0];
        // the loss attack ranks the easy non-member above the member,
        // calibration reverses that
        assert!(-0.05 > -0.3);
        assert!(member > easy);

        // high-loss non-member with even worse references gets pushed member-ward
        let pushed = calibrate(&[-3.0], &[vec![-5.0]]).unwrap()[0];
        assert_eq!(pushed, 2.0);

        let out = attack_calibration(&table(vec![-0.1, -2.0], Some(vec![0.4, -1.5]))).unwrap();
        assert_eq!(out.scores, vec![0.4, -1.5]);
        assert!(attack_calibration(&table(vec![-0.1], None)).is_err());
    }

    #[test]
    fn output_roundtrip() {
        let out = AttackOutput::new("rapid", vec![3, 1], vec![0.1 + 0.2, 1e-17]).with_provenance("d1g", 42);
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path(), "scores_rapid").unwrap();
        assert_eq!(AttackOutput::read(dir.path(), "scores_rapid").unwrap(), out);
    }

    #[test]
    fn attack_names_parse() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
        assert!("canary".parse::<AttackKind>().is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn calibration_is_exact_up_to_one_rounding(
                raw in -50.0f64..0.0,
                refs in proptest::collection::vec(-50.0f64..0.0, 1..9),
            ) {
                let mean = refs.iter().sum::<f64>() / refs.len() as f64;
                let c = calibrate(&[raw], &[refs.clone()]).unwrap()[0];
                // one rounding in the subtraction, and one more when adding back
                let tol = 2.0 * f64::EPSILON * raw.abs().max(mean.abs()).max(c.abs());
                prop_assert!((c + mean - raw).abs() <= tol);
            }
        }
    }
}
