//! ROC curves, low-FPR metrics, the membership security game and loss-bucket
//! diagnostics.

mod buckets;
mod game;
mod sweep;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use buckets::{loss_bucket_report, BucketHistogram, LossBucket, LossBucketReport, HISTOGRAM_BINS};
pub use game::{run_security_game, GameRound, GameSummary};
pub use sweep::{sweep, SweepAxis, SweepCell, SweepResult, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Empirical ROC under the rule "member iff score > threshold".
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Descending thresholds, starting at +inf and ending at -inf.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    members: usize,
    nonmembers: usize,
}

fn check_inputs(scores: &[f64], is_member: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != is_member.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} membership labels",
            scores.len(),
            is_member.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("scores must be finite, found {bad}")));
    }
    let members = is_member.iter().filter(|&&m| m).count();
    let nonmembers = is_member.len() - members;
    if members == 0 || nonmembers == 0 {
        return Err(Error::invalid(
            "need at least one member and one non-member",
        ));
    }
    Ok((members, nonmembers))
}

pub fn roc(scores: &[f64], is_member: &[bool]) -> Result<RocCurve> {
    let (members, nonmembers) = check_inputs(scores, is_member)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (pos, neg) = (members as f64, nonmembers as f64);
    let mut points = Vec::with_capacity(scores.len() + 2);
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // at threshold s only the samples strictly above s are flagged
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg,
            tpr: tp as f64 / pos,
        });
        while i < order.len() && scores[order[i]] == s {
            if is_member[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });

    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum::<f64>();
    Ok(RocCurve {
        points,
        auc,
        members,
        nonmembers,
    })
}

impl RocCurve {
    /// The point with the smallest threshold whose FPR does not exceed `target_fpr`.
    pub fn at_fpr(&self, target_fpr: f64) -> Result<TprAtFpr> {
        if !(target_fpr > 0.0 && target_fpr < 1.0) {
            return Err(Error::invalid(format!("target FPR must lie in (0, 1), got {target_fpr}")));
        }
        // fpr is nondecreasing along the list, so the last admissible point wins
        let p = self
            .points
            .iter()
            .rev()
            .find(|p| p.fpr <= target_fpr)
            .expect("the +inf point has FPR 0");
        Ok(TprAtFpr {
            tpr: p.tpr,
            threshold: p.threshold,
            achieved_fpr: p.fpr,
        })
    }

    /// Maximum of `(TPR + TNR) / 2` over the curve's thresholds.
    pub fn best_balanced_accuracy(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p.tpr + 1.0 - p.fpr) / 2.0)
            .fold(0.5, f64::max)
    }

    pub fn class_counts(&self) -> (usize, usize) {
        (self.members, self.nonmembers)
    }

    /// `threshold,fpr,tpr` with a digest comment line; sentinels print as `inf`/`-inf`.
    pub fn write_csv(&self, path: &Path, config_digest: &str) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# config_digest: {config_digest}").map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            writer.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_points(path: &Path) -> Result<Vec<RocPoint>> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let mut points = Vec::new();
        for record in reader.deserialize() {
            let (threshold, fpr, tpr): (f64, f64, f64) = record?;
            points.push(RocPoint { threshold, fpr, tpr });
        }
        Ok(points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub tpr: f64,
    pub threshold: f64,
    pub achieved_fpr: f64,
}

pub fn tpr_at_fpr(scores: &[f64], is_member: &[bool], target_fpr: f64) -> Result<TprAtFpr> {
    roc(scores, is_member)?.at_fpr(target_fpr)
}

pub fn auc(scores: &[f64], is_member: &[bool]) -> Result<f64> {
    Ok(roc(scores, is_member)?.auc)
}

/// `(TPR(t) + TNR(t)) / 2` at a fixed threshold.
pub fn balanced_accuracy(scores: &[f64], is_member: &[bool], threshold: f64) -> Result<f64> {
    let (members, nonmembers) = check_inputs(scores, is_member)?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &m) in scores.iter().zip(is_member) {
        match (m, s > threshold) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / members as f64 + tn as f64 / nonmembers as f64) / 2.0)
}

/// Smallest threshold whose FPR on the shadow non-members is at most
/// `target_fpr`. Targets of 1 or more accept everything (`-inf`).
pub fn calibrate_threshold(shadow_scores: &[f64], shadow_is_member: &[bool], target_fpr: f64) -> Result<f64> {
    if shadow_scores.len() != shadow_is_member.len() {
        return Err(Error::invalid("shadow scores and labels differ in length"));
    }
    let mut non: Vec<f64> = shadow_scores
        .iter()
        .zip(shadow_is_member)
        .filter(|(_, &m)| !m)
        .map(|(&s, _)| s)
        .collect();
    if non.is_empty() {
        return Err(Error::invalid("threshold calibration needs shadow non-members"));
    }
    if non.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("shadow scores must be finite"));
    }
    if !(target_fpr > 0.0) {
        return Err(Error::invalid(format!("target FPR must be positive, got {target_fpr}")));
    }
    if target_fpr >= 1.0 {
        return Ok(f64::NEG_INFINITY);
    }
    non.sort_by(|a, b| b.total_cmp(a));
    let n = non.len() as f64;
    // walking down the sorted scores, threshold non[i] flags the samples above it
    let mut best = non[0];
    let mut i = 0;
    while i < non.len() {
        let s = non[i];
        let above = i;
        if above as f64 / n > target_fpr {
            break;
        }
        best = s;
        while i < non.len() && non[i] == s {
            i += 1;
        }
    }
    Ok(best)
}

/// Per-attack metrics on the target table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub attack: String,
    pub config_digest: String,
    pub auc: f64,
    /// Best `(TPR + TNR) / 2` over all thresholds.
    pub balanced_accuracy: f64,
    /// Keyed by the requested FPR level as written in the config.
    pub tpr_at_fpr: BTreeMap<String, TprAtFpr>,
    /// Thresholds chosen on the shadow table, applied to the target table.
    pub shadow_calibrated: BTreeMap<String, TprAtFpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub security_game: Option<GameResult>,
}

/// Outcome of the membership game played with a shadow-calibrated threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameResult {
    pub threshold: f64,
    pub rounds: usize,
    pub accuracy: Option<f64>,
}

pub fn fpr_key(level: f64) -> String {
    level.to_string()
}

impl MetricsReport {
    /// Builds the report. Shadow scores, when given, are used for the
    /// shadow-calibrated thresholds.
    pub fn compute(
        attack: &str,
        config_digest: &str,
        scores: &[f64],
        is_member: &[bool],
        fpr_levels: &[f64],
        shadow: Option<(&[f64], &[bool])>,
    ) -> Result<Self> {
        let curve = roc(scores, is_member)?;
        let mut tpr_map = BTreeMap::new();
        let mut shadow_map = BTreeMap::new();
        let (members, nonmembers) = curve.class_counts();
        for &level in fpr_levels {
            tpr_map.insert(fpr_key(level), curve.at_fpr(level)?);
            if let Some((s_scores, s_member)) = shadow {
                let t = calibrate_threshold(s_scores, s_member, level)?;
                let tp = scores.iter().zip(is_member).filter(|(&s, &m)| m && s > t).count();
                let fp = scores.iter().zip(is_member).filter(|(&s, &m)| !m && s > t).count();
                shadow_map.insert(
                    fpr_key(level),
                    TprAtFpr {
                        tpr: tp as f64 / members as f64,
                        threshold: t,
                        achieved_fpr: fp as f64 / nonmembers as f64,
                    },
                );
            }
        }
        Ok(Self {
            attack: attack.to_string(),
            config_digest: config_digest.to_string(),
            auc: curve.auc,
            balanced_accuracy: curve.best_balanced_accuracy(),
            tpr_at_fpr: tpr_map,
            shadow_calibrated: shadow_map,
            security_game: None,
        })
    }

    pub fn tpr_at(&self, level: f64) -> Option<f64> {
        self.tpr_at_fpr.get(&fpr_key(level)).map(|r| r.tpr)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
