use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 20;

/// Loss ranges `[0, 0.002)`, `[0.002, 1)` and `[1, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossBucket {
    Small,
    Medium,
    Large,
}

impl LossBucket {
    pub const ALL: [LossBucket; 3] = [LossBucket::Small, LossBucket::Medium, LossBucket::Large];

    pub fn of(loss: f64) -> Self {
        if loss < 0.002 {
            LossBucket::Small
        } else if loss < 1.0 {
            LossBucket::Medium
        } else {
            LossBucket::Large
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossBucket::Small => "small",
            LossBucket::Medium => "medium",
            LossBucket::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketHistogram {
    pub bucket: LossBucket,
    /// `loss` or `calibrated`.
    pub score: String,
    pub edges: Vec<f64>,
    pub member_counts: Vec<usize>,
    pub nonmember_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBucketReport {
    /// `(members, non-members)` per bucket, in [`LossBucket::ALL`] order.
    pub counts: Vec<(usize, usize)>,
    pub histograms: Vec<BucketHistogram>,
}

/// Equal-width bin edges over the observed range, shared by all buckets.
fn edges_for(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    (0..=HISTOGRAM_BINS)
        .map(|k| if k == HISTOGRAM_BINS { hi } else { lo + (hi - lo) * k as f64 / HISTOGRAM_BINS as f64 })
        .collect()
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    // the last bin is closed on the right so the maximum lands inside
    let upper = edges.partition_point(|&e| e <= v);
    upper.saturating_sub(1).min(edges.len() - 2)
}

/// Splits samples by their (positive) cross-entropy loss and histograms the
/// loss and the calibrated score inside each bucket.
pub fn loss_bucket_report(losses: &[f64], calibrated: &[f64], is_member: &[bool]) -> Result<LossBucketReport> {
    if losses.len() != calibrated.len() || losses.len() != is_member.len() {
        return Err(Error::invalid("losses, calibrated scores and labels differ in length"));
    }
    if let Some(bad) = losses.iter().find(|l| !(**l >= 0.0) || l.is_infinite()) {
        return Err(Error::invalid(format!("losses must be finite and non-negative, found {bad}")));
    }
    if calibrated.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("calibrated scores must be finite"));
    }
    let mut counts = vec![(0usize, 0usize); 3];
    let buckets: Vec<usize> = losses
        .iter()
        .map(|&l| LossBucket::ALL.iter().position(|&b| b == LossBucket::of(l)).unwrap())
        .collect();
    for (&b, &m) in buckets.iter().zip(is_member) {
        if m {
            counts[b].0 += 1;
        } else {
            counts[b].1 += 1;
        }
    }

    let mut histograms = Vec::new();
    for (score, values) in [("loss", losses), ("calibrated", calibrated)] {
        let edges = edges_for(values);
        for (bi, &bucket) in LossBucket::ALL.iter().enumerate() {
            let mut member_counts = vec![0; HISTOGRAM_BINS];
            let mut nonmember_counts = vec![0; HISTOGRAM_BINS];
            for i in (0..values.len()).filter(|&i| buckets[i] == bi) {
                let k = bin_of(&edges, values[i]);
                if is_member[i] {
                    member_counts[k] += 1;
                } else {
                    nonmember_counts[k] += 1;
                }
            }
            histograms.push(BucketHistogram {
                bucket,
                score: score.to_string(),
                edges: edges.clone(),
                member_counts,
                nonmember_counts,
            });
        }
    }
    Ok(LossBucketReport { counts, histograms })
}

impl LossBucketReport {
    pub fn counts_for(&self, bucket: LossBucket) -> (usize, usize) {
        self.counts[LossBucket::ALL.iter().position(|&b| b == bucket).unwrap()]
    }

    /// `bucket,bin_lo,bin_hi,member_count,nonmember_count`, with buckets named
    /// `<range>:<score>` such as `large:calibrated`.
    pub fn write_csv(&self, path: &Path, config_digest: &str) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# config_digest: {config_digest}").map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["bucket", "bin_lo", "bin_hi", "member_count", "nonmember_count"])?;
        for h in &self.histograms {
            let label = format!("{}:{}", h.bucket.name(), h.score);
            for k in 0..h.member_counts.len() {
                writer.write_record([
                    label.clone(),
                    h.edges[k].to_string(),
                    h.edges[k + 1].to_string(),
                    h.member_counts[k].to_string(),
                    h.nonmember_counts[k].to_string(),
                ])?;
            }
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_boundaries() {
        assert_eq!(LossBucket::of(0.001), LossBucket::Small);
        assert_eq!(LossBucket::of(0.5), LossBucket::Medium);
        assert_eq!(LossBucket::of(3.2), LossBucket::Large);
        assert_eq!(LossBucket::of(0.002), LossBucket::Medium);
        assert_eq!(LossBucket::of(1.0), LossBucket::Large);
        assert_eq!(LossBucket::of(0.0), LossBucket::Small);
    }

    #[test]
    fn report_counts_and_histograms() {
        let losses = [0.001, 0.5, 3.2, 0.0005, 2.0];
        let cal = [0.3, -0.1, -1.0, 0.2, 0.4];
        let member = [true, true, false, true, false];
        let r = loss_bucket_report(&losses, &cal, &member).unwrap();
        assert_eq!(r.counts_for(LossBucket::Small), (2, 0));
        assert_eq!(r.counts_for(LossBucket::Medium), (1, 0));
        assert_eq!(r.counts_for(LossBucket::Large), (0, 2));
        assert_eq!(r.histograms.len(), 6);
        for h in &r.histograms {
            let (m, n) = r.counts_for(h.bucket);
            assert_eq!(h.member_counts.iter().sum::<usize>(), m);
            assert_eq!(h.nonmember_counts.iter().sum::<usize>(), n);
            assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
        }
        // the maximum loss lands in the last bin
        let large_loss = r
            .histograms
            .iter()
            .find(|h| h.bucket == LossBucket::Large && h.score == "loss")
            .unwrap();
        assert_eq!(large_loss.nonmember_counts[HISTOGRAM_BINS - 1], 1);
    }

    #[test]
    fn rejects_negative_loss() {
        assert!(loss_bucket_report(&[-0.1], &[0.0], &[true]).is_err());
        assert!(loss_bucket_report(&[f64::NAN], &[0.0], &[true]).is_err());
    }

    #[test]
    fn constant_values_still_bin() {
        let r = loss_bucket_report(&[0.5, 0.5], &[1.0, 1.0], &[true, false]).unwrap();
        assert!(r.histograms.iter().all(|h| h.edges.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn csv_has_one_row_per_bin() {
        let r = loss_bucket_report(&[0.001, 0.5, 3.2], &[0.1, 0.0, -0.2], &[true, true, false]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        r.write_csv(&path, "d").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_digest: d\nbucket,bin_lo,bin_hi,member_count,nonmember_count\n"));
        assert_eq!(text.lines().count(), 2 + 6 * HISTOGRAM_BINS);
        assert!(text.contains("large:calibrated,"));
    }
}
