//! Labeled tabular data, a Gaussian-mixture generator, CSV ingestion and the
//! target / shadow / reference partition.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Feature rows with integer class labels.
///
/// Features are stored row-major in one buffer; `row(i)` yields a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl TabularDataset {
    /// Builds a dataset from rows, checking every invariant.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let feature_dim = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * feature_dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != feature_dim {
                return Err(Error::invalid(format!(
                    "row {i} has {} features, expected {feature_dim}",
                    row.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite feature at row {i}, column {j}")));
            }
            features.extend(row);
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} at row {i} is out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Writes the dataset as CSV with header `x0,..,x{d-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.feature_dim).map(|j| format!("x{j}")).collect();
        header.push("label".to_string());
        writer.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            record.push(self.labels[i].to_string());
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Isotropic Gaussian mixture with one component per class.
///
/// Class `c` draws features from `N(class_means[c], covariance_scale * I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub covariance_scale: f64,
    pub seed: u64,
}

impl DistributionSpec {
    /// Class means drawn once from `N(0, separation^2 I)` using `seed`.
    pub fn random_means(
        num_classes: usize,
        feature_dim: usize,
        separation: f64,
        covariance_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seed::rng(seed::derive(seed, "class-means", 0));
        let class_means = (0..num_classes)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let spec = Self {
            num_classes,
            feature_dim,
            class_means,
            covariance_scale,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("num_classes and feature_dim must be positive"));
        }
        if !(self.covariance_scale > 0.0 && self.covariance_scale.is_finite()) {
            return Err(Error::invalid("covariance scale must be a positive finite number"));
        }
        if self.class_means.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} class means given for {} classes",
                self.class_means.len(),
                self.num_classes
            )));
        }
        for (c, mean) in self.class_means.iter().enumerate() {
            if mean.len() != self.feature_dim || mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("class mean {c} is malformed")));
            }
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.class_means[a] == self.class_means[b] {
                    return Err(Error::invalid(format!("class means {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Draws `n` class-balanced samples (class counts differ by at most one).
pub fn generate_synthetic(spec: &DistributionSpec, n: usize) -> Result<TabularDataset> {
    spec.validate()?;
    if n < spec.num_classes {
        return Err(Error::invalid(format!(
            "cannot draw {n} samples balanced over {} classes",
            spec.num_classes
        )));
    }
    let mut rng = seed::rng(spec.seed);
    let std = spec.covariance_scale.sqrt();
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let rows = labels
        .iter()
        .map(|&c| {
            spec.class_means[c]
                .iter()
                .map(|&m| m + std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    TabularDataset::new(rows, labels, spec.num_classes)
}

/// Reads a CSV with a header row and an integer `label` column.
///
/// `num_classes` is inferred as the largest label plus one.
pub fn load_csv(path: &Path) -> Result<TabularDataset> {
    let display = path.display().to_string();
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: display.clone(),
        row,
        column: column.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| parse_err(0, "-", e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, "-", e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(parse_err(1, "-", "empty file".to_string()));
    }
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| parse_err(1, "label", "missing `label` column".to_string()))?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // data rows are numbered from 1, header excluded
        let row_no = i + 1;
        let record = record.map_err(|e| parse_err(row_no, "-", e.to_string()))?;
        let mut row = Vec::with_capacity(headers.len() - 1);
        for (j, cell) in record.iter().enumerate() {
            let name = &headers[j];
            let cell = cell.trim();
            if j == label_col {
                let label: usize = cell.parse().map_err(|_| {
                    parse_err(row_no, name, format!("label `{cell}` is not a non-negative integer"))
                })?;
                labels.push(label);
            } else {
                let value: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(row_no, name, format!("`{cell}` is not a number")))?;
                if !value.is_finite() {
                    return Err(parse_err(row_no, name, format!("`{cell}` is not finite")));
                }
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(1, "-", "no data rows".to_string()));
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    TabularDataset::new(rows, labels, num_classes)
}

/// Disjoint index lists partitioning a parent dataset for the attack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_train: Vec<usize>,
    pub shadow_test: Vec<usize>,
    pub reference_pool: Vec<usize>,
}

impl SplitPlan {
    pub fn lists(&self) -> [&[usize]; 5] {
        [
            &self.target_train,
            &self.target_test,
            &self.shadow_train,
            &self.shadow_test,
            &self.reference_pool,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_train.len() != self.target_test.len()
            || self.shadow_train.len() != self.shadow_test.len()
        {
            return Err(Error::invalid("train and test halves must be equal-sized"));
        }
        if self.reference_pool.is_empty() {
            return Err(Error::invalid("reference pool is empty"));
        }
        let total: usize = self.lists().iter().map(|l| l.len()).sum();
        let unique: HashSet<usize> = self.lists().iter().flat_map(|l| l.iter().copied()).collect();
        if unique.len() != total {
            return Err(Error::invalid("split index lists overlap"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Shuffles by `seed` and cuts equal thirds: target and shadow are halved into
/// train/test, the last third (plus any remainder) is the reference pool.
pub fn make_split(dataset: &TabularDataset, seed: u64) -> Result<SplitPlan> {
    let n = dataset.len();
    if n < 6 {
        return Err(Error::invalid(format!("dataset has {n} samples, need at least 6")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let half = n / 3 / 2;
    let mut chunks = order.chunks(half);
    let mut next = || chunks.next().map(<[usize]>::to_vec).unwrap_or_default();
    let target_train = next();
    let target_test = next();
    let shadow_train = next();
    let shadow_test = next();
    let reference_pool = order[4 * half..].to_vec();
    Ok(SplitPlan {
        seed,
        target_train,
        target_test,
        shadow_train,
        shadow_test,
        reference_pool,
    })
}

/// Draws `ceil(fraction * |pool|)` distinct indices from the reference pool.
pub fn sample_reference_subset(plan: &SplitPlan, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} is outside (0, 1]")));
    }
    let pool = &plan.reference_pool;
    let k = ((fraction * pool.len() as f64).ceil() as usize).min(pool.len());
    let mut rng = seed::rng(seed);
    Ok(index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}
