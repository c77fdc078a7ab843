//! Python bindings. Results that are records on the Rust side (metrics,
//! sweep rows, configs) come back as plain dicts.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mia_audit::attacks::{self, AttackKind};
use mia_audit::config::ExperimentConfig;
use mia_audit::eval::{self, SweepAxis};
use mia_audit::pipeline::{self, RunOutcome};
use mia_audit::signals::ScoreTable;
use mia_audit::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Experiment configuration. Build it from TOML text or a file.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: ExperimentConfig,
    base_dir: PathBuf,
}

#[pymethods]
impl PyExperimentConfig {
    #[new]
    #[pyo3(signature = (toml = "", base_dir = "."))]
    fn new(toml: &str, base_dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml(toml).map_err(to_py)?,
            base_dir: base_dir.into(),
        })
    }

    /// Reads a TOML file; relative data paths resolve against its directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(to_py)?,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_else(|| ".".into()),
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner)
    }

    fn digest(&self) -> PyResult<String> {
        self.inner.digest().map_err(to_py)
    }

    /// Returns a copy with one sweep axis set, e.g. `("num_queries", "4")`.
    fn with_axis(&self, axis: &str, value: &str) -> PyResult<Self> {
        let axis: SweepAxis = axis.parse().map_err(to_py)?;
        let mut next = self.clone();
        axis.apply(&mut next.inner, value).map_err(to_py)?;
        next.inner.validate().map_err(to_py)?;
        Ok(next)
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, digest={})", self.inner.seed, self.inner.digest().unwrap_or_default())
    }
}

/// Outcome of one pipeline run.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    inner: RunOutcome,
}

fn table_dict<'py>(py: Python<'py>, t: &ScoreTable) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ids", t.ids.clone())?;
    d.set_item("is_member", t.is_member.clone())?;
    d.set_item("raw", t.raw.clone())?;
    d.set_item("calibrated", t.calibrated.clone())?;
    Ok(d)
}

fn attack_kind(name: &str) -> PyResult<AttackKind> {
    name.parse().map_err(to_py)
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn config_digest(&self) -> &str {
        &self.inner.config_digest
    }

    #[getter]
    fn attacks(&self) -> Vec<&'static str> {
        self.inner.metrics.keys().map(|a| a.name()).collect()
    }

    #[getter]
    fn target_train_accuracy(&self) -> f64 {
        self.inner.target_train_accuracy
    }

    #[getter]
    fn target_test_accuracy(&self) -> f64 {
        self.inner.target_test_accuracy
    }

    /// Metrics of one attack as a dict.
    fn metrics<'py>(&self, py: Python<'py>, attack: &str) -> PyResult<Bound<'py, PyAny>> {
        let kind = attack_kind(attack)?;
        let m = self
            .inner
            .metrics
            .get(&kind)
            .ok_or_else(|| PyValueError::new_err(format!("attack `{attack}` was not run")))?;
        json_to_py(py, m)
    }

    /// Final target-side scores of one attack, in score-table order.
    fn scores(&self, attack: &str) -> PyResult<Vec<f64>> {
        let kind = attack_kind(attack)?;
        self.inner
            .outputs
            .get(&kind)
            .map(|o| o.scores.clone())
            .ok_or_else(|| PyValueError::new_err(format!("attack `{attack}` was not run")))
    }

    fn target_table<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        table_dict(py, &self.inner.target_table)
    }

    fn shadow_table<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        table_dict(py, &self.inner.shadow_table)
    }

    /// Writes the standard artifact set into `out_dir`.
    fn write(&self, config: &PyExperimentConfig, out_dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&out_dir).map_err(|e| PyOSError::new_err(e.to_string()))?;
        pipeline::write_artifacts(&config.inner, &self.inner, &out_dir).map_err(to_py)
    }
}

#[pyfunction]
fn run_experiment(py: Python<'_>, config: &PyExperimentConfig) -> PyResult<PyRunResult> {
    let (cfg, base) = (config.inner.clone(), config.base_dir.clone());
    let inner = py.detach(move || pipeline::run_experiment(&cfg, &base)).map_err(to_py)?;
    Ok(PyRunResult { inner })
}

/// Runs the pipeline and writes every artifact into `out_dir`.
#[pyfunction]
fn run_to_dir(py: Python<'_>, config: &PyExperimentConfig, out_dir: PathBuf) -> PyResult<PyRunResult> {
    let (cfg, base) = (config.inner.clone(), config.base_dir.clone());
    let inner = py.detach(move || pipeline::run_to_dir(&cfg, &base, &out_dir)).map_err(to_py)?;
    Ok(PyRunResult { inner })
}

/// Long-format sweep rows: dicts with axis, value, seed, metric, result.
#[pyfunction]
#[pyo3(signature = (config, axis, values, seeds = None))]
fn sweep<'py>(
    py: Python<'py>,
    config: &PyExperimentConfig,
    axis: &str,
    values: Vec<String>,
    seeds: Option<Vec<u64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let axis: SweepAxis = axis.parse().map_err(to_py)?;
    let seeds = seeds.unwrap_or_else(|| vec![config.inner.seed]);
    let (cfg, base) = (config.inner.clone(), config.base_dir.clone());
    let result = py
        .detach(move || eval::sweep(&cfg, &base, axis, &values, &seeds))
        .map_err(to_py)?;
    json_to_py(py, &result.rows())
}

/// The metrics table of a finished run directory.
#[pyfunction]
fn report(dir: PathBuf) -> PyResult<String> {
    mia_audit::cli::cmd_report(&dir).map_err(to_py)
}

/// ROC points as `(thresholds, fpr, tpr)` lists plus the AUC.
#[pyfunction]
fn roc(scores: Vec<f64>, is_member: Vec<bool>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    let curve = eval::roc(&scores, &is_member).map_err(to_py)?;
    Ok((
        curve.points.iter().map(|p| p.threshold).collect(),
        curve.points.iter().map(|p| p.fpr).collect(),
        curve.points.iter().map(|p| p.tpr).collect(),
        curve.auc,
    ))
}

#[pyfunction]
fn auc(scores: Vec<f64>, is_member: Vec<bool>) -> PyResult<f64> {
    eval::auc(&scores, &is_member).map_err(to_py)
}

/// `(tpr, threshold, achieved_fpr)` at the largest empirical FPR not above the target.
#[pyfunction]
fn tpr_at_fpr(scores: Vec<f64>, is_member: Vec<bool>, target_fpr: f64) -> PyResult<(f64, f64, f64)> {
    let t = eval::tpr_at_fpr(&scores, &is_member, target_fpr).map_err(to_py)?;
    Ok((t.tpr, t.threshold, t.achieved_fpr))
}

#[pyfunction]
fn balanced_accuracy(scores: Vec<f64>, is_member: Vec<bool>, threshold: f64) -> PyResult<f64> {
    eval::balanced_accuracy(&scores, &is_member, threshold).map_err(to_py)
}

#[pyfunction]
fn calibrate_threshold(shadow_scores: Vec<f64>, shadow_is_member: Vec<bool>, target_fpr: f64) -> PyResult<f64> {
    eval::calibrate_threshold(&shadow_scores, &shadow_is_member, target_fpr).map_err(to_py)
}

/// Raw score minus the mean reference score, per sample.
#[pyfunction]
fn calibrate(raw: Vec<f64>, ref_scores: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    attacks::calibrate(&raw, &ref_scores).map_err(to_py)
}

/// One-sided Gaussian test of each raw score against its OUT scores.
#[pyfunction]
fn lira_offline(raw: Vec<f64>, out_scores: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let table = ScoreTable {
        ids: (0..raw.len()).collect(),
        is_member: vec![false; raw.len()],
        raw,
        calibrated: None,
        final_score: None,
    };
    Ok(attacks::attack_lira_offline(&table, &out_scores).map_err(to_py)?.scores)
}

#[pyfunction]
fn normal_cdf(z: f64) -> f64 {
    attacks::normal_cdf(z)
}

#[pymodule]
fn mia_audit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_to_dir, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(roc, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(tpr_at_fpr, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(lira_offline, m)?)?;
    m.add_function(wrap_pyfunction!(normal_cdf, m)?)?;
    m.add("ATTACKS", AttackKind::ALL.iter().map(|a| a.name()).collect::<Vec<_>>())?;
    Ok(())
}
