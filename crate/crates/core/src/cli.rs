//! Command-line front end: `run`, `sweep`, `report` and `gen-data`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attacks::AttackKind;
use crate::config::ExperimentConfig;
use crate::dataset::{generate_synthetic, DistributionSpec};
use crate::error::{Error, Result};
use crate::eval::{sweep, MetricsReport, SweepAxis};
use crate::pipeline::run_to_dir;

pub const PARALLELISM_ENV: &str = "MIA_AUDIT_PARALLELISM";

#[derive(Debug, Parser)]
#[command(name = "mia-audit", version, about = "Membership inference auditing for small classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full pipeline and write every artifact.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun the pipeline over one axis and write a long-format CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// num_reference_models, num_queries or reference_sampling_mode
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Master seeds; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the metrics table of a finished run.
    Report { dir: PathBuf },
    /// Write a synthetic Gaussian-mixture dataset as CSV.
    GenData(GenData),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6000)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 2)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 20)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.3)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub covariance_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn config_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

pub fn cmd_run(config_path: &Path, out: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    run_to_dir(&config, config_dir(config_path), out)?;
    Ok(())
}

pub fn cmd_sweep(config_path: &Path, axis: &str, values: &[String], seeds: &[u64], out: &Path) -> Result<PathBuf> {
    let config = ExperimentConfig::load(config_path)?;
    let axis: SweepAxis = axis.parse()?;
    let seeds = if seeds.is_empty() { vec![config.seed] } else { seeds.to_vec() };
    let result = sweep(&config, config_dir(config_path), axis, values, &seeds)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(format!("sweep_{}.csv", axis.name()));
    result.write_csv(&path, &config.digest()?)?;
    Ok(path)
}

/// Loads every `metrics_<attack>.json` in `dir`, in attack order.
pub fn load_metrics(dir: &Path) -> Result<Vec<MetricsReport>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(attack) = name.strip_prefix("metrics_").and_then(|n| n.strip_suffix(".json")) {
            let kind: AttackKind = attack.parse()?;
            found.push((kind, MetricsReport::read(&entry.path())?));
        }
    }
    if found.is_empty() {
        return Err(Error::invalid(format!("no metrics artifacts in {}", dir.display())));
    }
    found.sort_by_key(|(k, _)| *k);
    let digest = &found[0].1.config_digest;
    if let Some((k, _)) = found.iter().find(|(_, m)| &m.config_digest != digest) {
        return Err(Error::invalid(format!(
            "metrics_{}.json has a different config digest than metrics_{}.json",
            k.name(),
            found[0].0.name()
        )));
    }
    Ok(found.into_iter().map(|(_, m)| m).collect())
}

/// The report table.
///
/// One header line, then one line per attack. Columns are separated by two
/// spaces: the attack name left-aligned to the widest name, `TPR@<level>` for
/// every FPR level in ascending order, `AUC` and `BalancedAcc`, each value
/// printed with exactly 4 decimals (round half to even) and right-aligned to
/// its header. A final line gives the config digest.
pub fn render_report(reports: &[MetricsReport]) -> String {
    let mut levels: Vec<(f64, String)> = reports
        .iter()
        .flat_map(|r| r.tpr_at_fpr.keys())
        .map(|k| (k.parse::<f64>().unwrap_or(f64::NAN), k.clone()))
        .collect();
    levels.sort_by(|a, b| a.0.total_cmp(&b.0));
    levels.dedup_by(|a, b| a.1 == b.1);

    let mut headers: Vec<String> = levels.iter().map(|(_, k)| format!("TPR@{k}")).collect();
    headers.push("AUC".into());
    headers.push("BalancedAcc".into());
    let name_width = reports.iter().map(|r| r.attack.len()).chain(["attack".len()]).max().unwrap();

    let mut out = format!("{:<name_width$}", "attack");
    for h in &headers {
        out.push_str(&format!("  {:>w$}", h, w = h.len().max(6)));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<name_width$}", r.attack));
        let mut values: Vec<Option<f64>> = levels.iter().map(|(_, k)| r.tpr_at_fpr.get(k).map(|t| t.tpr)).collect();
        values.push(Some(r.auc));
        values.push(Some(r.balanced_accuracy));
        for (h, v) in headers.iter().zip(values) {
            let cell = v.map_or("-".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!("  {:>w$}", cell, w = h.len().max(6)));
        }
        out.push('\n');
    }
    if let Some(r) = reports.first() {
        out.push_str(&format!("config_digest: {}\n", r.config_digest));
    }
    out
}

pub fn cmd_report(dir: &Path) -> Result<String> {
    Ok(render_report(&load_metrics(dir)?))
}

pub fn cmd_gen_data(args: &GenData) -> Result<()> {
    let mut spec = DistributionSpec::random_means(
        args.num_classes,
        args.feature_dim,
        args.separation,
        args.covariance_scale,
        args.seed,
    )?;
    spec.seed = crate::seed::derive(args.seed, "samples", 0);
    generate_synthetic(&spec, args.num_samples)?.write_csv(&args.out)
}

/// Caps the global thread pool from `MIA_AUDIT_PARALLELISM` when set.
pub fn init_parallelism() -> Result<()> {
    let Ok(raw) = std::env::var(PARALLELISM_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{PARALLELISM_ENV}: `{raw}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("{PARALLELISM_ENV}: {e}")))
}

pub fn execute(cli: Cli) -> Result<()> {
    init_parallelism()?;
    match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            out,
        } => {
            let path = cmd_sweep(&config, &axis, &values, &seeds, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", cmd_report(&dir)?);
            Ok(())
        }
        Command::GenData(args) => cmd_gen_data(&args),
    }
}
