use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use approxcache::backend::UNREACHABLE;
use approxcache::report::RunReport;
use approxcache::workload::{calibrate_noise, calibration_sigmas};
use approxcache::{run_experiment, ExperimentConfig, PolicyKind, SimKMap};
use log::info;
use serde::Serialize;

use crate::{config_error, CliError};

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn run(
    config: &ExperimentConfig,
    report: Option<&Path>,
    outcomes: Option<&Path>,
    json: bool,
) -> Result<String, CliError> {
    // Building the pipeline surfaces config problems (bad threshold files,
    // unusable step sets) before any request runs.
    config.build_pipeline().map_err(config_error)?;
    let mut log = outcomes.or(config.output.outcomes.as_deref()).map(create).transpose()?;
    let result = run_experiment(config, |o| {
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, o)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    let body = result.to_json()?;
    if let Some(path) = report.or(config.output.report.as_deref()) {
        write_file(path, &body)?;
        info!("report written to {}", path.display());
    }
    Ok(if json { body } else { result.table() })
}

pub fn profile(config: &ExperimentConfig, out: Option<&Path>, json: bool) -> Result<String, CliError> {
    let backend = config.build_backend().map_err(config_error)?;
    let map = config.profile(&backend)?;
    let body = serde_json::to_string_pretty(&map).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(path) = out {
        write_file(path, &body)?;
    }
    if json {
        return Ok(body);
    }
    Ok(threshold_table(&map, |k| backend.analytic_min_similarity(k, map.alpha)))
}

fn fmt_threshold(s: f64) -> String {
    if s >= UNREACHABLE {
        "unreachable".into()
    } else {
        format!("{s:.4}")
    }
}

pub fn threshold_table(map: &SimKMap, analytic: impl Fn(u32) -> f64) -> String {
    let mut out = format!("{:>4}{:>14}{:>14}\n", "K", "min_sim", "analytic");
    for t in &map.thresholds {
        let _ = writeln!(
            out,
            "{:>4}{:>14}{:>14}",
            t.k,
            fmt_threshold(t.min_sim),
            fmt_threshold(analytic(t.k))
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: PolicyKind,
    pub capacity: usize,
    pub hit_rate: f64,
    pub compute_savings: f64,
    pub evictions: u64,
}

pub fn compare_rows(
    config: &ExperimentConfig,
    policies: &[PolicyKind],
    capacities: &[usize],
) -> Result<Vec<ComparisonRow>, CliError> {
    if policies.len() < 2 {
        return Err(CliError::Config("compare needs at least two policies".into()));
    }
    if capacities.is_empty() {
        return Err(CliError::Config("compare needs at least one capacity".into()));
    }
    let mut rows = Vec::new();
    for &capacity in capacities {
        for &policy in policies {
            let mut c = config.clone();
            c.pipeline.policy = policy;
            c.pipeline.capacity_items = capacity;
            c.validate().map_err(config_error)?;
            let r: RunReport = run_experiment(&c, |_| Ok(()))?;
            info!("{policy} at {capacity}: savings {:.4}", r.compute_savings);
            rows.push(ComparisonRow {
                policy,
                capacity,
                hit_rate: r.overall_hit_rate,
                compute_savings: r.compute_savings,
                evictions: r.evictions,
            });
        }
    }
    Ok(rows)
}

pub fn compare_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<8}{:>10}{:>12}{:>12}{:>12}\n",
        "policy", "capacity", "hit-rate", "savings", "evictions"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8}{:>10}{:>12.4}{:>12.4}{:>12}",
            r.policy.name(),
            r.capacity,
            r.hit_rate,
            r.compute_savings,
            r.evictions
        );
    }
    out
}

pub fn compare(
    config: &ExperimentConfig,
    policies: &[PolicyKind],
    capacities: &[usize],
    out: Option<&Path>,
    json: bool,
) -> Result<String, CliError> {
    let rows = compare_rows(config, policies, capacities)?;
    let body = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(path) = out {
        write_file(path, &body)?;
    }
    Ok(if json { body } else { compare_table(&rows) })
}

/// Writes the configured prompt stream as JSON Lines.
pub fn synth(config: &ExperimentConfig, out: &mut dyn Write) -> Result<usize, CliError> {
    let mut n = 0;
    for p in config.prompts()? {
        serde_json::to_writer(&mut *out, &p).map_err(|e| CliError::Runtime(e.to_string()))?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

/// Noise scale against mean cosine to the cluster center and between
/// cluster members, in the configured dimension.
pub fn calibrate(config: &ExperimentConfig, samples: usize) -> String {
    let sigmas: Vec<f64> = calibration_sigmas().into_iter().step_by(5).collect();
    let rows = calibrate_noise(
        config.workload.synth.dim,
        &sigmas,
        samples.max(1),
        config.workload.synth.seed,
    );
    let mut out = format!("{:>8}{:>12}{:>12}\n", "sigma", "to_center", "pairwise");
    for r in rows {
        let _ = writeln!(out, "{:>8.2}{:>12.4}{:>12.4}", r.sigma, r.to_center, r.pairwise);
    }
    out
}

pub fn show_config(config: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string_pretty(config).map_err(|e| CliError::Runtime(e.to_string()))
}
