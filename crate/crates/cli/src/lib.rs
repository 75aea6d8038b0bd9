//! Operator surface for the approximate cache simulator: experiment runs,
//! threshold profiling, policy comparison and an HTTP service.

pub mod args;
pub mod commands;
pub mod serve;

use std::path::Path;

use approxcache::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<approxcache::Error> for CliError {
    fn from(e: approxcache::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Reads a config file, choosing TOML or JSON by extension.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        Some("json") => serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        _ => Err(CliError::Config(format!(
            "{}: config must end in .toml or .json",
            path.display()
        ))),
    }
}

/// Config file (or defaults) with command-line overrides applied and validated.
pub fn effective_config(cli: &args::Cli) -> Result<ExperimentConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut config)?;
    config.validate().map_err(config_error)?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_toml_and_json_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let toml = dir.path().join("c.toml");
        std::fs::write(&toml, "steps = [5, 10]\n[pipeline]\nalpha = 0.8\n").unwrap();
        let c = load_config(&toml).unwrap();
        assert_eq!((c.steps.as_slice(), c.pipeline.alpha), (&[5, 10][..], 0.8));

        let json = dir.path().join("c.json");
        std::fs::write(&json, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(load_config(&json).unwrap(), c);

        let yaml = dir.path().join("c.yaml");
        std::fs::write(&yaml, "").unwrap();
        assert_eq!(load_config(&yaml).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let text = commands::show_config(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
