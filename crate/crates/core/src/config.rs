//! Experiment configuration and the end-to-end runner built on it.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, SyntheticBackend};
use crate::domain::{PromptRecord, StepSet};
use crate::error::{Error, Result};
use crate::pipeline::{Pipeline, PipelineConfig, RequestOutcome};
use crate::report::RunReport;
use crate::selector::{profile, sweep_pairs, SimKMap};
use crate::workload::{preload, replay_trace, synth_stream, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdSource {
    /// Profile the backend over a similarity sweep.
    Profile,
    /// The hand-tuned reference map.
    Reference,
    /// Load a map written by `profile`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorSettings {
    pub source: ThresholdSource,
    pub file: Option<PathBuf>,
    /// Similarity increment of the profiling sweep.
    pub profile_step: f64,
    pub profile_pairs_per_level: usize,
}

impl Default for SelectorSettings {
    fn default() -> Self {
        SelectorSettings {
            source: ThresholdSource::Profile,
            file: None,
            profile_step: 0.005,
            profile_pairs_per_level: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Synthetic,
    Trace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSettings {
    pub source: WorkloadKind,
    pub trace: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Leading prompts used to warm the cache; excluded from metrics.
    pub preload: usize,
}

impl Default for WorkloadSettings {
    fn default() -> Self {
        WorkloadSettings {
            source: WorkloadKind::Synthetic,
            trace: None,
            synth: SynthConfig::default(),
            preload: 1_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub report: Option<PathBuf>,
    pub outcomes: Option<PathBuf>,
    pub state_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub steps: StepSet,
    pub backend: BackendConfig,
    pub pipeline: PipelineConfig,
    pub selector: SelectorSettings,
    pub workload: WorkloadSettings,
    pub output: OutputSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backend.validate()?;
        self.pipeline.validate()?;
        if self.steps.max() >= self.backend.n_steps {
            return Err(Error::InvalidConfig(format!(
                "largest step {} must be below the step count {}",
                self.steps.max(),
                self.backend.n_steps
            )));
        }
        if self.pipeline.capacity_items < self.steps.len() {
            return Err(Error::InvalidConfig(format!(
                "capacity of {} items cannot hold one prompt's {} states",
                self.pipeline.capacity_items,
                self.steps.len()
            )));
        }
        if self.workload.synth.dim != self.backend.embedding_dim {
            return Err(Error::InvalidConfig(format!(
                "workload dimension {} differs from the backend's embedding dimension {}",
                self.workload.synth.dim, self.backend.embedding_dim
            )));
        }
        self.workload.synth.validate()?;
        if self.workload.source == WorkloadKind::Trace {
            match &self.workload.trace {
                None => return Err(Error::InvalidConfig("trace workload needs a trace path".into())),
                Some(p) if !p.is_file() => {
                    return Err(Error::InvalidConfig(format!(
                        "trace file {} does not exist",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        if self.selector.source == ThresholdSource::File {
            match &self.selector.file {
                None => return Err(Error::InvalidConfig("threshold source `file` needs a path".into())),
                Some(p) if !p.is_file() => {
                    return Err(Error::InvalidConfig(format!(
                        "threshold file {} does not exist",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        if !(self.selector.profile_step > 0.0 && self.selector.profile_step <= 1.0) {
            return Err(Error::InvalidConfig("profile step must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Points every random source at `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.backend.noise_seed = seed;
        self.pipeline.predictor.seed = seed;
        self.workload.synth.seed = seed;
    }

    pub fn build_backend(&self) -> Result<SyntheticBackend> {
        SyntheticBackend::new(self.backend.clone(), self.steps.clone())
    }

    pub fn thresholds(&self, backend: &SyntheticBackend) -> Result<SimKMap> {
        match self.selector.source {
            ThresholdSource::Reference => Ok(SimKMap::reference()),
            ThresholdSource::File => {
                let path = self
                    .selector
                    .file
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("threshold source `file` needs a path".into()))?;
                let map: SimKMap = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                map.validate()?;
                Ok(map)
            }
            ThresholdSource::Profile => self.profile(backend),
        }
    }

    pub fn profile(&self, backend: &SyntheticBackend) -> Result<SimKMap> {
        let pairs = sweep_pairs(
            backend,
            self.backend.embedding_dim,
            self.selector.profile_step,
            self.selector.profile_pairs_per_level.max(1),
            self.backend.noise_seed,
        )?;
        profile(backend, &pairs, &self.steps, self.pipeline.alpha)
    }

    pub fn build_pipeline(&self) -> Result<Pipeline> {
        self.validate()?;
        let backend = self.build_backend()?;
        let map = self.thresholds(&backend)?;
        let pipeline = Pipeline::new(
            Box::new(backend),
            map,
            self.pipeline.clone(),
            self.backend.embedding_dim,
            self.backend.noise_seed,
        )?;
        match &self.output.state_dir {
            Some(dir) => pipeline.with_state_dir(dir),
            None => Ok(pipeline),
        }
    }

    pub fn prompts(&self) -> Result<Box<dyn Iterator<Item = PromptRecord>>> {
        match self.workload.source {
            WorkloadKind::Synthetic => Ok(Box::new(synth_stream(self.workload.synth.clone())?)),
            WorkloadKind::Trace => {
                let path = self
                    .workload
                    .trace
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("trace workload needs a trace path".into()))?;
                Ok(Box::new(replay_trace(path)?.records.into_iter()))
            }
        }
    }
}

/// Preloads, streams every remaining prompt through a fresh pipeline and
/// returns the report, handing each outcome to `on_outcome`.
pub fn run_experiment(
    config: &ExperimentConfig,
    mut on_outcome: impl FnMut(&RequestOutcome) -> Result<()>,
) -> Result<RunReport> {
    let mut pipeline = config.build_pipeline()?;
    let mut prompts = config.prompts()?;
    preload(&mut prompts, config.workload.preload, &mut pipeline)?;
    for p in prompts {
        let outcome = pipeline.handle_prompt(&p)?;
        on_outcome(&outcome)?;
    }
    let mut report = pipeline.report();
    report.config = serde_json::to_value(config)?;
    Ok(report)
}
