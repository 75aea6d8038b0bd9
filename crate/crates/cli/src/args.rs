use std::net::SocketAddr;
use std::path::PathBuf;

use approxcache::config::{ExperimentConfig, ThresholdSource, WorkloadKind};
use approxcache::{PolicyKind, StepSet};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "approxcache",
    version,
    about = "Simulate approximate caching of intermediate denoising states"
)]
pub struct Cli {
    /// Experiment config (.toml or .json); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Seed for noise, predictor and synthetic workload.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub policy: Option<PolicyKind>,
    #[arg(long, global = true)]
    pub capacity_items: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub match_predictor: Option<Toggle>,
    #[arg(long, global = true)]
    pub mp_centroids: Option<usize>,
    #[arg(long, global = true)]
    pub mp_threshold_quantile: Option<f64>,
    /// Quality floor relative to scratch generation.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub aggressiveness: Option<u32>,
    /// `profile`, `reference`, or a path to a saved threshold map.
    #[arg(long, global = true, value_name = "SOURCE")]
    pub thresholds: Option<String>,
    /// Cached step depths, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub steps: Option<Vec<u32>>,
    #[arg(long, global = true)]
    pub n_steps: Option<u32>,
    #[arg(long, global = true)]
    pub freeze_step: Option<u32>,
    /// Embedding dimension of backend and synthetic workload.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Synthetic prompts to generate, preload included.
    #[arg(long, global = true)]
    pub prompts: Option<usize>,
    #[arg(long, global = true)]
    pub preload: Option<usize>,
    /// Mean intra-cluster cosine for the synthetic stream.
    #[arg(long, global = true)]
    pub target_similarity: Option<f64>,
    /// Replay a JSON Lines trace instead of the synthetic stream.
    #[arg(long, global = true, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    #[arg(long, global = true)]
    pub maintenance_batch: Option<usize>,
    /// Also generate every hit from scratch and check the quality floor.
    #[arg(long, global = true)]
    pub audit_quality: bool,
    /// Mirror cached states to files under this directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub state_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, c: &mut ExperimentConfig) -> Result<(), CliError> {
        if let Some(seed) = self.seed {
            c.set_seed(seed);
        }
        if let Some(p) = self.policy {
            c.pipeline.policy = p;
        }
        if let Some(n) = self.capacity_items {
            c.pipeline.capacity_items = n;
        }
        if let Some(t) = self.match_predictor {
            c.pipeline.match_predictor = t == Toggle::On;
        }
        if let Some(n) = self.mp_centroids {
            c.pipeline.predictor.centroids = n;
        }
        if let Some(q) = self.mp_threshold_quantile {
            c.pipeline.predictor.threshold_quantile = q;
        }
        if let Some(a) = self.alpha {
            c.pipeline.alpha = a;
        }
        if let Some(a) = self.aggressiveness {
            c.pipeline.aggressiveness = a;
        }
        match self.thresholds.as_deref() {
            None => {}
            Some("profile") => c.selector.source = ThresholdSource::Profile,
            Some("reference") => c.selector.source = ThresholdSource::Reference,
            Some(path) => {
                c.selector.source = ThresholdSource::File;
                c.selector.file = Some(path.into());
            }
        }
        if let Some(steps) = &self.steps {
            c.steps = StepSet::new(steps.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(n) = self.n_steps {
            c.backend.n_steps = n;
        }
        if let Some(k) = self.freeze_step {
            c.backend.freeze_step = k;
        }
        if let Some(d) = self.dim {
            c.backend.embedding_dim = d;
            c.workload.synth.dim = d;
        }
        if let Some(n) = self.prompts {
            c.workload.synth.total_prompts = n;
        }
        if let Some(n) = self.preload {
            c.workload.preload = n;
        }
        if let Some(t) = self.target_similarity {
            c.workload.synth.target_similarity = Some(t);
        }
        if let Some(path) = &self.trace {
            c.workload.source = WorkloadKind::Trace;
            c.workload.trace = Some(path.clone());
        }
        if let Some(n) = self.maintenance_batch {
            c.pipeline.maintenance_batch = n;
        }
        if self.audit_quality {
            c.pipeline.audit_quality = true;
        }
        if let Some(dir) = &self.state_dir {
            c.output.state_dir = Some(dir.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Preload, stream the workload and report.
    Run {
        /// Write the JSON report here.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        /// Write one JSON outcome per request here.
        #[arg(long, value_name = "FILE")]
        outcomes: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Derive the similarity threshold for each cached step.
    Profile {
        /// Write the threshold map here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run every policy at every capacity on the same workload.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "lcbfu,lru,lfu,fifo")]
        policies: Vec<PolicyKind>,
        #[arg(long, value_delimiter = ',', default_value = "1500,15000")]
        capacities: Vec<usize>,
        /// Write the rows as JSON here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Serve POST /generate and GET /metrics over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Write the index as JSON Lines here on shutdown.
        #[arg(long, value_name = "FILE")]
        snapshot: Option<PathBuf>,
    },
    /// Write the synthetic stream as a JSON Lines trace.
    Synth {
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Print the sampled noise-scale to similarity table.
    Calibrate {
        #[arg(long, default_value_t = 2_000)]
        samples: usize,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}
