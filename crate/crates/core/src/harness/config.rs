//! Experiment configuration files.
//!
//! Configs are TOML. The network is given as an input shape plus a layer
//! list; per-layer input/output shapes are inferred and validated on load.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//! format = "csv"
//!
//! [network]
//! input_shape = [1, 8, 8]
//! [[network.layers]]
//! kind = "conv2d"
//! out_channels = 8
//! kernel = 3
//! stride = 1
//! padding = 1
//! [[network.layers]]
//! kind = "relu"
//! [[network.layers]]
//! kind = "flatten"
//! [[network.layers]]
//! kind = "dense"
//! out_dim = 10
//!
//! [data]
//! classes = 10
//! dim = 64
//! samples = 2000
//! seed = 11
//!
//! [train]
//! epochs = 10
//! batch_size = 32
//! lr = 0.1
//! momentum = 0.9
//! weight_decay = 1e-4
//! lr_drop_epochs = [7]
//! lr_drop_factor = 0.1
//! loss = "cross_entropy"
//!
//! [prune]
//! scorer = "synflow"
//! rho = 100.0
//! iterations = 100
//! schedule = "exponential"
//! sub_batch = 32
//!
//! [sweep]
//! scorers = ["synflow", "snip", "grasp", "magnitude", "random"]
//! rho_exponent_step = 0.25
//! seeds = [0, 1, 2]
//! ```
//!
//! A residual add is written `kind = "residual_add"` with either
//! `source = "input"` or `source = { layer = 2 }`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::train::Hyperparams;
use crate::netgraph::{LayerKind, NetworkSpec};
use crate::pruner::ScheduleKind;
use crate::scoring::ScorerKind;

/// Serializable scorer selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerSpec {
    Random,
    Magnitude,
    Snip,
    Grasp,
    Synflow,
}

impl From<ScorerSpec> for ScorerKind {
    fn from(s: ScorerSpec) -> ScorerKind {
        match s {
            ScorerSpec::Random => ScorerKind::Random,
            ScorerSpec::Magnitude => ScorerKind::Magnitude,
            ScorerSpec::Snip => ScorerKind::Snip,
            ScorerSpec::Grasp => ScorerKind::Grasp,
            ScorerSpec::Synflow => ScorerKind::SynFlow,
        }
    }
}

impl std::str::FromStr for ScorerSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ScorerSpec::Random),
            "magnitude" => Ok(ScorerSpec::Magnitude),
            "snip" => Ok(ScorerSpec::Snip),
            "grasp" => Ok(ScorerSpec::Grasp),
            "synflow" => Ok(ScorerSpec::Synflow),
            other => Err(Error::config(format!("unknown scorer '{other}'"))),
        }
    }
}

/// Serializable schedule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleSpec {
    Linear,
    Exponential,
}

impl From<ScheduleSpec> for ScheduleKind {
    fn from(s: ScheduleSpec) -> ScheduleKind {
        match s {
            ScheduleSpec::Linear => ScheduleKind::Linear,
            ScheduleSpec::Exponential => ScheduleKind::Exponential,
        }
    }
}

impl std::str::FromStr for ScheduleSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleSpec::Linear),
            "exponential" => Ok(ScheduleSpec::Exponential),
            other => Err(Error::config(format!("unknown schedule '{other}'"))),
        }
    }
}

/// Output file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::config(format!("unknown format '{other}'"))),
        }
    }
}

/// Network section: input shape plus layer kinds; shapes are inferred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
}

impl NetworkConfig {
    pub fn to_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(self.input_shape.clone(), self.layers.clone())
    }
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Single prune-run parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub scorer: ScorerSpec,
    pub rho: f64,
    pub iterations: usize,
    pub schedule: ScheduleSpec,
    /// Examples drawn for SNIP/GraSP scoring; defaults to 10 x classes.
    #[serde(default)]
    pub scoring_examples: Option<usize>,
    /// Gradient-accumulation sub-batch size for SNIP/GraSP.
    #[serde(default = "default_sub_batch")]
    pub sub_batch: usize,
}

fn default_sub_batch() -> usize {
    32
}

/// Sweep grid parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub scorers: Vec<ScorerSpec>,
    /// Explicit ρ grid; when empty the grid is 10^{0, step, 2·step, ...} up
    /// to and including ρ_max.
    #[serde(default)]
    pub rho_values: Vec<f64>,
    #[serde(default = "default_exp_step")]
    pub rho_exponent_step: f64,
    pub seeds: Vec<u64>,
    /// Iterations for every scorer in the sweep. When absent, synflow uses
    /// `prune.iterations` and the other scorers run single-shot, matching
    /// each algorithm's own convention.
    #[serde(default)]
    pub iterations: Option<usize>,
}

fn default_exp_step() -> f64 {
    0.25
}

/// A full experiment description. Seeds fully determine every stochastic
/// choice made by the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: OutputFormat,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub train: Hyperparams,
    pub prune: PruneConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_format() -> OutputFormat {
    OutputFormat::Csv
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.to_spec()?;
        if self.data.classes < 2 {
            return Err(Error::config("data.classes must be at least 2"));
        }
        let spec = self.network.to_spec()?;
        if spec.output_dim() != self.data.classes {
            return Err(Error::config(format!(
                "network output dim {} does not match data.classes {}",
                spec.output_dim(),
                self.data.classes
            )));
        }
        let flat: usize = self.network.input_shape.iter().product();
        if flat != self.data.dim {
            return Err(Error::config(format!(
                "network input holds {flat} features but data.dim is {}",
                self.data.dim
            )));
        }
        if self.prune.rho < 1.0 {
            return Err(Error::config("prune.rho must be at least 1"));
        }
        if self.prune.iterations == 0 {
            return Err(Error::config("prune.iterations must be at least 1"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.scorers.is_empty() {
                return Err(Error::config("sweep.scorers is empty"));
            }
            if sweep.seeds.is_empty() {
                return Err(Error::config("sweep.seeds is empty"));
            }
            if !sweep.rho_values.is_empty() {
                let increasing =
                    sweep.rho_values.windows(2).all(|w| w[0] < w[1]) && sweep.rho_values[0] >= 1.0;
                if !increasing {
                    return Err(Error::config("sweep.rho_values must be strictly increasing and >= 1"));
                }
            }
            if sweep.rho_exponent_step <= 0.0 {
                return Err(Error::config("sweep.rho_exponent_step must be positive"));
            }
        }
        Ok(())
    }

    /// Effective SNIP/GraSP scoring-set size: ten times the class count
    /// unless overridden.
    pub fn scoring_examples(&self) -> usize {
        self.prune.scoring_examples.unwrap_or(10 * self.data.classes)
    }
}
