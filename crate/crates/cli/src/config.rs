//! Experiment configuration: one JSON document per sweep.

use serde::{Deserialize, Serialize};
use sparseft_core::data::GeneratorSpec;
use sparseft_core::{DenseConfig, HeuristicConfig, HeuristicKind, ModelConfig, Strategy};
use std::fmt;
use std::path::{Path, PathBuf};

/// Raised for anything the user can fix by editing the config or flags.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Pretraining distribution.
    pub source: GeneratorSpec,
    /// Fine-tuning distribution.
    pub target: GeneratorSpec,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed for dataset generation and the train/test split.
    #[serde(default)]
    pub seed: u64,
}

/// Low-rank adapter attached after pretraining; the base model is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub eval_every: Option<usize>,
}

/// Absolute count, or a fraction of the selectable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Count(usize),
    Fraction { fraction: f64 },
}

impl Budget {
    pub fn resolve(self, selectable: usize) -> Result<usize, ConfigError> {
        match self {
            Budget::Count(n) => Ok(n),
            Budget::Fraction { fraction } if (0.0..=1.0).contains(&fraction) => {
                Ok((fraction * selectable as f64).round() as usize)
            }
            Budget::Fraction { fraction } => Err(ConfigError(format!(
                "budget fraction must be in [0, 1], got {fraction}"
            ))),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(n) => write!(f, "{n}"),
            Budget::Fraction { fraction } => write!(f, "{fraction}N"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridStrategy {
    pub strategy: Strategy,
    pub heuristic: HeuristicConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub strategies: Vec<GridStrategy>,
    pub budgets: Vec<Budget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    /// Base model; any adapter fields here are ignored in favour of `adapter`.
    pub model: ModelConfig,
    pub pretrain: DenseConfig,
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    pub grid: Grid,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Fail a cell whose budget exceeds the selectable count instead of clamping.
    #[serde(default = "default_true")]
    pub strict_budget: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |e: sparseft_core::Error| ConfigError(e.to_string());
        if self.seeds.is_empty() {
            return Err(ConfigError("at least one seed is required".into()));
        }
        if self.grid.strategies.is_empty() || self.grid.budgets.is_empty() {
            return Err(ConfigError(
                "grid needs at least one strategy and one budget".into(),
            ));
        }
        self.model.validate().map_err(core)?;
        if self.model.widths[0] != self.task.source.dims()
            || self.model.widths[0] != self.task.target.dims()
        {
            return Err(ConfigError(format!(
                "model input width {} does not match task dims {} / {}",
                self.model.widths[0],
                self.task.source.dims(),
                self.task.target.dims()
            )));
        }
        let out = *self.model.widths.last().unwrap();
        if out != self.task.source.classes() || out != self.task.target.classes() {
            return Err(ConfigError(format!(
                "model output width {out} does not match task classes {} / {}",
                self.task.source.classes(),
                self.task.target.classes()
            )));
        }
        if !(0.0..1.0).contains(&self.task.test_fraction) {
            return Err(ConfigError(format!(
                "test_fraction must be in [0, 1), got {}",
                self.task.test_fraction
            )));
        }
        if self.pretrain.learning_rate.is_nan()
            || self.pretrain.learning_rate <= 0.0
            || self.pretrain.steps < 1
            || self.pretrain.batch_size < 1
        {
            return Err(ConfigError(
                "pretrain needs positive learning_rate, steps and batch_size".into(),
            ));
        }
        if self.finetune.learning_rate.is_nan()
            || self.finetune.learning_rate <= 0.0
            || self.finetune.steps < 1
            || self.finetune.batch_size < 1
        {
            return Err(ConfigError(
                "finetune needs positive learning_rate, steps and batch_size".into(),
            ));
        }
        for s in &self.grid.strategies {
            s.heuristic.validate().map_err(core)?;
        }
        for b in &self.grid.budgets {
            b.resolve(0)?;
        }
        Ok(())
    }

    /// The model that is pretrained: adapter fields stripped.
    pub fn base_model(&self) -> ModelConfig {
        ModelConfig {
            adapter_rank: 0,
            adapter_layers: Vec::new(),
            ..self.model.clone()
        }
    }

    /// Applies command-line overrides, then re-validates.
    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        let parse = |e: sparseft_core::Error| ConfigError(e.to_string());
        if let Some(s) = &o.strategy {
            let strategy: Strategy = s.parse().map_err(parse)?;
            for g in &mut self.grid.strategies {
                g.strategy = strategy;
            }
        }
        if let Some(h) = &o.heuristic {
            let heuristic = match h.parse::<HeuristicKind>() {
                Ok(kind) => HeuristicConfig::new(kind),
                Err(_) => HeuristicConfig::preset(h)
                    .map_err(|_| ConfigError(format!("unknown heuristic or preset '{h}'")))?,
            };
            for g in &mut self.grid.strategies {
                g.heuristic = heuristic.clone();
            }
        }
        for g in &mut self.grid.strategies {
            if let Some(eps) = o.epsilon {
                g.heuristic.epsilon = eps;
            }
            if let Some(exp) = o.exp {
                g.heuristic.exp = exp;
            }
        }
        self.grid.strategies.dedup();
        if let Some(b) = o.budget {
            self.grid.budgets = vec![Budget::Count(b)];
        }
        if let Some(steps) = o.steps {
            self.finetune.steps = steps;
        }
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        self.validate()
    }
}

/// Flag values that replace config fields when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub strategy: Option<String>,
    pub heuristic: Option<String>,
    pub budget: Option<usize>,
    pub steps: Option<usize>,
    pub epsilon: Option<f64>,
    pub exp: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}
