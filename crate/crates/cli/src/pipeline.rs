//! Pretrain → finetune → evaluate, per grid cell, with on-disk artifacts.

use crate::config::{Budget, ConfigError, ExperimentConfig, GridStrategy};
use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use sparseft_core::data::TaskData;
use sparseft_core::diagnostics::update_count_report;
use sparseft_core::mask_store;
use sparseft_core::rng::derive_seed;
use sparseft_core::trainer::{evaluate, finetune, train_dense};
use sparseft_core::{FinetuneOutcome, Model, StrategyConfig, TrainConfig};
use std::fs;
use std::path::{Path, PathBuf};

/// Source and target data for one experiment.
pub struct Tasks {
    pub source: TaskData,
    pub target: TaskData,
}

pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Tasks> {
    let t = &cfg.task;
    Ok(Tasks {
        source: TaskData::generate(&t.source, t.seed, t.test_fraction)?,
        target: TaskData::generate(&t.target, derive_seed(t.seed, 1), t.test_fraction)?,
    })
}

/// Hex SHA-256 of everything that determines the pretrained weights.
pub fn pretrain_key(cfg: &ExperimentConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        model: sparseft_core::ModelConfig,
        source: &'a sparseft_core::GeneratorSpec,
        test_fraction: f64,
        task_seed: u64,
        pretrain: &'a sparseft_core::DenseConfig,
    }
    let key = Key {
        model: cfg.base_model(),
        source: &cfg.task.source,
        test_fraction: cfg.task.test_fraction,
        task_seed: cfg.task.seed,
        pretrain: &cfg.pretrain,
    };
    let json = serde_json::to_vec(&key).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub path: PathBuf,
    pub cached: bool,
    pub source_test_accuracy: f64,
    pub target_test_accuracy: f64,
}

/// Loads the cached dense checkpoint or trains and stores it.
pub fn pretrained(cfg: &ExperimentConfig, tasks: &Tasks) -> Result<(Model, PretrainSummary)> {
    let dir = cfg.output_dir.join("pretrained");
    let path = dir.join(format!("{}.iddn", &pretrain_key(cfg)[..16]));
    let mut model = Model::build(&cfg.base_model())?;
    let cached = path.exists();
    if cached {
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        model
            .load_dense(&bytes)
            .with_context(|| format!("loading {}", path.display()))?;
        log::info!("reusing pretrained checkpoint {}", path.display());
    } else {
        train_dense(&mut model, &tasks.source.train, &cfg.pretrain)?;
        fs::create_dir_all(&dir)?;
        write_atomic(&path, &model.save_dense()?)?;
        log::info!("pretrained checkpoint written to {}", path.display());
    }
    let summary = PretrainSummary {
        path,
        cached,
        source_test_accuracy: evaluate(&model, &tasks.source.test)?,
        target_test_accuracy: evaluate(&model, &tasks.target.test)?,
    };
    Ok((model, summary))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One (strategy, budget, seed) combination.
#[derive(Debug, Clone)]
pub struct Cell {
    pub index: usize,
    pub strategy: GridStrategy,
    pub budget: Budget,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!(
            "{:03}-{}-{}-b{}-s{}",
            self.index,
            self.strategy.strategy.name(),
            self.strategy.heuristic.kind.name(),
            self.budget,
            self.seed
        )
    }
}

/// Cells in strategy-major, then budget, then seed order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for s in &cfg.grid.strategies {
        for &b in &cfg.grid.budgets {
            for &seed in &cfg.seeds {
                out.push(Cell {
                    index: out.len(),
                    strategy: s.clone(),
                    budget: b,
                    seed,
                });
            }
        }
    }
    out
}

/// Pretrained model prepared for fine-tuning (adapters attached, base frozen).
pub fn finetune_base(cfg: &ExperimentConfig, pretrained: &Model) -> Result<Model> {
    let mut model = pretrained.clone();
    if let Some(a) = &cfg.adapter {
        for &layer in &a.layers {
            model.attach_low_rank_adapter(layer, a.rank)?;
        }
        model.freeze_all_but_adapters();
    }
    Ok(model)
}

/// Train config for one cell. The cell seed drives batching and any
/// heuristic randomness.
pub fn cell_train_config(
    cfg: &ExperimentConfig,
    cell: &Cell,
    selectable: usize,
) -> Result<TrainConfig> {
    let budget = cell.budget.resolve(selectable)?;
    let cell_seed = derive_seed(cell.seed, cell.index as u64);
    let mut heuristic = cell.strategy.heuristic.clone();
    heuristic.seed = cell_seed;
    let strategy = StrategyConfig {
        strategy: cell.strategy.strategy,
        heuristic,
        budget,
    };
    let mut tc = TrainConfig::new(
        strategy,
        cfg.finetune.steps,
        cfg.finetune.learning_rate,
        cfg.finetune.batch_size,
    );
    tc.seed = cell_seed;
    tc.eval_every = cfg.finetune.eval_every;
    tc.strict_budget = cfg.strict_budget;
    Ok(tc)
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub index: usize,
    pub strategy: String,
    pub heuristic: String,
    pub budget: String,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellMetrics {
    pub budget: usize,
    pub accuracy: f64,
    pub distinct_updated: usize,
    pub total_updates: u64,
}

/// Writes every per-run artifact for a finished fine-tune into `dir`.
pub fn write_artifacts(dir: &Path, out: &FinetuneOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let counts = update_count_report(
        out.report.strategy.parse().ok(),
        out.report.budget,
        &out.report.mask_sizes,
    );
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        report: &'a sparseft_core::TrainReport,
        update_counts: sparseft_core::diagnostics::UpdateCountReport,
    }
    let report = Report {
        report: &out.report,
        update_counts: counts,
    };
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    fs::write(
        dir.join("sparsity.json"),
        serde_json::to_vec_pretty(&out.sparsity)?,
    )?;
    fs::write(
        dir.join("mask.idmk"),
        mask_store::encode(&out.model, &out.touched())?,
    )?;
    fs::write(dir.join("steps.csv"), out.report.steps_csv())?;
    fs::write(
        dir.join("trajectory.csv"),
        sparseft_core::selection::trajectory_csv(&out.report.trajectory),
    )?;
    fs::write(dir.join("sparsity.csv"), out.sparsity.series_csv())?;
    Ok(())
}

fn run_cell(
    cfg: &ExperimentConfig,
    tasks: &Tasks,
    base: &Model,
    cell: &Cell,
) -> std::result::Result<CellMetrics, String> {
    let dir = cfg.output_dir.join("cells").join(cell.dir_name());
    let result = (|| -> Result<CellMetrics> {
        let tc = cell_train_config(cfg, cell, base.num_trainable())?;
        let out = finetune(
            base.clone(),
            &tasks.target.train,
            Some(&tasks.target.test),
            &tc,
        )?;
        write_artifacts(&dir, &out)?;
        Ok(CellMetrics {
            budget: out.report.budget,
            accuracy: out
                .report
                .test_accuracy
                .unwrap_or(out.report.train_accuracy),
            distinct_updated: out.report.distinct_updated,
            total_updates: out.report.total_updates,
        })
    })();
    result.map_err(|e| {
        let message = format!("{e:#}");
        log::warn!("cell {} failed: {message}", cell.dir_name());
        let _ = fs::create_dir_all(&dir).and_then(|_| {
            fs::write(
                dir.join("error.json"),
                serde_json::to_vec_pretty(&serde_json::json!({ "error": message }))
                    .unwrap_or_default(),
            )
        });
        message
    })
}

#[derive(Debug)]
pub struct SweepSummary {
    pub pretrain: PretrainSummary,
    pub results: Vec<CellResult>,
    pub aggregate: PathBuf,
}

impl SweepSummary {
    pub fn failed(&self) -> usize {
        self.results.iter().filter(|r| r.outcome.is_err()).count()
    }
}

/// Runs every grid cell on a pool of `jobs` threads and writes
/// `aggregate.csv` in cell order.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepSummary> {
    if jobs == 0 {
        return Err(ConfigError("--jobs must be at least 1".into()).into());
    }
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let tasks = load_tasks(cfg)?;
    let (pre, pretrain) = pretrained(cfg, &tasks)?;
    let base = finetune_base(cfg, &pre)?;
    let grid = cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let results: Vec<CellResult> = pool.install(|| {
        grid.par_iter()
            .map(|cell| CellResult {
                index: cell.index,
                strategy: cell.strategy.strategy.name().to_string(),
                heuristic: cell.strategy.heuristic.label(),
                budget: cell.budget.to_string(),
                seed: cell.seed,
                outcome: run_cell(cfg, &tasks, &base, cell),
            })
            .collect()
    });
    let aggregate = cfg.output_dir.join("aggregate.csv");
    write_aggregate(&aggregate, &results)?;
    Ok(SweepSummary {
        pretrain,
        results,
        aggregate,
    })
}

pub fn write_aggregate(path: &Path, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cell",
        "strategy",
        "heuristic",
        "budget",
        "seed",
        "status",
        "accuracy",
        "distinct_updated",
        "total_updates",
    ])?;
    for r in results {
        let (status, budget, acc, distinct, total) = match &r.outcome {
            Ok(m) => (
                "ok",
                m.budget.to_string(),
                m.accuracy.to_string(),
                m.distinct_updated.to_string(),
                m.total_updates.to_string(),
            ),
            Err(_) => (
                "failed",
                r.budget.clone(),
                String::new(),
                String::new(),
                String::new(),
            ),
        };
        w.write_record([
            r.index.to_string(),
            r.strategy.clone(),
            r.heuristic.clone(),
            budget,
            r.seed.to_string(),
            status.to_string(),
            acc,
            distinct,
            total,
        ])?;
    }
    w.flush()?;
    Ok(())
}
