//! Masked fine-tuning loop, dense training, and evaluation.
//!
//! Each fine-tuning step draws a minibatch, runs one forward/backward pass,
//! scores the selector's candidates from that same gradient, advances the
//! mask, zeroes every gradient outside the mask, and takes a plain SGD step
//! `θ ← θ - η·g̃`.

use crate::data::Dataset;
use crate::diagnostics::{sparsity_entropy, tensor_sparsity, SparsityReport};
use crate::error::{Error, Result};
use crate::heuristics::{bias_only_select, score_candidates, HeuristicKind};
use crate::model::{Model, ParamId};
use crate::rng::{derive_seed, seeded, Rng};
use crate::selection::{distinct_updated, MaskSelector, MaskSet, StrategyConfig, TrajectoryRow};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Reject budgets above the selectable count instead of clamping.
    #[serde(default = "default_true")]
    pub strict_budget: bool,
    /// Ablation switch: when false, every trainable scalar is updated
    /// regardless of the mask.
    #[serde(default = "default_true")]
    pub mask_gradients: bool,
}

impl TrainConfig {
    pub fn new(
        strategy: StrategyConfig,
        steps: usize,
        learning_rate: f64,
        batch_size: usize,
    ) -> Self {
        TrainConfig {
            learning_rate,
            steps,
            batch_size,
            strategy,
            seed: 0,
            eval_every: None,
            strict_budget: true,
            mask_gradients: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.strategy.heuristic.validate()
    }
}

/// Hyper-parameters for unmasked training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: String,
    pub heuristic: String,
    /// Effective budget after clamping (bias count for bias-only).
    pub budget: usize,
    pub steps: usize,
    pub total_params: usize,
    pub trainable_params: usize,
    pub losses: Vec<f64>,
    pub mask_sizes: Vec<usize>,
    pub cumulative_updates: Vec<u64>,
    /// Σ_t |Λ_t|.
    pub total_updates: u64,
    pub distinct_updated: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub evals: Vec<EvalPoint>,
    pub trajectory: Vec<TrajectoryRow>,
    pub tensor_sparsity: Vec<f64>,
    pub entropy: Vec<Option<f64>>,
    /// Left out of serialized reports so artifacts stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// CSV with header `step,loss,mask_size,cum_updates`.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,loss,mask_size,cum_updates\n");
        for (i, ((loss, m), u)) in self
            .losses
            .iter()
            .zip(&self.mask_sizes)
            .zip(&self.cumulative_updates)
            .enumerate()
        {
            let _ = writeln!(out, "{},{},{},{}", i + 1, loss, m, u);
        }
        out
    }
}

/// Everything a fine-tuning run produces.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub mask: MaskSet,
    /// Per-step selected sets; their union is every scalar that was ever
    /// allowed to move.
    pub selected: Vec<Vec<ParamId>>,
    pub report: TrainReport,
    pub sparsity: SparsityReport,
}

impl FinetuneOutcome {
    /// Union of the per-step selected sets.
    pub fn touched(&self) -> MaskSet {
        MaskSet::from_ids(self.selected.iter().flatten().copied(), 0)
    }
}

/// Sequential epochs over a seeded shuffle.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Input("cannot batch an empty dataset".into()));
        }
        let mut rng = seeded(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Batcher {
            order,
            cursor: 0,
            batch_size: batch_size.clamp(1, len),
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Keeps gradients inside `mask`, zeroes everything else.
pub fn mask_gradients(grads: &[Tensor], mask: &MaskSet) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for id in mask.ids() {
        out[id.tensor].data_mut()[id.offset] = grads[id.tensor].data()[id.offset];
    }
    out
}

/// `θ ← θ - η·g` for every tensor.
pub fn sgd_step(model: &mut Model, grads: &[Tensor], learning_rate: f64) {
    for (i, g) in grads.iter().enumerate() {
        let p = model.param_mut(i);
        for (theta, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *theta -= learning_rate * d;
        }
    }
}

/// Argmax accuracy in `[0, 1]`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let logits = model.logits(&data.features)?;
    let correct = (0..data.len())
        .filter(|&i| argmax(logits.row(i)) == data.labels[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn tensor_sizes(model: &Model) -> Vec<usize> {
    model.params().iter().map(|p| p.value.len()).collect()
}

/// Trains every trainable tensor without masking. Returns per-step losses.
pub fn train_dense(model: &mut Model, data: &Dataset, config: &DenseConfig) -> Result<Vec<f64>> {
    if config.learning_rate.is_nan()
        || config.learning_rate <= 0.0
        || config.steps < 1
        || config.batch_size < 1
    {
        return Err(Error::Config(format!("invalid dense config {config:?}")));
    }
    let mut batcher = Batcher::new(data.len(), config.batch_size, config.seed)?;
    let trainable: Vec<bool> = model.params().iter().map(|p| p.trainable).collect();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let idx = batcher.next_batch();
        let batch = data.subset(&idx);
        let (loss, mut grads) = model.loss_and_grads(&batch.features, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::Input(format!("non-finite loss at step {step}")));
        }
        for (g, &t) in grads.iter_mut().zip(&trainable) {
            if !t {
                g.data_mut().fill(0.0);
            }
        }
        sgd_step(model, &grads, config.learning_rate);
        losses.push(loss);
    }
    Ok(losses)
}

/// Runs masked fine-tuning. `eval` is used for the periodic and final
/// held-out accuracy when given.
pub fn finetune(
    mut model: Model,
    train: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let started = Instant::now();
    let heuristic = &config.strategy.heuristic;
    let steps = config.steps;

    let mut selector = if heuristic.kind == HeuristicKind::BiasOnly {
        let ids: Vec<ParamId> = bias_only_select(&model)
            .into_iter()
            .filter(|id| model.params()[id.tensor].trainable)
            .collect();
        if ids.len() != config.strategy.budget {
            log::info!(
                "bias-only selection fixes the budget at {} (requested {})",
                ids.len(),
                config.strategy.budget
            );
        }
        MaskSelector::fixed(ids, steps)?
    } else {
        MaskSelector::new(
            config.strategy.strategy,
            config.strategy.budget,
            steps,
            model.trainable_ids().collect(),
            config.strict_budget,
        )?
    };

    let sizes = tensor_sizes(&model);
    let trainable: Vec<bool> = model.params().iter().map(|p| p.trainable).collect();
    let mut batcher = Batcher::new(train.len(), config.batch_size, derive_seed(config.seed, 0))?;
    let mut losses = Vec::with_capacity(steps);
    let mut mask_sizes = Vec::with_capacity(steps);
    let mut cumulative = Vec::with_capacity(steps);
    let mut sparsity_series = Vec::with_capacity(steps);
    let mut entropy_series = Vec::with_capacity(steps);
    let mut evals = Vec::new();
    let mut total: u64 = 0;

    for t in 1..=steps {
        let idx = batcher.next_batch();
        let batch = train.subset(&idx);
        let (loss, grads) = model.loss_and_grads(&batch.features, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::Input(format!("non-finite loss at step {t}")));
        }

        let scores = match selector.candidates() {
            Some(c) => Some(score_candidates(
                heuristic,
                &model,
                &grads,
                &batch.features,
                &c,
                t,
            )?),
            None => None,
        };
        let mask = selector.advance(scores.as_ref())?;

        let update = if config.mask_gradients {
            mask_gradients(&grads, mask)
        } else {
            grads
                .into_iter()
                .zip(&trainable)
                .map(|(g, &tr)| if tr { g } else { Tensor::zeros(g.shape()) })
                .collect()
        };
        sgd_step(&mut model, &update, config.learning_rate);

        total += mask.len() as u64;
        losses.push(loss);
        mask_sizes.push(mask.len());
        cumulative.push(total);
        sparsity_series.push(tensor_sparsity(mask, &sizes));
        entropy_series.push(sparsity_entropy(mask, &sizes).ok());

        if let (Some(every), Some(data)) = (config.eval_every, eval) {
            if t % every == 0 {
                evals.push(EvalPoint {
                    step: t,
                    accuracy: evaluate(&model, data)?,
                });
            }
        }
    }

    let mask = selector.mask().clone();
    let selected = selector.selected_history().to_vec();
    let report = TrainReport {
        strategy: selector
            .strategy()
            .map_or("fixed", |s| s.name())
            .to_string(),
        heuristic: heuristic.label(),
        budget: selector.budget(),
        steps,
        total_params: model.num_scalars(),
        trainable_params: model.num_trainable(),
        losses,
        mask_sizes,
        cumulative_updates: cumulative,
        total_updates: total,
        distinct_updated: distinct_updated(&selected),
        train_accuracy: evaluate(&model, train)?,
        test_accuracy: eval.map(|d| evaluate(&model, d)).transpose()?,
        evals,
        trajectory: selector.trajectory().to_vec(),
        tensor_sparsity: sparsity_series.clone(),
        entropy: entropy_series.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let sparsity = SparsityReport::new(
        &mask,
        &sizes,
        sparsity_series,
        entropy_series,
        selector.budget(),
        model.num_trainable(),
    );
    Ok(FinetuneOutcome {
        model,
        mask,
        selected,
        report,
        sparsity,
    })
}
