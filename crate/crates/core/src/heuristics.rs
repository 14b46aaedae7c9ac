//! Scalar-parameter importance scores.
//!
//! Higher scores are selected first. The gradient-aware score is
//! `|g| / (|θ| + ε)^exp`; the baselines are smallest magnitude (scored as
//! `-|θ|`), empirical Fisher, uniform random, and bias-only.

use crate::error::{Error, Result};
use crate::model::{Model, ParamId, ParamKind};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{softmax_rows, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    D3,
    Magnitude,
    Fisher,
    Random,
    BiasOnly,
}

impl HeuristicKind {
    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::D3 => "d3",
            HeuristicKind::Magnitude => "magnitude",
            HeuristicKind::Fisher => "fisher",
            HeuristicKind::Random => "random",
            HeuristicKind::BiasOnly => "bias_only",
        }
    }

    /// Whether scoring needs the current minibatch gradient.
    pub fn uses_gradient(self) -> bool {
        matches!(self, HeuristicKind::D3)
    }
}

impl std::str::FromStr for HeuristicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d3" => Ok(HeuristicKind::D3),
            "magnitude" | "pafi" => Ok(HeuristicKind::Magnitude),
            "fisher" | "fish" => Ok(HeuristicKind::Fisher),
            "random" => Ok(HeuristicKind::Random),
            "bias_only" | "bitfit" => Ok(HeuristicKind::BiasOnly),
            other => Err(Error::Config(format!("unknown heuristic '{other}'"))),
        }
    }
}

fn default_epsilon() -> f64 {
    1.0
}

fn default_exp() -> f64 {
    2.0
}

fn default_fisher_samples() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub kind: HeuristicKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_exp")]
    pub exp: f64,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl HeuristicConfig {
    pub fn new(kind: HeuristicKind) -> Self {
        HeuristicConfig {
            kind,
            epsilon: default_epsilon(),
            exp: default_exp(),
            fisher_samples: default_fisher_samples(),
            seed: 0,
        }
    }

    pub fn d3(epsilon: f64, exp: f64) -> Self {
        HeuristicConfig {
            epsilon,
            exp,
            ..HeuristicConfig::new(HeuristicKind::D3)
        }
    }

    /// ε = 1, exp = 2: the classification-task setting, and the CLI default.
    pub fn d3_classification() -> Self {
        HeuristicConfig::d3(1.0, 2.0)
    }

    /// ε = 1, exp = 0: gradient magnitude only, used for generation tasks.
    pub fn d3_generative() -> Self {
        HeuristicConfig::d3(1.0, 0.0)
    }

    /// ε = 0.5, exp = -1: best values from the ε / exp sweeps.
    pub fn d3_sweep_best() -> Self {
        HeuristicConfig::d3(0.5, -1.0)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "classification" | "default" => Ok(Self::d3_classification()),
            "generative" => Ok(Self::d3_generative()),
            "sweep_best" => Ok(Self::d3_sweep_best()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.exp.is_nan() {
            return Err(Error::Config("exp must not be NaN".into()));
        }
        if self.fisher_samples < 1 {
            return Err(Error::Config("fisher_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Short label for file names and reports, e.g. `d3(eps=1,exp=2)`.
    pub fn label(&self) -> String {
        match self.kind {
            HeuristicKind::D3 => format!("d3(eps={},exp={})", self.epsilon, self.exp),
            HeuristicKind::Fisher => format!("fisher(n={})", self.fisher_samples),
            k => k.name().to_string(),
        }
    }
}

/// One score per candidate scalar, aligned with `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    ids: Vec<ParamId>,
    scores: Vec<f64>,
}

impl ScoreField {
    pub fn new(ids: Vec<ParamId>, scores: Vec<f64>) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::Usage(format!(
                "{} ids but {} scores",
                ids.len(),
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::Input(format!("NaN score for {:?}", ids[i])));
        }
        Ok(ScoreField { ids, scores })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, f64)> + '_ {
        self.ids.iter().copied().zip(self.scores.iter().copied())
    }
}

pub fn d3_score(theta: f64, grad: f64, epsilon: f64, exp: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(grad.abs() / (theta.abs() + epsilon).powf(exp))
}

/// Negated magnitude, so the smallest parameters score highest.
pub fn magnitude_score(theta: f64) -> f64 {
    -theta.abs()
}

/// Empirical Fisher diagonal over `candidates`.
///
/// For every row of `inputs`, `fisher_samples` labels are drawn from the
/// model's own predictive distribution; the score is the mean squared
/// gradient of the log-likelihood of those labels.
pub fn fisher_score(
    model: &Model,
    inputs: &Tensor,
    fisher_samples: usize,
    seed: u64,
    candidates: &[ParamId],
) -> Result<ScoreField> {
    if fisher_samples < 1 {
        return Err(Error::Config("fisher_samples must be at least 1".into()));
    }
    if inputs.rank() != 2 || inputs.rows() == 0 {
        return Err(Error::Input("fisher_score needs a non-empty batch".into()));
    }
    let mut rng = seeded(seed);
    let probs = softmax_rows(&model.logits(inputs)?);
    let mut acc: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    for r in 0..inputs.rows() {
        let x = inputs.gather_rows(&[r]);
        for _ in 0..fisher_samples {
            let label = sample_categorical(probs.row(r), rng.random::<f64>());
            let (_, grads) = model.loss_and_grads(&x, &[label])?;
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (s, &v) in a.data_mut().iter_mut().zip(g.data()) {
                    *s += v * v;
                }
            }
        }
    }
    let denom = (inputs.rows() * fisher_samples) as f64;
    let scores = candidates
        .iter()
        .map(|id| acc[id.tensor].data()[id.offset] / denom)
        .collect();
    ScoreField::new(candidates.to_vec(), scores)
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Uniform(0, 1) scores, a pure function of `(seed, id)`.
///
/// Each id hashes to its own SplitMix64 draw, so the field does not depend
/// on the order candidates are listed in.
pub fn random_score(candidates: &[ParamId], seed: u64) -> ScoreField {
    let scores = candidates
        .iter()
        .map(|id| {
            let bits = derive_seed(derive_seed(seed, id.tensor as u64), id.offset as u64);
            (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
        })
        .collect();
    ScoreField {
        ids: candidates.to_vec(),
        scores,
    }
}

/// Every scalar of every bias tensor.
pub fn bias_only_select(model: &Model) -> Vec<ParamId> {
    model
        .param_ids()
        .filter(|id| model.params()[id.tensor].kind == ParamKind::Bias)
        .collect()
}

/// Scores `candidates` with the configured heuristic.
///
/// `grads` is the minibatch gradient aligned with the registry; `step`
/// decorrelates random draws between steps.
pub fn score_candidates(
    config: &HeuristicConfig,
    model: &Model,
    grads: &[Tensor],
    batch: &Tensor,
    candidates: &[ParamId],
    step: usize,
) -> Result<ScoreField> {
    config.validate()?;
    let step_seed = derive_seed(config.seed, step as u64);
    match config.kind {
        HeuristicKind::D3 => {
            let scores = candidates
                .iter()
                .map(|&id| {
                    d3_score(
                        model.value(id),
                        grads[id.tensor].data()[id.offset],
                        config.epsilon,
                        config.exp,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            ScoreField::new(candidates.to_vec(), scores)
        }
        HeuristicKind::Magnitude => {
            let scores = candidates
                .iter()
                .map(|&id| magnitude_score(model.value(id)))
                .collect();
            ScoreField::new(candidates.to_vec(), scores)
        }
        HeuristicKind::Fisher => {
            fisher_score(model, batch, config.fisher_samples, step_seed, candidates)
        }
        HeuristicKind::Random => Ok(random_score(candidates, step_seed)),
        HeuristicKind::BiasOnly => {
            let scores = candidates
                .iter()
                .map(|id| {
                    if model.params()[id.tensor].kind == ParamKind::Bias {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            ScoreField::new(candidates.to_vec(), scores)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn d3_examples() {
        assert_eq!(d3_score(0.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((d3_score(0.5, 0.2, 1.0, 1.0).unwrap() - 0.2 / 1.5).abs() < 1e-15);
        assert!((d3_score(0.5, 0.2, 0.5, -1.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(d3_score(0.5, 0.2, 0.0, 1.0).unwrap_err().is_config());
        assert!(d3_score(0.5, 0.2, -1.0, 1.0).is_err());
    }

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude_score(0.0), 0.0);
        assert_eq!(magnitude_score(0.5), -0.5);
        assert_eq!(magnitude_score(-0.5), -0.5);
    }

    #[test]
    fn presets() {
        let c = HeuristicConfig::preset("default").unwrap();
        assert_eq!((c.epsilon, c.exp), (1.0, 2.0));
        let g = HeuristicConfig::preset("generative").unwrap();
        assert_eq!((g.epsilon, g.exp), (1.0, 0.0));
        let s = HeuristicConfig::preset("sweep_best").unwrap();
        assert_eq!((s.epsilon, s.exp), (0.5, -1.0));
        assert!(HeuristicConfig::preset("nope").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = HeuristicConfig::new(HeuristicKind::Fisher);
        c.fisher_samples = 0;
        assert!(c.validate().unwrap_err().is_config());
        assert!(HeuristicConfig::d3(0.0, 1.0).validate().is_err());
        assert!(HeuristicConfig::d3(f64::INFINITY, 1.0).validate().is_ok());
    }

    #[test]
    fn score_field_rejects_nan() {
        let ids = vec![ParamId::new(0, 0)];
        assert!(ScoreField::new(ids, vec![f64::NAN]).is_err());
    }

    #[test]
    fn random_scores_are_seeded() {
        let ids: Vec<_> = (0..16).map(|o| ParamId::new(0, o)).collect();
        assert_eq!(random_score(&ids, 3), random_score(&ids, 3));
        assert_ne!(random_score(&ids, 3), random_score(&ids, 4));
        assert!(random_score(&ids, 3)
            .scores()
            .iter()
            .all(|&s| (0.0..1.0).contains(&s)));
    }

    #[test]
    fn bias_only_counts() {
        let m = Model::build(&ModelConfig::mlp(&[2, 8, 2], 0)).unwrap();
        let ids = bias_only_select(&m);
        assert_eq!(ids.len(), 10);

        let mut m = Model::build(&ModelConfig::mlp(&[2, 8, 2], 0)).unwrap();
        m.attach_low_rank_adapter(0, 2).unwrap();
        let ids = bias_only_select(&m);
        assert_eq!(ids.len(), 10);
        assert!(ids
            .iter()
            .all(|id| m.params()[id.tensor].kind == ParamKind::Bias));
    }

    #[test]
    fn bias_only_empty_without_bias_tensors() {
        let mut m = Model::build(&ModelConfig::mlp(&[2, 8, 2], 0)).unwrap();
        for i in 0..m.params().len() {
            m.param_mut(i).kind = ParamKind::Weight;
        }
        assert!(bias_only_select(&m).is_empty());
    }

    #[test]
    fn fisher_of_single_gradient_is_its_square() {
        // Two-class single-layer model with zero weights: p = (0.5, 0.5).
        // d/dW00 log p(y|x) = (1{y=0} - 0.5) * x0, so with x0 = 0.6 the
        // squared score is 0.09 whichever label is drawn.
        let mut m = Model::build(&ModelConfig::mlp(&[1, 2], 0)).unwrap();
        m.param_mut(0).value.data_mut().fill(0.0);
        let x = Tensor::from_rows(&[vec![0.6]]).unwrap();
        let ids = vec![ParamId::new(0, 0), ParamId::new(1, 0)];
        let f = fisher_score(&m, &x, 1, 5, &ids).unwrap();
        assert!((f.scores()[0] - 0.09).abs() < 1e-15);
        assert!((f.scores()[1] - 0.25).abs() < 1e-15);

        let zero = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let f = fisher_score(&m, &zero, 3, 5, &ids).unwrap();
        assert_eq!(f.scores()[0], 0.0);
        assert!(fisher_score(&m, &x, 0, 5, &ids).unwrap_err().is_config());
    }

    #[test]
    fn fisher_matches_bernoulli_logit_oracle() {
        // Logits (z, 0) give p0 = sigmoid(z); the Fisher information of the
        // logit is p0 (1 - p0). Scale the weight so z = 1.2 for x = 1.
        let mut m = Model::build(&ModelConfig::mlp(&[1, 2], 0)).unwrap();
        m.param_mut(0).value = Tensor::from_rows(&[vec![1.2], vec![0.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let ids = vec![ParamId::new(0, 0)];
        let f = fisher_score(&m, &x, 20_000, 11, &ids).unwrap();
        let p0 = 1.0 / (1.0 + (-1.2f64).exp());
        let exact = p0 * (1.0 - p0);
        assert!(
            (f.scores()[0] - exact).abs() < 0.01 * exact,
            "{} vs {exact}",
            f.scores()[0]
        );
    }

    proptest! {
        #[test]
        fn d3_exp_zero_is_abs_grad(theta in -10.0..10.0f64, g in -10.0..10.0f64, eps in 1e-3..10.0f64) {
            prop_assert_eq!(d3_score(theta, g, eps, 0.0).unwrap(), g.abs());
        }

        #[test]
        fn d3_monotone(theta in -5.0..5.0f64, g1 in 0.0..5.0f64, dg in 0.0..5.0f64,
                       eps in 1e-3..5.0f64, exp in 0.0..3.0f64, dt in 0.0..5.0f64) {
            let g2 = g1 + dg;
            prop_assert!(d3_score(theta, g1, eps, exp).unwrap() <= d3_score(theta, -g2, eps, exp).unwrap());
            let t2 = theta.abs() + dt;
            prop_assert!(d3_score(t2, g1, eps, exp).unwrap() <= d3_score(theta, g1, eps, exp).unwrap());
        }

        #[test]
        fn scores_are_permutation_equivariant(seed in 0u64..1000, rot in 0usize..42) {
            let m = Model::build(&ModelConfig::mlp(&[2, 8, 2], seed)).unwrap();
            let x = Tensor::from_rows(&[vec![0.5, -0.5], vec![1.0, 0.2]]).unwrap();
            let (_, grads) = m.loss_and_grads(&x, &[0, 1]).unwrap();
            let ids: Vec<_> = m.param_ids().collect();
            let mut permuted = ids.clone();
            permuted.rotate_left(rot);
            for kind in [HeuristicKind::D3, HeuristicKind::Magnitude, HeuristicKind::BiasOnly, HeuristicKind::Fisher, HeuristicKind::Random] {
                let cfg = HeuristicConfig::new(kind);
                let a = score_candidates(&cfg, &m, &grads, &x, &ids, 1).unwrap();
                let b = score_candidates(&cfg, &m, &grads, &x, &permuted, 1).unwrap();
                let lookup: std::collections::HashMap<_, _> = a.iter().map(|(i, s)| (i, s.to_bits())).collect();
                for (id, s) in b.iter() {
                    prop_assert_eq!(lookup[&id], s.to_bits());
                    if kind == HeuristicKind::Fisher {
                        prop_assert!(s >= 0.0);
                    }
                }
            }
        }
    }
}
