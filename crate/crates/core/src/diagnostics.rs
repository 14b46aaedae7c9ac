//! Run diagnostics: tensor sparsity, sparsity entropy, update-count
//! accounting, and a Monte-Carlo check that the expected importance score is
//! bounded by the square root of the Fisher information.

use crate::error::{Error, Result};
use crate::heuristics::d3_score;
use crate::rng::seeded;
use crate::selection::{MaskSet, Strategy};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fraction of tensors with no unmasked scalar.
pub fn tensor_sparsity(mask: &MaskSet, tensor_sizes: &[usize]) -> f64 {
    if tensor_sizes.is_empty() {
        return 1.0;
    }
    let mut touched = vec![false; tensor_sizes.len()];
    for id in mask.ids() {
        touched[id.tensor] = true;
    }
    touched.iter().filter(|&&t| !t).count() as f64 / tensor_sizes.len() as f64
}

/// `|P_j ∩ Λ| / |P_j|` for every tensor `j`.
pub fn sparsity_probabilities(mask: &MaskSet, tensor_sizes: &[usize]) -> Vec<f64> {
    let mut counts = vec![0usize; tensor_sizes.len()];
    for id in mask.ids() {
        counts[id.tensor] += 1;
    }
    counts
        .iter()
        .zip(tensor_sizes)
        .map(|(&c, &n)| c as f64 / n as f64)
        .collect()
}

/// Shannon entropy (nats) of the normalised sparsity probabilities.
pub fn sparsity_entropy(mask: &MaskSet, tensor_sizes: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Input("sparsity entropy of an empty mask".into()));
    }
    Ok(entropy_of(&sparsity_probabilities(mask, tensor_sizes)))
}

/// Entropy of `weights / sum(weights)`, zero terms contributing nothing.
pub fn entropy_of(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let h: f64 = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let q = w / total;
            -q * q.ln()
        })
        .sum();
    // A single non-zero term is exactly zero; avoid returning -0.0.
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub tensor_count: usize,
    pub tensor_sparsity: Vec<f64>,
    /// `None` for steps where the mask was still empty.
    pub entropy: Vec<Option<f64>>,
    pub final_tensor_sparsity: f64,
    pub final_probabilities: Vec<f64>,
    pub final_entropy: Option<f64>,
    /// `B / N`.
    pub budget_fraction: f64,
    /// `1 - B / N`.
    pub sparsity: f64,
}

impl SparsityReport {
    pub fn new(
        final_mask: &MaskSet,
        tensor_sizes: &[usize],
        series: Vec<f64>,
        entropy: Vec<Option<f64>>,
        budget: usize,
        total_params: usize,
    ) -> Self {
        let budget_fraction = budget as f64 / total_params.max(1) as f64;
        let final_tensor_sparsity = tensor_sparsity(final_mask, tensor_sizes);
        SparsityReport {
            tensor_count: tensor_sizes.len(),
            tensor_sparsity: series,
            entropy,
            final_tensor_sparsity,
            final_probabilities: sparsity_probabilities(final_mask, tensor_sizes),
            final_entropy: sparsity_entropy(final_mask, tensor_sizes).ok(),
            budget_fraction,
            sparsity: 1.0 - budget_fraction,
        }
    }

    /// CSV with header `step,tensor_sparsity,entropy`; empty entropy cells
    /// mark steps with an empty mask.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("step,tensor_sparsity,entropy\n");
        for (i, (s, h)) in self.tensor_sparsity.iter().zip(&self.entropy).enumerate() {
            let h = h.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", i + 1, s, h));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateCountReport {
    pub strategy: Option<Strategy>,
    pub budget: usize,
    pub steps: usize,
    /// Σ_t |Λ_t| as logged by the run.
    pub observed: u64,
    /// `(T+1)B/2` for increment when `T | B`, `T·B` for static and repeat.
    pub predicted: Option<u64>,
    /// `T·B`, the static-mask cost at the same budget.
    pub static_equivalent: u64,
    /// `observed / static_equivalent`.
    pub ratio_to_static: f64,
}

/// Closed-form update counts under the uniform scheduler.
pub fn predicted_updates(strategy: Strategy, budget: usize, steps: usize) -> Option<u64> {
    let (b, t) = (budget as u64, steps as u64);
    match strategy {
        Strategy::Increment if t > 0 && b % t == 0 => Some((t + 1) * b / 2),
        Strategy::Increment => None,
        Strategy::Static | Strategy::Repeat => Some(t * b),
    }
}

pub fn update_count_report(
    strategy: Option<Strategy>,
    budget: usize,
    mask_sizes: &[usize],
) -> UpdateCountReport {
    let steps = mask_sizes.len();
    let observed: u64 = mask_sizes.iter().map(|&m| m as u64).sum();
    let static_equivalent = steps as u64 * budget as u64;
    UpdateCountReport {
        strategy,
        budget,
        steps,
        observed,
        predicted: strategy.and_then(|s| predicted_updates(s, budget, steps)),
        static_equivalent,
        ratio_to_static: if static_equivalent == 0 {
            0.0
        } else {
            observed as f64 / static_equivalent as f64
        },
    }
}

/// One-parameter likelihood with a known score function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScoreModel {
    /// `y ~ Bernoulli(p)`, differentiated in `p`.
    Bernoulli { p: f64 },
    /// `y ~ N(mean, std²)`, differentiated in `mean`.
    Gaussian { mean: f64, std: f64 },
}

impl ScoreModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScoreModel::Bernoulli { p } if p > 0.0 && p < 1.0 => Ok(()),
            ScoreModel::Gaussian { std, mean } if std > 0.0 && mean.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid distribution {other:?}"))),
        }
    }

    /// The parameter the score is taken with respect to.
    pub fn theta(&self) -> f64 {
        match *self {
            ScoreModel::Bernoulli { p } => p,
            ScoreModel::Gaussian { mean, .. } => mean,
        }
    }

    /// Draws `y` and returns `d/dθ log f(y; θ)`.
    pub fn sample_score(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ScoreModel::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    1.0 / p
                } else {
                    -1.0 / (1.0 - p)
                }
            }
            ScoreModel::Gaussian { std, .. } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z / std
            }
        }
    }

    pub fn fisher_information(&self) -> f64 {
        match *self {
            ScoreModel::Bernoulli { p } => 1.0 / (p * (1.0 - p)),
            ScoreModel::Gaussian { std, .. } => 1.0 / (std * std),
        }
    }

    /// `E|score|`: 2 for any Bernoulli, `sqrt(2/π)/σ` for the Gaussian mean.
    pub fn mean_abs_score(&self) -> f64 {
        match *self {
            ScoreModel::Bernoulli { .. } => 2.0,
            ScoreModel::Gaussian { std, .. } => (2.0 / std::f64::consts::PI).sqrt() / std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherBoundCheck {
    pub distribution: ScoreModel,
    pub epsilon: f64,
    pub exp: f64,
    pub samples: usize,
    /// Monte-Carlo mean of the importance score.
    pub expected_score: f64,
    pub standard_error: f64,
    /// `sqrt(mean(score²))`.
    pub sqrt_fisher: f64,
    /// Monte-Carlo mean of `|score|`.
    pub mean_abs_score: f64,
    /// `expected_score <= sqrt_fisher + 3 * standard_error`.
    pub holds: bool,
}

pub const MIN_FISHER_SAMPLES: usize = 10_000;

/// Estimates `E[|score| / (|θ| + ε)^exp]` and `sqrt(I(θ))` from `samples`
/// draws. The bound is only guaranteed for `ε >= 1` and `exp >= 0`; `ε < 1`
/// is rejected, negative `exp` is computed but carries no guarantee.
pub fn fisher_bound_check(
    distribution: ScoreModel,
    epsilon: f64,
    exp: f64,
    samples: usize,
    seed: u64,
) -> Result<FisherBoundCheck> {
    distribution.validate()?;
    if epsilon.is_nan() || epsilon < 1.0 {
        return Err(Error::Config(format!(
            "fisher bound requires epsilon >= 1, got {epsilon}"
        )));
    }
    if samples < MIN_FISHER_SAMPLES {
        return Err(Error::Config(format!(
            "fisher bound needs at least {MIN_FISHER_SAMPLES} samples, got {samples}"
        )));
    }
    let theta = distribution.theta();
    let mut rng = seeded(seed);
    let (mut sum_h, mut sum_h2, mut sum_abs, mut sum_s2) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..samples {
        let s = distribution.sample_score(&mut rng);
        let h = d3_score(theta, s, epsilon, exp)?;
        sum_h += h;
        sum_h2 += h * h;
        sum_abs += s.abs();
        sum_s2 += s * s;
    }
    let n = samples as f64;
    let mean_h = sum_h / n;
    let var_h = (sum_h2 / n - mean_h * mean_h).max(0.0) * n / (n - 1.0);
    let standard_error = (var_h / n).sqrt();
    let sqrt_fisher = (sum_s2 / n).sqrt();
    Ok(FisherBoundCheck {
        distribution,
        epsilon,
        exp,
        samples,
        expected_score: mean_h,
        standard_error,
        sqrt_fisher,
        mean_abs_score: sum_abs / n,
        holds: mean_h <= sqrt_fisher + 3.0 * standard_error,
    })
}

/// Monte-Carlo estimate of the Fisher information `E[score²]`.
pub fn empirical_fisher(distribution: ScoreModel, samples: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    (0..samples)
        .map(|_| distribution.sample_score(&mut rng).powi(2))
        .sum::<f64>()
        / samples as f64
}
