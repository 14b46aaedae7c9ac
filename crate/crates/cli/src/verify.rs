//! Built-in self-checks with optional fault injection.

use sparseft_core::data::{generate, GeneratorSpec};
use sparseft_core::diagnostics::{fisher_bound_check, predicted_updates, ScoreModel};
use sparseft_core::mask_store::{self, decode};
use sparseft_core::trainer::finetune;
use sparseft_core::{
    Dataset, HeuristicConfig, HeuristicKind, Model, ModelConfig, Strategy, StrategyConfig,
    TrainConfig,
};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Update every trainable scalar instead of only the masked ones.
    SkipMasking,
    /// Flip one bit of the encoded sparse checkpoint before decoding.
    FlipByte,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "skip-masking" => Ok(Fault::SkipMasking),
            "flip-byte" => Ok(Fault::FlipByte),
            other => Err(format!("unknown fault '{other}' (skip-masking, flip-byte)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<16} {}", self.name, self.detail)
    }
}

fn check(name: &'static str, r: Result<String, String>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn data(seed: u64) -> Dataset {
    let spec = GeneratorSpec::GaussianBlobs {
        classes: 4,
        dims: 4,
        separation: 4.0,
        samples: 200,
    };
    generate(&spec, seed).expect("valid generator")
}

fn model(seed: u64) -> Model {
    // 4·16 + 16 + 16·4 + 4 = 148 scalars.
    Model::build(&ModelConfig::mlp(&[4, 16, 4], seed)).expect("valid widths")
}

fn run(
    strategy: Strategy,
    kind: HeuristicKind,
    budget: usize,
    steps: usize,
    seed: u64,
    fault: Option<Fault>,
) -> sparseft_core::Result<(Model, sparseft_core::FinetuneOutcome)> {
    let base = model(seed);
    let mut heuristic = HeuristicConfig::new(kind);
    heuristic.seed = seed;
    let mut cfg = TrainConfig::new(
        StrategyConfig {
            strategy,
            heuristic,
            budget,
        },
        steps,
        0.1,
        16,
    );
    cfg.seed = seed;
    cfg.mask_gradients = fault != Some(Fault::SkipMasking);
    let out = finetune(base.clone(), &data(seed), None, &cfg)?;
    Ok((base, out))
}

fn update_count(seed: u64) -> Result<String, String> {
    let mut lines = Vec::new();
    for (t, b) in [(10, 100), (5, 20), (4, 148)] {
        for strategy in [Strategy::Increment, Strategy::Static] {
            let (_, out) =
                run(strategy, HeuristicKind::D3, b, t, seed, None).map_err(|e| e.to_string())?;
            let predicted = predicted_updates(strategy, b, t).expect("T divides B");
            if out.report.total_updates != predicted {
                return Err(format!(
                    "{} T={t} B={b}: observed {} != predicted {predicted}",
                    strategy.name(),
                    out.report.total_updates
                ));
            }
            lines.push(format!("{}(T={t},B={b})={predicted}", strategy.name()));
        }
    }
    Ok(lines.join(" "))
}

fn frozen_identity(seed: u64, fault: Option<Fault>) -> Result<String, String> {
    let mut checked = 0;
    for (i, strategy) in [Strategy::Increment, Strategy::Static, Strategy::Repeat]
        .into_iter()
        .enumerate()
    {
        let (base, out) = run(strategy, HeuristicKind::D3, 12, 6, seed + i as u64, fault)
            .map_err(|e| e.to_string())?;
        let touched = out.touched();
        for id in base.param_ids() {
            if touched.contains(id) {
                continue;
            }
            let (a, b) = (base.value(id), out.model.value(id));
            if a.to_bits() != b.to_bits() {
                return Err(format!(
                    "{}: unselected scalar {} [{}] changed from {a} to {b}",
                    strategy.name(),
                    base.params()[id.tensor].name,
                    id.offset
                ));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} unselected scalars bitwise unchanged"))
}

fn codec_roundtrip(seed: u64, fault: Option<Fault>) -> Result<String, String> {
    let (base, out) = run(Strategy::Increment, HeuristicKind::D3, 30, 10, seed, None)
        .map_err(|e| e.to_string())?;
    let touched = out.touched();
    let bytes = mask_store::encode(&out.model, &touched).map_err(|e| e.to_string())?;
    let mut stored = bytes.clone();
    if fault == Some(Fault::FlipByte) {
        // Sign bit of the last stored value.
        *stored.last_mut().unwrap() ^= 0x80;
    }
    let ckpt = decode(&stored).map_err(|e| format!("decode failed: {e}"))?;
    let reencoded = ckpt.to_bytes().map_err(|e| e.to_string())?;
    if let Some(offset) = reencoded.iter().zip(&bytes).position(|(a, b)| a != b) {
        return Err(format!(
            "checkpoint differs from the fine-tuned state at byte offset {offset}"
        ));
    }
    let mut restored = base.clone();
    ckpt.apply(&mut restored).map_err(|e| e.to_string())?;
    if restored != out.model {
        return Err("pretrained + checkpoint differs from the fine-tuned model".into());
    }
    Ok(format!(
        "{} entries, {} bytes, bitwise equal",
        touched.len(),
        bytes.len()
    ))
}

fn fisher_bound(seed: u64) -> Result<String, String> {
    let mut n = 0;
    for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
        for eps in [1.0, 2.0] {
            for exp in [0.0, 1.0, 2.0] {
                let s = sparseft_core::rng::derive_seed(seed, n as u64);
                let c = fisher_bound_check(ScoreModel::Bernoulli { p }, eps, exp, 100_000, s)
                    .map_err(|e| e.to_string())?;
                if !c.holds {
                    return Err(format!(
                        "p={p} eps={eps} exp={exp}: E[H]={} > sqrt(I)={} + 3·{}",
                        c.expected_score, c.sqrt_fisher, c.standard_error
                    ));
                }
                n += 1;
            }
        }
    }
    Ok(format!("{n} Bernoulli configurations within bound"))
}

/// Runs every check. `fault` deliberately breaks one of them.
pub fn run_checks(seed: u64, fault: Option<Fault>) -> Vec<CheckResult> {
    vec![
        check("update-count", update_count(seed)),
        check("codec-roundtrip", codec_roundtrip(seed, fault)),
        check("frozen-identity", frozen_identity(seed, fault)),
        check("fisher-bound", fisher_bound(seed)),
    ]
}
