//! Budgeted mask selection.
//!
//! A [`MaskSelector`] owns the unmasked set for one run and advances it once
//! per training step under one of three strategies:
//!
//! * `static`: top-`B` once at step 1, frozen afterwards;
//! * `repeat`: a fresh top-`B` over all parameters at every step;
//! * `increment`: top-`u_t` of the still-masked parameters, added to the pool.
//!
//! Ranking is deterministic: higher score first, ties broken by the smaller
//! `(tensor, offset)` address.

use crate::error::{Error, Result};
use crate::heuristics::{HeuristicConfig, ScoreField};
use crate::model::ParamId;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Static,
    Repeat,
    Increment,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Static => "static",
            Strategy::Repeat => "repeat",
            Strategy::Increment => "increment",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Strategy::Static),
            "repeat" => Ok(Strategy::Repeat),
            "increment" => Ok(Strategy::Increment),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Strategy, heuristic and budget for one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub heuristic: HeuristicConfig,
    pub budget: usize,
}

impl StrategyConfig {
    /// Incremental selection with the gradient-aware heuristic.
    pub fn incremental(budget: usize, heuristic: HeuristicConfig) -> Self {
        StrategyConfig {
            strategy: Strategy::Increment,
            heuristic,
            budget,
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.strategy.name(), self.heuristic.label())
    }
}

/// Uniform unmasking scheduler over `steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduler {
    pub budget: usize,
    pub steps: usize,
}

impl Scheduler {
    pub fn quotas(&self) -> Result<Vec<usize>> {
        uniform_schedule(self.budget, self.steps)
    }
}

/// `floor(B/T)` per step, with the first `B mod T` steps taking one extra.
pub fn uniform_schedule(budget: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 {
        return Err(Error::Config("scheduler needs at least one step".into()));
    }
    let base = budget / steps;
    let extra = budget % steps;
    Ok((0..steps).map(|t| base + usize::from(t < extra)).collect())
}

fn rank_order(a: (f64, ParamId), b: (f64, ParamId)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .expect("scores are NaN-free")
        .then(a.1.cmp(&b.1))
}

/// The `k` highest-scoring ids, returned in address order.
pub fn select_topk(scores: &ScoreField, k: usize) -> Result<Vec<ParamId>> {
    if k > scores.len() {
        return Err(Error::Selection(format!(
            "cannot select {k} of {} free parameters",
            scores.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut pairs: Vec<(f64, ParamId)> = scores.iter().map(|(id, s)| (s, id)).collect();
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        pairs.truncate(k);
    }
    let mut out: Vec<ParamId> = pairs.into_iter().map(|(_, id)| id).collect();
    out.sort_unstable();
    Ok(out)
}

/// The unmasked set Λ, with the step at which each entry joined.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    entries: BTreeMap<ParamId, usize>,
}

impl MaskSet {
    pub fn new() -> Self {
        MaskSet::default()
    }

    pub fn from_ids(ids: impl IntoIterator<Item = ParamId>, step: usize) -> Self {
        MaskSet {
            entries: ids.into_iter().map(|id| (id, step)).collect(),
        }
    }

    pub fn insert(&mut self, id: ParamId, step: usize) -> bool {
        if self.entries.contains_key(&id) {
            return false;
        }
        self.entries.insert(id, step);
        true
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids in address order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.keys().copied()
    }

    pub fn added_at(&self, id: ParamId) -> Option<usize> {
        self.entries.get(&id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub quota: usize,
    pub mask_size: usize,
}

/// CSV with header `step,u_t,mask_size`.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("step,u_t,mask_size\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.quota, r.mask_size);
    }
    out
}

#[derive(Debug, Clone)]
enum Plan {
    Strategy(Strategy),
    /// Mask chosen up front (bias-only).
    Fixed(Vec<ParamId>),
}

/// Per-run selection state.
#[derive(Debug, Clone)]
pub struct MaskSelector {
    plan: Plan,
    budget: usize,
    quotas: Vec<usize>,
    universe: Vec<ParamId>,
    mask: MaskSet,
    step: usize,
    selected: Vec<Vec<ParamId>>,
    trajectory: Vec<TrajectoryRow>,
}

impl MaskSelector {
    /// `universe` is the set of selectable scalars (usually every trainable
    /// scalar). A budget above its size is an error when `strict`, and is
    /// clamped with a warning otherwise.
    pub fn new(
        strategy: Strategy,
        budget: usize,
        steps: usize,
        mut universe: Vec<ParamId>,
        strict: bool,
    ) -> Result<Self> {
        universe.sort_unstable();
        universe.dedup();
        let n = universe.len();
        let budget = if budget > n {
            if strict {
                return Err(Error::Config(format!(
                    "budget {budget} exceeds the {n} selectable parameters"
                )));
            }
            log::warn!("budget {budget} exceeds {n} selectable parameters; clamping to {n}");
            n
        } else {
            budget
        };
        let quotas = match strategy {
            Strategy::Increment => uniform_schedule(budget, steps)?,
            Strategy::Static | Strategy::Repeat => {
                if steps < 1 {
                    return Err(Error::Config("need at least one step".into()));
                }
                vec![budget; steps]
            }
        };
        Ok(MaskSelector {
            plan: Plan::Strategy(strategy),
            budget,
            quotas,
            universe,
            mask: MaskSet::new(),
            step: 0,
            selected: Vec::new(),
            trajectory: Vec::new(),
        })
    }

    /// A mask fixed before training, applied unchanged at every step.
    pub fn fixed(mut ids: Vec<ParamId>, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("need at least one step".into()));
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(MaskSelector {
            budget: ids.len(),
            quotas: vec![ids.len(); steps],
            universe: ids.clone(),
            plan: Plan::Fixed(ids),
            mask: MaskSet::new(),
            step: 0,
            selected: Vec::new(),
            trajectory: Vec::new(),
        })
    }

    /// Effective budget after clamping.
    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn steps(&self) -> usize {
        self.quotas.len()
    }

    /// Steps already taken.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mask(&self) -> &MaskSet {
        &self.mask
    }

    pub fn strategy(&self) -> Option<Strategy> {
        match self.plan {
            Plan::Strategy(s) => Some(s),
            Plan::Fixed(_) => None,
        }
    }

    /// Per-step selected sets so far (λ_t for increment, Λ_t otherwise).
    pub fn selected_history(&self) -> &[Vec<ParamId>] {
        &self.selected
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        &self.trajectory
    }

    /// Ids that must be scored before the next [`advance`](Self::advance),
    /// or `None` when the next step needs no scores.
    pub fn candidates(&self) -> Option<Vec<ParamId>> {
        let t = self.step + 1;
        match &self.plan {
            Plan::Fixed(_) => None,
            Plan::Strategy(Strategy::Static) => {
                (t == 1 && self.budget > 0).then(|| self.universe.clone())
            }
            Plan::Strategy(Strategy::Repeat) => (self.budget > 0).then(|| self.universe.clone()),
            Plan::Strategy(Strategy::Increment) => {
                let quota = *self.quotas.get(self.step)?;
                (quota > 0).then(|| {
                    self.universe
                        .iter()
                        .copied()
                        .filter(|&id| !self.mask.contains(id))
                        .collect()
                })
            }
        }
    }

    /// Moves from Λ_{t-1} to Λ_t.
    pub fn advance(&mut self, scores: Option<&ScoreField>) -> Result<&MaskSet> {
        if self.step >= self.quotas.len() {
            return Err(Error::Usage(format!(
                "selector already ran all {} steps",
                self.quotas.len()
            )));
        }
        let expected = self.candidates();
        match (&expected, scores) {
            (None, None) => {}
            (Some(want), Some(got)) => {
                let mut got_ids = got.ids().to_vec();
                got_ids.sort_unstable();
                if &got_ids != want {
                    return Err(Error::Usage(format!(
                        "scores cover {} ids, step {} needs {} candidates",
                        got_ids.len(),
                        self.step + 1,
                        want.len()
                    )));
                }
            }
            (None, Some(_)) => {
                return Err(Error::Usage(format!(
                    "step {} takes no scores",
                    self.step + 1
                )))
            }
            (Some(want), None) => {
                return Err(Error::Usage(format!(
                    "step {} needs scores for {} candidates",
                    self.step + 1,
                    want.len()
                )))
            }
        }

        let t = self.step + 1;
        let quota = self.quotas[self.step];
        let picked = match &self.plan {
            Plan::Fixed(ids) => {
                if t == 1 {
                    self.mask = MaskSet::from_ids(ids.iter().copied(), 1);
                    ids.clone()
                } else {
                    Vec::new()
                }
            }
            Plan::Strategy(Strategy::Static) => match scores {
                Some(s) => {
                    let top = select_topk(s, self.budget)?;
                    self.mask = MaskSet::from_ids(top.iter().copied(), t);
                    top
                }
                None => Vec::new(),
            },
            Plan::Strategy(Strategy::Repeat) => {
                let top = match scores {
                    Some(s) => select_topk(s, self.budget)?,
                    None => Vec::new(),
                };
                self.mask = MaskSet::from_ids(top.iter().copied(), t);
                top
            }
            Plan::Strategy(Strategy::Increment) => {
                let top = match scores {
                    Some(s) => select_topk(s, quota)?,
                    None => Vec::new(),
                };
                for &id in &top {
                    self.mask.insert(id, t);
                }
                top
            }
        };
        self.selected.push(picked);
        self.trajectory.push(TrajectoryRow {
            step: t,
            quota,
            mask_size: self.mask.len(),
        });
        self.step = t;
        Ok(&self.mask)
    }
}

/// Size of the union of all per-step selected sets.
pub fn distinct_updated(history: &[Vec<ParamId>]) -> usize {
    history.iter().flatten().collect::<BTreeSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::heuristics::random_score;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<ParamId> {
        (0..n).map(|o| ParamId::new(0, o)).collect()
    }

    fn field(scores: &[f64]) -> ScoreField {
        ScoreField::new(ids(scores.len()), scores.to_vec()).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(uniform_schedule(100, 10).unwrap(), vec![10; 10]);
        assert_eq!(uniform_schedule(10, 3).unwrap(), vec![4, 3, 3]);
        assert_eq!(uniform_schedule(0, 5).unwrap(), vec![0; 5]);
        assert!(uniform_schedule(5, 0).unwrap_err().is_config());
    }

    #[test]
    fn topk_examples() {
        let top = select_topk(&field(&[3.0, 1.0, 2.0, 5.0]), 2).unwrap();
        assert_eq!(top, vec![ParamId::new(0, 0), ParamId::new(0, 3)]);
        assert_eq!(
            select_topk(&field(&[1.0, 1.0, 0.0]), 1).unwrap(),
            vec![ParamId::new(0, 0)]
        );
        assert!(select_topk(&field(&[1.0, 2.0]), 0).unwrap().is_empty());
        assert!(matches!(
            select_topk(&field(&[1.0, 2.0]), 3),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn signed_zero_scores_tie() {
        let top = select_topk(&field(&[-0.0, 0.0]), 1).unwrap();
        assert_eq!(top, vec![ParamId::new(0, 0)]);
    }

    #[test]
    fn increment_adds_top_of_complement() {
        let universe = ids(3);
        let mut sel = MaskSelector::new(Strategy::Increment, 2, 2, universe, true).unwrap();
        let c = sel.candidates().unwrap();
        sel.advance(Some(&ScoreField::new(c, vec![5.0, 0.0, 1.0]).unwrap()))
            .unwrap();
        assert_eq!(
            sel.mask().ids().collect::<Vec<_>>(),
            vec![ParamId::new(0, 0)]
        );
        let c = sel.candidates().unwrap();
        assert_eq!(c, vec![ParamId::new(0, 1), ParamId::new(0, 2)]);
        sel.advance(Some(&ScoreField::new(c, vec![0.0, 1.0]).unwrap()))
            .unwrap();
        assert_eq!(
            sel.mask().ids().collect::<Vec<_>>(),
            vec![ParamId::new(0, 0), ParamId::new(0, 2)]
        );
        assert_eq!(sel.mask().added_at(ParamId::new(0, 2)), Some(2));
    }

    #[test]
    fn static_freezes_after_first_step() {
        let mut sel = MaskSelector::new(Strategy::Static, 2, 3, ids(5), true).unwrap();
        let c = sel.candidates().unwrap();
        sel.advance(Some(&random_score(&c, 1))).unwrap();
        let first = sel.mask().clone();
        for _ in 0..2 {
            assert!(sel.candidates().is_none());
            sel.advance(None).unwrap();
            assert_eq!(sel.mask(), &first);
        }
        assert_eq!(distinct_updated(sel.selected_history()), 2);
    }

    #[test]
    fn repeat_selects_fresh_budget_each_step() {
        // Budget 3, three steps.
        let mut sel = MaskSelector::new(Strategy::Repeat, 3, 3, ids(9), true).unwrap();
        for t in 0..3 {
            let c = sel.candidates().unwrap();
            let s = random_score(&c, t);
            sel.advance(Some(&s)).unwrap();
            assert_eq!(sel.mask().len(), 3);
        }
        let d = distinct_updated(sel.selected_history());
        assert!((3..=9).contains(&d));
    }

    #[test]
    fn candidate_mismatch_is_usage_error() {
        let mut sel = MaskSelector::new(Strategy::Increment, 2, 2, ids(4), true).unwrap();
        let wrong = ScoreField::new(ids(3), vec![1.0; 3]).unwrap();
        assert!(matches!(sel.advance(Some(&wrong)), Err(Error::Usage(_))));
        assert!(matches!(sel.advance(None), Err(Error::Usage(_))));

        let mut st = MaskSelector::new(Strategy::Static, 1, 2, ids(4), true).unwrap();
        st.advance(Some(&random_score(&ids(4), 0))).unwrap();
        assert!(st.advance(Some(&random_score(&ids(4), 0))).is_err());
    }

    #[test]
    fn budget_above_universe() {
        assert!(MaskSelector::new(Strategy::Static, 10, 2, ids(4), true)
            .unwrap_err()
            .is_config());
        let sel = MaskSelector::new(Strategy::Increment, 10, 2, ids(4), false).unwrap();
        assert_eq!(sel.budget(), 4);
    }

    #[test]
    fn fixed_mask_is_applied_once_and_held() {
        let mut sel = MaskSelector::fixed(vec![ParamId::new(1, 0), ParamId::new(1, 1)], 3).unwrap();
        for _ in 0..3 {
            assert!(sel.candidates().is_none());
            sel.advance(None).unwrap();
            assert_eq!(sel.mask().len(), 2);
        }
        assert!(sel.advance(None).is_err());
    }

    #[test]
    fn trajectory_log() {
        let mut sel = MaskSelector::new(Strategy::Increment, 3, 2, ids(5), true).unwrap();
        while let Some(c) = sel.candidates() {
            let s = random_score(&c, 0);
            sel.advance(Some(&s)).unwrap();
        }
        assert_eq!(
            trajectory_csv(sel.trajectory()),
            "step,u_t,mask_size\n1,2,2\n2,1,3\n"
        );
    }

    fn run_increment(budget: usize, steps: usize, n: usize, seed: u64) -> MaskSelector {
        let mut sel = MaskSelector::new(Strategy::Increment, budget, steps, ids(n), false).unwrap();
        for t in 0..steps {
            let scores = sel.candidates().map(|c| random_score(&c, seed + t as u64));
            sel.advance(scores.as_ref()).unwrap();
        }
        sel
    }

    proptest! {
        #[test]
        fn schedule_sums_to_budget(b in 0usize..10_000, t in 1usize..500) {
            let s = uniform_schedule(b, t).unwrap();
            prop_assert_eq!(s.len(), t);
            prop_assert_eq!(s.iter().sum::<usize>(), b);
        }

        #[test]
        fn topk_invariant_under_monotone_transform(scores in prop::collection::vec(-5.0..5.0f64, 1..40), kfrac in 0.0..1.0f64) {
            let k = ((scores.len() as f64) * kfrac) as usize;
            let a = select_topk(&field(&scores), k).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp() * 3.0 + 1.0).collect();
            let b = select_topk(&field(&mapped), k).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn increments_are_disjoint_and_bounded(b in 0usize..60, t in 1usize..20, n in 1usize..60, seed in 0u64..100) {
            let sel = run_increment(b, t, n, seed);
            let hist = sel.selected_history();
            let total: usize = hist.iter().map(Vec::len).sum();
            prop_assert_eq!(distinct_updated(hist), total);
            prop_assert_eq!(total, b.min(n));
            prop_assert!(sel.mask().len() <= b.min(n));
            let again = run_increment(b, t, n, seed);
            prop_assert_eq!(again.mask(), sel.mask());
        }
    }
}
