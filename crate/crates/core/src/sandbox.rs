//! Synthetic verifiable-reward environment.
//!
//! Tasks carry a latent difficulty `d` and a success curve derived from it.
//! The policy never sees `d`; it sees a noisy, binned observation of it and
//! picks a token budget. A rollout's length is the chosen budget and its base
//! reward is a Bernoulli draw from the task's curve at that budget.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimality::{optimal_budget, CostModel, DifficultyWiring, SuccessCurve};
use crate::rewards::RolloutGroup;
use crate::rng::{stream, Domain};

/// Upper edges of the reporting tiers (easy, mid); everything above is hard.
pub const TIER_EDGES: [f64; 2] = [0.33, 0.66];
pub const TIER_NAMES: [&str; 3] = ["easy", "mid", "hard"];

pub fn tier_of(difficulty: f64) -> usize {
    TIER_EDGES.iter().take_while(|&&edge| difficulty >= edge).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Skew {
    Easy,
    Mixed,
    Hard,
}

impl Skew {
    pub const ALL: [Skew; 3] = [Skew::Easy, Skew::Mixed, Skew::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Skew::Easy => "easy",
            Skew::Mixed => "mixed",
            Skew::Hard => "hard",
        }
    }
}

impl fmt::Display for Skew {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Skew {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("population.skew", format!("unknown skew `{s}`")))
    }
}

/// How to build a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub skew: Skew,
    pub n_tasks: usize,
    pub feature_bins: usize,
    /// Standard deviation of the observation noise on difficulty.
    pub noise: f64,
    pub wiring: DifficultyWiring<f64>,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            skew: Skew::Mixed,
            n_tasks: 2000,
            feature_bins: 10,
            noise: 0.1,
            wiring: DifficultyWiring::default(),
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::config("n_tasks", "must be >= 1"));
        }
        if self.feature_bins == 0 {
            return Err(Error::config("feature_bins", "must be >= 1"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("noise", "must be a finite non-negative number"));
        }
        self.wiring
            .validate()
            .map_err(|e| prefix_config_error(e, "wiring"))
    }
}

pub(crate) fn prefix_config_error(err: Error, prefix: &str) -> Error {
    match err {
        Error::Config { path, message } => Error::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub difficulty: f64,
    pub feature: usize,
    pub curve: SuccessCurve<f64>,
}

impl Task {
    pub fn tier(&self) -> usize {
        tier_of(self.difficulty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub skew: Skew,
    pub feature_bins: usize,
    pub tasks: Vec<Task>,
}

pub fn make_population(spec: &PopulationSpec, seed: u64) -> Result<Population> {
    spec.validate()?;
    let mut rng = stream(seed, Domain::Population, 0, 0, 0);
    let beta = |a, b| Beta::new(a, b).expect("valid beta parameters");
    let sampler: Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> f64> = match spec.skew {
        Skew::Mixed => Box::new(|r| r.random::<f64>()),
        Skew::Easy => {
            let dist = beta(1.0, 4.0);
            Box::new(move |r| dist.sample(r))
        }
        Skew::Hard => {
            let dist = beta(4.0, 1.0);
            Box::new(move |r| dist.sample(r))
        }
    };
    let noise = Normal::new(0.0, spec.noise).expect("finite noise");
    let tasks = (0..spec.n_tasks as u64)
        .map(|id| {
            let difficulty = sampler(&mut rng);
            let observed = (difficulty + noise.sample(&mut rng)).clamp(0.0, 1.0);
            Task {
                id,
                difficulty,
                feature: feature_bin(observed, spec.feature_bins),
                curve: spec.wiring.curve(difficulty),
            }
        })
        .collect();
    Ok(Population {
        skew: spec.skew,
        feature_bins: spec.feature_bins,
        tasks,
    })
}

fn feature_bin(observed: f64, bins: usize) -> usize {
    ((observed * bins as f64) as usize).min(bins - 1)
}

impl Population {
    pub fn mean_difficulty(&self) -> f64 {
        self.tasks.iter().map(|t| t.difficulty).sum::<f64>() / self.tasks.len() as f64
    }

    /// One JSON object per task: `{id, difficulty, feature, curve}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for task in &self.tasks {
            let line = serde_json::json!({
                "id": task.id,
                "difficulty": crate::format::round9(task.difficulty),
                "feature": task.feature,
                "curve": {
                    "p_floor": crate::format::round9(task.curve.p_floor),
                    "p_ceiling": crate::format::round9(task.curve.p_ceiling),
                    "scale": crate::format::round9(task.curve.scale),
                },
            });
            writeln!(out, "{line}").map_err(|e| Error::io("writing population", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, skew: Skew, feature_bins: usize) -> Result<Self> {
        let mut tasks = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("reading population", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let task: Task = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("population line {}", lineno + 1), e))?;
            task.curve.validate()?;
            if task.feature >= feature_bins {
                return Err(Error::Mismatch(format!(
                    "task {} has feature {} but only {feature_bins} bins",
                    task.id, task.feature
                )));
            }
            tasks.push(task);
        }
        if tasks.is_empty() {
            return Err(Error::Mismatch("population file has no tasks".into()));
        }
        Ok(Self {
            skew,
            feature_bins,
            tasks,
        })
    }
}

/// `count` integer budgets log-spaced over `[min, max]`.
pub fn log_spaced_budgets(min: u64, max: u64, count: usize) -> Result<Vec<u64>> {
    if min == 0 || max <= min || count < 2 {
        return Err(Error::config(
            "trainer.budget_bins",
            "need 1 <= budget_min < budget_max and at least 2 bins",
        ));
    }
    let ratio = (max as f64 / min as f64).ln();
    let bins: Vec<u64> = (0..count)
        .map(|i| (min as f64 * (ratio * i as f64 / (count - 1) as f64).exp()).round() as u64)
        .collect();
    if bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "trainer.budget_bins",
            "too many bins for the budget range; values collide after rounding",
        ));
    }
    Ok(bins)
}

pub fn default_budget_bins() -> Vec<u64> {
    log_spaced_budgets(16, 16_384, 16).expect("default grid is valid")
}

/// Tabular softmax policy over budget bins, one row per feature bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    pub budget_bins: Vec<u64>,
    /// Row-major `feature_bins x budget_bins.len()`.
    pub logits: Vec<Vec<f64>>,
}

impl BudgetPolicy {
    pub fn uniform(feature_bins: usize, budget_bins: Vec<u64>) -> Self {
        let logits = vec![vec![0.0; budget_bins.len()]; feature_bins];
        Self {
            budget_bins,
            logits,
        }
    }

    pub fn feature_bins(&self) -> usize {
        self.logits.len()
    }

    pub fn n_actions(&self) -> usize {
        self.budget_bins.len()
    }

    pub fn probs(&self, feature: usize) -> Vec<f64> {
        softmax(&self.logits[feature])
    }

    pub fn all_probs(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|row| softmax(row)).collect()
    }

    pub fn log_prob(&self, feature: usize, action: usize) -> f64 {
        let row = &self.logits[feature];
        row[action] - log_sum_exp(row)
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().flatten().all(|x| x.is_finite())
    }

    /// Expected budget for a feature row.
    pub fn mean_budget(&self, feature: usize) -> f64 {
        self.probs(feature)
            .iter()
            .zip(&self.budget_bins)
            .map(|(p, &b)| p * b as f64)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_bins.is_empty() || self.budget_bins[0] == 0 {
            return Err(Error::Mismatch("budget bins must be non-empty and >= 1".into()));
        }
        if self.budget_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Mismatch("budget bins must be strictly increasing".into()));
        }
        if self.logits.iter().any(|row| row.len() != self.budget_bins.len()) {
            return Err(Error::Mismatch("every logit row needs one entry per budget bin".into()));
        }
        Ok(())
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Draws an index from a categorical distribution given by `probs`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` a hair below 1; take the last bin with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// A rollout group plus what the trainer needs to score the policy on it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub group: RolloutGroup,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
}

pub fn sample_group<R: Rng + ?Sized>(
    task: &Task,
    policy: &BudgetPolicy,
    group_size: usize,
    rng: &mut R,
) -> Result<SampledGroup> {
    let probs = policy.probs(task.feature);
    sample_group_with_probs(task, &probs, &policy.budget_bins, group_size, rng)
}

pub(crate) fn sample_group_with_probs<R: Rng + ?Sized>(
    task: &Task,
    probs: &[f64],
    budget_bins: &[u64],
    group_size: usize,
    rng: &mut R,
) -> Result<SampledGroup> {
    let mut lengths = Vec::with_capacity(group_size);
    let mut base = Vec::with_capacity(group_size);
    let mut actions = Vec::with_capacity(group_size);
    let mut log_probs = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let a = sample_categorical(probs, rng);
        let length = budget_bins[a];
        let p = task.curve.evaluate(length);
        let correct = rng.random::<f64>() < p;
        lengths.push(length);
        base.push(correct as u8);
        actions.push(a);
        log_probs.push(probs[a].ln());
    }
    Ok(SampledGroup {
        group: RolloutGroup::new(lengths, base)?,
        actions,
        log_probs,
    })
}

/// Per-task utility-optimal budgets plus tier means.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleAllocation {
    pub budgets: Vec<u64>,
    pub tier_mean_budget: [Option<f64>; 3],
}

impl OracleAllocation {
    /// Mean oracle budget per difficulty decile (empty deciles are `None`).
    pub fn decile_means(&self, population: &Population) -> Vec<Option<f64>> {
        let mut sums = [0.0; 10];
        let mut counts = [0usize; 10];
        for (task, &b) in population.tasks.iter().zip(&self.budgets) {
            let decile = ((task.difficulty * 10.0) as usize).min(9);
            sums[decile] += b as f64;
            counts[decile] += 1;
        }
        sums.iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s / c as f64))
            .collect()
    }
}

pub fn oracle_allocation(
    population: &Population,
    cost: &CostModel<f64>,
    grid_max: u64,
) -> OracleAllocation {
    let budgets: Vec<u64> = population
        .tasks
        .par_iter()
        .map(|t| optimal_budget(&t.curve, cost, grid_max).argmax_budget)
        .collect();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (task, &b) in population.tasks.iter().zip(&budgets) {
        sums[task.tier()] += b as f64;
        counts[task.tier()] += 1;
    }
    let mut tier_mean_budget = [None; 3];
    for t in 0..3 {
        if counts[t] > 0 {
            tier_mean_budget[t] = Some(sums[t] / counts[t] as f64);
        }
    }
    OracleAllocation {
        budgets,
        tier_mean_budget,
    }
}
