//! Group-relative policy optimization of the budget policy.
//!
//! Each rollout is a single action (the chosen budget bin), so the token-level
//! clipped surrogate collapses to one ratio per rollout:
//!
//! ```text
//! J = 1/N * sum_i [ min(rho_i * A_i, clip(rho_i, 1-eps, 1+eps) * A_i) - kappa * KL(pi_f || ref_f) ]
//! ```
//!
//! with `rho_i = pi(a_i | f_i) / pi_old(a_i | f_i)`, `N` the number of
//! rollouts in the batch and the reference policy fixed at initialization.
//! One gradient-ascent step is taken per batch, so `rho = 1` when the batch
//! is consumed.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{round9, sig9};
use crate::rewards::{self, normalized_lengths, SchemeKind, ShapingScheme};
use crate::rng::{stream, Domain};
use crate::sandbox::{
    log_spaced_budgets, make_population, prefix_config_error, sample_group_with_probs,
    BudgetPolicy, Population, PopulationSpec, Skew, TIER_NAMES,
};
use crate::scalar::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSettings {
    pub steps: usize,
    pub batch_tasks: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub budget_min: u64,
    pub budget_max: u64,
    pub budget_bins: usize,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_tasks: 128,
            group_size: 16,
            learning_rate: 10.0,
            clip_epsilon: 0.2,
            kl_coefficient: 0.0,
            budget_min: 16,
            budget_max: 16_384,
            budget_bins: 16,
        }
    }
}

impl TrainerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.batch_tasks == 0 {
            return Err(Error::config("batch_tasks", "must be >= 1"));
        }
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be >= 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config("clip_epsilon", "must lie in (0, 1)"));
        }
        if !(self.kl_coefficient >= 0.0) || !self.kl_coefficient.is_finite() {
            return Err(Error::config("kl_coefficient", "must be finite and >= 0"));
        }
        log_spaced_budgets(self.budget_min, self.budget_max, self.budget_bins)
            .map(|_| ())
            .map_err(|e| match e {
                Error::Config { message, .. } => Error::config("budget_bins", message),
                other => other,
            })
    }

    pub fn budget_grid(&self) -> Result<Vec<u64>> {
        log_spaced_budgets(self.budget_min, self.budget_max, self.budget_bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub scheme: ShapingScheme<f64>,
    pub population: PopulationSpec,
    pub trainer: TrainerSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scheme: ShapingScheme::default(),
            population: PopulationSpec::default(),
            trainer: TrainerSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheme
            .validate()
            .map_err(|e| prefix_config_error(e, "scheme"))?;
        self.population
            .validate()
            .map_err(|e| prefix_config_error(e, "population"))?;
        self.trainer
            .validate()
            .map_err(|e| prefix_config_error(e, "trainer"))
    }
}

/// Per-tier view of a policy, computed exactly over the population.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TierStats {
    pub accuracy: [Option<f64>; 3],
    pub mean_budget: [Option<f64>; 3],
    pub overall_accuracy: f64,
    pub overall_mean_budget: f64,
}

/// Metrics logged after one training step.
///
/// Gate, length and reward means come from the step's sampled batch; the
/// per-tier accuracy and budget describe the policy after the step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub mean_w_easy: f64,
    pub mean_w_hard: f64,
    pub mean_length: f64,
    pub mean_base_reward: f64,
    /// Mean of `alpha * w_easy * sigmoid(z)` over the batch's rollouts.
    pub mean_easy_penalty: f64,
    pub accuracy_per_tier: [Option<f64>; 3],
    pub mean_budget_per_tier: [Option<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub population: Population,
    pub initial_policy: BudgetPolicy,
    pub policy: BudgetPolicy,
    pub records: Vec<RunRecord>,
}

impl TrainOutcome {
    pub fn final_stats(&self) -> TierStats {
        evaluate_policy(&self.policy, &self.population)
    }

    /// Run-averaged `(mean_w_easy, mean_w_hard)`.
    pub fn mean_gates(&self) -> (f64, f64) {
        let n = self.records.len() as f64;
        let e = self.records.iter().map(|r| r.mean_w_easy).sum::<f64>() / n;
        let h = self.records.iter().map(|r| r.mean_w_hard).sum::<f64>() / n;
        (e, h)
    }
}

/// One consumed rollout, frozen for the policy update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub feature: usize,
    pub action: usize,
    pub advantage: f64,
    pub old_log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateParams {
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// The clipped surrogate with KL penalty, averaged over `batch`.
pub fn surrogate_objective(
    policy: &BudgetPolicy,
    reference: &BudgetPolicy,
    batch: &[Transition],
    params: SurrogateParams,
) -> f64 {
    let eps = params.clip_epsilon;
    let probs = policy.all_probs();
    let ref_probs = reference.all_probs();
    let total: f64 = batch
        .iter()
        .map(|t| {
            let ratio = (policy.log_prob(t.feature, t.action) - t.old_log_prob).exp();
            let surrogate = (ratio * t.advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * t.advantage);
            let kl = if params.kl_coefficient > 0.0 {
                kl_divergence(&probs[t.feature], &ref_probs[t.feature])
            } else {
                0.0
            };
            surrogate - params.kl_coefficient * kl
        })
        .sum();
    total / batch.len() as f64
}

/// Analytic gradient of [`surrogate_objective`] with respect to the logits.
pub fn surrogate_gradient(
    policy: &BudgetPolicy,
    reference: &BudgetPolicy,
    batch: &[Transition],
    params: SurrogateParams,
) -> Vec<Vec<f64>> {
    let eps = params.clip_epsilon;
    let n = batch.len() as f64;
    let probs = policy.all_probs();
    let mut grad = vec![vec![0.0; policy.n_actions()]; policy.feature_bins()];
    let mut visits = vec![0usize; policy.feature_bins()];
    for t in batch {
        visits[t.feature] += 1;
        let ratio = (probs[t.feature][t.action].ln() - t.old_log_prob).exp();
        let clipped = (t.advantage > 0.0 && ratio > 1.0 + eps) || (t.advantage < 0.0 && ratio < 1.0 - eps);
        if clipped || t.advantage == 0.0 {
            continue;
        }
        // d rho / d logit_j = rho * (1[j = a] - pi_j)
        let scale = t.advantage * ratio / n;
        let row = &mut grad[t.feature];
        for (j, g) in row.iter_mut().enumerate() {
            let indicator = if j == t.action { 1.0 } else { 0.0 };
            *g += scale * (indicator - probs[t.feature][j]);
        }
    }
    if params.kl_coefficient > 0.0 {
        let ref_probs = reference.all_probs();
        for (f, &count) in visits.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let p = &probs[f];
            let q = &ref_probs[f];
            let kl = kl_divergence(p, q);
            let weight = params.kl_coefficient * count as f64 / n;
            for j in 0..p.len() {
                // d KL / d logit_j = p_j * (log p_j - log q_j - KL)
                let dkl = if p[j] > 0.0 { p[j] * (p[j].ln() - q[j].ln() - kl) } else { 0.0 };
                grad[f][j] -= weight * dkl;
            }
        }
    }
    grad
}

/// Exact per-tier accuracy and expected budget of `policy` on `population`.
pub fn evaluate_policy(policy: &BudgetPolicy, population: &Population) -> TierStats {
    let table = SuccessTable::new(population, &policy.budget_bins);
    table.evaluate(&policy.all_probs())
}

struct SuccessTable<'a> {
    population: &'a Population,
    budgets: Vec<f64>,
    success: Vec<Vec<f64>>,
}

impl<'a> SuccessTable<'a> {
    fn new(population: &'a Population, budget_bins: &[u64]) -> Self {
        let success = population
            .tasks
            .iter()
            .map(|t| budget_bins.iter().map(|&b| t.curve.evaluate(b)).collect())
            .collect();
        Self {
            population,
            budgets: budget_bins.iter().map(|&b| b as f64).collect(),
            success,
        }
    }

    fn evaluate(&self, probs: &[Vec<f64>]) -> TierStats {
        let mut acc = [0.0; 3];
        let mut budget = [0.0; 3];
        let mut counts = [0usize; 3];
        for (task, success) in self.population.tasks.iter().zip(&self.success) {
            let row = &probs[task.feature];
            let tier = task.tier();
            acc[tier] += row.iter().zip(success).map(|(p, s)| p * s).sum::<f64>();
            budget[tier] += row.iter().zip(&self.budgets).map(|(p, b)| p * b).sum::<f64>();
            counts[tier] += 1;
        }
        let total = counts.iter().sum::<usize>() as f64;
        let mut stats = TierStats {
            overall_accuracy: acc.iter().sum::<f64>() / total,
            overall_mean_budget: budget.iter().sum::<f64>() / total,
            ..TierStats::default()
        };
        for t in 0..3 {
            if counts[t] > 0 {
                stats.accuracy[t] = Some(acc[t] / counts[t] as f64);
                stats.mean_budget[t] = Some(budget[t] / counts[t] as f64);
            }
        }
        stats
    }
}

struct GroupOutcome {
    transitions: Vec<Transition>,
    w_easy: f64,
    w_hard: f64,
    length_sum: f64,
    correct: usize,
    easy_penalty_sum: f64,
}

fn roll_group(
    config: &TrainConfig,
    population: &Population,
    probs: &[Vec<f64>],
    budget_bins: &[u64],
    step: usize,
    slot: usize,
    task_index: usize,
) -> Result<GroupOutcome> {
    let task = &population.tasks[task_index];
    let mut rng = stream(config.seed, Domain::Rollout, step as u64, slot as u64, task.id);
    let sampled = sample_group_with_probs(
        task,
        &probs[task.feature],
        budget_bins,
        config.trainer.group_size,
        &mut rng,
    )?;
    let scheme = &config.scheme;
    let shaped = match scheme.kind {
        SchemeKind::L1 => {
            let target = match scheme.l1_target {
                Some(t) => t,
                None => rng.random_range(scheme.l1_min..=scheme.l1_max),
            };
            rewards::shape_l1(&sampled.group, scheme, target)
        }
        _ => rewards::shape(&sampled.group, scheme)?,
    };
    let easy_penalty_sum = if shaped.gates.w_easy > 0.0 && scheme.alpha > 0.0 {
        normalized_lengths(&sampled.group, scheme.norm_epsilon)
            .into_iter()
            .map(|z| scheme.alpha * shaped.gates.w_easy * sigmoid(z))
            .sum()
    } else {
        0.0
    };
    let transitions = sampled
        .actions
        .iter()
        .zip(&sampled.log_probs)
        .zip(&shaped.advantages)
        .map(|((&action, &old_log_prob), &advantage)| Transition {
            feature: task.feature,
            action,
            advantage,
            old_log_prob,
        })
        .collect();
    Ok(GroupOutcome {
        transitions,
        w_easy: shaped.gates.w_easy,
        w_hard: shaped.gates.w_hard,
        length_sum: sampled.group.lengths.iter().map(|&n| n as f64).sum(),
        correct: sampled.group.base_rewards.iter().filter(|&&r| r == 1).count(),
        easy_penalty_sum,
    })
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let population = make_population(&config.population, config.seed)?;
    train_on(config, population)
}

/// Trains from a uniform policy on an existing population.
pub fn train_on(config: &TrainConfig, population: Population) -> Result<TrainOutcome> {
    config.validate()?;
    let settings = &config.trainer;
    let budget_bins = settings.budget_grid()?;
    let initial_policy = BudgetPolicy::uniform(population.feature_bins, budget_bins.clone());
    let mut policy = initial_policy.clone();
    let table = SuccessTable::new(&population, &budget_bins);
    let params = SurrogateParams {
        clip_epsilon: settings.clip_epsilon,
        kl_coefficient: settings.kl_coefficient,
    };
    let n_tasks = population.tasks.len();
    let mut records = Vec::with_capacity(settings.steps);

    for step in 0..settings.steps {
        let probs = policy.all_probs();
        let mut batch_rng = stream(config.seed, Domain::Batch, step as u64, 0, 0);
        let picks: Vec<usize> = (0..settings.batch_tasks)
            .map(|_| batch_rng.random_range(0..n_tasks))
            .collect();
        let outcomes = picks
            .par_iter()
            .enumerate()
            .map(|(slot, &task_index)| {
                roll_group(config, &population, &probs, &budget_bins, step, slot, task_index)
            })
            .collect::<Result<Vec<_>>>()?;

        let transitions: Vec<Transition> = outcomes
            .iter()
            .flat_map(|o| o.transitions.iter().copied())
            .collect();
        let grad = surrogate_gradient(&policy, &initial_policy, &transitions, params);
        for (row, grow) in policy.logits.iter_mut().zip(&grad) {
            for (x, g) in row.iter_mut().zip(grow) {
                *x += settings.learning_rate * g;
            }
        }
        if !policy.is_finite() {
            return Err(Error::Divergence { step });
        }

        let groups = outcomes.len() as f64;
        let rollouts = transitions.len() as f64;
        let stats = table.evaluate(&policy.all_probs());
        records.push(RunRecord {
            step,
            mean_w_easy: outcomes.iter().map(|o| o.w_easy).sum::<f64>() / groups,
            mean_w_hard: outcomes.iter().map(|o| o.w_hard).sum::<f64>() / groups,
            mean_length: outcomes.iter().map(|o| o.length_sum).sum::<f64>() / rollouts,
            mean_base_reward: outcomes.iter().map(|o| o.correct).sum::<usize>() as f64 / rollouts,
            mean_easy_penalty: outcomes.iter().map(|o| o.easy_penalty_sum).sum::<f64>() / rollouts,
            accuracy_per_tier: stats.accuracy,
            mean_budget_per_tier: stats.mean_budget,
        });
    }

    Ok(TrainOutcome {
        population,
        initial_policy,
        policy,
        records,
    })
}

/// One training run per `alpha`, sharing the seed.
pub fn sweep_alpha(config: &TrainConfig, alphas: &[f64]) -> Result<Vec<(f64, TrainOutcome)>> {
    if alphas.is_empty() {
        return Err(Error::config("alphas", "need at least one value"));
    }
    if let Some(bad) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::config("alphas", format!("{bad} is outside [0, 1]")));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let mut cfg = config.clone();
            cfg.scheme.alpha = alpha;
            train(&cfg).map(|out| (alpha, out))
        })
        .collect()
}

/// Correctness-gated bonus (off) against bonus-on-incorrect (on), on a hard-skew population.
pub fn ablate_incorrect_bonus(config: &TrainConfig) -> Result<(TrainOutcome, TrainOutcome)> {
    let mut cfg = config.clone();
    cfg.scheme.kind = SchemeKind::Coda;
    cfg.population.skew = Skew::Hard;
    cfg.scheme.bonus_on_incorrect = false;
    let off = train(&cfg)?;
    cfg.scheme.bonus_on_incorrect = true;
    let on = train(&cfg)?;
    Ok((off, on))
}

/// The same training config under each population skew.
pub fn shift(config: &TrainConfig) -> Result<Vec<(Skew, TrainOutcome)>> {
    Skew::ALL
        .iter()
        .map(|&skew| {
            let mut cfg = config.clone();
            cfg.population.skew = skew;
            train(&cfg).map(|out| (skew, out))
        })
        .collect()
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(sig9).unwrap_or_default()
}

/// Writes records as CSV; with `label`, each series is prefixed by a label column.
pub fn write_records_csv<W: Write>(
    out: W,
    label: Option<&str>,
    series: &[(String, &[RunRecord])],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = label.iter().map(|s| s.to_string()).collect();
    header.extend(
        [
            "step",
            "mean_w_easy",
            "mean_w_hard",
            "mean_length",
            "mean_base_reward",
            "mean_easy_penalty",
        ]
        .map(String::from),
    );
    header.extend(TIER_NAMES.iter().map(|t| format!("accuracy_{t}")));
    header.extend(TIER_NAMES.iter().map(|t| format!("mean_budget_{t}")));
    w.write_record(&header)?;
    for (name, records) in series {
        for r in records.iter() {
            let mut row: Vec<String> = label.iter().map(|_| name.clone()).collect();
            row.push(r.step.to_string());
            for v in [
                r.mean_w_easy,
                r.mean_w_hard,
                r.mean_length,
                r.mean_base_reward,
                r.mean_easy_penalty,
            ] {
                row.push(sig9(v));
            }
            row.extend(r.accuracy_per_tier.iter().map(|&x| opt_cell(x)));
            row.extend(r.mean_budget_per_tier.iter().map(|&x| opt_cell(x)));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("writing records", e))?;
    Ok(())
}

/// Policy as JSON: `{budget_bins, logits}` with logits at nine significant digits.
pub fn policy_json(policy: &BudgetPolicy) -> serde_json::Value {
    let logits: Vec<Vec<f64>> = policy
        .logits
        .iter()
        .map(|row| row.iter().map(|&x| round9(x)).collect())
        .collect();
    serde_json::json!({
        "budget_bins": policy.budget_bins,
        "logits": logits,
    })
}

pub fn read_policy_json(text: &str) -> Result<BudgetPolicy> {
    let policy: BudgetPolicy =
        serde_json::from_str(text).map_err(|e| Error::json("policy", e))?;
    policy.validate()?;
    Ok(policy)
}
