//! Post-hoc evaluation: difficulty buckets, accuracy-vs-budget curves and
//! reflective-marker counts over transcripts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::sandbox::{sample_categorical, BudgetPolicy, Population};

/// Sample identifier; JSON numbers and strings are both accepted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleId {
    Num(u64),
    Text(String),
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleId::Num(n) => write!(f, "{n}"),
            SampleId::Text(s) => f.write_str(s),
        }
    }
}

fn binary<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Int(u64),
    }
    match Flag::deserialize(d)? {
        Flag::Bool(b) => Ok(b),
        Flag::Int(0) => Ok(false),
        Flag::Int(1) => Ok(true),
        Flag::Int(n) => Err(serde::de::Error::custom(format!("correct must be 0 or 1, got {n}"))),
    }
}

fn as_int<S: serde::Serializer>(b: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(*b as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSample {
    pub id: SampleId,
    pub length: u64,
    #[serde(deserialize_with = "binary", serialize_with = "as_int")]
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

pub fn read_samples_jsonl<R: BufRead>(input: R) -> Result<Vec<EvalSample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading samples", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("sample on line {}", i + 1), e))?;
        out.push(sample);
    }
    Ok(out)
}

pub const BUCKET_LABELS: [u32; 5] = [10, 30, 50, 70, 90];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    /// Percentile label; 10 holds the easiest fifth of ids.
    pub label: u32,
    pub n_ids: usize,
    pub mean_tokens: f64,
    pub baseline_mean_tokens: f64,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    /// `mean_tokens / baseline_mean_tokens`; absent for empty buckets.
    pub token_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    pub k: usize,
    pub n_ids: usize,
    pub buckets: Vec<Bucket>,
}

#[derive(Default, Clone, Copy)]
struct IdSummary {
    count: usize,
    correct: usize,
    tokens: u64,
}

fn summarize(samples: &[EvalSample], k: usize, which: &str) -> Result<BTreeMap<SampleId, IdSummary>> {
    let mut map: BTreeMap<SampleId, IdSummary> = BTreeMap::new();
    for s in samples {
        let e = map.entry(s.id.clone()).or_default();
        e.count += 1;
        e.correct += s.correct as usize;
        e.tokens += s.length;
    }
    if let Some((id, s)) = map.iter().find(|(_, s)| s.count != k) {
        return Err(Error::Mismatch(format!(
            "{which}: id {id} has {} samples, expected {k}",
            s.count
        )));
    }
    Ok(map)
}

/// Splits ids into five percentile buckets by the baseline's empirical
/// success rate and compares token usage of `run` against `baseline`.
///
/// Ids are ordered by descending success rate with ties broken by id. The
/// bucket edges sit at `ceil(n * q)` for `q` in {0.2, 0.4, 0.6, 0.8}, so a
/// fractional edge rounds toward the easier bucket.
pub fn bucket_by_difficulty(
    run: &[EvalSample],
    baseline: &[EvalSample],
    k: usize,
) -> Result<BucketReport> {
    if k == 0 {
        return Err(Error::config("k", "must be >= 1"));
    }
    let run_map = summarize(run, k, "run")?;
    let base_map = summarize(baseline, k, "baseline")?;
    if run_map.len() != base_map.len() || run_map.keys().zip(base_map.keys()).any(|(a, b)| a != b) {
        return Err(Error::Mismatch("run and baseline cover different ids".into()));
    }
    let mut order: Vec<(&SampleId, &IdSummary)> = base_map.iter().collect();
    // Counts share the denominator k, so comparing them orders success rates exactly.
    order.sort_by(|a, b| b.1.correct.cmp(&a.1.correct).then_with(|| a.0.cmp(b.0)));

    let n = order.len();
    let mut edges = vec![0usize];
    edges.extend((1..5).map(|i| (n * i).div_ceil(5)));
    edges.push(n);

    let kf = k as f64;
    let buckets = BUCKET_LABELS
        .iter()
        .enumerate()
        .map(|(b, &label)| {
            let ids = &order[edges[b]..edges[b + 1]];
            let mut tokens = 0u64;
            let mut base_tokens = 0u64;
            let mut correct = 0usize;
            let mut base_correct = 0usize;
            for (id, base) in ids {
                let r = &run_map[*id];
                tokens += r.tokens;
                correct += r.correct;
                base_tokens += base.tokens;
                base_correct += base.correct;
            }
            let samples = ids.len() as f64 * kf;
            let (mean_tokens, baseline_mean_tokens, accuracy, baseline_accuracy) = if ids.is_empty() {
                (0.0, 0.0, 0.0, 0.0)
            } else {
                (
                    tokens as f64 / samples,
                    base_tokens as f64 / samples,
                    correct as f64 / samples,
                    base_correct as f64 / samples,
                )
            };
            Bucket {
                label,
                n_ids: ids.len(),
                mean_tokens,
                baseline_mean_tokens,
                accuracy,
                baseline_accuracy,
                token_ratio: (base_tokens > 0).then(|| tokens as f64 / base_tokens as f64),
            }
        })
        .collect();
    Ok(BucketReport { k, n_ids: n, buckets })
}

/// Tiers reported by the accuracy-vs-budget curve.
pub const CURVE_TIERS: [usize; 2] = [0, 2];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub tier: &'static str,
    pub budget: u64,
    pub accuracy: f64,
    pub std_error: f64,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyPoint {
    pub tier: &'static str,
    pub mean_tokens: f64,
    pub accuracy: f64,
    pub std_error: f64,
    pub draws: usize,
}

fn tier_members(population: &Population, tier: usize) -> Vec<usize> {
    population
        .tasks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.tier() == tier)
        .map(|(i, _)| i)
        .collect()
}

fn bernoulli_summary(hits: usize, draws: usize) -> (f64, f64) {
    let p = hits as f64 / draws as f64;
    (p, (p * (1.0 - p) / draws as f64).sqrt())
}

/// Monte-Carlo accuracy at each fixed budget for the easy and hard tiers.
///
/// Each draw picks a task uniformly from the tier and samples one outcome.
/// Tiers with no tasks are skipped.
pub fn accuracy_vs_budget(
    population: &Population,
    budgets: &[u64],
    draws: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if budgets.is_empty() {
        return Err(Error::config("eval.budgets", "need at least one budget"));
    }
    if draws == 0 {
        return Err(Error::config("eval.draws", "must be >= 1"));
    }
    let mut jobs = Vec::new();
    for &tier in &CURVE_TIERS {
        let members = tier_members(population, tier);
        if members.is_empty() {
            continue;
        }
        for (bi, &budget) in budgets.iter().enumerate() {
            jobs.push((tier, bi, budget, members.clone()));
        }
    }
    Ok(jobs
        .par_iter()
        .map(|(tier, bi, budget, members)| {
            let mut rng = stream(seed, Domain::Curve, *bi as u64, *tier as u64, 0);
            let hits = (0..draws)
                .filter(|_| {
                    let task = &population.tasks[members[rng.random_range(0..members.len())]];
                    rng.random::<f64>() < task.curve.evaluate(*budget)
                })
                .count();
            let (accuracy, std_error) = bernoulli_summary(hits, draws);
            CurvePoint {
                tier: crate::sandbox::TIER_NAMES[*tier],
                budget: *budget,
                accuracy,
                std_error,
                draws,
            }
        })
        .collect())
}

/// Monte-Carlo `(mean tokens, accuracy)` of a policy per reported tier.
pub fn policy_point(
    policy: &BudgetPolicy,
    population: &Population,
    draws: usize,
    seed: u64,
) -> Result<Vec<PolicyPoint>> {
    if draws == 0 {
        return Err(Error::config("eval.draws", "must be >= 1"));
    }
    let probs = policy.all_probs();
    let mut out = Vec::new();
    for &tier in &CURVE_TIERS {
        let members = tier_members(population, tier);
        if members.is_empty() {
            continue;
        }
        let mut rng = stream(seed, Domain::Curve, u64::MAX, tier as u64, 1);
        let mut hits = 0usize;
        let mut tokens = 0u64;
        for _ in 0..draws {
            let task = &population.tasks[members[rng.random_range(0..members.len())]];
            let budget = policy.budget_bins[sample_categorical(&probs[task.feature], &mut rng)];
            tokens += budget;
            if rng.random::<f64>() < task.curve.evaluate(budget) {
                hits += 1;
            }
        }
        let (accuracy, std_error) = bernoulli_summary(hits, draws);
        out.push(PolicyPoint {
            tier: crate::sandbox::TIER_NAMES[tier],
            mean_tokens: tokens as f64 / draws as f64,
            accuracy,
            std_error,
            draws,
        });
    }
    Ok(out)
}

/// Reflective markers, matched case-insensitively at word boundaries.
pub const REFLECTIVE_TERMS: [&str; 17] = [
    "re-check",
    "re-evaluate",
    "re-examine",
    "re-think",
    "recheck",
    "reevaluate",
    "reexamine",
    "reevaluation",
    "rethink",
    "verify",
    "check again",
    "think again",
    "try again",
    "double-check",
    "double check",
    "wait",
    "yet",
];

fn reflective_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let alternation = REFLECTIVE_TERMS
            .iter()
            .map(|t| regex::escape(t))
            .collect::<Vec<_>>()
            .join("|");
        Regex::new(&format!(r"(?i)\b(?:{alternation})\b")).expect("static pattern")
    })
}

pub fn is_reflective(text: &str) -> bool {
    reflective_regex().is_match(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReflectionReport {
    pub n_total: usize,
    pub n_reflective: usize,
    pub n_reflective_correct: usize,
    pub reflection_ratio: f64,
    pub correct_in_reflection_ratio: f64,
}

pub fn reflection_metrics(samples: &[EvalSample]) -> Result<ReflectionReport> {
    let verdicts = samples
        .par_iter()
        .map(|s| {
            s.text
                .as_deref()
                .map(|t| (is_reflective(t), s.correct))
                .ok_or_else(|| Error::Mismatch(format!("sample {} has no text", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_total = verdicts.len();
    let n_reflective = verdicts.iter().filter(|v| v.0).count();
    let n_reflective_correct = verdicts.iter().filter(|v| v.0 && v.1).count();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(ReflectionReport {
        n_total,
        n_reflective,
        n_reflective_correct,
        reflection_ratio: ratio(n_reflective, n_total),
        correct_in_reflection_ratio: ratio(n_reflective_correct, n_reflective),
    })
}
