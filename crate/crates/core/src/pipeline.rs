//! Train, evaluate and analyze in one run directory, plus run comparison.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{accuracy_vs_budget, policy_point, read_samples_jsonl, EvalSample, SampleId};
use crate::config::{RunConfig, SeedSource};
use crate::error::{Error, Result};
use crate::format::{round9_json, sig9};
use crate::rng::{stream, Domain};
use crate::sandbox::{sample_categorical, tier_of, BudgetPolicy, Population, TIER_NAMES};
use crate::trainer::{policy_json, train, write_records_csv};

pub const LOCK_FILE: &str = ".coda.lock";
pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "records.csv";
pub const POLICY: &str = "policy.json";
pub const POPULATION: &str = "population.jsonl";
pub const EVAL: &str = "eval.jsonl";
pub const REPORT: &str = "report.json";

/// Artifacts covered by manifest checksums, in write order.
pub const ARTIFACTS: [&str; 5] = [POPULATION, RECORDS, POLICY, EVAL, REPORT];

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub checksums: BTreeMap<String, String>,
}

/// Exclusive ownership of a run directory; the lock file is removed on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(Error::io(format!("locking {}", dir.display()), e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `k` sampled `(length, correct)` outcomes per task under `policy`.
pub fn sample_eval(
    policy: &BudgetPolicy,
    population: &Population,
    k: usize,
    seed: u64,
) -> Vec<EvalSample> {
    let probs = policy.all_probs();
    population
        .tasks
        .iter()
        .flat_map(|task| {
            let mut rng = stream(seed, Domain::Evaluation, 0, 0, task.id);
            let row = &probs[task.feature];
            (0..k)
                .map(|_| {
                    let length = policy.budget_bins[sample_categorical(row, &mut rng)];
                    let correct = rng.random::<f64>() < task.curve.evaluate(length);
                    EvalSample {
                        id: SampleId::Num(task.id),
                        length,
                        correct,
                        text: None,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TierSummary {
    pub tier: &'static str,
    pub n_samples: usize,
    pub accuracy: f64,
    pub mean_tokens: f64,
}

/// Per-tier and overall accuracy and mean tokens of eval samples; tiers
/// come from `difficulty_by_id`. Empty tiers are omitted.
pub fn summarize_eval(
    samples: &[EvalSample],
    difficulty_by_id: &HashMap<SampleId, f64>,
) -> Result<Vec<TierSummary>> {
    let mut sums = [(0usize, 0usize, 0u64); 4];
    for s in samples {
        let d = difficulty_by_id
            .get(&s.id)
            .ok_or_else(|| Error::Mismatch(format!("eval sample id {} is not in the population", s.id)))?;
        for slot in [tier_of(*d), 3] {
            sums[slot].0 += 1;
            sums[slot].1 += s.correct as usize;
            sums[slot].2 += s.length;
        }
    }
    let names = [TIER_NAMES[0], TIER_NAMES[1], TIER_NAMES[2], "all"];
    Ok(sums
        .iter()
        .zip(names)
        .filter(|((n, _, _), _)| *n > 0)
        .map(|(&(n, c, t), tier)| TierSummary {
            tier,
            n_samples: n,
            accuracy: c as f64 / n as f64,
            mean_tokens: t as f64 / n as f64,
        })
        .collect())
}

fn eval_jsonl(samples: &[EvalSample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let v = round9_json(serde_json::to_value(value).expect("serializable"));
    let mut out = serde_json::to_vec_pretty(&v).expect("json");
    out.push(b'\n');
    out
}

/// Builds every artifact in memory.
fn build_artifacts(config: &RunConfig) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let outcome = train(&config.train_config())?;
    let population = &outcome.population;

    let mut pop_bytes = Vec::new();
    population.write_jsonl(&mut pop_bytes)?;

    let mut records = Vec::new();
    write_records_csv(&mut records, None, &[(String::new(), &outcome.records)])?;

    let mut policy = serde_json::to_vec_pretty(&policy_json(&outcome.policy)).expect("json");
    policy.push(b'\n');

    let samples = sample_eval(&outcome.policy, population, config.eval.k, config.seed);
    let difficulty: HashMap<SampleId, f64> = population
        .tasks
        .iter()
        .map(|t| (SampleId::Num(t.id), t.difficulty))
        .collect();

    let report = json!({
        "scheme": config.scheme.kind.as_str(),
        "skew": population.skew.as_str(),
        "final": outcome.final_stats(),
        "run_mean_gates": {
            "w_easy": outcome.mean_gates().0,
            "w_hard": outcome.mean_gates().1,
        },
        "eval": summarize_eval(&samples, &difficulty)?,
        "curve": accuracy_vs_budget(population, &config.eval.budgets, config.eval.draws, config.seed)?,
        "policy_point": policy_point(&outcome.policy, population, config.eval.draws, config.seed)?,
    });

    Ok(vec![
        (POPULATION, pop_bytes),
        (RECORDS, records),
        (POLICY, policy),
        (EVAL, eval_jsonl(&samples)),
        (REPORT, to_json_bytes(&report)),
    ])
}

/// Runs the full pipeline into `config.output_dir`.
///
/// On failure every artifact this call wrote is removed again.
pub fn run(config: &RunConfig, seed_source: SeedSource) -> Result<RunSummary> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let _lock = DirLock::acquire(dir)?;

    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_run(config, seed_source, dir, &mut written);
    if result.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
    }
    result
}

fn write_run(
    config: &RunConfig,
    seed_source: SeedSource,
    dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<RunSummary> {
    let artifacts = build_artifacts(config)?;
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &artifacts {
        let path = dir.join(name);
        written.push(path.clone());
        fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "tool": "coda",
        "version": crate::VERSION,
        "created_unix": created_unix,
        "seed": config.seed,
        "seed_source": seed_source,
        "config": config,
        "checksums": checksums,
    });
    let path = dir.join(MANIFEST);
    written.push(path.clone());
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("json");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(RunSummary {
        output_dir: dir.to_path_buf(),
        checksums,
    })
}

/// Reads the echoed config back out of a manifest.
pub fn config_from_manifest(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json("manifest", e))?;
    let config = value
        .get("config")
        .ok_or_else(|| Error::Mismatch("manifest has no config".into()))?;
    RunConfig::from_json_str(&config.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub tier: &'static str,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// `(accuracy_a - accuracy_b) * 100`, in percentage points.
    pub accuracy_delta_pp: f64,
    pub tokens_a: f64,
    pub tokens_b: f64,
    /// `-(1 - tokens_a / tokens_b) * 100`, rounded to a whole percent.
    pub token_delta_pct: i64,
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn difficulty_map(population_jsonl: &[u8]) -> Result<HashMap<SampleId, f64>> {
    let mut out = HashMap::new();
    for (i, line) in population_jsonl.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let task: crate::sandbox::Task = serde_json::from_slice(line)
            .map_err(|e| Error::json(format!("population line {}", i + 1), e))?;
        out.insert(SampleId::Num(task.id), task.difficulty);
    }
    Ok(out)
}

/// Relative token change of `a` against `b`, rounded to a whole percent.
pub fn token_delta_pct(tokens_a: f64, tokens_b: f64) -> i64 {
    (-(1.0 - tokens_a / tokens_b) * 100.0).round() as i64
}

/// Tier-wise deltas of run `a` relative to run `b`.
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<Vec<ComparisonRow>> {
    let pop_a = read_file(dir_a, POPULATION)?;
    let pop_b = read_file(dir_b, POPULATION)?;
    if pop_a != pop_b {
        return Err(Error::Mismatch(format!(
            "{} and {} were evaluated on different populations",
            dir_a.display(),
            dir_b.display()
        )));
    }
    let difficulty = difficulty_map(&pop_a)?;
    let eval = |dir: &Path| -> Result<Vec<TierSummary>> {
        let bytes = read_file(dir, EVAL)?;
        let samples = read_samples_jsonl(BufReader::new(bytes.as_slice()))?;
        summarize_eval(&samples, &difficulty)
    };
    let a = eval(dir_a)?;
    let b = eval(dir_b)?;
    a.iter()
        .map(|ra| {
            let rb = b
                .iter()
                .find(|rb| rb.tier == ra.tier)
                .ok_or_else(|| Error::Mismatch(format!("tier {} missing from {}", ra.tier, dir_b.display())))?;
            Ok(ComparisonRow {
                tier: ra.tier,
                accuracy_a: ra.accuracy,
                accuracy_b: rb.accuracy,
                accuracy_delta_pp: (ra.accuracy - rb.accuracy) * 100.0,
                tokens_a: ra.mean_tokens,
                tokens_b: rb.mean_tokens,
                token_delta_pct: token_delta_pct(ra.mean_tokens, rb.mean_tokens),
            })
        })
        .collect()
}

pub fn write_comparison_csv<W: Write>(out: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "tier",
        "accuracy_a",
        "accuracy_b",
        "accuracy_delta_pp",
        "tokens_a",
        "tokens_b",
        "token_delta_pct",
    ])?;
    for r in rows {
        w.write_record([
            r.tier.to_string(),
            sig9(r.accuracy_a),
            sig9(r.accuracy_b),
            sig9(r.accuracy_delta_pp),
            sig9(r.tokens_a),
            sig9(r.tokens_b),
            r.token_delta_pct.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing comparison", e))?;
    Ok(())
}
