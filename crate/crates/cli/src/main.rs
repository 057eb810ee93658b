use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use coda_core::analysis::{
    accuracy_vs_budget, bucket_by_difficulty, policy_point, read_samples_jsonl, reflection_metrics,
};
use coda_core::config::{resolve_seed, RunConfig, SeedSource, SEED_ENV};
use coda_core::format::{round9_json, sig9};
use coda_core::optimality::DifficultyWiring;
use coda_core::pipeline::{self, compare, write_comparison_csv};
use coda_core::rewards::{self, shape_l1};
use coda_core::sandbox::{make_population, Skew};
use coda_core::trainer::{
    ablate_incorrect_bonus, policy_json, read_policy_json, shift, sweep_alpha, train, write_records_csv,
    TrainOutcome,
};
use coda_core::{
    equivalent_price, optimal_budget, CostModel, Error, RolloutGroup, SchemeKind, SuccessCurve,
};

const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "coda", version, about = "Difficulty-gated length shaping and budget-allocation sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Utility-optimal token budget for one success curve.
    BudgetSolve(BudgetSolveArgs),
    /// Shape rewards for rollout groups read as JSONL.
    Shape(ShapeArgs),
    /// Train a budget policy and write records.csv and policy.json.
    Train(ConfigArgs),
    /// Train once per alpha value.
    SweepAlpha(SweepArgs),
    /// Compare the correctness-gated bonus with bonus-on-incorrect on a hard-skew population.
    AblateBonus(ConfigArgs),
    /// Train on the easy, mixed and hard populations.
    Shift(ConfigArgs),
    /// Percentile difficulty buckets with token ratios against a baseline.
    Bucket(BucketArgs),
    /// Accuracy against fixed budgets for the easy and hard tiers.
    Curve(CurveArgs),
    /// Reflective-marker counts over transcripts.
    Reflect(ReflectArgs),
    /// Tier-wise accuracy and token deltas of run A against run B.
    Compare(CompareArgs),
    /// Train, evaluate and analyze into a run directory.
    Run(RunArgs),
}

/// Flags that override the matching config keys.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// coda, grpo, vlp, asrr or l1.
    #[arg(long)]
    scheme: Option<SchemeKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau_easy: Option<f64>,
    #[arg(long)]
    tau_hard: Option<f64>,
    #[arg(long)]
    gamma_vlp: Option<f64>,
    #[arg(long)]
    l1_target: Option<u64>,
    #[arg(long)]
    bonus_on_incorrect: bool,
    /// easy, mixed or hard.
    #[arg(long)]
    skew: Option<Skew>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_tasks: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    clip_epsilon: Option<f64>,
    #[arg(long)]
    kl_coefficient: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, base: Option<&Path>) -> Result<(RunConfig, SeedSource), Error> {
        let path = self.config.as_deref().or(base);
        let mut cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            scheme => scheme.kind,
            alpha => scheme.alpha,
            beta => scheme.beta,
            tau_easy => scheme.tau_easy,
            tau_hard => scheme.tau_hard,
            gamma_vlp => scheme.gamma_vlp,
            skew => population.skew,
            n_tasks => population.n_tasks,
            steps => trainer.steps,
            batch_tasks => trainer.batch_tasks,
            group_size => trainer.group_size,
            learning_rate => trainer.learning_rate,
            clip_epsilon => trainer.clip_epsilon,
            kl_coefficient => trainer.kl_coefficient,
            output_dir => output_dir,
        );
        if let Some(t) = self.l1_target {
            cfg.scheme.l1_target = Some(t);
        }
        if self.bonus_on_incorrect {
            cfg.scheme.bonus_on_incorrect = true;
        }
        let env = std::env::var(SEED_ENV).ok();
        let (seed, source) = resolve_seed(cfg.seed, env.as_deref())?;
        cfg.seed = seed;
        cfg.validate()?;
        Ok((cfg, source))
    }
}

#[derive(Args)]
struct BudgetSolveArgs {
    #[arg(long, default_value_t = 0.0)]
    p_floor: f64,
    #[arg(long, required_unless_present = "difficulty")]
    p_ceiling: Option<f64>,
    #[arg(long, required_unless_present = "difficulty")]
    scale: Option<f64>,
    /// Derive the curve from a latent difficulty with the default wiring.
    #[arg(long, conflicts_with_all = ["p_ceiling", "scale"])]
    difficulty: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    per_token_cost: f64,
    #[arg(long)]
    price: f64,
    #[arg(long, default_value_t = 16_384)]
    grid_max: u64,
    /// Write the full utility profile as CSV.
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Args)]
struct ShapeArgs {
    /// JSONL groups `{"lengths":[..],"base":[..],"target":n?}`; `-` reads stdin.
    #[arg(long, default_value = "-")]
    input: PathBuf,
    /// `-` writes stdout.
    #[arg(long, default_value = "-")]
    output: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.4")]
    alphas: Vec<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BucketArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Also write the buckets as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    /// Overrides `eval.budgets`.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<u64>>,
    /// Overrides `eval.draws`.
    #[arg(long)]
    draws: Option<usize>,
    /// Trained policy to overlay as a single point per tier.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// `-` writes stdout.
    #[arg(long, default_value = "-")]
    output: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReflectArgs {
    /// JSONL samples with `text`; `-` reads stdin.
    #[arg(long, default_value = "-")]
    input: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    run_a: PathBuf,
    run_b: PathBuf,
    /// `-` writes stdout.
    #[arg(long, default_value = "-")]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    config_file: PathBuf,
    #[command(flatten)]
    overrides: ConfigArgs,
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>, Error> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        io::stdin()
            .read_to_end(&mut buf)
            .map_err(|e| Error::io("reading stdin", e))?;
        Ok(Box::new(io::Cursor::new(buf)))
    } else {
        let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(Box::new(BufReader::new(f)))
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if path == Path::new("-") {
        io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::io("writing stdout", e))
    } else {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn print_json(value: Value) {
    println!("{}", serde_json::to_string_pretty(&round9_json(value)).expect("json"));
}

fn outcome_summary(outcome: &TrainOutcome) -> Value {
    let stats = outcome.final_stats();
    let (w_easy, w_hard) = outcome.mean_gates();
    json!({
        "final": stats,
        "run_mean_gates": { "w_easy": w_easy, "w_hard": w_hard },
    })
}

fn prepare_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_series(
    dir: &Path,
    label: Option<&str>,
    series: Vec<(String, &TrainOutcome)>,
) -> Result<Value, Error> {
    let mut csv = Vec::new();
    let refs: Vec<(String, &[_])> = series
        .iter()
        .map(|(name, o)| (name.clone(), o.records.as_slice()))
        .collect();
    write_records_csv(&mut csv, label, &refs)?;
    write_output(&dir.join("records.csv"), &csv)?;
    let summary: serde_json::Map<String, Value> = series
        .iter()
        .map(|(name, o)| (name.clone(), outcome_summary(o)))
        .collect();
    let summary = round9_json(Value::Object(summary));
    let mut bytes = serde_json::to_vec_pretty(&summary).expect("json");
    bytes.push(b'\n');
    write_output(&dir.join("summary.json"), &bytes)?;
    Ok(summary)
}

fn budget_solve(args: BudgetSolveArgs) -> Result<(), Error> {
    let curve = match args.difficulty {
        Some(d) => {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::config("difficulty", "must lie in [0, 1]"));
            }
            DifficultyWiring::<f64>::default().curve(d)
        }
        None => SuccessCurve::new(
            args.p_floor,
            args.p_ceiling.expect("required by clap"),
            args.scale.expect("required by clap"),
        )?,
    };
    let cost = CostModel::new(args.per_token_cost, args.price)?;
    let profile = optimal_budget(&curve, &cost, args.grid_max);
    let price_at_optimum = match equivalent_price(&curve, &cost, profile.argmax_budget) {
        Ok(p) => Some(p),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(path) = &args.profile {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["budget", "success", "utility"])?;
        for i in 0..profile.budgets.len() {
            w.write_record([
                profile.budgets[i].to_string(),
                sig9(profile.success[i]),
                sig9(profile.utilities[i]),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("buffering profile", e.into_error()))?;
        write_output(path, &bytes)?;
    }
    print_json(json!({
        "curve": curve,
        "argmax_budget": profile.argmax_budget,
        "success": profile.success[profile.argmax_budget as usize],
        "max_utility": profile.max_utility(),
        "equivalent_price": price_at_optimum,
    }));
    Ok(())
}

fn shape_cmd(args: ShapeArgs) -> Result<(), Error> {
    let (cfg, _) = args.config.resolve(None)?;
    let scheme = cfg.scheme;
    let mut out = String::new();
    for (i, line) in open_input(&args.input)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading groups", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let context = format!("group on line {}", i + 1);
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::json(context.clone(), e))?;
        let target = value.get("target").and_then(Value::as_u64);
        let mut fields = value;
        if let Some(obj) = fields.as_object_mut() {
            obj.remove("target");
        }
        let group: RolloutGroup = serde_json::from_value(fields).map_err(|e| Error::json(context, e))?;
        group.validate()?;
        let shaped = match (scheme.kind, target.or(scheme.l1_target)) {
            (SchemeKind::L1, Some(t)) => shape_l1(&group, &scheme, t),
            (SchemeKind::L1, None) => {
                return Err(Error::config(
                    "scheme.l1_target",
                    format!("line {} has no target and no --l1-target was given", i + 1),
                ))
            }
            _ => rewards::shape(&group, &scheme)?,
        };
        out.push_str(&shaped.to_json_line());
        out.push('\n');
    }
    write_output(&args.output, out.as_bytes())
}

fn train_cmd(args: ConfigArgs) -> Result<(), Error> {
    let (cfg, _) = args.resolve(None)?;
    let outcome = train(&cfg.train_config())?;
    prepare_dir(&cfg.output_dir)?;
    let label = cfg.scheme.kind.to_string();
    let summary = write_series(&cfg.output_dir, None, vec![(label, &outcome)])?;
    let mut policy = serde_json::to_vec_pretty(&policy_json(&outcome.policy)).expect("json");
    policy.push(b'\n');
    write_output(&cfg.output_dir.join("policy.json"), &policy)?;
    print_json(summary);
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<(), Error> {
    let (cfg, _) = args.config.resolve(None)?;
    let runs = sweep_alpha(&cfg.train_config(), &args.alphas)?;
    prepare_dir(&cfg.output_dir)?;
    let series = runs.iter().map(|(a, o)| (sig9(*a), o)).collect();
    print_json(write_series(&cfg.output_dir, Some("alpha"), series)?);
    Ok(())
}

fn ablate_cmd(args: ConfigArgs) -> Result<(), Error> {
    let (cfg, _) = args.resolve(None)?;
    let (off, on) = ablate_incorrect_bonus(&cfg.train_config())?;
    prepare_dir(&cfg.output_dir)?;
    let series = vec![("off".to_string(), &off), ("on".to_string(), &on)];
    print_json(write_series(&cfg.output_dir, Some("bonus_on_incorrect"), series)?);
    Ok(())
}

fn shift_cmd(args: ConfigArgs) -> Result<(), Error> {
    let (cfg, _) = args.resolve(None)?;
    let runs = shift(&cfg.train_config())?;
    prepare_dir(&cfg.output_dir)?;
    let series = runs.iter().map(|(s, o)| (s.to_string(), o)).collect();
    print_json(write_series(&cfg.output_dir, Some("skew"), series)?);
    Ok(())
}

fn bucket_cmd(args: BucketArgs) -> Result<(), Error> {
    let run = read_samples_jsonl(open_input(&args.run)?)?;
    let baseline = read_samples_jsonl(open_input(&args.baseline)?)?;
    let report = bucket_by_difficulty(&run, &baseline, args.k)?;
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "bucket",
            "n_ids",
            "mean_tokens",
            "baseline_mean_tokens",
            "token_ratio",
            "accuracy",
            "baseline_accuracy",
        ])?;
        for b in &report.buckets {
            w.write_record([
                b.label.to_string(),
                b.n_ids.to_string(),
                sig9(b.mean_tokens),
                sig9(b.baseline_mean_tokens),
                b.token_ratio.map(sig9).unwrap_or_default(),
                sig9(b.accuracy),
                sig9(b.baseline_accuracy),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("buffering buckets", e.into_error()))?;
        write_output(path, &bytes)?;
    }
    print_json(serde_json::to_value(&report).expect("json"));
    Ok(())
}

fn curve_cmd(args: CurveArgs) -> Result<(), Error> {
    let (cfg, _) = args.config.resolve(None)?;
    let budgets = args.budgets.unwrap_or(cfg.eval.budgets.clone());
    let draws = args.draws.unwrap_or(cfg.eval.draws);
    let population = make_population(&cfg.population, cfg.seed)?;
    let points = accuracy_vs_budget(&population, &budgets, draws, cfg.seed)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "tier", "budget", "accuracy", "std_error", "draws"])?;
    for p in &points {
        w.write_record([
            "fixed".to_string(),
            p.tier.to_string(),
            p.budget.to_string(),
            sig9(p.accuracy),
            sig9(p.std_error),
            p.draws.to_string(),
        ])?;
    }
    if let Some(path) = &args.policy {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let policy = read_policy_json(&text)?;
        if policy.feature_bins() != population.feature_bins {
            return Err(Error::Mismatch(format!(
                "policy has {} feature rows, population uses {}",
                policy.feature_bins(),
                population.feature_bins
            )));
        }
        for p in policy_point(&policy, &population, draws, cfg.seed)? {
            w.write_record([
                "policy".to_string(),
                p.tier.to_string(),
                sig9(p.mean_tokens),
                sig9(p.accuracy),
                sig9(p.std_error),
                p.draws.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io("buffering curve", e.into_error()))?;
    write_output(&args.output, &bytes)
}

fn reflect_cmd(args: ReflectArgs) -> Result<(), Error> {
    let samples = read_samples_jsonl(open_input(&args.input)?)?;
    print_json(serde_json::to_value(reflection_metrics(&samples)?).expect("json"));
    Ok(())
}

fn compare_cmd(args: CompareArgs) -> Result<(), Error> {
    let rows = compare(&args.run_a, &args.run_b)?;
    let mut buf = Vec::new();
    write_comparison_csv(&mut buf, &rows)?;
    write_output(&args.output, &buf)
}

fn run_cmd(args: RunArgs) -> Result<(), Error> {
    let (cfg, source) = args.overrides.resolve(Some(&args.config_file))?;
    let summary = pipeline::run(&cfg, source)?;
    print_json(json!({
        "output_dir": summary.output_dir,
        "checksums": summary.checksums,
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BudgetSolve(a) => budget_solve(a),
        Command::Shape(a) => shape_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::SweepAlpha(a) => sweep_cmd(a),
        Command::AblateBonus(a) => ablate_cmd(a),
        Command::Shift(a) => shift_cmd(a),
        Command::Bucket(a) => bucket_cmd(a),
        Command::Curve(a) => curve_cmd(a),
        Command::Reflect(a) => reflect_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Run(a) => run_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_INPUT,
            })
        }
    }
}
