//! `jamba`: planning, training, evaluation, ablation, probing and oracle checks.
//!
//! Exit codes: 0 success, 1 invalid input (bad flags, configs, task or train
//! specs), 2 runtime or numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jamba_core::analyzer::{cost_report, max_context, GIB};
use jamba_core::config::{load_config, ConfigError, JambaConfig};
use jamba_core::error::Error as CoreError;
use jamba_core::model::{checkpoint, JambaModel};
use jamba_core::numerics::{DType, Real};
use jamba_harness::ablate::{ablate, standard_variants, Variant};
use jamba_harness::checks::{grad_check, scan_check};
use jamba_harness::io::write_atomic;
use jamba_harness::optim::OptimizerKind;
use jamba_harness::probe::{export_probes, probe_attention};
use jamba_harness::recipes;
use jamba_harness::tasks::{gen_task, TaskKind, TaskSpec};
use jamba_harness::train::{evaluate, needle_grid, train, TrainSpec};
use jamba_harness::HarnessError;

#[derive(Parser, Debug)]
#[command(name = "jamba", version, about = "Hybrid attention/Mamba/MoE decoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter counts, KV/SSM state sizes and per-layer costs of a configuration.
    Plan(PlanArgs),
    /// Train a model on a synthetic task; writes a checkpoint and a run log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a task (needle: a length x depth grid).
    Eval(EvalArgs),
    /// Train several architectures under one task, budget and seed.
    Ablate(AblateArgs),
    /// Export per-head attention matrices and induction scores.
    Probe(ProbeArgs),
    /// Chunked selective scan against the sequential recurrence.
    ScanCheck(ScanCheckArgs),
    /// Tape gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Preset name or path to a JSON config.
    #[arg(long)]
    config: String,
    /// Context length in tokens.
    #[arg(long, default_value_t = 262_144)]
    context: u64,
    /// Bits per cached value (multiple of 8).
    #[arg(long, default_value_t = 16)]
    kv_bits: u64,
    /// Also report the longest context fitting this many GiB (weights at --kv-bits too).
    #[arg(long)]
    budget_gib: Option<f64>,
    /// Write the report as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Induction,
    SelectiveCopy,
    Needle,
    LmBytes,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Induction => TaskKind::Induction,
            TaskArg::SelectiveCopy => TaskKind::SelectiveCopy,
            TaskArg::Needle => TaskKind::Needle,
            TaskArg::LmBytes => TaskKind::LmBytes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RecipeArg {
    /// The toy 1:7 hybrid on induction used by the acceptance suite.
    Induction,
}

/// Task shape shared by every command that generates data.
#[derive(Args, Debug, Clone)]
struct TaskArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Sequence length of generated samples.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Induction pairs or selective-copy content tokens.
    #[arg(long)]
    pairs: Option<usize>,
    /// Seed of the task data stream.
    #[arg(long)]
    task_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preset name or path to a JSON config.
    #[arg(long, required_unless_present = "recipe")]
    config: Option<String>,
    /// Start from a fixed recipe (config, task and schedule); other flags override it.
    #[arg(long, value_enum)]
    recipe: Option<RecipeArg>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for model.ckpt, run.csv, run.stats.json and invocation.txt.
    #[arg(long)]
    out: PathBuf,
    /// Model initialization seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Global gradient-norm cap (0 disables).
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Needle grid lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<usize>,
    /// Needle grid depths in [0, 1], comma separated.
    #[arg(long, value_delimiter = ',')]
    depths: Vec<f64>,
    /// Write the result as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Base preset or JSON config whose widths every variant shares (8 layers per block).
    #[arg(long, default_value = "toy-1m")]
    config: String,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Output directory for per-variant logs, curves.csv and report.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Subset of attention,mamba,hybrid-1-7,hybrid-1-3,hybrid-moe (default: all).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Explicit input tokens, comma separated, instead of a task sample.
    #[arg(long, value_delimiter = ',')]
    tokens: Vec<usize>,
    /// Output directory for layer{L}_head{H}.txt/.json files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScanCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> String {
        let (Failure::Invalid(m) | Failure::Runtime(m)) = self;
        m.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_)
            | CoreError::ShapeMismatch(_)
            | CoreError::VocabOverflow { .. }
            | CoreError::BudgetTooSmall { .. }
            | CoreError::CacheBatch(_)
            | CoreError::CacheMismatch(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        // unreadable, malformed or inconsistent configs are all bad input
        Failure::Invalid(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Core(c) => c.into(),
            HarnessError::ImpossibleTask(_) | HarnessError::InvalidTrainSpec(_) | HarnessError::NoAttentionLayers => {
                Failure::Invalid(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("i/o failure: {e}"))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayHelpOnMissingArgumentOrSubcommand, DisplayVersion};
            return match e.kind() {
                DisplayHelp | DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                kind => {
                    if kind == DisplayHelpOnMissingArgumentOrSubcommand {
                        let _ = e.print();
                    } else {
                        let text = e.to_string();
                        let first = text.lines().next().unwrap_or("invalid arguments");
                        eprintln!("{first}");
                    }
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Plan(a) => plan(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::ScanCheck(a) => {
            let report = scan_check(a.trials, a.seed)?;
            println!("scan-check: {} trials, max rel diff {:.3e}", report.trials.len(), report.max_rel_diff);
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "chunked scan deviates from the sequential recurrence by {:.3e}",
                    report.max_rel_diff
                )))
            }
        }
        Command::GradCheck(a) => {
            let checks = grad_check(a.seed)?;
            for c in &checks {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!("{verdict:<4} {:<34} checked {:>5}  max rel err {:.2e}", c.name, c.checked, c.max_rel_err);
            }
            match checks.iter().filter(|c| !c.passed()).count() {
                0 => Ok(()),
                n => Err(Failure::Runtime(format!("{n} gradient checks failed"))),
            }
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn plan(a: PlanArgs) -> CliResult {
    if a.kv_bits == 0 || !a.kv_bits.is_multiple_of(8) {
        return Err(invalid(format!("--kv-bits must be a positive multiple of 8, got {}", a.kv_bits)));
    }
    let config = load_config(&a.config)?;
    let bytes = a.kv_bits / 8;
    let report = cost_report(&a.config, &config, a.context, bytes)?;
    print!("{}", report.to_text());
    if let Some(gib) = a.budget_gib {
        if !(gib.is_finite() && gib > 0.0) {
            return Err(invalid("--budget-gib must be positive"));
        }
        let budget = (gib * GIB) as u64;
        match max_context(&config, budget, bytes, bytes)? {
            u64::MAX => println!("max_context within {gib} GiB: unbounded (no attention layers)"),
            n => println!("max_context within {gib} GiB: {n} tokens"),
        }
    }
    if let Some(out) = a.out {
        write_atomic(&out, report.to_json().as_bytes())?;
    }
    Ok(())
}

/// Fills a task spec from flags, falling back to `base` and then to
/// defaults sized to the model vocabulary.
fn task_spec(args: &TaskArgs, base: Option<&TaskSpec>, vocab: usize) -> CliResult<TaskSpec> {
    let kind = match (args.task, base) {
        (Some(t), _) => t.into(),
        (None, Some(b)) => b.kind,
        (None, None) => return Err(invalid("--task is required")),
    };
    let inherited = base.filter(|b| b.kind == kind);
    let seq_len = args.seq_len.or(inherited.map(|b| b.seq_len)).unwrap_or(64);
    let seed = args.task_seed.or(inherited.map(|b| b.seed)).unwrap_or(0);
    let pairs = args.pairs.or(inherited.map(|b| b.n_pairs));
    let spec = match kind {
        TaskKind::Induction => TaskSpec::induction(vocab, seq_len, pairs.unwrap_or(8), seed),
        TaskKind::SelectiveCopy => TaskSpec::selective_copy(vocab, seq_len, pairs.unwrap_or(8), seed),
        TaskKind::Needle => TaskSpec::needle(vocab, seq_len, None, seed),
        TaskKind::LmBytes => TaskSpec::lm_bytes(seq_len, seed),
    };
    spec.validate()?;
    Ok(spec)
}

fn dtype_of(d: DTypeArg) -> DType {
    match d {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    }
}

fn invocation_line() -> String {
    std::env::args().map(|a| if a.contains(' ') { format!("'{a}'") } else { a }).collect::<Vec<_>>().join(" ")
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let recipe = a.recipe.map(|RecipeArg::Induction| recipes::induction());
    let config = match (&a.config, &recipe) {
        (Some(c), _) => load_config(c)?,
        (None, Some((c, _, _))) => c.clone(),
        (None, None) => return Err(invalid("--config or --recipe is required")),
    };
    let task = task_spec(&a.task, recipe.as_ref().map(|r| &r.1), config.vocab_size)?;
    let base = recipe.map(|r| r.2).unwrap_or_default();
    let spec = TrainSpec {
        steps: a.steps.unwrap_or(base.steps),
        batch: a.batch.unwrap_or(base.batch),
        lr: a.lr.unwrap_or(base.lr),
        optimizer: match a.optimizer {
            Some(OptimizerArg::Sgd) => OptimizerKind::Sgd,
            Some(OptimizerArg::Adam) => OptimizerKind::default(),
            None => base.optimizer,
        },
        clip: a.clip.unwrap_or(base.clip),
        eval_every: a.eval_every.unwrap_or(base.eval_every),
        eval_samples: a.eval_samples.unwrap_or(base.eval_samples),
        warmup: a.warmup.unwrap_or(base.warmup),
        seed: a.seed,
    };
    spec.validate()?;
    match dtype_of(a.dtype) {
        DType::F32 => run_training::<f32>(&config, &task, &spec, &a.out),
        DType::F64 => run_training::<f64>(&config, &task, &spec, &a.out),
    }
}

fn run_training<T: Real>(config: &JambaConfig, task: &TaskSpec, spec: &TrainSpec, out: &Path) -> CliResult {
    let (model, log) = train::<T>(config, task, spec)?;
    std::fs::create_dir_all(out)?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    log.write(&out.join("run.csv"))?;
    let setup = serde_json::json!({ "config": config, "task": task, "train": spec });
    write_atomic(&out.join("setup.json"), serde_json::to_string_pretty(&setup).expect("json").as_bytes())?;
    write_atomic(&out.join("invocation.txt"), format!("{}\n", invocation_line()).as_bytes())?;
    let last = log.rows.last();
    println!(
        "trained {} steps: final loss {:.6}, eval accuracy {:.4}; wrote {}",
        spec.steps,
        last.map(|r| r.loss).unwrap_or(f64::NAN),
        log.last_eval_accuracy().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn checkpoint_dtype(path: &Path) -> CliResult<DType> {
    let header = checkpoint::read_header(path)?;
    header.dtype().ok_or_else(|| Failure::Runtime("checkpoint has no tensors".into()))
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => eval_with(checkpoint::load::<f32>(&a.checkpoint)?, &a),
        DType::F64 => eval_with(checkpoint::load::<f64>(&a.checkpoint)?, &a),
    }
}

fn eval_with<T: Real>(model: JambaModel<T>, a: &EvalArgs) -> CliResult {
    let task = task_spec(&a.task, None, model.config().vocab_size)?;
    if a.samples == 0 {
        return Err(invalid("--samples must be positive"));
    }
    let json = if task.kind == TaskKind::Needle && !(a.lengths.is_empty() && a.depths.is_empty()) {
        let lengths = if a.lengths.is_empty() { vec![task.seq_len] } else { a.lengths.clone() };
        let depths = if a.depths.is_empty() { vec![0.0, 0.25, 0.5, 0.75, 1.0] } else { a.depths.clone() };
        for &l in &lengths {
            for &d in &depths {
                TaskSpec { seq_len: l, needle_depth: Some(d), ..task.clone() }.validate()?;
            }
        }
        let cells = needle_grid(&model, &task, &lengths, &depths, a.samples)?;
        println!("{:>8} {:>6} {:>9}", "length", "depth", "accuracy");
        for c in &cells {
            println!("{:>8} {:>6.3} {:>9.4}", c.seq_len, c.depth, c.accuracy);
        }
        serde_json::to_string_pretty(&cells).expect("json")
    } else {
        let r = evaluate(&model, &task, a.samples)?;
        println!("accuracy {:.4} loss {:.6} over {} scored positions", r.accuracy, r.loss, r.scored);
        serde_json::to_string_pretty(&r).expect("json")
    };
    if let Some(out) = &a.out {
        write_atomic(out, json.as_bytes())?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> CliResult {
    let base = load_config(&a.config)?;
    let task_args = TaskArgs { task: a.task.task.or(Some(TaskArg::LmBytes)), ..a.task.clone() };
    let task = task_spec(&task_args, None, base.vocab_size)?;
    let mut variants: Vec<Variant> = standard_variants(&base);
    if !a.variants.is_empty() {
        for name in &a.variants {
            if !variants.iter().any(|v| &v.name == name) {
                return Err(invalid(format!("unknown variant `{name}`")));
            }
        }
        variants.retain(|v| a.variants.contains(&v.name));
    }
    for v in &variants {
        v.config.validate().map_err(|e| invalid(format!("variant {}: {e}", v.name)))?;
        if task.vocab_size > v.config.vocab_size {
            return Err(invalid(format!("task vocabulary {} exceeds model vocabulary {}", task.vocab_size, v.config.vocab_size)));
        }
    }
    let spec = TrainSpec {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        eval_every: 0,
        eval_samples: 16,
        seed: a.seed,
        ..TrainSpec::default()
    };
    spec.validate()?;
    let report = match dtype_of(a.dtype) {
        DType::F32 => ablate::<f32>(&variants, &task, &spec)?,
        DType::F64 => ablate::<f64>(&variants, &task, &spec)?,
    };
    report.write(&a.out)?;
    write_atomic(&a.out.join("invocation.txt"), format!("{}\n", invocation_line()).as_bytes())?;
    print!("{}", report.to_text());
    Ok(())
}

fn probe_cmd(a: ProbeArgs) -> CliResult {
    match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => probe_with(checkpoint::load::<f32>(&a.checkpoint)?, &a),
        DType::F64 => probe_with(checkpoint::load::<f64>(&a.checkpoint)?, &a),
    }
}

fn probe_with<T: Real>(model: JambaModel<T>, a: &ProbeArgs) -> CliResult {
    let (tokens, queries) = if !a.tokens.is_empty() {
        (a.tokens.clone(), None)
    } else {
        let task = task_spec(&a.task, None, model.config().vocab_size)?;
        let s = gen_task(&task)?;
        let q: Vec<usize> = (0..s.mask.len()).filter(|&t| s.mask[t] > 0.0).collect();
        (s.inputs, Some(q))
    };
    let probes = probe_attention(&model, &tokens, queries.as_deref())?;
    export_probes(&probes, &a.out)?;
    for p in &probes {
        match p.induction_score {
            Some(s) => println!("layer {} head {} induction_score {:.4}", p.layer, p.head, s),
            None => println!("layer {} head {} induction_score n/a", p.layer, p.head),
        }
    }
    Ok(())
}
