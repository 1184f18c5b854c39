//! `pcnet`: train, evaluate and stress-test point-cloud models.
//!
//! Exit codes: 0 success, 1 gradient check failure or internal error, 2 invalid
//! config, arguments or checkpoint, 3 training divergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcnet_core::bench::{as_ablation, noise_sweep, sparsity_sweep, Candidate, SweepResult};
use pcnet_core::experiment::{metrics_csv, restore, run, ExperimentConfig};
use pcnet_core::gradsuite::{run_suite, GRAD_TOLERANCE};
use pcnet_core::network::{evaluate, Checkpoint, Model};
use pcnet_core::tape::OpKind;
use pcnet_core::{Error, ParamStore};

#[derive(Parser)]
#[command(name = "pcnet", version, about = "Point-cloud networks with adaptive sampling and local-nonlocal cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of its own data config.
    Eval(EvalArgs),
    /// Accuracy under uniform noise replacement, per checkpoint, ratio and seed.
    NoiseSweep(NoiseArgs),
    /// Accuracy on random point subsets, per checkpoint, count and seed.
    SparsitySweep(SparsityArgs),
    /// Clean accuracy of sampling-mode variants, averaged over seeds.
    AsAblation(AblationArgs),
    /// Finite-difference check of every learned operation and two small models.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// One of pl, pl+pnl, pl+pnl+as.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Trained checkpoint (repeatable). The test split of the first one is used.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Number of evaluation seeds, `0..n`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// CSV path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1,0.2,0.5")]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct SparsityArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Point counts; defaults to halving the cloud size down to 8.
    #[arg(long, value_delimiter = ',')]
    counts: Vec<usize>,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    sweep: SweepArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corrupts the backward rule of one op kind (test fixture).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

enum Failure {
    Usage(String),
    Diverged(String),
    Check(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) | Failure::Internal(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Diverged(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Divergence { .. } => Failure::Diverged(msg),
            Error::Config(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } | Error::Parameter(_) => {
                Failure::Usage(msg)
            }
            _ => Failure::Internal(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(a: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = a.overrides.clone();
    if let Some(v) = &a.variant {
        overrides.push(format!("variant={v}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(ExperimentConfig::parse(&text, &overrides)?)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Internal(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let task = cfg.model.task;
    let trained = run(&cfg, |l| match l.test_metric(task) {
        Some(m) => eprintln!("epoch {} loss {:.4} test {:.4}", l.epoch, l.train_loss, m),
        None => eprintln!("epoch {} loss {:.4}", l.epoch, l.train_loss),
    })?;
    let ck = Checkpoint { config_text: cfg.to_text(), step: trained.state.step, params: trained.state.params };
    ck.save(&a.out)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    emit(Some(&metrics), &metrics_csv(task, &trained.logs))
}

struct Loaded {
    cfg: ExperimentConfig,
    model: Model,
    params: ParamStore,
}

fn load_checkpoint(path: &Path) -> CliResult<Loaded> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{}: checkpoint not found", path.display())));
    }
    let (cfg, model, params) = restore(&Checkpoint::load(path)?)?;
    Ok(Loaded { cfg, model, params })
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let l = load_checkpoint(&a.checkpoint)?;
    let (_, test) = l.cfg.load_data()?;
    let m = evaluate(&l.model, &l.params, &test, l.cfg.train.eval_batch_size, a.seed)?;
    emit(a.out.as_deref(), &format!("split,accuracy,miou\ntest,{},{}\n", m.overall_accuracy, m.miou))
}

/// Loads every checkpoint, labels each with `label`, and runs `sweep` on the
/// first checkpoint's test split.
fn run_sweep(
    a: &SweepArgs,
    label: impl Fn(&ExperimentConfig) -> String,
    sweep: impl FnOnce(&[Candidate], &[pcnet_core::data::Sample], &[u64]) -> pcnet_core::Result<SweepResult>,
) -> CliResult<SweepResult> {
    let loaded = a.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<CliResult<Vec<_>>>()?;
    let (_, test) = loaded[0].cfg.load_data()?;
    let mut labels: Vec<String> = Vec::new();
    for l in &loaded {
        let base = label(&l.cfg);
        let n = labels.iter().filter(|x| x.split('#').next() == Some(base.as_str())).count();
        labels.push(if n == 0 { base } else { format!("{base}#{}", n + 1) });
    }
    let cands: Vec<Candidate> = loaded
        .iter()
        .zip(labels)
        .map(|(l, label)| Candidate { label, model: &l.model, params: &l.params })
        .collect();
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let r = sweep(&cands, &test, &seeds)?;
    for s in r.summary() {
        eprintln!("{} {} {:.4} ± {:.4}", s.config, s.level, s.mean, s.std);
    }
    eprintln!("{:.1}s", r.runtime_secs);
    Ok(r)
}

fn variant_label(c: &ExperimentConfig) -> String {
    c.model.variant.to_string()
}

fn cmd_noise(a: &NoiseArgs) -> CliResult<()> {
    let r = run_sweep(&a.sweep, variant_label, |c, t, s| noise_sweep(c, t, &a.ratios, s))?;
    emit(a.sweep.out.as_deref(), &r.to_csv("variant", "ratio"))
}

fn cmd_sparsity(a: &SparsityArgs) -> CliResult<()> {
    let r = run_sweep(&a.sweep, variant_label, |c, t, s| {
        let counts = if a.counts.is_empty() {
            let n = t.first().map_or(0, |x| x.cloud.len());
            std::iter::successors(Some(n), |&c| (c / 2 >= 8).then_some(c / 2)).collect()
        } else {
            a.counts.clone()
        };
        sparsity_sweep(c, t, &counts, s)
    })?;
    emit(a.sweep.out.as_deref(), &r.to_csv("variant", "count"))
}

fn cmd_ablation(a: &AblationArgs) -> CliResult<()> {
    let r = run_sweep(&a.sweep, |c| c.model.sampling.label(), as_ablation)?;
    let mut csv = String::from("mode,accuracy_mean,accuracy_std\n");
    for s in r.summary() {
        let _ = writeln!(csv, "{},{},{}", s.config, s.mean, s.std);
    }
    emit(a.sweep.out.as_deref(), &csv)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::Usage(format!("unknown op kind `{name}`")))?),
        None => None,
    };
    let results = run_suite(a.seed, fault)?;
    let mut csv = String::from("component,max_rel_error,worst_param,status\n");
    for r in &results {
        let status = if r.passed() { "pass" } else { "fail" };
        let _ = writeln!(csv, "{},{:e},{},{status}", r.name, r.max_rel_error, r.worst_param.as_deref().unwrap_or("-"));
    }
    emit(a.out.as_deref(), &csv)?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.3e} at {})", r.name, r.max_rel_error, r.worst_param.as_deref().unwrap_or("-")))
        .collect();
    if failed.is_empty() {
        return Ok(());
    }
    let op = a.inject_fault.as_deref().map(|o| format!(" with corrupted `{o}` backward")).unwrap_or_default();
    Err(Failure::Check(format!("gradient check above {GRAD_TOLERANCE:e}{op}: {}", failed.join(", "))))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::NoiseSweep(a) => cmd_noise(a),
        Command::SparsitySweep(a) => cmd_sparsity(a),
        Command::AsAblation(a) => cmd_ablation(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Diverged(m) | Failure::Check(m) | Failure::Internal(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
