use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ldca::checkpoint::Checkpoint;
use ldca::config::RunConfig;
use ldca::dataset::{load_dataset, Dataset, LoadOptions, Resize};
use ldca::episode::EpisodeSpec;
use ldca::eval::{
    cross_domain_eval, evaluate, spread, sweep_k, write_metrics_csv, EvalOptions, EvalReport,
};
use ldca::gradcheck::full_suite;
use ldca::model::Model;
use ldca::synthetic::{generate_synthetic, SyntheticSpec};
use ldca::train::{train, Progress};
use ldca::LdcaError;

#[derive(Parser)]
#[command(
    name = "ldca",
    version,
    about = "Few-shot classification with context-augmented local descriptors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on sampled episodes.
    Eval(EvalArgs),
    /// Evaluate several k values on identical episodes.
    SweepK(SweepArgs),
    /// Evaluate a checkpoint on a dataset other than its training set.
    CrossEval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Finite-difference check of every primitive and the full pipeline.
    Gradcheck(GradcheckArgs),
    /// Print a preset run config as TOML.
    Config(ConfigArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the dataset of the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint path; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-episode training history as CSV.
    #[arg(long)]
    out_metrics: Option<PathBuf>,
    /// Overrides the training and evaluation seeds of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Clone)]
struct EpisodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Queries per class; 15 for one shot and 10 otherwise when omitted.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Classify raw embedder descriptors, skipping the augmenter.
    #[arg(long)]
    bypass: bool,
    #[arg(long, value_enum, default_value_t = ResizeArg::Bilinear)]
    resize: ResizeArg,
    #[arg(long)]
    out_metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, default_value_t = 1)]
    k: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
    ks: Vec<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML synthetic spec; the desk spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
    /// Overrides the seed of the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResizeArg {
    Bilinear,
    Nearest,
}

impl From<ResizeArg> for Resize {
    fn from(r: ResizeArg) -> Self {
        match r {
            ResizeArg::Bilinear => Resize::Bilinear,
            ResizeArg::Nearest => Resize::Nearest,
        }
    }
}

fn print_json(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    let root = a
        .dataset
        .or_else(|| cfg.data.dataset.clone())
        .ok_or_else(|| {
            LdcaError::Usage("no dataset given in the config or with --dataset".into())
        })?;
    let out = a
        .out
        .or_else(|| cfg.output.checkpoint.clone())
        .ok_or_else(|| {
            LdcaError::Usage("no checkpoint path given in the config or with --out".into())
        })?;
    let opts = LoadOptions {
        resize: cfg.data.resize,
        ..LoadOptions::new(cfg.model.image_side)
    };
    let dataset = load_dataset(&root, &opts)?;
    let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let start = Instant::now();
    let every = (cfg.train.episodes / 20).max(1);
    let quiet = a.quiet;
    let outcome = train(model, &cfg.train, &dataset, |p| {
        if quiet {
            return;
        }
        match p {
            Progress::Episode(r) if (r.episode + 1) % every == 0 => eprintln!(
                "episode {} loss {:.4} acc {:.3} lr {:.2e} ({:.0?})",
                r.episode + 1,
                r.loss,
                r.accuracy,
                r.lr,
                start.elapsed()
            ),
            Progress::Validation(v) => eprintln!(
                "validation at {}: {:.4} ± {:.4}",
                v.episode, v.accuracy, v.ci95
            ),
            _ => {}
        }
    })?;
    let ckpt = Checkpoint::new(
        outcome.model,
        outcome.model_episodes,
        Some(cfg.fingerprint()),
    );
    ckpt.save(&out)?;
    if let Some(path) = a.out_metrics.or(cfg.output.metrics.clone()) {
        let mut csv = String::from("episode,lr,loss,accuracy\n");
        for r in &outcome.history {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.episode, r.lr, r.loss, r.accuracy
            ));
        }
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    let n = outcome.history.len().min(50);
    let mean_loss = |rs: &mut dyn Iterator<Item = f64>| rs.sum::<f64>() / n.max(1) as f64;
    print_json(&json!({
        "checkpoint": out,
        "fingerprint": ckpt.model.fingerprint(),
        "config_fingerprint": cfg.fingerprint(),
        "dataset": dataset.digest,
        "episodes": cfg.train.episodes,
        "model_episodes": outcome.model_episodes,
        "initial_loss": mean_loss(&mut outcome.history.iter().take(n).map(|r| r.loss)),
        "final_loss": mean_loss(&mut outcome.history.iter().rev().take(n).map(|r| r.loss)),
        "validations": outcome.validations,
    }))
}

struct Loaded {
    ckpt: Checkpoint,
    dataset: Dataset,
}

fn load(a: &EpisodeArgs) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let opts = LoadOptions {
        side: ckpt.model.config.image_side,
        resize: a.resize.into(),
        normalization: Some(ckpt.model.normalization),
    };
    let dataset = load_dataset(&a.dataset, &opts)?;
    Ok(Loaded { ckpt, dataset })
}

fn options(a: &EpisodeArgs, k: usize, repeat: u64) -> EvalOptions {
    let queries = a.queries.unwrap_or(if a.shots == 1 { 15 } else { 10 });
    EvalOptions {
        spec: EpisodeSpec {
            ways: a.ways,
            shots: a.shots,
            queries,
            split: a.split.clone(),
            seed: a.seed,
        },
        episodes: a.episodes,
        k,
        bypass: a.bypass,
        repeat,
    }
}

fn summary(report: &EvalReport, ckpt: &Checkpoint) -> Result<Value> {
    let mut v = serde_json::to_value(report.summary())?;
    v["config_fingerprint"] = json!(ckpt.config_fingerprint);
    Ok(v)
}

fn check_repeats(a: &EpisodeArgs) -> Result<()> {
    if a.repeats == 0 {
        return Err(LdcaError::Usage("--repeats must be at least 1".into()).into());
    }
    Ok(())
}

fn run_eval(a: EvalArgs, cross: bool) -> Result<()> {
    check_repeats(&a.episode)?;
    let l = load(&a.episode)?;
    let mut reports = Vec::new();
    for repeat in 0..a.episode.repeats {
        let opts = options(&a.episode, a.k, repeat);
        let report = if cross {
            cross_domain_eval(&l.ckpt.model, &l.dataset, &opts)?
        } else {
            evaluate(&l.ckpt.model, &l.dataset, &opts)?
        };
        print_json(&summary(&report, &l.ckpt)?)?;
        reports.push(report);
    }
    if let Some(path) = &a.episode.out_metrics {
        write_metrics_csv(path, &reports)?;
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    check_repeats(&a.episode)?;
    let l = load(&a.episode)?;
    let mut all = Vec::new();
    for repeat in 0..a.episode.repeats {
        let opts = options(&a.episode, a.ks[0], repeat);
        let rows = sweep_k(&l.ckpt.model, &l.dataset, &opts, &a.ks)?;
        let table = rows
            .iter()
            .map(|r| summary(r, &l.ckpt))
            .collect::<Result<Vec<_>>>()?;
        print_json(&json!({ "repeat": repeat, "rows": table, "spread": spread(&rows) }))?;
        all.extend(rows);
    }
    if let Some(path) = &a.episode.out_metrics {
        write_metrics_csv(path, &all)?;
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => read_spec(path)?,
        None => SyntheticSpec::desk(0),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let written = generate_synthetic(&spec, &a.out, a.overwrite)?;
    print_json(&json!({ "out": a.out, "images": written, "spec": spec }))
}

fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = toml::from_str(&text).map_err(|e| {
        LdcaError::Usage(format!(
            "malformed synthetic spec: {}",
            e.to_string().replace('\n', " ")
        ))
    })?;
    Ok(spec)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let suite = full_suite(a.seed)?;
    let checks: Vec<Value> = suite
        .checks
        .iter()
        .map(|c| {
            json!({
                "name": c.name,
                "max_rel_error": c.report.max_rel_error,
                "probes": c.report.probes,
                "passed": c.report.passed,
            })
        })
        .collect();
    let failed: Vec<&str> = suite
        .checks
        .iter()
        .filter(|c| !c.report.passed)
        .map(|c| c.name.as_str())
        .collect();
    print_json(&json!({
        "checks": checks,
        "passed": failed.is_empty(),
        "tol": suite.cfg.tol,
        "seconds": start.elapsed().as_secs_f64(),
    }))?;
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn run_config(a: ConfigArgs) -> Result<()> {
    let cfg = match a.profile {
        Profile::Desk => RunConfig::desk(a.seed),
        Profile::Full => RunConfig::full(a.seed),
    };
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a, false),
        Command::SweepK(a) => run_sweep(a),
        Command::CrossEval(a) => run_eval(a, true),
        Command::Synth(a) => run_synth(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Config(a) => run_config(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!(
                "error[usage]: {}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, text) = match e.downcast_ref::<LdcaError>() {
                Some(l) => (l.kind(), l.to_string()),
                None => ("runtime", format!("{e:#}")),
            };
            eprintln!("error[{kind}]: {}", one_line(&text));
            match kind {
                "usage" | "config" => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
