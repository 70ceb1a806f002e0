//! `pearl`: generate data, train, evaluate and analyse from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 numerical abort (non-finite loss or a failed gradient
//! check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pearl_core::evalkit::{self, EvalMode};
use pearl_core::gradsuite;
use pearl_core::synthworld::{self, read_jsonl, Regime, TrajectoryExample};
use pearl_core::trainer::{load_checkpoint, Checkpoint, Mode, TrainConfig, Trainer};
use pearl_core::Error;

#[derive(Parser)]
#[command(name = "pearl", version, about = "Latent trajectory alignment for a miniature multimodal transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and held-out evaluation splits.
    GenData(GenDataArgs),
    /// Train a model (pearl, sft or lvr).
    Train(TrainArgs),
    /// Score a checkpoint on a benchmark file.
    Eval(EvalArgs),
    /// Accuracy of latent decoding across step counts.
    SweepSteps(SweepArgs),
    /// 2-D projection of input-view and trajectory-view embeddings.
    ProjectEmbeddings(ProjectArgs),
    /// Finite-difference checks of every primitive and of the full loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "single_single")]
    regime: String,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 300)]
    n_eval_easy: usize,
    #[arg(long, default_value_t = 300)]
    n_eval_hard: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    nextlat: Option<bool>,
    #[arg(long)]
    k_pred: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Checkpoint and log directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    bench: PathBuf,
    /// `direct` or `lvr`; defaults to how the checkpoint was trained.
    #[arg(long)]
    mode: Option<String>,
    /// Latent steps for `--mode lvr`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    /// Defaults to `eval/` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    bench: PathBuf,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    limit: Option<usize>,
    /// Defaults to `sweep/` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// One or more benchmark files; points are labelled by regime.
    #[arg(long, required = true, num_args = 1..)]
    bench: Vec<PathBuf>,
    /// Examples taken from each file.
    #[arg(long)]
    limit: Option<usize>,
    /// Defaults to `projection/` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per parameter tensor in the end-to-end check.
    #[arg(long, default_value_t = 4)]
    coords: usize,
    #[arg(long, default_value = "gradcheck")]
    out: PathBuf,
}

/// A failure with its exit code already decided.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(Error::NonFinite { .. }) => 3,
        Some(_) => 2,
        None => 2,
    }
}

#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn keep_freed_memory() {
    // Training builds and drops a large graph every step; returning that
    // memory to the kernel each time is dominated by page faults.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn keep_freed_memory() {}

fn main() -> ExitCode {
    keep_freed_memory();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::SweepSteps(a) => sweep(a),
        Command::ProjectEmbeddings(a) => project(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn write_run_json(dir: &Path, run: serde_json::Value) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    Ok(())
}

fn sibling_dir(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(name)
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let regime: Regime = a.regime.parse()?;
    let summary = synthworld::gen_dataset(a.seed, regime, a.n_train, a.n_eval_easy, a.n_eval_hard, &a.out)?;
    write_run_json(
        &a.out,
        json!({
            "command": "gen-data",
            "seed": a.seed,
            "config": {
                "regime": regime.name(),
                "n_train": a.n_train,
                "n_eval_easy": a.n_eval_easy,
                "n_eval_hard": a.n_eval_hard,
            },
            "train_resamples": summary.train_resamples,
        }),
    )?;
    println!(
        "wrote {} train, {} easy, {} hard examples to {}",
        a.n_train,
        a.n_eval_easy,
        a.n_eval_hard,
        a.out.display()
    );
    Ok(())
}

fn load_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn resolve_train_config(a: &TrainArgs, resumed: Option<&Checkpoint>) -> anyhow::Result<TrainConfig> {
    let mut cfg = match (&a.config, resumed.and_then(|ck| ck.train_config.clone())) {
        (Some(p), _) => load_config(p)?,
        (None, Some(c)) => c,
        (None, None) => TrainConfig::default(),
    };
    if let Some(m) = &a.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field.clone() { cfg.$field = v; })*};
    }
    set!(lambda, k_pred, lr, weight_decay, batch_size, steps, seed, eval_every);
    if let Some(v) = a.nextlat {
        cfg.nextlat_enabled = v;
    }
    if let Some(p) = &a.train {
        cfg.train_path = p.clone();
    }
    if let Some(p) = &a.eval {
        cfg.eval_path = Some(p.clone());
    }
    if let Some(n) = a.eval_limit {
        cfg.eval_limit = Some(n);
    }
    if let Some(p) = &a.out {
        cfg.checkpoint_dir = p.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let ck = match &a.resume {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let cfg = resolve_train_config(&a, ck.as_ref())?;
    let run = json!({
        "command": "train",
        "seed": cfg.seed,
        "resume": a.resume,
        "resume_step": ck.as_ref().map(|c| c.step),
        "config": cfg,
    });
    write_run_json(&cfg.checkpoint_dir, run)?;
    let mut trainer = match ck {
        Some(ck) => Trainer::resume(cfg, ck)?,
        None => Trainer::new(cfg)?,
    };
    let summary = trainer.run()?;
    let last = summary.history.last().map(|l| l.l_pearl);
    println!("trained to step {} (final loss {:?})", summary.steps, last);
    if let Some(rep) = &summary.last_eval {
        println!("eval accuracy {:.4} over {} items", rep.accuracy, rep.n);
    }
    if let Some((step, acc)) = summary.best {
        println!("best accuracy {acc:.4} at step {step}");
    }
    Ok(())
}

fn load_bench(path: &Path, limit: Option<usize>) -> anyhow::Result<(Vec<TrajectoryExample>, usize)> {
    let mut split = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(n) = limit {
        split.examples.truncate(n);
    }
    if split.examples.is_empty() {
        return Err(Error::Data(format!("{}: no usable examples", path.display())).into());
    }
    Ok((split.examples, split.malformed))
}

fn trained_seed(ck: &Checkpoint) -> Option<u64> {
    ck.train_config.as_ref().map(|c| c.seed)
}

fn load_model(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn eval_mode(a: &EvalArgs, ck: &Checkpoint) -> anyhow::Result<EvalMode> {
    let trained = ck.train_config.as_ref().map(|c| c.eval_mode()).unwrap_or(EvalMode::Direct);
    let mode = match a.mode.as_deref() {
        None => match (trained, a.k) {
            (EvalMode::Lvr { .. }, Some(k)) => EvalMode::Lvr { k },
            (m, _) => m,
        },
        Some("direct") => EvalMode::Direct,
        Some("lvr") => match (a.k, trained) {
            (Some(k), _) => EvalMode::Lvr { k },
            (None, EvalMode::Lvr { k }) => EvalMode::Lvr { k },
            (None, EvalMode::Direct) => EvalMode::Lvr { k: 4 },
        },
        Some(other) => return Err(config_error(format!("unknown eval mode {other:?} (expected direct or lvr)"))),
    };
    if mode == (EvalMode::Lvr { k: 0 }) {
        return Err(config_error("--k must be at least 1"));
    }
    Ok(mode)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = load_model(&a.ckpt)?;
    let mode = eval_mode(&a, &ck)?;
    let (examples, malformed) = load_bench(&a.bench, a.limit)?;
    let out = a.out.clone().unwrap_or_else(|| sibling_dir(&a.ckpt, "eval"));
    let bench_stem = a.bench.file_stem().and_then(|s| s.to_str()).unwrap_or("bench");
    let stem = format!("{bench_stem}_{mode}");
    write_run_json(
        &out,
        json!({
            "command": "eval",
            "seed": trained_seed(&ck),
            "config": {
                "ckpt": a.ckpt,
                "bench": a.bench,
                "mode": mode,
                "limit": a.limit,
                "model_hash": ck.model.param_hash(),
            },
        }),
    )?;
    let (mut report, items) = evalkit::evaluate_examples(&ck.model, &examples, mode)?;
    report.malformed = malformed;
    evalkit::write_eval_report(&out, &stem, &report, &items)?;
    println!(
        "{}: accuracy {:.4} ({}/{}), unparsed {}, malformed {}",
        stem, report.accuracy, report.correct, report.n, report.unparsed, report.malformed
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let ck = load_model(&a.ckpt)?;
    let ks = a.ks.clone().unwrap_or_else(evalkit::default_sweep_ks);
    if ks.is_empty() || ks.contains(&0) {
        return Err(config_error("--ks must list step counts of at least 1"));
    }
    let (examples, _) = load_bench(&a.bench, a.limit)?;
    let out = a.out.clone().unwrap_or_else(|| sibling_dir(&a.ckpt, "sweep"));
    write_run_json(
        &out,
        json!({
            "command": "sweep-steps",
            "seed": trained_seed(&ck),
            "config": {
                "ckpt": a.ckpt,
                "bench": a.bench,
                "ks": ks,
                "limit": a.limit,
                "model_hash": ck.model.param_hash(),
            },
        }),
    )?;
    let report = evalkit::sweep_steps(&ck.model, &examples, &ks)?;
    evalkit::write_sweep(&out, &report)?;
    for r in &report.rows {
        println!("k={:<3} accuracy {:.4} (n={})", r.k, r.accuracy, r.n_eval);
    }
    println!("pearson r (log2 k) {:.4}, raw k {:.4}", report.pearson_r, report.pearson_r_raw_k);
    Ok(())
}

fn project(a: ProjectArgs) -> anyhow::Result<()> {
    let ck = load_model(&a.ckpt)?;
    let mut examples = Vec::new();
    for b in &a.bench {
        examples.extend(load_bench(b, a.limit)?.0);
    }
    let labels: Vec<String> = examples.iter().map(|e| e.regime.name().to_string()).collect();
    let out = a.out.clone().unwrap_or_else(|| sibling_dir(&a.ckpt, "projection"));
    write_run_json(
        &out,
        json!({
            "command": "project-embeddings",
            "seed": trained_seed(&ck),
            "config": {
                "ckpt": a.ckpt,
                "bench": a.bench,
                "limit": a.limit,
                "model_hash": ck.model.param_hash(),
            },
        }),
    )?;
    let proj = evalkit::project_embeddings(&ck.model, &examples, &labels)?;
    evalkit::write_points_csv(&out.join("points.csv"), &proj.points)?;
    let (input_only, both) = evalkit::projection_silhouettes(&proj).map_err(|e| {
        if matches!(e, Error::Contract(_)) {
            anyhow!(Exit(1, format!("{e} (pass files from at least two regimes)")))
        } else {
            e.into()
        }
    })?;
    let summary = json!({
        "n_examples": examples.len(),
        "silhouette_input": input_only,
        "silhouette_all": both,
        "explained_variance": proj.pca.explained,
        "total_variance": proj.pca.total_variance,
        "note": proj.pca.note,
    });
    fs::write(out.join("silhouette.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{} points; silhouette input-view {input_only:.4}, both views {both:.4}", proj.points.len());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.coords == 0 {
        return Err(config_error("--coords must be at least 1"));
    }
    write_run_json(&a.out, json!({ "command": "gradcheck", "seed": a.seed, "config": { "coords": a.coords } }))?;
    let mut entries = gradsuite::primitive_suite(a.seed)?;
    entries.push(gradsuite::end_to_end_pearl(a.seed, a.coords)?);
    let mut rows = Vec::new();
    for e in &entries {
        let status = if e.passed() { "pass" } else { "FAIL" };
        println!("{status} {:<20} max_rel_err {:.3e} over {} coords", e.name, e.report.max_rel_error, e.report.checked);
        rows.push(json!({
            "name": e.name,
            "passed": e.passed(),
            "max_rel_error": e.report.max_rel_error,
            "checked": e.report.checked,
            "failures": e.report.failures.len(),
        }));
    }
    fs::write(a.out.join("gradcheck.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed > 0 {
        return Err(Exit(3, format!("{failed} gradient checks exceeded tolerance")).into());
    }
    Ok(())
}
