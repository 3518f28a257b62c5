mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agentdiff::analytics::{compare_table, read_metrics};
use agentdiff::data::{TaskSet, WorldConfig};
use agentdiff::decoding::DecodeConfig;
use agentdiff::model::Checkpoint;
use agentdiff::pipeline::{self, DataConfig, CHECKPOINT_FILE};
use agentdiff::runtime::Budget;
use agentdiff::training::{OptimizerKind, Regime, TrainConfig};
use clap::{Args, CommandFactory, Parser, Subcommand};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "agentdiff", version, about = "Train and compare diffusion and autoregressive tool-use agents")]
#[command(args_override_self = true)]
struct Cli {
    /// key=value or JSON file whose entries act as flags; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate worlds, tasks, gold trajectories and training examples.
    GenData(GenDataArgs),
    /// Train one regime on a generated data directory.
    Train(TrainArgs),
    /// Run episodes for every task in a task directory.
    Run(RunArgs),
    /// Compute metrics and decoding dynamics for a run directory.
    Analyze(AnalyzeArgs),
    /// Side-by-side table of analyzed runs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = DataConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = DataConfig::default().worlds)]
    worlds: usize,
    #[arg(long, default_value_t = DataConfig::default().tasks_per_world)]
    tasks_per_world: usize,
    /// Total task count; must be a multiple of --worlds.
    #[arg(long, conflicts_with = "tasks_per_world")]
    tasks: Option<usize>,
    /// Entities per world.
    #[arg(long, default_value_t = DataConfig::default().world.entities)]
    entities: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "diffusion")]
    regime: Regime,
    #[arg(long)]
    out: PathBuf,
    /// Data directory whose examples score held-out denoising loss.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["sgd", "adam"])]
    optimizer: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Train with the naive block-causal mask instead of the span-aware one.
    #[arg(long)]
    no_span_aware: bool,
    /// Corrupt context tokens as well as the action span.
    #[arg(long)]
    no_context_clean: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory written by gen-data.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value = "diffusion")]
    regime: Regime,
    /// e.g. t_max=15,tool_cap=12,ctx=2048
    #[arg(long, default_value = "")]
    budget: Budget,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long)]
    max_action_len: Option<usize>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Run directory holding episodes.jsonl and traces.jsonl.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Analyzed run directories, in table order.
    #[arg(long, num_args = 1.., required = true)]
    compare: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let merged = match config::merge(&argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&merged).and_then(check) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Usage checks clap cannot express.
fn check(cli: Cli) -> Result<Cli, clap::Error> {
    if let Command::GenData(a) = &cli.command {
        if let Some(t) = a.tasks {
            if a.worlds == 0 || t % a.worlds != 0 {
                return Err(Cli::command().error(
                    clap::error::ErrorKind::ValueValidation,
                    format!("--tasks {t} is not a multiple of --worlds {}", a.worlds),
                ));
            }
        }
    }
    Ok(cli)
}

fn dispatch(cli: Cli, argv: &[String]) -> agentdiff::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Run(a) => run(a, argv),
        Command::Analyze(a) => analyze(a, argv),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> agentdiff::Result<()> {
    let cfg = DataConfig {
        seed: a.seed,
        worlds: a.worlds,
        tasks_per_world: a.tasks.map_or(a.tasks_per_world, |t| t / a.worlds),
        world: WorldConfig {
            entities: a.entities,
            ..WorldConfig::default()
        },
    };
    let mut m = RunManifest::start(argv, &cfg)?;
    m.seeds.insert("data".into(), cfg.seed);
    let s = pipeline::gen_data(&cfg, &a.out)?;
    m.finish(&a.out)?;
    println!("{} tasks, {} training examples -> {}", s.tasks, s.examples, a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> agentdiff::Result<TrainConfig> {
    let mut c = TrainConfig::default();
    c.objective.regime = a.regime;
    if let Some(o) = &a.optimizer {
        c.optimizer = match o.as_str() {
            "sgd" => OptimizerKind::sgd(),
            _ => OptimizerKind::adam(),
        };
    }
    macro_rules! set {
        ($($field:expr => $val:expr),* $(,)?) => { $(if let Some(v) = $val { $field = v; })* };
    }
    set! {
        c.seed => a.seed,
        c.epochs => a.epochs,
        c.batch_size => a.batch_size,
        c.lr_start => a.lr,
        c.objective.lambda => a.lambda,
        c.objective.block_len => a.block_len,
        c.model.d_model => a.d_model,
        c.model.n_layers => a.layers,
        c.model.n_heads => a.heads,
    }
    c.objective.flags.span_aware = !a.no_span_aware;
    c.objective.flags.context_clean = !a.no_context_clean;
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs, argv: &[String]) -> agentdiff::Result<()> {
    let cfg = train_config(&a)?;
    let mut m = RunManifest::start(argv, &cfg)?;
    m.seeds.insert("train".into(), cfg.seed);
    let data = pipeline::read_examples(&a.data)?;
    let heldout = a.heldout.as_deref().map(pipeline::read_examples).transpose()?;
    m.add_input(&a.data.join(pipeline::TRAIN_FILE))?;
    let (_, s) = pipeline::train_to_dir(&cfg, &data, heldout.as_deref(), &a.out)?;
    m.checkpoints.insert(CHECKPOINT_FILE.into(), s.checkpoint_sha256.clone());
    m.finish(&a.out)?;
    for e in &s.epochs {
        println!(
            "epoch {} l_total {:.4} l_mdm {:.4} l_ar {:.4}",
            e.epoch, e.l_total, e.l_mdm, e.l_ar
        );
    }
    if let Some(h) = s.heldout_mdm {
        println!("held-out l_mdm {h:.4}");
    }
    Ok(())
}

fn run(a: RunArgs, argv: &[String]) -> agentdiff::Result<()> {
    let budget = a.budget;
    let mut decode = DecodeConfig {
        regime: a.regime,
        ..DecodeConfig::default()
    };
    if let Some(t) = a.tau {
        decode.tau = t;
    }
    if let Some(b) = a.block_len {
        decode.block_len = b;
    }
    if let Some(l) = a.max_action_len {
        decode.max_action_len = l;
    }
    let ckpt = Checkpoint::<f32>::load(&a.ckpt)?;
    let tasks = TaskSet::read(&a.tasks)?;
    let mut m = RunManifest::start(argv, &(decode, budget))?;
    m.checkpoints
        .insert(a.ckpt.display().to_string(), pipeline::file_sha256(&a.ckpt)?);
    m.add_input(&a.tasks.join("tasks.json"))?;
    let (runs, s) = pipeline::run_to_dir(&ckpt, &tasks, &decode, &budget, a.jobs, &a.out)?;
    m.config_hash = s.config_hash.clone();
    m.finish(&a.out)?;
    let correct = runs
        .iter()
        .filter(|r| r.record.outcome == agentdiff::runtime::Outcome::AnsweredCorrect)
        .count();
    println!("{} episodes, {} correct -> {}", runs.len(), correct, a.out.display());
    Ok(())
}

fn analyze(a: AnalyzeArgs, argv: &[String]) -> agentdiff::Result<()> {
    let (metrics, dynamics) = pipeline::analyze_dir(&a.run)?;
    manifest::record_analysis(&a.run, argv)?;
    println!(
        "{} episodes: accuracy {}%, invalid {}%, tokens/step {:.2}",
        metrics.episodes,
        agentdiff::analytics::pct(metrics.accuracy),
        agentdiff::analytics::pct(metrics.invalid_action_rate),
        dynamics.tokens_per_step()
    );
    Ok(())
}

fn report(a: ReportArgs) -> agentdiff::Result<()> {
    let reports = a
        .compare
        .iter()
        .map(|d| read_metrics(d))
        .collect::<agentdiff::Result<Vec<_>>>()?;
    let names: Vec<String> = a.compare.iter().map(|d| run_name(d)).collect();
    let rows: Vec<_> = names.iter().map(String::as_str).zip(&reports).collect();
    let table = compare_table(&rows);
    print!("{table}");
    if let Some(out) = a.out {
        std::fs::write(out, &table)?;
    }
    Ok(())
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}
