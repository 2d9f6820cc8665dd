use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lora_recycle::adapter::{load_raw, save_adapter, save_task_vectors, validate_raw, StorageDtype, DEFAULT_MAGNITUDE_CAP};
use lora_recycle::harness::{
    run_cell_with_overlay, run_experiment_with, seeded_task, sweep_design_space, target_training, ties_grid, Combine, ExperimentConfig,
    ExperimentReport, MethodSpec, PoolSpec, SweepAxes, Workspace,
};
use lora_recycle::selection::{select_by_evaluation, select_by_similarity, select_random, SelectionStrategy};
use lora_recycle::toylab::{build_synthetic_pool, generate_task, train_lora, ToyModel};
use lora_recycle::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_POOL: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "lora-recycle", version, about = "Select, merge and tune LoRA adapters on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or build adapter pools.
    #[command(subcommand)]
    Pool(PoolCommand),
    /// Rank pool adapters for one task.
    Select(CellArgs),
    /// Run one non-adaptive merge cell and optionally export the merged deltas.
    Merge(CellArgs),
    /// Run one adaptive merge cell and optionally export the merged deltas.
    Tune(CellArgs),
    /// Train the target-task adapter for one task.
    TrainLora(TrainArgs),
    /// Run experiments from a config file.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Work with existing reports.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Subcommand)]
enum PoolCommand {
    /// Validate every adapter file in a directory.
    Validate {
        dir: PathBuf,
        /// Experiment config whose model shape adapters must match.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAGNITUDE_CAP)]
        magnitude_cap: f64,
    },
    /// Train the synthetic pool described by a config and save it.
    BuildSynthetic {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Every (task, method, k, seed) cell of the config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Design-space sweep, or the TIES grid with `--ties-grid`.
    Sweep {
        config: PathBuf,
        /// JSON file with granularities, selections, activations and ks.
        #[arg(long)]
        axes: Option<PathBuf>,
        #[arg(long)]
        ties_grid: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Recompute aggregates from a report's cells and print them as CSV.
    Summarize {
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    /// Replaces the config's seeds; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Replaces the config's k values; repeatable.
    #[arg(long = "k")]
    ks: Vec<usize>,
    #[arg(long)]
    include_target_lora: bool,
    #[arg(long)]
    reinit_pool: bool,
    /// Report path (JSON lines); the CSV summary is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if !self.ks.is_empty() {
            cfg.k_values = self.ks.clone();
        }
        cfg.include_target_lora |= self.include_target_lora;
        cfg.reinit_pool |= self.reinit_pool;
        if let Some(out) = &self.out {
            cfg.report_path = Some(out.clone());
        }
    }
}

#[derive(Args)]
struct CellArgs {
    config: PathBuf,
    #[arg(long)]
    task: String,
    /// A method name from the config or a preset.
    #[arg(long)]
    method: Option<String>,
    /// Selection strategy for `select`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    include_target_lora: bool,
    #[arg(long)]
    reinit_pool: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Validation(_) | Error::Parse { .. } | Error::Unsupported(_)) => EXIT_POOL,
            _ => EXIT_CONFIG,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Pool(PoolCommand::Validate {
            dir,
            config,
            magnitude_cap,
        }) => pool_validate(&dir, config.as_deref(), magnitude_cap),
        Command::Pool(PoolCommand::BuildSynthetic { config, out }) => build_pool(&config, &out),
        Command::Select(args) => select(&args),
        Command::Merge(args) => cell(&args, false),
        Command::Tune(args) => cell(&args, true),
        Command::TrainLora(args) => train(&args),
        Command::Experiment(ExperimentCommand::Run { config, overrides }) => {
            let mut cfg = load_config(&config)?;
            overrides.apply(&mut cfg);
            cfg.validate()?;
            let ws = Workspace::prepare(&cfg)?;
            finish(run_experiment_with(&ws, &cfg)?)
        }
        Command::Experiment(ExperimentCommand::Sweep {
            config,
            axes,
            ties_grid: ties,
            overrides,
        }) => {
            let mut cfg = load_config(&config)?;
            overrides.apply(&mut cfg);
            cfg.validate()?;
            let ws = Workspace::prepare(&cfg)?;
            let report = if ties {
                ties_grid(&ws, &cfg)?
            } else {
                let axes = match axes {
                    Some(p) => {
                        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                    }
                    None => SweepAxes {
                        ks: cfg.k_values.clone(),
                        ..SweepAxes::full()
                    },
                };
                let report = sweep_design_space(&ws, &cfg, &axes)?;
                if let Some(p) = &cfg.report_path {
                    report.write(p)?;
                }
                report
            };
            finish(report)
        }
        Command::Report(ReportCommand::Summarize { path, out }) => {
            let report = ExperimentReport::read(&path)?;
            let summary = ExperimentReport {
                aggregates: report.summarize(),
                ..report
            };
            let csv = summary.summary_csv()?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            Ok(if summary.failed_cells() > 0 { EXIT_PARTIAL } else { 0 })
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(path)?)
}

/// Prints the summary and maps failed cells to the partial-failure status.
fn finish(report: ExperimentReport) -> CliResult {
    print!("{}", report.summary_csv()?);
    let failed = report.failed_cells();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", report.cells.len());
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn pool_validate(dir: &Path, config: Option<&Path>, cap: f64) -> CliResult {
    let model = match config {
        Some(p) => load_config(p)?.model,
        None => lora_recycle::harness::desk_model(),
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(|e| Failure { code: EXIT_POOL, error: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    paths.sort();
    let mut rejected = 0;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for p in &paths {
        let line = match load_raw(p) {
            Ok(raw) => {
                let report = validate_raw(&raw, &model, cap);
                if !report.accepted() {
                    rejected += 1;
                }
                json!({ "file": p, "report": report })
            }
            Err(e) => {
                rejected += 1;
                json!({ "file": p, "error": e.to_string() })
            }
        };
        writeln!(out, "{line}").context("writing to stdout")?;
    }
    eprintln!("{} files, {rejected} rejected", paths.len());
    Ok(if rejected > 0 || paths.is_empty() { EXIT_POOL } else { 0 })
}

fn build_pool(config: &Path, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let PoolSpec::Synthetic {
        tasks,
        ranks,
        coverages,
        train,
        seed,
    } = &cfg.pool
    else {
        return Err(anyhow!(Error::Config("pool build-synthetic needs a synthetic pool spec".into())).into());
    };
    let model = ToyModel::new(cfg.model.clone(), cfg.model_seed)?;
    let pool = build_synthetic_pool(&model, tasks, ranks, coverages, train, *seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for a in &pool {
        save_adapter(a, &out.join(format!("{}.safetensors", a.name)))?;
    }
    eprintln!("wrote {} adapters to {}", pool.len(), out.display());
    Ok(0)
}

fn task_index(cfg: &ExperimentConfig, name: &str) -> Result<usize, Failure> {
    cfg.tasks
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| anyhow!(Error::Config(format!("task `{name}` is not in the config"))).into())
}

/// The config narrowed to one task and seed, with the CLI flags applied.
fn narrowed(args: &CellArgs) -> Result<(ExperimentConfig, usize), Failure> {
    let mut cfg = load_config(&args.config)?;
    let ti = task_index(&cfg, &args.task)?;
    cfg.tasks = vec![cfg.tasks[ti].clone()];
    cfg.seeds = vec![args.seed];
    cfg.k_values = vec![args.k];
    cfg.include_target_lora |= args.include_target_lora;
    cfg.reinit_pool |= args.reinit_pool;
    Ok((cfg, 0))
}

fn select(args: &CellArgs) -> CliResult {
    let (cfg, ti) = narrowed(args)?;
    let strategy: SelectionStrategy = args.strategy.as_deref().unwrap_or("evaluation").parse()?;
    let ws = Workspace::prepare(&cfg)?;
    let entry = ws
        .entry(&cfg.tasks[ti].name, args.seed)
        .ok_or_else(|| anyhow!("task `{}` was not prepared", args.task))?;
    let result = match strategy {
        SelectionStrategy::Random => {
            let names: Vec<&str> = ws.pool.iter().map(|a| a.name.as_str()).collect();
            select_random(&names, args.k, args.seed)?
        }
        SelectionStrategy::Evaluation => select_by_evaluation(&ws.pool_vectors, &ws.model, &entry.data.labelled(), args.k)?,
        other => {
            let target = entry.target.as_ref().map_err(|e| anyhow!("target adapter: {e}"))?;
            select_by_similarity(&ws.pool_vectors, &target.vectors, other, args.k)?
        }
    };
    let text = serde_json::to_string_pretty(&result).context("serializing selection")?;
    match &args.out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(0)
}

fn cell(args: &CellArgs, adaptive: bool) -> CliResult {
    let (mut cfg, ti) = narrowed(args)?;
    let default = if adaptive { "ours" } else { "simple_average" };
    let wanted = args.method.as_deref().unwrap_or(default);
    let method = match cfg.methods.iter().find(|m| m.name == wanted) {
        Some(m) => m.clone(),
        None => MethodSpec::preset(wanted)?,
    };
    let is_tune = matches!(method.combine, Combine::Tune { .. });
    if is_tune != adaptive {
        let verb = if adaptive { "tune" } else { "merge" };
        bail_config(format!("method `{}` cannot be run with `{verb}`", method.name))?;
    }
    cfg.methods = vec![method];
    cfg.validate()?;
    let ws = Workspace::prepare(&cfg)?;
    let (record, overlay) = run_cell_with_overlay(&ws, &cfg, ti, 0, args.k, args.seed);
    if let (Some(out), Some(overlay)) = (&args.out, &overlay) {
        save_task_vectors(overlay, out, StorageDtype::F32)?;
    }
    println!("{}", serde_json::to_string_pretty(&record).context("serializing cell")?);
    Ok(if record.failed() { EXIT_PARTIAL } else { 0 })
}

fn bail_config(msg: String) -> Result<(), Failure> {
    Err(anyhow!(Error::Config(msg)).into())
}

fn train(args: &TrainArgs) -> CliResult {
    let cfg = load_config(&args.config)?;
    let ti = task_index(&cfg, &args.task)?;
    let model = ToyModel::new(cfg.model.clone(), cfg.model_seed)?;
    let data = generate_task(&seeded_task(&cfg.tasks[ti], args.seed))?;
    let mut run = train_lora(&model, &data, &target_training(&cfg, &args.task, args.seed))?;
    run.adapter.name = format!("target-{}", args.task);
    save_adapter(&run.adapter, &args.out)?;
    let summary = json!({
        "task": args.task,
        "out": args.out,
        "initial_val_loss": run.initial_val_loss,
        "best_val_loss": run.best_val_loss,
        "best_step": run.best_step,
    });
    println!("{summary}");
    Ok(0)
}
