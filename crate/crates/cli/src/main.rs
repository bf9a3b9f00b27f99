//! `tmem`: ingest trajectories, consolidate, retrieve guidelines and serve
//! the HTTP API against a local store.
//!
//! Exit codes: 0 success, 1 validation (including conflicts and unknown
//! ids), 2 I/O, 3 model gateway.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tmem_core::api::{ExtractMode, RetrieveRequest, TipsQuery};
use tmem_core::config::{ConfigError, Settings};
use tmem_core::engine::{Engine, EngineError, ErrorKind};
use tmem_core::model::{RawTrajectory, Tip};
use tmem_core::retrieval::Strategy;

#[derive(Debug, Parser)]
#[command(name = "tmem", version, about = "Trajectory-informed memory for LLM agents")]
struct Cli {
    /// Store directory (overrides config and TMEM_STORE).
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// TOML settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print JSON (the service's response shapes) instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExtractArg {
    Task,
    Subtask,
    Both,
}

impl From<ExtractArg> for ExtractMode {
    fn from(a: ExtractArg) -> Self {
        match a {
            ExtractArg::Task => ExtractMode::Task,
            ExtractArg::Subtask => ExtractMode::Subtask,
            ExtractArg::Both => ExtractMode::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Cosine,
    Llm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Jsonl,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate and store trajectory files, optionally extracting tips.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_enum)]
        extract: Option<ExtractArg>,
    },
    /// Cluster and merge similar tips.
    Consolidate {
        /// Average-linkage similarity threshold (default from settings, 0.85).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Retrieve guidelines for a task.
    Retrieve {
        #[arg(long)]
        task: String,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// Print only the guidelines text on stdout; the summary goes to stderr.
        #[arg(long)]
        render: bool,
    },
    /// Store counts.
    Stats,
    /// One tip in full.
    Show { tip_id: String },
    /// Dump every tip.
    Export {
        #[arg(long, value_enum, default_value = "jsonl")]
        format: ExportFormat,
    },
    /// Run the HTTP service.
    Serve {
        /// Bind address (overrides config and TMEM_BIND).
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn code_for(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 2,
        ErrorKind::Gateway => 3,
        ErrorKind::Validation | ErrorKind::Conflict | ErrorKind::NotFound | ErrorKind::Internal => 1,
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure { code: code_for(e.kind()), message: e.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        EngineError::from(e).into()
    }
}

fn io_failure(e: impl std::fmt::Display) -> Failure {
    Failure { code: 2, message: e.to_string() }
}

type Outcome = Result<(), Failure>;

fn print_json<T: Serialize>(value: &T) -> Outcome {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value).map_err(io_failure)?;
    writeln!(out).map_err(io_failure)
}

fn settings(cli: &Cli) -> Result<Settings, Failure> {
    let mut s = Settings::load(cli.config.as_deref())?;
    if let Some(store) = &cli.store {
        s.store = store.clone();
    }
    Ok(s)
}

fn tip_row(t: &Tip) -> String {
    format!(
        "{:<36}  {:<12}  {:<8}  {:<7}  {:<10}  {}",
        t.id,
        t.category.as_str(),
        t.priority.as_str(),
        t.granularity.as_str(),
        t.application_context.as_deref().unwrap_or("(generic)"),
        t.index_description
    )
}

fn tip_header() -> String {
    format!("{:<36}  {:<12}  {:<8}  {:<7}  {:<10}  {}", "ID", "CATEGORY", "PRIORITY", "LEVEL", "CONTEXT", "INDEX")
}

fn ingest(cli: &Cli, engine: &Engine, files: &[PathBuf], extract: Option<ExtractArg>) -> Outcome {
    for path in files {
        let text = std::fs::read_to_string(path).map_err(|e| io_failure(format!("{}: {e}", path.display())))?;
        let raw: RawTrajectory =
            serde_json::from_str(&text).map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })?;
        let resp = engine.ingest(raw)?;
        if cli.json {
            print_json(&resp)?;
        } else {
            println!("ingested {} (revision {})", resp.id, resp.revision);
        }
        if let Some(mode) = extract {
            let summary = engine.extract(&resp.id, mode.into())?;
            if cli.json {
                print_json(&summary)?;
            } else {
                println!(
                    "  outcome {} ({:?}), {} task tips, {} subtasks, {} subtask tips",
                    summary.outcome.kind.as_str(),
                    summary.outcome.source,
                    summary.task_tips,
                    summary.subtasks,
                    summary.subtask_tips
                );
                for w in &summary.warnings {
                    println!("  warning: {w}");
                }
            }
        }
    }
    Ok(())
}

fn consolidate(cli: &Cli, engine: &Engine, threshold: Option<f64>) -> Outcome {
    let report = engine.consolidate(threshold)?;
    if cli.json {
        return print_json(&report);
    }
    println!("threshold   {}", threshold.unwrap_or(engine.settings.threshold));
    println!("tips        {} -> {}", report.tips_before, report.tips_after);
    println!("revision    {} -> {}", report.revision_before, report.revision_after);
    println!("generalized {}", report.generalized);
    println!("clusters    {}", report.clusters_formed());
    for c in &report.clusters {
        println!("  {:<36}  {} -> {}  {}", c.cluster_id, c.members_before, c.members_after, c.canonical_description);
    }
    println!("conflicts   {}", report.conflicts_resolved.len());
    for f in &report.failures {
        println!("  failed {:?}: {}", f.members, f.error);
    }
    Ok(())
}

fn retrieve(cli: &Cli, engine: &Engine, req: RetrieveRequest, render: bool) -> Outcome {
    let resp = engine.retrieve(&req)?;
    if render {
        print!("{}", resp.rendered);
        std::io::stdout().flush().map_err(io_failure)?;
        eprintln!("{} tips via {:?}", resp.result.tips.len(), resp.result.strategy_used);
        for t in &resp.result.tips {
            eprintln!("{:.4}  {}", t.score, tip_row(&t.tip));
        }
        return Ok(());
    }
    if cli.json {
        return print_json(&resp);
    }
    println!("strategy {:?}, {} tips", resp.result.strategy_used, resp.result.tips.len());
    println!("SCORE   {}", tip_header());
    for t in &resp.result.tips {
        println!("{:.4}  {}", t.score, tip_row(&t.tip));
    }
    for w in &resp.result.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn stats(cli: &Cli, engine: &Engine) -> Outcome {
    let s = engine.stats();
    if cli.json {
        return print_json(&s);
    }
    println!("revision      {}", s.revision);
    println!("trajectories  {}", s.trajectories);
    println!("tips          {}", s.tips);
    println!("clusters      {}", s.clusters);
    for (label, map) in [("category", &s.by_category), ("priority", &s.by_priority), ("granularity", &s.by_granularity)] {
        for (k, v) in map {
            println!("  {label:<12} {k:<14} {v}");
        }
    }
    Ok(())
}

fn show(cli: &Cli, engine: &Engine, id: &str) -> Outcome {
    let t = engine.tip(id)?;
    if cli.json {
        return print_json(&t);
    }
    println!("id           {}", t.id);
    println!("category     {}", t.category.as_str());
    println!("priority     {}", t.priority.as_str());
    println!("granularity  {}", t.granularity.as_str());
    println!("context      {}", t.application_context.as_deref().unwrap_or("(generic)"));
    println!("task class   {}", t.task_category.as_deref().unwrap_or("-"));
    println!("index        {}", t.index_description);
    println!("sources      {}", t.source_trajectory_ids.join(", "));
    println!("outcome      {}", t.source_outcome);
    println!();
    print!("{}", tmem_core::retrieval::render_tips([&t]));
    Ok(())
}

fn export(engine: &Engine) -> Outcome {
    for t in engine.tips(TipsQuery::default())? {
        print_json(&t)?;
    }
    Ok(())
}

fn serve(engine: Engine, bind: &str) -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(io_failure)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| io_failure(format!("bind {bind}: {e}")))?;
        tmem_service::serve(Arc::new(engine), listener).await.map_err(io_failure)
    })
}

fn init_logging(json: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_env("TMEM_LOG").unwrap_or_else(|_| {
        tracing_subscriber::EnvFilter::new(if json { "info" } else { "warn" })
    });
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if json {
        builder.json().flatten_event(true).init();
    } else {
        builder.compact().without_time().init();
    }
}

fn run(cli: Cli) -> Outcome {
    let settings = settings(&cli)?;
    init_logging(matches!(cli.command, Command::Serve { .. }));
    let bind = settings.bind.clone();
    let engine = Engine::open(settings)?;
    match &cli.command {
        Command::Ingest { files, extract } => ingest(&cli, &engine, files, *extract),
        Command::Consolidate { threshold } => consolidate(&cli, &engine, *threshold),
        Command::Retrieve { task, strategy, tau, k, render } => {
            let strategy = strategy.map(|s| match s {
                StrategyArg::Cosine => Strategy::Cosine,
                StrategyArg::Llm => Strategy::LlmGuided,
            });
            let req = RetrieveRequest { task_description: task.clone(), strategy, tau: *tau, k: *k, granularities: None };
            retrieve(&cli, &engine, req, *render)
        }
        Command::Stats => stats(&cli, &engine),
        Command::Show { tip_id } => show(&cli, &engine, tip_id),
        Command::Export { format: ExportFormat::Jsonl } => export(&engine),
        Command::Serve { bind: flag } => serve(engine, flag.as_deref().unwrap_or(&bind)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if json {
                let body = serde_json::json!({ "error": f.message, "exit_code": f.code });
                eprintln!("{body}");
            } else {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
