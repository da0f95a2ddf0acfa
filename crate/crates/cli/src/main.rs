//! `interleave` command-line tool: batch runs, reports, fixture generation,
//! finetuning export, and the session server.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use interleave_core::backend::{Backend, HttpBackend, HttpConfig, ScriptTable, ScriptedBackend};
use interleave_core::combinator::{CombinatorConfig, Strategy, DEFAULT_SAMPLES, DEFAULT_TEMPERATURE};
use interleave_core::env::household::{generate_instances, load_instances, TaskType};
use interleave_core::env::shop::ShopGoal;
use interleave_core::env::wiki::{segment_sentences, LiveWiki, Page, PageKind, WikiCorpus};
use interleave_core::eval::{
    export_finetune, read_logs, report_from_logs, run_batch, tag_failure, tag_report, tags_from_logs, write_finetune,
    write_logs, FailureTag, REPORT_FILE,
};
use interleave_core::reference::script_cases;
use interleave_core::suite::{household_cases, run_case, shop_cases, wiki_cases, Case, EnvSpec};
use interleave_core::{Domain, TaskSpec};
use interleave_session::{ServiceConfig, Store};

#[derive(Parser)]
#[command(name = "interleave", version, about = "Reasoning-and-acting agent runner")]
struct Cli {
    /// Log at debug level (one line per episode and backend call).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of episodes and write episodes.jsonl plus report.json.
    Run(RunArgs),
    /// Recompute and print the report of a finished batch.
    Report {
        dir: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Export correct episodes as (input, target) finetuning records.
    ExportFinetune {
        dir: PathBuf,
        /// Output file; defaults to DIR/finetune.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Percentage table of failure-mode tags.
    TagReport {
        dir: PathBuf,
        /// Lines of `TRIAL:INDEX TAG`; tags already in the logs are used
        /// when absent.
        #[arg(long)]
        tags: Option<PathBuf>,
    },
    /// Build a wiki corpus from `{title, text}` or `{title, sentences}` lines.
    IngestCorpus {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded household instances as JSON lines.
    GenerateHousehold {
        #[arg(long)]
        task: Option<TaskType>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a replay script in which a reference agent solves every task.
    Script {
        #[command(flatten)]
        tasks: TaskArgs,
        #[arg(long, default_value = "react")]
        strategy: Strategy,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Directory for per-session event logs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        /// Require `Authorization: Bearer TOKEN`.
        #[arg(long, env = "INTERLEAVE_TOKEN")]
        token: Option<String>,
    },
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long)]
    domain: Domain,
    /// Task file: TaskSpec lines (wiki), instance lines (household), or
    /// goal lines (shop). Defaults to the bundled tasks.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Wiki corpus file, or `live` for the HTTP source.
    #[arg(long)]
    corpus: Option<String>,
    /// Seed and count per task type for generated household tasks.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    per_type: usize,
    /// Keep only the first N tasks.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Clone)]
struct SamplingArgs {
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    n_samples: u32,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
}

impl SamplingArgs {
    fn config(&self) -> CombinatorConfig {
        CombinatorConfig {
            n_samples: self.n_samples,
            temperature: self.temperature,
            ..CombinatorConfig::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    tasks: TaskArgs,
    #[arg(long, default_value = "react")]
    strategy: Strategy,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// `scripted:FILE` or `http[:URL]`.
    #[arg(long)]
    backend: String,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Task loading

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(out)
}

fn load_cases(args: &TaskArgs, cfg: &CombinatorConfig) -> Result<Vec<Case>> {
    let limit = cfg.step_limit(args.domain);
    let mut cases = match (args.domain, &args.tasks) {
        (Domain::WikiQa | Domain::WikiFever, None) => wiki_cases(args.domain),
        (Domain::WikiQa | Domain::WikiFever, Some(p)) => read_jsonl::<TaskSpec>(p)?
            .into_iter()
            .map(|t| Case::new(t, EnvSpec::Wiki))
            .collect(),
        (Domain::Household, None) => household_cases(args.seed, args.per_type, limit),
        (Domain::Household, Some(p)) => load_instances(p)?
            .into_iter()
            .map(|i| Case::household(i, limit))
            .collect(),
        (Domain::Shop, None) => shop_cases(limit),
        (Domain::Shop, Some(p)) => read_jsonl::<ShopGoal>(p)?
            .into_iter()
            .map(|g| Case::shop(g, limit))
            .collect(),
    };
    if let Some(c) = &args.corpus {
        let pages: Arc<dyn interleave_core::env::wiki::PageSource> = if c == "live" {
            Arc::new(LiveWiki::from_env()?)
        } else {
            Arc::new(WikiCorpus::load(Path::new(c))?)
        };
        cases = cases.into_iter().map(|k| k.with_pages(pages.clone())).collect();
    }
    if let Some(n) = args.limit {
        cases.truncate(n);
    }
    if cases.is_empty() {
        bail!("no tasks for domain {}", args.domain);
    }
    Ok(cases)
}

enum BackendChoice {
    Scripted(Arc<ScriptTable>),
    Http(Arc<HttpBackend>),
}

impl BackendChoice {
    fn parse(spec: &str) -> Result<Self> {
        if let Some(path) = spec.strip_prefix("scripted:") {
            let table = ScriptTable::load(Path::new(path))?;
            return Ok(Self::Scripted(Arc::new(table)));
        }
        let cfg = match spec {
            "http" => HttpConfig::from_env()?,
            _ => match spec.strip_prefix("http:") {
                Some(url) => HttpConfig::new(url),
                None => bail!("backend must be scripted:FILE or http[:URL], got `{spec}`"),
            },
        };
        Ok(Self::Http(Arc::new(HttpBackend::new(cfg)?)))
    }

    /// Replay backends are built per episode so each reads its script from
    /// the start regardless of scheduling.
    fn for_episode(&self) -> Arc<dyn Backend> {
        match self {
            Self::Scripted(t) => Arc::new(ScriptedBackend::new(t.clone())),
            Self::Http(b) => b.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Commands

fn run(args: RunArgs) -> Result<ExitCode> {
    let cfg = args.sampling.config();
    if !args.strategy.supports(args.tasks.domain) {
        bail!("strategy {} does not support domain {}", args.strategy, args.tasks.domain);
    }
    let cases = load_cases(&args.tasks, &cfg)?;
    let backend = BackendChoice::parse(&args.backend)?;
    let by_id: HashMap<&str, &Case> = cases.iter().map(|c| (c.task.id.as_str(), c)).collect();
    if by_id.len() != cases.len() {
        bail!("task ids must be unique");
    }
    let tasks: Vec<TaskSpec> = cases.iter().map(|c| c.task.clone()).collect();
    let strategy = args.strategy;
    let (logs, report) = run_batch(&tasks, strategy, args.trials, args.parallel, &|task, trial| {
        let case = by_id[task.id.as_str()];
        let r = run_case(case, strategy, trial, backend.for_episode(), &cfg);
        match &r {
            Ok(res) => tracing::debug!(task = %task.id, trial, status = ?res.episode.trajectory.status, "episode done"),
            Err(e) => tracing::warn!(task = %task.id, trial, error = %e, "episode errored"),
        }
        r
    })?;
    write_logs(&args.out, &logs)?;
    fs::write(args.out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{}", report.render_text());
    Ok(if report.errored.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn report(dir: &Path, json: bool) -> Result<ExitCode> {
    let report = report_from_logs(&read_logs(dir)?);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render_text());
    }
    Ok(if report.errored.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn export(dir: &Path, out: Option<PathBuf>, cap: Option<usize>) -> Result<()> {
    let records = export_finetune(&read_logs(dir)?, cap);
    let out = out.unwrap_or_else(|| dir.join("finetune.jsonl"));
    write_finetune(&records, BufWriter::new(fs::File::create(&out)?))?;
    println!("exported {} records to {}", records.len(), out.display());
    Ok(())
}

fn tags(dir: &Path, tags: Option<PathBuf>) -> Result<()> {
    let mut logs = read_logs(dir)?;
    if let Some(path) = tags {
        let text = fs::read_to_string(&path)?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, tag) = line
                .split_once(char::is_whitespace)
                .with_context(|| format!("{}:{}: expected `TRIAL:INDEX TAG`", path.display(), n + 1))?;
            let tag: FailureTag = tag.trim().parse()?;
            let log = logs
                .iter_mut()
                .find(|l| format!("{}:{}", l.trial, l.index) == key)
                .with_context(|| format!("{}:{}: no episode {key}", path.display(), n + 1))?;
            tag_failure(log, tag);
        }
    }
    for row in tag_report(&tags_from_logs(&logs)) {
        println!("{:<14} {:<20} {:>4} {:>6.1}%", row.mode, row.tag.as_str(), row.count, row.percent);
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawPage {
    title: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    sentences: Option<Vec<String>>,
    #[serde(default)]
    lead: Option<usize>,
    #[serde(default)]
    kind: PageKind,
}

fn ingest(input: &Path, out: &Path) -> Result<()> {
    let mut corpus = WikiCorpus::new();
    for raw in read_jsonl::<RawPage>(input)? {
        let sentences = match (raw.sentences, raw.text) {
            (Some(s), _) => s,
            (None, Some(t)) => segment_sentences(&t),
            (None, None) => bail!("page `{}` has neither text nor sentences", raw.title),
        };
        let mut page = Page::new(raw.title, sentences);
        page.lead = raw.lead;
        page.kind = raw.kind;
        corpus.insert(page)?;
    }
    corpus.write(BufWriter::new(fs::File::create(out)?))?;
    println!("wrote {} pages to {}", corpus.len(), out.display());
    Ok(())
}

fn generate(task: Option<TaskType>, seed: u64, count: usize, out: &Path) -> Result<()> {
    let types = match task {
        Some(t) => vec![t],
        None => TaskType::ALL.to_vec(),
    };
    let mut w = BufWriter::new(fs::File::create(out)?);
    let mut n = 0;
    for t in types {
        for inst in generate_instances(t, seed, count) {
            writeln!(w, "{}", serde_json::to_string(&inst)?)?;
            n += 1;
        }
    }
    w.flush()?;
    println!("wrote {n} instances to {}", out.display());
    Ok(())
}

fn script(tasks: &TaskArgs, strategy: Strategy, trials: usize, sampling: &SamplingArgs, out: &Path) -> Result<()> {
    let cfg = sampling.config();
    let cases = load_cases(tasks, &cfg)?;
    let table = script_cases(&cases, strategy, trials, &cfg);
    table.write(BufWriter::new(fs::File::create(out)?))?;
    println!("wrote {} script entries to {}", table.len(), out.display());
    Ok(())
}

async fn serve(addr: &str, log_dir: Option<PathBuf>, token: Option<String>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!(addr = %listener.local_addr()?, "session service listening");
    interleave_session::serve(listener, Store::new(ServiceConfig { log_dir, token })).await?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Report { dir, json } => report(&dir, json),
        Command::ExportFinetune { dir, out, cap } => export(&dir, out, cap).map(|_| ExitCode::SUCCESS),
        Command::TagReport { dir, tags: t } => tags(&dir, t).map(|_| ExitCode::SUCCESS),
        Command::IngestCorpus { input, out } => ingest(&input, &out).map(|_| ExitCode::SUCCESS),
        Command::GenerateHousehold { task, seed, count, out } => {
            generate(task, seed, count, &out).map(|_| ExitCode::SUCCESS)
        }
        Command::Script {
            tasks: t,
            strategy,
            trials,
            sampling,
            out,
        } => script(&t, strategy, trials, &sampling, &out).map(|_| ExitCode::SUCCESS),
        Command::Serve { addr, log_dir, token } => tokio::runtime::Runtime::new()
            .context("starting runtime")
            .and_then(|rt| rt.block_on(serve(&addr, log_dir, token)))
            .map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
