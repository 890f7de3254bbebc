mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tracing::{info, warn};

use assomem::corpus::{
    load_qa_set, parse_memory_bank, parse_timestamp, BankFormat, MemoryBank, QuestionType,
    BANK_SCHEMA_VERSION,
};
use assomem::eval::{export_finetune_dataset, run_benchmark, to_jsonl, FinetuneStrategy, REPORT_SCHEMA_VERSION};
use assomem::fusion::{fit_fusion, load_model, save_model, FusionModel, MODEL_SCHEMA_VERSION};
use assomem::graph::{build_memory_graph, load_graph, save_graph, MemoryGraph, GRAPH_SCHEMA_VERSION};
use assomem::providers::{build_annotator, build_embedder, build_temporal, TemporalEmbedder, TextEmbedder};
use assomem::retrieval::{training_examples, FusedCandidate, RetrievalFlag, RetrievalResult, Retriever, WeightPolicy};

use config::AppConfig;

#[derive(Parser)]
#[command(name = "assomem", about = "Associative memory graph retrieval over conversational memory banks")]
#[command(disable_version_flag = true)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set graph.gamma=0.75`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Recorded in the logs only; every stage is deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the tool version and the schema versions of persisted files.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the memory graph from a memory bank.
    Build(BuildArgs),
    /// Fit fusion weights from a labelled QA set.
    FitFusion(FitArgs),
    /// Retrieve evidence for one question.
    Query(QueryArgs),
    /// Score retrieval against a labelled QA set.
    Eval(EvalArgs),
    /// Export a denoising fine-tuning dataset as JSON lines.
    ExportFinetune(ExportArgs),
}

#[derive(Args)]
struct BankArgs {
    /// Memory bank file.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Bank layout: auto, longmemeval, meetingqa or canonical.
    #[arg(long, default_value = "auto")]
    format: String,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    bank: BankArgs,
    /// Graph output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the bank in canonical form here.
    #[arg(long)]
    save_bank: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Training QA set.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Model output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Softmax temperature; overrides `fusion.T`.
    #[arg(long)]
    temperature: Option<f64>,
    /// Smoothing count; overrides `fusion.alpha`.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    question: String,
    /// Date the question is asked.
    #[arg(long)]
    date: String,
    /// Question type, e.g. temporal-reasoning.
    #[arg(long = "type")]
    question_type: Option<String>,
    /// Number of evidence utterances (defaults to `retrieval.k_evidence`).
    #[arg(long)]
    k: Option<usize>,
    /// Include per-dimension scores and fusion weights.
    #[arg(long)]
    explain: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    bank: BankArgs,
    /// Labelled QA set.
    #[arg(long)]
    qa: PathBuf,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,3,6,10")]
    k: Vec<usize>,
    /// Score with a fixed baseline instead of the fitted weights.
    #[arg(long, value_parser = ["relevance-only"])]
    baseline: Option<String>,
    /// Report output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Labelled QA set.
    #[arg(long)]
    qa: PathBuf,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// mixed or negative_only.
    #[arg(long, default_value = "mixed")]
    strategy: String,
    /// Memories per example (defaults to `retrieval.k_evidence`).
    #[arg(long)]
    context_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ASSOMEM_LOG").unwrap_or_else(|_| "info".into()),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let transport = e.chain().any(|c| c.downcast_ref::<assomem::Error>().is_some_and(|e| e.is_transport()));
            ExitCode::from(if transport { 2 } else { 1 })
        }
    }
}

/// The error chain on one line. Library errors already print their source,
/// so links whose text is contained in what came before are dropped.
fn describe(e: &anyhow::Error) -> String {
    let mut line = String::new();
    for link in e.chain() {
        let text = link.to_string();
        if line.contains(&text) {
            continue;
        }
        if !line.is_empty() {
            line.push_str(": ");
        }
        line.push_str(&text);
    }
    line
}

fn run(cli: Cli) -> Result<()> {
    if cli.version {
        println!("assomem {}", env!("CARGO_PKG_VERSION"));
        println!("bank schema {BANK_SCHEMA_VERSION}");
        println!("graph schema {GRAPH_SCHEMA_VERSION}");
        println!("model schema {MODEL_SCHEMA_VERSION}");
        println!("report schema {REPORT_SCHEMA_VERSION}");
        return Ok(());
    }
    let Some(command) = cli.command else {
        use clap::CommandFactory;
        eprint!("{}", Cli::command().render_help());
        bail!("a subcommand is required");
    };
    let mut config = AppConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Command::FitFusion(args) = &command {
        if let Some(t) = args.temperature {
            config.fusion.temperature = t;
        }
        if let Some(a) = args.alpha {
            config.fusion.alpha = a;
        }
        config.validate()?;
    }
    info!(seed = ?cli.seed, config = %serde_json::to_string(&config)?, "effective configuration");

    match command {
        Command::Build(args) => build(&config, args),
        Command::FitFusion(args) => fit(&config, args),
        Command::Query(args) => query(&config, args),
        Command::Eval(args) => eval(&config, args),
        Command::ExportFinetune(args) => export(&config, args),
    }
}

fn pick<'a>(flag: &'a Option<PathBuf>, configured: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    flag.as_deref()
        .or(configured.as_deref())
        .ok_or_else(|| anyhow!("no {what} given (pass --{what} or set paths.{what})"))
}

fn read_bank(config: &AppConfig, args: &BankArgs) -> Result<MemoryBank> {
    let path = pick(&args.bank, &config.paths.bank, "bank")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let format = match args.format.as_str() {
        "auto" => detect_format(&text),
        other => other.parse()?,
    };
    info!(path = %path.display(), ?format, "loading memory bank");
    Ok(parse_memory_bank(&text, format, &path.display().to_string())?)
}

/// Canonical banks carry a schema number, MeetingQA files a `meetings`
/// list; anything else is read as LongMemEval records.
fn detect_format(text: &str) -> BankFormat {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(serde_json::Value::Object(o)) if o.contains_key("schema") && o.contains_key("sessions") => {
            BankFormat::Canonical
        }
        Ok(serde_json::Value::Object(o)) if o.contains_key("meetings") => BankFormat::MeetingQa,
        _ => BankFormat::LongMemEval,
    }
}

fn write_output(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
            info!(path = %path.display(), "wrote output");
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body.as_bytes())?;
            if !body.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn build(config: &AppConfig, args: BuildArgs) -> Result<()> {
    let bank = read_bank(config, &args.bank)?;
    if let Some(path) = &args.save_bank {
        bank.save_canonical(path)?;
    }
    let embedder = build_embedder(&config.provider.embedding)?;
    let annotator = build_annotator(&config.provider.clue, &bank)?;
    let graph = build_memory_graph(&bank, annotator.as_ref(), embedder.as_ref(), &config.graph)?;
    info!(
        sessions = bank.sessions.len(),
        utterances = graph.utterance_count(),
        clues = graph.clue_count(),
        edges = graph.edges().len(),
        "built memory graph"
    );
    match args.out.as_deref().or(config.paths.graph.as_deref()) {
        Some(path) => {
            save_graph(&graph, path)?;
            info!(path = %path.display(), "wrote graph");
            Ok(())
        }
        None => write_output(None, &graph.to_canonical_json()),
    }
}

struct Loaded {
    graph: MemoryGraph,
    model: FusionModel,
    embedder: std::sync::Arc<dyn TextEmbedder>,
    temporal: std::sync::Arc<dyn TemporalEmbedder>,
}

impl Loaded {
    fn open(config: &AppConfig, graph: &Option<PathBuf>, model: Option<&Option<PathBuf>>) -> Result<Loaded> {
        let graph_path = pick(graph, &config.paths.graph, "graph")?;
        let graph = load_graph(graph_path)?;
        let model = match model {
            Some(flag) => load_model(pick(flag, &config.paths.model, "model")?)?,
            None => FusionModel::uniform(),
        };
        Ok(Loaded {
            graph,
            model,
            embedder: build_embedder(&config.provider.embedding)?,
            temporal: build_temporal(&config.provider.temporal)?,
        })
    }

    fn retriever(&self, config: &AppConfig) -> Result<Retriever<'_>> {
        Ok(Retriever::new(
            &self.graph,
            &self.model,
            self.embedder.as_ref(),
            self.temporal.as_ref(),
            config.ranker,
            config.retrieval,
        )?)
    }
}

fn fit(config: &AppConfig, args: FitArgs) -> Result<()> {
    let loaded = Loaded::open(config, &args.graph, None)?;
    let records = load_qa_set(&args.train, &loaded.graph)?;
    let examples = training_examples(&loaded.retriever(config)?, &records)?;
    info!(records = records.len(), examples = examples.len(), "collected training examples");
    let model = fit_fusion(&examples, &config.fusion)?;
    for name in model.strata.keys() {
        let qt = QuestionType::parse(name);
        info!(stratum = %name, cmi = ?model.cmi(qt), "fitted stratum");
    }
    match args.out.as_deref().or(config.paths.model.as_deref()) {
        Some(path) => {
            save_model(&model, path)?;
            info!(path = %path.display(), "wrote model");
            Ok(())
        }
        None => write_output(None, &model.to_canonical_json()),
    }
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    parse_timestamp(s)
        .map(|t| t.date_naive())
        .ok_or_else(|| anyhow!("cannot read `{s}` as a date"))
}

#[derive(Serialize)]
struct Brief<'a> {
    utterance_id: &'a str,
    timestamp: chrono::DateTime<chrono::Utc>,
    score: f64,
    text: &'a str,
}

#[derive(Serialize)]
struct QueryOutput<'a, E: Serialize> {
    query: &'a assomem::retrieval::QuerySummary,
    evidence: Vec<E>,
    clue_trace: &'a [String],
    candidate_count: usize,
    flags: &'a BTreeSet<RetrievalFlag>,
}

#[derive(Serialize)]
struct Explained<'a> {
    #[serde(flatten)]
    candidate: &'a FusedCandidate,
    text: &'a str,
}

fn query(config: &AppConfig, args: QueryArgs) -> Result<()> {
    let loaded = Loaded::open(config, &args.graph, Some(&args.model))?;
    let retriever = loaded.retriever(config)?;
    let date = parse_date(&args.date)?;
    let qt = args.question_type.as_deref().map_or(QuestionType::Unknown, QuestionType::parse);
    let q = retriever.query(&args.question, date, qt)?;
    let result = retriever.retrieve_top(&q, args.k.unwrap_or(config.retrieval.k_evidence))?;
    let text_of = |id: &str| loaded.graph.utterance(id).map_or("", |u| u.utterance.text.as_str());
    let body = if args.explain {
        serde_json::to_string_pretty(&shape(&result, |c| Explained { candidate: c, text: text_of(&c.utterance_id) }))?
    } else {
        serde_json::to_string_pretty(&shape(&result, |c| Brief {
            utterance_id: &c.utterance_id,
            timestamp: c.timestamp,
            score: c.score,
            text: text_of(&c.utterance_id),
        }))?
    };
    write_output(args.out.as_deref(), &body)
}

fn shape<'a, E: Serialize>(result: &'a RetrievalResult, f: impl Fn(&'a FusedCandidate) -> E) -> QueryOutput<'a, E> {
    QueryOutput {
        query: &result.query,
        evidence: result.evidence.iter().map(f).collect(),
        clue_trace: &result.clue_trace,
        candidate_count: result.candidate_count,
        flags: &result.flags,
    }
}

fn eval(config: &AppConfig, args: EvalArgs) -> Result<()> {
    let bank = read_bank(config, &args.bank)?;
    let loaded = Loaded::open(config, &args.graph, Some(&args.model))?;
    let records = load_qa_set(&args.qa, &bank)?;
    let mut retriever = loaded.retriever(config)?;
    if args.baseline.is_some() {
        retriever = retriever.with_policy(WeightPolicy::relevance_only());
    }
    let (report, _) = run_benchmark(&bank, &records, &retriever, &args.k)?;
    if !report.skipped.is_empty() {
        warn!(skipped = ?report.skipped, "records without positive labels were not scored");
    }
    eprint!("{}", report.to_table());
    write_output(args.out.as_deref().or(config.paths.output.as_deref()), &report.to_json())
}

fn export(config: &AppConfig, args: ExportArgs) -> Result<()> {
    let strategy: FinetuneStrategy = args.strategy.parse()?;
    let loaded = Loaded::open(config, &args.graph, Some(&args.model))?;
    let records = load_qa_set(&args.qa, &loaded.graph)?;
    let retriever = loaded.retriever(config)?;
    // Keep every candidate so negative-only contexts can skip past positives.
    let depth = loaded.graph.utterance_count().max(1);
    let mut results = BTreeMap::new();
    for r in &records {
        let q = retriever.query(&r.question, r.question_date, r.question_type)?;
        results.insert(r.id.clone(), retriever.retrieve_top(&q, depth)?);
    }
    let size = args.context_size.unwrap_or(config.retrieval.k_evidence);
    let examples = export_finetune_dataset(&records, &results, &loaded.graph, strategy, size)?;
    info!(records = records.len(), examples = examples.len(), ?strategy, "exported fine-tuning examples");
    write_output(args.out.as_deref().or(config.paths.output.as_deref()), &to_jsonl(&examples))
}
