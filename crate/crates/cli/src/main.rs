use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use manipscan_core::annotation::AnnotationStore;
use manipscan_core::corpus::{ingest_email, load_corpus, Corpus, CorpusName};
use manipscan_core::exemplar::{augment, build_pool, persist_synthetic, DEFAULT_MIN_EXAMPLES};
use manipscan_core::llm::{load_models, provider_for, LimiterRegistry, LlmClient, ModelConfig, ResponseCache};
use manipscan_core::metrics::{GroundTruth, RefusalScoring, DEFAULT_MIN_SUPPORT};
use manipscan_core::prompt::{build_classification_prompt, select_examples, DEFAULT_K};
use manipscan_core::report::{build_bundle, render, BundleOptions};
use manipscan_core::runner::{self, Clock, RunOptions, RunPlan, SystemClock, DEFAULT_PARALLELISM};
use manipscan_core::taxonomy::{load_taxonomy, TechniqueId, TechniqueRegistry};
use manipscan_service::{load_state, ServiceConfig, TOKEN_ENV};

#[derive(Parser)]
#[command(name = "manipscan", version, about = "Classify manipulation techniques in phishing emails")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every test email against every technique and model.
    Run(RunArgs),
    /// Generate synthetic training examples for techniques below the minimum.
    Augment(AugmentArgs),
    /// Compute the metric tables from a verdict log.
    Report(ReportArgs),
    /// Start the review service.
    Serve(ServeArgs),
    /// Print the classification prompt for one email.
    Prompt(PromptArgs),
    /// Parse .eml files and print them as JSON.
    Ingest { files: Vec<PathBuf> },
}

#[derive(clap::Args)]
struct CorpusArgs {
    /// Directory of .eml files of the test corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// JSON-lines label file; defaults to labels.jsonl inside the corpus.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Technique registry (TOML); the built-in taxonomy when omitted.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RunArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Directory of labeled training emails the examples are drawn from.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Verdict log; resumed when it exists.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated technique ids; all techniques when omitted.
    #[arg(long, value_delimiter = ',')]
    techniques: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_PARALLELISM)]
    parallelism: usize,
    /// Persistent response cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_EXAMPLES)]
    min_examples: usize,
}

#[derive(clap::Args)]
struct AugmentArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    models: PathBuf,
    /// Model used for generation; the first one in the file when omitted.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_delimiter = ',')]
    techniques: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_MIN_EXAMPLES)]
    min_examples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scoring {
    AsMiss,
    Exclude,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    verdicts: PathBuf,
    /// Annotation log whose live entries override corpus labels.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Scoring::AsMiss)]
    scoring: Scoring,
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    min_support: usize,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    verdicts: PathBuf,
    /// Defaults to `<verdicts>.annotations.jsonl`.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Training corpus, browsable as `?corpus=train`.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

#[derive(clap::Args)]
struct PromptArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    technique: String,
    /// The email to classify.
    #[arg(long)]
    email: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn registry(path: Option<&Path>) -> Result<TechniqueRegistry> {
    Ok(match path {
        Some(p) => load_taxonomy(p)?,
        None => TechniqueRegistry::builtin(),
    })
}

fn labels_for(dir: &Path, explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_owned)
        .or_else(|| Some(dir.join("labels.jsonl")).filter(|p| p.exists()))
}

fn load(dir: &Path, labels: Option<&Path>, reg: &TechniqueRegistry, name: CorpusName) -> Result<Corpus> {
    let labels = labels_for(dir, labels);
    load_corpus(dir, labels.as_deref(), reg, name).with_context(|| format!("loading corpus {}", dir.display()))
}

fn select_techniques(reg: &TechniqueRegistry, wanted: &[String]) -> Result<Vec<TechniqueId>> {
    if wanted.is_empty() {
        return Ok(reg.ids());
    }
    wanted
        .iter()
        .map(|w| Ok(reg.get(w.trim())?.id.clone()))
        .collect()
}

fn clients(models: &[ModelConfig], cache: Arc<ResponseCache>) -> Result<Vec<Arc<LlmClient>>> {
    let limiters = LimiterRegistry::new();
    models
        .iter()
        .map(|m| {
            let provider = provider_for(m)?;
            let limiter = limiters.for_endpoint(&m.endpoint, m.rate_limit);
            Ok(Arc::new(LlmClient::new(m.clone(), provider, cache.clone(), limiter)))
        })
        .collect()
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let reg = registry(args.corpus.taxonomy.as_deref())?;
    let test = load(&args.corpus.corpus, args.corpus.labels.as_deref(), &reg, CorpusName::Test)?;
    let train = load(&args.train, None, &reg, CorpusName::Train)?;
    let models = load_models(&args.models)?;
    if models.is_empty() {
        bail!("{} defines no model", args.models.display());
    }
    let techniques = select_techniques(&reg, &args.techniques)?;
    let mut pools = HashMap::new();
    for t in &techniques {
        let pool = build_pool(&train, &reg, t.as_str(), args.min_examples)?;
        if pool.is_empty() {
            bail!("no training example for `{t}`; run `augment` first");
        }
        pools.insert(t.clone(), pool);
    }
    let cache = Arc::new(match &args.cache {
        Some(p) => ResponseCache::open(p).with_context(|| format!("opening cache {}", p.display()))?,
        None => ResponseCache::in_memory(),
    });
    let clients = clients(&models, cache)?;
    let plan = RunPlan {
        techniques,
        models,
        k_examples: args.k,
        seed: args.seed,
    };
    let options = RunOptions {
        parallelism: args.parallelism,
        out: Some(args.out.clone()),
        ..RunOptions::default()
    };
    let outcome = runner::run(&plan, &test, &reg, &pools, &clients, &options)?;
    eprintln!(
        "{} of {} verdicts ({} new, {} resumed, {} failed)",
        outcome.verdicts.len(),
        outcome.expected,
        outcome.executed,
        outcome.resumed,
        outcome.failed
    );
    if let Some(why) = &outcome.aborted {
        eprintln!("run aborted: {why}");
    }
    Ok(if outcome.is_complete() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn augment_cmd(args: AugmentArgs) -> Result<ExitCode> {
    let reg = registry(args.taxonomy.as_deref())?;
    let train = load(&args.train, None, &reg, CorpusName::Train)?;
    let models = load_models(&args.models)?;
    let model = match &args.model {
        Some(id) => models
            .iter()
            .find(|m| &m.model_id == id)
            .with_context(|| format!("model `{id}` not in {}", args.models.display()))?,
        None => models.first().context("no model configured")?,
    };
    let client = clients(std::slice::from_ref(model), Arc::new(ResponseCache::in_memory()))?.remove(0);
    let clock = SystemClock;
    let mut failed = 0;
    for id in select_techniques(&reg, &args.techniques)? {
        let technique = reg.get(id.as_str())?;
        match augment(&train, technique, |p| client.complete_text(p).map(|c| c.text), args.min_examples) {
            Ok(out) if out.added.is_empty() => {}
            Ok(out) => {
                let files = persist_synthetic(&args.train, &out.added, client.model_id(), &clock.now())?;
                eprintln!("{id}: {} synthetic example(s) written", files.len());
            }
            Err(e) => {
                eprintln!("{id}: {e}");
                failed += 1;
            }
        }
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let reg = registry(args.corpus.taxonomy.as_deref())?;
    let test = load(&args.corpus.corpus, args.corpus.labels.as_deref(), &reg, CorpusName::Test)?;
    let (verdicts, loaded) = runner::load(&args.verdicts)?;
    if loaded.skipped > 0 {
        eprintln!("skipped {} corrupt verdict record(s)", loaded.skipped);
    }
    let mut truth = GroundTruth::from_corpus(&test);
    let mut verified = false;
    if let Some(path) = &args.annotations {
        let (store, _) = AnnotationStore::open(path)?;
        store.apply(&mut truth);
        verified = store.live_count() > 0;
    }
    let present: std::collections::BTreeSet<_> = verdicts.iter().map(|v| v.technique.clone()).collect();
    let techniques: Vec<TechniqueId> = reg.ids().into_iter().filter(|t| present.contains(t)).collect();
    let options = BundleOptions {
        scoring: match args.scoring {
            Scoring::AsMiss => RefusalScoring::AsMiss,
            Scoring::Exclude => RefusalScoring::Exclude,
        },
        min_support: args.min_support,
        verified,
    };
    let bundle = build_bundle(&verdicts, &truth, &techniques, options)?;
    for f in render(&bundle, &args.out)? {
        println!("{}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    let annotations = args
        .annotations
        .unwrap_or_else(|| PathBuf::from(format!("{}.annotations.jsonl", args.verdicts.display())));
    let state = load_state(ServiceConfig {
        taxonomy: args.corpus.taxonomy,
        corpus: args.corpus.corpus,
        labels: args.corpus.labels,
        train: args.train,
        verdicts: args.verdicts,
        annotations,
        token: std::env::var(TOKEN_ENV).ok(),
    })?;
    let addr = SocketAddr::new(args.host, args.port);
    tokio::runtime::Runtime::new()?.block_on(manipscan_service::serve(state, addr))?;
    Ok(ExitCode::SUCCESS)
}

fn prompt(args: PromptArgs) -> Result<ExitCode> {
    let reg = registry(args.taxonomy.as_deref())?;
    let train = load(&args.train, None, &reg, CorpusName::Train)?;
    let technique = reg.get(&args.technique)?;
    let pool = build_pool(&train, &reg, technique.id.as_str(), DEFAULT_MIN_EXAMPLES)?;
    let selection = select_examples(&pool, args.k, args.seed)?;
    let examples: Vec<_> = selection.examples.iter().map(|e| &e.email).collect();
    let raw = std::fs::read(&args.email).with_context(|| format!("reading {}", args.email.display()))?;
    let email = ingest_email(&raw)?;
    let prompt = build_classification_prompt(technique, &examples, &email)?;
    print!("{}", prompt.text);
    Ok(ExitCode::SUCCESS)
}

fn ingest(files: Vec<PathBuf>) -> Result<ExitCode> {
    for f in files {
        let raw = std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        let email = ingest_email(&raw).with_context(|| f.display().to_string())?;
        println!("{}", serde_json::to_string(&email)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
        Command::Prompt(a) => prompt(a),
        Command::Ingest { files } => ingest(files),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
