//! Orchestration of the emails x techniques x models verdict matrix.
//!
//! Verdicts are appended to a line-delimited log as soon as they arrive, so an
//! interrupted run resumes where it stopped.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{Corpus, Email, EmailId};
use crate::exemplar::ExamplePool;
use crate::llm::{parse_verdict, Decision, LlmClient, ModelConfig, Verdict};
use crate::prompt::{build_classification_prompt, select_examples, text_digest, PromptError};
use crate::taxonomy::{TaxonomyError, TechniqueId, TechniqueRegistry};

/// Provider calls in flight at once.
pub const DEFAULT_PARALLELISM: usize = 8;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("no example pool for `{0}`")]
    MissingPool(TechniqueId),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no client for model `{0}`")]
    MissingClient(String),
    #[error("verdict log {path} belongs to plan {found}, expected {expected}")]
    PlanMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub techniques: Vec<TechniqueId>,
    pub models: Vec<ModelConfig>,
    pub k_examples: usize,
    pub seed: u64,
}

impl RunPlan {
    pub fn task_count(&self, corpus: &Corpus) -> usize {
        corpus.len() * self.techniques.len() * self.models.len()
    }

    /// Digest over everything that changes the prompts or their recipients.
    pub fn digest(&self, corpus: &Corpus) -> String {
        let doc = json!({
            "emails": corpus.email_ids(),
            "techniques": self.techniques,
            "models": self.models.iter().map(|m| json!({"id": m.model_id, "temperature": m.temperature})).collect::<Vec<_>>(),
            "k": self.k_examples,
            "seed": self.seed,
        });
        text_digest(&doc.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VerdictKey {
    pub model_id: String,
    pub technique: TechniqueId,
    pub email: EmailId,
}

impl VerdictKey {
    pub fn of(v: &Verdict) -> Self {
        VerdictKey {
            model_id: v.model_id.clone(),
            technique: v.technique.clone(),
            email: v.email.clone(),
        }
    }
}

/// At most one verdict per (email, technique, model).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerdictSet {
    pub plan_digest: Option<String>,
    verdicts: BTreeMap<VerdictKey, Verdict>,
}

impl VerdictSet {
    pub fn new(plan_digest: Option<String>) -> Self {
        VerdictSet {
            plan_digest,
            verdicts: BTreeMap::new(),
        }
    }

    /// Later verdicts for the same key replace earlier ones.
    pub fn insert(&mut self, v: Verdict) -> Option<Verdict> {
        self.verdicts.insert(VerdictKey::of(&v), v)
    }

    pub fn get(&self, email: &EmailId, technique: &TechniqueId, model_id: &str) -> Option<&Verdict> {
        self.verdicts.get(&VerdictKey {
            model_id: model_id.to_owned(),
            technique: technique.clone(),
            email: email.clone(),
        })
    }

    pub fn contains(&self, key: &VerdictKey) -> bool {
        self.verdicts.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.values()
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.verdicts.keys().map(|k| k.model_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn for_email<'a>(&'a self, email: &'a EmailId) -> impl Iterator<Item = &'a Verdict> + 'a {
        self.verdicts.values().filter(move |v| &v.email == email)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRecord {
    Plan { plan_digest: String },
    Verdict(Verdict),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: usize,
}

/// Reads a verdict log. Corrupt lines (e.g. a torn final write) are skipped.
pub fn load(path: &Path) -> Result<(VerdictSet, LoadReport), RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut set = VerdictSet::default();
    let mut report = LoadReport::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(&line) {
            Ok(LogRecord::Plan { plan_digest }) => set.plan_digest = Some(plan_digest),
            Ok(LogRecord::Verdict(v)) => {
                set.insert(v);
                report.loaded += 1;
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), line = n + 1, error = %e, "skipping corrupt verdict record");
                report.skipped += 1;
            }
        }
    }
    Ok((set, report))
}

/// Writes the whole set as a fresh log.
pub fn persist(set: &VerdictSet, path: &Path) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    if let Some(d) = &set.plan_digest {
        write_record(&mut w, &LogRecord::Plan { plan_digest: d.clone() }).map_err(io_err(path))?;
    }
    for v in set.iter() {
        write_record(&mut w, &LogRecord::Verdict(v.clone())).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_record(w: &mut impl Write, rec: &LogRecord) -> std::io::Result<()> {
    let line = serde_json::to_string(rec).expect("log record serializes");
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")
}

/// Append-only verdict log.
pub struct VerdictStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl VerdictStore {
    /// Opens the log for `plan_digest`, returning the verdicts already in it.
    pub fn open(path: &Path, plan_digest: &str) -> Result<(Self, VerdictSet, LoadReport), RunError> {
        let (mut existing, report) = if path.exists() {
            load(path)?
        } else {
            (VerdictSet::default(), LoadReport::default())
        };
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        if report.skipped > 0 {
            // terminate a torn line so the next record starts clean
            file.write_all(b"\n").map_err(io_err(path))?;
        }
        match &existing.plan_digest {
            Some(found) if found != plan_digest => {
                return Err(RunError::PlanMismatch {
                    path: path.to_owned(),
                    found: found.clone(),
                    expected: plan_digest.to_owned(),
                })
            }
            Some(_) => {}
            None => {
                write_record(
                    &mut file,
                    &LogRecord::Plan {
                        plan_digest: plan_digest.to_owned(),
                    },
                )
                .map_err(io_err(path))?;
                existing.plan_digest = Some(plan_digest.to_owned());
            }
        }
        Ok((
            VerdictStore {
                path: path.to_owned(),
                file: Mutex::new(file),
            },
            existing,
            report,
        ))
    }

    pub fn append(&self, v: &Verdict) -> Result<(), RunError> {
        let mut line = serde_json::to_vec(&LogRecord::Verdict(v.clone())).expect("verdict serializes");
        line.push(b'\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(&line).map_err(io_err(&self.path))?;
        f.flush().map_err(io_err(&self.path))
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> String;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

/// Returns the same timestamp forever; makes runs byte-reproducible.
pub struct FixedClock(pub String);

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.0.clone()
    }
}

pub struct RunOptions {
    pub parallelism: usize,
    pub clock: Arc<dyn Clock>,
    /// Verdict log; resumed when it already exists.
    pub out: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallelism: DEFAULT_PARALLELISM,
            clock: Arc::new(SystemClock),
            out: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub verdicts: VerdictSet,
    pub expected: usize,
    pub executed: usize,
    pub resumed: usize,
    pub failed: usize,
    pub aborted: Option<String>,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.aborted.is_none() && self.verdicts.len() == self.expected
    }
}

struct Task<'a> {
    technique: usize,
    email: &'a Email,
    model: usize,
}

/// Runs every missing task of `plan` over `test`.
///
/// Only a non-retryable provider error aborts the run; other failed tasks are
/// left out of the set and picked up by the next run.
pub fn run(
    plan: &RunPlan,
    test: &Corpus,
    registry: &TechniqueRegistry,
    pools: &HashMap<TechniqueId, ExamplePool>,
    clients: &[Arc<LlmClient>],
    options: &RunOptions,
) -> Result<RunOutcome, RunError> {
    let plan_digest = plan.digest(test);
    let expected = plan.task_count(test);

    let mut models = Vec::with_capacity(plan.models.len());
    for m in &plan.models {
        let client = clients
            .iter()
            .find(|c| c.model_id() == m.model_id)
            .ok_or_else(|| RunError::MissingClient(m.model_id.clone()))?;
        models.push(client.clone());
    }

    // Same examples for every email of a technique.
    let mut techniques = Vec::with_capacity(plan.techniques.len());
    for id in &plan.techniques {
        let technique = registry.get(id.as_str())?;
        let pool = pools.get(id).ok_or_else(|| RunError::MissingPool(id.clone()))?;
        let selection = select_examples(pool, plan.k_examples, plan.seed)?;
        let examples: Vec<&Email> = selection.examples.iter().map(|e| &e.email).collect();
        techniques.push((technique, examples));
    }

    let (store, existing) = match &options.out {
        Some(path) => {
            let (store, existing, report) = VerdictStore::open(path, &plan_digest)?;
            if report.skipped > 0 {
                tracing::warn!(skipped = report.skipped, "corrupt records in verdict log");
            }
            (Some(store), existing)
        }
        None => (None, VerdictSet::new(Some(plan_digest.clone()))),
    };

    let mut tasks = Vec::new();
    let mut result = VerdictSet::new(Some(plan_digest.clone()));
    let mut remaining_per_technique = vec![0usize; techniques.len()];
    for (ti, (technique, _)) in techniques.iter().enumerate() {
        for item in test.items() {
            for (mi, client) in models.iter().enumerate() {
                let key = VerdictKey {
                    model_id: client.model_id().to_owned(),
                    technique: technique.id.clone(),
                    email: item.email.id.clone(),
                };
                if let Some(v) = existing.verdicts.get(&key) {
                    result.insert(v.clone());
                } else {
                    remaining_per_technique[ti] += 1;
                    tasks.push(Task {
                        technique: ti,
                        email: &item.email,
                        model: mi,
                    });
                }
            }
        }
    }
    let resumed = result.len();
    if resumed > 0 {
        tracing::info!(resumed, remaining = tasks.len(), "resuming verdict log");
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let abort_reason: Mutex<Option<String>> = Mutex::new(None);
    let failed = AtomicUsize::new(0);
    let collected: Mutex<Vec<Verdict>> = Mutex::new(Vec::with_capacity(tasks.len()));
    let remaining: Vec<AtomicUsize> = remaining_per_technique.into_iter().map(AtomicUsize::new).collect();
    let store_error: Mutex<Option<RunError>> = Mutex::new(None);

    let workers = options.parallelism.max(1).min(tasks.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { return };
                let (technique, examples) = &techniques[task.technique];
                let client = &models[task.model];
                let prompt = match build_classification_prompt(technique, examples, task.email) {
                    Ok(p) => p,
                    Err(e) => {
                        *abort_reason.lock().unwrap() = Some(e.to_string());
                        abort.store(true, Ordering::SeqCst);
                        return;
                    }
                };
                match client.complete(&prompt) {
                    Ok(c) => {
                        let v = Verdict {
                            email: task.email.id.clone(),
                            technique: technique.id.clone(),
                            model_id: client.model_id().to_owned(),
                            decision: parse_verdict(&c.text),
                            raw_response: c.text,
                            prompt_digest: prompt.digest.clone(),
                            timestamp: options.clock.now(),
                        };
                        if let Some(store) = &store {
                            if let Err(e) = store.append(&v) {
                                store_error.lock().unwrap().get_or_insert(e);
                                abort.store(true, Ordering::SeqCst);
                                return;
                            }
                        }
                        if v.decision == Decision::Refusal {
                            tracing::debug!(email = %v.email, technique = %v.technique, "refusal");
                        }
                        collected.lock().unwrap().push(v);
                    }
                    Err(e) if e.is_fatal() => {
                        tracing::error!(error = %e, "aborting run");
                        abort_reason.lock().unwrap().get_or_insert(e.to_string());
                        abort.store(true, Ordering::SeqCst);
                        return;
                    }
                    Err(e) => {
                        tracing::warn!(email = %task.email.id, technique = %technique.id, error = %e, "task failed");
                        failed.fetch_add(1, Ordering::SeqCst);
                    }
                }
                if remaining[task.technique].fetch_sub(1, Ordering::SeqCst) == 1 {
                    tracing::info!(technique = %technique.id, "technique finished");
                }
            });
        }
    });

    if let Some(e) = store_error.into_inner().unwrap() {
        return Err(e);
    }
    let collected = collected.into_inner().unwrap();
    let executed = collected.len();
    for v in collected {
        result.insert(v);
    }
    let outcome = RunOutcome {
        verdicts: result,
        expected,
        executed,
        resumed,
        failed: failed.into_inner(),
        aborted: abort_reason.into_inner().unwrap(),
    };
    tracing::info!(
        verdicts = outcome.verdicts.len(),
        expected,
        executed,
        resumed,
        failed = outcome.failed,
        "run finished"
    );
    Ok(outcome)
}
