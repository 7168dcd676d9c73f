//! Few-shot example pools and synthetic augmentation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_email, Corpus, Email, LabeledExample, Provenance, Source, PROVENANCE_SUFFIX};
use crate::taxonomy::{TaxonomyError, Technique, TechniqueId, TechniqueRegistry};

/// Pools smaller than this are topped up with synthetic examples.
pub const DEFAULT_MIN_EXAMPLES: usize = 5;

/// Generator calls allowed per technique before giving up.
pub const GENERATION_ATTEMPTS: usize = 3;

pub const SUBJECT_PREFIX: &str = "Mail Object:";
pub const BODY_PREFIX: &str = "MLLM_TEXT:";
pub const RECORD_SEPARATOR: &str = "###";

const GENERATION_TEMPLATE: &str = "Generate 5 examples of mail using {{technique name}}. Don't include template or generic element in mail but create fictions name. Each example must be separate by '###'. Mail object is prefixed by Mail Object: and body is prefixed MLLM_TEXT:. Write all in plaintext block, not markdown (not bold or anything). Every 3 examples maximum (not each example, only if relevant), include in MLLM_TEXT an image by enclosing their short visual description between brackets.\nHere are the definition of this technique :\n{{Technique academic definition}}";

#[derive(Debug, Error)]
pub enum ExemplarError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("generation failed for `{technique}`: {got} of {needed} examples after {attempts} attempts{}", last_error.as_ref().map(|e| format!(" (last error: {e})")).unwrap_or_default())]
    GenerationFailed {
        technique: TechniqueId,
        got: usize,
        needed: usize,
        attempts: usize,
        last_error: Option<String>,
    },
    #[error("failed to write synthetic example {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Examples of one technique: real ones first, then synthetic ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePool {
    pub technique: TechniqueId,
    pub examples: Vec<LabeledExample>,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub min_count: usize,
}

impl ExamplePool {
    fn from_items<'a>(technique: TechniqueId, items: impl Iterator<Item = &'a LabeledExample>, min_count: usize) -> Self {
        let (real, synthetic): (Vec<_>, Vec<_>) = items
            .filter(|i| i.has(&technique))
            .cloned()
            .partition(|i| i.source() == Source::Real);
        let real_count = real.len();
        let synthetic_count = synthetic.len();
        let mut examples = real;
        examples.extend(synthetic);
        ExamplePool {
            technique,
            examples,
            real_count,
            synthetic_count,
            min_count,
        }
    }

    /// Examples still missing to reach `min_count`.
    pub fn deficit(&self) -> usize {
        self.min_count.saturating_sub(self.len())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn real(&self) -> &[LabeledExample] {
        &self.examples[..self.real_count]
    }

    pub fn synthetic(&self) -> &[LabeledExample] {
        &self.examples[self.real_count..]
    }

    fn push_synthetic(&mut self, email: Email) -> bool {
        if self.examples.iter().any(|e| e.email.id == email.id) {
            return false;
        }
        let mut email = email;
        email.source = Source::Synthetic;
        self.examples
            .push(LabeledExample::new(email, [self.technique.clone()]));
        self.synthetic_count += 1;
        true
    }
}

/// Collects every train example labeled with `technique`.
pub fn build_pool(
    train: &Corpus,
    registry: &TechniqueRegistry,
    technique: &str,
    min_count: usize,
) -> Result<ExamplePool, ExemplarError> {
    if min_count == 0 {
        return Err(ExemplarError::InvalidMinCount);
    }
    let t = registry.get(technique)?;
    let pool = ExamplePool::from_items(t.id.clone(), train.items().iter(), min_count);
    if pool.deficit() > 0 {
        tracing::info!(technique, real = pool.real_count, deficit = pool.deficit(), "pool below minimum");
    }
    Ok(pool)
}

pub fn build_generation_prompt(technique: &Technique) -> Result<String, ExemplarError> {
    if technique.definition.trim().is_empty() {
        return Err(TaxonomyError::EmptyDefinition(technique.id.to_string()).into());
    }
    Ok(GENERATION_TEMPLATE
        .replace("{{technique name}}", &technique.name)
        .replace("{{Technique academic definition}}", &technique.definition))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    /// Zero-based index of the record in the raw output.
    pub record: usize,
    pub reason: String,
}

impl fmt::Display for RecordFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {}", self.record, self.reason)
    }
}

/// Parsed output of one generation call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub technique: Option<TechniqueId>,
    pub raw_output: String,
    pub parsed: Vec<Email>,
    pub failures: Vec<RecordFailure>,
}

impl GenerationBatch {
    pub fn record_count(&self) -> usize {
        self.parsed.len() + self.failures.len()
    }
}

fn strip_decoration(line: &str) -> &str {
    line.trim_start().trim_start_matches(['*', '#', '_', '-', ' '])
}

fn parse_record(record: &str) -> Result<Email, String> {
    let mut subject = None;
    let mut body: Option<String> = None;
    for line in record.lines() {
        if let Some(b) = body.as_mut() {
            b.push('\n');
            b.push_str(line);
            continue;
        }
        let clean = strip_decoration(line);
        if let Some(rest) = clean.strip_prefix(SUBJECT_PREFIX) {
            subject = Some(rest.trim_start_matches(['*', '_']).trim().to_owned());
        } else if let Some(rest) = clean.strip_prefix(BODY_PREFIX) {
            body = Some(rest.trim_start_matches(['*', '_']).trim_start().to_owned());
        }
    }
    let subject = subject.ok_or_else(|| format!("missing `{SUBJECT_PREFIX}`"))?;
    let body = body.ok_or_else(|| format!("missing `{BODY_PREFIX}`"))?;
    let body = body.trim().to_owned();
    if body.is_empty() {
        return Err("empty body".into());
    }
    Ok(Email::new(subject, body, Vec::new(), Source::Synthetic))
}

/// Splits generator output on `###` lines and extracts one email per record.
///
/// Never fails as a whole: malformed records are reported individually.
pub fn parse_generation_output(raw: &str) -> GenerationBatch {
    let mut records: Vec<String> = vec![String::new()];
    for line in raw.lines() {
        if line.trim() == RECORD_SEPARATOR {
            records.push(String::new());
        } else {
            let cur = records.last_mut().unwrap();
            cur.push_str(line);
            cur.push('\n');
        }
    }
    let mut batch = GenerationBatch {
        technique: None,
        raw_output: raw.to_owned(),
        parsed: Vec::new(),
        failures: Vec::new(),
    };
    for (idx, record) in records.iter().filter(|r| !r.trim().is_empty()).enumerate() {
        match parse_record(record) {
            Ok(email) => batch.parsed.push(email),
            Err(reason) => batch.failures.push(RecordFailure { record: idx, reason }),
        }
    }
    batch
}

/// Renders an email in the generation output shape.
pub fn render_generation_record(email: &Email) -> String {
    format!("{SUBJECT_PREFIX} {}\n{BODY_PREFIX} {}", email.subject, email.body)
}

pub fn render_generation_output(emails: &[Email]) -> String {
    emails
        .iter()
        .map(render_generation_record)
        .collect::<Vec<_>>()
        .join(&format!("\n{RECORD_SEPARATOR}\n"))
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub pool: ExamplePool,
    /// Only the examples created by this call.
    pub added: Vec<LabeledExample>,
    pub batches: Vec<GenerationBatch>,
}

impl Augmented {
    pub fn calls(&self) -> usize {
        self.batches.len()
    }
}

/// Tops the pool up to `min_count` with generated single-technique examples.
///
/// `train` is only read; the returned pool is a separate structure.
pub fn augment<G, E>(
    train: &Corpus,
    technique: &Technique,
    mut generator: G,
    min_count: usize,
) -> Result<Augmented, ExemplarError>
where
    G: FnMut(&str) -> Result<String, E>,
    E: fmt::Display,
{
    if min_count == 0 {
        return Err(ExemplarError::InvalidMinCount);
    }
    let mut pool = ExamplePool::from_items(technique.id.clone(), train.items().iter(), min_count);
    let mut out = Augmented {
        added: Vec::new(),
        batches: Vec::new(),
        pool: pool.clone(),
    };
    if pool.deficit() == 0 {
        return Ok(out);
    }
    let needed = pool.deficit();
    let prompt = build_generation_prompt(technique)?;
    let mut last_error = None;
    let mut attempts = 0;
    while pool.deficit() > 0 && attempts < GENERATION_ATTEMPTS {
        attempts += 1;
        let raw = match generator(&prompt) {
            Ok(raw) => raw,
            Err(e) => {
                tracing::warn!(technique = %technique.id, attempt = attempts, error = %e, "generation call failed");
                last_error = Some(e.to_string());
                continue;
            }
        };
        let mut batch = parse_generation_output(&raw);
        batch.technique = Some(technique.id.clone());
        for f in &batch.failures {
            tracing::warn!(technique = %technique.id, %f, "unparseable generated record");
        }
        for email in &batch.parsed {
            if pool.deficit() == 0 {
                break;
            }
            if pool.push_synthetic(email.clone()) {
                out.added.push(pool.examples.last().unwrap().clone());
            }
        }
        out.batches.push(batch);
    }
    if pool.deficit() > 0 {
        return Err(ExemplarError::GenerationFailed {
            technique: technique.id.clone(),
            got: needed - pool.deficit(),
            needed,
            attempts,
            last_error,
        });
    }
    out.pool = pool;
    Ok(out)
}

/// Writes each synthetic example as `<id>.eml` plus its provenance sidecar.
pub fn persist_synthetic(
    dir: &Path,
    examples: &[LabeledExample],
    model_id: &str,
    generated_at: &str,
) -> Result<Vec<PathBuf>, ExemplarError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| ExemplarError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for ex in examples {
        let Some(technique) = ex.labels.iter().next() else { continue };
        let stem = format!("synthetic-{}", ex.email.id);
        let eml = dir.join(format!("{stem}.eml"));
        std::fs::write(&eml, render_email(&ex.email)).map_err(io(&eml))?;
        let prov = Provenance {
            technique: technique.clone(),
            generated_at: generated_at.to_owned(),
            model_id: model_id.to_owned(),
        };
        let side = dir.join(format!("{stem}{PROVENANCE_SUFFIX}"));
        let json = serde_json::to_string_pretty(&prov).expect("provenance serializes");
        std::fs::write(&side, json).map_err(io(&side))?;
        written.push(eml);
    }
    Ok(written)
}
