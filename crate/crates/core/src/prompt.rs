//! Classification prompt assembly.
//!
//! Layout: instruction, technique definition, the few-shot examples separated
//! by `###` lines, then the email under analysis.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Email, EmailId, LabeledExample};
use crate::exemplar::{ExamplePool, BODY_PREFIX, RECORD_SEPARATOR, SUBJECT_PREFIX};
use crate::taxonomy::{Technique, TechniqueId};

pub const INSTRUCTION: &str = "You are a classifier that responds only with 'YES' or 'NO'. You help cybersecurity researchers to classify manipulation techniques in emails.";
pub const EXAMPLES_HEADER: &str = "Example :";
pub const QUERY_HEADER: &str = "Content to analyze:";
pub const ATTACHMENTS_PREFIX: &str = "Attachments:";

/// Examples placed in each prompt unless configured otherwise.
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("example pool for `{0}` is empty")]
    EmptyPool(TechniqueId),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no examples supplied")]
    EmptyExamples,
}

/// Lowercase hex SHA-256 of the UTF-8 text.
pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub digest: String,
    pub technique: TechniqueId,
    pub email: EmailId,
    pub example_ids: Vec<EmailId>,
}

#[derive(Debug, Clone)]
pub struct Selection<'a> {
    pub examples: Vec<&'a LabeledExample>,
    /// The pool held fewer than `k` examples.
    pub short: bool,
}

/// Picks `min(k, |pool|)` examples; real ones are used before synthetic ones
/// and the order within each group is a seeded shuffle.
pub fn select_examples(pool: &ExamplePool, k: usize, seed: u64) -> Result<Selection<'_>, PromptError> {
    if k == 0 {
        return Err(PromptError::InvalidK);
    }
    if pool.is_empty() {
        return Err(PromptError::EmptyPool(pool.technique.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut real: Vec<&LabeledExample> = pool.real().iter().collect();
    let mut synthetic: Vec<&LabeledExample> = pool.synthetic().iter().collect();
    real.shuffle(&mut rng);
    synthetic.shuffle(&mut rng);
    let short = pool.len() < k;
    if short {
        tracing::warn!(technique = %pool.technique, pool = pool.len(), k, "short example pool");
    }
    let examples = real.into_iter().chain(synthetic).take(k).collect();
    Ok(Selection { examples, short })
}

fn field(out: &mut String, prefix: &str, value: &str) {
    out.push_str(prefix);
    if !value.is_empty() {
        out.push(' ');
        out.push_str(value);
    }
    out.push('\n');
}

fn email_block(out: &mut String, email: &Email) {
    field(out, SUBJECT_PREFIX, &email.subject);
    field(out, BODY_PREFIX, &email.body);
    field(out, ATTACHMENTS_PREFIX, &email.attachments.join(", "));
}

pub fn build_classification_prompt(
    technique: &Technique,
    examples: &[&Email],
    email: &Email,
) -> Result<PromptText, PromptError> {
    if examples.is_empty() {
        return Err(PromptError::EmptyExamples);
    }
    let mut text = String::new();
    text.push_str(INSTRUCTION);
    text.push_str("\n\n");
    text.push_str(technique.definition.trim());
    text.push_str("\n\n");
    text.push_str(EXAMPLES_HEADER);
    text.push_str("\n\n");
    for ex in examples {
        email_block(&mut text, ex);
        text.push('\n');
        text.push_str(RECORD_SEPARATOR);
        text.push_str("\n\n");
    }
    text.push_str(QUERY_HEADER);
    text.push_str("\n\n");
    email_block(&mut text, email);

    Ok(PromptText {
        digest: text_digest(&text),
        text,
        technique: technique.id.clone(),
        email: email.id.clone(),
        example_ids: examples.iter().map(|e| e.id.clone()).collect(),
    })
}
