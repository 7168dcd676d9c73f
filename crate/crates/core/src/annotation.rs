//! Expert annotations over machine verdicts, kept as an append-only log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmailId;
use crate::llm::{Decision, Verdict};
use crate::metrics::GroundTruth;
use crate::prompt::text_digest;
use crate::runner::LoadReport;
use crate::taxonomy::TechniqueId;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("reviewer must not be empty")]
    EmptyReviewer,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HumanDecision {
    Present,
    Absent,
}

impl HumanDecision {
    pub fn is_present(self) -> bool {
        self == HumanDecision::Present
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub email: EmailId,
    pub technique: TechniqueId,
    pub human_decision: HumanDecision,
    pub reviewer: String,
    /// Digest of the verdict the reviewer looked at.
    #[serde(default)]
    pub basis: Option<String>,
    pub timestamp: String,
}

impl Annotation {
    fn same_judgement(&self, other: &Annotation) -> bool {
        self.human_decision == other.human_decision && self.reviewer == other.reviewer && self.basis == other.basis
    }
}

/// Identifies a verdict independently of when it was produced.
pub fn verdict_digest(v: &Verdict) -> String {
    text_digest(&format!(
        "{}\n{}\n{}\n{}\n{}",
        v.model_id, v.email, v.technique, v.decision, v.prompt_digest
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    Confirmed,
    Overridden,
}

/// A refused verdict resolved by a human counts as overridden.
pub fn review_status(machine: Decision, live: Option<&Annotation>) -> ReviewStatus {
    match (machine, live.map(|a| a.human_decision)) {
        (_, None) => ReviewStatus::Pending,
        (Decision::Yes, Some(HumanDecision::Present)) | (Decision::No, Some(HumanDecision::Absent)) => {
            ReviewStatus::Confirmed
        }
        _ => ReviewStatus::Overridden,
    }
}

/// Full history plus the live (latest) annotation per (email, technique).
#[derive(Debug, Default)]
pub struct AnnotationStore {
    path: Option<PathBuf>,
    file: Option<File>,
    history: Vec<Annotation>,
    live: BTreeMap<(EmailId, TechniqueId), usize>,
}

impl AnnotationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens or creates a log; unreadable lines are skipped and counted.
    pub fn open(path: &Path) -> Result<(Self, LoadReport), AnnotationError> {
        let io = |source| AnnotationError::Io {
            path: path.to_owned(),
            source,
        };
        let mut store = AnnotationStore::default();
        let mut report = LoadReport::default();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Annotation>(&line) {
                    Ok(a) => {
                        store.push(a);
                        report.loaded += 1;
                    }
                    Err(e) => {
                        tracing::warn!(path = %path.display(), line = n + 1, error = %e, "skipping corrupt annotation");
                        report.skipped += 1;
                    }
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if report.skipped > 0 {
            file.write_all(b"\n").map_err(io)?;
        }
        store.path = Some(path.to_owned());
        store.file = Some(file);
        Ok((store, report))
    }

    fn push(&mut self, a: Annotation) {
        self.live.insert((a.email.clone(), a.technique.clone()), self.history.len());
        self.history.push(a);
    }

    /// Stores `a` unless it repeats the live judgement for its pair, in which
    /// case the live annotation is returned unchanged. The flag tells which.
    pub fn record(&mut self, a: Annotation) -> Result<(Annotation, bool), AnnotationError> {
        if a.reviewer.trim().is_empty() {
            return Err(AnnotationError::EmptyReviewer);
        }
        if let Some(current) = self.live(&a.email, &a.technique) {
            if current.same_judgement(&a) {
                return Ok((current.clone(), false));
            }
        }
        if let (Some(file), Some(path)) = (&mut self.file, &self.path) {
            let mut line = serde_json::to_vec(&a).expect("annotation serializes");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.flush())
                .map_err(|source| AnnotationError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        self.push(a.clone());
        Ok((a, true))
    }

    pub fn live(&self, email: &EmailId, technique: &TechniqueId) -> Option<&Annotation> {
        self.live
            .get(&(email.clone(), technique.clone()))
            .map(|&i| &self.history[i])
    }

    pub fn live_annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.live.values().map(|&i| &self.history[i])
    }

    pub fn history(&self) -> &[Annotation] {
        &self.history
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Overrides `truth` pointwise with the live annotations.
    pub fn apply(&self, truth: &mut GroundTruth) {
        for a in self.live_annotations() {
            truth.set(&a.email, &a.technique, a.human_decision.is_present());
        }
    }
}
