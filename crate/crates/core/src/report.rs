//! Report bundle: human tables at two decimals plus one full-precision
//! JSON record that round-trips.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    compare_models, cooccurrence_matrix, evaluate, prevalence, technique_confusion_matrix, weighted_accuracy,
    GroundTruth, Matrix, MetricsError, MetricsRow, ModelRank, Prevalence, RefusalScoring,
};
use crate::runner::VerdictSet;
use crate::taxonomy::TechniqueId;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const COOCCURRENCE_FILE: &str = "cooccurrence.csv";
pub const PREVALENCE_FILE: &str = "prevalence.csv";
pub const MODELS_FILE: &str = "models.csv";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("invalid bundle record {path}: {source}")]
    Meta {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub plan_digest: String,
    pub model_ids: Vec<String>,
    pub techniques: Vec<TechniqueId>,
    pub emails: usize,
    pub scoring: RefusalScoring,
    pub min_support: usize,
    pub verified: bool,
    /// Earliest and latest verdict timestamps.
    pub first_verdict: Option<String>,
    pub last_verdict: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model_id: String,
    pub rows: Vec<MetricsRow>,
    pub prevalence: Vec<Prevalence>,
    pub confusion: Matrix,
    /// `None` when no row reaches the minimum support.
    pub weighted_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub meta: RunMeta,
    pub models: Vec<ModelReport>,
    pub cooccurrence: Matrix,
    pub comparison: Vec<ModelRank>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleOptions {
    pub scoring: RefusalScoring,
    pub min_support: usize,
    /// Ground truth includes expert annotations.
    pub verified: bool,
}

impl Default for BundleOptions {
    fn default() -> Self {
        BundleOptions {
            scoring: RefusalScoring::default(),
            min_support: crate::metrics::DEFAULT_MIN_SUPPORT,
            verified: false,
        }
    }
}

/// Evaluates every model present in `verdicts`.
pub fn build_bundle(
    verdicts: &VerdictSet,
    truth: &GroundTruth,
    techniques: &[TechniqueId],
    options: BundleOptions,
) -> Result<ReportBundle, ReportError> {
    let model_ids = verdicts.model_ids();
    let mut models = Vec::with_capacity(model_ids.len());
    for model_id in &model_ids {
        let rows = evaluate(verdicts, truth, techniques, model_id, options.scoring)?;
        let confusion = technique_confusion_matrix(verdicts, truth, techniques, model_id)?;
        let weighted_accuracy = match weighted_accuracy(&rows, options.min_support) {
            Ok(v) => Some(v),
            Err(MetricsError::NoQualifyingRows(_)) => None,
            Err(e) => return Err(e.into()),
        };
        models.push(ModelReport {
            model_id: model_id.clone(),
            prevalence: prevalence(&rows),
            rows,
            confusion,
            weighted_accuracy,
        });
    }
    let scores: Vec<(String, f64)> = models
        .iter()
        .filter_map(|m| m.weighted_accuracy.map(|a| (m.model_id.clone(), a)))
        .collect();
    let timestamps: Vec<&str> = verdicts.iter().map(|v| v.timestamp.as_str()).collect();
    Ok(ReportBundle {
        meta: RunMeta {
            plan_digest: verdicts.plan_digest.clone().unwrap_or_default(),
            model_ids,
            techniques: techniques.to_vec(),
            emails: truth.len(),
            scoring: options.scoring,
            min_support: options.min_support,
            verified: options.verified,
            first_verdict: timestamps.iter().min().map(|s| s.to_string()),
            last_verdict: timestamps.iter().max().map(|s| s.to_string()),
        },
        models,
        cooccurrence: cooccurrence_matrix(truth, techniques),
        comparison: compare_models(&scores),
    })
}

fn f2(x: f64) -> String {
    format!("{x:.2}")
}

struct Table {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &[String]) -> Result<Self, ReportError> {
        let path = dir.join(name);
        let writer = csv::Writer::from_path(&path).map_err(|source| ReportError::Csv {
            path: path.clone(),
            source,
        })?;
        let mut t = Table { path, writer };
        t.row(header)?;
        Ok(t)
    }

    fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<(), ReportError> {
        self.writer.write_record(fields).map_err(|source| ReportError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    fn finish(mut self) -> Result<PathBuf, ReportError> {
        self.writer.flush().map_err(|source| ReportError::Io {
            path: self.path.clone(),
            source,
        })?;
        Ok(self.path)
    }
}

fn header(fixed: &[&str], rest: &[String]) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).chain(rest.iter().cloned()).collect()
}

/// Writes the five tables and `meta.json`; returns the written paths.
pub fn render(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let digest = bundle.meta.plan_digest.as_str();
    let mut written = Vec::new();

    let mut t = Table::create(
        dir,
        METRICS_FILE,
        &header(
            &[
                "plan_digest", "model", "technique", "tp", "tn", "fp", "fn", "accuracy", "recall", "precision", "f1",
                "refusals", "support",
            ],
            &[],
        ),
    )?;
    for m in &bundle.models {
        for r in &m.rows {
            let c = &r.counts;
            t.row(&[
                digest.to_owned(),
                m.model_id.clone(),
                r.technique.to_string(),
                c.tp.to_string(),
                c.tn.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                f2(r.accuracy),
                f2(r.recall),
                f2(r.precision),
                f2(r.f1),
                c.refusals.to_string(),
                r.support.to_string(),
            ])?;
        }
    }
    written.push(t.finish()?);

    let columns = match bundle.models.first() {
        Some(m) => m.confusion.columns.clone(),
        None => {
            let mut c: Vec<String> = bundle.meta.techniques.iter().map(|t| t.to_string()).collect();
            c.push(crate::metrics::NONE_COLUMN.to_owned());
            c
        }
    };
    let mut t = Table::create(dir, CONFUSION_FILE, &header(&["plan_digest", "model", "technique"], &columns))?;
    for m in &bundle.models {
        for (i, id) in m.confusion.rows.iter().enumerate() {
            let mut rec = vec![digest.to_owned(), m.model_id.clone(), id.clone()];
            rec.extend(m.confusion.row(i).iter().map(|v| f2(*v)));
            t.row(&rec)?;
        }
    }
    written.push(t.finish()?);

    let co = &bundle.cooccurrence;
    let mut t = Table::create(dir, COOCCURRENCE_FILE, &header(&["plan_digest", "technique"], &co.columns))?;
    for (i, id) in co.rows.iter().enumerate() {
        let mut rec = vec![digest.to_owned(), id.clone()];
        rec.extend(co.row(i).iter().map(|v| f2(*v)));
        t.row(&rec)?;
    }
    written.push(t.finish()?);

    let mut t = Table::create(
        dir,
        PREVALENCE_FILE,
        &header(&["plan_digest", "model", "technique", "support", "emails", "refusals", "usage_rate"], &[]),
    )?;
    for m in &bundle.models {
        for p in &m.prevalence {
            t.row(&[
                digest.to_owned(),
                m.model_id.clone(),
                p.technique.to_string(),
                p.support.to_string(),
                p.emails.to_string(),
                p.refusals.to_string(),
                f2(p.usage_rate),
            ])?;
        }
    }
    written.push(t.finish()?);

    let mut t = Table::create(
        dir,
        MODELS_FILE,
        &header(&["plan_digest", "rank", "model", "weighted_accuracy", "tied"], &[]),
    )?;
    for r in &bundle.comparison {
        t.row(&[
            digest.to_owned(),
            r.rank.to_string(),
            r.model_id.clone(),
            f2(r.weighted_accuracy),
            r.tied.to_string(),
        ])?;
    }
    written.push(t.finish()?);

    let meta = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(bundle).expect("bundle serializes");
    fs::write(&meta, json + "\n").map_err(|source| ReportError::Io {
        path: meta.clone(),
        source,
    })?;
    written.push(meta);
    Ok(written)
}

/// Reads the full-precision record written by [`render`].
pub fn load_bundle(dir: &Path) -> Result<ReportBundle, ReportError> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Meta { path, source })
}
