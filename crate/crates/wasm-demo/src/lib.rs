//! Browser bindings. Every export takes and returns JSON text; the plain
//! `*_json` functions carry the logic and are what the native tests call.

use std::collections::BTreeSet;

use manipscan_core::corpus::{EmailId, Source};
use manipscan_core::exemplar::parse_generation_output;
use manipscan_core::metrics::{
    cooccurrence_matrix, derive_scores, weighted_accuracy, Counts, GroundTruth, RefusalScoring,
};
use manipscan_core::prompt::build_classification_prompt;
use manipscan_core::taxonomy::{TechniqueId, TechniqueRegistry};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

#[derive(Deserialize)]
struct CountsRecord {
    technique: String,
    tp: usize,
    tn: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    #[serde(default)]
    refusals: usize,
    #[serde(default)]
    refusals_on_positive: usize,
}

#[derive(Serialize)]
struct ScoredRow {
    technique: String,
    tp: usize,
    tn: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    refusals: usize,
    accuracy: f64,
    recall: f64,
    precision: f64,
    f1: f64,
    support: usize,
    qualifies: bool,
}

fn parse_scoring(s: &str) -> Result<RefusalScoring, String> {
    match s {
        "" | "as_miss" => Ok(RefusalScoring::AsMiss),
        "exclude" => Ok(RefusalScoring::Exclude),
        other => Err(format!("unknown refusal scoring `{other}`")),
    }
}

/// Scores a `technique,tp,tn,fp,fn[,refusals,refusals_on_positive]` table.
pub fn score_table_json(csv_text: &str, scoring: &str, min_support: usize) -> Result<String, String> {
    let scoring = parse_scoring(scoring)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<CountsRecord>().enumerate() {
        let r = rec.map_err(|e| format!("row {}: {e}", i + 1))?;
        if r.refusals_on_positive > r.refusals {
            return Err(format!("row {}: refusals_on_positive exceeds refusals", i + 1));
        }
        let counts = Counts::new(r.tp, r.tn, r.fp, r.fn_).with_refusals(r.refusals, r.refusals_on_positive);
        rows.push((r.technique, derive_scores(TechniqueId::new("row"), counts, scoring)));
    }
    let metrics: Vec<_> = rows.iter().map(|(_, m)| m.clone()).collect();
    let awa = weighted_accuracy(&metrics, min_support).ok();
    let out: Vec<ScoredRow> = rows
        .into_iter()
        .map(|(technique, m)| ScoredRow {
            technique,
            tp: m.counts.tp,
            tn: m.counts.tn,
            fp: m.counts.fp,
            fn_: m.counts.fn_,
            refusals: m.counts.refusals,
            accuracy: m.accuracy,
            recall: m.recall,
            precision: m.precision,
            f1: m.f1,
            support: m.support,
            qualifies: m.support >= min_support && m.support > 0,
        })
        .collect();
    Ok(json!({"rows": out, "weighted_accuracy": awa}).to_string())
}

/// Builds the classification prompt. Examples and query use the
/// `Mail Object:` / `MLLM_TEXT:` record shape, records split by `###`.
pub fn preview_prompt_json(technique: &str, examples: &str, query: &str) -> Result<String, String> {
    let registry = TechniqueRegistry::builtin();
    let technique = registry.get(technique).map_err(|e| e.to_string())?;
    let parsed = parse_generation_output(examples);
    if let Some(f) = parsed.failures.first() {
        return Err(format!("example {f}"));
    }
    let mut q = parse_generation_output(query);
    if q.parsed.len() != 1 || !q.failures.is_empty() {
        return Err("the query must be exactly one record".into());
    }
    let mut query = q.parsed.remove(0);
    query.source = Source::Real;
    let refs: Vec<_> = parsed.parsed.iter().collect();
    let prompt = build_classification_prompt(technique, &refs, &query).map_err(|e| e.to_string())?;
    Ok(json!({
        "prompt": prompt.text,
        "digest": prompt.digest,
        "examples": refs.len(),
    })
    .to_string())
}

/// Jaccard co-occurrence of the technique ids listed one email per line.
pub fn cooccurrence_json(labels: &str) -> Result<String, String> {
    let mut techniques = BTreeSet::new();
    let mut emails = Vec::new();
    for (i, line) in labels.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let set: BTreeSet<TechniqueId> = line
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(TechniqueId::from_name)
            .collect();
        techniques.extend(set.iter().cloned());
        emails.push((EmailId::new(format!("line{}", i + 1)), set));
    }
    let ids: Vec<TechniqueId> = techniques.into_iter().collect();
    let m = cooccurrence_matrix(&GroundTruth::from_labels(emails), &ids);
    serde_json::to_string(&m).map_err(|e| e.to_string())
}

pub fn techniques_json() -> String {
    let reg = TechniqueRegistry::builtin();
    let list: Vec<_> = reg
        .iter()
        .map(|t| json!({"id": t.id, "name": t.name, "definition": t.definition}))
        .collect();
    serde_json::Value::Array(list).to_string()
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn score_table(csv_text: &str, scoring: &str, min_support: usize) -> Result<String, JsValue> {
    js(score_table_json(csv_text, scoring, min_support))
}

#[wasm_bindgen]
pub fn preview_prompt(technique: &str, examples: &str, query: &str) -> Result<String, JsValue> {
    js(preview_prompt_json(technique, examples, query))
}

#[wasm_bindgen]
pub fn cooccurrence(labels: &str) -> Result<String, JsValue> {
    js(cooccurrence_json(labels))
}

#[wasm_bindgen]
pub fn techniques() -> String {
    techniques_json()
}
