//! Confusion counts, derived scores, weighted accuracy and the two
//! technique-by-technique matrices.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, EmailId};
use crate::llm::Decision;
use crate::runner::VerdictSet;
use crate::taxonomy::TechniqueId;

/// Rows with at least this many positives enter the weighted accuracy.
pub const DEFAULT_MIN_SUPPORT: usize = 5;

/// Column of emails that received no YES verdict at all.
pub const NONE_COLUMN: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{missing} verdict(s) missing for technique `{technique}` and model `{model_id}`")]
    MissingVerdicts {
        technique: TechniqueId,
        model_id: String,
        missing: usize,
    },
    #[error("no row reaches the minimum support of {0}")]
    NoQualifyingRows(usize),
}

/// How a refused answer enters the scores.
///
/// `AsMiss` counts a refusal as a wrong answer: it stays in the accuracy
/// denominator and, on an email that carries the technique, in the recall
/// denominator. `Exclude` drops refused emails from every score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefusalScoring {
    #[default]
    AsMiss,
    Exclude,
}

/// Binary outcome counts. `tp`..`fn_` never include refused emails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub refusals: usize,
    /// Refusals on emails whose ground truth carries the technique.
    #[serde(default)]
    pub refusals_on_positive: usize,
}

impl Counts {
    pub fn new(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        Counts {
            tp,
            tn,
            fp,
            fn_,
            ..Default::default()
        }
    }

    pub fn with_refusals(mut self, refusals: usize, on_positive: usize) -> Self {
        self.refusals = refusals;
        self.refusals_on_positive = on_positive;
        self
    }

    /// Emails with a YES or NO verdict.
    pub fn answered(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Every email of the test set.
    pub fn total(&self) -> usize {
        self.answered() + self.refusals
    }

    pub fn scaled(&self, factor: usize) -> Self {
        Counts {
            tp: self.tp * factor,
            tn: self.tn * factor,
            fp: self.fp * factor,
            fn_: self.fn_ * factor,
            refusals: self.refusals * factor,
            refusals_on_positive: self.refusals_on_positive * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub technique: TechniqueId,
    pub counts: Counts,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Positives in the ground truth that the scores account for.
    pub support: usize,
    pub scoring: RefusalScoring,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn derive_scores(technique: TechniqueId, counts: Counts, scoring: RefusalScoring) -> MetricsRow {
    let (acc_den, support) = match scoring {
        RefusalScoring::AsMiss => (counts.total(), counts.tp + counts.fn_ + counts.refusals_on_positive),
        RefusalScoring::Exclude => (counts.answered(), counts.tp + counts.fn_),
    };
    let accuracy = ratio(counts.tp + counts.tn, acc_den);
    let recall = ratio(counts.tp, support);
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsRow {
        technique,
        counts,
        accuracy,
        recall,
        precision,
        f1,
        support,
        scoring,
    }
}

/// Per-email technique labels: corpus labels with pointwise overrides.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    emails: Vec<EmailId>,
    labels: BTreeMap<EmailId, BTreeSet<TechniqueId>>,
}

impl GroundTruth {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        GroundTruth {
            emails: corpus.email_ids(),
            labels: corpus.items().iter().map(|i| (i.email.id.clone(), i.labels.clone())).collect(),
        }
    }

    pub fn from_labels(labels: impl IntoIterator<Item = (EmailId, BTreeSet<TechniqueId>)>) -> Self {
        let mut t = GroundTruth::default();
        for (email, set) in labels {
            if !t.labels.contains_key(&email) {
                t.emails.push(email.clone());
            }
            t.labels.insert(email, set);
        }
        t
    }

    /// Sets or clears one label. Unknown emails are ignored.
    pub fn set(&mut self, email: &EmailId, technique: &TechniqueId, present: bool) -> bool {
        match self.labels.get_mut(email) {
            Some(set) => {
                if present {
                    set.insert(technique.clone());
                } else {
                    set.remove(technique);
                }
                true
            }
            None => false,
        }
    }

    pub fn emails(&self) -> &[EmailId] {
        &self.emails
    }

    pub fn len(&self) -> usize {
        self.emails.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emails.is_empty()
    }

    pub fn has(&self, email: &EmailId, technique: &TechniqueId) -> bool {
        self.labels.get(email).is_some_and(|s| s.contains(technique))
    }

    pub fn labels(&self, email: &EmailId) -> Option<&BTreeSet<TechniqueId>> {
        self.labels.get(email)
    }

    pub fn support(&self, technique: &TechniqueId) -> usize {
        self.labels.values().filter(|s| s.contains(technique)).count()
    }
}

pub fn confusion_counts(
    verdicts: &VerdictSet,
    truth: &GroundTruth,
    technique: &TechniqueId,
    model_id: &str,
) -> Result<Counts, MetricsError> {
    let mut c = Counts::default();
    let mut missing = 0;
    for email in truth.emails() {
        let positive = truth.has(email, technique);
        match verdicts.get(email, technique, model_id).map(|v| v.decision) {
            Some(Decision::Yes) if positive => c.tp += 1,
            Some(Decision::Yes) => c.fp += 1,
            Some(Decision::No) if positive => c.fn_ += 1,
            Some(Decision::No) => c.tn += 1,
            Some(Decision::Refusal) => {
                c.refusals += 1;
                if positive {
                    c.refusals_on_positive += 1;
                }
            }
            None => missing += 1,
        }
    }
    if missing > 0 {
        return Err(MetricsError::MissingVerdicts {
            technique: technique.clone(),
            model_id: model_id.to_owned(),
            missing,
        });
    }
    Ok(c)
}

/// One row per technique, in the given order.
pub fn evaluate(
    verdicts: &VerdictSet,
    truth: &GroundTruth,
    techniques: &[TechniqueId],
    model_id: &str,
    scoring: RefusalScoring,
) -> Result<Vec<MetricsRow>, MetricsError> {
    techniques
        .iter()
        .map(|t| Ok(derive_scores(t.clone(), confusion_counts(verdicts, truth, t, model_id)?, scoring)))
        .collect()
}

/// Support-weighted mean accuracy over rows with `support >= min_support`.
pub fn weighted_accuracy(rows: &[MetricsRow], min_support: usize) -> Result<f64, MetricsError> {
    let (num, den) = rows
        .iter()
        .filter(|r| r.support >= min_support && r.support > 0)
        .fold((0.0, 0usize), |(num, den), r| (num + r.support as f64 * r.accuracy, den + r.support));
    if den == 0 {
        return Err(MetricsError::NoQualifyingRows(min_support));
    }
    Ok(num / den as f64)
}

/// Row-major matrix with labelled rows and columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: Vec<String>, columns: Vec<String>) -> Self {
        let cells = vec![0.0; rows.len() * columns.len()];
        Matrix { rows, columns, cells }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.columns.len() + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.columns.len();
        self.cells[i * n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.columns.len();
        &self.cells[i * n..(i + 1) * n]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.columns
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.rows.iter().position(|r| r == id)
    }

    pub fn column_index(&self, id: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == id)
    }
}

/// Row `i` spreads each email carrying technique `i` uniformly over the
/// techniques the model answered YES for (or the `none` column), then scales
/// the row to 100. Rows without support stay zero.
pub fn technique_confusion_matrix(
    verdicts: &VerdictSet,
    truth: &GroundTruth,
    techniques: &[TechniqueId],
    model_id: &str,
) -> Result<Matrix, MetricsError> {
    let ids: Vec<String> = techniques.iter().map(|t| t.as_str().to_owned()).collect();
    let mut columns = ids.clone();
    columns.push(NONE_COLUMN.to_owned());
    let mut m = Matrix::zeros(ids, columns);
    let none = techniques.len();

    let mut yes: BTreeMap<&EmailId, Vec<usize>> = BTreeMap::new();
    for t in techniques {
        let mut missing = 0;
        for email in truth.emails() {
            if verdicts.get(email, t, model_id).is_none() {
                missing += 1;
            }
        }
        if missing > 0 {
            return Err(MetricsError::MissingVerdicts {
                technique: t.clone(),
                model_id: model_id.to_owned(),
                missing,
            });
        }
    }
    for email in truth.emails() {
        let hits = techniques
            .iter()
            .enumerate()
            .filter(|(_, t)| verdicts.get(email, t, model_id).is_some_and(|v| v.decision == Decision::Yes))
            .map(|(j, _)| j)
            .collect();
        yes.insert(email, hits);
    }

    for (i, t) in techniques.iter().enumerate() {
        let members: Vec<&EmailId> = truth.emails().iter().filter(|e| truth.has(e, t)).collect();
        if members.is_empty() {
            continue;
        }
        let scale = 100.0 / members.len() as f64;
        for email in members {
            let hits = &yes[email];
            if hits.is_empty() {
                m.set(i, none, m.get(i, none) + scale);
            } else {
                let share = scale / hits.len() as f64;
                for &j in hits {
                    m.set(i, j, m.get(i, j) + share);
                }
            }
        }
    }
    Ok(m)
}

/// Jaccard overlap of label sets; diagonal is 1 for supported techniques.
pub fn cooccurrence_matrix(truth: &GroundTruth, techniques: &[TechniqueId]) -> Matrix {
    let ids: Vec<String> = techniques.iter().map(|t| t.as_str().to_owned()).collect();
    let mut m = Matrix::zeros(ids.clone(), ids);
    let members: Vec<BTreeSet<&EmailId>> = techniques
        .iter()
        .map(|t| truth.emails().iter().filter(|e| truth.has(e, t)).collect())
        .collect();
    for i in 0..techniques.len() {
        for j in i..techniques.len() {
            let union = members[i].union(&members[j]).count();
            let both = members[i].intersection(&members[j]).count();
            let v = ratio(both, union);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prevalence {
    pub technique: TechniqueId,
    pub support: usize,
    /// Emails the rate is taken over.
    pub emails: usize,
    pub refusals: usize,
    pub usage_rate: f64,
}

/// Share of emails carrying each technique. Under `Exclude` the denominator
/// leaves out refused emails, under `AsMiss` it is the whole test set.
pub fn prevalence(rows: &[MetricsRow]) -> Vec<Prevalence> {
    rows.iter()
        .map(|r| {
            let emails = match r.scoring {
                RefusalScoring::AsMiss => r.counts.total(),
                RefusalScoring::Exclude => r.counts.answered(),
            };
            Prevalence {
                technique: r.technique.clone(),
                support: r.support,
                emails,
                refusals: r.counts.refusals,
                usage_rate: ratio(r.support, emails),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRank {
    pub rank: usize,
    pub model_id: String,
    pub weighted_accuracy: f64,
    /// Shares its score with another model.
    pub tied: bool,
}

/// Descending by weighted accuracy, ties by model id.
pub fn compare_models(scores: &[(String, f64)]) -> Vec<ModelRank> {
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    sorted
        .iter()
        .enumerate()
        .map(|(i, (id, awa))| ModelRank {
            rank: i + 1,
            model_id: id.clone(),
            weighted_accuracy: *awa,
            tied: scores.iter().filter(|(_, s)| s == awa).count() > 1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Verdict;

    fn round2(x: f64) -> f64 {
        (x * 100.0).round() / 100.0
    }

    fn t(s: &str) -> TechniqueId {
        TechniqueId::new(s)
    }

    fn e(s: &str) -> EmailId {
        EmailId::new(s)
    }

    fn verdict(email: &str, technique: &str, d: Decision) -> Verdict {
        Verdict {
            email: e(email),
            technique: t(technique),
            model_id: "m".into(),
            decision: d,
            raw_response: d.to_string(),
            prompt_digest: String::new(),
            timestamp: String::new(),
        }
    }

    #[test]
    fn table_rows() {
        let r = derive_scores(t("authority"), Counts::new(5, 71, 22, 2), RefusalScoring::AsMiss);
        assert_eq!(
            (round2(r.accuracy), round2(r.recall), round2(r.precision), round2(r.f1)),
            (0.76, 0.71, 0.19, 0.29)
        );
        let r = derive_scores(t("door_in_the_face"), Counts::new(0, 99, 0, 1), RefusalScoring::AsMiss);
        assert_eq!((round2(r.accuracy), r.recall, r.precision, r.f1), (0.99, 0.0, 0.0, 0.0));
        let r = derive_scores(t("guilt_calling"), Counts::new(1, 90, 0, 9), RefusalScoring::AsMiss);
        assert_eq!((r.precision, round2(r.recall), round2(r.f1)), (1.0, 0.1, 0.18));
    }

    #[test]
    fn refusal_policies() {
        let c = Counts::new(53, 26, 2, 18).with_refusals(1, 1);
        let miss = derive_scores(t("baiting"), c, RefusalScoring::AsMiss);
        assert_eq!(miss.support, 72);
        assert_eq!(round2(miss.accuracy), 0.79);
        assert_eq!(round2(miss.recall), 0.74);
        let ex = derive_scores(t("baiting"), c, RefusalScoring::Exclude);
        assert_eq!(ex.support, 71);
        assert_eq!(round2(ex.accuracy), 0.80);
    }

    #[test]
    fn awa_examples() {
        let a = derive_scores(t("a"), Counts::new(10, 0, 0, 0), RefusalScoring::AsMiss);
        let mut b = derive_scores(t("b"), Counts::new(5, 0, 0, 5), RefusalScoring::AsMiss);
        assert_eq!(weighted_accuracy(std::slice::from_ref(&a), 5).unwrap(), 1.0);
        assert_eq!(b.accuracy, 0.5);
        assert_eq!(weighted_accuracy(&[a.clone(), b.clone()], 5).unwrap(), 0.75);
        b.support = 4;
        assert_eq!(weighted_accuracy(&[a, b.clone()], 5).unwrap(), 1.0);
        assert_eq!(weighted_accuracy(&[b], 5), Err(MetricsError::NoQualifyingRows(5)));
    }

    #[test]
    fn counts_and_missing() {
        let truth = GroundTruth::from_labels([
            (e("1"), BTreeSet::from([t("x")])),
            (e("2"), BTreeSet::new()),
            (e("3"), BTreeSet::from([t("x")])),
        ]);
        let mut vs = VerdictSet::default();
        vs.insert(verdict("1", "x", Decision::Yes));
        vs.insert(verdict("2", "x", Decision::No));
        assert!(matches!(
            confusion_counts(&vs, &truth, &t("x"), "m"),
            Err(MetricsError::MissingVerdicts { missing: 1, .. })
        ));
        vs.insert(verdict("3", "x", Decision::Refusal));
        let c = confusion_counts(&vs, &truth, &t("x"), "m").unwrap();
        assert_eq!(c, Counts::new(1, 1, 0, 0).with_refusals(1, 1));
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn confusion_rows() {
        let truth = GroundTruth::from_labels([
            (e("1"), BTreeSet::from([t("i")])),
            (e("2"), BTreeSet::from([t("j")])),
            (e("3"), BTreeSet::from([t("k")])),
        ]);
        let mut vs = VerdictSet::default();
        for (email, yes) in [("1", vec!["i"]), ("2", vec!["i", "j"]), ("3", vec![])] {
            for tech in ["i", "j", "k"] {
                let d = if yes.contains(&tech) { Decision::Yes } else { Decision::No };
                vs.insert(verdict(email, tech, d));
            }
        }
        let ids = [t("i"), t("j"), t("k")];
        let m = technique_confusion_matrix(&vs, &truth, &ids, "m").unwrap();
        assert_eq!(m.row(0), &[100.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[50.0, 50.0, 0.0, 0.0]);
        assert_eq!(m.row(2), &[0.0, 0.0, 0.0, 100.0]);
        assert_eq!(m.columns.last().unwrap(), NONE_COLUMN);
    }

    #[test]
    fn jaccard_hand_case() {
        let truth = GroundTruth::from_labels([
            (e("1"), BTreeSet::from([t("i")])),
            (e("2"), BTreeSet::from([t("i"), t("j")])),
            (e("3"), BTreeSet::from([t("j")])),
        ]);
        let m = cooccurrence_matrix(&truth, &[t("i"), t("j"), t("z")]);
        assert!((m.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.get(0, 1), m.get(1, 0));
        assert_eq!((m.get(0, 0), m.get(1, 1), m.get(2, 2)), (1.0, 1.0, 0.0));
    }

    #[test]
    fn prevalence_denominators() {
        let c = Counts::new(60, 13, 9, 17).with_refusals(1, 1);
        let miss = prevalence(&[derive_scores(t("rmf"), c, RefusalScoring::AsMiss)]);
        assert_eq!((miss[0].support, miss[0].emails), (78, 100));
        let ex = prevalence(&[derive_scores(t("rmf"), c, RefusalScoring::Exclude)]);
        assert_eq!((ex[0].support, ex[0].emails), (77, 99));
        assert_eq!(round2(miss[0].usage_rate), 0.78);
        assert_eq!(round2(ex[0].usage_rate), 0.78);
    }

    #[test]
    fn ranking() {
        let r = compare_models(&[("B".into(), 0.68), ("A".into(), 0.76)]);
        assert_eq!(r.iter().map(|m| m.model_id.as_str()).collect::<Vec<_>>(), ["A", "B"]);
        assert!(!r[0].tied);
        let r = compare_models(&[("z".into(), 0.5), ("a".into(), 0.5)]);
        assert_eq!(r[0].model_id, "a");
        assert!(r[0].tied && r[1].tied);
        assert_eq!(compare_models(&[("solo".into(), 0.1)]).len(), 1);
    }
}
