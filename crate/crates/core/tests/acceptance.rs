//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always show.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use manipscan_core::corpus::{Corpus, CorpusName, Email, EmailId, LabeledExample, Source};
use manipscan_core::exemplar::{build_pool, parse_generation_output, DEFAULT_MIN_EXAMPLES};
use manipscan_core::llm::{Decision, LlmClient, MockProvider, MockScript, ModelConfig, RateLimiter, ResponseCache, Verdict};
use manipscan_core::metrics::{
    confusion_counts, cooccurrence_matrix, derive_scores, technique_confusion_matrix, weighted_accuracy, Counts,
    GroundTruth, RefusalScoring,
};
use manipscan_core::prompt::build_classification_prompt;
use manipscan_core::report::{build_bundle, render, BundleOptions};
use manipscan_core::runner::{self, FixedClock, RunOptions, RunPlan, VerdictSet};
use manipscan_core::taxonomy::{TechniqueId, TechniqueRegistry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

const TOL: f64 = 0.005 + 1e-9;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[derive(Debug, Deserialize)]
struct TableRow {
    technique: String,
    group: String,
    tp: usize,
    tn: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    refusals: usize,
    refusals_on_positive: usize,
    accuracy: f64,
    recall: f64,
    precision: f64,
    f1: f64,
}

impl TableRow {
    fn counts(&self) -> Counts {
        Counts::new(self.tp, self.tn, self.fp, self.fn_).with_refusals(self.refusals, self.refusals_on_positive)
    }
}

fn published_rows() -> Vec<TableRow> {
    let mut r = csv::Reader::from_path(data("published_scores.csv")).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:?}, limit {limit:?}"))
}

fn c1_table_arithmetic() -> Outcome {
    let start = Instant::now();
    let rows = published_rows();
    check(rows.len() == 40, format!("{} rows in fixture", rows.len()))?;
    let mut bad = Vec::new();
    let mut exclude_bad = 0;
    for r in &rows {
        let id = TechniqueId::from_name(&r.technique);
        let m = derive_scores(id.clone(), r.counts(), RefusalScoring::AsMiss);
        for (name, got, want) in [
            ("acc", m.accuracy, r.accuracy),
            ("rec", m.recall, r.recall),
            ("prec", m.precision, r.precision),
            ("f1", m.f1, r.f1),
        ] {
            if (got - want).abs() > TOL {
                bad.push(format!("{} {name} {got:.4} vs {want}", r.technique));
            }
        }
        let e = derive_scores(id, r.counts(), RefusalScoring::Exclude);
        if [(e.accuracy, r.accuracy), (e.recall, r.recall), (e.precision, r.precision), (e.f1, r.f1)]
            .iter()
            .any(|(g, w)| (g - w).abs() > TOL)
        {
            exclude_bad += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    check(bad.is_empty(), bad.join("; "))?;
    Ok(format!(
        "40 rows x 4 scores within 0.005 (refusal counted as a miss; excluding refusals would break {exclude_bad} rows)"
    ))
}

fn c2_weighted_accuracy() -> Outcome {
    let start = Instant::now();
    let rows: Vec<_> = published_rows()
        .iter()
        .map(|r| derive_scores(TechniqueId::from_name(&r.technique), r.counts(), RefusalScoring::AsMiss))
        .collect();
    let qualifying = rows.iter().filter(|r| r.support >= 5).count();
    let representative = published_rows().iter().filter(|r| r.group == "representative").count();
    check(qualifying == 21 && representative == 21, format!("{qualifying} qualifying rows"))?;
    let awa = weighted_accuracy(&rows, 5).map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(1))?;
    check((awa - 0.76).abs() <= 0.01, format!("AWA {awa:.4}"))?;
    Ok(format!("AWA {awa:.4} over {qualifying} rows"))
}

/// Ground truth and verdicts whose confusion counts are exactly the table's.
fn table_fixture(rows: &[TableRow]) -> (GroundTruth, VerdictSet) {
    let emails: Vec<EmailId> = (0..100).map(|i| EmailId::new(format!("mail{i:03}"))).collect();
    let mut labels: BTreeMap<EmailId, BTreeSet<TechniqueId>> = emails.iter().map(|e| (e.clone(), BTreeSet::new())).collect();
    let mut vs = VerdictSet::default();
    for r in rows {
        let t = TechniqueId::from_name(&r.technique);
        let mut outcomes = Vec::new();
        outcomes.extend(std::iter::repeat_n((true, Decision::Yes), r.tp));
        outcomes.extend(std::iter::repeat_n((false, Decision::No), r.tn));
        outcomes.extend(std::iter::repeat_n((false, Decision::Yes), r.fp));
        outcomes.extend(std::iter::repeat_n((true, Decision::No), r.fn_));
        outcomes.extend(std::iter::repeat_n((true, Decision::Refusal), r.refusals_on_positive));
        outcomes.extend(std::iter::repeat_n((false, Decision::Refusal), r.refusals - r.refusals_on_positive));
        for (email, (positive, decision)) in emails.iter().zip(outcomes) {
            if positive {
                labels.get_mut(email).unwrap().insert(t.clone());
            }
            vs.insert(Verdict {
                email: email.clone(),
                technique: t.clone(),
                model_id: "table".into(),
                decision,
                raw_response: decision.to_string(),
                prompt_digest: String::new(),
                timestamp: String::new(),
            });
        }
    }
    (GroundTruth::from_labels(labels), vs)
}

fn c3_count_sums() -> Outcome {
    let start = Instant::now();
    let rows = published_rows();
    let (truth, vs) = table_fixture(&rows);
    let mut refusing = Vec::new();
    for r in &rows {
        let t = TechniqueId::from_name(&r.technique);
        let c = confusion_counts(&vs, &truth, &t, "table").map_err(|e| e.to_string())?;
        check(
            (c.tp, c.tn, c.fp, c.fn_) == (r.tp, r.tn, r.fp, r.fn_),
            format!("{}: counts {:?}", r.technique, c),
        )?;
        check(c.total() == 100, format!("{}: sum {}", r.technique, c.total()))?;
        if c.refusals > 0 {
            refusing.push((r.technique.clone(), c.refusals));
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    let expected = vec![("Baiting".to_owned(), 1), ("Request For Minor Favor".to_owned(), 1)];
    check(refusing == expected, format!("refusals on {refusing:?}"))?;
    Ok("every row sums to 100; one refusal each on Baiting and Request For Minor Favor".into())
}

#[derive(Deserialize)]
struct FixtureEmail {
    subject: String,
    body: String,
    attachments: Vec<String>,
}

impl FixtureEmail {
    fn email(&self) -> Email {
        Email::new(&self.subject, &self.body, self.attachments.clone(), Source::Real)
    }
}

#[derive(Deserialize)]
struct PromptFixture {
    technique: String,
    examples: Vec<FixtureEmail>,
    query: FixtureEmail,
}

fn c4_golden_prompt() -> Outcome {
    let fixture: PromptFixture =
        serde_json::from_str(&std::fs::read_to_string(data("prompt_fixture.json")).unwrap()).unwrap();
    let registry = TechniqueRegistry::builtin();
    let technique = registry.get(&fixture.technique).map_err(|e| e.to_string())?;
    let examples: Vec<Email> = fixture.examples.iter().map(FixtureEmail::email).collect();
    let refs: Vec<&Email> = examples.iter().collect();
    let prompt = build_classification_prompt(technique, &refs, &fixture.query.email()).map_err(|e| e.to_string())?;
    let golden = std::fs::read(data("golden_prompt_baiting.txt")).unwrap();
    if prompt.text.as_bytes() == golden.as_slice() {
        return Ok(format!("{} bytes identical", golden.len()));
    }
    let at = prompt
        .text
        .bytes()
        .zip(golden.iter())
        .position(|(a, b)| a != *b)
        .unwrap_or(golden.len().min(prompt.text.len()));
    Err(format!("first difference at byte {at}"))
}

/// Brute-force reference over a flat list of (email, technique, truth, decision).
struct Instance {
    emails: usize,
    techniques: usize,
    truth: Vec<Vec<bool>>,
    decisions: Vec<Vec<Decision>>,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let emails = rng.random_range(1..=10);
        let techniques = rng.random_range(1..=4);
        let truth = (0..emails)
            .map(|_| (0..techniques).map(|_| rng.random_bool(0.4)).collect())
            .collect();
        let decisions = (0..emails)
            .map(|_| {
                (0..techniques)
                    .map(|_| match rng.random_range(0..10) {
                        0 => Decision::Refusal,
                        1..=4 => Decision::Yes,
                        _ => Decision::No,
                    })
                    .collect()
            })
            .collect();
        Instance {
            emails,
            techniques,
            truth,
            decisions,
        }
    }

    fn email(e: usize) -> EmailId {
        EmailId::new(format!("e{e}"))
    }

    fn technique(t: usize) -> TechniqueId {
        TechniqueId::new(format!("t{t}"))
    }

    fn build(&self) -> (GroundTruth, VerdictSet) {
        let truth = GroundTruth::from_labels((0..self.emails).map(|e| {
            (
                Self::email(e),
                (0..self.techniques).filter(|&t| self.truth[e][t]).map(Self::technique).collect(),
            )
        }));
        let mut vs = VerdictSet::default();
        for e in 0..self.emails {
            for t in 0..self.techniques {
                let d = self.decisions[e][t];
                vs.insert(Verdict {
                    email: Self::email(e),
                    technique: Self::technique(t),
                    model_id: "m".into(),
                    decision: d,
                    raw_response: d.to_string(),
                    prompt_digest: String::new(),
                    timestamp: String::new(),
                });
            }
        }
        (truth, vs)
    }

    /// (tp, tn, fp, fn, refusals) by enumeration.
    fn counts(&self, t: usize) -> [usize; 5] {
        let mut c = [0; 5];
        for e in 0..self.emails {
            let slot = match (self.truth[e][t], self.decisions[e][t]) {
                (_, Decision::Refusal) => 4,
                (true, Decision::Yes) => 0,
                (false, Decision::No) => 1,
                (false, Decision::Yes) => 2,
                (true, Decision::No) => 3,
            };
            c[slot] += 1;
        }
        c
    }

    /// Scores straight from the definitions: accuracy is the share of all
    /// emails answered correctly, recall the share of truly positive emails
    /// answered YES, precision the share of YES answers that are right.
    fn scores(&self, t: usize, exclude: bool) -> (f64, f64, f64, f64, usize) {
        let keep: Vec<usize> = (0..self.emails)
            .filter(|&e| !exclude || self.decisions[e][t] != Decision::Refusal)
            .collect();
        let correct = keep
            .iter()
            .filter(|&&e| match self.decisions[e][t] {
                Decision::Yes => self.truth[e][t],
                Decision::No => !self.truth[e][t],
                Decision::Refusal => false,
            })
            .count();
        let positives = keep.iter().filter(|&&e| self.truth[e][t]).count();
        let said_yes = keep.iter().filter(|&&e| self.decisions[e][t] == Decision::Yes).count();
        let hits = keep
            .iter()
            .filter(|&&e| self.truth[e][t] && self.decisions[e][t] == Decision::Yes)
            .count();
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (acc, rec, prec) = (div(correct, keep.len()), div(hits, positives), div(hits, said_yes));
        let f1 = if rec + prec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        (acc, rec, prec, f1, positives)
    }

    fn jaccard(&self, i: usize, j: usize) -> f64 {
        let both = (0..self.emails).filter(|&e| self.truth[e][i] && self.truth[e][j]).count();
        let either = (0..self.emails).filter(|&e| self.truth[e][i] || self.truth[e][j]).count();
        if either == 0 {
            0.0
        } else {
            both as f64 / either as f64
        }
    }
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn c5_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for n in 0..1000 {
        let inst = Instance::random(&mut rng);
        let (truth, vs) = inst.build();
        let ids: Vec<TechniqueId> = (0..inst.techniques).map(Instance::technique).collect();
        for scoring in [RefusalScoring::AsMiss, RefusalScoring::Exclude] {
            let mut rows = Vec::new();
            for (t, id) in ids.iter().enumerate() {
                let c = confusion_counts(&vs, &truth, id, "m").map_err(|e| e.to_string())?;
                check(
                    [c.tp, c.tn, c.fp, c.fn_, c.refusals] == inst.counts(t),
                    format!("instance {n}: counts {c:?} vs {:?}", inst.counts(t)),
                )?;
                let row = derive_scores(id.clone(), c, scoring);
                let (acc, rec, prec, f1, support) = inst.scores(t, scoring == RefusalScoring::Exclude);
                check(
                    same(row.accuracy, acc)
                        && same(row.recall, rec)
                        && same(row.precision, prec)
                        && same(row.f1, f1)
                        && row.support == support,
                    format!("instance {n} technique {t} {scoring:?}: scores differ"),
                )?;
                rows.push(row);
            }
            let min_support = rng.random_range(0..=3);
            let (num, den) = (0..inst.techniques).fold((0.0, 0usize), |(num, den), t| {
                let (acc, _, _, _, support) = inst.scores(t, scoring == RefusalScoring::Exclude);
                if support >= min_support && support > 0 {
                    (num + acc * support as f64, den + support)
                } else {
                    (num, den)
                }
            });
            match weighted_accuracy(&rows, min_support) {
                Ok(awa) => check(den > 0 && same(awa, num / den as f64), format!("instance {n}: AWA {awa}"))?,
                Err(_) => check(den == 0, format!("instance {n}: AWA refused with {den} support"))?,
            }
        }
        let co = cooccurrence_matrix(&truth, &ids);
        for i in 0..inst.techniques {
            for j in 0..inst.techniques {
                check(same(co.get(i, j), inst.jaccard(i, j)), format!("instance {n}: cooccurrence ({i},{j})"))?;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("1000 instances, both refusal policies, in {:?}", start.elapsed()))
}

const DEMO_TECHNIQUES: [&str; 5] = ["authority", "baiting", "curiosity_appeal", "request_for_minor_favor", "time_pressure"];

fn demo_corpora() -> (Corpus, Corpus) {
    let mut train = Vec::new();
    for (i, t) in DEMO_TECHNIQUES.iter().enumerate() {
        for j in 0..DEFAULT_MIN_EXAMPLES {
            let email = Email::new(
                format!("Training mail {i}-{j}"),
                format!("Body written to show {t}, variant {j}."),
                Vec::new(),
                Source::Real,
            );
            train.push(LabeledExample::new(email, [TechniqueId::new(*t)]));
        }
    }
    let mut test = Vec::new();
    for i in 0..10 {
        let email = Email::new(
            format!("Account notice {i}"),
            format!("Dear customer {i},\nplease review the attached statement."),
            if i % 3 == 0 { vec![format!("statement-{i}.pdf")] } else { Vec::new() },
            Source::Real,
        );
        let labels = DEMO_TECHNIQUES
            .iter()
            .enumerate()
            .filter(|(j, _)| (i + j) % 3 == 0)
            .map(|(_, t)| TechniqueId::new(*t));
        test.push(LabeledExample::new(email, labels));
    }
    (
        Corpus::new(CorpusName::Train, train).unwrap(),
        Corpus::new(CorpusName::Test, test).unwrap(),
    )
}

fn mock_client(fail_after: Option<usize>) -> Arc<LlmClient> {
    let script = MockScript {
        fail_after,
        ..MockScript::hashed(["YES", "NO", "NO", "I'm sorry, I can't help with that."])
    };
    Arc::new(LlmClient::new(
        ModelConfig::mock("mock-model"),
        Arc::new(MockProvider::new(script)),
        Arc::new(ResponseCache::in_memory()),
        Arc::new(RateLimiter::unlimited()),
    ))
}

fn run_to(
    out: &Path,
    client: Arc<LlmClient>,
    train: &Corpus,
    test: &Corpus,
) -> Result<runner::RunOutcome, String> {
    let registry = TechniqueRegistry::builtin();
    let techniques: Vec<TechniqueId> = DEMO_TECHNIQUES.iter().map(|t| TechniqueId::new(*t)).collect();
    let pools: HashMap<_, _> = techniques
        .iter()
        .map(|t| (t.clone(), build_pool(train, &registry, t.as_str(), DEFAULT_MIN_EXAMPLES).unwrap()))
        .collect();
    let plan = RunPlan {
        techniques,
        models: vec![client.config().clone()],
        k_examples: 4,
        seed: 0,
    };
    let options = RunOptions {
        parallelism: 8,
        clock: Arc::new(FixedClock("2025-01-01T00:00:00.000Z".into())),
        out: Some(out.to_owned()),
    };
    runner::run(&plan, test, &registry, &pools, &[client], &options).map_err(|e| e.to_string())
}

fn bundle_files(verdicts: &VerdictSet, test: &Corpus, dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let techniques: Vec<TechniqueId> = DEMO_TECHNIQUES.iter().map(|t| TechniqueId::new(*t)).collect();
    let bundle = build_bundle(verdicts, &GroundTruth::from_corpus(test), &techniques, BundleOptions::default())
        .map_err(|e| e.to_string())?;
    let files = render(&bundle, dir).map_err(|e| e.to_string())?;
    Ok(files
        .iter()
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(f).unwrap()))
        .collect())
}

fn c6_end_to_end_determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = demo_corpora();

    let straight = run_to(&dir.path().join("a.jsonl"), mock_client(None), &train, &test)?;
    check(straight.is_complete(), "uninterrupted run incomplete")?;
    check(straight.verdicts.len() == 50, format!("{} verdicts", straight.verdicts.len()))?;

    let log = dir.path().join("b.jsonl");
    let killed = run_to(&log, mock_client(Some(20)), &train, &test)?;
    check(killed.aborted.is_some() && !killed.is_complete(), "scripted fault did not interrupt the run")?;
    let persisted = runner::load(&log).map_err(|e| e.to_string())?.0.len();
    check(persisted == killed.verdicts.len(), "persisted count differs from outcome")?;

    let client = mock_client(None);
    let resumed = run_to(&log, client.clone(), &train, &test)?;
    let calls = client.stats().calls.load(std::sync::atomic::Ordering::SeqCst) as usize;
    check(resumed.is_complete(), "resumed run incomplete")?;
    check(
        resumed.resumed == persisted && calls == 50 - persisted,
        format!("resume made {calls} calls after {persisted} persisted"),
    )?;
    check(resumed.verdicts == straight.verdicts, "verdict sets differ")?;
    check(
        runner::load(&log).map_err(|e| e.to_string())?.0 == straight.verdicts,
        "reloaded log differs",
    )?;

    let a = bundle_files(&straight.verdicts, &test, &dir.path().join("report-a"))?;
    let b = bundle_files(&resumed.verdicts, &test, &dir.path().join("report-b"))?;
    check(a.len() == 6, format!("{} report files", a.len()))?;
    check(a == b, "report bundles differ")?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "50 verdicts; killed after {persisted}, resumed with {calls} calls; 6 report files byte-identical"
    ))
}

fn c7_generation_parser() -> Outcome {
    let raw = std::fs::read_to_string(data("generation_output.txt")).unwrap();
    let batch = parse_generation_output(&raw);
    check(
        batch.parsed.len() == 4 && batch.failures.len() == 1,
        format!("{} parsed, {} failures", batch.parsed.len(), batch.failures.len()),
    )?;
    check(batch.failures[0].record == 3, format!("failure isolated at record {}", batch.failures[0].record))?;
    check(
        batch.parsed.iter().any(|e| e.body.contains("[image of a delivery van")),
        "bracketed image description lost",
    )?;
    Ok(format!("4 examples, 1 failure ({})", batch.failures[0]))
}

fn c8_matrix_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 0..300 {
        let inst = Instance::random(&mut rng);
        let (truth, vs) = inst.build();
        let ids: Vec<TechniqueId> = (0..inst.techniques).map(Instance::technique).collect();
        let co = cooccurrence_matrix(&truth, &ids);
        let conf = technique_confusion_matrix(&vs, &truth, &ids, "m").map_err(|e| e.to_string())?;
        for i in 0..ids.len() {
            let supported = truth.support(&ids[i]) > 0;
            check(
                co.get(i, i) == if supported { 1.0 } else { 0.0 },
                format!("corpus {n}: diagonal {i}"),
            )?;
            for j in 0..ids.len() {
                let v = co.get(i, j);
                check(v == co.get(j, i) && (0.0..=1.0).contains(&v), format!("corpus {n}: cell ({i},{j})"))?;
            }
            let sum: f64 = conf.row(i).iter().sum();
            let want = if supported { 100.0 } else { 0.0 };
            check((sum - want).abs() <= 0.5, format!("corpus {n}: confusion row {i} sums to {sum}"))?;
        }
    }
    Ok("300 random corpora: symmetric co-occurrence with unit diagonal, confusion rows sum to 100".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("published table arithmetic reproduction", c1_table_arithmetic),
        ("weighted accuracy reproduction", c2_weighted_accuracy),
        ("count-sum invariant", c3_count_sums),
        ("golden prompt", c4_golden_prompt),
        ("oracle equivalence", c5_oracle_equivalence),
        ("end-to-end determinism", c6_end_to_end_determinism),
        ("generation-output parser", c7_generation_parser),
        ("matrix properties", c8_matrix_properties),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => writeln!(out, "criterion {}: PASS {name}: {detail}", i + 1).unwrap(),
            Err(why) => {
                failed += 1;
                writeln!(out, "criterion {}: FAIL {name}: {why}", i + 1).unwrap();
            }
        }
    }
    writeln!(out, "acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len()).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
