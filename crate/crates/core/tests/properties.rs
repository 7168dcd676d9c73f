use std::collections::BTreeSet;

use manipscan_core::corpus::{email_digest, ingest_email, render_email, Corpus, CorpusName, Email, LabeledExample, Source};
use manipscan_core::exemplar::{parse_generation_output, render_generation_output};
use manipscan_core::metrics::{derive_scores, weighted_accuracy, Counts, RefusalScoring};
use manipscan_core::taxonomy::TechniqueId;
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec("[A-Za-z0-9][A-Za-z0-9àéü,.!?' ]{0,29}", 1..4)
        .prop_map(|lines| lines.iter().map(|l| l.trim()).collect::<Vec<_>>().join("\n"))
}

fn line() -> impl Strategy<Value = String> {
    "[A-Za-z0-9][A-Za-z0-9àé,.!?' ]{0,39}".prop_map(|s| s.trim().to_owned())
}

fn email() -> impl Strategy<Value = Email> {
    (line(), text(), prop::collection::vec("[a-z]{1,8}\\.(pdf|zip|html)", 0..3))
        .prop_map(|(s, b, a)| Email::new(s, b, a, Source::Real))
}

fn counts() -> impl Strategy<Value = Counts> {
    (0..50usize, 0..50usize, 0..50usize, 0..50usize, 0..3usize).prop_flat_map(|(tp, tn, fp, fn_, r)| {
        (0..=r).prop_map(move |rp| Counts::new(tp, tn, fp, fn_).with_refusals(r, rp))
    })
}

fn scoring() -> impl Strategy<Value = RefusalScoring> {
    prop_oneof![Just(RefusalScoring::AsMiss), Just(RefusalScoring::Exclude)]
}

proptest! {
    #[test]
    fn ingest_is_idempotent(e in email()) {
        let once = ingest_email(&render_email(&e)).unwrap();
        let twice = ingest_email(&render_email(&once)).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn generation_round_trip(emails in prop::collection::vec(email(), 1..6)) {
        let emails: Vec<Email> = emails
            .into_iter()
            .map(|e| Email::new(e.subject, e.body, Vec::new(), Source::Synthetic))
            .collect();
        let batch = parse_generation_output(&render_generation_output(&emails));
        prop_assert!(batch.failures.is_empty());
        prop_assert_eq!(batch.parsed, emails);
    }

    #[test]
    fn digest_separates_fields(a in line(), b in line()) {
        let joined = format!("{a}{b}");
        prop_assume!(!a.is_empty() && !b.is_empty());
        prop_assert_ne!(email_digest(&a, &b, &[]), email_digest(&joined, "", &[]));
        prop_assert_ne!(email_digest(&a, &b, &[]), email_digest("", &joined, &[]));
    }

    #[test]
    fn support_counts_every_label(labels in prop::collection::vec(prop::collection::btree_set(0..4usize, 0..4), 1..12)) {
        let items: Vec<LabeledExample> = labels
            .iter()
            .enumerate()
            .map(|(i, set)| {
                LabeledExample::new(
                    Email::new(format!("s{i}"), "b", Vec::new(), Source::Real),
                    set.iter().map(|t| TechniqueId::new(format!("t{t}"))),
                )
            })
            .collect();
        let corpus = Corpus::new(CorpusName::Test, items).unwrap();
        let total: usize = (0..4).map(|t| corpus.support(&TechniqueId::new(format!("t{t}")))).sum();
        prop_assert_eq!(total, labels.iter().map(BTreeSet::len).sum::<usize>());
    }

    #[test]
    fn scores_are_scale_free(c in counts(), k in 1..10usize, s in scoring()) {
        let a = derive_scores("t".into(), c, s);
        let b = derive_scores("t".into(), c.scaled(k), s);
        for (x, y) in [(a.accuracy, b.accuracy), (a.recall, b.recall), (a.precision, b.precision), (a.f1, b.f1)] {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }
        if a.precision + a.recall == 0.0 {
            prop_assert_eq!(a.f1, 0.0);
        }
    }

    #[test]
    fn awa_is_bounded_and_scale_invariant(cs in prop::collection::vec(counts(), 1..8), k in 2..6usize) {
        let rows: Vec<_> = cs.iter().map(|c| derive_scores("t".into(), *c, RefusalScoring::AsMiss)).collect();
        let scaled: Vec<_> = cs.iter().map(|c| derive_scores("t".into(), c.scaled(k), RefusalScoring::AsMiss)).collect();
        let qualifying: Vec<f64> = rows.iter().filter(|r| r.support >= 5).map(|r| r.accuracy).collect();
        match weighted_accuracy(&rows, 5) {
            Ok(awa) => {
                let lo = qualifying.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = qualifying.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo - 1e-12 <= awa && awa <= hi + 1e-12);
                // every row qualifying before scaling still does after
                let mut scaled_rows = scaled.clone();
                for (r, orig) in scaled_rows.iter_mut().zip(&rows) {
                    if orig.support < 5 {
                        r.support = 0;
                    }
                }
                let awa2 = weighted_accuracy(&scaled_rows, 5).unwrap();
                prop_assert!((awa - awa2).abs() < 1e-12);
            }
            Err(_) => prop_assert!(qualifying.is_empty()),
        }
    }
}
