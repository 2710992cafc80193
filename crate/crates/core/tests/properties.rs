// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use proptest::prelude::*;
use std::collections::HashSet;
use wfad_core::dataset::{read_dataset, split, write_dataset, LabeledExample, SplitRatios};
use wfad_core::evaluate::metrics::{classification_metrics, ranking_metrics};
use wfad_core::evaluate::nested_portion_order;
use wfad_core::ingest::{parse_clauses, prefix_stream, serialize_full, JobRecord, Label};

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Normal), Just(Label::Anomalous)]
}

/// A job with an arbitrary subset of the schema features present.
fn record() -> impl Strategy<Value = JobRecord> {
    (
        proptest::collection::vec(proptest::option::of(0u32..100_000), 5),
        label(),
    )
        .prop_map(|(values, label)| {
            let mut r = JobRecord::new("j", "w").with_label(label);
            for (name, v) in FEATURES.iter().zip(values) {
                if let Some(v) = v {
                    r = r.with_value(name, v as f64 / 4.0);
                }
            }
            r
        })
}

fn examples(max: usize) -> impl Strategy<Value = Vec<LabeledExample>> {
    proptest::collection::vec((0u32..5000, label()), 2..max).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (runtime, label))| {
                let r = JobRecord::new(format!("j{i}"), "w")
                    .with_value("runtime", runtime as f64)
                    .with_label(label);
                LabeledExample::new(serialize_full(&r, &schema()).unwrap(), "w", label)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn clauses_round_trip(r in record()) {
        let s = serialize_full(&r, &schema()).unwrap();
        let clauses = parse_clauses(&s.text).unwrap();
        prop_assert_eq!(clauses.len(), r.values.len());
        for (name, value) in clauses {
            prop_assert_eq!(value.parse::<f64>().unwrap(), r.values[&name]);
        }
    }

    #[test]
    fn prefixes_grow_one_clause_at_a_time(r in record()) {
        if r.values.is_empty() {
            prop_assert!(prefix_stream(&r, &schema()).is_err());
            return Ok(());
        }
        let prefixes = prefix_stream(&r, &schema()).unwrap();
        prop_assert_eq!(prefixes.len(), r.values.len());
        for (i, p) in prefixes.iter().enumerate() {
            prop_assert_eq!(p.prefix_len, i + 1);
            prop_assert_eq!(parse_clauses(&p.text).unwrap().len(), i + 1);
        }
        for w in prefixes.windows(2) {
            let head = format!("{} ", w[0].text);
            prop_assert!(w[1].text.starts_with(&head));
        }
        if let Some(last) = prefixes.last() {
            prop_assert_eq!(&last.text, &serialize_full(&r, &schema()).unwrap().text);
        }
    }

    #[test]
    fn split_partitions_the_input(data in examples(80), seed in any::<u64>(), stratified in any::<bool>()) {
        let has_both = Label::ALL.iter().all(|l| data.iter().any(|e| e.label == *l));
        let ratios = SplitRatios::new(0.6, 0.2, 0.2).unwrap();
        let result = split(&data, ratios, seed, stratified);
        if stratified && !has_both {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let s = result.unwrap();
        let mut seen = HashSet::new();
        for e in s.train.iter().chain(&s.validation).chain(&s.test) {
            prop_assert!(seen.insert(e.job_id().to_string()));
        }
        prop_assert_eq!(seen.len(), data.len());
        // Deterministic in the seed.
        prop_assert_eq!(split(&data, ratios, seed, stratified).unwrap(), s.clone());
        if stratified {
            for l in Label::ALL {
                let total = data.iter().filter(|e| e.label == l).count() as f64;
                let train = s.train.iter().filter(|e| e.label == l).count() as f64;
                prop_assert!((train - 0.6 * total).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn dataset_file_round_trip(data in examples(40), seed in any::<u64>()) {
        prop_assume!(Label::ALL.iter().all(|l| data.iter().any(|e| e.label == *l)));
        let s = split(&data, SplitRatios::new(0.8, 0.1, 0.1).unwrap(), seed, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.wfad");
        write_dataset(&s, &path).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), s);
    }

    #[test]
    fn metrics_match_oracles(seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (scores, truth, preds) = random_instance(&mut rng, 10);
        let m = classification_metrics(&preds, &truth).unwrap();
        let (acc, p, r, f1) = oracle_classification(&preds, &truth);
        prop_assert!((m.accuracy - acc).abs() < 1e-12);
        prop_assert!((m.precision - p).abs() < 1e-12);
        prop_assert!((m.recall - r).abs() < 1e-12);
        prop_assert!((m.f1 - f1).abs() < 1e-12);
        let pos = truth.iter().filter(|l| **l == Label::Anomalous).count();
        if pos > 0 && pos < truth.len() {
            let rm = ranking_metrics(&scores, &truth, None).unwrap();
            prop_assert_eq!(rm.k, pos);
            prop_assert!((rm.roc_auc - oracle_auc(&scores, &truth)).abs() < 1e-12);
            prop_assert!((rm.average_precision - oracle_average_precision(&scores, &truth)).abs() < 1e-12);
            prop_assert!((rm.precision_at_k - oracle_precision_at_k(&scores, &truth, pos)).abs() < 1e-12);
        } else {
            prop_assert!(ranking_metrics(&scores, &truth, None).is_err());
        }
    }

    #[test]
    fn ranking_is_invariant_to_monotone_rescaling(seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (scores, truth, _) = random_instance(&mut rng, 12);
        let pos = truth.iter().filter(|l| **l == Label::Anomalous).count();
        prop_assume!(pos > 0 && pos < truth.len());
        let scaled: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        let a = ranking_metrics(&scores, &truth, None).unwrap();
        let b = ranking_metrics(&scaled, &truth, None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn nested_order_is_a_stratified_permutation(data in examples(60), seed in any::<u64>()) {
        let order = nested_portion_order(&data, seed);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..data.len()).collect::<Vec<_>>());
        let total_anom = data.iter().filter(|e| e.label == Label::Anomalous).count() as f64;
        let n = data.len() as f64;
        // Every prefix holds each class within one example of its share.
        let mut anom = 0.0;
        for (i, &idx) in order.iter().enumerate() {
            if data[idx].label == Label::Anomalous {
                anom += 1.0;
            }
            let share = total_anom * (i + 1) as f64 / n;
            prop_assert!((anom - share).abs() <= 1.0 + 1e-9, "prefix {} holds {} anomalies, share {}", i + 1, anom, share);
        }
    }
}
