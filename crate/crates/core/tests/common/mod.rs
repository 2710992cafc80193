// SPDX-License-Identifier: Apache-2.0

//! Brute-force oracles and synthetic data shared by the integration tests.
//! Each oracle is written from the metric's definition, not from the
//! library's implementation.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::PathBuf;
use wfad_core::dataset::LabeledExample;
use wfad_core::detect::DetectionTrace;
use wfad_core::ingest::{serialize_full, FeatureSchema, JobRecord, Label};

pub const FEATURES: [&str; 5] = [
    "wms_delay",
    "queue_delay",
    "runtime",
    "post_script_delay",
    "stage_in_delay",
];

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn schema() -> FeatureSchema {
    FeatureSchema::durations(&FEATURES).unwrap()
}

pub fn reference_record() -> JobRecord {
    JobRecord::new("ref-job", "wf")
        .with_value("wms_delay", 6.0)
        .with_value("queue_delay", 22.0)
        .with_value("runtime", 2090.0)
        .with_value("post_script_delay", 5.0)
        .with_value("stage_in_delay", 1310.0)
        .with_label(Label::Anomalous)
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn oracle_counts(preds: &[Label], truth: &[Label]) -> Counts {
    let count = |p: Label, t: Label| preds.iter().zip(truth).filter(|(a, b)| **a == p && **b == t).count();
    Counts {
        tp: count(Label::Anomalous, Label::Anomalous),
        fp: count(Label::Anomalous, Label::Normal),
        tn: count(Label::Normal, Label::Normal),
        fn_: count(Label::Normal, Label::Anomalous),
    }
}

/// `(accuracy, precision, recall, f1)`, with 0 whenever a denominator is 0.
pub fn oracle_classification(preds: &[Label], truth: &[Label]) -> (f64, f64, f64, f64) {
    let c = oracle_counts(preds, truth);
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = div(c.tp, c.tp + c.fp);
    let r = div(c.tp, c.tp + c.fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (div(c.tp + c.tn, preds.len()), p, r, f1)
}

/// Probability that a random anomaly outscores a random normal, ties ½.
pub fn oracle_auc(scores: &[f64], truth: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if truth[i] == Label::Anomalous && truth[j] == Label::Normal {
                pairs += 1;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs as f64
}

/// Σ over distinct thresholds t (descending) of ΔRecall(t) · Precision(t),
/// where the prediction at t is "score ≥ t".
pub fn oracle_average_precision(scores: &[f64], truth: &[Label]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = truth.iter().filter(|l| **l == Label::Anomalous).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let hits = selected.iter().filter(|&&i| truth[i] == Label::Anomalous).count() as f64;
        let recall = hits / positives;
        ap += (recall - prev_recall) * hits / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// Mean precision over every size-`k` set that a ranking by score could
/// select under some tie-break.
pub fn oracle_precision_at_k(scores: &[f64], truth: &[Label], k: usize) -> f64 {
    let n = scores.len();
    let mut total = 0.0;
    let mut sets = 0usize;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let inside = |i: usize| mask & (1 << i) != 0;
        // Valid top-k set: nothing outside beats anything inside.
        let valid = (0..n)
            .filter(|&i| inside(i))
            .all(|i| (0..n).filter(|&j| !inside(j)).all(|j| scores[i] >= scores[j]));
        if valid {
            sets += 1;
            total += (0..n).filter(|&i| inside(i) && truth[i] == Label::Anomalous).count() as f64 / k as f64;
        }
    }
    total / sets as f64
}

/// Random scores drawn from a coarse grid so that ties are frequent.
pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<Label>, Vec<Label>) {
    let n = rng.gen_range(1..=max_n);
    let scores = (0..n).map(|_| rng.gen_range(0..=8) as f64 / 8.0).collect();
    let label = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.5) {
            Label::Anomalous
        } else {
            Label::Normal
        }
    };
    let truth = (0..n).map(|_| label(rng)).collect();
    let preds = (0..n).map(|_| label(rng)).collect();
    (scores, truth, preds)
}

// ------------------------------------------------------- early detection

/// First step whose label equals the truth, scanned from the start.
pub fn oracle_early_detection(traces: &[DetectionTrace]) -> (BTreeMap<usize, usize>, usize) {
    let mut histogram = BTreeMap::new();
    let mut undetected = 0;
    for t in traces {
        let truth = t.truth.unwrap();
        let mut found = None;
        for s in &t.steps {
            if s.prediction.label == truth {
                found = Some(s.prefix_len);
                break;
            }
        }
        match found {
            Some(p) => *histogram.entry(p).or_insert(0) += 1,
            None => undetected += 1,
        }
    }
    (histogram, undetected)
}

// ---------------------------------------------------------- synthetic data

/// Runtime distribution parameters per class.
#[derive(Clone, Copy, Debug)]
pub struct Synth {
    pub normal_runtime: f64,
    pub anomalous_runtime: f64,
    pub runtime_sd: f64,
    pub anomaly_fraction: f64,
}

impl Default for Synth {
    fn default() -> Self {
        Synth {
            normal_runtime: 300.0,
            anomalous_runtime: 2000.0,
            runtime_sd: 100.0,
            anomaly_fraction: 0.3,
        }
    }
}

/// `n` jobs whose exact anomaly count is `round(n · fraction)`. Only the
/// runtime depends on the class; other features are shared noise.
pub fn synthetic_jobs(n: usize, synth: Synth, seed: u64, prefix: &str) -> Vec<JobRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anomalies = (n as f64 * synth.anomaly_fraction).round() as usize;
    let normal_rt = Normal::new(synth.normal_runtime, synth.runtime_sd).unwrap();
    let anomalous_rt = Normal::new(synth.anomalous_runtime, synth.runtime_sd).unwrap();
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < anomalies { Label::Anomalous } else { Label::Normal })
        .collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let runtime: f64 = match label {
                Label::Anomalous => anomalous_rt.sample(&mut rng),
                Label::Normal => normal_rt.sample(&mut rng),
            };
            JobRecord::new(format!("{prefix}{i:05}"), format!("{prefix}wf"))
                .with_value("wms_delay", rng.gen_range(1..10) as f64)
                .with_value("queue_delay", rng.gen_range(5..40) as f64)
                .with_value("runtime", runtime.max(1.0).round())
                .with_value("post_script_delay", rng.gen_range(3..8) as f64)
                .with_value("stage_in_delay", rng.gen_range(5..60) as f64)
                .with_label(label)
        })
        .collect()
}

pub fn to_examples(records: &[JobRecord], schema: &FeatureSchema) -> Vec<LabeledExample> {
    records
        .iter()
        .map(|r| {
            LabeledExample::new(
                serialize_full(r, schema).unwrap(),
                r.workflow_id.clone(),
                r.label.unwrap(),
            )
        })
        .collect()
}

pub fn synthetic_examples(n: usize, synth: Synth, seed: u64, prefix: &str) -> Vec<LabeledExample> {
    to_examples(&synthetic_jobs(n, synth, seed, prefix), &schema())
}
