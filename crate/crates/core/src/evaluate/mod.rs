// SPDX-License-Identifier: Apache-2.0

//! Evaluation reports, the empty-sentence bias probe and transfer
//! experiments.

pub mod metrics;

use crate::backend::{
    fit_with_config, from_artifact, BackendError, Classifier, Prediction, Sampling, TrainConfig, TrainReport,
};
use crate::dataset::{DatasetSplit, LabeledExample};
use crate::ingest::Label;
use metrics::{classification_metrics, ranking_metrics, Confusion, MetricError, RankingMetrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("evaluation configuration: {0}")]
    Config(String),
    #[error("bias probe: {0}")]
    Probe(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub job_id: String,
    pub truth: Label,
    pub predicted: Label,
    pub anomaly_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
    pub degenerate_precision: bool,
    /// Absent when the ground truth holds a single class.
    pub ranking: Option<RankingMetrics>,
    pub items: Vec<EvalItem>,
}

/// Builds a report from stored predictions, aligned with `examples`.
pub fn report_from_predictions(examples: &[LabeledExample], preds: &[Prediction]) -> Result<EvalReport, EvalError> {
    if examples.len() != preds.len() {
        return Err(MetricError::LengthMismatch(preds.len(), examples.len()).into());
    }
    let truth: Vec<Label> = examples.iter().map(|e| e.label).collect();
    let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let m = classification_metrics(&labels, &truth)?;
    let scores: Vec<f64> = preds.iter().map(Prediction::anomaly_score).collect();
    let both = truth.contains(&Label::Normal) && truth.contains(&Label::Anomalous);
    let ranking = if both {
        Some(ranking_metrics(&scores, &truth, None)?)
    } else {
        None
    };
    Ok(EvalReport {
        examples: examples.len(),
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        counts: m.counts,
        degenerate_precision: m.degenerate_precision,
        ranking,
        items: examples
            .iter()
            .zip(preds)
            .map(|(e, p)| EvalItem {
                job_id: e.job_id().to_string(),
                truth: e.label,
                predicted: p.label,
                anomaly_score: p.anomaly_score(),
            })
            .collect(),
    })
}

pub fn evaluate(backend: &dyn Classifier, examples: &[LabeledExample]) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(MetricError::Empty.into());
    }
    let texts: Vec<&str> = examples.iter().map(|e| e.text()).collect();
    let preds = backend.predict_batch(&texts)?;
    report_from_predictions(examples, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasProbeReport {
    pub runs: usize,
    /// Labels were drawn from the backend's distribution rather than argmax.
    pub stochastic: bool,
    pub predictions: Vec<Prediction>,
    pub normal_frequency: f64,
    pub anomalous_frequency: f64,
    /// `|normal_frequency - anomalous_frequency|`.
    pub gap: f64,
    /// `|mean P(normal) - mean P(anomalous)|` over the runs.
    pub probability_gap: f64,
}

/// Classifies the empty sentence `runs` times.
///
/// The backend is switched to seeded stochastic sampling when it supports
/// it and restored to deterministic mode afterwards. In deterministic mode a
/// verdict with score exactly 0.5 counts one half towards each label.
pub fn bias_probe(backend: &mut dyn Classifier, runs: usize, seed: u64) -> Result<BiasProbeReport, EvalError> {
    if runs == 0 {
        return Err(EvalError::Config("bias probe needs at least one run".into()));
    }
    if !backend.is_ready() {
        return Err(BackendError::NotReady(format!("{} is not ready", backend.name())).into());
    }
    let stochastic = match backend.set_sampling(Sampling::Stochastic { seed }) {
        Ok(()) => true,
        Err(BackendError::Unsupported(_)) => false,
        Err(e) => return Err(e.into()),
    };
    let mut predictions = Vec::with_capacity(runs);
    let mut failure = None;
    for _ in 0..runs {
        match backend.predict("") {
            Ok(p) => predictions.push(p),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if stochastic {
        backend.set_sampling(Sampling::Deterministic)?;
    }
    if let Some(e) = failure {
        return Err(EvalError::Probe(format!("backend rejected the empty sentence: {e}")));
    }
    let normal_mass: f64 = predictions
        .iter()
        .map(|p| match (stochastic, p.label) {
            (false, _) if p.score == 0.5 => 0.5,
            (_, Label::Normal) => 1.0,
            (_, Label::Anomalous) => 0.0,
        })
        .sum();
    let normal_frequency = normal_mass / runs as f64;
    let anomalous_frequency = 1.0 - normal_frequency;
    let mean_anomaly = predictions.iter().map(Prediction::anomaly_score).sum::<f64>() / runs as f64;
    Ok(BiasProbeReport {
        runs,
        stochastic,
        predictions,
        normal_frequency,
        anomalous_frequency,
        gap: (normal_frequency - anomalous_frequency).abs(),
        probability_gap: (1.0 - 2.0 * mean_anomaly).abs(),
    })
}

pub type BackendFactory<'a> = dyn Fn(&str) -> Result<Box<dyn Classifier>, BackendError> + Sync + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransferCell {
    Accuracy(f64),
    Error { error: String },
}

impl TransferCell {
    pub fn accuracy(&self) -> Option<f64> {
        match self {
            TransferCell::Accuracy(a) => Some(*a),
            TransferCell::Error { .. } => None,
        }
    }
}

/// `cells[i][j]`: trained on `datasets[i]`, evaluated on the test split of
/// `datasets[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub datasets: Vec<String>,
    pub cells: Vec<Vec<TransferCell>>,
}

fn row_of_errors(n: usize, message: &str) -> Vec<TransferCell> {
    vec![
        TransferCell::Error {
            error: message.to_string()
        };
        n
    ]
}

/// Rows run concurrently, one freshly built backend each. A failing factory
/// or fit turns the whole row into error cells.
pub fn transfer_matrix(
    datasets: &[(String, DatasetSplit)],
    factory: &BackendFactory<'_>,
    config: &TrainConfig,
) -> Result<TransferMatrix, EvalError> {
    if datasets.len() < 2 {
        return Err(EvalError::Config(
            "a transfer matrix needs at least two datasets".into(),
        ));
    }
    let n = datasets.len();
    let cells = datasets
        .par_iter()
        .map(|(id, split)| {
            let mut backend = match factory(id) {
                Ok(b) => b,
                Err(e) => return row_of_errors(n, &format!("backend construction failed: {e}")),
            };
            if let Err(e) = fit_with_config(backend.as_mut(), &split.train, &split.validation, config) {
                return row_of_errors(n, &format!("fit failed: {e}"));
            }
            datasets
                .iter()
                .map(|(_, target)| match evaluate(backend.as_ref(), &target.test) {
                    Ok(r) => TransferCell::Accuracy(r.accuracy),
                    Err(e) => TransferCell::Error { error: e.to_string() },
                })
                .collect()
        })
        .collect();
    Ok(TransferMatrix {
        datasets: datasets.iter().map(|(id, _)| id.clone()).collect(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalPoint {
    pub portion: f64,
    pub d2_examples: usize,
    pub accuracy: f64,
    /// Absent for portion 0.
    pub d2_report: Option<TrainReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalCurve {
    pub source: String,
    pub target: String,
    pub d1_report: TrainReport,
    pub points: Vec<IncrementalPoint>,
}

/// Stratified, nested ordering of `examples`: each class is shuffled with
/// `seed`, then the classes are interleaved so that every prefix holds both
/// in proportion to their totals.
pub fn nested_portion_order(examples: &[LabeledExample], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = Label::ALL
        .iter()
        .map(|&l| (0..examples.len()).filter(|&i| examples[i].label == l).collect())
        .collect();
    for members in by_class.iter_mut() {
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
    }
    let mut taken = vec![0usize; by_class.len()];
    let mut order = Vec::with_capacity(examples.len());
    while order.len() < examples.len() {
        // Class furthest behind its share; ties go to the rarer class.
        let c = (0..by_class.len())
            .filter(|&c| taken[c] < by_class[c].len())
            .min_by(|&a, &b| {
                let ra = taken[a] as f64 / by_class[a].len() as f64;
                let rb = taken[b] as f64 / by_class[b].len() as f64;
                ra.partial_cmp(&rb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(by_class[a].len().cmp(&by_class[b].len()))
            })
            .expect("some class has members left");
        order.push(by_class[c][taken[c]]);
        taken[c] += 1;
    }
    order
}

/// Trains on `d1`, then for each portion continues a fresh copy of that
/// model on the first `ceil(portion * |d2.train|)` examples of `d2` and
/// measures accuracy on `d2`'s test split.
pub fn incremental_transfer(
    factory: &BackendFactory<'_>,
    d1: (&str, &DatasetSplit),
    d2: (&str, &DatasetSplit),
    portions: &[f64],
    config_d1: &TrainConfig,
    config_d2: &TrainConfig,
) -> Result<IncrementalCurve, EvalError> {
    if portions.is_empty() {
        return Err(EvalError::Config("portion schedule is empty".into()));
    }
    if portions.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(EvalError::Config("portions must lie in [0, 1]".into()));
    }
    if portions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::Config("portions must be strictly increasing".into()));
    }
    let mut base = factory(d1.0)?;
    let d1_report = fit_with_config(base.as_mut(), &d1.1.train, &d1.1.validation, config_d1)?;
    let checkpoint = base.to_artifact()?;
    let order = nested_portion_order(&d2.1.train, config_d2.seed);
    let mut points = Vec::with_capacity(portions.len());
    for &portion in portions {
        let mut model = from_artifact(checkpoint.clone())?;
        let count = (portion * order.len() as f64).ceil() as usize;
        let d2_report = if count > 0 {
            let subset: Vec<LabeledExample> = order[..count].iter().map(|&i| d2.1.train[i].clone()).collect();
            Some(fit_with_config(model.as_mut(), &subset, &d2.1.validation, config_d2)?)
        } else {
            None
        };
        let report = evaluate(model.as_ref(), &d2.1.test)?;
        points.push(IncrementalPoint {
            portion,
            d2_examples: count,
            accuracy: report.accuracy,
            d2_report,
        });
    }
    Ok(IncrementalCurve {
        source: d1.0.to_string(),
        target: d2.0.to_string(),
        d1_report,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockRule};
    use crate::ingest::Sentence;

    fn ex(i: usize, text: &str, label: Label) -> LabeledExample {
        LabeledExample::new(
            Sentence {
                text: text.into(),
                job_id: format!("j{i}"),
                prefix_len: 1,
            },
            "w",
            label,
        )
    }

    #[test]
    fn probe_unbiased_and_always_normal() {
        let mut mock = MockBackend::new(vec![]);
        // The mock supports sampling; force the deterministic path with a
        // wrapper that rejects it.
        struct Det(MockBackend);
        impl Classifier for Det {
            fn name(&self) -> &'static str {
                "det"
            }
            fn is_ready(&self) -> bool {
                true
            }
            fn fit(
                &mut self,
                _: &[LabeledExample],
                _: &[LabeledExample],
                c: &TrainConfig,
            ) -> Result<TrainReport, BackendError> {
                Ok(TrainReport::untrained("det", c))
            }
            fn predict(&self, t: &str) -> Result<Prediction, BackendError> {
                self.0.predict(t)
            }
            fn to_artifact(&self) -> Result<crate::backend::Artifact, BackendError> {
                self.0.to_artifact()
            }
        }
        let mut det = Det(MockBackend::new(vec![]));
        let r = bias_probe(&mut det, 10, 0).unwrap();
        assert!(!r.stochastic);
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.probability_gap, 0.0);

        let mut always = MockBackend::new(vec![]).with_empty_normal_probability(1.0);
        assert_eq!(bias_probe(&mut always, 10, 0).unwrap().gap, 1.0);

        let r = bias_probe(&mut mock, 1, 3).unwrap();
        assert!(r.stochastic);
        assert!(!mock.sequential_inference(), "sampling restored to deterministic");
    }

    #[test]
    fn probe_rejects_zero_runs() {
        let mut mock = MockBackend::new(vec![]);
        assert!(matches!(bias_probe(&mut mock, 0, 0), Err(EvalError::Config(_))));
    }

    #[test]
    fn report_carries_ranking_only_with_both_classes() {
        let mock = MockBackend::new(vec![MockRule::feature_above("runtime", 1000.0)]);
        let mixed = vec![
            ex(0, "runtime is 2000.0", Label::Anomalous),
            ex(1, "runtime is 10.0", Label::Normal),
        ];
        let r = evaluate(&mock, &mixed).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.ranking.unwrap().roc_auc, 1.0);
        let single = vec![ex(0, "runtime is 10.0", Label::Normal)];
        assert!(evaluate(&mock, &single).unwrap().ranking.is_none());
        assert!(matches!(
            evaluate(&mock, &[]),
            Err(EvalError::Metric(MetricError::Empty))
        ));
    }

    #[test]
    fn nested_order_is_stratified_permutation() {
        let examples: Vec<_> = (0..30)
            .map(|i| ex(i, "x is 1.0", if i % 3 == 0 { Label::Anomalous } else { Label::Normal }))
            .collect();
        let order = nested_portion_order(&examples, 4);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..30).collect::<Vec<_>>());
        for k in [3, 9, 15] {
            let anomalies = order[..k]
                .iter()
                .filter(|&&i| examples[i].label == Label::Anomalous)
                .count();
            assert_eq!(anomalies, k / 3);
        }
    }

    #[test]
    fn incremental_rejects_bad_schedule() {
        let split = DatasetSplit {
            train: vec![],
            validation: vec![],
            test: vec![],
        };
        let factory = |_: &str| -> Result<Box<dyn Classifier>, BackendError> { Ok(Box::new(MockBackend::new(vec![]))) };
        let c = TrainConfig::default();
        for bad in [&[0.5, 0.5][..], &[0.6, 0.2], &[1.5], &[]] {
            assert!(matches!(
                incremental_transfer(&factory, ("a", &split), ("b", &split), bad, &c, &c),
                Err(EvalError::Config(_))
            ));
        }
    }
}
