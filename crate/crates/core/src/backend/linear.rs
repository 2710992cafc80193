// SPDX-License-Identifier: Apache-2.0

//! Logistic baseline over the numeric values parsed back out of clauses.
//!
//! Input vector for a schema of `n` features has `2n` entries: a
//! standardized value per feature (0 when absent) followed by an absence
//! indicator per feature. The model is linear in that vector but factored as
//! a square projection ("body", identity at initialization) followed by a
//! logistic head, so the head can be trained alone with the body frozen.

use super::{
    decode_payload, encode_payload, require_both_classes, Artifact, BackendError, Classifier, EpochMetrics,
    FreezePolicy, Prediction, Sampling, TrainConfig, TrainReport,
};
use crate::dataset::LabeledExample;
use crate::evaluate::metrics::{classification_metrics, ClassificationMetrics};
use crate::ingest::{parse_clauses, FeatureSchema, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Mutex;
use std::time::Instant;

pub const BODY_GROUPS: [&str; 2] = ["body.bias", "body.weight"];
pub const HEAD_GROUPS: [&str; 2] = ["head.bias", "head.weight"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParameters {
    /// Per-feature standardization, fixed by the first fit.
    pub scaler_mean: Vec<f64>,
    pub scaler_scale: Vec<f64>,
    /// Row-major `dim x dim`.
    pub body_weight: Vec<f64>,
    pub body_bias: Vec<f64>,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

impl LinearParameters {
    fn init(schema: &FeatureSchema, train: &[LabeledExample]) -> LinearParameters {
        let n = schema.len();
        let mut sums = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for e in train {
            for (idx, v) in known_values(schema, e.text()).into_iter().flatten() {
                sums[idx] += v;
                sq[idx] += v * v;
                counts[idx] += 1;
            }
        }
        let mut scaler_mean = vec![0.0; n];
        let mut scaler_scale = vec![1.0; n];
        for i in 0..n {
            if counts[i] > 0 {
                let c = counts[i] as f64;
                let mean = sums[i] / c;
                let var = (sq[i] / c - mean * mean).max(0.0);
                scaler_mean[i] = mean;
                scaler_scale[i] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        let dim = 2 * n;
        let mut body_weight = vec![0.0; dim * dim];
        for i in 0..dim {
            body_weight[i * dim + i] = 1.0;
        }
        LinearParameters {
            scaler_mean,
            scaler_scale,
            body_weight,
            body_bias: vec![0.0; dim],
            head_weight: vec![0.0; dim],
            head_bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.head_weight.len()
    }

    pub fn body_parameter_count(&self) -> usize {
        self.body_weight.len() + self.body_bias.len()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.head_weight.len() + 1
    }

    /// SHA-256 over the bit patterns of the body parameters.
    pub fn body_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.body_weight.iter().chain(&self.body_bias) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        (0..dim)
            .map(|r| {
                let row = &self.body_weight[r * dim..(r + 1) * dim];
                self.body_bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn head_logit(&self, h: &[f64]) -> f64 {
        self.head_bias + self.head_weight.iter().zip(h).map(|(w, v)| w * v).sum::<f64>()
    }

    fn anomaly_probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.head_logit(&self.hidden(x)))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `(schema index, value)` for every clause naming a schema feature.
fn known_values(schema: &FeatureSchema, text: &str) -> Result<Vec<(usize, f64)>, BackendError> {
    let clauses = parse_clauses(text).map_err(|e| BackendError::InvalidInput(e.to_string()))?;
    clauses
        .into_iter()
        .filter_map(|(name, value)| schema.index_of(&name).map(|idx| (idx, value)))
        .map(|(idx, value)| {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(|v| (idx, v))
                .ok_or_else(|| BackendError::InvalidInput(format!("value `{value}` is not a finite number")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LinearState {
    schema: FeatureSchema,
    params: Option<LinearParameters>,
    sampling: Sampling,
}

#[derive(Debug)]
pub struct LinearBaseline {
    state: LinearState,
    rng: Mutex<Option<ChaCha8Rng>>,
}

impl LinearBaseline {
    pub const NAME: &'static str = "linear-baseline";

    pub fn new(schema: FeatureSchema) -> LinearBaseline {
        LinearBaseline {
            state: LinearState {
                schema,
                params: None,
                sampling: Sampling::Deterministic,
            },
            rng: Mutex::new(None),
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.state.schema
    }

    pub fn parameters(&self) -> Option<&LinearParameters> {
        self.state.params.as_ref()
    }

    pub fn from_artifact(artifact: &Artifact) -> Result<LinearBaseline, BackendError> {
        let state: LinearState = decode_payload(artifact, Self::NAME)?;
        if let Some(hash) = &artifact.schema_hash {
            if *hash != state.schema.fingerprint() {
                return Err(BackendError::Artifact(
                    "schema hash does not match the embedded schema".into(),
                ));
            }
        }
        if let Some(p) = &state.params {
            let dim = 2 * state.schema.len();
            let shapes_ok = p.scaler_mean.len() == state.schema.len()
                && p.scaler_scale.len() == state.schema.len()
                && p.body_weight.len() == dim * dim
                && p.body_bias.len() == dim
                && p.head_weight.len() == dim;
            if !shapes_ok {
                return Err(BackendError::Artifact(
                    "parameter shapes do not match the schema".into(),
                ));
            }
        }
        let mut model = LinearBaseline {
            state,
            rng: Mutex::new(None),
        };
        let sampling = model.state.sampling;
        model.set_sampling(sampling)?;
        Ok(model)
    }

    fn encode(&self, params: &LinearParameters, text: &str) -> Result<Vec<f64>, BackendError> {
        let n = self.state.schema.len();
        let mut x = vec![0.0; 2 * n];
        for slot in &mut x[n..] {
            *slot = 1.0;
        }
        for (idx, v) in known_values(&self.state.schema, text)? {
            x[idx] = (v - params.scaler_mean[idx]) / params.scaler_scale[idx];
            x[n + idx] = 0.0;
        }
        Ok(x)
    }

    /// Probability of the anomalous class for `text`.
    pub fn anomaly_probability(&self, text: &str) -> Result<f64, BackendError> {
        let params = self.ready_params()?;
        Ok(params.anomaly_probability(&self.encode(params, text)?))
    }

    fn ready_params(&self) -> Result<&LinearParameters, BackendError> {
        self.state
            .params
            .as_ref()
            .ok_or_else(|| BackendError::NotReady("linear baseline has not been fitted".into()))
    }

    fn deterministic_metrics(
        &self,
        params: &LinearParameters,
        validation: &[LabeledExample],
    ) -> Result<ClassificationMetrics, BackendError> {
        let mut preds = Vec::with_capacity(validation.len());
        for e in validation {
            let p = params.anomaly_probability(&self.encode(params, e.text())?);
            preds.push(Prediction::from_anomaly_probability(p).label);
        }
        let truth: Vec<Label> = validation.iter().map(|e| e.label).collect();
        classification_metrics(&preds, &truth).map_err(|e| BackendError::InvalidInput(e.to_string()))
    }

    fn train_epoch(
        params: &mut LinearParameters,
        inputs: &[Vec<f64>],
        targets: &[f64],
        order: &[usize],
        config: &TrainConfig,
    ) -> f64 {
        let dim = params.dim();
        let head_only = config.freeze_policy == FreezePolicy::HeadOnly;
        let mut loss = 0.0;
        let mut g_head = vec![0.0; dim];
        let mut g_body = if head_only { Vec::new() } else { vec![0.0; dim * dim] };
        let mut g_body_bias = if head_only { Vec::new() } else { vec![0.0; dim] };
        for batch in order.chunks(config.batch_size) {
            g_head.iter_mut().for_each(|g| *g = 0.0);
            g_body.iter_mut().for_each(|g| *g = 0.0);
            g_body_bias.iter_mut().for_each(|g| *g = 0.0);
            let mut g_head_bias = 0.0;
            for &i in batch {
                // With a frozen body, `inputs` already holds the hidden vectors.
                let hidden_owned;
                let h: &[f64] = if head_only {
                    &inputs[i]
                } else {
                    hidden_owned = params.hidden(&inputs[i]);
                    &hidden_owned
                };
                let p = sigmoid(params.head_logit(h));
                loss += log_loss(p, targets[i]);
                let delta = p - targets[i];
                for (g, v) in g_head.iter_mut().zip(h) {
                    *g += delta * v;
                }
                g_head_bias += delta;
                if !head_only {
                    let x = &inputs[i];
                    for r in 0..dim {
                        let dh = delta * params.head_weight[r];
                        if dh == 0.0 {
                            continue;
                        }
                        g_body_bias[r] += dh;
                        let row = &mut g_body[r * dim..(r + 1) * dim];
                        for (g, v) in row.iter_mut().zip(x) {
                            *g += dh * v;
                        }
                    }
                }
            }
            let scale = config.learning_rate / batch.len() as f64;
            for (w, g) in params.head_weight.iter_mut().zip(&g_head) {
                *w -= scale * g + config.learning_rate * config.l2 * *w;
            }
            params.head_bias -= scale * g_head_bias;
            if !head_only {
                for (w, g) in params.body_weight.iter_mut().zip(&g_body) {
                    *w -= scale * g + config.learning_rate * config.l2 * *w;
                }
                for (b, g) in params.body_bias.iter_mut().zip(&g_body_bias) {
                    *b -= scale * g;
                }
            }
        }
        loss / order.len().max(1) as f64
    }
}

impl Classifier for LinearBaseline {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn is_ready(&self) -> bool {
        self.state.params.is_some()
    }

    /// Warm-starts from the current parameters when already fitted; the
    /// standardization is fixed by the first fit.
    fn fit(
        &mut self,
        train: &[LabeledExample],
        validation: &[LabeledExample],
        config: &TrainConfig,
    ) -> Result<TrainReport, BackendError> {
        config.validate()?;
        require_both_classes(train)?;
        if validation.is_empty() {
            return Err(BackendError::InvalidInput("validation set is empty".into()));
        }
        if self.state.schema.is_empty() {
            return Err(BackendError::Config("schema has no features".into()));
        }
        let started = Instant::now();
        let mut params = match self.state.params.take() {
            Some(p) => p,
            None => LinearParameters::init(&self.state.schema, train),
        };
        let head_only = config.freeze_policy == FreezePolicy::HeadOnly;
        let encoded: Result<Vec<Vec<f64>>, BackendError> = train
            .iter()
            .map(|e| {
                let x = self.encode(&params, e.text())?;
                Ok(if head_only { params.hidden(&x) } else { x })
            })
            .collect();
        let inputs = match encoded {
            Ok(v) => v,
            Err(e) => {
                self.state.params = Some(params);
                return Err(e);
            }
        };
        let targets: Vec<f64> = train
            .iter()
            .map(|e| if e.label.is_anomalous() { 1.0 } else { 0.0 })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epochs = Vec::with_capacity(config.epochs);
        let mut best: Option<(f64, usize, LinearParameters)> = None;
        for epoch in 1..=config.epochs {
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let loss = Self::train_epoch(&mut params, &inputs, &targets, &order, config);
            if !loss.is_finite() {
                return Err(BackendError::DegenerateData(format!(
                    "training diverged at epoch {epoch}"
                )));
            }
            let metrics = match self.deterministic_metrics(&params, validation) {
                Ok(m) => m,
                Err(e) => {
                    self.state.params = Some(params);
                    return Err(e);
                }
            };
            if config.keep_best_epoch && best.as_ref().is_none_or(|(acc, _, _)| metrics.accuracy > *acc) {
                best = Some((metrics.accuracy, epoch, params.clone()));
            }
            epochs.push(EpochMetrics::from_metrics(epoch, &metrics, Some(loss)));
        }
        let best_epoch = match best {
            Some((_, epoch, p)) => {
                params = p;
                Some(epoch)
            }
            None => None,
        };
        let (trainable, touched): (usize, Vec<String>) = match config.freeze_policy {
            FreezePolicy::HeadOnly => (
                params.head_parameter_count(),
                HEAD_GROUPS.iter().map(|s| s.to_string()).collect(),
            ),
            FreezePolicy::AllParameters => (
                params.head_parameter_count() + params.body_parameter_count(),
                BODY_GROUPS.iter().chain(&HEAD_GROUPS).map(|s| s.to_string()).collect(),
            ),
        };
        let total = params.head_parameter_count() + params.body_parameter_count();
        self.state.params = Some(params);
        Ok(TrainReport {
            backend: Self::NAME.into(),
            freeze_policy: config.freeze_policy,
            train_examples: train.len(),
            epochs,
            trainable_parameters: trainable,
            total_parameters: total,
            touched_parameters: touched,
            best_epoch,
            wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
        })
    }

    fn predict(&self, text: &str) -> Result<Prediction, BackendError> {
        let p = self.anomaly_probability(text)?;
        let mut guard = self.rng.lock().unwrap_or_else(|e| e.into_inner());
        Ok(match guard.as_mut() {
            Some(rng) => {
                if rng.gen::<f64>() < p {
                    Prediction::new(Label::Anomalous, p)
                } else {
                    Prediction::new(Label::Normal, 1.0 - p)
                }
            }
            None => Prediction::from_anomaly_probability(p),
        })
    }

    fn set_sampling(&mut self, sampling: Sampling) -> Result<(), BackendError> {
        self.state.sampling = sampling;
        *self.rng.get_mut().unwrap_or_else(|e| e.into_inner()) = match sampling {
            Sampling::Deterministic => None,
            Sampling::Stochastic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Ok(())
    }

    fn sequential_inference(&self) -> bool {
        matches!(self.state.sampling, Sampling::Stochastic { .. })
    }

    fn to_artifact(&self) -> Result<Artifact, BackendError> {
        Ok(Artifact {
            backend: Self::NAME.into(),
            schema_hash: Some(self.state.schema.fingerprint()),
            payload: encode_payload(&self.state)?,
        })
    }
}
