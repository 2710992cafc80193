// SPDX-License-Identifier: Apache-2.0

//! Classifier contract and the bundled backends.
//!
//! Every backend classifies sentence text into [`Label`]s. Four
//! implementations ship here:
//!
//! - [`MockBackend`]: rule table, for tests and pipelines that need a fixed
//!   oracle.
//! - [`LinearBaseline`]: trainable logistic model over the numbers parsed
//!   back out of the clauses, with a frozen-able feature projection.
//! - [`SequenceAdapter`]: forwards to an external fine-tuned sequence
//!   classifier.
//! - [`IclClassifier`]: wraps a [`Generator`] (external generative model or
//!   [`MockGenerator`]) with prompt construction and response parsing.
//!
//! Backends persist to a single-file, versioned container; see
//! [`save_model`] and [`load_model`].

mod adapter;
mod icl;
mod linear;
mod mock;

pub use adapter::{EndpointConfig, GenerativeAdapter, SequenceAdapter, Transport};
pub use icl::{Generation, Generator, GeneratorBackend, IclClassifier, MockGenerator, ReplyStyle};
pub use linear::{LinearBaseline, LinearParameters};
pub use mock::{MockBackend, MockRule};

use crate::dataset::{debias_augment, LabeledExample};
use crate::evaluate::metrics::ClassificationMetrics;
use crate::ingest::Label;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const ARTIFACT_FORMAT: &str = "wfad-model";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend is not ready: {0}")]
    NotReady(String),
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("adapter: {0}")]
    Adapter(String),
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// A verdict. `score` is the probability assigned to `label`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

impl Prediction {
    pub fn new(label: Label, score: f64) -> Prediction {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0, 1]");
        Prediction {
            label,
            score: score.clamp(0.0, 1.0),
            raw_output: None,
        }
    }

    /// Argmax verdict for a probability of the anomalous class. Exact ties
    /// resolve to normal.
    pub fn from_anomaly_probability(p_anomalous: f64) -> Prediction {
        if p_anomalous > 0.5 {
            Prediction::new(Label::Anomalous, p_anomalous)
        } else {
            Prediction::new(Label::Normal, 1.0 - p_anomalous)
        }
    }

    /// Probability of the anomalous class implied by this verdict.
    pub fn anomaly_score(&self) -> f64 {
        match self.label {
            Label::Anomalous => self.score,
            Label::Normal => 1.0 - self.score,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    #[default]
    AllParameters,
    /// Only the classification head is trained.
    HeadOnly,
}

/// How a backend turns its probabilities into a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Sampling {
    /// Argmax; `predict` is a pure function of model state and text.
    #[default]
    Deterministic,
    /// Draw the label from the predicted distribution with a seeded stream.
    Stochastic { seed: u64 },
}

/// Pass-through settings for external generative runtimes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterParams {
    pub lora_rank: u32,
    pub lora_scaling: f64,
    pub lora_dropout: f64,
    pub quantize_4bit: bool,
}

impl Default for AdapterParams {
    fn default() -> Self {
        AdapterParams {
            lora_rank: 64,
            lora_scaling: 128.0,
            lora_dropout: 0.05,
            quantize_4bit: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    /// Empty-sentence pairs appended by [`fit_with_config`]; `None` disables.
    pub debias_copies: Option<usize>,
    pub adapter: AdapterParams,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// Restore the parameters of the best validation-accuracy epoch.
    pub keep_best_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            seed: 0,
            freeze_policy: FreezePolicy::AllParameters,
            debias_copies: None,
            adapter: AdapterParams::default(),
            learning_rate: 0.05,
            l2: 1e-4,
            batch_size: 32,
            keep_best_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.epochs == 0 {
            return Err(BackendError::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adapter.lora_dropout) {
            return Err(BackendError::Config(format!(
                "lora_dropout {} outside [0, 1)",
                self.adapter.lora_dropout
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(BackendError::Config("learning_rate must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(BackendError::Config("l2 must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(BackendError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
}

impl EpochMetrics {
    pub fn from_metrics(epoch: usize, m: &ClassificationMetrics, train_loss: Option<f64>) -> EpochMetrics {
        EpochMetrics {
            epoch,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            train_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub backend: String,
    pub freeze_policy: FreezePolicy,
    pub train_examples: usize,
    pub epochs: Vec<EpochMetrics>,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
    /// Names of the parameter groups the run was allowed to update.
    pub touched_parameters: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl TrainReport {
    pub fn untrained(backend: &str, config: &TrainConfig) -> TrainReport {
        TrainReport {
            backend: backend.to_string(),
            freeze_policy: config.freeze_policy,
            train_examples: 0,
            epochs: Vec::new(),
            trainable_parameters: 0,
            total_parameters: 0,
            touched_parameters: Vec::new(),
            best_epoch: None,
            wall_clock_seconds: Some(0.0),
        }
    }
}

/// Serializable state of a backend, the payload of a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub backend: String,
    pub schema_hash: Option<String>,
    pub payload: serde_json::Value,
}

pub trait Classifier: Send + Sync {
    /// Stable backend identifier, also used in model files.
    fn name(&self) -> &'static str;

    fn is_ready(&self) -> bool;

    /// Trains (or continues training) on `train`, reporting per-epoch metrics
    /// on `validation`.
    fn fit(
        &mut self,
        train: &[LabeledExample],
        validation: &[LabeledExample],
        config: &TrainConfig,
    ) -> Result<TrainReport, BackendError>;

    fn predict(&self, text: &str) -> Result<Prediction, BackendError>;

    /// Element-wise [`Classifier::predict`], order preserved.
    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction>, BackendError> {
        texts.iter().map(|t| self.predict(t)).collect()
    }

    fn set_sampling(&mut self, sampling: Sampling) -> Result<(), BackendError> {
        match sampling {
            Sampling::Deterministic => Ok(()),
            Sampling::Stochastic { .. } => Err(BackendError::Unsupported(format!(
                "{} has no stochastic mode",
                self.name()
            ))),
        }
    }

    /// True when concurrent `predict` calls must be serialized by the caller,
    /// e.g. while a seeded sampling stream is active.
    fn sequential_inference(&self) -> bool {
        false
    }

    fn to_artifact(&self) -> Result<Artifact, BackendError>;
}

/// Applies the configured augmentation, then fits.
pub fn fit_with_config(
    backend: &mut dyn Classifier,
    train: &[LabeledExample],
    validation: &[LabeledExample],
    config: &TrainConfig,
) -> Result<TrainReport, BackendError> {
    match config.debias_copies {
        Some(copies) if copies > 0 => backend.fit(&debias_augment(train, copies), validation, config),
        _ => backend.fit(train, validation, config),
    }
}

pub(crate) fn require_both_classes(train: &[LabeledExample]) -> Result<(), BackendError> {
    if train.is_empty() {
        return Err(BackendError::DegenerateData("training set is empty".into()));
    }
    for label in Label::ALL {
        if !train.iter().any(|e| e.label == label) {
            return Err(BackendError::DegenerateData(format!(
                "training set has no {label} examples"
            )));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    backend: String,
    schema_hash: Option<String>,
    checksum: String,
    payload: String,
}

fn checksum(payload: &str) -> String {
    hex::encode(Sha256::digest(payload.as_bytes()))
}

pub fn save_model(backend: &dyn Classifier, path: &Path) -> Result<(), BackendError> {
    let artifact = backend.to_artifact()?;
    let payload = serde_json::to_string(&artifact.payload).map_err(|e| BackendError::Artifact(e.to_string()))?;
    let container = Container {
        format: ARTIFACT_FORMAT.into(),
        version: ARTIFACT_VERSION,
        backend: artifact.backend,
        schema_hash: artifact.schema_hash,
        checksum: checksum(&payload),
        payload,
    };
    let mut text = serde_json::to_string_pretty(&container).map_err(|e| BackendError::Artifact(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Decodes and verifies a model file without instantiating the backend.
pub fn read_artifact(path: &Path) -> Result<Artifact, BackendError> {
    let text = fs::read_to_string(path)?;
    let container: Container =
        serde_json::from_str(&text).map_err(|e| BackendError::Artifact(format!("unreadable container: {e}")))?;
    if container.format != ARTIFACT_FORMAT {
        return Err(BackendError::Artifact(format!("unknown format `{}`", container.format)));
    }
    if container.version != ARTIFACT_VERSION {
        return Err(BackendError::Artifact(format!(
            "version {} not supported (expected {ARTIFACT_VERSION})",
            container.version
        )));
    }
    if checksum(&container.payload) != container.checksum {
        return Err(BackendError::Artifact("payload checksum mismatch".into()));
    }
    let payload =
        serde_json::from_str(&container.payload).map_err(|e| BackendError::Artifact(format!("payload: {e}")))?;
    Ok(Artifact {
        backend: container.backend,
        schema_hash: container.schema_hash,
        payload,
    })
}

pub fn from_artifact(artifact: Artifact) -> Result<Box<dyn Classifier>, BackendError> {
    let backend: Box<dyn Classifier> = match artifact.backend.as_str() {
        MockBackend::NAME => Box::new(MockBackend::from_artifact(&artifact)?),
        LinearBaseline::NAME => Box::new(LinearBaseline::from_artifact(&artifact)?),
        SequenceAdapter::NAME => Box::new(SequenceAdapter::from_artifact(&artifact)?),
        IclClassifier::NAME => Box::new(IclClassifier::from_artifact(&artifact)?),
        other => return Err(BackendError::Artifact(format!("unknown backend `{other}`"))),
    };
    Ok(backend)
}

pub fn load_model(path: &Path) -> Result<Box<dyn Classifier>, BackendError> {
    from_artifact(read_artifact(path)?)
}

pub(crate) fn decode_payload<T: serde::de::DeserializeOwned>(
    artifact: &Artifact,
    expected: &str,
) -> Result<T, BackendError> {
    if artifact.backend != expected {
        return Err(BackendError::Artifact(format!(
            "artifact holds `{}`, not `{expected}`",
            artifact.backend
        )));
    }
    serde_json::from_value(artifact.payload.clone()).map_err(|e| BackendError::Artifact(e.to_string()))
}

pub(crate) fn encode_payload<T: Serialize>(value: &T) -> Result<serde_json::Value, BackendError> {
    serde_json::to_value(value).map_err(|e| BackendError::Artifact(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_anomaly_score() {
        assert_eq!(Prediction::new(Label::Anomalous, 0.8).anomaly_score(), 0.8);
        assert!((Prediction::new(Label::Normal, 0.8).anomaly_score() - 0.2).abs() < 1e-15);
        let tie = Prediction::from_anomaly_probability(0.5);
        assert_eq!((tie.label, tie.score), (Label::Normal, 0.5));
        assert!(Prediction::from_anomaly_probability(0.1).score >= 0.5);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let d = AdapterParams::default();
        assert_eq!((d.lora_rank, d.lora_scaling, d.lora_dropout), (64, 128.0, 0.05));
        let zero = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let mut dropout = TrainConfig::default();
        dropout.adapter.lora_dropout = 1.0;
        assert!(dropout.validate().is_err());
    }

    #[test]
    fn corrupted_and_versioned_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mock = MockBackend::new(vec![MockRule::ClausePresent {
            clause: "runtime is 2090.0".into(),
        }]);
        save_model(&mock, &path).unwrap();
        assert!(load_model(&path).is_ok());

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("2090.0", "2091.0")).unwrap();
        assert!(matches!(load_model(&path), Err(BackendError::Artifact(_))));

        fs::write(&path, text.replace("\"version\": 1", "\"version\": 7")).unwrap();
        match load_model(&path) {
            Err(BackendError::Artifact(m)) => assert!(m.contains("version 7")),
            Err(other) => panic!("unexpected {other:?}"),
            Ok(_) => panic!("loaded a future version"),
        }

        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(BackendError::Artifact(_))));
    }
}
