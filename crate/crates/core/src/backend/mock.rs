// SPDX-License-Identifier: Apache-2.0

use super::{
    decode_payload, encode_payload, Artifact, BackendError, Classifier, Prediction, Sampling, TrainConfig, TrainReport,
};
use crate::dataset::LabeledExample;
use crate::ingest::{parse_clauses, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Mutex;

/// A rule that, when it matches, makes the mock answer anomalous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum MockRule {
    /// The exact clause (e.g. `runtime is 2090.0`) occurs in the text.
    ClausePresent { clause: String },
    /// The named feature is present with a value strictly above `threshold`.
    FeatureAbove { feature: String, threshold: f64 },
}

impl MockRule {
    pub fn feature_above(feature: &str, threshold: f64) -> MockRule {
        MockRule::FeatureAbove {
            feature: feature.to_string(),
            threshold,
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        match self {
            MockRule::ClausePresent { clause } => {
                let hay: Vec<&str> = text.split_whitespace().collect();
                let needle: Vec<&str> = clause.split_whitespace().collect();
                !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
            }
            MockRule::FeatureAbove { feature, threshold } => parse_clauses(text)
                .map(|clauses| {
                    clauses
                        .iter()
                        .any(|(n, v)| n == feature && v.parse::<f64>().map(|v| v > *threshold).unwrap_or(false))
                })
                .unwrap_or(false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MockState {
    rules: Vec<MockRule>,
    empty_normal_probability: f64,
    sampling: Sampling,
}

/// Rule-table classifier. Non-empty text is anomalous (score 1) iff a rule
/// matches, otherwise normal (score 1). Empty text is normal with probability
/// `empty_normal_probability`, 0.5 unless configured.
#[derive(Debug)]
pub struct MockBackend {
    state: MockState,
    rng: Mutex<Option<ChaCha8Rng>>,
}

impl MockBackend {
    pub const NAME: &'static str = "mock";

    pub fn new(rules: Vec<MockRule>) -> MockBackend {
        MockBackend {
            state: MockState {
                rules,
                empty_normal_probability: 0.5,
                sampling: Sampling::Deterministic,
            },
            rng: Mutex::new(None),
        }
    }

    pub fn with_empty_normal_probability(mut self, p: f64) -> MockBackend {
        self.state.empty_normal_probability = p.clamp(0.0, 1.0);
        self
    }

    pub fn rules(&self) -> &[MockRule] {
        &self.state.rules
    }

    pub fn empty_normal_probability(&self) -> f64 {
        self.state.empty_normal_probability
    }

    pub fn from_artifact(artifact: &Artifact) -> Result<MockBackend, BackendError> {
        let state: MockState = decode_payload(artifact, Self::NAME)?;
        let mut mock = MockBackend {
            state,
            rng: Mutex::new(None),
        };
        let sampling = mock.state.sampling;
        mock.set_sampling(sampling)?;
        Ok(mock)
    }

    fn normal_probability(&self, text: &str) -> f64 {
        if text.is_empty() {
            self.state.empty_normal_probability
        } else if self.state.rules.iter().any(|r| r.matches(text)) {
            0.0
        } else {
            1.0
        }
    }
}

impl Classifier for MockBackend {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn is_ready(&self) -> bool {
        true
    }

    fn fit(
        &mut self,
        _train: &[LabeledExample],
        _validation: &[LabeledExample],
        config: &TrainConfig,
    ) -> Result<TrainReport, BackendError> {
        Ok(TrainReport::untrained(Self::NAME, config))
    }

    fn predict(&self, text: &str) -> Result<Prediction, BackendError> {
        let p_normal = self.normal_probability(text);
        let mut guard = self.rng.lock().unwrap_or_else(|e| e.into_inner());
        Ok(match guard.as_mut() {
            Some(rng) => {
                let u: f64 = rng.gen();
                if u < p_normal {
                    Prediction::new(Label::Normal, p_normal)
                } else {
                    Prediction::new(Label::Anomalous, 1.0 - p_normal)
                }
            }
            None => Prediction::from_anomaly_probability(1.0 - p_normal),
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
            schema_hash: None,
            payload: encode_payload(&self.state)?,
        })
    }
}
