// SPDX-License-Identifier: Apache-2.0

//! In-context-learning classifier over a text generator.

use super::adapter::fan_out;
use super::{
    decode_payload, encode_payload, Artifact, BackendError, Classifier, GenerativeAdapter, MockRule, Prediction,
    Sampling, TrainConfig, TrainReport,
};
use crate::dataset::LabeledExample;
use crate::ingest::{clause_count, Label};
use crate::prompt::{build_prompt, parse_response, select_examples, LabelVocabulary, PromptError, PromptSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub completion: String,
    /// Confidence reported by the model for its answer, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &'static str;

    fn generate(&self, prompt: &str) -> Result<Generation, BackendError>;

    fn fine_tune(
        &mut self,
        _train: &[LabeledExample],
        _validation: &[LabeledExample],
        _config: &TrainConfig,
    ) -> Result<TrainReport, BackendError> {
        Err(BackendError::Unsupported(format!(
            "{} cannot be fine-tuned",
            self.name()
        )))
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

    /// Concurrent `generate` calls allowed by the backing runtime.
    fn max_in_flight(&self) -> usize {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplyStyle {
    /// ` Abnormal`
    #[default]
    CategoryOnly,
    /// `Category: Abnormal`
    Prefixed,
    /// A short rationale, then `Category: Abnormal`.
    ChainOfThought,
}

/// Deterministic stand-in for a generative model: answers the query of the
/// prompt by applying a rule table, ignoring the in-context examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockGenerator {
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub style: ReplyStyle,
    #[serde(default)]
    pub vocabulary: LabelVocabulary,
}

impl MockGenerator {
    pub fn new(rules: Vec<MockRule>) -> MockGenerator {
        MockGenerator {
            rules,
            style: ReplyStyle::default(),
            vocabulary: LabelVocabulary::default(),
        }
    }

    pub fn with_style(mut self, style: ReplyStyle) -> MockGenerator {
        self.style = style;
        self
    }

    pub fn with_vocabulary(mut self, vocabulary: LabelVocabulary) -> MockGenerator {
        self.vocabulary = vocabulary;
        self
    }

    /// Text of the last `Instruct:` block.
    pub fn query_of(prompt: &str) -> &str {
        let tail = match prompt.rfind("Instruct: ") {
            Some(i) => &prompt[i + "Instruct: ".len()..],
            None => prompt,
        };
        match tail.find("\nCategory:") {
            Some(i) => &tail[..i],
            None => tail,
        }
        .trim()
    }
}

impl Generator for MockGenerator {
    fn name(&self) -> &'static str {
        "mock-generator"
    }

    fn generate(&self, prompt: &str) -> Result<Generation, BackendError> {
        let query = Self::query_of(prompt);
        let matched = self.rules.iter().position(|r| r.matches(query));
        let label = if matched.is_some() {
            Label::Anomalous
        } else {
            Label::Normal
        };
        let token = self.vocabulary.token(label);
        let completion = match self.style {
            ReplyStyle::CategoryOnly => format!(" {token}"),
            ReplyStyle::Prefixed => format!("Category: {token}"),
            ReplyStyle::ChainOfThought => {
                let reason = match matched {
                    Some(i) => format!("rule {} fires", i + 1),
                    None => "no rule fires".to_string(),
                };
                format!(
                    " The job has {} clause(s) and {reason}.\nCategory: {token}",
                    clause_count(query)
                )
            }
        };
        Ok(Generation {
            completion,
            score: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GeneratorBackend {
    Mock(MockGenerator),
    Adapter(GenerativeAdapter),
}

impl Generator for GeneratorBackend {
    fn name(&self) -> &'static str {
        match self {
            GeneratorBackend::Mock(g) => g.name(),
            GeneratorBackend::Adapter(g) => g.name(),
        }
    }

    fn generate(&self, prompt: &str) -> Result<Generation, BackendError> {
        match self {
            GeneratorBackend::Mock(g) => g.generate(prompt),
            GeneratorBackend::Adapter(g) => g.generate(prompt),
        }
    }

    fn fine_tune(
        &mut self,
        train: &[LabeledExample],
        validation: &[LabeledExample],
        config: &TrainConfig,
    ) -> Result<TrainReport, BackendError> {
        match self {
            GeneratorBackend::Mock(g) => g.fine_tune(train, validation, config),
            GeneratorBackend::Adapter(g) => g.fine_tune(train, validation, config),
        }
    }

    fn set_sampling(&mut self, sampling: Sampling) -> Result<(), BackendError> {
        match self {
            GeneratorBackend::Mock(g) => g.set_sampling(sampling),
            GeneratorBackend::Adapter(g) => g.set_sampling(sampling),
        }
    }

    fn max_in_flight(&self) -> usize {
        match self {
            GeneratorBackend::Mock(g) => g.max_in_flight(),
            GeneratorBackend::Adapter(g) => g.max_in_flight(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IclState {
    generator: GeneratorBackend,
    spec: PromptSpec,
    examples: Option<Vec<LabeledExample>>,
    /// Label used when a completion names no category.
    fallback: Option<Label>,
    fine_tune: bool,
}

/// Prompts a generator with selected examples and parses its answer.
#[derive(Debug)]
pub struct IclClassifier {
    state: IclState,
}

fn prompt_error(e: PromptError) -> BackendError {
    match e {
        PromptError::Config(m) => BackendError::Config(m),
        other => BackendError::InvalidInput(other.to_string()),
    }
}

impl IclClassifier {
    pub const NAME: &'static str = "icl";

    pub fn new(generator: GeneratorBackend, spec: PromptSpec) -> IclClassifier {
        let examples = (spec.shots == 0).then(Vec::new);
        IclClassifier {
            state: IclState {
                generator,
                spec,
                examples,
                fallback: None,
                fine_tune: false,
            },
        }
    }

    pub fn with_fallback(mut self, label: Label) -> IclClassifier {
        self.state.fallback = Some(label);
        self
    }

    /// Fine-tune the generator on the training set during `fit`.
    pub fn with_fine_tune(mut self, fine_tune: bool) -> IclClassifier {
        self.state.fine_tune = fine_tune;
        self
    }

    /// Uses `examples` verbatim instead of selecting them in `fit`.
    pub fn with_examples(mut self, examples: Vec<LabeledExample>) -> IclClassifier {
        self.state.examples = Some(examples);
        self
    }

    pub fn spec(&self) -> &PromptSpec {
        &self.state.spec
    }

    pub fn examples(&self) -> Option<&[LabeledExample]> {
        self.state.examples.as_deref()
    }

    pub fn prompt_for(&self, query: &str) -> Result<String, BackendError> {
        let examples = self
            .state
            .examples
            .as_deref()
            .ok_or_else(|| BackendError::NotReady("in-context examples have not been selected".into()))?;
        build_prompt(&self.state.spec, examples, query).map_err(prompt_error)
    }

    pub fn from_artifact(artifact: &Artifact) -> Result<IclClassifier, BackendError> {
        let state: IclState = decode_payload(artifact, Self::NAME)?;
        Ok(IclClassifier { state })
    }
}

impl Classifier for IclClassifier {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn is_ready(&self) -> bool {
        self.state.examples.is_some()
    }

    fn fit(
        &mut self,
        train: &[LabeledExample],
        validation: &[LabeledExample],
        config: &TrainConfig,
    ) -> Result<TrainReport, BackendError> {
        let report = if self.state.fine_tune {
            self.state.generator.fine_tune(train, validation, config)?
        } else {
            TrainReport::untrained(Self::NAME, config)
        };
        let examples = select_examples(train, &self.state.spec).map_err(prompt_error)?;
        self.state.examples = Some(examples);
        Ok(report)
    }

    fn predict(&self, text: &str) -> Result<Prediction, BackendError> {
        let prompt = self.prompt_for(text)?;
        let generation = self.state.generator.generate(&prompt)?;
        let vocab = &self.state.spec.vocabulary;
        let mut p = match parse_response(&generation.completion, self.state.spec.mode, vocab) {
            Ok(parsed) => Prediction::new(parsed.label, generation.score.unwrap_or(1.0)),
            Err(e) => match self.state.fallback {
                Some(label) => Prediction::new(label, 0.5),
                None => return Err(BackendError::Adapter(e.to_string())),
            },
        };
        p.raw_output = Some(generation.completion);
        Ok(p)
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction>, BackendError> {
        fan_out(texts, self.state.generator.max_in_flight(), |t| self.predict(t))
    }

    fn set_sampling(&mut self, sampling: Sampling) -> Result<(), BackendError> {
        self.state.generator.set_sampling(sampling)
    }

    fn to_artifact(&self) -> Result<Artifact, BackendError> {
        Ok(Artifact {
            backend: Self::NAME.into(),
            schema_hash: Some(self.state.spec.schema.fingerprint()),
            payload: encode_payload(&self.state)?,
        })
    }
}
