// SPDX-License-Identifier: Apache-2.0

//! In-context-learning prompts: task header, example selection, prompt
//! assembly and response parsing.
//!
//! A prompt is the task header, a blank line, one block per in-context
//! example, and a trailing query stub that the model completes:
//!
//! ```text
//! <header>
//!
//! Instruct: runtime is 300.0
//! Category: Normal
//!
//! Instruct: runtime is 2090.0
//! Category:
//! ```

use crate::dataset::LabeledExample;
use crate::ingest::{FeatureSchema, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_STEP_BY_STEP: &str = "Let's think about it step-by-step.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt configuration: {0}")]
    Config(String),
    #[error("example pool has {available} {label} examples, {needed} required")]
    InsufficientPool {
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("no category token in response `{0}`")]
    Unparseable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExamplePolicy {
    NegOnly,
    PosOnly,
    #[default]
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    #[default]
    CategoryOnly,
    ChainOfThought,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleOrder {
    /// Examples appear in the order they were drawn.
    #[default]
    Sampled,
    /// Normal examples first, then anomalous ones, each group in draw order.
    GroupedByLabel,
}

/// Category words the model is asked to answer with.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct LabelVocabulary {
    normal: String,
    anomalous: String,
}

#[derive(Serialize, Deserialize)]
struct RawVocabulary {
    normal: String,
    anomalous: String,
}

impl TryFrom<RawVocabulary> for LabelVocabulary {
    type Error = PromptError;
    fn try_from(raw: RawVocabulary) -> Result<Self, Self::Error> {
        LabelVocabulary::new(raw.normal, raw.anomalous)
    }
}

impl From<LabelVocabulary> for RawVocabulary {
    fn from(v: LabelVocabulary) -> Self {
        RawVocabulary {
            normal: v.normal,
            anomalous: v.anomalous,
        }
    }
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        LabelVocabulary {
            normal: "Normal".into(),
            anomalous: "Abnormal".into(),
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl LabelVocabulary {
    pub fn new(normal: impl Into<String>, anomalous: impl Into<String>) -> Result<Self, PromptError> {
        let (normal, anomalous) = (normal.into(), anomalous.into());
        for t in [&normal, &anomalous] {
            if t.is_empty() || !t.chars().all(is_word_char) {
                return Err(PromptError::Config(format!(
                    "category token `{t}` must be a single word"
                )));
            }
        }
        if normal.to_lowercase() == anomalous.to_lowercase() {
            return Err(PromptError::Config("category tokens must differ".into()));
        }
        Ok(LabelVocabulary { normal, anomalous })
    }

    pub fn token(&self, label: Label) -> &str {
        match label {
            Label::Normal => &self.normal,
            Label::Anomalous => &self.anomalous,
        }
    }

    fn label_of(&self, word: &str) -> Option<Label> {
        let word = word.to_lowercase();
        if word == self.normal.to_lowercase() {
            Some(Label::Normal)
        } else if word == self.anomalous.to_lowercase() {
            Some(Label::Anomalous)
        } else {
            None
        }
    }
}

/// Full recipe of an in-context-learning prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub schema: FeatureSchema,
    #[serde(default)]
    pub policy: ExamplePolicy,
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: PromptMode,
    #[serde(default)]
    pub vocabulary: LabelVocabulary,
    #[serde(default)]
    pub order: ExampleOrder,
    #[serde(default = "default_step_by_step")]
    pub step_by_step: String,
}

fn default_step_by_step() -> String {
    DEFAULT_STEP_BY_STEP.to_string()
}

impl PromptSpec {
    pub fn new(schema: FeatureSchema) -> Self {
        PromptSpec {
            schema,
            policy: ExamplePolicy::default(),
            shots: 0,
            seed: 0,
            mode: PromptMode::default(),
            vocabulary: LabelVocabulary::default(),
            order: ExampleOrder::default(),
            step_by_step: default_step_by_step(),
        }
    }

    /// `(normal, anomalous)` example counts for the configured policy. An odd
    /// mixed count gives the extra example to the anomalous class.
    pub fn class_counts(&self) -> (usize, usize) {
        match self.policy {
            ExamplePolicy::NegOnly => (self.shots, 0),
            ExamplePolicy::PosOnly => (0, self.shots),
            ExamplePolicy::Mixed => (self.shots / 2, self.shots - self.shots / 2),
        }
    }
}

pub fn build_task_header(spec: &PromptSpec) -> Result<String, PromptError> {
    if spec.schema.is_empty() {
        return Err(PromptError::Config("schema has no features".into()));
    }
    let vocab = &spec.vocabulary;
    let mut lines = vec![
        "You are a system administration bot.".to_string(),
        "Your task is to assess a job description with a couple of features into one of the following categories:"
            .to_string(),
        format!("{} and {}", vocab.token(Label::Normal), vocab.token(Label::Anomalous)),
        String::new(),
    ];
    match spec.mode {
        PromptMode::CategoryOnly => {
            lines.push("You will only respond with the category.".into());
            lines.push("Do not include the word \"Category\".".into());
            lines.push("Do not provide explanations or notes.".into());
        }
        PromptMode::ChainOfThought => lines.push(spec.step_by_step.clone()),
    }
    let features: Vec<&str> = spec.schema.names().collect();
    lines.push(format!("A single job includes {}", features.join(" ")));
    Ok(lines.join("\n"))
}

/// Draws `count` distinct items, in draw order (partial Fisher-Yates).
fn draw<'a, T>(items: &[&'a T], count: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    let mut pool = items.to_vec();
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Picks the in-context examples. Empty-text examples in the pool are never
/// chosen.
pub fn select_examples(pool: &[LabeledExample], spec: &PromptSpec) -> Result<Vec<LabeledExample>, PromptError> {
    if spec.shots == 0 {
        return Ok(Vec::new());
    }
    let (n_normal, n_anom) = spec.class_counts();
    let of = |label: Label| -> Vec<&LabeledExample> {
        pool.iter()
            .filter(|e| e.label == label && !e.text().is_empty())
            .collect()
    };
    let normals = of(Label::Normal);
    let anomalies = of(Label::Anomalous);
    for (label, needed, have) in [
        (Label::Normal, n_normal, normals.len()),
        (Label::Anomalous, n_anom, anomalies.len()),
    ] {
        if have < needed {
            return Err(PromptError::InsufficientPool {
                label,
                needed,
                available: have,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picked_normal = draw(&normals, n_normal, &mut rng);
    let picked_anom = draw(&anomalies, n_anom, &mut rng);
    let mut chosen: Vec<&LabeledExample> = picked_normal.into_iter().chain(picked_anom).collect();
    if spec.order == ExampleOrder::Sampled && n_normal > 0 && n_anom > 0 {
        let n = chosen.len();
        chosen = draw(&chosen, n, &mut rng);
    }
    Ok(chosen.into_iter().cloned().collect())
}

pub fn build_prompt(spec: &PromptSpec, examples: &[LabeledExample], query: &str) -> Result<String, PromptError> {
    let mut out = build_task_header(spec)?;
    out.push_str("\n\n");
    for e in examples {
        out.push_str("Instruct: ");
        out.push_str(e.text());
        out.push_str("\nCategory: ");
        out.push_str(spec.vocabulary.token(e.label));
        out.push_str("\n\n");
    }
    out.push_str("Instruct: ");
    out.push_str(query);
    out.push_str("\nCategory:");
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub label: Label,
    pub rationale: Option<String>,
}

/// Yields `(byte offset, label)` for every category word.
fn category_words<'a>(text: &'a str, vocab: &'a LabelVocabulary) -> impl Iterator<Item = (usize, Label)> + 'a {
    let mut start = None;
    let mut words = Vec::new();
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (start, is_word_char(c) && i < text.len()) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                words.push((s, &text[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    words.into_iter().filter_map(|(s, w)| vocab.label_of(w).map(|l| (s, l)))
}

fn strip_category_prefix(text: &str) -> &str {
    const PREFIX: &str = "category:";
    if text.len() >= PREFIX.len()
        && text.is_char_boundary(PREFIX.len())
        && text[..PREFIX.len()].eq_ignore_ascii_case(PREFIX)
    {
        text[PREFIX.len()..].trim_start()
    } else {
        text
    }
}

fn strip_category_suffix(text: &str) -> &str {
    const SUFFIX: &str = "category:";
    let t = text.trim_end();
    if t.len() >= SUFFIX.len() {
        let cut = t.len() - SUFFIX.len();
        if t.is_char_boundary(cut) && t[cut..].eq_ignore_ascii_case(SUFFIX) {
            return t[..cut].trim_end();
        }
    }
    t
}

/// Extracts the label from a generated completion.
///
/// Category-only answers take the first category word after an optional
/// leading `Category:`. Chain-of-thought answers take the last category word
/// and keep the text before it as the rationale.
pub fn parse_response(text: &str, mode: PromptMode, vocab: &LabelVocabulary) -> Result<ParsedResponse, PromptError> {
    match mode {
        PromptMode::CategoryOnly => {
            let body = strip_category_prefix(text.trim());
            let (_, label) = category_words(body, vocab)
                .next()
                .ok_or_else(|| PromptError::Unparseable(text.to_string()))?;
            Ok(ParsedResponse { label, rationale: None })
        }
        PromptMode::ChainOfThought => {
            let (offset, label) = category_words(text, vocab)
                .last()
                .ok_or_else(|| PromptError::Unparseable(text.to_string()))?;
            let rationale = strip_category_suffix(text[..offset].trim());
            Ok(ParsedResponse {
                label,
                rationale: (!rationale.is_empty()).then(|| rationale.to_string()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Sentence;
    use proptest::prelude::*;

    fn schema() -> FeatureSchema {
        FeatureSchema::durations(&[
            "wms_delay",
            "queue_delay",
            "runtime",
            "post_script_delay",
            "stage_in_delay",
        ])
        .unwrap()
    }

    fn pool() -> Vec<LabeledExample> {
        (0..20)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Normal } else { Label::Anomalous };
                LabeledExample::new(
                    Sentence {
                        text: format!("runtime is {}.0", i * 100),
                        job_id: format!("j{i}"),
                        prefix_len: 1,
                    },
                    "w",
                    label,
                )
            })
            .collect()
    }

    #[test]
    fn header_category_only() {
        let spec = PromptSpec::new(schema());
        let h = build_task_header(&spec).unwrap();
        assert!(h.starts_with("You are a system administration bot.\n"));
        assert!(h.contains("\nNormal and Abnormal\n"));
        assert!(h.contains("Do not provide explanations or notes."));
        assert!(h.ends_with("A single job includes wms_delay queue_delay runtime post_script_delay stage_in_delay"));
    }

    #[test]
    fn header_chain_of_thought() {
        let mut spec = PromptSpec::new(schema());
        spec.mode = PromptMode::ChainOfThought;
        let h = build_task_header(&spec).unwrap();
        assert!(!h.contains("Do not provide explanations"));
        assert!(!h.contains("You will only respond with the category."));
        assert!(h.contains("\nLet's think about it step-by-step.\n"));
    }

    #[test]
    fn header_single_feature_and_empty_schema() {
        let spec = PromptSpec::new(FeatureSchema::durations(&["runtime"]).unwrap());
        assert!(build_task_header(&spec)
            .unwrap()
            .ends_with("A single job includes runtime"));
        let empty = PromptSpec::new(FeatureSchema::durations::<&str>(&[]).unwrap());
        assert!(matches!(build_task_header(&empty), Err(PromptError::Config(_))));
    }

    #[test]
    fn selection_policies() {
        let mut spec = PromptSpec::new(schema());
        spec.shots = 5;
        spec.policy = ExamplePolicy::PosOnly;
        let picked = select_examples(&pool(), &spec).unwrap();
        assert_eq!(picked.len(), 5);
        assert!(picked.iter().all(|e| e.label == Label::Anomalous));

        spec.policy = ExamplePolicy::NegOnly;
        assert!(select_examples(&pool(), &spec)
            .unwrap()
            .iter()
            .all(|e| e.label == Label::Normal));

        spec.policy = ExamplePolicy::Mixed;
        let mixed = select_examples(&pool(), &spec).unwrap();
        assert_eq!(mixed.iter().filter(|e| e.label == Label::Anomalous).count(), 3);

        spec.shots = 10;
        let a = select_examples(&pool(), &spec).unwrap();
        let b = select_examples(&pool(), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|e| e.label == Label::Normal).count(), 5);

        spec.shots = 0;
        assert!(select_examples(&pool(), &spec).unwrap().is_empty());
    }

    #[test]
    fn selection_insufficient_pool() {
        let mut spec = PromptSpec::new(schema());
        spec.shots = 11;
        spec.policy = ExamplePolicy::PosOnly;
        assert_eq!(
            select_examples(&pool(), &spec),
            Err(PromptError::InsufficientPool {
                label: Label::Anomalous,
                needed: 11,
                available: 10
            })
        );
    }

    #[test]
    fn grouped_order() {
        let mut spec = PromptSpec::new(schema());
        spec.shots = 6;
        spec.order = ExampleOrder::GroupedByLabel;
        let picked = select_examples(&pool(), &spec).unwrap();
        let labels: Vec<Label> = picked.iter().map(|e| e.label).collect();
        assert_eq!(labels, [[Label::Normal; 3], [Label::Anomalous; 3]].concat());
    }

    // String assembly oracle: concatenate the pieces by hand.
    #[test]
    fn prompt_assembly() {
        let spec = PromptSpec::new(schema());
        let header = build_task_header(&spec).unwrap();
        let ex = &pool()[..2];
        let got = build_prompt(&spec, ex, "runtime is 2090.0").unwrap();
        let expected = format!(
            "{header}\n\nInstruct: runtime is 0.0\nCategory: Normal\n\nInstruct: runtime is 100.0\nCategory: Abnormal\n\nInstruct: runtime is 2090.0\nCategory:"
        );
        assert_eq!(got, expected);
        let probe = build_prompt(&spec, &[], "").unwrap();
        assert!(probe.ends_with("\n\nInstruct: \nCategory:"));
    }

    #[test]
    fn parse_category_only() {
        let v = LabelVocabulary::default();
        let p = |s| parse_response(s, PromptMode::CategoryOnly, &v);
        assert_eq!(
            p("Normal").unwrap(),
            ParsedResponse {
                label: Label::Normal,
                rationale: None
            }
        );
        assert_eq!(p("Category: Abnormal").unwrap().label, Label::Anomalous);
        assert_eq!(p("  abnormal.\n").unwrap().label, Label::Anomalous);
        assert!(matches!(p("unsure"), Err(PromptError::Unparseable(_))));
        assert!(p("").is_err());
    }

    #[test]
    fn parse_chain_of_thought() {
        let v = LabelVocabulary::default();
        let text = "wms_delay is small and each value is within typical range, therefore the job is Normal";
        let got = parse_response(text, PromptMode::ChainOfThought, &v).unwrap();
        assert_eq!(got.label, Label::Normal);
        assert_eq!(
            got.rationale.as_deref(),
            Some("wms_delay is small and each value is within typical range, therefore the job is")
        );
        let flipped = parse_response(
            "Looks Normal at first, but runtime is huge.\nCategory: Abnormal",
            PromptMode::ChainOfThought,
            &v,
        )
        .unwrap();
        assert_eq!(flipped.label, Label::Anomalous);
        assert_eq!(
            flipped.rationale.as_deref(),
            Some("Looks Normal at first, but runtime is huge.")
        );
    }

    #[test]
    fn vocabulary_validation() {
        assert!(LabelVocabulary::new("ok", "OK").is_err());
        assert!(LabelVocabulary::new("two words", "bad").is_err());
        let v = LabelVocabulary::new("Benign", "Malicious").unwrap();
        assert_eq!(
            parse_response("malicious", PromptMode::CategoryOnly, &v).unwrap().label,
            Label::Anomalous
        );
    }

    proptest! {
        #[test]
        fn parser_totality(prefix in "[a-z ,.]{0,30}", suffix in "[a-z ,.]{0,30}", anomalous in any::<bool>(), cot in any::<bool>()) {
            let v = LabelVocabulary::default();
            let mode = if cot { PromptMode::ChainOfThought } else { PromptMode::CategoryOnly };
            let token = if anomalous { "Abnormal" } else { "Normal" };
            let with = format!("{prefix} {token} {suffix}");
            prop_assert!(parse_response(&with, mode, &v).is_ok());
            let has_token = category_words(&prefix, &v).next().is_some();
            prop_assert_eq!(parse_response(&prefix, mode, &v).is_ok(), has_token);
        }

        #[test]
        fn selection_is_seed_deterministic(seed in any::<u64>(), shots in 0usize..10, policy in 0u8..3) {
            let mut spec = PromptSpec::new(schema());
            spec.seed = seed;
            spec.shots = shots;
            spec.policy = [ExamplePolicy::NegOnly, ExamplePolicy::PosOnly, ExamplePolicy::Mixed][policy as usize];
            let a = select_examples(&pool(), &spec).unwrap();
            prop_assert_eq!(&a, &select_examples(&pool(), &spec).unwrap());
            let anom = a.iter().filter(|e| e.label == Label::Anomalous).count();
            let norm = a.len() - anom;
            match spec.policy {
                ExamplePolicy::NegOnly => prop_assert_eq!(anom, 0),
                ExamplePolicy::PosOnly => prop_assert_eq!(norm, 0),
                ExamplePolicy::Mixed => prop_assert!(anom.abs_diff(norm) <= 1),
            }
            let mut ids: Vec<&str> = a.iter().map(|e| e.job_id()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), shots);
        }
    }
}
