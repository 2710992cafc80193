// SPDX-License-Identifier: Apache-2.0

//! Tabular job logs to job records, and job records to sentences.
//!
//! A job is rendered as a flat run of clauses, one per feature, in schema
//! order:
//!
//! ```text
//! wms_delay is 6.0 queue_delay is 22.0 runtime is 2090.0
//! ```
//!
//! Serializing only the first `k` schema features yields the prefix forms
//! used by online detection.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;
use thiserror::Error;

/// Separator between a feature name and its rendered value.
pub const CLAUSE_KEYWORD: &str = "is";

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("row {row}, column `{column}`: cannot parse `{cell}` as a number")]
    Parse { row: usize, column: String, cell: String },
    #[error("row {row}: unknown label token `{token}`")]
    Label { row: usize, token: String },
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("unexpected column `{0}` (extra columns are rejected in strict-column mode)")]
    UnexpectedColumn(String),
    #[error("table: {0}")]
    Table(String),
    #[error("cannot render non-finite value {0}")]
    Render(f64),
    #[error("prefix length {upto} out of range 0..={max}")]
    Bounds { upto: usize, max: usize },
    #[error("job `{job_id}` is missing feature `{feature}`")]
    MissingFeature { job_id: String, feature: String },
    #[error("job `{0}` has no values under the schema")]
    EmptyRecord(String),
    #[error("malformed clause text at token {position}: {reason}")]
    Clause { position: usize, reason: String },
}

/// Binary job class. `Anomalous` is the positive class everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Anomalous];

    /// Canonical token written to dataset files.
    pub fn token(self) -> &'static str {
        match self {
            Label::Normal => "Normal",
            Label::Anomalous => "Abnormal",
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn other(self) -> Label {
        match self {
            Label::Normal => Label::Anomalous,
            Label::Anomalous => Label::Normal,
        }
    }

    /// Accepts `0`/`1`, `normal`, `abnormal`/`anomalous` (any case) and the
    /// sequence-classifier forms `LABEL_0`/`LABEL_1`.
    pub fn parse_token(token: &str) -> Option<Label> {
        let t = token.trim();
        match t.to_ascii_lowercase().as_str() {
            "0" | "normal" | "label_0" => Some(Label::Normal),
            "1" | "abnormal" | "anomalous" | "label_1" => Some(Label::Anomalous),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::parse_token(s).ok_or_else(|| format!("unknown label token `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    DurationSeconds,
    Bytes,
    Count,
    Ratio,
}

/// How numeric values become text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum RenderPolicy {
    /// Integral values keep one trailing decimal (`6.0`); everything else uses
    /// the shortest decimal that round-trips.
    #[default]
    OneDecimalIntegral,
    /// Fixed number of decimals.
    Fixed { decimals: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

/// Ordered feature set plus the rendering policy. Construct through
/// [`FeatureSchema::new`] so names are validated.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct FeatureSchema {
    features: Vec<Feature>,
    render_policy: RenderPolicy,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    features: Vec<Feature>,
    #[serde(default)]
    render_policy: RenderPolicy,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = IngestError;
    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        FeatureSchema::new(raw.features, raw.render_policy)
    }
}

impl From<FeatureSchema> for RawSchema {
    fn from(s: FeatureSchema) -> Self {
        RawSchema {
            features: s.features,
            render_policy: s.render_policy,
        }
    }
}

fn valid_identifier(name: &str) -> bool {
    !name.is_empty()
        && name != CLAUSE_KEYWORD
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>, render_policy: RenderPolicy) -> Result<Self, IngestError> {
        let mut seen = HashSet::new();
        for f in &features {
            if !valid_identifier(&f.name) {
                return Err(IngestError::Schema(format!(
                    "feature name `{}` must be a non-empty identifier of [A-Za-z0-9_.-]",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(IngestError::Schema(format!("duplicate feature `{}`", f.name)));
            }
        }
        Ok(FeatureSchema {
            features,
            render_policy,
        })
    }

    /// Schema of duration features with the default rendering policy.
    pub fn durations<S: AsRef<str>>(names: &[S]) -> Result<Self, IngestError> {
        let features = names
            .iter()
            .map(|n| Feature {
                name: n.as_ref().to_string(),
                kind: FeatureKind::DurationSeconds,
            })
            .collect();
        FeatureSchema::new(features, RenderPolicy::default())
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn render_policy(&self) -> RenderPolicy {
        self.render_policy
    }

    /// Stable hash of the schema, used to tie model artifacts to a schema.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for f in &self.features {
            hasher.update(f.name.as_bytes());
            hasher.update([0u8]);
            hasher.update(serde_json::to_string(&f.kind).unwrap_or_default().as_bytes());
            hasher.update([0u8]);
        }
        hasher.update(
            serde_json::to_string(&self.render_policy)
                .unwrap_or_default()
                .as_bytes(),
        );
        hex::encode(hasher.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub workflow_id: String,
    pub values: BTreeMap<String, f64>,
    pub label: Option<Label>,
}

impl JobRecord {
    pub fn new(job_id: impl Into<String>, workflow_id: impl Into<String>) -> Self {
        JobRecord {
            job_id: job_id.into(),
            workflow_id: workflow_id.into(),
            values: BTreeMap::new(),
            label: None,
        }
    }

    pub fn with_value(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    /// Number of schema features this record carries a value for.
    pub fn present_count(&self, schema: &FeatureSchema) -> usize {
        schema.names().filter(|n| self.values.contains_key(*n)).count()
    }
}

/// Serialized job text. `prefix_len` counts the clauses in `text`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub job_id: String,
    pub prefix_len: usize,
}

impl Sentence {
    pub fn empty(job_id: impl Into<String>) -> Self {
        Sentence {
            text: String::new(),
            job_id: job_id.into(),
            prefix_len: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Omit the clause of a missing feature.
    #[default]
    Skip,
    /// Fail on a missing feature.
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// A label column must exist and every cell must hold a label token.
    Required,
    /// The label column may be absent or blank (inference input).
    #[default]
    Optional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableOptions {
    /// `None` sniffs tab vs comma from the header line.
    pub delimiter: Option<u8>,
    pub job_id_column: String,
    pub workflow_id_column: String,
    pub label_column: String,
    /// Used when the table has no workflow column.
    pub default_workflow: String,
    pub label_mode: LabelMode,
    /// Reject columns that are neither schema features nor metadata.
    pub strict_columns: bool,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            delimiter: None,
            job_id_column: "job_id".into(),
            workflow_id_column: "workflow_id".into(),
            label_column: "label".into(),
            default_workflow: String::new(),
            label_mode: LabelMode::Optional,
            strict_columns: false,
        }
    }
}

/// Reads a delimited table with a header row. Rows come back in input order.
/// Blank feature cells are treated as missing values. Without a job id
/// column, jobs are named `row-<n>` (1-based data row).
pub fn load_table<R: Read>(
    mut source: R,
    schema: &FeatureSchema,
    options: &TableOptions,
) -> Result<Vec<JobRecord>, IngestError> {
    let mut raw = Vec::new();
    source
        .read_to_end(&mut raw)
        .map_err(|e| IngestError::Table(e.to_string()))?;
    if raw.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(Vec::new());
    }
    let delimiter = options.delimiter.unwrap_or_else(|| sniff_delimiter(&raw));
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw.as_slice());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::Table(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let column = |name: &str| header.iter().position(|h| h == name);

    let feature_columns = schema
        .names()
        .map(|n| {
            column(n)
                .map(|i| (n, i))
                .ok_or_else(|| IngestError::MissingColumn(n.into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let job_col = column(&options.job_id_column);
    let workflow_col = column(&options.workflow_id_column);
    let label_col = column(&options.label_column);
    if label_col.is_none() && options.label_mode == LabelMode::Required {
        return Err(IngestError::MissingColumn(options.label_column.clone()));
    }
    if options.strict_columns {
        for h in &header {
            let known = schema.index_of(h).is_some()
                || *h == options.job_id_column
                || *h == options.workflow_id_column
                || *h == options.label_column;
            if !known {
                return Err(IngestError::UnexpectedColumn(h.clone()));
            }
        }
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| IngestError::Table(format!("row {row_no}: {e}")))?;
        let cell = |idx: usize| row.get(idx).unwrap_or("");
        let job_id = job_col
            .map(|c| cell(c).to_string())
            .unwrap_or_else(|| format!("row-{row_no}"));
        let workflow_id = workflow_col
            .map(|c| cell(c).to_string())
            .unwrap_or_else(|| options.default_workflow.clone());
        let mut record = JobRecord::new(job_id, workflow_id);
        for (name, idx) in &feature_columns {
            let text = cell(*idx);
            if text.is_empty() {
                continue;
            }
            let value: f64 = text.parse().map_err(|_| IngestError::Parse {
                row: row_no,
                column: name.to_string(),
                cell: text.to_string(),
            })?;
            record.values.insert(name.to_string(), value);
        }
        if let Some(c) = label_col {
            let token = cell(c);
            if token.is_empty() {
                if options.label_mode == LabelMode::Required {
                    return Err(IngestError::Label {
                        row: row_no,
                        token: String::new(),
                    });
                }
            } else {
                record.label = Some(Label::parse_token(token).ok_or_else(|| IngestError::Label {
                    row: row_no,
                    token: token.to_string(),
                })?);
            }
        }
        records.push(record);
    }
    Ok(records)
}

fn sniff_delimiter(raw: &[u8]) -> u8 {
    let first_line = raw.split(|b| *b == b'\n').next().unwrap_or(&[]);
    let tabs = first_line.iter().filter(|b| **b == b'\t').count();
    let commas = first_line.iter().filter(|b| **b == b',').count();
    if tabs > commas {
        b'\t'
    } else {
        b','
    }
}

/// Renders a finite number under `policy`.
pub fn render_value(v: f64, policy: RenderPolicy) -> Result<String, IngestError> {
    if !v.is_finite() {
        return Err(IngestError::Render(v));
    }
    Ok(match policy {
        RenderPolicy::OneDecimalIntegral => {
            if v.fract() == 0.0 {
                format!("{v:.1}")
            } else {
                // f64 Display is the shortest round-trip form, never exponential.
                format!("{v}")
            }
        }
        RenderPolicy::Fixed { decimals } => format!("{v:.*}", decimals as usize),
    })
}

/// Serializes the first `upto` schema features of `record`, skipping missing
/// ones.
pub fn serialize(record: &JobRecord, schema: &FeatureSchema, upto: usize) -> Result<Sentence, IngestError> {
    serialize_with(record, schema, upto, MissingPolicy::Skip)
}

pub fn serialize_with(
    record: &JobRecord,
    schema: &FeatureSchema,
    upto: usize,
    missing: MissingPolicy,
) -> Result<Sentence, IngestError> {
    if upto > schema.len() {
        return Err(IngestError::Bounds {
            upto,
            max: schema.len(),
        });
    }
    let mut text = String::new();
    let mut clauses = 0;
    for feature in &schema.features()[..upto] {
        let Some(&value) = record.values.get(&feature.name) else {
            if missing == MissingPolicy::Strict {
                return Err(IngestError::MissingFeature {
                    job_id: record.job_id.clone(),
                    feature: feature.name.clone(),
                });
            }
            continue;
        };
        if clauses > 0 {
            text.push(' ');
        }
        text.push_str(&feature.name);
        text.push(' ');
        text.push_str(CLAUSE_KEYWORD);
        text.push(' ');
        text.push_str(&render_value(value, schema.render_policy())?);
        clauses += 1;
    }
    Ok(Sentence {
        text,
        job_id: record.job_id.clone(),
        prefix_len: clauses,
    })
}

/// Full serialization of every schema feature.
pub fn serialize_full(record: &JobRecord, schema: &FeatureSchema) -> Result<Sentence, IngestError> {
    serialize(record, schema, schema.len())
}

/// Growing prefixes of a record: one sentence per present feature, the
/// `k`-th covering the first `k` present features.
pub fn prefix_stream(record: &JobRecord, schema: &FeatureSchema) -> Result<Vec<Sentence>, IngestError> {
    let mut out = Vec::new();
    for (i, feature) in schema.features().iter().enumerate() {
        if record.values.contains_key(&feature.name) {
            out.push(serialize(record, schema, i + 1)?);
        }
    }
    if out.is_empty() {
        return Err(IngestError::EmptyRecord(record.job_id.clone()));
    }
    Ok(out)
}

/// Splits clause text back into `(name, rendered value)` pairs. A trailing
/// comma on a value is tolerated.
pub fn parse_clauses(text: &str) -> Result<Vec<(String, String)>, IngestError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if !tokens.len().is_multiple_of(3) {
        return Err(IngestError::Clause {
            position: tokens.len(),
            reason: format!("{} tokens do not form whole `<name> is <value>` clauses", tokens.len()),
        });
    }
    tokens
        .chunks(3)
        .enumerate()
        .map(|(i, chunk)| {
            if chunk[1] != CLAUSE_KEYWORD {
                return Err(IngestError::Clause {
                    position: i * 3 + 1,
                    reason: format!("expected `{CLAUSE_KEYWORD}`, found `{}`", chunk[1]),
                });
            }
            let value = chunk[2].strip_suffix(',').unwrap_or(chunk[2]);
            Ok((chunk[0].to_string(), value.to_string()))
        })
        .collect()
}

/// Number of clauses in sentence text.
pub fn clause_count(text: &str) -> usize {
    text.split_whitespace().filter(|t| *t == CLAUSE_KEYWORD).count()
}
