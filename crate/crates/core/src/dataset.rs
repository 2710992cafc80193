// SPDX-License-Identifier: Apache-2.0

//! Labeled examples, stratified train/validation/test splits, empty-sentence
//! augmentation and the line-oriented dataset file.
//!
//! # File format
//!
//! UTF-8, one example per line, preceded by a version header:
//!
//! ```text
//! # wfad-dataset v1
//! wms_delay is 6.0 runtime is 2090.0, Abnormal<TAB>train<TAB>job-7<TAB>1000genome<TAB>2
//! ```
//!
//! The label token follows the final comma of the first field. Metadata
//! (partition, job id, workflow id, clause count) follows tab separators and
//! may be omitted entirely, in which case the line is unassigned and its job id
//! is `line-<n>`.

use crate::ingest::{clause_count, Label, Sentence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FILE_HEADER: &str = "# wfad-dataset v1";

/// Job id prefix of examples added by [`debias_augment`].
pub const DEBIAS_JOB_PREFIX: &str = "debias-";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("split configuration: {0}")]
    Config(String),
    #[error("cannot split an empty example list")]
    Empty,
    #[error("stratified split needs at least one {0} example")]
    MissingClass(Label),
    #[error("duplicate job id `{0}`")]
    DuplicateJob(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub sentence: Sentence,
    pub workflow_id: String,
    pub label: Label,
}

impl LabeledExample {
    pub fn new(sentence: Sentence, workflow_id: impl Into<String>, label: Label) -> Self {
        LabeledExample {
            sentence,
            workflow_id: workflow_id.into(),
            label,
        }
    }

    pub fn text(&self) -> &str {
        &self.sentence.text
    }

    pub fn job_id(&self) -> &str {
        &self.sentence.job_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Partition {
    pub fn token(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
            Partition::Unassigned => "unassigned",
        }
    }

    fn parse(token: &str) -> Option<Partition> {
        match token {
            "train" => Some(Partition::Train),
            "validation" => Some(Partition::Validation),
            "test" => Some(Partition::Test),
            "unassigned" => Some(Partition::Unassigned),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub normal: usize,
    pub anomalous: usize,
    pub anomaly_fraction: f64,
}

impl SplitStats {
    pub fn of(examples: &[LabeledExample]) -> SplitStats {
        let anomalous = examples.iter().filter(|e| e.label.is_anomalous()).count();
        let normal = examples.len() - anomalous;
        let anomaly_fraction = if examples.is_empty() {
            0.0
        } else {
            anomalous as f64 / examples.len() as f64
        };
        SplitStats {
            normal,
            anomalous,
            anomaly_fraction,
        }
    }

    pub fn total(&self) -> usize {
        self.normal + self.anomalous
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub train: SplitStats,
    pub validation: SplitStats,
    pub test: SplitStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl DatasetSplit {
    pub fn stats(&self) -> PartitionStats {
        PartitionStats {
            train: SplitStats::of(&self.train),
            validation: SplitStats::of(&self.validation),
            test: SplitStats::of(&self.test),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partition(&self, p: Partition) -> &[LabeledExample] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
            Partition::Unassigned => &[],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, DatasetError> {
        let r = SplitRatios {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = self.as_array();
        if parts.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(DatasetError::Config(format!("ratios must be positive, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Config(format!("ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

/// Largest-remainder apportionment of `n` items; remainder ties go to the
/// earlier partition.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut out = [0usize; 3];
    for (o, e) in out.iter_mut().zip(&exact) {
        *o = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = n - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Per-stratum partition sizes.
///
/// Global sizes are apportioned first (largest remainder over all `N`). Each
/// stratum starts at `floor(ratio * n_c)` and its leftover units are handed
/// out, at most one per partition, to the partitions still short of their
/// global size, largest-supply stratum first.
fn stratum_sizes(strata: &[usize], ratios: [f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = strata.iter().sum();
    let targets = apportion(total, ratios);
    let mut sizes: Vec<[usize; 3]> = strata
        .iter()
        .map(|&n| {
            let mut s = [0usize; 3];
            for (slot, r) in s.iter_mut().zip(ratios) {
                *slot = (r * n as f64).floor() as usize;
            }
            s
        })
        .collect();
    let fraction = |c: usize, p: usize| {
        let e = ratios[p] * strata[c] as f64;
        e - e.floor()
    };
    let mut supply: Vec<usize> = strata
        .iter()
        .zip(&sizes)
        .map(|(n, s)| n - s.iter().sum::<usize>())
        .collect();
    let mut demand = [0usize; 3];
    for p in 0..3 {
        let assigned: usize = sizes.iter().map(|s| s[p]).sum();
        demand[p] = targets[p] - assigned;
    }
    let mut parts: Vec<usize> = (0..3).collect();
    parts.sort_by(|&a, &b| demand[b].cmp(&demand[a]).then(a.cmp(&b)));
    for p in parts {
        let mut donors: Vec<usize> = (0..strata.len()).filter(|&c| supply[c] > 0).collect();
        donors.sort_by(|&a, &b| {
            supply[b]
                .cmp(&supply[a])
                .then(
                    fraction(b, p)
                        .partial_cmp(&fraction(a, p))
                        .unwrap_or(std::cmp::Ordering::Equal),
                )
                .then(a.cmp(&b))
        });
        for c in donors.into_iter().take(demand[p]) {
            sizes[c][p] += 1;
            supply[c] -= 1;
            demand[p] -= 1;
        }
    }
    // Any leftover (only reachable if greedy realization fails) goes to the
    // partition with the largest fractional share for that stratum.
    for c in 0..strata.len() {
        while supply[c] > 0 {
            let p = (0..3)
                .max_by(|&a, &b| {
                    fraction(c, a)
                        .partial_cmp(&fraction(c, b))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0);
            sizes[c][p] += 1;
            supply[c] -= 1;
        }
    }
    sizes
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Splits examples into train/validation/test.
///
/// Each stratum (one per label when `stratified`, otherwise a single one) is
/// shuffled with a ChaCha8 stream seeded by `seed`, then cut into consecutive
/// runs of the sizes computed above. Within a partition, examples keep their
/// input order.
pub fn split(
    examples: &[LabeledExample],
    ratios: SplitRatios,
    seed: u64,
    stratified: bool,
) -> Result<DatasetSplit, DatasetError> {
    ratios.validate()?;
    if examples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut seen = HashSet::new();
    for e in examples {
        if !seen.insert(e.job_id()) {
            return Err(DatasetError::DuplicateJob(e.job_id().to_string()));
        }
    }
    let strata: Vec<Vec<usize>> = if stratified {
        Label::ALL
            .iter()
            .map(|l| {
                let members: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label == *l).collect();
                if members.is_empty() {
                    Err(DatasetError::MissingClass(*l))
                } else {
                    Ok(members)
                }
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![(0..examples.len()).collect()]
    };
    let sizes = stratum_sizes(&strata.iter().map(Vec::len).collect::<Vec<_>>(), ratios.as_array());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Partition::Unassigned; examples.len()];
    for (mut members, size) in strata.into_iter().zip(sizes) {
        shuffle(&mut members, &mut rng);
        let mut cursor = members.into_iter();
        for (partition, count) in [Partition::Train, Partition::Validation, Partition::Test]
            .into_iter()
            .zip(size)
        {
            for idx in cursor.by_ref().take(count) {
                assignment[idx] = partition;
            }
        }
    }
    let mut out = DatasetSplit::default();
    for (example, partition) in examples.iter().zip(assignment) {
        match partition {
            Partition::Train => out.train.push(example.clone()),
            Partition::Validation => out.validation.push(example.clone()),
            Partition::Test => out.test.push(example.clone()),
            Partition::Unassigned => unreachable!("every stratum member is assigned"),
        }
    }
    Ok(out)
}

/// Appends `copies` pairs of empty-text examples, `(normal, anomalous)` per
/// pair, after the untouched input.
pub fn debias_augment(train: &[LabeledExample], copies: usize) -> Vec<LabeledExample> {
    let mut out = Vec::with_capacity(train.len() + 2 * copies);
    out.extend_from_slice(train);
    for k in 0..copies {
        for label in Label::ALL {
            let id = format!("{DEBIAS_JOB_PREFIX}{k}-{}", label.token().to_ascii_lowercase());
            out.push(LabeledExample::new(Sentence::empty(id), "debias", label));
        }
    }
    out
}

/// Default number of augmentation pairs: 1% of the training size, at least one.
pub fn default_debias_copies(train_len: usize) -> usize {
    ((train_len as f64 * 0.01).round() as usize).max(1)
}

fn check_field(field: &str, what: &str) -> Result<(), DatasetError> {
    if field.contains(['\t', '\n', '\r']) {
        return Err(DatasetError::Format {
            line: 0,
            message: format!("{what} `{}` contains a tab or newline", field.escape_debug()),
        });
    }
    Ok(())
}

/// Writes examples tagged with `partition`, without the file header.
pub fn write_examples<W: Write>(
    out: &mut W,
    partition: Partition,
    examples: &[LabeledExample],
) -> Result<(), DatasetError> {
    for e in examples {
        check_field(e.text(), "sentence")?;
        check_field(e.job_id(), "job id")?;
        check_field(&e.workflow_id, "workflow id")?;
        writeln!(
            out,
            "{}, {}\t{}\t{}\t{}\t{}",
            e.text(),
            e.label.token(),
            partition,
            e.job_id(),
            e.workflow_id,
            e.sentence.prefix_len
        )?;
    }
    Ok(())
}

/// Writes a complete dataset file holding a single partition.
pub fn write_partition_file(
    path: &Path,
    partition: Partition,
    examples: &[LabeledExample],
) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    writeln!(buf, "{FILE_HEADER}")?;
    write_examples(&mut buf, partition, examples)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    writeln!(buf, "{FILE_HEADER}")?;
    write_examples(&mut buf, Partition::Train, &split.train)?;
    write_examples(&mut buf, Partition::Validation, &split.validation)?;
    write_examples(&mut buf, Partition::Test, &split.test)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Parses a single example line. `line_no` is 1-based and only used for
/// errors and for naming jobs on metadata-less lines.
pub fn parse_line(line: &str, line_no: usize) -> Result<(Partition, LabeledExample), DatasetError> {
    let fail = |message: String| DatasetError::Format { line: line_no, message };
    let mut fields = line.split('\t');
    let head = fields.next().unwrap_or("");
    let (text, token) = head
        .rsplit_once(',')
        .ok_or_else(|| fail("missing `, <label>` after the sentence".into()))?;
    let label = Label::parse_token(token).ok_or_else(|| fail(format!("unknown label token `{}`", token.trim())))?;
    let text = text.trim_end();
    let meta: Vec<&str> = fields.collect();
    let (partition, job_id, workflow_id, prefix_len) = match meta.as_slice() {
        [] => (
            Partition::Unassigned,
            format!("line-{line_no}"),
            String::new(),
            clause_count(text),
        ),
        [p, job, wf, len] => {
            let partition = Partition::parse(p).ok_or_else(|| fail(format!("unknown partition `{p}`")))?;
            let prefix_len: usize = len
                .parse()
                .map_err(|_| fail(format!("clause count `{len}` is not an integer")))?;
            if prefix_len != clause_count(text) {
                return Err(fail(format!(
                    "clause count {prefix_len} does not match the {} clauses in the sentence",
                    clause_count(text)
                )));
            }
            if job.is_empty() {
                return Err(fail("empty job id".into()));
            }
            (partition, job.to_string(), wf.to_string(), prefix_len)
        }
        other => return Err(fail(format!("expected 0 or 4 metadata fields, found {}", other.len()))),
    };
    Ok((
        partition,
        LabeledExample::new(
            Sentence {
                text: text.to_string(),
                job_id,
                prefix_len,
            },
            workflow_id,
            label,
        ),
    ))
}

/// Reads every example with its partition tag. The version header is
/// optional; blank lines are skipped.
pub fn read_examples<R: Read>(source: R) -> Result<Vec<(Partition, LabeledExample)>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if line_no == 1 && line == FILE_HEADER {
                continue;
            }
            return Err(DatasetError::Format {
                line: line_no,
                message: format!("unexpected header `{line}` (supported: `{FILE_HEADER}`)"),
            });
        }
        out.push(parse_line(&line, line_no)?);
    }
    Ok(out)
}

pub fn read_examples_file(path: &Path) -> Result<Vec<(Partition, LabeledExample)>, DatasetError> {
    read_examples(fs::File::open(path)?)
}

/// Reads a dataset file into its partitions. Unassigned lines are rejected.
pub fn read_dataset(path: &Path) -> Result<DatasetSplit, DatasetError> {
    let mut out = DatasetSplit::default();
    let file = fs::read_to_string(path)?;
    for (partition, example) in read_examples(file.as_bytes())? {
        match partition {
            Partition::Train => out.train.push(example),
            Partition::Validation => out.validation.push(example),
            Partition::Test => out.test.push(example),
            Partition::Unassigned => {
                return Err(DatasetError::Format {
                    line: 0,
                    message: format!("example `{}` has no partition", example.job_id()),
                })
            }
        }
    }
    Ok(out)
}
