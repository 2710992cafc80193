// SPDX-License-Identifier: Apache-2.0

//! Online detection: features arrive one at a time per job, and every
//! growing prefix is re-serialized and classified.

use crate::backend::{BackendError, Classifier, Prediction};
use crate::ingest::{prefix_stream, serialize, FeatureSchema, IngestError, JobRecord, Label};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::sync::Mutex;
use thiserror::Error;

/// Reserved event feature carrying the job's ground-truth label.
pub const TRUTH_FEATURE: &str = "label";

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("job `{job_id}`: feature `{got}` out of order (expected {})", .expected.as_deref().unwrap_or("no further features"))]
    Sequencing {
        job_id: String,
        expected: Option<String>,
        got: String,
    },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("job `{0}`: {1}")]
    Lifecycle(String, String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Accept features that skip ahead in schema order.
    pub skip_tolerant: bool,
    /// Consecutive anomalous steps that raise an alert.
    pub alert_threshold: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            skip_tolerant: false,
            alert_threshold: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub prefix_len: usize,
    pub text: String,
    pub prediction: Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub job_id: String,
    pub prefix_len: usize,
    pub consecutive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTrace {
    pub job_id: String,
    pub steps: Vec<TraceStep>,
    pub truth: Option<Label>,
    #[serde(default)]
    pub alerts: Vec<Alert>,
}

impl DetectionTrace {
    /// First prefix position whose verdict matches the ground truth.
    pub fn first_correct(&self) -> Option<usize> {
        let truth = self.truth?;
        self.steps
            .iter()
            .find(|s| s.prediction.label == truth)
            .map(|s| s.prefix_len)
    }
}

#[derive(Debug)]
struct JobState {
    record: JobRecord,
    last_index: Option<usize>,
    trace: DetectionTrace,
    consecutive: usize,
}

#[derive(Debug, Default)]
struct DetectorState {
    active: HashMap<String, JobState>,
    sealed: BTreeSet<String>,
}

pub struct OnlineDetector {
    backend: Box<dyn Classifier>,
    schema: FeatureSchema,
    config: DetectorConfig,
    state: Mutex<DetectorState>,
    // Held around backend calls when the backend needs serialized inference.
    backend_lock: Mutex<()>,
}

impl OnlineDetector {
    pub fn new(
        backend: Box<dyn Classifier>,
        schema: FeatureSchema,
        config: DetectorConfig,
    ) -> Result<Self, DetectError> {
        if !backend.is_ready() {
            return Err(BackendError::NotReady(format!("{} is not ready", backend.name())).into());
        }
        if config.alert_threshold == 0 {
            return Err(DetectError::Input("alert threshold must be at least 1".into()));
        }
        Ok(OnlineDetector {
            backend,
            schema,
            config,
            state: Mutex::new(DetectorState::default()),
            backend_lock: Mutex::new(()),
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, DetectorState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Records one feature value for `job_id` and classifies the new prefix.
    ///
    /// Observes for different jobs may run concurrently; each job is expected
    /// to have a single writer.
    pub fn observe(&self, job_id: &str, feature: &str, value: f64) -> Result<Prediction, DetectError> {
        let idx = self
            .schema
            .index_of(feature)
            .ok_or_else(|| DetectError::UnknownFeature(feature.to_string()))?;
        let sentence = {
            let mut st = self.lock();
            if st.sealed.contains(job_id) {
                return Err(DetectError::Lifecycle(job_id.into(), "already finalized".into()));
            }
            let next = st.active.get(job_id).and_then(|j| j.last_index).map_or(0, |i| i + 1);
            let in_order = if self.config.skip_tolerant {
                idx >= next
            } else {
                idx == next
            };
            if !in_order {
                return Err(DetectError::Sequencing {
                    job_id: job_id.into(),
                    expected: self.schema.features().get(next).map(|f| f.name.clone()),
                    got: feature.into(),
                });
            }
            let job = st.active.entry(job_id.to_string()).or_insert_with(|| JobState {
                record: JobRecord::new(job_id, ""),
                last_index: None,
                trace: DetectionTrace {
                    job_id: job_id.to_string(),
                    steps: Vec::new(),
                    truth: None,
                    alerts: Vec::new(),
                },
                consecutive: 0,
            });
            let mut record = job.record.clone();
            record.values.insert(feature.to_string(), value);
            let sentence = serialize(&record, &self.schema, idx + 1)?;
            job.record = record;
            job.last_index = Some(idx);
            sentence
        };
        let prediction = if self.backend.sequential_inference() {
            let _guard = self.backend_lock.lock().unwrap_or_else(|e| e.into_inner());
            self.backend.predict(&sentence.text)?
        } else {
            self.backend.predict(&sentence.text)?
        };
        let mut st = self.lock();
        let job = st
            .active
            .get_mut(job_id)
            .ok_or_else(|| DetectError::Lifecycle(job_id.into(), "finalized during observe".into()))?;
        if prediction.label.is_anomalous() {
            job.consecutive += 1;
            if job.consecutive == self.config.alert_threshold {
                job.trace.alerts.push(Alert {
                    job_id: job_id.to_string(),
                    prefix_len: sentence.prefix_len,
                    consecutive: job.consecutive,
                });
            }
        } else {
            job.consecutive = 0;
        }
        job.trace.steps.push(TraceStep {
            prefix_len: sentence.prefix_len,
            text: sentence.text,
            prediction: prediction.clone(),
        });
        Ok(prediction)
    }

    /// Attaches the ground-truth label used by early-detection statistics.
    pub fn set_truth(&self, job_id: &str, label: Label) -> Result<(), DetectError> {
        let mut st = self.lock();
        if st.sealed.contains(job_id) {
            return Err(DetectError::Lifecycle(job_id.into(), "already finalized".into()));
        }
        match st.active.get_mut(job_id) {
            Some(job) => {
                job.trace.truth = Some(label);
                job.record.label = Some(label);
                Ok(())
            }
            None => Err(DetectError::Lifecycle(job_id.into(), "no observations yet".into())),
        }
    }

    pub fn active_jobs(&self) -> Vec<String> {
        let mut jobs: Vec<String> = self.lock().active.keys().cloned().collect();
        jobs.sort();
        jobs
    }

    /// Seals the job and returns its trace; later observes for it fail.
    pub fn finalize(&self, job_id: &str) -> Result<DetectionTrace, DetectError> {
        let mut st = self.lock();
        if st.sealed.contains(job_id) {
            return Err(DetectError::Lifecycle(job_id.into(), "already finalized".into()));
        }
        match st.active.get(job_id) {
            None => return Err(DetectError::Lifecycle(job_id.into(), "unknown job".into())),
            Some(job) if job.trace.steps.is_empty() => {
                return Err(DetectError::Lifecycle(job_id.into(), "no classified steps".into()))
            }
            Some(_) => {}
        }
        let job = st.active.remove(job_id).expect("presence checked above");
        st.sealed.insert(job_id.to_string());
        Ok(job.trace)
    }
}

/// Offline counterpart of the online engine: all prefixes of a complete
/// record, classified in one batch.
pub fn replay_offline(
    backend: &dyn Classifier,
    record: &JobRecord,
    schema: &FeatureSchema,
) -> Result<DetectionTrace, DetectError> {
    let prefixes = prefix_stream(record, schema)?;
    let texts: Vec<&str> = prefixes.iter().map(|s| s.text.as_str()).collect();
    let preds = backend.predict_batch(&texts)?;
    Ok(DetectionTrace {
        job_id: record.job_id.clone(),
        steps: prefixes
            .into_iter()
            .zip(preds)
            .map(|(s, p)| TraceStep {
                prefix_len: s.prefix_len,
                text: s.text,
                prediction: p,
            })
            .collect(),
        truth: record.label,
        alerts: Vec::new(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyDetectionStats {
    /// Prefix position → jobs first classified correctly there.
    pub histogram: BTreeMap<usize, usize>,
    pub undetected: usize,
    pub jobs: usize,
}

pub fn early_detection_stats(traces: &[DetectionTrace]) -> Result<EarlyDetectionStats, DetectError> {
    let mut stats = EarlyDetectionStats::default();
    for t in traces {
        if t.truth.is_none() {
            return Err(DetectError::Input(format!("trace `{}` has no ground truth", t.job_id)));
        }
        match t.first_correct() {
            Some(pos) => *stats.histogram.entry(pos).or_insert(0) += 1,
            None => stats.undetected += 1,
        }
        stats.jobs += 1;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    Feature { name: String, value: f64 },
    Truth(Label),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub job_id: String,
    pub kind: EventKind,
}

#[derive(Deserialize)]
struct RawEvent {
    job_id: String,
    feature: String,
    value: String,
}

/// Reads `job_id,feature,value` CSV events. Rows whose feature is
/// [`TRUTH_FEATURE`] carry a label token instead of a number.
pub fn read_events<R: Read>(source: R) -> Result<Vec<Event>, DetectError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let mut events = Vec::new();
    for (i, row) in reader.deserialize::<RawEvent>().enumerate() {
        let line = i + 2;
        let raw = row.map_err(|e| DetectError::Input(format!("event line {line}: {e}")))?;
        let kind = if raw.feature == TRUTH_FEATURE {
            EventKind::Truth(
                Label::parse_token(&raw.value)
                    .ok_or_else(|| DetectError::Input(format!("event line {line}: unknown label `{}`", raw.value)))?,
            )
        } else {
            let value = raw.value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DetectError::Input(format!("event line {line}: `{}` is not a finite number", raw.value))
            })?;
            EventKind::Feature {
                name: raw.feature,
                value,
            }
        };
        events.push(Event {
            job_id: raw.job_id,
            kind,
        });
    }
    Ok(events)
}

/// Feeds `events` in order and finalizes every job, returning traces in
/// order of first appearance.
pub fn run_events(detector: &OnlineDetector, events: &[Event]) -> Result<Vec<DetectionTrace>, DetectError> {
    let mut order: Vec<&str> = Vec::new();
    let mut pending_truth: HashMap<&str, Label> = HashMap::new();
    for e in events {
        if !order.contains(&e.job_id.as_str()) {
            order.push(&e.job_id);
        }
        match &e.kind {
            EventKind::Feature { name, value } => {
                detector.observe(&e.job_id, name, *value)?;
                if let Some(label) = pending_truth.remove(e.job_id.as_str()) {
                    detector.set_truth(&e.job_id, label)?;
                }
            }
            EventKind::Truth(label) => {
                if detector.set_truth(&e.job_id, *label).is_err() {
                    pending_truth.insert(&e.job_id, *label);
                }
            }
        }
    }
    order.into_iter().map(|id| detector.finalize(id)).collect()
}
