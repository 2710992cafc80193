// SPDX-License-Identifier: Apache-2.0

//! Anomaly detection for workflow job logs.
//!
//! Job telemetry is serialized into plain sentences (`runtime is 2090.0`),
//! split into stratified partitions, and classified by pluggable backends:
//! a rule mock, a trainable linear baseline, or external language models
//! reached through a small JSON protocol — either as sequence classifiers or
//! as generators prompted with in-context examples. The [`detect`] module
//! re-classifies each job as its features arrive.
//!
//! ```
//! use wfad_core::ingest::{serialize_full, FeatureSchema, JobRecord};
//!
//! let schema = FeatureSchema::durations(&["wms_delay", "runtime"]).unwrap();
//! let job = JobRecord::new("j1", "wf").with_value("wms_delay", 6.0).with_value("runtime", 2090.0);
//! assert_eq!(serialize_full(&job, &schema).unwrap().text, "wms_delay is 6.0 runtime is 2090.0");
//! ```

pub mod backend;
pub mod dataset;
pub mod detect;
pub mod evaluate;
pub mod ingest;
pub mod prompt;

pub use backend::{Classifier, Prediction, TrainConfig, TrainReport};
pub use dataset::{DatasetSplit, LabeledExample};
pub use ingest::{FeatureSchema, JobRecord, Label, Sentence};
