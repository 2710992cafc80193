// SPDX-License-Identifier: Apache-2.0

//! Clients for externally hosted models.
//!
//! Every request is one JSON object with an `op` field; every response is
//! one JSON object, or `{"error": "..."}`.
//!
//! | op         | request fields                                   | response fields                       |
//! |------------|--------------------------------------------------|---------------------------------------|
//! | `classify` | `text`, `deterministic`, `seed`?                 | `label`, `score`?                     |
//! | `generate` | `prompt`, `deterministic`, `seed`?, `max_tokens` | `completion`, `score`?                |
//! | `fit`      | `train`, `validation`, `config`                  | `epochs`, parameter counts, `touched` |
//!
//! Labels may be `LABEL_0`/`LABEL_1`, `0`/`1` or the category names; they
//! are canonicalized here. Weights, LoRA and quantization live entirely on
//! the remote side and are passed through untouched.

use super::icl::{Generation, Generator};
use super::{
    decode_payload, encode_payload, require_both_classes, Artifact, BackendError, Classifier, EpochMetrics, Prediction,
    Sampling, TrainConfig, TrainReport,
};
use crate::dataset::LabeledExample;
use crate::ingest::Label;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Transport {
    /// `POST` of the request body to `url`.
    Http { url: String },
    /// One process per request: request on stdin, response on stdout.
    Command {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub transport: Transport,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Additional attempts after a transport failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Ask the remote model for greedy decoding.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    2
}
fn default_true() -> bool {
    true
}
fn default_in_flight() -> usize {
    4
}
fn default_max_tokens() -> usize {
    64
}

impl EndpointConfig {
    pub fn new(transport: Transport) -> EndpointConfig {
        EndpointConfig {
            transport,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            deterministic: true,
            max_in_flight: default_in_flight(),
            max_tokens: default_max_tokens(),
        }
    }

    pub fn http(url: impl Into<String>) -> EndpointConfig {
        EndpointConfig::new(Transport::Http { url: url.into() })
    }

    pub fn command(program: impl Into<String>, args: Vec<String>) -> EndpointConfig {
        EndpointConfig::new(Transport::Command {
            program: program.into(),
            args,
        })
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Config("endpoint timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        match &self.transport {
            Transport::Http { url } if !(url.starts_with("http://") || url.starts_with("https://")) => {
                Err(BackendError::Config(format!("endpoint url `{url}` is not http(s)")))
            }
            Transport::Command { program, .. } if program.trim().is_empty() => {
                Err(BackendError::Config("endpoint command is empty".into()))
            }
            _ => Ok(()),
        }
    }

    /// Sends one request, retrying transport failures. Remote `error`
    /// replies are not retried.
    pub fn call(&self, request: &Value) -> Result<Value, BackendError> {
        self.validate()?;
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.call_once(request) {
                Ok(response) => {
                    if let Some(err) = response.get("error") {
                        let msg = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
                        return Err(BackendError::Adapter(format!("remote error: {msg}")));
                    }
                    return Ok(response);
                }
                Err(e) => last = e,
            }
        }
        Err(BackendError::Adapter(format!(
            "endpoint unreachable after {} attempt(s): {last}",
            self.retries + 1
        )))
    }

    fn call_once(&self, request: &Value) -> Result<Value, String> {
        let timeout = Duration::from_millis(self.timeout_ms);
        match &self.transport {
            Transport::Http { url } => {
                let agent = ureq::AgentBuilder::new().timeout(timeout).build();
                let response = agent.post(url).send_json(request.clone()).map_err(|e| e.to_string())?;
                response
                    .into_json::<Value>()
                    .map_err(|e| format!("malformed response: {e}"))
            }
            Transport::Command { program, args } => run_command(program, args, request, timeout),
        }
    }
}

fn run_command(program: &str, args: &[String], request: &Value, timeout: Duration) -> Result<Value, String> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| format!("cannot start `{program}`: {e}"))?;
    let mut stdin = child.stdin.take().ok_or("no stdin")?;
    let body = serde_json::to_vec(request).map_err(|e| e.to_string())?;
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(&body);
        let _ = stdin.write_all(b"\n");
    });
    let mut stdout = child.stdout.take().ok_or("no stdout")?;
    let reader = thread::spawn(move || {
        let mut out = Vec::new();
        stdout.read_to_end(&mut out).map(|_| out)
    });
    let deadline = Instant::now() + timeout;
    let status = loop {
        match child.try_wait().map_err(|e| e.to_string())? {
            Some(status) => break status,
            None if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("`{program}` timed out after {} ms", timeout.as_millis()));
            }
            None => thread::sleep(Duration::from_millis(2)),
        }
    };
    let _ = writer.join();
    let out = reader
        .join()
        .map_err(|_| "reader thread panicked".to_string())?
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("`{program}` exited with {status}"));
    }
    serde_json::from_slice(&out).map_err(|e| format!("malformed response: {e}"))
}

/// Canonical label from a remote label field.
pub(crate) fn canonical_label(value: &Value) -> Result<Label, BackendError> {
    let token = match value {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        other => return Err(BackendError::Adapter(format!("label {other} is not a string"))),
    };
    Label::parse_token(&token).ok_or_else(|| BackendError::Adapter(format!("unknown label `{token}`")))
}

fn optional_score(response: &Value) -> Result<Option<f64>, BackendError> {
    match response.get("score") {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_f64() {
            Some(s) if (0.0..=1.0).contains(&s) => Ok(Some(s)),
            _ => Err(BackendError::Adapter(format!("score {v} outside [0, 1]"))),
        },
    }
}

fn example_json(e: &LabeledExample) -> Value {
    json!({ "text": e.text(), "label": e.label.token() })
}

fn fit_request(train: &[LabeledExample], validation: &[LabeledExample], config: &TrainConfig) -> Value {
    json!({
        "op": "fit",
        "train": train.iter().map(example_json).collect::<Vec<_>>(),
        "validation": validation.iter().map(example_json).collect::<Vec<_>>(),
        "config": {
            "epochs": config.epochs,
            "seed": config.seed,
            "freeze_policy": config.freeze_policy,
            "adapter_params": config.adapter,
        },
    })
}

#[derive(Deserialize)]
struct RemoteEpoch {
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    #[serde(default)]
    train_loss: Option<f64>,
}

#[derive(Deserialize)]
struct RemoteFit {
    #[serde(default)]
    epochs: Vec<RemoteEpoch>,
    #[serde(default)]
    trainable_parameters: usize,
    #[serde(default)]
    total_parameters: usize,
    #[serde(default)]
    touched_parameters: Vec<String>,
}

fn fit_report(
    name: &str,
    response: Value,
    train_len: usize,
    config: &TrainConfig,
    started: Instant,
) -> Result<TrainReport, BackendError> {
    let remote: RemoteFit =
        serde_json::from_value(response).map_err(|e| BackendError::Adapter(format!("malformed fit response: {e}")))?;
    Ok(TrainReport {
        backend: name.to_string(),
        freeze_policy: config.freeze_policy,
        train_examples: train_len,
        epochs: remote
            .epochs
            .into_iter()
            .enumerate()
            .map(|(i, e)| EpochMetrics {
                epoch: i + 1,
                accuracy: e.accuracy,
                precision: e.precision,
                recall: e.recall,
                f1: e.f1,
                train_loss: e.train_loss,
            })
            .collect(),
        trainable_parameters: remote.trainable_parameters,
        total_parameters: remote.total_parameters,
        touched_parameters: remote.touched_parameters,
        best_epoch: None,
        wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
    })
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
pub(crate) fn fan_out<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R, BackendError> + Sync,
) -> Result<Vec<R>, BackendError> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<R, BackendError>>> = (0..items.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot is filled")).collect()
}

/// Per-request seeds for stochastic decoding.
#[derive(Debug, Default)]
struct SeedStream(AtomicU64);

impl SeedStream {
    fn next(&self, base: u64) -> u64 {
        base.wrapping_add(self.0.fetch_add(1, Ordering::Relaxed))
    }
}

fn sampling_fields(endpoint: &EndpointConfig, sampling: Sampling, seeds: &SeedStream) -> (bool, Option<u64>) {
    match sampling {
        Sampling::Stochastic { seed } => (false, Some(seeds.next(seed))),
        Sampling::Deterministic => (endpoint.deterministic, None),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SequenceState {
    endpoint: EndpointConfig,
    fine_tuned: bool,
    sampling: Sampling,
}

/// Externally hosted sequence classifier.
#[derive(Debug)]
pub struct SequenceAdapter {
    state: SequenceState,
    seeds: SeedStream,
}

impl SequenceAdapter {
    pub const NAME: &'static str = "sequence-adapter";

    pub fn new(endpoint: EndpointConfig) -> SequenceAdapter {
        SequenceAdapter {
            state: SequenceState {
                endpoint,
                fine_tuned: false,
                sampling: Sampling::Deterministic,
            },
            seeds: SeedStream::default(),
        }
    }

    /// Marks the remote model as already fine-tuned, so it can predict
    /// without a local `fit`.
    pub fn with_fine_tuned(mut self, fine_tuned: bool) -> SequenceAdapter {
        self.state.fine_tuned = fine_tuned;
        self
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.state.endpoint
    }

    pub fn from_artifact(artifact: &Artifact) -> Result<SequenceAdapter, BackendError> {
        let state: SequenceState = decode_payload(artifact, Self::NAME)?;
        state.endpoint.validate()?;
        Ok(SequenceAdapter {
            state,
            seeds: SeedStream::default(),
        })
    }
}

impl Classifier for SequenceAdapter {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn is_ready(&self) -> bool {
        self.state.fine_tuned
    }

    fn fit(
        &mut self,
        train: &[LabeledExample],
        validation: &[LabeledExample],
        config: &TrainConfig,
    ) -> Result<TrainReport, BackendError> {
        config.validate()?;
        require_both_classes(train)?;
        let started = Instant::now();
        let response = self.state.endpoint.call(&fit_request(train, validation, config))?;
        let report = fit_report(Self::NAME, response, train.len(), config, started)?;
        self.state.fine_tuned = true;
        Ok(report)
    }

    fn predict(&self, text: &str) -> Result<Prediction, BackendError> {
        if !self.state.fine_tuned {
            return Err(BackendError::NotReady(
                "sequence adapter has not been fine-tuned".into(),
            ));
        }
        let (deterministic, seed) = sampling_fields(&self.state.endpoint, self.state.sampling, &self.seeds);
        let mut request = json!({ "op": "classify", "text": text, "deterministic": deterministic });
        if let Some(seed) = seed {
            request["seed"] = json!(seed);
        }
        let response = self.state.endpoint.call(&request)?;
        let label = canonical_label(
            response
                .get("label")
                .ok_or_else(|| BackendError::Adapter("response has no label".into()))?,
        )?;
        let mut p = Prediction::new(label, optional_score(&response)?.unwrap_or(1.0));
        p.raw_output = Some(response.to_string());
        Ok(p)
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<Prediction>, BackendError> {
        fan_out(texts, self.state.endpoint.max_in_flight, |t| self.predict(t))
    }

    fn set_sampling(&mut self, sampling: Sampling) -> Result<(), BackendError> {
        self.state.sampling = sampling;
        Ok(())
    }

    fn to_artifact(&self) -> Result<Artifact, BackendError> {
        Ok(Artifact {
            backend: Self::NAME.into(),
            schema_hash: None,
            payload: encode_payload(&self.state)?,
        })
    }
}

/// Externally hosted generative model used by in-context learning.
#[derive(Debug, Serialize, Deserialize)]
pub struct GenerativeAdapter {
    endpoint: EndpointConfig,
    #[serde(default)]
    sampling: Sampling,
    #[serde(skip)]
    seeds: SeedStream,
}

impl Clone for GenerativeAdapter {
    fn clone(&self) -> Self {
        GenerativeAdapter::new(self.endpoint.clone()).with_sampling(self.sampling)
    }
}

impl PartialEq for GenerativeAdapter {
    fn eq(&self, other: &Self) -> bool {
        self.endpoint == other.endpoint && self.sampling == other.sampling
    }
}

impl GenerativeAdapter {
    pub fn new(endpoint: EndpointConfig) -> GenerativeAdapter {
        GenerativeAdapter {
            endpoint,
            sampling: Sampling::Deterministic,
            seeds: SeedStream::default(),
        }
    }

    fn with_sampling(mut self, sampling: Sampling) -> GenerativeAdapter {
        self.sampling = sampling;
        self
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }
}

impl Generator for GenerativeAdapter {
    fn name(&self) -> &'static str {
        "generative-adapter"
    }

    fn generate(&self, prompt: &str) -> Result<Generation, BackendError> {
        let (deterministic, seed) = sampling_fields(&self.endpoint, self.sampling, &self.seeds);
        let mut request = json!({
            "op": "generate",
            "prompt": prompt,
            "deterministic": deterministic,
            "max_tokens": self.endpoint.max_tokens,
        });
        if let Some(seed) = seed {
            request["seed"] = json!(seed);
        }
        let response = self.endpoint.call(&request)?;
        let completion = response
            .get("completion")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Adapter("response has no completion".into()))?
            .to_string();
        Ok(Generation {
            completion,
            score: optional_score(&response)?,
        })
    }

    fn fine_tune(
        &mut self,
        train: &[LabeledExample],
        validation: &[LabeledExample],
        config: &TrainConfig,
    ) -> Result<TrainReport, BackendError> {
        config.validate()?;
        require_both_classes(train)?;
        let started = Instant::now();
        let response = self.endpoint.call(&fit_request(train, validation, config))?;
        fit_report(self.name(), response, train.len(), config, started)
    }

    fn set_sampling(&mut self, sampling: Sampling) -> Result<(), BackendError> {
        self.sampling = sampling;
        Ok(())
    }

    fn max_in_flight(&self) -> usize {
        self.endpoint.max_in_flight
    }
}
