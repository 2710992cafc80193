// SPDX-License-Identifier: Apache-2.0

//! The run configuration: one versioned TOML document per experiment.
//!
//! Relative paths resolve against the directory holding the config file.
//! The only environment overrides are `WFAD_ADAPTER_URL` and
//! `WFAD_ADAPTER_COMMAND`, which replace the adapter endpoint transport.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use wfad_core::backend::{EndpointConfig, MockRule, ReplyStyle, TrainConfig, Transport};
use wfad_core::dataset::SplitRatios;
use wfad_core::detect::DetectorConfig;
use wfad_core::ingest::{FeatureSchema, Label, TableOptions};
use wfad_core::prompt::{ExampleOrder, ExamplePolicy, LabelVocabulary, PromptMode, PromptSpec};

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_ADAPTER_URL: &str = "WFAD_ADAPTER_URL";
pub const ENV_ADAPTER_COMMAND: &str = "WFAD_ADAPTER_COMMAND";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Mock,
    Linear,
    SequenceAdapter,
    GenerativeAdapter,
    MockGenerator,
}

impl BackendKind {
    pub fn is_generative(self) -> bool {
        matches!(self, BackendKind::GenerativeAdapter | BackendKind::MockGenerator)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Raw job table consumed by `ingest`.
    pub table: Option<PathBuf>,
    /// Unsplit dataset file; defaults to `<output>/examples.wfad`.
    pub examples: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// `job_id,feature,value` event stream consumed by `detect`.
    pub events: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSection {
    pub fn ratios(&self) -> Result<SplitRatios, CliError> {
        let [t, v, s] = self.ratios;
        Ok(SplitRatios::new(t, v, s)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub policy: ExamplePolicy,
    pub shots: usize,
    pub seed: u64,
    pub mode: PromptMode,
    pub order: ExampleOrder,
    pub normal_token: String,
    pub anomalous_token: String,
    pub step_by_step: Option<String>,
}

impl Default for PromptSection {
    fn default() -> Self {
        let vocab = LabelVocabulary::default();
        PromptSection {
            policy: ExamplePolicy::default(),
            shots: 0,
            seed: 0,
            mode: PromptMode::default(),
            order: ExampleOrder::default(),
            normal_token: vocab.token(Label::Normal).to_string(),
            anomalous_token: vocab.token(Label::Anomalous).to_string(),
            step_by_step: None,
        }
    }
}

impl PromptSection {
    pub fn spec(&self, schema: &FeatureSchema) -> Result<PromptSpec, CliError> {
        let mut spec = PromptSpec::new(schema.clone());
        spec.policy = self.policy;
        spec.shots = self.shots;
        spec.seed = self.seed;
        spec.mode = self.mode;
        spec.order = self.order;
        spec.vocabulary = LabelVocabulary::new(&self.normal_token, &self.anomalous_token)?;
        if let Some(s) = &self.step_by_step {
            spec.step_by_step = s.clone();
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Model file to load instead of building a fresh backend.
    pub model: Option<PathBuf>,
    pub rules: Vec<MockRule>,
    pub empty_normal_probability: f64,
    pub endpoint: Option<EndpointConfig>,
    /// The remote sequence classifier is already fine-tuned.
    pub fine_tuned: bool,
    /// Fine-tune the generative model before prompting.
    pub fine_tune: bool,
    pub reply_style: ReplyStyle,
    /// Label used when a generated answer names no category.
    pub fallback: Option<Label>,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::default(),
            model: None,
            rules: Vec::new(),
            empty_normal_probability: 0.5,
            endpoint: None,
            fine_tuned: false,
            fine_tune: false,
            reply_style: ReplyStyle::default(),
            fallback: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub runs: usize,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { runs: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferDataset {
    pub id: String,
    /// Directory holding `train.wfad`, `validation.wfad` and `test.wfad`.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementalSection {
    pub source: String,
    pub target: String,
    pub portions: Vec<f64>,
    /// Training settings for the continuation on the target; defaults to
    /// the main `[train]` block.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub datasets: Vec<TransferDataset>,
    pub incremental: Option<IncrementalSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Feature schema file (TOML or JSON).
    pub schema: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub table: TableOptions,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub detect: DetectorConfig,
    #[serde(default)]
    pub transfer: TransferSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A parsed config plus where it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub base_dir: PathBuf,
    /// SHA-256 over the config bytes and the applied overrides.
    pub hash: String,
    bytes: Vec<u8>,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config("config is not UTF-8".into()))?;
        let run: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if run.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                run.version
            )));
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut loaded = LoadedConfig {
            run,
            base_dir,
            hash: String::new(),
            bytes,
        };
        loaded.rehash(&[]);
        Ok(loaded)
    }

    /// Recomputes the hash with the given `(flag, value)` overrides.
    pub fn rehash(&mut self, overrides: &[(String, String)]) {
        let mut h = Sha256::new();
        h.update(&self.bytes);
        for (flag, value) in overrides {
            h.update(format!("\n--{flag}={value}").as_bytes());
        }
        self.hash = hex::encode(h.finalize());
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.run.output)
    }

    pub fn in_output(&self, name: &str) -> PathBuf {
        self.output_dir().join(name)
    }

    /// A declared input path, or `default` under the output directory.
    pub fn input(&self, declared: &Option<PathBuf>, default: &str) -> PathBuf {
        match declared {
            Some(p) => self.resolve(p),
            None => self.in_output(default),
        }
    }

    pub fn require(&self, declared: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
        let p = declared
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("no {what} path configured")))?;
        Ok(self.resolve(p))
    }

    pub fn schema(&self) -> Result<FeatureSchema, CliError> {
        let path = self.resolve(&self.run.schema);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let parsed = if is_json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Config(format!("schema {}: {e}", path.display())))
    }

    /// Applies the adapter-endpoint environment overrides.
    pub fn apply_env(&mut self, url: Option<String>, command: Option<String>) -> Result<(), CliError> {
        let transport = match (url, command) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(format!(
                    "set only one of {ENV_ADAPTER_URL} and {ENV_ADAPTER_COMMAND}"
                )))
            }
            (Some(url), None) => Transport::Http { url },
            (None, Some(cmd)) => {
                let mut parts = cmd.split_whitespace().map(str::to_string);
                let program = parts
                    .next()
                    .ok_or_else(|| CliError::Config(format!("{ENV_ADAPTER_COMMAND} is empty")))?;
                Transport::Command {
                    program,
                    args: parts.collect(),
                }
            }
            (None, None) => return Ok(()),
        };
        match &mut self.run.backend.endpoint {
            Some(e) => e.transport = transport,
            None => self.run.backend.endpoint = Some(EndpointConfig::new(transport)),
        }
        Ok(())
    }

    pub fn endpoint(&self) -> Result<EndpointConfig, CliError> {
        let e = self.run.backend.endpoint.clone().ok_or_else(|| {
            CliError::Config(format!(
                "backend `{:?}` needs [backend.endpoint] or {ENV_ADAPTER_URL}/{ENV_ADAPTER_COMMAND}",
                self.run.backend.kind
            ))
        })?;
        e.validate()?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("wfad.toml");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let c = LoadedConfig::load(&write(dir.path(), "version = 1\nschema = \"s.toml\"\n")).unwrap();
        assert_eq!(c.run.split.ratios, [0.8, 0.1, 0.1]);
        assert_eq!(c.run.probe.runs, 1000);
        assert_eq!(c.output_dir(), dir.path().join("out"));
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn version_and_unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = LoadedConfig::load(&write(dir.path(), "version = 2\nschema = \"s\"\n")).unwrap_err();
        assert!(matches!(e, CliError::Config(m) if m.contains("version 2")));
        let e =
            LoadedConfig::load(&write(dir.path(), "version = 1\nschema = \"s\"\n[split]\nratio = 1\n")).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
    }

    #[test]
    fn env_override_replaces_transport() {
        let dir = tempfile::tempdir().unwrap();
        let text = "version = 1\nschema = \"s\"\n[backend]\nkind = \"sequence-adapter\"\n[backend.endpoint]\ntimeout_ms = 5\ntransport = { kind = \"http\", url = \"http://a/\" }\n";
        let mut c = LoadedConfig::load(&write(dir.path(), text)).unwrap();
        c.apply_env(None, Some("python3 model.py --fast".into())).unwrap();
        let e = c.endpoint().unwrap();
        assert_eq!(e.timeout_ms, 5);
        assert_eq!(
            e.transport,
            Transport::Command {
                program: "python3".into(),
                args: vec!["model.py".into(), "--fast".into()]
            }
        );
        assert!(c.apply_env(Some("http://b/".into()), Some("x".into())).is_err());
    }

    #[test]
    fn overrides_change_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = LoadedConfig::load(&write(dir.path(), "version = 1\nschema = \"s\"\n")).unwrap();
        let plain = c.hash.clone();
        c.rehash(&[("seed".into(), "3".into())]);
        assert_ne!(c.hash, plain);
    }
}
