// SPDX-License-Identifier: Apache-2.0

//! `wfad`: ingest job tables, split them, train and evaluate classifiers,
//! run in-context-learning experiments and replay online detection.

mod commands;
mod config;
mod error;
mod output;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{BackendKind, LoadedConfig, ENV_ADAPTER_COMMAND, ENV_ADAPTER_URL};
use error::{exit, CliError};
use std::path::PathBuf;
use std::process::ExitCode;
use wfad_core::backend::FreezePolicy;
use wfad_core::prompt::{ExamplePolicy, PromptMode};

#[derive(Parser, Debug)]
#[command(name = "wfad", version, about = "Anomaly detection for workflow job logs")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "wfad.toml")]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Number of in-context examples.
    #[arg(long, global = true)]
    shots: Option<usize>,
    #[arg(long, global = true, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    freeze: Option<FreezeArg>,
    /// Output directory (overrides `output` in the configuration).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Serialize a job table into a labeled example file.
    Ingest,
    /// Stratified train/validation/test split.
    Split,
    /// Fit the configured backend and save the model.
    Train,
    /// Evaluate a model on the test split.
    Eval,
    /// In-context-learning evaluation over a generative backend.
    Icl,
    /// Replay an event stream through the online detector.
    Detect,
    /// Classify the empty sentence repeatedly and report label bias.
    BiasProbe,
    /// Cross-dataset transfer matrix (and optional incremental curve).
    Transfer,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Split => "split",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Icl => "icl",
            Command::Detect => "detect",
            Command::BiasProbe => "bias-probe",
            Command::Transfer => "transfer",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum BackendArg {
    Mock,
    Linear,
    SequenceAdapter,
    GenerativeAdapter,
    MockGenerator,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PolicyArg {
    Neg,
    Pos,
    Mixed,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    CategoryOnly,
    ChainOfThought,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FreezeArg {
    AllParameters,
    HeadOnly,
}

fn apply_overrides(cfg: &mut LoadedConfig, g: &GlobalArgs) {
    let mut applied: Vec<(String, String)> = Vec::new();
    let run = &mut cfg.run;
    if let Some(seed) = g.seed {
        run.split.seed = seed;
        run.train.seed = seed;
        run.prompt.seed = seed;
        run.probe.seed = seed;
        applied.push(("seed".into(), seed.to_string()));
    }
    if let Some(b) = g.backend {
        run.backend.kind = match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Linear => BackendKind::Linear,
            BackendArg::SequenceAdapter => BackendKind::SequenceAdapter,
            BackendArg::GenerativeAdapter => BackendKind::GenerativeAdapter,
            BackendArg::MockGenerator => BackendKind::MockGenerator,
        };
        applied.push(("backend".into(), format!("{b:?}")));
    }
    if let Some(shots) = g.shots {
        run.prompt.shots = shots;
        applied.push(("shots".into(), shots.to_string()));
    }
    if let Some(p) = g.policy {
        run.prompt.policy = match p {
            PolicyArg::Neg => ExamplePolicy::NegOnly,
            PolicyArg::Pos => ExamplePolicy::PosOnly,
            PolicyArg::Mixed => ExamplePolicy::Mixed,
        };
        applied.push(("policy".into(), format!("{p:?}")));
    }
    if let Some(m) = g.mode {
        run.prompt.mode = match m {
            ModeArg::CategoryOnly => PromptMode::CategoryOnly,
            ModeArg::ChainOfThought => PromptMode::ChainOfThought,
        };
        applied.push(("mode".into(), format!("{m:?}")));
    }
    if let Some(f) = g.freeze {
        run.train.freeze_policy = match f {
            FreezeArg::AllParameters => FreezePolicy::AllParameters,
            FreezeArg::HeadOnly => FreezePolicy::HeadOnly,
        };
        applied.push(("freeze".into(), format!("{f:?}")));
    }
    if let Some(out) = &g.output {
        // Relative to the working directory, like any other CLI path. Not
        // hashed: where results land does not change them.
        run.output = std::env::current_dir()
            .map(|d| d.join(out))
            .unwrap_or_else(|_| out.clone());
    }
    cfg.rehash(&applied);
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = LoadedConfig::load(&cli.global.config)?;
    apply_overrides(&mut cfg, &cli.global);
    cfg.apply_env(
        std::env::var(ENV_ADAPTER_URL).ok(),
        std::env::var(ENV_ADAPTER_COMMAND).ok(),
    )?;
    let mut out = output::OutputDir::claim(&cfg.output_dir(), cli.command.name())?;
    let result = match cli.command {
        Command::Ingest => commands::ingest(&cfg, &mut out),
        Command::Split => commands::split(&cfg, &mut out),
        Command::Train => commands::train(&cfg, &mut out),
        Command::Eval => commands::eval(&cfg, &mut out),
        Command::Icl => commands::icl(&cfg, &mut out),
        Command::Detect => commands::detect(&cfg, &mut out),
        Command::BiasProbe => commands::bias_probe(&cfg, &mut out),
        Command::Transfer => commands::transfer(&cfg, &mut out),
    };
    match &result {
        Ok(()) => out.log("ok"),
        Err(e) => out.log(&format!("error(code={})", e.code())),
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("wfad {}: {e}", cli.command.name());
            ExitCode::from(e.code() as u8)
        }
    }
}
