// SPDX-License-Identifier: Apache-2.0

use crate::config::{BackendKind, LoadedConfig};
use crate::error::CliError;
use crate::output::OutputDir;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use wfad_core::backend::{
    fit_with_config, from_artifact, read_artifact, save_model, BackendError, Classifier, GenerativeAdapter,
    GeneratorBackend, IclClassifier, LinearBaseline, MockBackend, MockGenerator, SequenceAdapter, TrainReport,
};
use wfad_core::dataset::{self, DatasetSplit, LabeledExample, Partition, PartitionStats, SplitStats};
use wfad_core::detect::{early_detection_stats, read_events, run_events, OnlineDetector};
use wfad_core::evaluate::{self, incremental_transfer, report_from_predictions, transfer_matrix, EvalReport};
use wfad_core::ingest::{load_table, serialize_full, FeatureSchema, LabelMode};
use wfad_core::prompt::PromptSpec;

pub const EXAMPLES_FILE: &str = "examples.wfad";
pub const MODEL_FILE: &str = "model.json";

fn partition_file(p: Partition) -> String {
    format!("{}.wfad", p.token())
}

fn read_partition(path: &Path) -> Result<Vec<LabeledExample>, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    Ok(dataset::read_examples_file(path)
        .map_err(|e| match e {
            dataset::DatasetError::Io(io) => CliError::io(path, io),
            other => CliError::Data(format!("{}: {other}", path.display())),
        })?
        .into_iter()
        .map(|(_, e)| e)
        .collect())
}

fn read_split_dir(dir: &Path) -> Result<DatasetSplit, CliError> {
    Ok(DatasetSplit {
        train: read_partition(&dir.join(partition_file(Partition::Train)))?,
        validation: read_partition(&dir.join(partition_file(Partition::Validation)))?,
        test: read_partition(&dir.join(partition_file(Partition::Test)))?,
    })
}

fn declared_partition(cfg: &LoadedConfig, p: Partition) -> PathBuf {
    let declared = match p {
        Partition::Train => &cfg.run.data.train,
        Partition::Validation => &cfg.run.data.validation,
        _ => &cfg.run.data.test,
    };
    cfg.input(declared, &partition_file(p))
}

fn generator(cfg: &LoadedConfig) -> Result<GeneratorBackend, BackendError> {
    let b = &cfg.run.backend;
    Ok(match b.kind {
        BackendKind::MockGenerator => {
            GeneratorBackend::Mock(MockGenerator::new(b.rules.clone()).with_style(b.reply_style))
        }
        BackendKind::GenerativeAdapter => GeneratorBackend::Adapter(GenerativeAdapter::new(
            cfg.endpoint().map_err(|e| BackendError::Config(e.to_string()))?,
        )),
        other => return Err(BackendError::Config(format!("backend {other:?} is not generative"))),
    })
}

fn icl_classifier(cfg: &LoadedConfig, spec: PromptSpec) -> Result<IclClassifier, BackendError> {
    let b = &cfg.run.backend;
    let mut c = IclClassifier::new(generator(cfg)?, spec).with_fine_tune(b.fine_tune);
    if let Some(label) = b.fallback {
        c = c.with_fallback(label);
    }
    Ok(c)
}

/// A new, untrained backend of the configured kind.
fn fresh_backend(cfg: &LoadedConfig, schema: &FeatureSchema) -> Result<Box<dyn Classifier>, BackendError> {
    let b = &cfg.run.backend;
    Ok(match b.kind {
        BackendKind::Mock => {
            Box::new(MockBackend::new(b.rules.clone()).with_empty_normal_probability(b.empty_normal_probability))
        }
        BackendKind::Linear => Box::new(LinearBaseline::new(schema.clone())),
        BackendKind::SequenceAdapter => Box::new(
            SequenceAdapter::new(cfg.endpoint().map_err(|e| BackendError::Config(e.to_string()))?)
                .with_fine_tuned(b.fine_tuned),
        ),
        BackendKind::GenerativeAdapter | BackendKind::MockGenerator => {
            let spec = cfg
                .run
                .prompt
                .spec(schema)
                .map_err(|e| BackendError::Config(e.to_string()))?;
            Box::new(icl_classifier(cfg, spec)?)
        }
    })
}

fn load_checked(path: &Path, schema: &FeatureSchema) -> Result<Box<dyn Classifier>, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let artifact = read_artifact(path)?;
    if let Some(hash) = &artifact.schema_hash {
        if *hash != schema.fingerprint() {
            return Err(CliError::Config(format!(
                "model {} was built for a different feature schema",
                path.display()
            )));
        }
    }
    Ok(from_artifact(artifact)?)
}

/// The configured model file, else a fresh backend if it needs no
/// training, else the model saved by `train` in the output directory.
fn ready_backend(cfg: &LoadedConfig, schema: &FeatureSchema) -> Result<Box<dyn Classifier>, CliError> {
    if let Some(model) = &cfg.run.backend.model {
        return load_checked(&cfg.resolve(model), schema);
    }
    let fresh = fresh_backend(cfg, schema)?;
    if fresh.is_ready() {
        return Ok(fresh);
    }
    let saved = cfg.in_output(MODEL_FILE);
    if saved.exists() {
        return load_checked(&saved, schema);
    }
    Err(CliError::Backend(format!(
        "{} needs training first (run `wfad train` or set backend.model)",
        fresh.name()
    )))
}

#[derive(Serialize)]
struct IngestReport {
    rows: usize,
    examples: usize,
    skipped_empty: usize,
    stats: SplitStats,
    schema_fingerprint: String,
}

pub fn ingest(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let schema = cfg.schema()?;
    let table = cfg.require(&cfg.run.data.table, "data.table")?;
    let file = fs::File::open(&table).map_err(|e| CliError::io(&table, e))?;
    let mut options = cfg.run.table.clone();
    options.label_mode = LabelMode::Required;
    let records = load_table(file, &schema, &options)?;
    let mut examples = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in &records {
        let sentence = serialize_full(r, &schema)?;
        if sentence.is_empty() {
            skipped += 1;
            continue;
        }
        let label = r
            .label
            .ok_or_else(|| CliError::Data(format!("job `{}` has no label", r.job_id)))?;
        examples.push(LabeledExample::new(sentence, r.workflow_id.clone(), label));
    }
    dataset::write_partition_file(&out.path(EXAMPLES_FILE), Partition::Unassigned, &examples)?;
    let report = IngestReport {
        rows: records.len(),
        examples: examples.len(),
        skipped_empty: skipped,
        stats: SplitStats::of(&examples),
        schema_fingerprint: schema.fingerprint(),
    };
    out.write_report("ingest_report.json", &cfg.hash, &report)?;
    println!(
        "ingested {} rows into {} examples ({} anomalous, {} skipped as empty) -> {}",
        report.rows,
        report.examples,
        report.stats.anomalous,
        skipped,
        out.path(EXAMPLES_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitReport {
    seed: u64,
    stratified: bool,
    ratios: [f64; 3],
    stats: PartitionStats,
}

pub fn split(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let input = cfg.input(&cfg.run.data.examples, EXAMPLES_FILE);
    let examples = read_partition(&input)?;
    let s = &cfg.run.split;
    let result = dataset::split(&examples, s.ratios()?, s.seed, s.stratified)?;
    for p in [Partition::Train, Partition::Validation, Partition::Test] {
        dataset::write_partition_file(&out.path(&partition_file(p)), p, result.partition(p))?;
    }
    let stats = result.stats();
    out.write_report(
        "split_report.json",
        &cfg.hash,
        &SplitReport {
            seed: s.seed,
            stratified: s.stratified,
            ratios: s.ratios,
            stats,
        },
    )?;
    for (name, st) in [
        ("train", stats.train),
        ("validation", stats.validation),
        ("test", stats.test),
    ] {
        println!(
            "{name:<10} {:>7} examples, anomaly fraction {:.4}",
            st.total(),
            st.anomaly_fraction
        );
    }
    Ok(())
}

pub fn train(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let schema = cfg.schema()?;
    let train = read_partition(&declared_partition(cfg, Partition::Train))?;
    let validation = read_partition(&declared_partition(cfg, Partition::Validation))?;
    let mut backend = match &cfg.run.backend.model {
        // Continue from an existing model, e.g. for a second dataset.
        Some(model) => load_checked(&cfg.resolve(model), &schema)?,
        None => fresh_backend(cfg, &schema)?,
    };
    let report = fit_with_config(backend.as_mut(), &train, &validation, &cfg.run.train)?;
    save_model(backend.as_ref(), &out.path(MODEL_FILE))?;
    out.write_report("train_report.json", &cfg.hash, &report)?;
    print_epochs(&report);
    println!("model -> {}", out.path(MODEL_FILE).display());
    Ok(())
}

fn print_epochs(report: &TrainReport) {
    println!(
        "{}: {} examples, {}/{} trainable parameters",
        report.backend, report.train_examples, report.trainable_parameters, report.total_parameters
    );
    if !report.epochs.is_empty() {
        println!("epoch  accuracy  precision  recall  f1");
    }
    for e in &report.epochs {
        println!(
            "{:>5}  {:>8.4}  {:>9.4}  {:>6.4}  {:.4}",
            e.epoch, e.accuracy, e.precision, e.recall, e.f1
        );
    }
}

fn print_eval(label: &str, r: &EvalReport) {
    println!(
        "{label}: n={} accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
        r.examples, r.accuracy, r.precision, r.recall, r.f1
    );
    if let Some(rank) = &r.ranking {
        println!(
            "ranking: roc_auc {:.4} average_precision {:.4} precision@{} {:.4}",
            rank.roc_auc, rank.average_precision, rank.k, rank.precision_at_k
        );
    }
}

pub fn eval(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let schema = cfg.schema()?;
    let test = read_partition(&declared_partition(cfg, Partition::Test))?;
    if test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let backend = ready_backend(cfg, &schema)?;
    let report = evaluate::evaluate(backend.as_ref(), &test)?;
    out.write_report("eval_report.json", &cfg.hash, &report)?;
    print_eval("test", &report);
    Ok(())
}

#[derive(Serialize)]
struct IclReport {
    spec: PromptSpec,
    examples: Vec<LabeledExample>,
    fit: Option<TrainReport>,
    evaluation: EvalReport,
    responses: Vec<String>,
}

pub fn icl(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(), CliError> {
    if !cfg.run.backend.kind.is_generative() {
        return Err(CliError::Config(format!(
            "icl needs a generative backend (mock-generator or generative-adapter), not {:?}",
            cfg.run.backend.kind
        )));
    }
    let schema = cfg.schema()?;
    let spec = cfg.run.prompt.spec(&schema)?;
    let test = read_partition(&declared_partition(cfg, Partition::Test))?;
    if test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let mut classifier = icl_classifier(cfg, spec.clone())?;
    let fit = if spec.shots > 0 || cfg.run.backend.fine_tune {
        let train = read_partition(&declared_partition(cfg, Partition::Train))?;
        let validation = read_partition(&declared_partition(cfg, Partition::Validation))?;
        Some(classifier.fit(&train, &validation, &cfg.run.train)?)
    } else {
        None
    };
    let texts: Vec<&str> = test.iter().map(|e| e.text()).collect();
    let preds = classifier.predict_batch(&texts)?;
    let evaluation = report_from_predictions(&test, &preds)?;
    out.write_text("prompt_example.txt", &classifier.prompt_for(texts[0])?)?;
    let report = IclReport {
        spec,
        examples: classifier.examples().unwrap_or_default().to_vec(),
        fit,
        responses: preds.into_iter().map(|p| p.raw_output.unwrap_or_default()).collect(),
        evaluation,
    };
    out.write_report("icl_report.json", &cfg.hash, &report)?;
    print_eval("icl", &report.evaluation);
    Ok(())
}

pub fn detect(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let schema = cfg.schema()?;
    let events_path = cfg.require(&cfg.run.data.events, "data.events")?;
    let file = fs::File::open(&events_path).map_err(|e| CliError::io(&events_path, e))?;
    let events = read_events(file)?;
    let backend = ready_backend(cfg, &schema)?;
    let detector = OnlineDetector::new(backend, schema, cfg.run.detect.clone())?;
    let traces = run_events(&detector, &events)?;
    out.write_report("traces.json", &cfg.hash, &traces)?;
    let alerts: usize = traces.iter().map(|t| t.alerts.len()).sum();
    println!("{} jobs, {} events, {alerts} alerts", traces.len(), events.len());
    if traces.iter().all(|t| t.truth.is_some()) {
        let stats = early_detection_stats(&traces)?;
        out.write_report("early_detection.json", &cfg.hash, &stats)?;
        for (pos, count) in &stats.histogram {
            println!("first correct at prefix {pos:>2}: {count}");
        }
        println!("never correct: {}", stats.undetected);
    } else {
        println!("some jobs carry no `label` event; early-detection statistics skipped");
    }
    Ok(())
}

pub fn bias_probe(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let schema = cfg.schema()?;
    let mut backend = ready_backend(cfg, &schema)?;
    let report = evaluate::bias_probe(backend.as_mut(), cfg.run.probe.runs, cfg.run.probe.seed)?;
    out.write_report("bias_probe.json", &cfg.hash, &report)?;
    println!(
        "{} runs ({}): normal {:.4} anomalous {:.4} gap {:.4}",
        report.runs,
        if report.stochastic { "sampled" } else { "argmax" },
        report.normal_frequency,
        report.anomalous_frequency,
        report.gap
    );
    Ok(())
}

pub fn transfer(cfg: &LoadedConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let schema = cfg.schema()?;
    let mut datasets: Vec<(String, DatasetSplit)> = Vec::new();
    for d in &cfg.run.transfer.datasets {
        if datasets.iter().any(|(id, _)| *id == d.id) {
            return Err(CliError::Config(format!("duplicate transfer dataset id `{}`", d.id)));
        }
        datasets.push((d.id.clone(), read_split_dir(&cfg.resolve(&d.path))?));
    }
    let factory = |_: &str| fresh_backend(cfg, &schema);
    let matrix = transfer_matrix(&datasets, &factory, &cfg.run.train)?;
    out.write_report("transfer_matrix.json", &cfg.hash, &matrix)?;
    println!("trained on \\ evaluated on: {}", matrix.datasets.join("  "));
    for (id, row) in matrix.datasets.iter().zip(&matrix.cells) {
        let cells: Vec<String> = row
            .iter()
            .map(|c| c.accuracy().map_or_else(|| "error".to_string(), |a| format!("{a:.4}")))
            .collect();
        println!("{id}: {}", cells.join("  "));
    }
    if let Some(inc) = &cfg.run.transfer.incremental {
        let by_id: BTreeMap<&str, &DatasetSplit> = datasets.iter().map(|(id, s)| (id.as_str(), s)).collect();
        let find = |id: &str| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| CliError::Config(format!("incremental dataset `{id}` is not listed")))
        };
        let (src, dst) = (find(&inc.source)?, find(&inc.target)?);
        let config_d2 = inc.train.clone().unwrap_or_else(|| cfg.run.train.clone());
        let curve = incremental_transfer(
            &factory,
            (&inc.source, src),
            (&inc.target, dst),
            &inc.portions,
            &cfg.run.train,
            &config_d2,
        )?;
        out.write_report("incremental_curve.json", &cfg.hash, &curve)?;
        for p in &curve.points {
            println!(
                "portion {:.3} ({} examples): accuracy {:.4}",
                p.portion, p.d2_examples, p.accuracy
            );
        }
    }
    Ok(())
}
