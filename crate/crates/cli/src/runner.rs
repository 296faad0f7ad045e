//! Experiment pipeline and the artifacts each command writes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedfta_core::aggregate::Aggregator;
use fedfta_core::data::{generate_blobs, stratified_split, Dataset, PartitionScheme};
use fedfta_core::federation::{
    clients_from_plan, run_round, FederationState, RoundConfig, RoundRecord, TrainingHistory,
};
use fedfta_core::metrics::{ConfusionMatrix, MetricReport};
use fedfta_core::model::{ClassifierHead, FrozenBase, HeadShape, LocalTraining};
use fedfta_core::{Error, SeededRng, Stream};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::CliError;

/// Loads or generates the dataset. Synthetic data always comes from the
/// master seed, so every run of a comparison sees the same samples.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    match &cfg.data {
        DataSource::Synthetic { .. } => {
            let spec = cfg.blob_spec().expect("synthetic source");
            let mut rng = SeededRng::stream(cfg.master_seed, Stream::Data, &[]);
            Ok(generate_blobs(&spec, &mut rng)?)
        }
        DataSource::Csv { path } => {
            let ds = Dataset::load_csv(path)?;
            match cfg.class_count {
                Some(c) if c < ds.classes() => Err(CliError::Config {
                    key: "class-count".into(),
                    message: format!("{} has labels up to {}, but class-count is {c}", path.display(), ds.classes() - 1),
                }),
                Some(c) => Ok(Dataset::new(ds.features().clone(), ds.labels().to_vec(), c)?),
                None => Ok(ds),
            }
        }
    }
}

/// One federated training run plus per-round wall-clock times.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: TrainingHistory,
    pub round_ms: Vec<f64>,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.history.final_report.as_ref().and_then(|r| r.accuracy)
    }

    pub fn final_macro_f1(&self) -> Option<f64> {
        self.history.final_report.as_ref().and_then(|r| r.class_mean_f1)
    }
}

/// Splits, partitions, initializes and trains. Everything except the
/// dataset is drawn from `seed`, and nothing depends on `aggregator`, so
/// two aggregators run with one seed see identical shards and initial
/// weights.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    aggregator: Aggregator,
    scheme: &PartitionScheme,
    seed: u64,
) -> Result<RunOutcome, CliError> {
    let split = stratified_split(
        data,
        cfg.test_ratio,
        cfg.val_ratio,
        &mut SeededRng::stream(seed, Stream::Split, &[]),
    )?;
    let train = data.select(&split.train);
    let validation = data.select(&split.validation);
    let test = data.select(&split.test);

    let plan = scheme.apply(
        train.labels(),
        train.classes(),
        cfg.clients,
        &mut SeededRng::stream(seed, Stream::Partition, &[]),
    )?;
    let mut clients = clients_from_plan(&train, &plan)?;

    let base = FrozenBase::random(
        data.input_dim(),
        cfg.feature_dim,
        &mut SeededRng::stream(seed, Stream::BaseInit, &[]),
    )?;
    let shape = HeadShape::new(cfg.feature_dim, &cfg.hidden, data.classes())?;
    let head = ClassifierHead::init(shape, &mut SeededRng::stream(seed, Stream::HeadInit, &[]));

    let mut state = FederationState::new(seed, base, head)?.with_test(&test)?;
    if !validation.is_empty() {
        state = state.with_validation(&validation)?;
    }
    state.register(0..clients.len());

    let round_cfg = RoundConfig {
        participants: cfg.participants,
        local: LocalTraining {
            epochs: cfg.epochs,
            learning_rate: cfg.eta,
            batch_size: cfg.batch_size,
            optimizer: cfg.optimizer,
        },
        aggregator,
        gss: cfg.gss,
        parallel: cfg.parallel,
    };

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut round_ms = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let round = state.round() + 1;
        let started = Instant::now();
        let record = run_round(&mut state, &mut clients, &round_cfg).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })?;
        round_ms.push(started.elapsed().as_secs_f64() * 1e3);
        records.push(record);
    }
    let (final_confusion, final_report) = match state.evaluate_test()? {
        Some((cm, report)) => (Some(cm), Some(report)),
        None => (None, None),
    };
    Ok(RunOutcome {
        history: TrainingHistory {
            records,
            final_head: state.global_head().clone(),
            final_confusion,
            final_report,
        },
        round_ms,
        train_size: train.len(),
        validation_size: validation.len(),
        test_size: test.len(),
    })
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    #[serde(flatten)]
    record: &'a RoundRecord,
    elapsed_ms: f64,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(CliError::io(path))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn write_history(path: &Path, outcome: &RunOutcome) -> Result<(), CliError> {
    let mut out = String::new();
    for (record, &elapsed_ms) in outcome.history.records.iter().zip(&outcome.round_ms) {
        let line = serde_json::to_string(&HistoryLine { record, elapsed_ms }).expect("record serializes");
        out.push_str(&line);
        out.push('\n');
    }
    write_file(path, &out)
}

/// Macro row followed by one row per class; undefined values are `NA`.
pub fn write_final_metrics(path: &Path, report: &MetricReport) -> Result<(), CliError> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(["scope", "accuracy", "precision", "recall", "specificity", "f1", "class_mean_f1"])
        .map_err(&err)?;
    w.write_record([
        "macro".to_string(),
        fmt_opt(report.accuracy),
        fmt_opt(report.precision),
        fmt_opt(report.recall),
        fmt_opt(report.specificity),
        fmt_opt(report.f1),
        fmt_opt(report.class_mean_f1),
    ])
    .map_err(&err)?;
    for c in &report.per_class {
        w.write_record([
            format!("class-{}", c.class),
            "NA".to_string(),
            fmt_opt(c.precision),
            fmt_opt(c.recall),
            fmt_opt(c.specificity),
            fmt_opt(c.f1),
            "NA".to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Rows are actual classes, columns predicted classes.
pub fn write_confusion(path: &Path, cm: &ConfusionMatrix) -> Result<(), CliError> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    let mut header = vec!["actual".to_string()];
    header.extend((0..cm.classes()).map(|j| format!("predicted_{j}")));
    w.write_record(&header).map_err(&err)?;
    for (i, row) in cm.counts().iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Re-reads a history file and checks it holds `rounds` JSON lines.
pub fn verify_history(path: &Path, rounds: usize) -> Result<(), CliError> {
    let file = fs::File::open(path).map_err(CliError::io(path))?;
    let mut n = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(CliError::io(path))?;
        serde_json::from_str::<serde_json::Value>(&line).map_err(|e| CliError::Output {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        n += 1;
    }
    if n != rounds {
        return Err(CliError::Output {
            path: path.to_path_buf(),
            message: format!("expected {rounds} rounds, found {n}"),
        });
    }
    Ok(())
}

/// Paths written by [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub history: PathBuf,
    pub final_metrics: PathBuf,
    pub confusion: PathBuf,
    pub config_echo: PathBuf,
}

/// Trains with `cfg.aggregator` and `cfg.partition` and writes
/// `history.jsonl`, `final_metrics.csv`, `confusion.csv` and
/// `config_echo.json` into `out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<(RunOutcome, RunArtifacts), CliError> {
    create_dir(out)?;
    let artifacts = RunArtifacts {
        history: out.join("history.jsonl"),
        final_metrics: out.join("final_metrics.csv"),
        confusion: out.join("confusion.csv"),
        config_echo: out.join("config_echo.json"),
    };
    let mut echo = cfg.clone();
    echo.output_dir = out.to_path_buf();
    write_file(&artifacts.config_echo, &echo.to_json())?;

    let data = load_dataset(cfg)?;
    let outcome = run_experiment(cfg, &data, cfg.aggregator, &cfg.partition, cfg.master_seed)?;

    write_history(&artifacts.history, &outcome)?;
    let (Some(cm), Some(report)) = (&outcome.history.final_confusion, &outcome.history.final_report) else {
        return Err(CliError::Output {
            path: out.to_path_buf(),
            message: "no test evaluation available".into(),
        });
    };
    write_final_metrics(&artifacts.final_metrics, report)?;
    write_confusion(&artifacts.confusion, cm)?;
    verify_history(&artifacts.history, cfg.rounds)?;
    Ok((outcome, artifacts))
}

/// One (aggregator, distribution, seed) cell of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub aggregator: String,
    pub distribution: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_macro_f1: f64,
    pub rounds_to_target: usize,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub aggregator: String,
    pub distribution: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub mean_rounds_to_target: f64,
    pub std_rounds_to_target: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(cells: &[CellResult]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in cells {
        let key = (c.aggregator.clone(), c.distribution.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(aggregator, distribution)| {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.aggregator == aggregator && c.distribution == distribution)
                .collect();
            let acc: Vec<f64> = group.iter().map(|c| c.final_accuracy).collect();
            let f1: Vec<f64> = group.iter().map(|c| c.final_macro_f1).collect();
            let rtt: Vec<f64> = group.iter().map(|c| c.rounds_to_target as f64).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            let (mean_macro_f1, std_macro_f1) = mean_std(&f1);
            let (mean_rounds_to_target, std_rounds_to_target) = mean_std(&rtt);
            CellSummary {
                aggregator,
                distribution,
                runs: group.len(),
                mean_accuracy,
                std_accuracy,
                mean_macro_f1,
                std_macro_f1,
                mean_rounds_to_target,
                std_rounds_to_target,
            }
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    for row in rows {
        w.serialize(row).map_err(&err)?;
    }
    w.flush().map_err(CliError::io(path))
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub cells: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
}

impl Comparison {
    pub fn summary_for(&self, aggregator: Aggregator, scheme: &PartitionScheme) -> Option<&CellSummary> {
        let label = scheme.label();
        self.summary
            .iter()
            .find(|s| s.aggregator == aggregator.name() && s.distribution == label)
    }
}

/// Runs every aggregator on every distribution with seeds
/// `master-seed + r`, `r < seeds`. Cells run concurrently and each writes
/// its history into its own subdirectory of `out/cells`. Writes
/// `comparison.csv` and `summary.csv`.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    aggregators: &[Aggregator],
    out: &Path,
) -> Result<Comparison, CliError> {
    if aggregators.len() < 2 {
        return Err(CliError::Config {
            key: "aggregators".into(),
            message: "compare needs at least two aggregators".into(),
        });
    }
    if cfg.distributions.is_empty() {
        return Err(CliError::Config {
            key: "distributions".into(),
            message: "compare needs at least one distribution".into(),
        });
    }
    create_dir(out)?;
    let mut echo = cfg.clone();
    echo.output_dir = out.to_path_buf();
    echo.aggregators = aggregators.to_vec();
    write_file(&out.join("config_echo.json"), &echo.to_json())?;

    let data = load_dataset(cfg)?;
    let mut jobs = Vec::new();
    for &agg in aggregators {
        for scheme in &cfg.distributions {
            for r in 0..cfg.seeds as u64 {
                jobs.push((agg, *scheme, cfg.master_seed.wrapping_add(r)));
            }
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(agg, scheme, seed)| {
            let outcome = run_experiment(cfg, &data, agg, &scheme, seed)?;
            let dir = out
                .join("cells")
                .join(format!("{}-{}-seed{seed}", agg.name(), scheme.label()));
            create_dir(&dir)?;
            write_history(&dir.join("history.jsonl"), &outcome)?;
            Ok(CellResult {
                aggregator: agg.name().to_string(),
                distribution: scheme.label(),
                seed,
                final_accuracy: outcome.final_accuracy().unwrap_or(f64::NAN),
                final_macro_f1: outcome.final_macro_f1().unwrap_or(f64::NAN),
                rounds_to_target: outcome.history.rounds_to_target(cfg.target_accuracy),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let summary = summarize(&cells);
    write_rows(&out.join("comparison.csv"), &cells)?;
    write_rows(&out.join("summary.csv"), &summary)?;
    Ok(Comparison { cells, summary })
}

#[derive(Serialize)]
struct GenerationRecord<'a> {
    master_seed: u64,
    samples: usize,
    class_counts: Vec<usize>,
    spec: &'a fedfta_core::data::BlobSpec,
}

/// Writes the synthetic dataset CSV plus a `.json` sidecar with the
/// generation parameters. Returns the CSV path.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let Some(spec) = cfg.blob_spec() else {
        return Err(CliError::Config {
            key: "data.source".into(),
            message: "gen-data needs a synthetic data source".into(),
        });
    };
    let data = load_dataset(cfg)?;
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    data.save_csv(&path)?;
    let sidecar = path.with_extension("json");
    let record = GenerationRecord {
        master_seed: cfg.master_seed,
        samples: data.len(),
        class_counts: data.class_counts(),
        spec: &spec,
    };
    let mut f = fs::File::create(&sidecar).map_err(CliError::io(&sidecar))?;
    serde_json::to_writer_pretty(&mut f, &record).map_err(|e| CliError::Output {
        path: sidecar.clone(),
        message: e.to_string(),
    })?;
    f.write_all(b"\n").map_err(CliError::io(&sidecar))?;
    Ok(path)
}
