//! Command bodies, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::spec::{ExperimentSpec, GridSpec};
use super::CliError;
use crate::capsnet::features::{encode_features, feature_shape};
use crate::capsnet::{load_checkpoint_full, load_feature_file, save_checkpoint_with, CapsNet, FeatureMap};
use crate::dataset::{DatasetManifest, SplitAssignment};
use crate::imaging::{rescale, resize, RawImage};
use crate::metrics::{roc_svg, MetricsReport, Provenance};
use crate::synth::write_synthetic_dataset;
use crate::train::{evaluate, load_feature_samples, load_image_samples, train_observed, Sample, TrainTrace};

pub const SPEC_FILE: &str = "spec.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "best.caps";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn load_features(path: &Path) -> Result<(FeatureMap, [usize; 3]), CliError> {
    let map = load_feature_file(path, None)?;
    let shape = feature_shape(&map)
        .ok_or_else(|| CliError::Data(format!("{}: no rank-3 feature records", path.display())))?;
    Ok((map, shape))
}

/// Samples for `ids`, from images or from a feature map.
fn samples(manifest: &DatasetManifest, ids: &[String], model: &CapsNet, features: Option<&FeatureMap>) -> Result<Vec<Sample>, CliError> {
    Ok(match features {
        Some(map) => load_feature_samples(manifest, ids, map)?,
        None => load_image_samples(manifest, ids, &model.config().preproc)?,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub trace: TrainTrace,
    pub report: MetricsReport,
}

/// Trains one experiment into `<out_dir>/<run-id>/` and evaluates the best
/// checkpoint on the test part.
pub fn run_experiment(spec: &ExperimentSpec, progress: bool) -> Result<RunOutcome, CliError> {
    spec.validate()?;
    let manifest = DatasetManifest::load(spec.manifest.as_deref().expect("validated"))?;
    let split = match &spec.split {
        Some(path) => {
            let s = SplitAssignment::load(path)?;
            s.validate_against(&manifest)?;
            s
        }
        None => manifest.stratified_split(spec.train_frac, spec.val_frac, spec.seed)?,
    };
    let features = spec.features.as_deref().map(load_features).transpose()?;
    let config = spec.model_config(features.as_ref().map(|f| f.1))?;
    let model = CapsNet::new(config)?;
    let fmap = features.as_ref().map(|f| &f.0);
    let train_set = samples(&manifest, &split.train, &model, fmap)?;
    let val_set = samples(&manifest, &split.val, &model, fmap)?;
    let test_set = samples(&manifest, &split.test, &model, fmap)?;

    let run_dir = spec.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    write(&run_dir.join(SPEC_FILE), spec.to_toml())?;
    write(&run_dir.join(SPLIT_FILE), split.to_json())?;
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    let epochs = spec.epochs;
    let outcome = train_observed(model, &train_set, &val_set, &spec.train_config(), Some(&checkpoint), |r| {
        if progress {
            eprintln!(
                "epoch {:>4}/{epochs}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            );
        }
    })?;
    // Rewrite the best weights with the training dataset recorded.
    save_checkpoint_with(&outcome.best_model, Some(&manifest.name), &checkpoint)?;
    outcome.trace.save_jsonl(&run_dir.join(TRACE_FILE))?;

    let eval = evaluate(&outcome.best_model, &test_set)?;
    let report = MetricsReport::from_scores(
        &eval.scores,
        spec.threshold,
        Provenance {
            model: spec.run_id(),
            train_dataset: manifest.name.clone(),
            test_dataset: manifest.name.clone(),
            seed: spec.seed,
        },
    )?;
    report.save(&run_dir.join(REPORT_FILE)).map_err(|e| io_err(&run_dir, e))?;
    Ok(RunOutcome {
        run_dir,
        trace: outcome.trace,
        report,
    })
}

/// Scores a checkpoint on `ids` of `manifest`.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    ids: &[String],
    features: Option<&Path>,
    threshold: f64,
    seed: Option<u64>,
) -> Result<MetricsReport, CliError> {
    let ckpt = load_checkpoint_full(checkpoint, None)?;
    let model = ckpt.model;
    let external = model.config().conv_base.is_external();
    let features = match (external, features) {
        (true, None) => return Err(CliError::Usage("this checkpoint reads feature maps; pass --features".into())),
        (false, Some(_)) => return Err(CliError::Usage("--features only applies to external-mode checkpoints".into())),
        (true, Some(p)) => {
            let (map, shape) = load_features(p)?;
            if shape != model.config().input_shape() {
                return Err(CliError::Data(format!(
                    "feature shape {shape:?} does not match the checkpoint's {:?}",
                    model.config().input_shape()
                )));
            }
            Some(map)
        }
        (false, None) => None,
    };
    if ids.is_empty() {
        return Err(CliError::Data("nothing to evaluate".into()));
    }
    let set = samples(manifest, ids, &model, features.as_ref())?;
    let eval = evaluate(&model, &set)?;
    Ok(MetricsReport::from_scores(
        &eval.scores,
        threshold,
        Provenance {
            model: checkpoint.display().to_string(),
            train_dataset: ckpt.trained_on.unwrap_or_else(|| "unknown".into()),
            test_dataset: manifest.name.clone(),
            seed: seed.unwrap_or(model.config().seed),
        },
    )?)
}

pub(crate) fn emit_report(report: &MetricsReport, out: Option<&Path>, svg: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => report.save(path).map_err(|e| io_err(path, e))?,
        None => println!("{}", report.to_json()),
    }
    if let Some(path) = svg {
        write(path, roc_svg(&report.roc, report.auc))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub variant: String,
    pub ratio: f64,
    pub augment: bool,
    pub report: MetricsReport,
    pub best_epoch: usize,
    pub resumed: bool,
}

fn finished_cell(run_dir: &Path) -> Option<(MetricsReport, usize)> {
    let report = MetricsReport::load(&run_dir.join(REPORT_FILE)).ok()?;
    let trace = fs::read_to_string(run_dir.join(TRACE_FILE)).ok()?;
    let trace = TrainTrace::from_jsonl(&trace).ok()?;
    Some((report, trace.best_epoch))
}

/// Runs every grid cell not already finished, with up to `jobs` cells at
/// once, and writes `summary.csv` in cell order.
pub fn run_grid(grid: &GridSpec, jobs: usize, progress: bool) -> Result<Vec<GridRow>, CliError> {
    let cells = grid.cells()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<GridRow, CliError>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        let row = match finished_cell(&cell.run_dir()) {
            Some((report, best_epoch)) => Ok((report, best_epoch, true)),
            None => run_experiment(cell, false).map(|o| (o.report, o.trace.best_epoch, false)),
        }
        .map(|(report, best_epoch, resumed)| GridRow {
            variant: cell.variant.clone(),
            ratio: cell.train_frac,
            augment: cell.augment,
            report,
            best_epoch,
            resumed,
        });
        if progress {
            match &row {
                Ok(r) if r.resumed => eprintln!("cell {}/{}: already done", i + 1, cells.len()),
                Ok(r) => eprintln!("cell {}/{}: acc {:.4}", i + 1, cells.len(), r.report.acc),
                Err(e) => eprintln!("cell {}/{}: {e}", i + 1, cells.len()),
            }
        }
        results.lock().expect("no panics while held")[i] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len()) {
            s.spawn(worker);
        }
    });

    let mut rows = Vec::new();
    let mut first_error = None;
    for r in results.into_inner().expect("workers joined").into_iter().flatten() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    write_summary(&grid.base.out_dir.join(SUMMARY_FILE), &rows)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

fn write_summary(path: &Path, rows: &[GridRow]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(["variant", "ratio", "aug", "acc", "auc", "sen", "spe", "best_epoch"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.ratio.to_string(),
            r.augment.to_string(),
            r.report.acc.to_string(),
            r.report.auc.map(|a| a.to_string()).unwrap_or_default(),
            r.report.sen.to_string(),
            r.report.spe.to_string(),
            r.best_epoch.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Synthetic dataset, optionally with `[3, S, S]` feature maps made by
/// downsampling each image.
pub fn synth(dir: &Path, name: &str, count: usize, size: usize, seed: u64, feature_size: Option<usize>) -> Result<PathBuf, CliError> {
    let manifest_path = write_synthetic_dataset(dir, name, count, size, seed)?;
    if let Some(s) = feature_size {
        let manifest = DatasetManifest::load(&manifest_path)?;
        let tensors = manifest
            .entries
            .iter()
            .map(|e| Ok((e.id.clone(), rescale(&resize(&RawImage::open(&e.path)?, s)))))
            .collect::<Result<Vec<_>, CliError>>()?;
        let bytes = encode_features(tensors.iter().map(|(id, t)| (id.as_str(), t)))?;
        write(&dir.join(format!("{name}.fmap")), bytes)?;
    }
    Ok(manifest_path)
}
