//! The `capsnet` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical divergence or a failed gradient check.

pub mod run;
pub mod spec;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::autodiff::OpKind;
use crate::capsnet::{CapsNetConfig, CheckpointError, FeatureFileError, ModelError};
use crate::dataset::{DatasetError, DatasetManifest, SplitAssignment, SplitPart};
use crate::gradcheck::gradcheck_with;
use crate::imaging::ImageError;
use crate::metrics::MetricsError;
use crate::synth::SynthError;
use crate::train::{Monitor, TrainError};

pub use run::{evaluate_checkpoint, run_experiment, run_grid, GridRow, RunOutcome};
pub use spec::{ExperimentSpec, GridAxes, GridSpec};

#[derive(Debug, Clone, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) | CliError::Numerical(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Usage(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite(_) => CliError::Divergence(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(FeatureFileError, CheckpointError, ImageError, MetricsError, SynthError);

#[derive(Debug, Parser)]
#[command(name = "capsnet", version, about = "Capsule-network glaucoma classification from fundus images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stratified train/val/test split of a manifest.
    Split(SplitArgs),
    /// Train one experiment into <out-dir>/<run-id>/.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest or one part of a split.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on datasets it was not trained on.
    Xeval(XevalArgs),
    /// Compare analytic gradients with finite differences on a tiny network.
    Gradcheck(GradcheckArgs),
    /// Run the cartesian product of ratios, variants and augmentation.
    Grid(GridArgs),
    /// Print the layer shapes and capsule counts of a configuration.
    Info(InfoArgs),
    /// Write a synthetic bright-disc dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Network overrides shared by `train` and `info`.
#[derive(Debug, Args, Default)]
struct ModelArgs {
    /// caps-256x9, caps-128x9, caps-64x9, caps-64x7, caps-128x9-64x9,
    /// caps-ms-32x3-64x5-128x7, any caps-<F>x<K>[-<F>x<K>...], or external.
    #[arg(long)]
    variant: Option<String>,
    /// Feature file (FMAP) for the external variant.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    hist_eq: Option<bool>,
    #[arg(long)]
    primary_channels: Option<usize>,
    #[arg(long)]
    primary_dim: Option<usize>,
    #[arg(long)]
    primary_kernel: Option<usize>,
    #[arg(long)]
    primary_stride: Option<usize>,
    #[arg(long)]
    class_dim: Option<usize>,
    #[arg(long)]
    routing_iters: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(v) = &self.variant {
            spec.variant = v.clone();
        }
        if let Some(f) = &self.features {
            spec.features = Some(f.clone());
            if self.variant.is_none() {
                spec.variant = "external".into();
            }
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    spec.$field = v;
                }
            )*};
        }
        set!(input_size, hist_eq, primary_channels, primary_dim, primary_kernel, primary_stride, class_dim, routing_iters);
    }
}

fn parse_monitor(s: &str) -> Result<Monitor, String> {
    match s {
        "val_loss" => Ok(Monitor::ValLoss),
        "val_acc" => Ok(Monitor::ValAcc),
        _ => Err(format!("expected val_loss or val_acc, got `{s}`")),
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML experiment spec; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    /// Enable early stopping on val_loss or val_acc.
    #[arg(long, value_parser = parse_monitor)]
    early_stop: Option<Monitor>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl TrainArgs {
    fn resolve(&self) -> Result<ExperimentSpec, CliError> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(m) = &self.manifest {
            spec.manifest = Some(m.clone());
        }
        if let Some(s) = &self.split {
            spec.split = Some(s.clone());
        }
        if let Some(d) = &self.out_dir {
            spec.out_dir = d.clone();
        }
        if self.early_stop.is_some() {
            spec.early_stop = self.early_stop;
        }
        self.model.apply(&mut spec);
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    spec.$field = v;
                }
            )*};
        }
        set!(train_frac, val_frac, epochs, lr, batch_size, augment, patience, seed, threshold);
        Ok(spec)
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Restrict to one part of this split.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "test", requires = "split")]
    part: SplitPart,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    roc_svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct XevalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Foreign manifests; each gets its own report.
    #[arg(long, required = true, num_args = 1..)]
    manifest: Vec<PathBuf>,
    /// Feature files, one per manifest, for external-mode checkpoints.
    #[arg(long, num_args = 1..)]
    features: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Reports are written here as <train>-on-<test>.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    roc_svg: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "caps-256x9")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: scale the input gradients of one op's backward rule.
    #[arg(long, hide = true)]
    corrupt: Option<OpKind>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct InfoArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synth")]
    name: String,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write <name>.fmap with [3, S, S] downsampled images.
    #[arg(long)]
    feature_size: Option<usize>,
}

fn cmd_split(a: &SplitArgs) -> Result<(), CliError> {
    spec::check_fractions(a.train_frac, a.val_frac)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let split = manifest.stratified_split(a.train_frac, a.val_frac, a.seed)?;
    split.save(&a.out)?;
    println!(
        "{}: train {} / val {} / test {} -> {}",
        manifest.name,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let spec = a.resolve()?;
    let out = run_experiment(&spec, !a.quiet)?;
    let r = &out.report;
    println!("run {}", out.run_dir.display());
    println!(
        "best epoch {} (val_loss {:.6}); max val_acc at epoch {}",
        out.trace.best_epoch,
        out.trace.best().val_loss,
        out.trace.best_val_acc_epoch
    );
    println!(
        "test acc {:.4}  auc {}  sen {:.4}  spe {:.4}",
        r.acc,
        r.auc.map_or("n/a".into(), |a| format!("{a:.4}")),
        r.sen,
        r.spe
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (ids, seed) = match &a.split {
        Some(path) => {
            let split = SplitAssignment::load(path)?;
            split.validate_against(&manifest)?;
            (split.part(a.part).to_vec(), Some(split.seed))
        }
        None => (manifest.ids(), None),
    };
    let report = evaluate_checkpoint(&a.checkpoint, &manifest, &ids, a.features.as_deref(), a.threshold, seed)?;
    run::emit_report(&report, a.out.as_deref(), a.roc_svg.as_deref())
}

fn cmd_xeval(a: &XevalArgs) -> Result<(), CliError> {
    if !a.features.is_empty() && a.features.len() != a.manifest.len() {
        return Err(CliError::Usage("give one --features file per --manifest".into()));
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.out_dir.display())))?;
    for (i, path) in a.manifest.iter().enumerate() {
        let manifest = DatasetManifest::load(path)?;
        let features = a.features.get(i).map(PathBuf::as_path);
        let report = evaluate_checkpoint(&a.checkpoint, &manifest, &manifest.ids(), features, a.threshold, None)?;
        if report.provenance.train_dataset == manifest.name {
            return Err(CliError::Config(format!(
                "checkpoint was trained on `{}`; cross-dataset evaluation needs a different dataset",
                manifest.name
            )));
        }
        let stem = format!("{}-on-{}", report.provenance.train_dataset, manifest.name);
        let out = a.out_dir.join(format!("{stem}.json"));
        let svg = a.roc_svg.then(|| a.out_dir.join(format!("{stem}.svg")));
        run::emit_report(&report, Some(&out), svg.as_deref())?;
        println!("{} acc {:.4} -> {}", manifest.name, report.acc, out.display());
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let shape = (a.variant == "external").then_some([4, 7, 7]);
    let base = crate::capsnet::ConvBaseSpec::from_variant(&a.variant, shape)?;
    let config = CapsNetConfig::new(base, Default::default());
    let report = gradcheck_with(&config, a.seed, a.corrupt)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: worst relative error {:.3e}",
            report.max_error()
        )))
    }
}

fn cmd_grid(a: &GridArgs) -> Result<(), CliError> {
    let grid = GridSpec::load(&a.spec)?;
    let rows = run_grid(&grid, a.jobs, !a.quiet)?;
    println!(
        "{} cells ({} resumed) -> {}",
        rows.len(),
        rows.iter().filter(|r| r.resumed).count(),
        grid.base.out_dir.join(run::SUMMARY_FILE).display()
    );
    Ok(())
}

fn cmd_info(a: &InfoArgs) -> Result<(), CliError> {
    let mut spec = ExperimentSpec::default();
    a.model.apply(&mut spec);
    let shape = match &spec.features {
        Some(path) => {
            let map = crate::capsnet::load_feature_file(path, None)?;
            Some(
                crate::capsnet::features::feature_shape(&map)
                    .ok_or_else(|| CliError::Data(format!("{}: no rank-3 records", path.display())))?,
            )
        }
        None => None,
    };
    let config = spec.model_config(shape)?;
    println!("conv base        {}", config.conv_base);
    println!("{}", config.dimensions()?);
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.count == 0 || a.size < 8 {
        return Err(CliError::Usage("--count must be positive and --size at least 8".into()));
    }
    let path = run::synth(&a.out, &a.name, a.count, a.size, a.seed, a.feature_size)?;
    println!("{}", path.display());
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("CAPS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("CAPS_THREADS must be a positive integer, got `{value}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("CAPS_THREADS: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Xeval(a) => cmd_xeval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Info(a) => cmd_info(a),
        Command::Synth(a) => cmd_synth(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("capsnet: {e}");
            e.exit_code()
        }
    }
}

/// Checkpoint path inside a run directory.
pub fn checkpoint_in(run_dir: &Path) -> PathBuf {
    run_dir.join(run::CHECKPOINT_FILE)
}
