//! Command-line surface for effective-dimension estimation: `params`,
//! `effdim`, `train`, and `verify` subcommands emitting CSV plus a JSON
//! metadata sidecar sufficient to reproduce each run byte for byte.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use twosed::data::{self, Dataset};
use twosed::effdim;
use twosed::fisher::{self, EstimatorOptions, FisherEnsemble};
use twosed::netmodel::{
    param_count, parse_model_string, ModelConfig, ModelSpec, PropagationMode, SamplingScheme,
    Shape,
};
use twosed::rng::{self, tag};
use twosed::trainer::{self, TrainConfig, TrainError};
use twosed::verify;

#[derive(Parser)]
#[command(name = "twosed", version, about = "Two-scale effective dimension estimation")]
struct Cli {
    /// Bound the worker-thread count; results are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the total parameter count of a model.
    Params {
        /// Model string, e.g. "MLP 54-16-7" or "CNN 7-5|10-50-34-10".
        #[arg(long)]
        model: String,
    },
    /// Estimate the 2sED / lower-2sED curve over an epsilon grid.
    Effdim(EffdimArgs),
    /// Train the deterministic model and emit its loss curve.
    Train(TrainArgs),
    /// Run a verification suite; exit 0 only if every check passes.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model string.
    #[arg(long)]
    model: Option<String>,
    /// TOML model config (model_string, input_shape, conv_channels, sigma2, bias, frozen).
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Shared per-block output variance; overrides the config value.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Freeze the block maps at zero weights (constant family, zero Fisher).
    #[arg(long)]
    frozen_weights: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Idx,
    Cifar,
    Blobs,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset path (CSV table, IDX images, or CIFAR binary).
    #[arg(long)]
    data: Option<PathBuf>,
    /// IDX label file (with --format idx).
    #[arg(long)]
    labels_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "blobs")]
    format: Format,
    /// CSV label column; defaults to the last column.
    #[arg(long)]
    label_column: Option<usize>,
    /// Class count; defaults to the model output width.
    #[arg(long)]
    classes: Option<usize>,
    /// Skip the first CSV line.
    #[arg(long)]
    has_header: bool,
    /// Number of synthetic blob rows (with --format blobs).
    #[arg(long, default_value_t = 1000)]
    blobs_n: usize,
}

#[derive(Args)]
struct EffdimArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Data samples used to estimate each Fisher matrix.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Parameter vectors sampled for the Monte Carlo expectation over θ.
    #[arg(long, default_value_t = 100)]
    thetas: usize,
    #[arg(long, default_value_t = 0.0)]
    zeta: f64,
    #[arg(long, default_value_t = 1e-6)]
    eps_min: f64,
    #[arg(long, default_value_t = 1e-1)]
    eps_max: f64,
    #[arg(long, default_value_t = 20)]
    eps_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameter sampling scheme.
    #[arg(long, value_enum, default_value = "fan-in")]
    scheme: Scheme,
    /// Propagate deterministic means instead of noisy samples between blocks.
    #[arg(long)]
    mean_propagation: bool,
    /// Noise resamples per data input.
    #[arg(long, default_value_t = 1)]
    trajectories_per_input: usize,
    /// Cache the Fisher ensemble here: loaded when present, written otherwise.
    #[arg(long)]
    fim_cache: Option<PathBuf>,
    #[arg(long, default_value = "effdim.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scheme {
    FanIn,
    UnitCube,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Training subsample size; 0 keeps the whole dataset.
    #[arg(long, default_value_t = 0)]
    n_train: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Bounds,
    Covering,
    Genbound,
    Sigma,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeded repetitions per sample size in the genbound suite.
    #[arg(long, default_value_t = 20)]
    genbound_seeds: usize,
    #[arg(long, default_value = "verify_report.csv")]
    out: PathBuf,
}

/// Process failure with its exit code: 1 verification, 2 usage, 3 data.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
    fn run(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<twosed::netmodel::ModelError> for CliError {
    fn from(e: twosed::netmodel::ModelError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<twosed::data::DataError> for CliError {
    fn from(e: twosed::data::DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<twosed::fisher::FisherError> for CliError {
    fn from(e: twosed::fisher::FisherError) -> Self {
        match e {
            twosed::fisher::FisherError::Model(m) => m.into(),
            twosed::fisher::FisherError::Io(io) => CliError::data(io.to_string()),
            twosed::fisher::FisherError::Format(f) => CliError::data(f),
            other => CliError::run(other.to_string()),
        }
    }
}

impl From<twosed::effdim::EffDimError> for CliError {
    fn from(e: twosed::effdim::EffDimError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<twosed::verify::VerifyError> for CliError {
    fn from(e: twosed::verify::VerifyError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::run(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Incompatible(_) => CliError::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

fn build_model(args: &ModelArgs) -> Result<ModelSpec, CliError> {
    let mut spec = match (&args.model, &args.model_config) {
        (Some(s), None) => parse_model_string(s)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            ModelConfig::from_toml(&text)?.build()?
        }
        (Some(_), Some(_)) => {
            return Err(CliError::usage("pass either --model or --model-config, not both"))
        }
        (None, None) => return Err(CliError::usage("a model is required (--model or --model-config)")),
    };
    if let Some(s2) = args.sigma2 {
        spec.set_sigma2(s2)?;
    }
    if args.frozen_weights {
        spec.set_frozen(true);
    }
    Ok(spec)
}

fn csv_label_column(path: &Path, has_header: bool) -> Result<usize, CliError> {
    let text = std::fs::read_to_string(path)?;
    let line = text
        .lines()
        .skip(usize::from(has_header))
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| CliError::data("empty CSV file"))?;
    Ok(line.split(',').count() - 1)
}

fn load_dataset(args: &DataArgs, spec: &ModelSpec, seed: u64) -> Result<Dataset, CliError> {
    let classes = args
        .classes
        .or_else(|| spec.output_width())
        .ok_or_else(|| CliError::usage("--classes is required for models without a flat output"))?;
    let ds = match args.format {
        Format::Blobs => {
            let dim = spec.input_shape().len();
            let ds = data::synth_blobs(args.blobs_n, dim, classes, rng::derive_seed(seed, &[tag::DATA]));
            match spec.input_shape() {
                Shape::Flat(_) => ds,
                image => ds.reshape_to(image)?,
            }
        }
        Format::Csv => {
            let path = args
                .data
                .as_ref()
                .ok_or_else(|| CliError::usage("--data is required with --format csv"))?;
            let label_column = match args.label_column {
                Some(c) => c,
                None => csv_label_column(path, args.has_header)?,
            };
            data::load_csv(path, label_column, classes, args.has_header)?
        }
        Format::Idx => {
            let images = args
                .data
                .as_ref()
                .ok_or_else(|| CliError::usage("--data is required with --format idx"))?;
            let labels = args
                .labels_data
                .as_ref()
                .ok_or_else(|| CliError::usage("--labels-data is required with --format idx"))?;
            data::load_idx(images, labels)?
        }
        Format::Cifar => {
            let path = args
                .data
                .as_ref()
                .ok_or_else(|| CliError::usage("--data is required with --format cifar"))?;
            data::load_cifar(path)?
        }
    };
    if ds.input_shape() != Some(spec.input_shape()) {
        return Err(CliError::data(format!(
            "dataset inputs {:?} do not match the model input shape {}",
            ds.input_shape(),
            spec.input_shape()
        )));
    }
    Ok(ds)
}

fn format_name(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Idx => "idx",
        Format::Cifar => "cifar",
        Format::Blobs => "blobs",
    }
}

fn log_spaced_grid(min: f64, max: f64, count: usize) -> Result<Vec<f64>, CliError> {
    if !(min > 0.0 && min < 1.0 && max > 0.0 && max < 1.0 && min <= max) || count == 0 {
        return Err(CliError::usage(format!(
            "epsilon grid must satisfy 0 < eps-min <= eps-max < 1 and eps-count >= 1 (got {min}, {max}, {count})"
        )));
    }
    if count == 1 {
        return Ok(vec![max]);
    }
    let (la, lb) = (max.log10(), min.log10());
    Ok((0..count)
        .map(|i| 10f64.powf(la + (lb - la) * i as f64 / (count - 1) as f64))
        .collect())
}

#[derive(Serialize)]
struct EffdimMeta<'a> {
    command: &'a str,
    version: &'a str,
    model: String,
    parameter_count: usize,
    block_dims: Vec<usize>,
    sigma2: f64,
    frozen: bool,
    zeta: f64,
    seed: u64,
    thetas: usize,
    samples: usize,
    trajectories_per_input: usize,
    mean_propagation: bool,
    scheme: &'a str,
    eps_min: f64,
    eps_max: f64,
    eps_count: usize,
    dataset_format: &'a str,
    dataset_path: Option<String>,
    dataset_rows: usize,
    normalization: f64,
    threads: Option<usize>,
    wall_time_s: f64,
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    out.with_file_name(name)
}

fn cmd_effdim(args: &EffdimArgs, threads: Option<usize>) -> Result<(), CliError> {
    let start = Instant::now();
    let spec = build_model(&args.model)?;
    let d = param_count(&spec);
    let grid = log_spaced_grid(args.eps_min, args.eps_max, args.eps_count)?;
    let scheme = match args.scheme {
        Scheme::FanIn => SamplingScheme::FanInUniform,
        Scheme::UnitCube => SamplingScheme::UnitCube,
    };
    let cached = args
        .fim_cache
        .as_ref()
        .filter(|p| p.exists())
        .map(|p| FisherEnsemble::read_dump_file(p))
        .transpose()?;
    let (ensemble, dataset_rows) = match cached {
        Some(fe) => {
            if fe.d() != d {
                return Err(CliError::data(format!(
                    "cached ensemble has d = {}, model has d = {d}",
                    fe.d()
                )));
            }
            (fe, 0)
        }
        None => {
            let ds = load_dataset(&args.data, &spec, args.seed)?;
            let ds = ds.subsample(rng::derive_seed(args.seed, &[tag::SHUFFLE]), args.samples);
            if ds.len() < args.samples {
                eprintln!(
                    "note: dataset provides {} of the requested {} samples",
                    ds.len(),
                    args.samples
                );
            }
            let opts = EstimatorOptions {
                trajectories_per_input: args.trajectories_per_input,
                mode: if args.mean_propagation {
                    PropagationMode::MeanChain
                } else {
                    PropagationMode::NoisyChain
                },
                keep_factors: true,
            };
            let mut raw = Vec::with_capacity(args.thetas);
            for k in 0..args.thetas as u64 {
                let theta = twosed::netmodel::sample_params(
                    &spec,
                    rng::derive_seed(args.seed, &[tag::PARAMS, k]),
                    scheme,
                );
                raw.push(fisher::block_fim_with(
                    &spec,
                    &theta,
                    &ds.inputs,
                    rng::derive_seed(args.seed, &[tag::NOISE, k]),
                    &opts,
                )?);
            }
            let rows = ds.len();
            let fe = fisher::normalize_ensemble(raw, d);
            if let Some(path) = &args.fim_cache {
                fe.write_dump_file(path)?;
            }
            (fe, rows)
        }
    };
    let spectra = fisher::ensemble_spectra(&ensemble)?;
    let curve = effdim::sweep(spectra, &grid, args.zeta)?;
    curve.write_csv(&args.out)?;
    let meta = EffdimMeta {
        command: "effdim",
        version: env!("CARGO_PKG_VERSION"),
        model: args
            .model
            .model
            .clone()
            .unwrap_or_else(|| format!("{:?}", args.model.model_config)),
        parameter_count: d,
        block_dims: spec.block_param_counts(),
        sigma2: spec.sigma2(),
        frozen: spec.frozen(),
        zeta: args.zeta,
        seed: args.seed,
        thetas: args.thetas,
        samples: args.samples,
        trajectories_per_input: args.trajectories_per_input,
        mean_propagation: args.mean_propagation,
        scheme: match args.scheme {
            Scheme::FanIn => "fan-in",
            Scheme::UnitCube => "unit-cube",
        },
        eps_min: args.eps_min,
        eps_max: args.eps_max,
        eps_count: args.eps_count,
        dataset_format: format_name(args.data.format),
        dataset_path: args.data.data.as_ref().map(|p| p.display().to_string()),
        dataset_rows,
        normalization: ensemble.normalization(),
        threads,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    std::fs::write(
        sidecar_path(&args.out),
        serde_json::to_string_pretty(&meta).expect("serializable metadata"),
    )?;
    println!(
        "wrote {} ({} epsilon rows, d = {d}, K = {}, N = {})",
        args.out.display(),
        curve.rows.len(),
        ensemble.theta_count(),
        ensemble.per_theta().first().map_or(0, |bf| bf.n_samples()),
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainMeta<'a> {
    command: &'a str,
    version: &'a str,
    model: String,
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    n_train: usize,
    seed: u64,
    dataset_format: &'a str,
    dataset_path: Option<String>,
    final_accuracy: f64,
    threads: Option<usize>,
    wall_time_s: f64,
}

fn cmd_train(args: &TrainArgs, threads: Option<usize>) -> Result<(), CliError> {
    let start = Instant::now();
    let spec = build_model(&args.model)?;
    let ds = load_dataset(&args.data, &spec, args.seed)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        n_train: args.n_train,
        ..TrainConfig::default()
    };
    let curve = trainer::train(&spec, &ds, &cfg)?;
    curve.write_csv(&args.out)?;
    let meta = TrainMeta {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        model: args
            .model
            .model
            .clone()
            .unwrap_or_else(|| format!("{:?}", args.model.model_config)),
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        n_train: args.n_train,
        seed: args.seed,
        dataset_format: format_name(args.data.format),
        dataset_path: args.data.data.as_ref().map(|p| p.display().to_string()),
        final_accuracy: curve.final_accuracy,
        threads,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    std::fs::write(
        sidecar_path(&args.out),
        serde_json::to_string_pretty(&meta).expect("serializable metadata"),
    )?;
    println!(
        "wrote {} ({} epochs, final accuracy {:.4})",
        args.out.display(),
        curve.epoch_losses.len(),
        curve.final_accuracy
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let mut report = verify::Report::default();
    if matches!(args.suite, Suite::Bounds | Suite::All) {
        report.merge(verify::bounds_suite(args.seed));
    }
    if matches!(args.suite, Suite::Covering | Suite::All) {
        report.merge(verify::covering_suite()?);
    }
    if matches!(args.suite, Suite::Genbound | Suite::All) {
        report.merge(verify::genbound_suite(args.genbound_seeds)?);
    }
    if matches!(args.suite, Suite::Sigma | Suite::All) {
        report.merge(verify::sigma_suite(args.seed));
    }
    report.write_csv(&args.out)?;
    for row in &report.rows {
        println!(
            "[{}] {} {} (lhs {:.6e}, rhs {:.6e})",
            if row.pass { "PASS" } else { "FAIL" },
            row.check,
            row.param,
            row.lhs,
            row.rhs
        );
    }
    if report.all_pass() {
        println!("all {} checks passed; report at {}", report.rows.len(), args.out.display());
        Ok(())
    } else {
        let failed = report.rows.iter().filter(|r| !r.pass).count();
        Err(CliError::run(format!(
            "{failed} of {} checks failed; report at {}",
            report.rows.len(),
            args.out.display()
        )))
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Params { model } => {
            let spec = parse_model_string(model)?;
            println!("{}", param_count(&spec));
            Ok(())
        }
        Command::Effdim(args) => cmd_effdim(args, cli.threads),
        Command::Train(args) => cmd_train(args, cli.threads),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
