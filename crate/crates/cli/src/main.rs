use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Serialize};
use serde_json::Value;

use munet::audio::{load_audio, write_audio};
use munet::bench::bench_inference;
use munet::dataset::{
    build_manifest, discover_tracks, gen_synthetic, DatasetError, Manifest, PipelineConfig, Split,
    SynthConfig, TRACK_LIST,
};
use munet::evaluate::{evaluate_manifest, EvalError, Estimator};
use munet::loss::{EnergyReport, LossError, LossKind, Strategy};
use munet::net::{load_checkpoint, Checkpoint, NetError, Network};
use munet::separate::{SeparationError, Separator};
use munet::train::{TrainConfig, TrainError, Trainer, TrainingData};

/// Multi-source U-Net music separation: data preparation, training,
/// separation, and evaluation.
#[derive(Parser, Debug)]
#[command(name = "munet", version)]
struct Cli {
    /// JSON file with settings for the subcommand; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-stem dataset.
    GenSynth(GenSynthArgs),
    /// Resample, chunk, and split a dataset into a manifest.
    Preprocess(PreprocessArgs),
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Separate a WAV file into one file per source.
    Separate(SeparateArgs),
    /// SDR/SIR/SAR over a manifest split.
    Evaluate(EvaluateArgs),
    /// Per-source energies and the weights every strategy derives from them.
    EnergyReport(EnergyArgs),
    /// Inference throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    tracks: Option<usize>,
    #[arg(long)]
    test_tracks: Option<usize>,
    /// Track length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    sample_rate: Option<u32>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Dataset root: a `tracks.json` listing or one directory per track.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated source names (default: taken from the track listing).
    #[arg(long, value_delimiter = ',')]
    sources: Option<Vec<String>>,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    chunk_seconds: Option<f64>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// Keep train chunks that have a silent source.
    #[arg(long)]
    keep_silent: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// UW, DWA, EBW_P1, EBW_InstP1, EBW_P2 or OH.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Comma-separated channel widths, shallowest first.
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<usize>>,
    #[arg(long)]
    keep_silent: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Direct,
    Indirect,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum EstimatorArg {
    Network,
    Ideal,
    Mixture,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "network")]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = munet::metrics::DEFAULT_FILTER_LENGTH)]
    filter_length: usize,
}

#[derive(Args, Debug)]
struct EnergyArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Seconds to keep forwarding.
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
}

/// A bad setting, as opposed to bad data.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn read_config_file(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(config_error(format!("{}: expected a JSON object", path.display())));
    }
    Ok(Some(value))
}

/// Overlay the keys of `file` onto `defaults`. Keys the config type does not
/// have are rejected.
fn overlay<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Value>) -> Result<T> {
    let mut base = serde_json::to_value(&defaults)?;
    if let (Some(Value::Object(over)), Value::Object(map)) = (file, &mut base) {
        for (k, v) in over {
            if !map.contains_key(k) {
                return Err(config_error(format!("unknown config key '{k}'")));
            }
            map.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(base).map_err(|e| config_error(format!("config: {e}")))
}

fn echo<T: Serialize>(what: &str, config: &T) {
    let json = serde_json::to_string(config).expect("config serializes");
    eprintln!("{what} config: {json}");
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_synth(cli: &Cli, args: &GenSynthArgs, file: Option<&Value>) -> Result<()> {
    let mut config = overlay(SynthConfig::two_source(4, 12.0, 0), file)?;
    if let Some(v) = args.tracks {
        config.tracks = v;
    }
    if let Some(v) = args.test_tracks {
        config.test_tracks = v;
    }
    if let Some(v) = args.duration {
        config.duration_secs = v;
    }
    if let Some(v) = args.sample_rate {
        config.sample_rate = v;
    }
    if let Some(v) = cli.seed {
        config.seed = v;
    }
    echo("gen-synth", &config);
    let entries = gen_synthetic(&config, &cli.out)?;
    println!("wrote {} tracks to {}", entries.len(), cli.out.display());
    Ok(())
}

/// Source names from a dataset's track listing, in listing order.
fn listed_sources(root: &Path) -> Result<Vec<String>> {
    let listing = root.join(TRACK_LIST);
    if !listing.exists() {
        return Err(config_error(format!(
            "{} has no {TRACK_LIST}; pass --sources",
            root.display()
        )));
    }
    let entries = discover_tracks(root, &[])?;
    let first = entries
        .first()
        .ok_or_else(|| anyhow::anyhow!("{} lists no tracks", listing.display()))?;
    Ok(first
        .stem_paths
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect())
}

fn preprocess(cli: &Cli, args: &PreprocessArgs, file: Option<&Value>) -> Result<()> {
    let sources = match &args.sources {
        Some(s) => s.clone(),
        None => listed_sources(&args.data)?,
    };
    let mut config = overlay(PipelineConfig::new(sources), file)?;
    if args.sources.is_some() {
        config.source_names = args.sources.clone().unwrap();
    }
    if let Some(v) = args.sample_rate {
        config.sample_rate = v;
    }
    if let Some(v) = args.chunk_seconds {
        config.chunk_seconds = v;
    }
    if let Some(v) = args.valid_fraction {
        config.valid_fraction = v;
    }
    if args.keep_silent {
        config.filter_silent = false;
    }
    if let Some(v) = cli.seed {
        config.seed = v;
    }
    echo("preprocess", &config);
    let entries = discover_tracks(&args.data, &config.source_names)?;
    if entries.is_empty() {
        bail!("no tracks found under {}", args.data.display());
    }
    let manifest = build_manifest(&entries, &config)?;
    fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("manifest.json");
    manifest.save(&path)?;
    println!(
        "{} tracks, {} train / {} valid / {} test chunks, {} silent chunks removed -> {}",
        manifest.tracks.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Valid),
        manifest.count(Split::Test),
        manifest.removed_silent,
        path.display()
    );
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs, file: Option<&Value>) -> Result<()> {
    let mut config = overlay(TrainConfig::default(), file)?;
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.loss {
        config.loss_kind = match v {
            LossArg::Direct => LossKind::Direct,
            LossArg::Indirect => LossKind::Indirect,
        };
    }
    if let Some(v) = &args.strategy {
        config.strategy = v.parse::<Strategy>()?;
    }
    if let Some(v) = args.checkpoint_every {
        config.checkpoint_every = v;
    }
    if let Some(v) = &args.filters {
        config.filters = v.clone();
    }
    if args.keep_silent {
        config.filter_silent = false;
    }
    if let Some(v) = cli.seed {
        config.seed = v;
    }
    config.validate()?;
    echo("train", &config);
    let manifest = Manifest::load(&args.manifest)?;
    let data = TrainingData::from_manifest(&manifest, config.filter_silent)?;
    log::info!(
        "{} train and {} valid chunks",
        data.train.len(),
        data.valid.len()
    );
    let mut trainer = Trainer::new(config, data)?;
    let fit = trainer.fit(&cli.out)?;
    let last = fit.reports.last().expect("at least one epoch");
    println!(
        "trained {} epochs, final loss {:.5}; checkpoints in {}",
        fit.reports.len(),
        last.weighted_total,
        cli.out.display()
    );
    Ok(())
}

fn separate(cli: &Cli, args: &SeparateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    echo("separate", &serde_json::json!({
        "checkpoint": args.checkpoint,
        "input": args.input,
        "audio": ckpt.meta.audio,
        "sources": ckpt.meta.source_names,
    }));
    if ckpt.meta.source_names.len() != ckpt.network.config().out_channels {
        return Err(config_error(format!(
            "checkpoint names {} sources but the network has {} outputs",
            ckpt.meta.source_names.len(),
            ckpt.network.config().out_channels
        )));
    }
    let mixture = load_audio(&args.input)?;
    let mut separator = Separator::new(&ckpt.network, ckpt.meta.audio.clone());
    if let Some(b) = args.batch_size {
        separator.batch_size = b;
    }
    let sep = separator.separate(&mixture)?;
    if sep.padded {
        log::warn!("input does not fill a whole number of chunks; the last chunk was zero-padded");
    }
    fs::create_dir_all(&cli.out)?;
    for (name, stem) in ckpt.meta.source_names.iter().zip(&sep.stems) {
        let path = cli.out.join(format!("{name}.wav"));
        write_audio(stem, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    echo("evaluate", &serde_json::json!({
        "manifest": args.manifest,
        "checkpoint": args.checkpoint,
        "split": split,
        "estimator": format!("{:?}", args.estimator).to_lowercase(),
        "filter_length": args.filter_length,
    }));
    let ckpt: Option<Checkpoint> = match (&args.checkpoint, args.estimator) {
        (Some(path), EstimatorArg::Network) => Some(load_checkpoint(path)?),
        (None, EstimatorArg::Network) => {
            return Err(config_error("--estimator network needs --checkpoint"))
        }
        _ => None,
    };
    let estimator = match (&ckpt, args.estimator) {
        (Some(c), _) => Estimator::Network(&c.network),
        (None, EstimatorArg::Ideal) => Estimator::IdealMask,
        _ => Estimator::Mixture,
    };
    let eval = evaluate_manifest(&manifest, split, estimator, args.filter_length)?;
    eval.write(&cli.out)?;
    for s in eval.report.sources.iter().chain([&eval.report.overall]) {
        println!(
            "{:<12} SDR {:7.2}  SIR {:7.2}  SAR {:7.2}  (median SDR {:.2})",
            s.source, s.sdr.mean, s.sir.mean, s.sar.mean, s.sdr.median
        );
    }
    println!(
        "{} chunks evaluated, {} skipped",
        eval.report.chunks_evaluated, eval.report.chunks_skipped
    );
    Ok(())
}

fn energy_report(cli: &Cli, args: &EnergyArgs) -> Result<()> {
    echo("energy-report", &serde_json::json!({ "manifest": args.manifest }));
    let manifest = Manifest::load(&args.manifest)?;
    let data = TrainingData::from_manifest(&manifest, true)?;
    let stats = data.energy_stats()?;
    let report = EnergyReport::new(&stats)?;
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("energy.csv"), report.to_csv())?;
    write_json(&cli.out.join("energy.json"), &report)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    echo("bench", &serde_json::json!({
        "checkpoint": args.checkpoint,
        "batch_size": args.batch_size,
        "duration": args.duration,
        "seed": cli.seed.unwrap_or(0),
    }));
    if args.batch_size == 0 || !(args.duration >= 0.0 && args.duration.is_finite()) {
        return Err(config_error("batch size must be positive and duration non-negative"));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let net: &Network<f32> = &ckpt.network;
    let audio = &ckpt.meta.audio;
    let shape = (
        (audio.window_size / 2 + 1) / 2,
        audio.chunk_length / audio.hop + 1,
    );
    let report = bench_inference(
        net,
        args.batch_size,
        shape,
        Duration::from_secs_f64(args.duration),
        cli.seed.unwrap_or(0),
    )?;
    fs::create_dir_all(&cli.out)?;
    write_json(&cli.out.join("bench.json"), &report)?;
    println!(
        "{:.2} ± {:.2} chunks/s over {} batches of {}; each forward yields all {} source masks",
        report.chunks_per_sec_mean,
        report.chunks_per_sec_std,
        report.batches,
        report.batch_size,
        report.sources_per_forward
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let file = read_config_file(cli.config.as_deref())?;
    let file = file.as_ref();
    match &cli.command {
        Command::GenSynth(a) => gen_synth(cli, a, file),
        Command::Preprocess(a) => preprocess(cli, a, file),
        Command::Train(a) => train(cli, a, file),
        Command::Separate(a) => separate(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::EnergyReport(a) => energy_report(cli, a),
        Command::Bench(a) => bench(cli, a),
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn net_is_config(e: &NetError) -> bool {
    matches!(e, NetError::Config(_) | NetError::Incompatible(_))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<LossError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFinite { .. } => EXIT_NUMERIC,
                TrainError::Config(_) | TrainError::Loss(_) => EXIT_CONFIG,
                TrainError::Net(n) if net_is_config(n) => EXIT_CONFIG,
                TrainError::Dataset(DatasetError::Config(_)) => EXIT_CONFIG,
                _ => EXIT_DATA,
            };
        }
        if let Some(DatasetError::Config(_)) = cause.downcast_ref::<DatasetError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<NetError>() {
            if net_is_config(e) {
                return EXIT_CONFIG;
            }
        }
        if let Some(EvalError::SourceCount { .. }) = cause.downcast_ref::<EvalError>() {
            return EXIT_CONFIG;
        }
        if let Some(SeparationError::Net(e)) = cause.downcast_ref::<SeparationError>() {
            if net_is_config(e) {
                return EXIT_CONFIG;
            }
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
