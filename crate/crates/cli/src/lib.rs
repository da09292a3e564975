//! Subcommands behind the `disasternet` binary.
//!
//! Every command writes its human-readable output to the supplied writer and
//! its artifacts to files, so the same code paths serve the binary and the
//! tests.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use disasternet::gradcheck::{gradient_check_with, tolerance_for_eps, GradCheckConfig, GradCheckReport};
use disasternet::trainer::{initial_params, train_from};
use disasternet::{
    backward, evaluate, split, synth_generate, Checkpoint, Dataset, DefaultEmbedders, ForwardTrace, Gradients,
    ModelConfig, ModelParams, RunConfig, SampleEmbeddings, SynthConfig, TrainConfig,
};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

pub const TRAIN_SPLIT_FILE: &str = "train.jsonl";
pub const VAL_SPLIT_FILE: &str = "val.jsonl";
pub const TEST_SPLIT_FILE: &str = "test.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const EVAL_CONFIG_FILE: &str = "eval_config.json";

#[derive(Debug)]
pub enum CliError {
    /// Argument parsing failed, or help/version was requested.
    Clap(clap::Error),
    Config(String),
    Data(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) => e.exit_code(),
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Check(_) => EXIT_CHECK,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Clap(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<disasternet::Error> for CliError {
    fn from(e: disasternet::Error) -> Self {
        match e {
            disasternet::Error::InvalidConfig(m) => CliError::Config(m),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "disasternet",
    version,
    about = "Multimodal disaster classifier: synth, train, eval, gradcheck"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset.
    Synth(SynthArgs),
    /// Split a dataset, train, and write checkpoint, history and validation report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthConfig::default().num_classes)]
    pub classes: usize,
    #[arg(long, default_value_t = SynthConfig::default().samples_per_class)]
    pub per_class: usize,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    /// Fraction of shared-vocabulary tokens and image noise scale, in [0, 1].
    #[arg(long, default_value_t = SynthConfig::default().noise_level)]
    pub noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().image_dim)]
    pub image_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().vocab_per_class)]
    pub vocab_per_class: usize,
    #[arg(long, default_value_t = SynthConfig::default().shared_vocab)]
    pub shared_vocab: usize,
    #[arg(long, default_value_t = SynthConfig::default().tokens_per_sample)]
    pub tokens_per_sample: usize,
    /// Coordinate standard deviation around each class center, degrees.
    #[arg(long, default_value_t = SynthConfig::default().geo_spread)]
    pub geo_spread: f64,
    #[arg(long, default_value_t = SynthConfig::default().image_center_distance)]
    pub image_center_distance: f64,
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn to_config(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.classes,
            samples_per_class: self.per_class,
            vocab_per_class: self.vocab_per_class,
            shared_vocab: self.shared_vocab,
            tokens_per_sample: self.tokens_per_sample,
            geo_centers: None,
            geo_spread: self.geo_spread,
            image_dim: self.image_dim,
            image_center_distance: self.image_center_distance,
            noise_level: self.noise,
            seed: self.seed,
        }
    }
}

/// Flags override values from `--config`, which override built-in defaults.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file; falls back to `paths.dataset` in the config file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; falls back to `paths.output` in the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Adam learning rate.
    #[arg(long, default_value_t = TrainConfig::DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    /// Samples per optimizer step.
    #[arg(long, default_value_t = TrainConfig::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    /// Passes over the training part.
    #[arg(long, default_value_t = TrainConfig::DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// Decoupled weight decay.
    #[arg(long, default_value_t = TrainConfig::DEFAULT_WEIGHT_DECAY)]
    pub weight_decay: f64,
    /// Dropout rate after fusion and attention.
    #[arg(long, default_value_t = ModelConfig::default().dropout_rate)]
    pub dropout: f64,
    /// Shared model width.
    #[arg(long, default_value_t = ModelConfig::default().d)]
    pub d: usize,
    /// Text embedding width.
    #[arg(long, default_value_t = RunConfig::default().text_embed.dim_t)]
    pub dim_t: usize,
    /// Geo embedding width.
    #[arg(long, default_value_t = RunConfig::default().geo_embed.dim_g)]
    pub dim_g: usize,
    #[arg(long, default_value_t = RunConfig::default().text_embed.hash_seed)]
    pub hash_seed: u64,
    #[arg(long, default_value_t = RunConfig::default().geo_embed.freq_base)]
    pub freq_base: f64,
    /// Seeds initialization, splitting, shuffling and dropout.
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_name = "TRAIN,VAL,TEST", value_delimiter = ',', default_values_t = RunConfig::default().split)]
    pub split: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for the report; when absent only the table is printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = GradCheckConfig::default().eps)]
    pub eps: f64,
    #[arg(long, default_value_t = GradCheckConfig::default().samples)]
    pub samples: usize,
    #[arg(long, default_value_t = GradCheckConfig::default().seed)]
    pub seed: u64,
    /// Maximum relative error; defaults to max(1e-4, eps).
    #[arg(long)]
    pub tol: Option<f64>,
}

/// Parses `args` (including the program name) and runs the chosen command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Cli::command().try_get_matches_from(args).map_err(CliError::Clap)?;
    let cli = Cli::from_arg_matches(&matches).map_err(CliError::Clap)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => {
            let sub = matches.subcommand_matches("train").expect("train subcommand matched");
            cmd_train(a, sub, out)
        }
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let dataset = synth_generate(&args.to_config())?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    dataset.save(&args.out)?;
    let counts: Vec<String> = dataset
        .class_names
        .iter()
        .zip(dataset.class_counts())
        .map(|(name, n)| format!("{name} {n}"))
        .collect();
    writeln!(
        out,
        "wrote {} samples, {} classes ({}) to {}",
        dataset.len(),
        dataset.num_classes(),
        counts.join(", "),
        args.out.display()
    )?;
    Ok(())
}

fn from_command_line(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Merges defaults, the optional config file and explicit flags.
pub fn resolve_train_config(args: &TrainArgs, m: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            RunConfig::from_json(&read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    macro_rules! flag {
        ($id:literal, $slot:expr, $value:expr) => {
            if from_command_line(m, $id) {
                $slot = $value;
            }
        };
    }
    flag!("lr", cfg.train.learning_rate, args.lr);
    flag!("batch_size", cfg.train.batch_size, args.batch_size);
    flag!("epochs", cfg.train.epochs, args.epochs);
    flag!("weight_decay", cfg.train.weight_decay, args.weight_decay);
    flag!("dropout", cfg.model.dropout_rate, args.dropout);
    flag!("d", cfg.model.d, args.d);
    flag!("dim_t", cfg.text_embed.dim_t, args.dim_t);
    flag!("dim_g", cfg.geo_embed.dim_g, args.dim_g);
    flag!("hash_seed", cfg.text_embed.hash_seed, args.hash_seed);
    flag!("freq_base", cfg.geo_embed.freq_base, args.freq_base);
    flag!("seed", cfg.train.seed, args.seed);
    if from_command_line(m, "split") {
        cfg.split = args
            .split
            .as_slice()
            .try_into()
            .map_err(|_| CliError::Config(format!("--split needs 3 fractions, got {}", args.split.len())))?;
    }
    if args.data.is_some() {
        cfg.paths.dataset = args.data.clone();
    }
    if args.out.is_some() {
        cfg.paths.output = args.out.clone();
    }
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, m: &ArgMatches, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = resolve_train_config(args, m)?;
    let data_path = cfg
        .paths
        .dataset
        .clone()
        .ok_or_else(|| CliError::Config("no dataset given (--data or paths.dataset)".into()))?;
    let out_dir = cfg
        .paths
        .output
        .clone()
        .ok_or_else(|| CliError::Config("no output directory given (--out or paths.output)".into()))?;

    let dataset = Dataset::load(&data_path)?;
    cfg.model.num_classes = dataset.num_classes();
    cfg.image_embed.dim_i = dataset.image_dim;
    cfg.sync_dims();
    cfg.paths.checkpoint = Some(out_dir.join(CHECKPOINT_FILE));
    cfg.validate()?;

    let (train_part, val_part, test_part) = split(&dataset, cfg.split, cfg.train.seed)?;
    create_dir(&out_dir)?;
    write_file(&out_dir.join(RUN_CONFIG_FILE), &cfg.to_json()?)?;
    train_part.save(out_dir.join(TRAIN_SPLIT_FILE))?;
    val_part.save(out_dir.join(VAL_SPLIT_FILE))?;
    test_part.save(out_dir.join(TEST_SPLIT_FILE))?;
    writeln!(
        out,
        "split {} samples into train {}, val {}, test {}",
        dataset.len(),
        train_part.len(),
        val_part.len(),
        test_part.len()
    )?;

    let embedders = DefaultEmbedders::new(cfg.text_embed, cfg.image_embed, cfg.geo_embed)?;
    let train_data = embedders.embed_dataset(&train_part)?;
    let init = initial_params(&cfg.model, &cfg.train)?;
    let mut history = String::new();
    let mut io_result = Ok(());
    let (params, _) = train_from(init, &train_data, &cfg.model, &cfg.train, |r| {
        history.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
        history.push('\n');
        if io_result.is_ok() {
            io_result = writeln!(
                out,
                "epoch {}/{} loss {:.6} train_accuracy {:.4}",
                r.epoch, cfg.train.epochs, r.mean_loss, r.train_accuracy
            );
        }
    })?;
    io_result?;
    write_file(&out_dir.join(HISTORY_FILE), &history)?;

    let checkpoint = Checkpoint::new(cfg.model, cfg.text_embed, cfg.image_embed, cfg.geo_embed, params)?;
    checkpoint.save(out_dir.join(CHECKPOINT_FILE))?;

    if val_part.is_empty() {
        writeln!(out, "validation part is empty; no report written")?;
    } else {
        let report = evaluate(&checkpoint.params, &embedders.embed_dataset(&val_part)?, &cfg.model)?;
        write_file(&out_dir.join(REPORT_FILE), &report.to_json()?)?;
        writeln!(out, "validation ({} samples)", report.num_samples)?;
        write!(out, "{}", report.summary_table())?;
    }
    writeln!(out, "wrote {}", out_dir.display())?;
    Ok(())
}

#[derive(Debug, serde::Serialize)]
struct EvalEcho<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    model: &'a ModelConfig,
    text_embed: &'a disasternet::TextEmbedConfig,
    image_embed: &'a disasternet::ImageEmbedConfig,
    geo_embed: &'a disasternet::GeoEmbedConfig,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    if dataset.num_classes() != checkpoint.model.num_classes {
        return Err(CliError::Data(format!(
            "checkpoint has {} classes but {} has {}",
            checkpoint.model.num_classes,
            args.data.display(),
            dataset.num_classes()
        )));
    }
    if dataset.image_dim != checkpoint.image_embed.dim_i {
        return Err(CliError::Data(format!(
            "checkpoint expects image features of length {} but {} declares {}",
            checkpoint.image_embed.dim_i,
            args.data.display(),
            dataset.image_dim
        )));
    }
    let data = checkpoint.embedders()?.embed_dataset(&dataset)?;
    let report = evaluate(&checkpoint.params, &data, &checkpoint.model)?;
    writeln!(out, "{} samples", report.num_samples)?;
    write!(out, "{}", report.summary_table())?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_file(&dir.join(REPORT_FILE), &report.to_json()?)?;
        let echo = EvalEcho {
            checkpoint: &args.checkpoint,
            data: &args.data,
            model: &checkpoint.model,
            text_embed: &checkpoint.text_embed,
            image_embed: &checkpoint.image_embed,
            geo_embed: &checkpoint.geo_embed,
        };
        let mut text = serde_json::to_string_pretty(&echo).expect("eval echo serializes");
        text.push('\n');
        write_file(&dir.join(EVAL_CONFIG_FILE), &text)?;
    }
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    cmd_gradcheck_with(args, out, backward).map(|_| ())
}

/// Gradient check against an arbitrary backward pass. Fails with
/// [`EXIT_CHECK`] naming every parameter over tolerance.
pub fn cmd_gradcheck_with<B>(args: &GradcheckArgs, out: &mut dyn Write, backward_fn: B) -> CliResult<GradCheckReport>
where
    B: Fn(&ForwardTrace, &SampleEmbeddings, &ModelParams, usize) -> disasternet::Result<Gradients>,
{
    if !(args.eps > 0.0) || args.samples == 0 {
        return Err(CliError::Config("eps must be positive and samples at least 1".into()));
    }
    let cfg = GradCheckConfig {
        samples: args.samples,
        eps: args.eps,
        tolerance: args.tol.unwrap_or_else(|| tolerance_for_eps(args.eps)),
        seed: args.seed,
        ..Default::default()
    };
    let report = gradient_check_with(&cfg, backward_fn)?;
    writeln!(
        out,
        "d={} d_t={} d_i={} d_g={} C={} samples={} eps={:e} tolerance={:e}",
        cfg.model.d,
        cfg.model.d_t,
        cfg.model.d_i,
        cfg.model.d_g,
        cfg.model.num_classes,
        cfg.samples,
        cfg.eps,
        cfg.tolerance
    )?;
    for p in &report.params {
        let status = if p.max_relative_error < cfg.tolerance {
            "ok"
        } else {
            "FAIL"
        };
        writeln!(out, "{:<7} {:.3e} {status}", p.name, p.max_relative_error)?;
    }
    let failures: Vec<&str> = report.failures().iter().map(|p| p.name.as_str()).collect();
    if failures.is_empty() {
        writeln!(out, "gradient check passed (worst {:.3e})", report.worst())?;
        Ok(report)
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failures.join(", "))))
    }
}
