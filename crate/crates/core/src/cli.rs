//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
//! Failures print a single JSON object on stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{generate_synthetic, read_dataset, write_dataset_to, Dataset, SyntheticConfig};
use crate::decode::DecodeConfig;
use crate::error::{Error, ErrorCategory, Result};
use crate::metrics::{parse_metrics, Metric, MetricsReport};
use crate::model::{CtcModel, FitOptions};
use crate::net::{NetworkSpec, OptimizerKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "ctckit", version, about = "CTC training, decoding and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and save it to a directory.
    Train(TrainArgs),
    /// Decode label sequences.
    Predict(PredictArgs),
    /// Compute loss, label error rate and sequence error rate.
    Evaluate(EvaluateArgs),
    /// Per-sequence CTC loss.
    Loss(ModelDataArgs),
    /// Per-frame class posteriors.
    Probas(ModelDataArgs),
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Network configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Also write weights.epochN.ctcw after every epoch.
    #[arg(long)]
    checkpoint: bool,
}

#[derive(Args, Debug)]
struct ModelDataArgs {
    /// Model directory.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output file, `-` for stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    io: ModelDataArgs,
    #[arg(long, conflicts_with_all = ["beam_width", "top_paths"])]
    greedy: bool,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    top_paths: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    io: ModelDataArgs,
    /// Comma-separated subset of loss,ler,ser.
    #[arg(long, default_value = "loss,ler,ser")]
    metrics: String,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    num: usize,
    /// Number of labels, blank excluded.
    #[arg(long)]
    labels: usize,
    /// Defaults to the number of labels.
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_frames: usize,
    #[arg(long, default_value_t = 4)]
    max_frames: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Network configuration file: the network spec plus optional decode defaults.
#[derive(Debug, Deserialize)]
struct TrainConfig {
    #[serde(flatten)]
    network: NetworkSpec,
    #[serde(default)]
    decode: DecodeConfig,
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    metrics: &'a [Metric],
    num_sequences: usize,
    decode: DecodeConfig,
    #[serde(flatten)]
    report: MetricsReport,
}

pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::Usage => EXIT_USAGE,
        ErrorCategory::Data => EXIT_DATA,
        ErrorCategory::Numeric => EXIT_NUMERIC,
    }
}

/// One-line JSON diagnostic for `err`.
pub fn diagnostic(err: &Error) -> String {
    let mut value = json!({
        "error": err.kind(),
        "exit_code": exit_code(err),
        "message": err.to_string(),
    });
    if let Some(i) = err.sequence_index() {
        value["sequence"] = json!(i);
    }
    value.to_string()
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(io::stdout(), "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!(
                "{}",
                json!({"error": "usage", "exit_code": EXIT_USAGE, "message": first})
            );
            return EXIT_USAGE;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            exit_code(&e)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => train(args),
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Loss(args) => loss(args),
        Command::Probas(args) => probas(args),
        Command::GenData(args) => gen_data(args),
    }
}

fn io_error(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Buffered output to a file, or stdout for `-`.
fn open_output(path: &Path) -> Result<Box<dyn Write>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufWriter::new(io::stdout())));
    }
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    Ok(Box::new(BufWriter::new(file)))
}

fn write_lines<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = open_output(path)?;
    let result = (|| -> io::Result<()> {
        for line in lines {
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        w.flush()
    })();
    result.map_err(|e| io_error(path, e))
}

fn check_dataset(model: &CtcModel, data: &Dataset, path: &Path) -> Result<()> {
    let spec = model.spec();
    if data.feature_dim != spec.feature_dim || data.num_labels > spec.num_labels {
        return Err(Error::Shape(format!(
            "{}: dataset has feature_dim {} and {} labels, the model has feature_dim {} and {} labels",
            path.display(),
            data.feature_dim,
            data.num_labels,
            spec.feature_dim,
            spec.num_labels
        )));
    }
    Ok(())
}

fn load(args: &ModelDataArgs) -> Result<(CtcModel, Dataset)> {
    let model = CtcModel::load_model(&args.model, None)?;
    let data = read_dataset(&args.data)?;
    check_dataset(&model, &data, &args.data)?;
    Ok((model, data))
}

fn train(args: TrainArgs) -> Result<()> {
    let optimizer: OptimizerKind = args.optimizer.parse()?;
    let text = std::fs::read_to_string(&args.config).map_err(|e| io_error(&args.config, e))?;
    let config: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.config.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut model = CtcModel::compile(config.network, optimizer, args.lr, config.decode, args.seed)?;
    model.set_clip_norm(args.clip_norm)?;

    let train_data = read_dataset(&args.data)?;
    check_dataset(&model, &train_data, &args.data)?;
    let val_data = match &args.val {
        Some(path) => {
            let d = read_dataset(path)?;
            check_dataset(&model, &d, path)?;
            Some(d)
        }
        None => None,
    };
    let options = FitOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        shuffle_seed: args.seed,
        validation: val_data.as_ref(),
        checkpoint_dir: args.checkpoint.then_some(args.out.as_path()),
    };
    let history = model.fit(&train_data, &options)?;
    model.save_model(&args.out)?;
    let history_path = args.out.join("history.json");
    let text = serde_json::to_string_pretty(&history).expect("serializable") + "\n";
    std::fs::write(&history_path, text).map_err(|e| io_error(&history_path, e))?;
    for record in &history.epochs {
        println!("{}", serde_json::to_string(record).expect("serializable"));
    }
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let (model, data) = load(&args.io)?;
    let mut decode = *model.decode_config();
    if args.greedy {
        decode.greedy = true;
    } else if args.beam_width.is_some() || args.top_paths.is_some() {
        decode.greedy = false;
        decode.beam_width = args.beam_width.unwrap_or(decode.beam_width);
        decode.top_paths = args.top_paths.unwrap_or(decode.top_paths);
    }
    let results = model.predict_with(&data, &decode)?;
    let lines = results.iter().enumerate().flat_map(|(i, r)| {
        r.paths.iter().enumerate().map(move |(rank, p)| {
            json!({"sequence": i, "rank": rank, "labels": p.labels.as_slice(), "score": p.score})
        })
    });
    write_lines(&args.io.out, lines)
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let metrics = parse_metrics(&args.metrics)?;
    let (model, data) = load(&args.io)?;
    let report = model.evaluate(&data, &metrics)?;
    let output = EvaluationOutput {
        metrics: &metrics,
        num_sequences: data.sequences.len(),
        decode: *model.decode_config(),
        report,
    };
    let path = &args.io.out;
    let mut w = open_output(path)?;
    let text = serde_json::to_string_pretty(&output).expect("serializable");
    writeln!(w, "{text}")
        .and_then(|_| w.flush())
        .map_err(|e| io_error(path, e))
}

fn loss(args: ModelDataArgs) -> Result<()> {
    let (model, data) = load(&args)?;
    let losses = model.get_loss(&data)?;
    write_lines(
        &args.out,
        losses.iter().enumerate().map(|(i, l)| json!({"sequence": i, "loss": l})),
    )
}

fn probas(args: ModelDataArgs) -> Result<()> {
    let (model, data) = load(&args)?;
    let probas = model.get_probas(&data)?;
    write_lines(
        &args.out,
        probas
            .iter()
            .enumerate()
            .map(|(i, p)| json!({"sequence": i, "probas": p.matrix().to_rows()})),
    )
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let config = SyntheticConfig {
        num_sequences: args.num,
        num_labels: args.labels,
        feature_dim: args.feature_dim.unwrap_or(args.labels),
        frames_per_label: (args.min_frames, args.max_frames),
        noise_sigma: args.sigma,
        seed: args.seed,
    };
    let data = generate_synthetic(&config)?;
    let mut w = open_output(&args.out)?;
    write_dataset_to(&mut w, &data)
        .and_then(|_| w.flush())
        .map_err(|e| io_error(&args.out, e))
}
