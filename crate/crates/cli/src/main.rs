//! `nqe`: train, lower, cost and run the quantized encoder and its codec.

mod commands;
mod config;
mod error;
mod manifest;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::Task;
use crate::manifest::Recorder;

#[derive(Debug, Parser)]
#[command(name = "nqe", version, about = "Mixed-precision quantized encoder toolkit")]
struct Cli {
    /// Where to write the run manifest (default depends on the command;
    /// stderr when it has no output path).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a classifier or a codec from a TOML run configuration.
    Train(TrainArgs),
    /// Evaluate trained weights on held-out data.
    Eval(EvalArgs),
    /// Lower folded weights to the integer-only model.
    Lower(LowerArgs),
    /// Run the integer-only model on an image.
    Infer(InferArgs),
    /// Weight memory and compute of a configuration.
    Cost(CostArgs),
    /// Encode an image into a bitstream.
    Compress(CompressArgs),
    /// Decode a bitstream into an image.
    Decompress(DecompressArgs),
    /// Print the reproduction tables.
    Tables(TablesArgs),
    /// Write a weights file (from existing weights or a fresh model).
    Export(ExportArgs),
    /// Read a weights file and describe it.
    Import(ImportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Run configuration naming the held-out data (synthetic data matching
    /// the model when absent).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate through the integer-only path.
    #[arg(long)]
    pub integer: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct LowerArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep bit-shift normalizations feeding HWMSB as explicit shifts.
    #[arg(long)]
    pub no_absorb: bool,
    /// Width report as JSON lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Code,
    Logits,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub lowered: PathBuf,
    /// Image with the model's input size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum, default_value = "logits")]
    pub output: OutputKind,
    /// Per-layer integer trace as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CostArgs {
    #[arg(long = "F", default_value_t = 64)]
    pub f: usize,
    #[arg(long, default_value = "mixed")]
    pub precision: String,
    #[arg(long, default_value = "dwconv")]
    pub bottleneck: String,
    /// Weight bitwidths of MAC×bit and BOPs.
    #[arg(long, default_value = "entropy")]
    pub mode: String,
    /// Weight bitwidths of the memory total.
    #[arg(long, default_value = "naive")]
    pub memory: String,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub input_size: usize,
    /// JSON lines instead of the aligned table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct CompressArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Encode with the integer-only model.
    #[arg(long)]
    pub integer: bool,
    /// Crop the image to a whole number of patches instead of rejecting it.
    #[arg(long)]
    pub crop: bool,
    /// Also decode and write the reconstruction.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    #[arg(long, default_value = "purenet")]
    pub variant: String,
}

#[derive(Debug, Args, Serialize)]
pub struct DecompressArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "purenet")]
    pub variant: String,
    /// Reference image for PSNR and MS-SSIM.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TablesArgs {
    /// Bottleneck memory comparison.
    #[arg(long)]
    pub appendix_a: bool,
    /// Memory and compute of the mixed and binary encoders.
    #[arg(long)]
    pub processor: bool,
    #[arg(long = "F", default_value_t = 64)]
    pub f: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    /// Existing weights to re-export.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub weights: Option<PathBuf>,
    /// Run configuration of a freshly initialized model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fold normalization of a fresh model into bit shifts.
    #[arg(long)]
    pub fold: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop the real-valued proxy weights.
    #[arg(long)]
    pub no_proxies: bool,
    /// Also write the resolved topology as TOML.
    #[arg(long)]
    pub topology: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ImportArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub json: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Lower(_) => "lower",
            Command::Infer(_) => "infer",
            Command::Cost(_) => "cost",
            Command::Compress(_) => "compress",
            Command::Decompress(_) => "decompress",
            Command::Tables(_) => "tables",
            Command::Export(_) => "export",
            Command::Import(_) => "import",
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> error::CliResult<()> {
    let mut rec = Recorder::default();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let name = cli.command.name();
    match &cli.command {
        Command::Train(a) => commands::train(a, &mut rec, &mut out)?,
        Command::Eval(a) => commands::eval(a, &mut rec, &mut out)?,
        Command::Lower(a) => commands::lower(a, &mut rec, &mut out)?,
        Command::Infer(a) => commands::infer(a, &mut rec, &mut out)?,
        Command::Cost(a) => commands::cost(a, &mut rec, &mut out)?,
        Command::Compress(a) => commands::compress(a, &mut rec, &mut out)?,
        Command::Decompress(a) => commands::decompress(a, &mut rec, &mut out)?,
        Command::Tables(a) => commands::tables(a, &mut rec, &mut out)?,
        Command::Export(a) => commands::export(a, &mut rec, &mut out)?,
        Command::Import(a) => commands::import(a, &mut rec, &mut out)?,
    }
    out.flush().map_err(|e| error::CliError::output(std::path::Path::new("<stdout>"), e))?;

    let manifest = rec.finish(name, argv)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    match cli.manifest.as_ref().or(rec.default_path.as_ref()) {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| error::CliError::output(path, e))?,
        None => eprintln!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
