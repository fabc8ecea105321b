//! `cinefix` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "cinefix",
    version,
    about = "Cine MR motion-artefact simulation, detection and correction"
)]
pub struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub workers: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a phantom dataset.
    Phantom(PhantomArgs),
    /// Corrupt every subject of a dataset at one severity.
    Corrupt(CorruptArgs),
    /// Train and evaluate the experiment variants.
    Train(TrainArgs),
    /// Evaluate saved checkpoints on the test split.
    Eval(EvalArgs),
    /// Correct a single k-space sequence with a saved model.
    Recon(ReconArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Render a saved report as text or CSV.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Total number of subjects; must equal the sum of --split.
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Train,val,test subject counts.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub frames: Option<usize>,
    /// ROI height and width.
    #[arg(long)]
    pub size: Option<usize>,
    /// Render on a larger canvas and locate the ROI automatically.
    #[arg(long)]
    pub canvas: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    /// Dataset directory written by `phantom`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Replaced lines per frame.
    #[arg(long)]
    pub lines: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to `<in>/corrupted_n<lines>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON training configuration; defaults to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory; phantoms are generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated subset of baseline,separate,end2end,known_mask.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory; regenerated from the run configuration when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Corruption severity; defaults to the configured one.
    #[arg(long)]
    pub severity: Option<usize>,
    /// Defaults to `<run>/eval_n<severity>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write clean/corrupted/corrected/difference PGM panels here.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DcArg {
    Hard,
    Soft,
}

#[derive(Args, Debug)]
pub struct ReconArgs {
    /// Checkpoint directory (or a run directory holding `checkpoints/`).
    #[arg(long)]
    pub model: PathBuf,
    /// Checkpoint name inside the model directory.
    #[arg(long, default_value = "end2end")]
    pub variant: String,
    /// Complex k-space CKT, or a real image CKT transformed first.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = DcArg::Hard)]
    pub dc: DcArg,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Clean image CKT for reporting PSNR.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Defaults to the input's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `report.json` or a directory containing one.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Also write the rendering to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A semantically invalid invocation; exits like a parse error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
