mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsinas::inference::Strategy;
use hsinas::search_space::SearchSpace;

/// Architecture search and pixel classification for hyperspectral cubes.
#[derive(Parser, Debug)]
#[command(name = "hsinas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a cube and a fully labeled map.
    Gen(GenArgs),
    /// Split a label map into train, val and test maps.
    Split(SplitArgs),
    /// Search a supernet and derive a genotype.
    Search(SearchArgs),
    /// Train the compact network of a genotype.
    Train(TrainArgs),
    /// Classify every pixel of a cube.
    Infer(InferArgs),
    /// Score a predicted map against a reference map.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for `cube.hsi` and `labels.lbl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Scene extent as HxWxB.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct SplitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Directory for `train.lbl`, `val.lbl` and `test.lbl`; defaults to the
    /// directory of the input map.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cube: Option<PathBuf>,
    /// Directory holding `train.lbl` and `val.lbl`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_space)]
    pub space: Option<SearchSpace>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Node width of the supernet.
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Node width the genotype is scaled to for final training.
    #[arg(long)]
    pub final_width: Option<usize>,
    #[arg(long)]
    pub stem_channels: Option<usize>,
    #[arg(long)]
    pub head_channels: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub arch_lr: Option<f64>,
    #[arg(long)]
    pub arch_weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub genotype: Option<PathBuf>,
    #[arg(long)]
    pub cube: Option<PathBuf>,
    /// Directory holding `train.lbl` and `val.lbl`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stem_channels: Option<usize>,
    #[arg(long)]
    pub head_channels: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub poly_power: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub cube: Option<PathBuf>,
    /// Directory for `classmap.lbl` and `probabilities.hsi`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Comma-separated windows of the multi-scale strategies.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Class count; defaults to the largest id in either map.
    #[arg(long)]
    pub classes: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: hsinas::Error| e.to_string())
}

fn parse_space(s: &str) -> Result<SearchSpace, String> {
    s.parse().map_err(|e: hsinas::Error| e.to_string())
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(hsinas::Error),
}

impl From<hsinas::Error> for CliError {
    fn from(e: hsinas::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// Process exit code and short category name.
    fn category(&self) -> (u8, &'static str) {
        use hsinas::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => (2, "config"),
            CliError::Core(E::Format { .. } | E::Parse { .. } | E::Io { .. } | E::Checkpoint(_) | E::UnderPopulatedClass { .. }) => {
                (3, "input")
            }
            CliError::Core(E::Divergence { .. } | E::EmptySupervision | E::UndefinedMetric(_)) => (4, "compute"),
            CliError::Core(_) => (1, "internal"),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Split(a) => commands::split(a),
        Command::Search(a) => commands::search(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = e.category();
            eprintln!("error[{category}]: {e}");
            ExitCode::from(code)
        }
    }
}
