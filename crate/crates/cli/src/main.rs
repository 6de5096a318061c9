//! `gama`: batch front end for datasets, frozen models, prompt banks,
//! generator training, evaluation and report tables.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "gama", version, about = "Generative multi-object attack lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-object scene dataset.
    Dataset(DatasetArgs),
    /// Train a frozen victim or surrogate classifier.
    TrainSurrogate(SurrogateArgs),
    /// Pretrain the joint image-text encoder.
    PretrainEncoder(EncoderArgs),
    /// Embed co-occurrence prompts into a text bank.
    BuildBank(BankArgs),
    /// Train a perturbation generator against frozen surrogates.
    TrainGenerator(GeneratorArgs),
    /// Score a generator against a set of victims.
    Evaluate(EvaluateArgs),
    /// Aggregate report CSVs into a table.
    Report(ReportArgs),
    /// Run the full desk-scale experiment end to end.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
pub struct DatasetArgs {
    /// JSON scene config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "dataset.gamd")]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// `shapes-a` or `shapes-b`.
    #[arg(long)]
    pub distribution: Option<String>,
    /// JSON list of allowed class pairs, e.g. `[[0,1],[2,3]]`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args)]
pub struct SurrogateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "surrogate.gamc")]
    pub out: PathBuf,
    /// Architecture id: 0 shallow-wide, 1 deep-narrow, 2 custom block.
    #[arg(long)]
    pub arch: Option<u16>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adversarially train with PGD examples.
    #[arg(long)]
    pub pgd: bool,
    /// PGD radius, as a fraction or `n/255`.
    #[arg(long, value_parser = parse_eps)]
    pub pgd_eps: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TaskArg {
    MultiLabel,
    SingleLabel,
}

#[derive(Args)]
pub struct EncoderArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "encoder.gamc")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

#[derive(Args)]
pub struct BankArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    /// Dataset whose label sets define the co-occurrence matrix.
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON pair list used instead of the dataset's observed co-occurrences.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value = gama_core::nets::PREFIX)]
    pub prefix: String,
    #[arg(long, default_value = "bank.gamb")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GeneratorArgs {
    /// gama, ls_only, gap_bce, cda_rel_bce, ablate_img_only or ablate_img_txt.
    #[arg(long, default_value = "gama")]
    pub method: String,
    /// Surrogate checkpoint; repeat for an ensemble.
    #[arg(long, required = true)]
    pub surrogate: Vec<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "generator.gamc")]
    pub out: PathBuf,
    /// L∞ budget, as a fraction or `n/255`.
    #[arg(long, value_parser = parse_eps)]
    pub eps: Option<f32>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompt candidates drawn per iteration (defaults to the batch size).
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Generator checkpoint, or `none` for the unperturbed baseline.
    #[arg(long)]
    pub generator: String,
    /// JSON list of victim specs; checkpoint paths are relative to this file.
    #[arg(long)]
    pub victims: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Override every victim's defense: none, median3 or pgd.
    #[arg(long)]
    pub defense: Option<String>,
    /// Budget used with `--generator none`.
    #[arg(long, value_parser = parse_eps)]
    pub eps: Option<f32>,
    /// Joint encoder for the zero-shot label-shift check.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ReportMode {
    TransferMatrix,
    Ablation,
    Context,
    Pca,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: ReportMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExperimentArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "gama-run")]
    pub out_dir: PathBuf,
    /// Generator seeds, comma separated. `GAMA_SEED` replaces the list with one seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Generator training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
}

/// `0.04`, `10/255` or `4 / 255`.
fn parse_eps(s: &str) -> Result<f32, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if v.is_finite() && v > 0.0 && v <= 1.0 {
        Ok(v as f32)
    } else {
        Err(format!("{s} is not in (0, 1]"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => commands::dataset(a),
        Command::TrainSurrogate(a) => commands::train_surrogate(a),
        Command::PretrainEncoder(a) => commands::pretrain_encoder(a),
        Command::BuildBank(a) => commands::build_bank(a),
        Command::TrainGenerator(a) => commands::train_generator(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
