mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Paratope and epitope prediction with sliding attention between chains.
#[derive(Debug, Parser)]
#[command(name = "abconformer", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Config file (flat JSON object); flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for initialization, shuffling and synthetic data
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Label interface residues of structure files (heavy atoms closer than 4 Å)
    Label(commands::LabelArgs),
    /// Assign records to cluster-stratified folds
    Folds(commands::FoldsArgs),
    /// Write one-hot context features and a manifest pointing at them
    Encode(commands::EncodeArgs),
    /// Train a model, one fold or all folds
    Train(commands::TrainArgs),
    /// Antibody-specific paratope and epitope prediction
    Predict(commands::PredictArgs),
    /// Antigen-only epitope prediction
    PanEpitope(commands::PanEpitopeArgs),
    /// Metrics of saved predictions against manifest labels
    Evaluate(commands::EvaluateArgs),
    /// Binary metrics of saved predictions over a threshold grid
    Sweep(commands::SweepArgs),
    /// Write final-step sliding attention maps
    ExportAttn(commands::ExportAttnArgs),
    /// Compare analytic gradients with central finite differences
    GradCheck(commands::GradCheckArgs),
}

fn exit_code(err: &commands::Failure) -> u8 {
    use abconformer::Error;
    match err {
        commands::Failure::Usage(_) => 1,
        commands::Failure::Check(_) => 3,
        commands::Failure::Lib(Error::Config(_)) => 1,
        commands::Failure::Lib(e) if e.is_numerical() => 3,
        commands::Failure::Lib(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.global.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
            .expect("thread pool is configured once");
    }
    let name = commands::name(&cli.command);
    match commands::run(cli.command, &cli.global) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("abconformer {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
