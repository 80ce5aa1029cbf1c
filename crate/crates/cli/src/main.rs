//! `tpl`: synthetic data, backbone pretraining, prompt tuning, evaluation,
//! ablations and feature analysis.

mod commands;
mod config;
mod schema;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use tpl_core::error::{ErrorKind, TplError};

use config::Preset;

#[derive(Parser, Debug)]
#[command(name = "tpl", version, about = "Transitive vision-language prompt learning")]
struct Cli {
    /// Print the flag schema of every subcommand as JSON and exit.
    #[arg(long)]
    help_json: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a multi-domain image dataset.
    GenData(GenDataArgs),
    /// Train a dual-encoder backbone on the source domains of one target.
    Pretrain(PretrainArgs),
    /// Tune prompts on a frozen backbone and evaluate on the held-out domain.
    Train(TrainArgs),
    /// Accuracy of a tuned model on one domain.
    Eval(EvalArgs),
    /// Every ablation arm on every held-out domain and seed.
    Ablate(AblateArgs),
    /// Metrics, 2-D embedding and figures from a feature dump.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    /// Images per (class, domain) cell.
    #[arg(long, default_value_t = 64)]
    per_cell: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by commands that resolve a run configuration.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base values for keys the config file leaves out.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Override any configuration key, e.g. `--set train.lr=1e-4`; typed
    /// flags take precedence.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out domain id (1-based); its images are excluded from pretraining.
    #[arg(long)]
    target_domain: Option<u16>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pretrained backbone directory; pretrains in-process when absent.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Held-out domain id (1-based).
    #[arg(long)]
    target_domain: Option<u16>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// joint, alternating, two_stage, cumulative or transitive.
    #[arg(long)]
    strategy: Option<String>,
    /// Schedule weights from each source domain's own distance.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    per_domain_weights: Option<bool>,
    /// Average the prompt parameters of all checkpoints.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    ensemble: Option<bool>,
    /// Average predictions with the frozen model's.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    eval_average: Option<bool>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Tuned model directory.
    #[arg(long)]
    model: PathBuf,
    /// Backbone directory the model was tuned on.
    #[arg(long)]
    backbone: PathBuf,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Domain id (1-based) to evaluate on.
    #[arg(long)]
    target_domain: u16,
    /// Overrides the setting stored with the model.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    eval_average: Option<bool>,
    /// Also write the report, with per-image predictions, here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Feature dump directory, e.g. `<train out>/seed-0/features`.
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Largest number of points given to MDS.
    #[arg(long, default_value_t = 600)]
    max_points: usize,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { code: 1, kind: "usage", message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { code: 2, kind: "data", message: m.into() }
    }

    pub fn internal(m: impl fmt::Display) -> Self {
        Self { code: 2, kind: "internal", message: m.to_string() }
    }
}

impl From<TplError> for CliError {
    fn from(e: TplError) -> Self {
        let (code, kind) = match e.kind() {
            ErrorKind::Usage => (1, "usage"),
            ErrorKind::Data => (2, "data"),
            ErrorKind::Numerical => (3, "numerical"),
        };
        Self { code, kind, message: e.to_string() }
    }
}

/// Prints to stdout; a closed pipe (`tpl ... | head`) is not an error.
pub fn emit(s: impl fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{s}");
}

fn report(e: &CliError) {
    let line = serde_json::json!({ "level": "error", "kind": e.kind, "code": e.code, "message": e.message });
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.help_json {
        let schema = schema::command_schema(&Cli::command());
        emit(serde_json::to_string_pretty(&schema).map_err(CliError::internal)?);
        return Ok(());
    }
    match cli.command {
        None => Err(CliError::usage("a subcommand is required (see --help)")),
        Some(Command::GenData(a)) => commands::gen_data(a),
        Some(Command::Pretrain(a)) => commands::pretrain(a),
        Some(Command::Train(a)) => commands::train(a),
        Some(Command::Eval(a)) => commands::eval(a),
        Some(Command::Ablate(a)) => commands::ablate(a),
        Some(Command::Analyze(a)) => commands::analyze(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report(&CliError::usage(e.to_string().trim().to_string()));
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.code)
        }
    }
}
