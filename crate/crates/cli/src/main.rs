mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gbun::booster::ModeChoice;
use gbun::collective::TransportKind;
use gbun::dataset::PartitionStrategy;
use gbun::GbunError;

/// Gradient boosting over untrained random networks.
#[derive(Debug, Parser)]
#[command(name = "gbun", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write it to a file, logging one line per round.
    Train(TrainArgs),
    /// Score a dataset with a trained model.
    Predict(PredictArgs),
    /// Compute a metric from a predictions file and labelled data.
    Eval(EvalArgs),
    /// Print measured or analytic communication volume per round.
    CommReport(CommReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    /// All workers in this process.
    Standalone,
    /// Serve the reduction relay and train as worker 0.
    Coordinator,
    /// Train as one worker of a distributed group.
    Worker,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training data in libsvm format (optionally gzipped).
    #[arg(long)]
    data: String,
    /// Validation data, scored every --eval-every rounds.
    #[arg(long)]
    valid: Option<String>,
    /// binary:logistic, multi:softmax or reg:squared.
    #[arg(long, default_value = "binary:logistic")]
    objective: String,
    /// Output neurons per round.
    #[arg(long, default_value_t = 64)]
    k: usize,
    /// Boosting rounds.
    #[arg(long, default_value_t = 300)]
    rounds: u32,
    /// Shrinkage applied to every round.
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    /// Ridge on the per-round scores.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Where to write the model.
    #[arg(long)]
    model: String,
    /// Worker count in standalone mode.
    #[arg(long, default_value_t = 1)]
    partitions: usize,
    /// Transport between standalone workers: inprocess or tcp (localhost).
    #[arg(long, default_value = "inprocess")]
    transport: TransportKind,
    /// How rows are split between workers: contiguous or round_robin.
    #[arg(long, default_value = "contiguous")]
    partition_strategy: PartitionStrategy,
    /// Forward batches per pass.
    #[arg(long, default_value_t = 1)]
    batches: usize,
    /// Weight generation: auto, dense or hashed.
    #[arg(long, default_value = "auto")]
    mode: ModeChoice,
    /// Fraction of dense weights set to zero.
    #[arg(long, default_value_t = 0.9)]
    sparsify: f64,
    /// Base seed of dense weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report the validation metric every this many rounds; 0 disables it.
    #[arg(long, default_value_t = 1)]
    eval_every: u32,
    /// Validation metric (auc, map, logloss, rmse); defaults per objective.
    #[arg(long)]
    metric: Option<String>,
    /// Class count for multi:softmax; inferred from the labels if omitted.
    #[arg(long)]
    num_class: Option<usize>,
    /// Input width; inferred from the data if omitted.
    #[arg(long)]
    num_features: Option<usize>,
    #[arg(long, value_enum, default_value_t = Role::Standalone)]
    role: Role,
    /// Coordinator address: where to listen (coordinator) or connect (worker).
    #[arg(long)]
    coordinator: Option<String>,
    /// Number of workers in a distributed group.
    #[arg(long)]
    world_size: Option<usize>,
    /// This worker's rank, 1 to world-size - 1 (the coordinator is rank 0).
    #[arg(long)]
    rank: Option<usize>,
    /// Seconds to wait on peers before failing.
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Write the per-round communication ledger as JSON.
    #[arg(long)]
    ledger: Option<String>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: String,
    /// Output file; standard output if omitted.
    #[arg(long)]
    output: Option<String>,
    /// Emit probabilities (sigmoid or softmax) instead of raw scores.
    #[arg(long)]
    probabilities: bool,
    /// Forward batches per pass.
    #[arg(long, default_value_t = 1)]
    batches: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions, one tab-separated line per sample.
    #[arg(long)]
    predictions: String,
    /// Labelled data in libsvm format, in the same sample order.
    #[arg(long)]
    data: String,
    /// auc, map, logloss or rmse.
    #[arg(long)]
    metric: String,
}

#[derive(Debug, Args)]
struct CommReportArgs {
    /// Ledger written by `train --ledger`.
    #[arg(long, conflicts_with = "analytic", required_unless_present = "analytic")]
    ledger: Option<String>,
    /// Predicted volume for K output neurons, C classes and S workers.
    #[arg(long, num_args = 3, value_names = ["K", "C", "S"])]
    analytic: Option<Vec<usize>>,
}

/// Failures mapped to the documented exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(GbunError),
}

impl From<GbunError> for CliError {
    fn from(e: GbunError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                GbunError::Config(_) | GbunError::UnknownStrategy { .. } => 1,
                GbunError::Parse { .. }
                | GbunError::Data(_)
                | GbunError::Model(_)
                | GbunError::ModelVersion { .. }
                | GbunError::Io(_) => 2,
                GbunError::Numeric(_) | GbunError::Solver { .. } => 3,
                GbunError::Network(_) | GbunError::Protocol(_) => 4,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GBUN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Predict(args) => commands::predict(args),
        Command::Eval(args) => commands::eval(args),
        Command::CommReport(args) => commands::comm_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
