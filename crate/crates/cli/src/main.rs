use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use posdiff::diffusion::InitMode;
use posdiff::task::Task;

mod commands;
mod settings;

#[derive(Parser, Debug)]
#[command(name = "posdiff", version, about = "Order shuffled puzzle pieces and sequences with positional diffusion")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    task: Option<TaskArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Puzzle,
    Sequence,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Puzzle => Task::Puzzle,
            TaskArg::Sequence => Task::Sequence,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Zero,
    Gaussian,
}

impl From<InitArg> for InitMode {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Zero => InitMode::ZeroCentered,
            InitArg::Gaussian => InitMode::StandardGaussian,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Order a single image or token sequence.
    Solve(SolveArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, log and reports.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint that holds optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// train, val or test; defaults to the configured split.
    #[arg(long)]
    split: Option<String>,
    /// Replace the model by a denoiser that steers exactly to the ground truth.
    #[arg(long)]
    oracle: bool,
    /// Report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG image (puzzle) or text file with one element of token ids per line (sequence).
    #[arg(long)]
    input: PathBuf,
    /// Puzzle grid side.
    #[arg(long, default_value_t = 3)]
    grid: usize,
    /// Present the elements in a seeded random order instead of as given.
    #[arg(long)]
    shuffle: Option<u64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Export every visited state of the reverse process.
    #[arg(long)]
    frames: bool,
    /// Frame directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = settings::resolve(cli.config.as_deref(), cli.task.map(Task::from), cli.seed)?;
    match cli.command {
        Command::Gen(a) => {
            let out = a.out.ok_or_else(|| settings::usage("gen needs --out DIR"))?;
            commands::gen(&cfg, &out, a.force)
        }
        Command::Train(a) => commands::train(cfg, &a.data, &a.out, a.epochs, a.resume.as_deref(), a.force),
        Command::Eval(a) => commands::eval(
            cfg,
            &commands::EvalRequest {
                checkpoint: a.checkpoint,
                data: a.data,
                init: a.init.map(InitMode::from),
                split: a.split,
                oracle: a.oracle,
                out: a.out,
            },
        ),
        Command::Solve(a) => commands::solve(
            cfg,
            &commands::SolveRequest {
                checkpoint: a.checkpoint,
                input: a.input,
                grid: a.grid,
                shuffle: a.shuffle,
                init: a.init.map(InitMode::from),
                frames: a.frames,
                out: a.out,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<settings::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
