use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use onellm::config::RunConfig;
use onellm::run::{Axis, Runner};
use onellm::Result;
use onellm_core::pipeline::{EvalTask, StageId};

#[derive(Parser)]
#[command(name = "onellm", version, about = "Desk-scale multimodal alignment: data, staged training, evaluation, ablations")]
struct Cli {
    /// Run configuration (TOML); built-in desk defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Less output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes one training manifest per modality.
    GenerateData,
    /// Trains one stage from its prerequisite checkpoint.
    Train {
        #[arg(long, value_parser = parse::<StageId>, value_name = "I|II|III|instruct")]
        stage: StageId,
    },
    /// Scores a checkpoint on the held-out split.
    Eval {
        #[arg(long, value_parser = parse::<StageId>, default_value = "instruct", value_name = "I|II|III|instruct")]
        stage: StageId,
        /// Scores this file instead of the stage checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Repeatable; defaults to the configured tasks.
        #[arg(long, value_parser = parse::<EvalTask>, value_name = "caption-exact-match|qa-token-accuracy|perplexity")]
        task: Vec<EvalTask>,
    },
    /// Runs one ablation sweep from the stage-I checkpoint.
    Ablate {
        #[arg(long, value_parser = parse::<Axis>, value_name = "mode|init|experts|router|encoder|replay")]
        axis: Axis,
    },
}

fn parse<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.io.run_dir = o;
    }
    let mut runner = Runner::new(cfg)?;
    runner.verbose = !cli.quiet;
    match cli.command {
        Command::GenerateData => {
            for (m, path, hash) in runner.generate_data()? {
                println!("{m}\t{}\t{hash:016x}", path.display());
            }
        }
        Command::Train { stage } => {
            let s = runner.train(stage)?;
            print!("{}", s.table().render());
        }
        Command::Eval { stage, checkpoint, task } => {
            let tasks = if task.is_empty() { runner.cfg.eval.tasks.clone() } else { task };
            let s = match checkpoint {
                Some(p) => runner.eval_checkpoint(&p, &tasks)?,
                None => runner.eval(stage, &tasks)?,
            };
            print!("{}", s.table().render());
        }
        Command::Ablate { axis } => {
            let s = runner.ablate(axis)?;
            print!("{}", s.table().render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
