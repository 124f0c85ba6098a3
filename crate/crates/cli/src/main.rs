use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tinyformer_cli::{
    cmd_ablate, cmd_dump_features, cmd_eval, cmd_flops, cmd_gen_data, cmd_gradcheck, cmd_train, load_config, CliResult,
};

#[derive(Parser)]
#[command(name = "tinyformer", version, about = "Small-object detector training and evaluation")]
struct Cli {
    /// Flat `key = value` run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes the train and eval splits of the synthetic dataset.
    GenData,
    /// Trains and writes a checkpoint plus metrics.log.
    Train,
    /// Evaluates a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the checkpoint's own eval split when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trains the baseline / +ssa / +pbm / +ssa+pbm grid.
    Ablate,
    /// Prints per-module FLOPs and parameters.
    Flops,
    /// Runs the finite-difference gradient checks.
    Gradcheck {
        /// Only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Writes neck activations of one PPM image as PGM files.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [3usize, 4, 5])]
        levels: Vec<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let stdout = io::stdout();
    let mut w = stdout.lock();
    let cfg = || load_config(cli.config.as_deref(), cli.seed);
    match cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg()?, &cli.out, &mut w),
        Cmd::Train => cmd_train(&cfg()?, &cli.out, &mut w).map(|_| ()),
        Cmd::Eval { checkpoint, data } => cmd_eval(&checkpoint, data.as_deref(), &mut w).map(|_| ()),
        Cmd::Ablate => cmd_ablate(&cfg()?, &cli.out, &mut w).map(|_| ()),
        Cmd::Flops => cmd_flops(&cfg()?, &mut w).map(|_| ()),
        Cmd::Gradcheck { filter } => cmd_gradcheck(filter.as_deref(), &mut w).map(|_| ()),
        Cmd::DumpFeatures { checkpoint, image, levels } => {
            cmd_dump_features(&checkpoint, &image, &levels, &cli.out, &mut w).map(|_| ())
        }
    }?;
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
