//! `aecf`: dataset generation, training runs, ablation grids and audits.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for runtime failures such as divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use aecf_core::experiment::{cmd_ablate, cmd_audit, cmd_gen_data, cmd_run, eval_csv, parse_rates, ExperimentConfig, Overrides};
use aecf_core::Error;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "aecf", version, about = "Entropy-gated multimodal fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the data seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out_dir` from the config, else `runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test-time drop rates, e.g. `0,0.3,0.5`.
    #[arg(long)]
    rates: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration end to end.
    Run(Common),
    /// Train every configured ablation with shared seeds and tabulate them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Sub-runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Calibration, subset-inversion and entropy/confidence diagnostics.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `run` or `ablate`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the synthetic splits as binary files.
    GenData(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, Error> {
    let rates = c.rates.as_deref().map(parse_rates).transpose()?;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        rates,
    };
    ExperimentConfig::load(&c.config)?.apply(&overrides)
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let dir = cfg.out_dir();
            let run = cmd_run(&cfg, &dir)?;
            print!("{}", eval_csv(&run.eval));
            println!("wrote {}", dir.display());
        }
        Command::Ablate { common, jobs } => {
            let cfg = load(&common)?;
            let dir = cfg.out_dir();
            cmd_ablate(&cfg, &dir, jobs)?;
            print!("{}", std::fs::read_to_string(dir.join("ablation.csv"))?);
            println!("wrote {}", dir.display());
        }
        Command::Audit { common, checkpoint } => {
            let cfg = load(&common)?;
            let dir = common.out.clone().unwrap_or_else(|| cfg.out_dir().join("audit"));
            let s = cmd_audit(&checkpoint, &cfg, &dir)?;
            println!(
                "ece {} classwise_ece {} inversions {} over {} subset pairs",
                s.ece, s.classwise_ece, s.total_inversions, s.pairs_audited
            );
            println!("wrote {}", dir.display());
        }
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let dir = cfg.out_dir();
            cmd_gen_data(&cfg, &dir)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
