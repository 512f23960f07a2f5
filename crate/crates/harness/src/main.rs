use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shiftlab::{detect, eval, report, stack, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "shiftlab",
    version,
    about = "Train, attack, detect and report on the MiniFreeway testbed"
)]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replaces the training seed (train-*) or the evaluation seed list (attack-eval).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for checkpoints, logs and reports.
    #[arg(long, global = true, env = "SHIFTLAB_OUT")]
    out: Option<PathBuf>,

    /// Restricts attack-eval to the given ATTACKxDEFENSE cells.
    #[arg(long, global = true)]
    cell: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    TrainVictim,
    TrainDiffusion,
    TrainAe,
    AttackEval,
    DetectEval,
    Report,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        match cli.command {
            Command::TrainVictim => cfg.victim.seed = s,
            Command::TrainDiffusion => cfg.diffusion.seed = s,
            Command::TrainAe => cfg.autoencoder.seed = s,
            _ => cfg.seeds = vec![s],
        }
    }
    let out = cli.out.unwrap_or_else(|| cfg.output.clone());
    match cli.command {
        Command::TrainVictim => println!("{}", stack::cmd_train_victim(&cfg, &out)?.display()),
        Command::TrainDiffusion => {
            println!("{}", stack::cmd_train_diffusion(&cfg, &out)?.display())
        }
        Command::TrainAe => println!("{}", stack::cmd_train_ae(&cfg, &out)?.display()),
        Command::AttackEval => {
            for r in eval::cmd_attack_eval(&cfg, &out, &cli.cell)? {
                println!(
                    "{:<34} reward {:>6.2} ± {:<5.2} dev {:>5.1}%  recon {:.3}  ssim {:.3}",
                    r.cell, r.reward.0, r.reward.1, r.deviation_pct.0, r.recon.0, r.ssim.0
                );
            }
        }
        Command::DetectEval => {
            for v in detect::cmd_detect_eval(&cfg, &out)? {
                println!(
                    "{:<34} MAD {}/{}  CUSUM {}/{}",
                    v.cell, v.mad_flagged, v.episodes, v.cusum_flagged, v.episodes
                );
            }
        }
        Command::Report => print!("{}", report::cmd_report(&cfg, &out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
