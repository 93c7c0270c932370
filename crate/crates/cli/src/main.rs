use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use bevalign::Result;
use bevalign_cli::config::{Overrides, RunConfig};
use bevalign_cli::{bench, commands, exit_code};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bevalign", version, about = "Seeded alignment experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sweep the neighbor count over the configured `sweep_k` list.
    #[arg(long, global = true)]
    sweep_k: bool,
    #[arg(long, global = true)]
    noise_rot_deg: Option<f64>,
    #[arg(long, global = true)]
    noise_trans_m: Option<f64>,
    /// Largest injected BEV shift, in cells.
    #[arg(long, global = true)]
    bev_shift_max: Option<u32>,
    /// Neighbors per pixel [default: 8].
    #[arg(long, global = true)]
    k_graph: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene, LiDAR cloud and per-camera depth renders.
    Simulate,
    /// Score neighbor depth under perturbed extrinsics.
    LocalalignEval,
    /// Inject a BEV shift and recover it with learnable offsets.
    GlobalalignRecover,
    /// Time the pipeline stages.
    Bench,
}

fn print<T: Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    // a closed pipe is not a failure of the command
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        noise_rot_deg: cli.noise_rot_deg,
        noise_trans_m: cli.noise_trans_m,
        bev_shift_max: cli.bev_shift_max,
        k_graph: cli.k_graph,
    });
    match cli.command {
        Command::Simulate => print(&commands::simulate(&cfg)?),
        Command::LocalalignEval => print(&commands::localalign_eval(&cfg, cli.sweep_k)?),
        Command::GlobalalignRecover => print(&commands::globalalign_recover(&cfg)?),
        Command::Bench => print(&bench::bench(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bevalign: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
