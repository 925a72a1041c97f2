mod commands;
mod report;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser, Debug)]
#[command(name = "tsm", version, about = "Trajectory-aware shifted state-space models for online VSR")]
struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true, env = "TSM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hilbert scan orders.
    #[command(subcommand)]
    Scan(ScanCmd),
    /// Discontinuity analysis of scan-shift-scan procedures.
    #[command(subcommand)]
    Disc(DiscCmd),
    /// Trajectories and token selection.
    #[command(subcommand)]
    Traj(TrajCmd),
    /// Selective scan.
    #[command(subcommand)]
    Ssm(SsmCmd),
    /// Gradient checks.
    #[command(subcommand)]
    Grad(GradCmd),
    /// Full network.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Training losses.
    #[command(subcommand)]
    Loss(LossCmd),
}

#[derive(Subcommand, Debug)]
enum ScanCmd {
    /// Generate a scan order as JSON (and optionally SVG).
    Gen(ScanGenArgs),
    /// Check bijection, continuity and aligned-block locality of an order.
    Check(ScanCheckArgs),
}

#[derive(Subcommand, Debug)]
enum DiscCmd {
    /// Elimination report of one procedure.
    Analyze(DiscAnalyzeArgs),
    /// Rank every procedure over the four variants and a shift set.
    Search(DiscSearchArgs),
    /// Search the dihedral orientations of the four variants.
    Pin(DiscPinArgs),
}

#[derive(Subcommand, Debug)]
enum TrajCmd {
    /// Propagate trajectories and select the top-s tokens.
    Select(TrajSelectArgs),
}

#[derive(Subcommand, Debug)]
enum SsmCmd {
    /// Run a selective scan over a `[L, C]` sequence.
    Run(SsmRunArgs),
}

#[derive(Subcommand, Debug)]
enum GradCmd {
    /// Reverse pass vs central differences.
    Check(GradCheckArgs),
}

#[derive(Subcommand, Debug)]
enum ModelCmd {
    /// Super-resolve the last frame of a sequence.
    Forward(ModelForwardArgs),
    /// Parameter and MAC breakdown.
    Count(ModelCountArgs),
    /// Write a seeded random weight bundle.
    Init(ModelInitArgs),
}

#[derive(Subcommand, Debug)]
enum LossCmd {
    /// Spatial, trajectory and total loss.
    Eval(LossEvalArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Scan(ScanCmd::Gen(a)) => scan_gen(a),
        Command::Scan(ScanCmd::Check(a)) => scan_check(a),
        Command::Disc(DiscCmd::Analyze(a)) => disc_analyze(a),
        Command::Disc(DiscCmd::Search(a)) => disc_search(a),
        Command::Disc(DiscCmd::Pin(a)) => disc_pin(a),
        Command::Traj(TrajCmd::Select(a)) => traj_select(a),
        Command::Ssm(SsmCmd::Run(a)) => ssm_run(a),
        Command::Grad(GradCmd::Check(a)) => grad_check(a),
        Command::Model(ModelCmd::Forward(a)) => model_forward(a),
        Command::Model(ModelCmd::Count(a)) => model_count(a),
        Command::Model(ModelCmd::Init(a)) => model_init(a),
        Command::Loss(LossCmd::Eval(a)) => loss_eval(a),
    };
    match result {
        Ok(report) => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{}", report.to_json()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
