use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcroute::cli::{self as cmd, RolloutKind};
use dcroute::Result;

#[derive(Parser)]
#[command(name = "dcroute", version, about = "Step-level device/cloud router: simulate, train, evaluate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; the bundled reference config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true, env = "DCROUTE_SEED")]
    seed: Option<u64>,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "DCROUTE_JOBS")]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    DeviceOnly,
    CloudOnly,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a pure or random policy on the training tasks.
    Rollout {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Cloud probability for --mode random.
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select difficulty-gap tasks, build replay labels, train the IL router.
    TrainIl {
        /// Directory with device_only.jsonl and cloud_only.jsonl.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a router with grouped preference labels.
    TrainRl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate baselines and routers on the held-out tasks.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay device actions along cloud trajectories.
    Analyze {
        /// cloud_only.jsonl, or a directory containing it.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cloud-usage vs success curves.
    Sweep {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage end to end into one run directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.common.jobs {
        cmd::set_jobs(j)?;
    }
    let cfg = cmd::resolve_config(cli.common.config.as_deref(), cli.common.seed)?;
    match cli.command {
        Command::Rollout { mode, p, out } => {
            let kind = match mode {
                Mode::DeviceOnly => RolloutKind::DeviceOnly,
                Mode::CloudOnly => RolloutKind::CloudOnly,
                Mode::Random => RolloutKind::Random(p),
            };
            cmd::cmd_rollout(&cfg, kind, &out)?;
            println!("wrote {}", out.display());
        }
        Command::TrainIl { trajectories, out } => {
            cmd::cmd_train_il(&cfg, trajectories.as_deref(), &out)?;
            println!("wrote {}", out.join("checkpoints/il.ckpt").display());
        }
        Command::TrainRl { checkpoint, out } => {
            cmd::cmd_train_rl(&cfg, &checkpoint, &out)?;
            println!("wrote {}", out.join("checkpoints/rl.ckpt").display());
        }
        Command::Eval { checkpoints, out } => {
            for r in cmd::cmd_eval(&cfg, &checkpoints, &out)? {
                print_report(&r);
            }
        }
        Command::Analyze { trajectories, out } => {
            let a = cmd::cmd_analyze(&cfg, trajectories.as_deref(), &out)?;
            println!(
                "{} steps, device matches cloud on {:.1}%",
                a.steps,
                100.0 * a.match_rate_overall
            );
        }
        Command::Sweep { checkpoints, out } => {
            let pts = cmd::cmd_sweep(&cfg, &checkpoints, &out)?;
            println!("{} points -> {}", pts.len(), out.join("reports/pareto.csv").display());
        }
        Command::Pipeline { out } => {
            let s = cmd::cmd_pipeline(&cfg, &out)?;
            for r in &s.reports {
                print_report(r);
            }
        }
    }
    Ok(())
}

fn print_report(r: &dcroute::eval::EvalReport) {
    println!(
        "{:<14} success {:.3} (sd {:.3})  cloud calls {:.2}  cloud share {:.1}%",
        r.method,
        r.success_rate,
        r.success_std,
        r.mean_cloud_calls,
        100.0 * r.cloud_step_fraction
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 5 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
