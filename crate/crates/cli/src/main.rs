use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tubelab_cli::{cmd_demo, cmd_eval, cmd_experiment, cmd_noise_sweep, cmd_synth, cmd_train, Run};

#[derive(Parser)]
#[command(name = "tubelab", version, about = "Robust tube MPC expert, tube-guided augmentation and visuomotor imitation for a simulated multirotor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Evaluate with the full-scale episode counts.
    #[arg(long, global = true)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Offline tube synthesis; writes synthesis.json.
    Synth,
    /// One expert demonstration with images and database index.
    Demo,
    /// Train the configured method; writes policy.tlp.
    Train,
    /// Evaluate the expert, or a policy file, in every target environment.
    Eval {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// All method cells: fig4_curves.csv and table2.csv.
    Experiment,
    /// Visual corruption sweep of a trained policy.
    NoiseSweep {
        /// Defaults to OUT/policy.tlp.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match Run::from_args(cli.config.as_deref(), cli.seed, &cli.out, cli.full_scale) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Synth => cmd_synth(&run).map(|_| true),
        Command::Demo => cmd_demo(&run).map(|s| {
            println!("demonstration: {} steps, {} images", s.episode_length, s.images);
            true
        }),
        Command::Train => cmd_train(&run).map(|_| true),
        Command::Eval { policy } => cmd_eval(&run, policy.as_deref()).map(|all| {
            for (t, m) in all {
                println!("{}: success {:.1}% mean length {:.1}", t.name(), m.success_rate, m.mean_episode_length);
            }
            true
        }),
        Command::Experiment => cmd_experiment(&run).map(|o| {
            for (m, r) in &o.cells {
                if let Err(e) = r {
                    eprintln!("cell {} failed: {e}", m.name());
                }
            }
            o.all_ok
        }),
        Command::NoiseSweep { policy } => {
            let p = policy.clone().unwrap_or_else(|| run.path("policy.tlp"));
            cmd_noise_sweep(&run, &p).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
