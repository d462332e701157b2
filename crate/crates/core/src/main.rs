use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use chunkppo::cli::{self, TrainArgs};
use chunkppo::trainer::TrainError;
use chunkppo::{Ablation, Task};

/// Action-chunked PPO with self behavior cloning on sparse-reward toy tasks.
#[derive(Parser)]
#[command(name = "chunkppo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write JSON-lines trajectories.
    CollectDemos {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Uniform action noise amplitude.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 4)]
        horizon: usize,
    },
    /// Train a policy; writes config.txt, metrics.csv, checkpoint.bin,
    /// final_eval.json and buffer.jsonl into --out-dir.
    Train {
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `desk` (default) or `paper`.
        #[arg(long)]
        preset: Option<String>,
        /// chunking_off, buffer_frozen, buffer_unfiltered or fixed_beta_1to1.
        #[arg(long = "ablation")]
        ablations: Vec<Ablation>,
        /// Extra `key=value` overrides applied last.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: u64,
        /// Seed demonstrations (JSON lines) instead of collecting them.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint with the mean policy; prints the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long, default_value_t = 128)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smooth the success-rate curve of a metrics CSV for plotting.
    PlotData {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        window: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CollectDemos {
            task,
            n,
            seed,
            out,
            noise,
            horizon,
        } => {
            let summary = cli::cmd_collect_demos(task, n, seed, noise, horizon, &out)?;
            cli::print_demo_summary(task, &summary, &out, std::io::stdout())?;
        }
        Command::Train {
            config,
            preset,
            ablations,
            overrides,
            seed,
            demos,
            out_dir,
        } => {
            let args = TrainArgs {
                config_path: config,
                preset,
                ablations,
                overrides,
                seed,
                demos_path: demos,
                out_dir,
            };
            println!("{}", cli::resolve_config(&args)?.to_text());
            let outcome = cli::cmd_train(&args)?;
            let e = &outcome.final_eval;
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
            println!(
                "final: acc {:.3} len_p10 {} avg_shortest10 {}",
                e.acc,
                fmt(e.len_p10),
                fmt(e.avg_shortest10)
            );
        }
        Command::Eval {
            checkpoint,
            task,
            episodes,
            seed,
            out,
        } => {
            let report = cli::cmd_eval(&checkpoint, task, episodes, seed)?;
            let json = cli::report_json(&report)?;
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => print!("{json}"),
            }
        }
        Command::PlotData { metrics, out, window } => {
            let n = cli::cmd_plot_data(&metrics, &out, window)?;
            println!("wrote {n} points to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Diverged { .. })) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
