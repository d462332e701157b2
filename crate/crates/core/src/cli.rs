//! Command implementations behind the `chunkppo` binary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::{Ablation, TrainConfig};
use crate::demobuffer::{read_trajectories, write_trajectories};
use crate::envs::Task;
use crate::policy::Checkpoint;
use crate::rollout::collect_expert_demos;
use crate::trainer::{evaluate, write_metrics_csv, EvalReport, TrainOutcome, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSummary {
    pub requested: usize,
    pub successes: usize,
    pub mean_len: Option<f64>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
}

pub fn cmd_collect_demos(
    task: Task,
    n: usize,
    seed: u64,
    noise: f64,
    horizon: usize,
    out: &Path,
) -> Result<DemoSummary> {
    let demos = collect_expert_demos(task, n, seed, noise, horizon)?;
    let file = File::create(out).with_context(|| format!("cannot write {}", out.display()))?;
    write_trajectories(BufWriter::new(file), &demos)?;
    let lens: Vec<usize> = demos.iter().map(|t| t.len()).collect();
    let summary = DemoSummary {
        requested: n,
        successes: demos.iter().filter(|t| t.success).count(),
        mean_len: (!lens.is_empty()).then(|| lens.iter().sum::<usize>() as f64 / lens.len() as f64),
        min_len: lens.iter().copied().min(),
        max_len: lens.iter().copied().max(),
    };
    if n == 0 {
        log::warn!("collected zero demonstrations; {} is empty", out.display());
    }
    Ok(summary)
}

/// Everything `train` needs to resolve a configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config_path: Option<PathBuf>,
    pub preset: Option<String>,
    pub ablations: Vec<Ablation>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub demos_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// preset -> config file -> ablations -> `key=value` overrides -> seed.
pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.preset {
        Some(p) => TrainConfig::preset(p)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &args.config_path {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        cfg.merge_text(&text)?;
    }
    for a in &args.ablations {
        cfg.apply_ablation(*a);
    }
    let overrides = args.overrides.join("\n");
    cfg.merge_text(&overrides)?;
    cfg.seed = args.seed;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = resolve_config(args)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    fs::write(args.out_dir.join("config.txt"), cfg.to_text())?;
    log::info!("resolved configuration:\n{}", cfg.to_text());
    let trainer = match &args.demos_path {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
            let mut demos = read_trajectories(BufReader::new(file), None)?;
            if demos.iter().any(|t| t.task != cfg.task) {
                bail!("demonstrations in {} are not all for {}", path.display(), cfg.task);
            }
            demos.truncate(cfg.n_demos);
            Trainer::with_demos(cfg.clone(), demos)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    let outcome = trainer.run()?;
    write_metrics_csv(
        BufWriter::new(File::create(args.out_dir.join("metrics.csv"))?),
        &outcome.metrics,
    )?;
    let ckpt = Checkpoint {
        task: cfg.task.name().to_string(),
        policy: outcome.policy.clone(),
        critic: outcome.critic.clone(),
    };
    fs::write(args.out_dir.join("checkpoint.bin"), ckpt.to_bytes())?;
    fs::write(args.out_dir.join("final_eval.json"), report_json(&outcome.final_eval)?)?;
    if let Some(buffer) = &outcome.buffer {
        buffer.write_jsonl(BufWriter::new(File::create(args.out_dir.join("buffer.jsonl"))?))?;
    }
    Ok(outcome)
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn cmd_eval(checkpoint: &Path, task: Option<Task>, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        bail!("episodes must be at least 1");
    }
    let bytes = fs::read(checkpoint).with_context(|| format!("cannot read {}", checkpoint.display()))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let task = match task {
        Some(t) => t,
        None => ckpt.task.parse()?,
    };
    Ok(evaluate(&ckpt.policy, task, episodes, seed)?)
}

/// Trailing moving average; the first `window - 1` points average what is available.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &x) in series.iter().enumerate() {
        sum += x;
        if i >= w {
            sum -= series[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Reads a metrics CSV and writes `update_idx,env_steps,eval_acc,smoothed_acc`
/// for every evaluated row. Returns the number of points written.
pub fn cmd_plot_data(metrics_csv: &Path, out: &Path, window: usize) -> Result<usize> {
    let mut rdr =
        csv::Reader::from_path(metrics_csv).with_context(|| format!("cannot read {}", metrics_csv.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("metrics file lacks column `{name}`"))
    };
    let (ui, ei, ai) = (col("update_idx")?, col("env_steps")?, col("eval_acc")?);
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let acc = rec.get(ai).unwrap_or("");
        if acc.is_empty() {
            continue;
        }
        points.push((rec[ui].to_string(), rec[ei].to_string(), acc.parse::<f64>()?));
    }
    let accs: Vec<f64> = points.iter().map(|p| p.2).collect();
    let smoothed = smooth(&accs, window);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out)?));
    w.write_record(["update_idx", "env_steps", "eval_acc", "smoothed_acc"])?;
    for ((u, e, a), s) in points.iter().zip(&smoothed) {
        w.write_record([u.clone(), e.clone(), a.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(points.len())
}

pub fn print_demo_summary(task: Task, s: &DemoSummary, out: &Path, mut w: impl Write) -> Result<()> {
    writeln!(w, "task: {task}")?;
    writeln!(w, "successes: {}/{}", s.successes, s.requested)?;
    match (s.mean_len, s.min_len, s.max_len) {
        (Some(mean), Some(min), Some(max)) => writeln!(w, "length: mean {mean:.2} min {min} max {max}")?,
        _ => writeln!(w, "length: -")?,
    }
    writeln!(w, "wrote {}", out.display())?;
    Ok(())
}
