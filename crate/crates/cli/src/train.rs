//! `train` and `gbpo-demo`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use brrl_autodiff::checkpoint;
use brrl_autodiff::ParameterSet;
use brrl_rl::env::ENV_NAMES;
use brrl_rl::gbpo::{train_gbpo, GbpoConfig};
use brrl_rl::{Algo, BpoConfig, RlError, TrainingReport};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const TRAINING_CSV: &str = "training.csv";
pub const MERGED_CSV: &str = "merged.csv";

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(&name, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(&name, e))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn parse_algo(s: &str) -> CliResult<Algo> {
    match s {
        "bpo" => Ok(Algo::Bpo),
        "ppo" => Ok(Algo::Ppo),
        _ => Err(CliError::Input(format!("unknown algorithm {s:?}; expected bpo or ppo"))),
    }
}

fn save_params(dir: &Path, name: &str, params: &ParameterSet, meta: serde_json::Value) -> CliResult<String> {
    let file = format!("{name}.ckpt");
    checkpoint::save(&dir.join(&file), params, meta).map_err(|e| CliError::Failure(format!("writing {file}: {e}")))?;
    Ok(file)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// One of gridworld_5x5, chain, cartpole_lite.
    #[arg(long, default_value = "gridworld_5x5")]
    pub env: String,
    /// bpo or ppo; overrides the config file.
    #[arg(long)]
    pub algo: Option<String>,
    /// JSON file with any subset of the training configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Also run this algorithm with the same seed and write a merged CSV.
    #[arg(long)]
    pub compare: Option<String>,
    /// Policy learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

/// The configuration `train` would run, after applying flags over the file.
pub fn train_config(args: &TrainArgs, seed: Option<u64>) -> CliResult<BpoConfig> {
    let mut cfg: BpoConfig = read_config(args.config.as_deref())?;
    if let Some(a) = &args.algo {
        cfg.algo = parse_algo(a)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(n) = args.iterations {
        cfg.total_iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(dir: &Path, report: &TrainingReport, cfg: &BpoConfig, manifest: &mut RunManifest) -> CliResult<()> {
    report.write_csv(BufWriter::new(File::create(dir.join(TRAINING_CSV))?))?;
    manifest.outputs.push(TRAINING_CSV.to_string());
    let meta = serde_json::json!({ "env": report.env, "algo": cfg.algo.name(), "iterations": report.rows.len() });
    manifest.outputs.push(save_params(dir, "policy", &report.policy, meta.clone())?);
    manifest.outputs.push(save_params(dir, "value", &report.value, meta.clone())?);
    if cfg.algo == Algo::Bpo {
        manifest.outputs.push(save_params(dir, "median", &report.median, meta)?);
    }
    manifest.finish(dir)
}

/// Trains once into `dir`; a diverged run keeps its partial CSV and last parameters.
pub fn run_training(env: &str, cfg: &BpoConfig, dir: &Path) -> CliResult<TrainingReport> {
    std::fs::create_dir_all(dir)?;
    let config = serde_json::json!({ "env": env, "training": to_json(cfg) });
    let mut manifest = RunManifest::start("train", cfg.algo.name(), config, cfg.seed, TRAINING_CSV);
    match brrl_rl::train(env, cfg) {
        Ok(report) => {
            write_report(dir, &report, cfg, &mut manifest)?;
            Ok(report)
        }
        Err(RlError::Diverged { iteration, partial }) => {
            write_report(dir, &partial, cfg, &mut manifest)?;
            Err(CliError::Failure(format!("training diverged at iteration {iteration}; partial results kept in {}", dir.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn summarize(report: &TrainingReport) {
    let Some(last) = report.final_row() else { return };
    let exact = last.exact_return.map_or(String::new(), |e| format!(" exact {e:.4}"));
    let opt = report.optimal_return.map_or(String::new(), |o| format!(" optimum {o:.4}"));
    println!(
        "{} on {}: {} iterations, final episode return {:.4}{exact}{opt}",
        report.algo.name(),
        report.env,
        report.rows.len(),
        last.episode_return
    );
}

/// Concatenates per-algorithm logs under one header with a leading `algo` column.
fn write_merged(path: &Path, reports: &[&TrainingReport]) -> CliResult<()> {
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        let text = String::from_utf8(buf).expect("csv is utf-8");
        for (j, line) in text.lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    out.push_str("algo,");
                    out.push_str(line);
                    out.push('\n');
                }
                continue;
            }
            out.push_str(r.algo.name());
            out.push(',');
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> CliResult<()> {
    if !ENV_NAMES.contains(&args.env.as_str()) {
        return Err(CliError::Input(format!("unknown environment {:?}; expected one of {}", args.env, ENV_NAMES.join(", "))));
    }
    let cfg = train_config(args, seed)?;
    let Some(other) = &args.compare else {
        let report = run_training(&args.env, &cfg, &args.out)?;
        summarize(&report);
        return Ok(());
    };
    let other = parse_algo(other)?;
    if other == cfg.algo {
        return Err(CliError::Input(format!("--compare {} repeats --algo", other.name())));
    }
    let mut reports = Vec::new();
    for algo in [cfg.algo, other] {
        let c = BpoConfig { algo, ..cfg.clone() };
        let report = run_training(&args.env, &c, &args.out.join(algo.name()))?;
        summarize(&report);
        reports.push(report);
    }
    write_merged(&args.out.join(MERGED_CSV), &reports.iter().collect::<Vec<_>>())
}

#[derive(Debug, Args)]
pub struct GbpoArgs {
    /// JSON file with any subset of the group training fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value = "runs/gbpo")]
    pub out: PathBuf,
}

pub const GROUPS_CSV: &str = "groups.csv";
pub const ITERATIONS_CSV: &str = "iterations.csv";

pub fn cmd_gbpo(args: &GbpoArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg: GbpoConfig = read_config(args.config.as_deref())?;
    if let Some(g) = args.group_size {
        cfg.group_size = g;
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.group_size < 2 {
        return Err(CliError::Input(format!("group size must be at least 2, got {}", cfg.group_size)));
    }
    let report = train_gbpo(&cfg)?;
    let dir = &args.out;
    std::fs::create_dir_all(dir)?;
    let mut manifest = RunManifest::start("gbpo-demo", "gbpo", to_json(&cfg), cfg.seed, ITERATIONS_CSV);
    report.write_group_csv(BufWriter::new(File::create(dir.join(GROUPS_CSV))?))?;
    report.write_iteration_csv(BufWriter::new(File::create(dir.join(ITERATIONS_CSV))?))?;
    manifest.outputs.extend([GROUPS_CSV.to_string(), ITERATIONS_CSV.to_string()]);
    manifest.outputs.push(save_params(dir, "model", &report.model.params, serde_json::json!({ "vocab": cfg.vocab, "seq_len": cfg.seq_len }))?);
    manifest.finish(dir)?;
    let (first, last) = report.window_means(20);
    println!("gbpo: {} iterations, mean reward first window {first:.4}, last window {last:.4}", report.iterations.len());
    Ok(())
}
