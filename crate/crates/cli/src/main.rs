//! `burstmtl` command-line harness.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use burstmtl::dataio::{export_samples, generate_synthetic, read_manifest, Split};
use burstmtl::harness::{
    collect_report, parse_config, parse_config_str, parse_preset_list, run_experiment, run_grid,
    split_samples, ExperimentConfig,
};
use burstmtl::trainer::{evaluate, load_checkpoint, predict_split, predictions_to_csv};

#[derive(Parser)]
#[command(
    name = "burstmtl",
    version,
    about = "Multitask vocal-burst affect toolkit"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Random seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` config override, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (VBF1 features + manifest + config).
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        min_frames: usize,
        #[arg(long, default_value_t = 12)]
        max_frames: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train both stages and write config, history, metrics and checkpoint.
    Train,
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to evaluate on; defaults to the config's data.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Write per-sample predictions as `id,task,dim_index,value` CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Run a preset grid and write the results table.
    Ablate {
        /// Comma-separated preset labels (e.g. `0/5,-Two`) or `all`.
        #[arg(long, default_value = "all")]
        presets: String,
        /// Carry earlier blocks' winning deltas into later presets.
        #[arg(long)]
        chain: bool,
    },
    /// Rebuild the results table from run directories.
    Report {
        /// Directory whose subdirectories hold `metrics.json`.
        #[arg(long)]
        runs: PathBuf,
    },
}

impl Common {
    /// Config from `--config` (or an empty document), with `--seed`, `--out`
    /// and then the `--override` list applied.
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!(
                "out_dir={}",
                toml_string(&out.display().to_string())
            ));
        }
        overrides.extend(self.overrides.iter().cloned());
        let cfg = match &self.config {
            Some(path) => parse_config(path, &overrides),
            None => parse_config_str("", None, &overrides),
        };
        cfg.context("reading experiment config")
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split `{other}` (expected train, val or test)"),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(
    common: &Common,
    n: usize,
    dim: usize,
    min_frames: usize,
    max_frames: usize,
    noise: f64,
) -> Result<()> {
    let out = common.out.as_ref().context("synth needs --out")?;
    let seed = common.seed.unwrap_or(0);
    let overrides = [
        format!("seed={seed}"),
        format!("data.n_samples={n}"),
        format!("data.dim={dim}"),
        format!("data.min_frames={min_frames}"),
        format!("data.max_frames={max_frames}"),
        format!("data.noise_level={noise:?}"),
    ];
    let cfg = parse_config_str("", None, &overrides)?;
    let samples = generate_synthetic(&cfg.synth_spec())?;
    let manifest = export_samples(&samples, out)?;
    let run_dir = fs::canonicalize(out)?.join("run");
    let config = format!(
        "seed = {seed}\nout_dir = {}\n\n[data]\nsource = \"manifest\"\nmanifest = \"manifest.csv\"\n",
        toml_string(&run_dir.display().to_string())
    );
    write_file(&out.join("config.toml"), &config)?;
    println!("wrote {} samples to {}", samples.len(), manifest.display());
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.experiment()?;
    let out = cfg.out_dir.clone();
    let outcome = run_experiment(&cfg, None, Some(&out))?;
    print!("{}", outcome.summary.val.to_flat_text());
    println!("run written to {}", out.display());
    Ok(())
}

fn evaluate_cmd(
    common: &Common,
    checkpoint: &Path,
    manifest: Option<&Path>,
    split: &str,
    batch_size: usize,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let split = parse_split(split)?;
    let samples = match manifest {
        Some(m) => read_manifest(m)?,
        None => common.experiment()?.load_samples()?,
    };
    let samples = split_samples(&samples, split);
    let report = evaluate(&state, &samples, batch_size)?;
    let text = report.to_flat_text();
    print!("{text}");
    if let Some(out) = &common.out {
        write_file(out, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn predict(common: &Common, checkpoint: &Path, manifest: &Path, batch_size: usize) -> Result<()> {
    let out = common.out.as_ref().context("predict needs --out")?;
    let state = load_checkpoint(checkpoint)?;
    let samples = read_manifest(manifest)?;
    let preds = predict_split(&state, &samples, batch_size)?;
    write_file(out, &predictions_to_csv(&preds))?;
    println!(
        "wrote predictions for {} samples to {}",
        preds.ids.len(),
        out.display()
    );
    Ok(())
}

fn ablate(common: &Common, presets: &str, chain: bool) -> Result<()> {
    let cfg = common.experiment()?;
    let presets = parse_preset_list(presets)?;
    let report = run_grid(&presets, &cfg, chain, Some(&cfg.out_dir))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn report(common: &Common, runs: &Path) -> Result<()> {
    let table = collect_report(runs)?;
    table.write(common.out.as_deref().unwrap_or(runs))?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    match &cli.command {
        Command::Synth {
            n,
            dim,
            min_frames,
            max_frames,
            noise,
        } => synth(c, *n, *dim, *min_frames, *max_frames, *noise),
        Command::Train => train(c),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            batch_size,
        } => evaluate_cmd(c, checkpoint, manifest.as_deref(), split, *batch_size),
        Command::Predict {
            checkpoint,
            manifest,
            batch_size,
        } => predict(c, checkpoint, manifest, *batch_size),
        Command::Ablate { presets, chain } => ablate(c, presets, *chain),
        Command::Report { runs } => report(c, runs),
    }
}
