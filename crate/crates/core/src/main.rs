//! Command-line front end: train a source model, stream online experiments,
//! run the controlled bias study, and sweep ablation axes.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use unmix_tns::harness::{
    self, bias_trace_study, default_domains, parse_kv_file, write_bias_trace, write_sweep_summary,
    BiasTraceConfig, DataConfig, ExperimentConfig, SweepAxis,
};
use unmix_tns::normalizers::{NormKind, NormParams};
use unmix_tns::streams::Scenario;
use unmix_tns::toynet::{train_source, ToyModel, TrainConfig};

#[derive(Parser)]
#[command(name = "unmix-tns", version, about = "Test-time normalization simulator for non-i.i.d. streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source model on synthetic data and write a checkpoint.
    TrainSource(TrainSourceArgs),
    /// Stream one experiment and write a metrics trace.
    Run(RunArgs),
    /// Controlled piecewise-constant component-weight bias study.
    BiasTrace(BiasTraceArgs),
    /// Run one experiment per value of an ablation axis.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainSourceArgs {
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    input_channels: usize,
    #[arg(long, default_value_t = 4)]
    spatial: usize,
    #[arg(long, default_value_t = 400)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0.35)]
    spread: f64,
    /// Hidden block widths, comma separated.
    #[arg(long, default_value = "32,32")]
    hidden: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1234)]
    data_seed: u64,
}

/// Flags shared by `run` and `sweep`. Every flag is optional here so that a
/// config file (`--config`) can supply values; explicit flags win.
#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output path for the trace (or sweep summary).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value config file; flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    norm: Option<String>,
    /// Number of unmixing components.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Dirichlet concentration of the label stream.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Samples per Dirichlet slot (defaults to the batch size).
    #[arg(long)]
    slot_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Include real wall-clock timings in the trace (off by default so
    /// repeated runs are byte-identical).
    #[arg(long, default_value_t = false)]
    timing: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Axis to vary: delta | batch-size | k.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
}

#[derive(Args)]
struct BiasTraceArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of true mixture components.
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    spatial: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 25)]
    segment: usize,
    /// Dirichlet concentration of the segment weights; omit for an exactly
    /// uniform schedule.
    #[arg(long)]
    delta: Option<f64>,
    /// Unmixing components.
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::TrainSource(args) => cmd_train_source(args),
        Command::Run(args) => cmd_run(args),
        Command::BiasTrace(args) => cmd_bias_trace(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn cmd_train_source(args: TrainSourceArgs) -> anyhow::Result<()> {
    let hidden: Vec<usize> = args
        .hidden
        .split(',')
        .map(|t| t.trim().parse::<usize>().context("bad --hidden width"))
        .collect::<anyhow::Result<_>>()?;
    let dataset = unmix_tns::streams::synth_source(
        args.classes,
        args.input_channels,
        args.spatial,
        args.n_per_class,
        args.spread,
        args.data_seed,
    )?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        bn_momentum: 0.1,
        seed: args.seed,
    };
    let model = train_source(&dataset, &hidden, &cfg)?;
    model.save(&args.out)?;
    println!(
        "trained {} blocks on {} samples, train accuracy {:.4}; checkpoint {}",
        model.num_slots(),
        dataset.len(),
        model.train_accuracy(),
        args.out.display()
    );
    Ok(())
}

/// Resolve one optional value against the config-file map and a default.
fn resolve<T: FromStr + Clone>(
    flag: Option<T>,
    file: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(raw) => raw
            .parse::<T>()
            .map_err(|e| anyhow::anyhow!("config key `{key}`: {e}")),
        None => Ok(default),
    }
}

fn build_experiment(
    args: &ExperimentArgs,
) -> anyhow::Result<(ToyModel, ExperimentConfig, PathBuf, bool)> {
    let file = match &args.config {
        Some(path) => parse_kv_file(path)?,
        None => BTreeMap::new(),
    };
    let known = [
        "model", "out", "scenario", "norm", "k", "alpha", "tau", "delta", "batch-size",
        "slot-size", "seed",
    ];
    for key in file.keys() {
        if !known.contains(&key.as_str()) {
            bail!("config key `{key}` is not recognized (known: {})", known.join(", "));
        }
    }

    let model_path = match (&args.model, file.get("model")) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("--model is required (flag or config file)"),
    };
    let out = match (&args.out, file.get("out")) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("--out is required (flag or config file)"),
    };

    let scenario_str = resolve(
        args.scenario.clone(),
        &file,
        "scenario",
        "single".to_string(),
    )?;
    let scenario = Scenario::from_str(&scenario_str)?;
    let norm_str = resolve(args.norm.clone(), &file, "norm", "unmix".to_string())?;
    let norm = NormKind::from_str(&norm_str)?;

    let model = ToyModel::load(&model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;

    let defaults = NormParams::default();
    let batch_size = resolve(args.batch_size, &file, "batch-size", 64usize)?;
    let cfg = ExperimentConfig {
        norm,
        params: NormParams {
            components: resolve(args.k, &file, "k", defaults.components)?,
            alpha: resolve(args.alpha, &file, "alpha", defaults.alpha)?,
            tau: resolve(args.tau, &file, "tau", defaults.tau)?,
            ..defaults
        },
        stream: unmix_tns::streams::StreamConfig {
            delta: resolve(args.delta, &file, "delta", 0.1f64)?,
            slot_size: resolve(args.slot_size, &file, "slot-size", batch_size)?,
            batch_size,
            scenario,
            domains: default_domains(model.input_channels(), scenario),
            seed: resolve(args.seed, &file, "seed", 0u64)?,
        },
        data: DataConfig {
            classes: model.classes(),
            input_channels: model.input_channels(),
            spatial: model.spatial(),
            ..DataConfig::default()
        },
    };
    cfg.validate()?;
    Ok((model, cfg, out, args.timing))
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let (model, cfg, out, timing) = build_experiment(&args.experiment)?;
    let trace = harness::run_experiment(&model, &cfg)?;
    trace.save(&out, timing)?;
    println!(
        "{} on {} stream: {} batches, final cumulative error {:.4}; trace {}",
        cfg.norm,
        cfg.stream.scenario,
        trace.records.len(),
        trace.final_cumulative_error(),
        out.display()
    );
    Ok(())
}

fn cmd_bias_trace(args: BiasTraceArgs) -> anyhow::Result<()> {
    let cfg = BiasTraceConfig {
        channels: args.channels,
        components: args.components,
        batch_size: args.batch_size,
        spatial: args.spatial,
        steps: args.steps,
        segment_len: args.segment,
        schedule_delta: args.delta,
        seed: args.seed,
        params: NormParams {
            components: args.k,
            alpha: args.alpha,
            tau: args.tau,
            ..NormParams::default()
        },
    };
    let study = bias_trace_study(&cfg)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    write_bias_trace(&mut w, &study)?;
    println!(
        "bias study: {} steps, {} true components; trace {}",
        args.steps,
        args.components,
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let axis = SweepAxis::from_str(&args.axis)?;
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|t| t.trim().parse::<f64>().context("bad --values entry"))
        .collect::<anyhow::Result<_>>()?;
    let (model, cfg, out, _) = build_experiment(&args.experiment)?;
    let rows = harness::sweep(&model, &cfg, axis, &values)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
    write_sweep_summary(&mut w, axis, cfg.norm, &rows)?;
    for row in &rows {
        println!(
            "{axis}={}: final cumulative error {:.4}",
            row.value,
            row.trace.final_cumulative_error()
        );
    }
    println!("summary {}", out.display());
    Ok(())
}
