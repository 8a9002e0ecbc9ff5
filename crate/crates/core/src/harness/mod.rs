//! Experiment orchestration: online runs over non-i.i.d. streams, bias
//! measurement against oracles, metrics traces, and ablation sweeps.

pub mod bias;
pub mod config;
pub mod trace;

pub use bias::{
    bias_trace_study, compute_true_stats, tbn_bias_closed_form, write_bias_trace, BiasOracle,
    BiasStepRecord, BiasStudy, BiasTraceConfig,
};
pub use config::{default_domains, parse_kv_file, DataConfig, ExperimentConfig};
pub use trace::{MetricsTrace, TraceRecord};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::ChannelStats;
use crate::streams::{
    apply_shift_dataset, dirichlet_order, schedule_domains, BatchDomains, Scenario, SynthDataset,
};
use crate::toynet::ToyModel;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

/// Stream one experiment online and record a [`MetricsTrace`].
///
/// The synthetic test set is generated from the data config, shifted once
/// per domain, and ordered by the Dirichlet protocol. Every batch is pushed
/// through the model with the configured normalizer; the trace records the
/// batch and cumulative error and, per slot, the L2 gap between the slot's
/// current mean belief and the active domain's ground-truth feature mean.
/// In the single-domain scenario the normalizer state is re-initialized
/// (same seed) at every domain boundary.
pub fn run_experiment(model: &ToyModel, cfg: &ExperimentConfig) -> Result<MetricsTrace> {
    cfg.validate()?;
    if model.input_channels() != cfg.data.input_channels
        || model.spatial() != cfg.data.spatial
        || model.classes() != cfg.data.classes
    {
        return Err(Error::Config {
            field: "model".to_string(),
            message: format!(
                "model expects {}ch x {} spatial, {} classes; data config has {}ch x {}, {}",
                model.input_channels(),
                model.spatial(),
                model.classes(),
                cfg.data.input_channels,
                cfg.data.spatial,
                cfg.data.classes
            ),
        });
    }

    let dataset = crate::streams::synth_source(
        cfg.data.classes,
        cfg.data.input_channels,
        cfg.data.spatial,
        cfg.data.n_per_class,
        cfg.data.spread,
        cfg.data.seed,
    )?;
    let n_domains = cfg.stream.domains.len();
    let shifted: Vec<SynthDataset> = cfg
        .stream
        .domains
        .iter()
        .enumerate()
        .map(|(d, shift)| {
            apply_shift_dataset(&dataset, shift, rng::derive_seed(cfg.stream.seed, 100 + d as u64))
        })
        .collect::<Result<_>>()?;

    let oracles: Vec<Vec<ChannelStats>> = shifted
        .iter()
        .map(|ds| compute_true_stats(model, ds))
        .collect::<Result<_>>()?;
    let mixed_oracle: Option<Vec<ChannelStats>> = if cfg.stream.scenario == Scenario::Mixed {
        let refs: Vec<&SynthDataset> = shifted.iter().collect();
        Some(compute_true_stats(model, &SynthDataset::concat(&refs)?)?)
    } else {
        None
    };

    let order = dirichlet_order(
        dataset.labels(),
        dataset.classes(),
        cfg.stream.delta,
        cfg.stream.slot_size,
        rng::derive_seed(cfg.stream.seed, 1),
    )?;
    let batch_size = cfg.stream.batch_size;
    let n_batches = dataset.len() / batch_size;
    let schedule = schedule_domains(
        cfg.stream.scenario,
        n_domains,
        n_batches,
        batch_size,
        rng::derive_seed(cfg.stream.seed, 2),
    )?;

    let mut slots = model.make_slots(
        cfg.norm,
        &cfg.params,
        batch_size,
        rng::derive_seed(cfg.stream.seed, 3),
    )?;

    let mut records = Vec::with_capacity(n_batches);
    let mut wrong_total = 0usize;
    let mut seen_total = 0usize;
    let mut prev_domain: Option<usize> = None;
    for t in 0..n_batches {
        let idx = &order[t * batch_size..(t + 1) * batch_size];
        let (batch, labels, oracle): (_, _, &[ChannelStats]) = match &schedule[t] {
            BatchDomains::Whole(d) => {
                if cfg.stream.scenario == Scenario::Single && prev_domain.is_some_and(|p| p != *d)
                {
                    for (i, slot) in slots.iter_mut().enumerate() {
                        slot.reset(model.blocks()[i].src())?;
                    }
                }
                prev_domain = Some(*d);
                (
                    shifted[*d].gather(idx),
                    shifted[*d].gather_labels(idx),
                    &oracles[*d],
                )
            }
            BatchDomains::PerSample(domains) => {
                let stride = dataset.channels() * dataset.spatial();
                let mut data = Vec::with_capacity(idx.len() * stride);
                for (j, &i) in idx.iter().enumerate() {
                    data.extend_from_slice(shifted[domains[j]].sample(i));
                }
                (
                    crate::stats::FeatureBatch::new(
                        data,
                        idx.len(),
                        dataset.channels(),
                        dataset.spatial(),
                    )?,
                    dataset.gather_labels(idx),
                    mixed_oracle.as_deref().expect("mixed oracle built above"),
                )
            }
        };

        let start = Instant::now();
        let logits = model.forward_eval(&batch, &mut slots)?;
        let wall_time_us = start.elapsed().as_micros() as u64;

        let preds = logits.predictions();
        let wrong = preds.iter().zip(&labels).filter(|(p, l)| p != l).count();
        wrong_total += wrong;
        seen_total += labels.len();

        let bias_l2: Vec<f64> = slots
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                let belief = slot.belief(model.blocks()[i].src());
                belief
                    .mean
                    .iter()
                    .zip(&oracle[i].mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();

        records.push(TraceRecord {
            t,
            scenario: cfg.stream.scenario,
            norm: cfg.norm,
            batch_error: wrong as f64 / labels.len() as f64,
            cumulative_error: wrong_total as f64 / seen_total as f64,
            bias_l2,
            wall_time_us,
        });
    }

    Ok(MetricsTrace {
        config_hash: cfg.config_hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        layers: model.num_slots(),
        records,
    })
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Delta,
    BatchSize,
    Components,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Delta => "delta",
            SweepAxis::BatchSize => "batch-size",
            SweepAxis::Components => "k",
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepAxis::Delta),
            "batch-size" => Ok(SweepAxis::BatchSize),
            "k" => Ok(SweepAxis::Components),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis `{other}` (expected delta|batch-size|k)"
            ))),
        }
    }
}

/// One sweep point: the axis value and the trace it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub trace: MetricsTrace,
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: SweepAxis, value: f64) -> Result<()> {
    let as_count = |field: &'static str| -> Result<usize> {
        if value.fract() != 0.0 || value < 1.0 || value > usize::MAX as f64 {
            return Err(Error::config(field, format!("{value} is not a positive integer")));
        }
        Ok(value as usize)
    };
    match axis {
        SweepAxis::Delta => cfg.stream.delta = value,
        SweepAxis::BatchSize => {
            // Keep the slot-follows-batch coupling when the base config uses
            // it.
            let coupled = cfg.stream.slot_size == cfg.stream.batch_size;
            cfg.stream.batch_size = as_count("batch-size")?;
            if coupled {
                cfg.stream.slot_size = cfg.stream.batch_size;
            }
        }
        SweepAxis::Components => cfg.params.components = as_count("k")?,
    }
    Ok(())
}

/// Run the base experiment once per axis value, sharing seeds across
/// values.
pub fn sweep(
    model: &ToyModel,
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".to_string()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, value)?;
        let trace = run_experiment(model, &cfg)?;
        rows.push(SweepRow { value, trace });
    }
    Ok(rows)
}

/// Write the combined sweep summary: one row per axis value with the final
/// cumulative error and the mean per-layer bias over the whole run.
pub fn write_sweep_summary(
    w: &mut impl Write,
    axis: SweepAxis,
    norm: crate::normalizers::NormKind,
    rows: &[SweepRow],
) -> Result<()> {
    writeln!(w, "unmix-tns-sweep v1")?;
    writeln!(w, "axis={axis} norm={norm} points={}", rows.len())?;
    let layers = rows.first().map(|r| r.trace.layers).unwrap_or(0);
    write!(w, "columns={axis} batches cumulative_error")?;
    for i in 0..layers {
        write!(w, " mean_bias_l2_{i}")?;
    }
    writeln!(w)?;
    for row in rows {
        let n = row.trace.records.len();
        write!(
            w,
            "{:e} {} {:e}",
            row.value,
            n,
            row.trace.final_cumulative_error()
        )?;
        for b in row.trace.mean_bias_l2(0..n) {
            write!(w, " {b:e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
