//! Bias measurement against ground-truth oracles.
//!
//! Two instruments live here. `compute_true_stats` records the exact
//! per-channel moments entering each normalization slot over a full frozen
//! pass of a dataset — the reference mean every slot's belief is compared
//! against during a run. `bias_trace_study` is the controlled experiment:
//! features are drawn directly from a known Gaussian mixture whose
//! component weights follow a piecewise-constant schedule, so the measured
//! batch-statistics bias can be checked against its closed form
//! `mu* - sum_k h_t(k) mu*_k`, and the unmixing layer's shrinking bias can
//! be watched on the same stream.

use crate::error::{Error, Result};
use crate::normalizers::{init_unmix, NormParams, SourceStats};
use crate::rng;
use crate::stats::{
    batch_stats, mixture_moments, momentum_lambda, uniform_weights, ChannelStats, FeatureBatch,
};
use crate::streams::SynthDataset;
use crate::toynet::ToyModel;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;

/// Ground truth for the controlled bias study: a K'-component Gaussian
/// mixture per channel and the per-step component weights of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasOracle {
    /// Mean of the uniform mixture, length `C` (the unbiased reference).
    pub true_mean: Vec<f64>,
    /// `K' x C` component means.
    pub component_means: Vec<f64>,
    /// `K' x C` component variances.
    pub component_vars: Vec<f64>,
    pub components: usize,
    pub channels: usize,
    /// Per-step weights `h_t(k)`, each row summing to one.
    pub schedule: Vec<Vec<f64>>,
}

impl BiasOracle {
    pub fn new(
        component_means: Vec<f64>,
        component_vars: Vec<f64>,
        components: usize,
        channels: usize,
        schedule: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let uniform = mixture_moments(
            &component_means,
            &component_vars,
            components,
            channels,
            &uniform_weights(components),
        )?;
        for (t, row) in schedule.iter().enumerate() {
            if row.len() != components {
                return Err(Error::ShapeMismatch(format!(
                    "schedule row {t} has {} weights, expected {components}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > crate::stats::WEIGHT_SUM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "schedule row {t} sums to {sum}"
                )));
            }
        }
        Ok(Self {
            true_mean: uniform.mean,
            component_means,
            component_vars,
            components,
            channels,
            schedule,
        })
    }

    pub fn steps(&self) -> usize {
        self.schedule.len()
    }

    /// Moments of the step-`t` mixture (weights `h_t`), used for standard
    /// errors of batch means drawn at step `t`.
    pub fn step_mixture(&self, t: usize) -> Result<ChannelStats> {
        mixture_moments(
            &self.component_means,
            &self.component_vars,
            self.components,
            self.channels,
            &self.schedule[t],
        )
    }

    /// Variance of the per-channel batch mean at step `t` for batches of
    /// `batch_size` instances with `spatial` draws each. An instance keeps
    /// one component for all its spatial draws, so the between-component
    /// variance averages over instances only:
    /// `(var_between + var_within / L) / B`.
    pub fn batch_mean_variance(
        &self,
        t: usize,
        batch_size: usize,
        spatial: usize,
    ) -> Result<Vec<f64>> {
        if t >= self.schedule.len() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside schedule of length {}",
                self.schedule.len()
            )));
        }
        let h = &self.schedule[t];
        let mut out = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut mean = 0.0;
            let mut mean2 = 0.0;
            let mut within = 0.0;
            for k in 0..self.components {
                let mu = self.component_means[k * self.channels + c];
                mean += h[k] * mu;
                mean2 += h[k] * mu * mu;
                within += h[k] * self.component_vars[k * self.channels + c];
            }
            let between = (mean2 - mean * mean).max(0.0);
            out.push((between + within / spatial as f64) / batch_size as f64);
        }
        Ok(out)
    }
}

/// Closed-form expected bias of batch-statistics normalization at step `t`:
/// `mu* - sum_k h_t(k) mu*_k` per channel. Uniform weights give exactly
/// zero.
pub fn tbn_bias_closed_form(oracle: &BiasOracle, t: usize) -> Result<Vec<f64>> {
    if t >= oracle.schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside schedule of length {}",
            oracle.schedule.len()
        )));
    }
    let h = &oracle.schedule[t];
    let mut bias = oracle.true_mean.clone();
    for c in 0..oracle.channels {
        let mut weighted = 0.0;
        for k in 0..oracle.components {
            weighted += h[k] * oracle.component_means[k * oracle.channels + c];
        }
        bias[c] -= weighted;
    }
    Ok(bias)
}

/// One frozen full pass of a dataset through the model, recording the exact
/// per-channel moments entering each normalization slot. Each slot is
/// normalized with those same full-pass moments before the features flow
/// on, so layer `i+1` sees what it would see under unbiased
/// batch-statistics normalization. Deterministic, and invariant under
/// duplication or reordering of the dataset.
pub fn compute_true_stats(model: &ToyModel, dataset: &SynthDataset) -> Result<Vec<ChannelStats>> {
    let mut recorded: Vec<ChannelStats> = Vec::with_capacity(model.num_slots());
    let batch = dataset.as_batch();
    model.forward_with(&batch, |_, pre, src| {
        let stats = batch_stats(&pre);
        let out = crate::normalizers::tbn_forward(&pre, &src.gamma, &src.beta, crate::normalizers::DEFAULT_EPS)?;
        recorded.push(stats);
        Ok(out)
    })?;
    Ok(recorded)
}

/// Parameters of the controlled bias study.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTraceConfig {
    pub channels: usize,
    /// Number of true mixture components K'.
    pub components: usize,
    pub batch_size: usize,
    /// Spatial draws per instance (instance variance stays informative).
    pub spatial: usize,
    pub steps: usize,
    /// Steps per constant-weight segment.
    pub segment_len: usize,
    /// Dirichlet concentration of the per-segment weights; `None` pins the
    /// schedule to exactly uniform weights.
    pub schedule_delta: Option<f64>,
    pub seed: u64,
    /// Unmixing layer hyperparameters used on the same stream.
    pub params: NormParams,
}

impl Default for BiasTraceConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            components: 3,
            batch_size: 64,
            spatial: 8,
            steps: 200,
            segment_len: 25,
            schedule_delta: Some(0.05),
            seed: 0,
            params: NormParams::default(),
        }
    }
}

impl BiasTraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        if self.components == 0 {
            return Err(Error::config("components", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch-size", "must be >= 1"));
        }
        if self.spatial == 0 {
            return Err(Error::config("spatial", "must be >= 1"));
        }
        if self.steps == 0 || self.segment_len == 0 {
            return Err(Error::config("steps", "steps and segment must be >= 1"));
        }
        if let Some(d) = self.schedule_delta {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::config("delta", "must be a positive real"));
            }
        }
        self.params.validate()
    }
}

/// One step of the controlled study.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasStepRecord {
    pub t: usize,
    /// The component weights the batch was drawn with.
    pub weights: Vec<f64>,
    /// `mu* - batch_mean`, per channel.
    pub measured_tbn: Vec<f64>,
    /// `mu* - sum_k h_t(k) mu*_k`, per channel.
    pub closed_form: Vec<f64>,
    /// `mu* - mixture_mean(unmix state)`, per channel, after this batch's
    /// update.
    pub unmix: Vec<f64>,
}

/// The oracle plus the per-step measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasStudy {
    pub oracle: BiasOracle,
    pub records: Vec<BiasStepRecord>,
}

/// Run the controlled piecewise-constant `h_t(k)` study.
///
/// Component means and variances are drawn once from the seed; every step
/// draws a batch of instances whose components follow the schedule. The
/// unmixing layer starts from identity source statistics (a deliberately
/// wrong prior) and adapts on the same stream.
pub fn bias_trace_study(cfg: &BiasTraceConfig) -> Result<BiasStudy> {
    cfg.validate()?;
    let c_n = cfg.channels;
    let k_true = cfg.components;
    let mut gen = rng::rng_from_seed(rng::derive_seed(cfg.seed, 10));

    let component_means: Vec<f64> = (0..k_true * c_n)
        .map(|_| gen.random_range(-2.0..2.0))
        .collect();
    let component_vars: Vec<f64> = (0..k_true * c_n)
        .map(|_| gen.random_range(0.25..1.0))
        .collect();

    let mut schedule = Vec::with_capacity(cfg.steps);
    let mut sched_gen = rng::rng_from_seed(rng::derive_seed(cfg.seed, 11));
    let mut current = uniform_weights(k_true);
    for t in 0..cfg.steps {
        if t % cfg.segment_len == 0 {
            current = match cfg.schedule_delta {
                None => uniform_weights(k_true),
                Some(delta) => {
                    crate::streams::dirichlet_weights(&mut sched_gen, delta, k_true)
                }
            };
        }
        schedule.push(current.clone());
    }
    let oracle = BiasOracle::new(component_means, component_vars, k_true, c_n, schedule)?;

    let src = SourceStats::identity(c_n);
    let lam = momentum_lambda(cfg.batch_size, cfg.params.base_batch, cfg.params.lambda0)?;
    let mut state = init_unmix(
        &src,
        cfg.params.components,
        cfg.params.alpha,
        rng::derive_seed(cfg.seed, 12),
    )?
    .with_tau(cfg.params.tau)?
    .with_eps(cfg.params.eps)?
    .with_lam(lam)?;

    let mut draw_gen = rng::rng_from_seed(rng::derive_seed(cfg.seed, 13));
    let gamma = vec![1.0; c_n];
    let beta = vec![0.0; c_n];
    let mut records = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let h = &oracle.schedule[t];
        let mut data = Vec::with_capacity(cfg.batch_size * c_n * cfg.spatial);
        for _ in 0..cfg.batch_size {
            let k = categorical_index(&mut draw_gen, h);
            for c in 0..c_n {
                let mu = oracle.component_means[k * c_n + c];
                let sd = oracle.component_vars[k * c_n + c].sqrt();
                for _ in 0..cfg.spatial {
                    let z: f64 = StandardNormal.sample(&mut draw_gen);
                    data.push(mu + sd * z);
                }
            }
        }
        let batch = FeatureBatch::new(data, cfg.batch_size, c_n, cfg.spatial)?;

        let bstats = batch_stats(&batch);
        let measured_tbn: Vec<f64> = oracle
            .true_mean
            .iter()
            .zip(&bstats.mean)
            .map(|(a, b)| a - b)
            .collect();
        let closed_form = tbn_bias_closed_form(&oracle, t)?;

        state.forward(&batch, &gamma, &beta)?;
        let mix = state.mixture();
        let unmix: Vec<f64> = oracle
            .true_mean
            .iter()
            .zip(&mix.mean)
            .map(|(a, b)| a - b)
            .collect();

        records.push(BiasStepRecord {
            t,
            weights: h.clone(),
            measured_tbn,
            closed_form,
            unmix,
        });
    }
    Ok(BiasStudy { oracle, records })
}

fn categorical_index(gen: &mut rand_chacha::ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = gen.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Write the study as a plot-ready table: per step, the L2 norms of the
/// closed-form bias, the measured batch-statistics bias, and the unmixing
/// layer's bias.
pub fn write_bias_trace(w: &mut impl Write, study: &BiasStudy) -> Result<()> {
    writeln!(w, "unmix-tns-bias-trace v1")?;
    writeln!(
        w,
        "components={} channels={} steps={}",
        study.oracle.components,
        study.oracle.channels,
        study.records.len()
    )?;
    writeln!(w, "columns=t closed_form_l2 measured_tbn_l2 unmix_l2")?;
    for r in &study.records {
        writeln!(
            w,
            "{} {:e} {:e} {:e}",
            r.t,
            l2(&r.closed_form),
            l2(&r.measured_tbn),
            l2(&r.unmix)
        )?;
    }
    Ok(())
}
