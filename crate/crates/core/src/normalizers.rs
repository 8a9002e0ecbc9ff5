//! The statistics-unmixing test-time normalization layer and its baselines.
//!
//! A layer's stored source statistics are split into `K` (mean, variance)
//! components. Each incoming instance is softly assigned to components by
//! cosine similarity of instance means, per-instance normalization
//! statistics are formed by mixing the instance statistics into every
//! component and composing the uniform mixture, and the components are then
//! updated toward the instances that selected them. Baselines (source-BN,
//! TBN, alpha-BN, EMA-BN) share the same forward contract through
//! [`NormSlot`].

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{
    assignment_probs, batch_stats, instance_stats, mixture_moments, uniform_weights,
    AssignmentMatrix, ChannelStats, FeatureBatch, InstanceStats,
};
use rand_distr::{Distribution, StandardNormal};
use std::str::FromStr;

/// Softmax temperature for component assignment.
pub const DEFAULT_TAU: f64 = 0.07;
/// Variance floor added under every square root.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Fraction of stored variance moved into component-mean spread at init.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Number of statistics components.
pub const DEFAULT_COMPONENTS: usize = 16;
/// Update momentum at the reference batch size.
pub const DEFAULT_LAMBDA0: f64 = 0.1;
/// Reference batch size for the momentum schedule.
pub const DEFAULT_BASE_BATCH: usize = 64;
/// Test-statistics weight of the alpha-BN baseline.
pub const DEFAULT_ALPHA_BN: f64 = 0.5;
/// EMA rate of the EMA-BN baseline.
pub const DEFAULT_EMA_MOMENTUM: f64 = 0.1;

/// Stored per-channel statistics and affine parameters of a trained
/// normalization layer: mean, variance, scale, shift.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SourceStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let c = mean.len();
        if var.len() != c || gamma.len() != c || beta.len() != c {
            return Err(Error::ShapeMismatch(
                "source stats vectors must share one channel count".to_string(),
            ));
        }
        let all = mean.iter().chain(&var).chain(&gamma).chain(&beta);
        if !all.into_iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "source stats contain non-finite entries".to_string(),
            ));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "source variance must be nonnegative".to_string(),
            ));
        }
        Ok(Self {
            mean,
            var,
            gamma,
            beta,
        })
    }

    /// Mean 0, variance 1, scale 1, shift 0: the identity layer.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn channel_stats(&self) -> ChannelStats {
        ChannelStats {
            mean: self.mean.clone(),
            var: self.var.clone(),
        }
    }
}

/// Per-instance refined normalization statistics, shape `B x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    batch: usize,
    channels: usize,
}

impl RefinedStats {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn mean_row(&self, b: usize) -> &[f64] {
        &self.mean[b * self.channels..(b + 1) * self.channels]
    }

    pub fn var_row(&self, b: usize) -> &[f64] {
        &self.var[b * self.channels..(b + 1) * self.channels]
    }
}

/// State of the unmixing layer: `K x C` component means and variances plus
/// the hyperparameters fixed at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct UnMixState {
    comp_mean: Vec<f64>,
    comp_var: Vec<f64>,
    components: usize,
    channels: usize,
    alpha: f64,
    tau: f64,
    lam: f64,
    eps: f64,
}

/// Initialize the component statistics from stored source statistics.
///
/// Component means are `mu_c + sigma_c * sqrt(alpha*K/(K-1)) * zeta` with
/// `zeta` standard normal from the seeded generator; component variances are
/// `(1-alpha) * sigma_c^2`. In expectation the uniform mixture of the
/// components reproduces the stored statistics. `K = 1` requires
/// `alpha = 0` (the spread coefficient is undefined otherwise).
pub fn init_unmix(src: &SourceStats, components: usize, alpha: f64, seed: u64) -> Result<UnMixState> {
    if components == 0 {
        return Err(Error::InvalidArgument(
            "component count must be >= 1".to_string(),
        ));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    if components == 1 && alpha > 0.0 {
        return Err(Error::InvalidArgument(
            "a single component requires alpha = 0".to_string(),
        ));
    }
    let channels = src.channels();
    let coeff = if components > 1 {
        (alpha * components as f64 / (components - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut gen = rng::rng_from_seed(seed);
    let mut comp_mean = Vec::with_capacity(components * channels);
    let mut comp_var = Vec::with_capacity(components * channels);
    for _ in 0..components {
        for c in 0..channels {
            let zeta: f64 = StandardNormal.sample(&mut gen);
            comp_mean.push(src.mean[c] + src.var[c].sqrt() * coeff * zeta);
        }
    }
    for _ in 0..components {
        for c in 0..channels {
            comp_var.push((1.0 - alpha) * src.var[c]);
        }
    }
    Ok(UnMixState {
        comp_mean,
        comp_var,
        components,
        channels,
        alpha,
        tau: DEFAULT_TAU,
        lam: DEFAULT_LAMBDA0,
        eps: DEFAULT_EPS,
    })
}

impl UnMixState {
    /// Build a state directly from `K x C` component statistics (for
    /// replaying saved states or driving the layer from externally chosen
    /// components). Hyperparameters start at their defaults; adjust with
    /// the `with_*` builders.
    pub fn from_components(
        comp_mean: Vec<f64>,
        comp_var: Vec<f64>,
        components: usize,
        channels: usize,
    ) -> Result<Self> {
        if components == 0 || channels == 0 {
            return Err(Error::InvalidArgument(
                "component count and channels must be >= 1".to_string(),
            ));
        }
        if comp_mean.len() != components * channels || comp_var.len() != comp_mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "component stats must be {components}x{channels}, got {} and {} entries",
                comp_mean.len(),
                comp_var.len()
            )));
        }
        if !comp_mean.iter().chain(&comp_var).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "component stats contain non-finite entries".to_string(),
            ));
        }
        if comp_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "component variances must be nonnegative".to_string(),
            ));
        }
        Ok(Self {
            comp_mean,
            comp_var,
            components,
            channels,
            alpha: 0.0,
            tau: DEFAULT_TAU,
            lam: DEFAULT_LAMBDA0,
            eps: DEFAULT_EPS,
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lam(&self) -> f64 {
        self.lam
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `K x C` component means, row-major.
    pub fn comp_mean(&self) -> &[f64] {
        &self.comp_mean
    }

    /// `K x C` component variances, row-major.
    pub fn comp_var(&self) -> &[f64] {
        &self.comp_var
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tau must be a positive real, got {tau}"
            )));
        }
        self.tau = tau;
        Ok(self)
    }

    /// Set the update momentum. Zero freezes the components (useful for
    /// ablation); values must stay below one.
    pub fn with_lam(mut self, lam: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lam) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1), got {lam}"
            )));
        }
        self.lam = lam;
        Ok(self)
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eps must be a positive real, got {eps}"
            )));
        }
        self.eps = eps;
        Ok(self)
    }

    /// Uniform mixture moments of the current components: the layer's
    /// channel-level belief about the test feature distribution.
    pub fn mixture(&self) -> ChannelStats {
        mixture_moments(
            &self.comp_mean,
            &self.comp_var,
            self.components,
            self.channels,
            &uniform_weights(self.components),
        )
        .expect("component state is valid by construction")
    }

    /// Cosine similarities of each instance mean against each component
    /// mean, `B x K` row-major. Component norms are hoisted out of the
    /// instance loop.
    fn similarities(&self, inst: &InstanceStats) -> Vec<f64> {
        let b_n = inst.batch_size();
        let k_n = self.components;
        let c_n = self.channels;
        let comp_norms: Vec<f64> = (0..k_n)
            .map(|k| {
                let row = &self.comp_mean[k * c_n..k * c_n + c_n];
                crate::stats::dot_fast(row, row).sqrt()
            })
            .collect();
        let mut sims = vec![0.0; b_n * k_n];
        for b in 0..b_n {
            let u = inst.mean_row(b);
            let u_norm = crate::stats::dot_fast(u, u).sqrt();
            let out = &mut sims[b * k_n..(b + 1) * k_n];
            if u_norm < crate::stats::COSINE_NORM_FLOOR {
                continue;
            }
            for (k, o) in out.iter_mut().enumerate() {
                if comp_norms[k] < crate::stats::COSINE_NORM_FLOOR {
                    continue;
                }
                let v = &self.comp_mean[k * c_n..k * c_n + c_n];
                let dot = crate::stats::dot_fast(u, v);
                *o = (dot / (u_norm * comp_norms[k])).clamp(-1.0, 1.0);
            }
        }
        sims
    }

    fn refine(&self, inst: &InstanceStats, probs: &AssignmentMatrix) -> RefinedStats {
        let b_n = inst.batch_size();
        let c_n = self.channels;
        let k_n = self.components;
        let inv_k = 1.0 / k_n as f64;
        let mut mean = vec![0.0; b_n * c_n];
        let mut var = vec![0.0; b_n * c_n];
        let mut acc_mu = vec![0.0; c_n];
        let mut acc_mu2 = vec![0.0; c_n];
        let mut acc_var = vec![0.0; c_n];
        for b in 0..b_n {
            let acc_mu = &mut acc_mu[..c_n];
            let acc_mu2 = &mut acc_mu2[..c_n];
            let acc_var = &mut acc_var[..c_n];
            acc_mu.fill(0.0);
            acc_mu2.fill(0.0);
            acc_var.fill(0.0);
            let im = &inst.mean_row(b)[..c_n];
            let iv = &inst.var_row(b)[..c_n];
            let p_row = probs.row(b);
            for k in 0..k_n {
                let p = p_row[k];
                let q = 1.0 - p;
                let cm = &self.comp_mean[k * c_n..k * c_n + c_n];
                let cv = &self.comp_var[k * c_n..k * c_n + c_n];
                for c in 0..c_n {
                    let blended_mu = q * cm[c] + p * im[c];
                    let blended_var = q * cv[c] + p * iv[c];
                    acc_mu[c] += blended_mu;
                    acc_mu2[c] += blended_mu * blended_mu;
                    acc_var[c] += blended_var;
                }
            }
            let mrow = &mut mean[b * c_n..b * c_n + c_n];
            let vrow = &mut var[b * c_n..b * c_n + c_n];
            for c in 0..c_n {
                let m = acc_mu[c] * inv_k;
                mrow[c] = m;
                vrow[c] = (acc_var[c] * inv_k + acc_mu2[c] * inv_k - m * m).max(0.0);
            }
        }
        RefinedStats {
            mean,
            var,
            batch: b_n,
            channels: c_n,
        }
    }

    /// Per-instance refined statistics and the assignment matrix for a
    /// batch, without touching the state.
    pub fn refined_stats(&self, batch: &FeatureBatch) -> Result<(RefinedStats, AssignmentMatrix)> {
        if batch.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} channels, state has {}",
                batch.channels(),
                self.channels
            )));
        }
        let inst = instance_stats(batch);
        let sims = self.similarities(&inst);
        let probs = assignment_probs(&sims, batch.batch_size(), self.components, self.tau)?;
        Ok((self.refine(&inst, &probs), probs))
    }

    /// Normalize a batch with per-instance refined statistics and update the
    /// components toward the instances that selected them.
    ///
    /// Similarities and assignments use the pre-update component means; the
    /// update applies after normalization. Component variances are clamped
    /// at zero against floating-point cancellation.
    ///
    /// The blend increment `p * (inst - comp)` doubles as the update
    /// summand, so refinement, normalization, and update accumulation share
    /// one pass over the batch.
    pub fn forward(
        &mut self,
        batch: &FeatureBatch,
        gamma: &[f64],
        beta: &[f64],
    ) -> Result<FeatureBatch> {
        let (b_n, c_n, l_n) = batch.shape();
        if c_n != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "batch has {c_n} channels, state has {}",
                self.channels
            )));
        }
        if gamma.len() != c_n || beta.len() != c_n {
            return Err(Error::ShapeMismatch(
                "affine parameters must match the channel count".to_string(),
            ));
        }
        let k_n = self.components;
        let inv_k = 1.0 / k_n as f64;

        let inst = instance_stats(batch);
        let sims = self.similarities(&inst);
        let probs = assignment_probs(&sims, b_n, k_n, self.tau)?;

        let mut out = Vec::with_capacity(b_n * c_n * l_n);
        let mut upd_m = vec![0.0; k_n * c_n];
        let mut upd_v = vec![0.0; k_n * c_n];
        let mut acc_mu = vec![0.0; c_n];
        let mut acc_mu2 = vec![0.0; c_n];
        let mut acc_var = vec![0.0; c_n];
        for b in 0..b_n {
            let acc_mu = &mut acc_mu[..c_n];
            let acc_mu2 = &mut acc_mu2[..c_n];
            let acc_var = &mut acc_var[..c_n];
            acc_mu.fill(0.0);
            acc_mu2.fill(0.0);
            acc_var.fill(0.0);
            let im = &inst.mean_row(b)[..c_n];
            let iv = &inst.var_row(b)[..c_n];
            let p_row = probs.row(b);
            for k in 0..k_n {
                let p = p_row[k];
                let cm = &self.comp_mean[k * c_n..k * c_n + c_n];
                let um = &mut upd_m[k * c_n..k * c_n + c_n];
                for c in 0..c_n {
                    let d_mu = p * (im[c] - cm[c]);
                    let blended_mu = cm[c] + d_mu;
                    acc_mu[c] += blended_mu;
                    acc_mu2[c] += blended_mu * blended_mu;
                    um[c] += d_mu;
                }
                let cv = &self.comp_var[k * c_n..k * c_n + c_n];
                let uv = &mut upd_v[k * c_n..k * c_n + c_n];
                for c in 0..c_n {
                    let d_var = p * (iv[c] - cv[c]);
                    acc_var[c] += cv[c] + d_var;
                    uv[c] += d_var;
                }
            }
            // Output layout is (b, c, l) row-major, so this fills
            // sequentially.
            for c in 0..c_n {
                let mean = acc_mu[c] * inv_k;
                let var =
                    (acc_var[c] * inv_k + acc_mu2[c] * inv_k - mean * mean).max(0.0);
                let inv = 1.0 / (var + self.eps).sqrt();
                let scale = gamma[c] * inv;
                let shift = beta[c] - mean * scale;
                for &z in batch.row(b, c) {
                    out.push(z * scale + shift);
                }
            }
        }

        if self.lam != 0.0 {
            let rate = self.lam / b_n as f64;
            for (i, (m, v)) in upd_m.iter().zip(&upd_v).enumerate() {
                self.comp_mean[i] += rate * m;
                self.comp_var[i] = (self.comp_var[i] + rate * v).max(0.0);
            }
        }

        Ok(FeatureBatch::from_raw(out, b_n, c_n, l_n))
    }
}

/// Normalize with explicit per-channel statistics and affine parameters.
fn normalize_channelwise(
    batch: &FeatureBatch,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> FeatureBatch {
    let (b_n, c_n, l_n) = batch.shape();
    debug_assert_eq!(mean.len(), c_n);
    let scale: Vec<f64> = (0..c_n)
        .map(|c| gamma[c] / (var[c] + eps).sqrt())
        .collect();
    let shift: Vec<f64> = (0..c_n).map(|c| beta[c] - mean[c] * scale[c]).collect();
    let mut out = Vec::with_capacity(b_n * c_n * l_n);
    for b in 0..b_n {
        for c in 0..c_n {
            let s = scale[c];
            let t = shift[c];
            for &z in batch.row(b, c) {
                out.push(z * s + t);
            }
        }
    }
    FeatureBatch::from_raw(out, b_n, c_n, l_n)
}

fn check_affine(batch: &FeatureBatch, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != batch.channels() || beta.len() != batch.channels() {
        return Err(Error::ShapeMismatch(format!(
            "affine parameters have {}/{} channels, batch has {}",
            gamma.len(),
            beta.len(),
            batch.channels()
        )));
    }
    Ok(())
}

/// Test-time batch normalization: standardize with the current batch's own
/// per-channel statistics.
pub fn tbn_forward(
    batch: &FeatureBatch,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<FeatureBatch> {
    check_affine(batch, gamma, beta)?;
    let s = batch_stats(batch);
    Ok(normalize_channelwise(batch, &s.mean, &s.var, gamma, beta, eps))
}

/// Normalize with frozen stored statistics; no state is touched.
pub fn source_bn_forward(batch: &FeatureBatch, src: &SourceStats, eps: f64) -> Result<FeatureBatch> {
    if batch.channels() != src.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} channels, source stats have {}",
            batch.channels(),
            src.channels()
        )));
    }
    Ok(normalize_channelwise(
        batch, &src.mean, &src.var, &src.gamma, &src.beta, eps,
    ))
}

/// Blend stored and current-batch statistics with weight `alpha_bn` on the
/// test side, then normalize.
pub fn alpha_bn_forward(
    batch: &FeatureBatch,
    src: &SourceStats,
    alpha_bn: f64,
    eps: f64,
) -> Result<FeatureBatch> {
    if !(0.0..=1.0).contains(&alpha_bn) {
        return Err(Error::InvalidArgument(format!(
            "alpha_bn must lie in [0, 1], got {alpha_bn}"
        )));
    }
    if batch.channels() != src.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} channels, source stats have {}",
            batch.channels(),
            src.channels()
        )));
    }
    let s = batch_stats(batch);
    let mean: Vec<f64> = src
        .mean
        .iter()
        .zip(&s.mean)
        .map(|(&a, &b)| (1.0 - alpha_bn) * a + alpha_bn * b)
        .collect();
    let var: Vec<f64> = src
        .var
        .iter()
        .zip(&s.var)
        .map(|(&a, &b)| (1.0 - alpha_bn) * a + alpha_bn * b)
        .collect();
    Ok(normalize_channelwise(
        batch, &mean, &var, &src.gamma, &src.beta, eps,
    ))
}

/// Running channel statistics updated by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl EmaState {
    pub fn from_source(src: &SourceStats, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "EMA momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            mean: src.mean.clone(),
            var: src.var.clone(),
            momentum,
        })
    }
}

/// Normalize with the current EMA statistics, then move the EMA toward the
/// batch statistics.
pub fn ema_bn_forward(
    state: &mut EmaState,
    batch: &FeatureBatch,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<FeatureBatch> {
    check_affine(batch, gamma, beta)?;
    if batch.channels() != state.mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} channels, EMA state has {}",
            batch.channels(),
            state.mean.len()
        )));
    }
    let out = normalize_channelwise(batch, &state.mean, &state.var, gamma, beta, eps);
    let s = batch_stats(batch);
    // Two-term form: exact at both momentum endpoints.
    let m = state.momentum;
    for c in 0..state.mean.len() {
        state.mean[c] = (1.0 - m) * state.mean[c] + m * s.mean[c];
        state.var[c] = (1.0 - m) * state.var[c] + m * s.var[c];
    }
    Ok(out)
}

/// Which normalizer a slot runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    SourceBn,
    Tbn,
    AlphaBn,
    EmaBn,
    UnMix,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::SourceBn => "source",
            NormKind::Tbn => "tbn",
            NormKind::AlphaBn => "alpha-bn",
            NormKind::EmaBn => "ema-bn",
            NormKind::UnMix => "unmix",
        }
    }

    pub fn all() -> [NormKind; 5] {
        [
            NormKind::SourceBn,
            NormKind::Tbn,
            NormKind::AlphaBn,
            NormKind::EmaBn,
            NormKind::UnMix,
        ]
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(NormKind::SourceBn),
            "tbn" => Ok(NormKind::Tbn),
            "alpha-bn" => Ok(NormKind::AlphaBn),
            "ema-bn" => Ok(NormKind::EmaBn),
            "unmix" => Ok(NormKind::UnMix),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalizer `{other}` (expected source|tbn|alpha-bn|ema-bn|unmix)"
            ))),
        }
    }
}

/// Hyperparameters shared by all normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub components: usize,
    pub alpha: f64,
    pub tau: f64,
    pub eps: f64,
    pub lambda0: f64,
    pub base_batch: usize,
    pub alpha_bn: f64,
    pub ema_momentum: f64,
}

impl Default for NormParams {
    fn default() -> Self {
        Self {
            components: DEFAULT_COMPONENTS,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            eps: DEFAULT_EPS,
            lambda0: DEFAULT_LAMBDA0,
            base_batch: DEFAULT_BASE_BATCH,
            alpha_bn: DEFAULT_ALPHA_BN,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
        }
    }
}

impl NormParams {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::config("k", "component count must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1)"));
        }
        if self.components == 1 && self.alpha > 0.0 {
            return Err(Error::config("alpha", "must be 0 when k = 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", "must be > 0"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be > 0"));
        }
        if !(self.lambda0 > 0.0 && self.lambda0 < 1.0) {
            return Err(Error::config("lambda0", "must lie in (0, 1)"));
        }
        if self.base_batch == 0 {
            return Err(Error::config("base-batch", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha_bn) {
            return Err(Error::config("alpha-bn", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::config("ema-momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum SlotState {
    SourceBn,
    Tbn { last: Option<ChannelStats> },
    AlphaBn { last: Option<ChannelStats> },
    EmaBn(EmaState),
    UnMix(UnMixState),
}

/// One pluggable normalization slot: owns whatever per-layer state its kind
/// needs and remembers how it was initialized so it can be reset at domain
/// boundaries.
///
/// A slot is single-writer: `forward` mutates it, so one slot must not run
/// two forwards concurrently. Distinct slots are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSlot {
    state: SlotState,
    kind: NormKind,
    params: NormParams,
    batch_size: usize,
    seed: u64,
}

impl NormSlot {
    /// Build a slot of the given kind over a layer's source statistics.
    ///
    /// `batch_size` feeds the momentum schedule of the unmixing layer; the
    /// seed drives component initialization.
    pub fn new(
        kind: NormKind,
        params: &NormParams,
        src: &SourceStats,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be >= 1".to_string(),
            ));
        }
        let state = Self::build_state(kind, params, src, batch_size, seed)?;
        Ok(Self {
            state,
            kind,
            params: params.clone(),
            batch_size,
            seed,
        })
    }

    fn build_state(
        kind: NormKind,
        params: &NormParams,
        src: &SourceStats,
        batch_size: usize,
        seed: u64,
    ) -> Result<SlotState> {
        Ok(match kind {
            NormKind::SourceBn => SlotState::SourceBn,
            NormKind::Tbn => SlotState::Tbn { last: None },
            NormKind::AlphaBn => SlotState::AlphaBn { last: None },
            NormKind::EmaBn => SlotState::EmaBn(EmaState::from_source(src, params.ema_momentum)?),
            NormKind::UnMix => {
                let lam =
                    crate::stats::momentum_lambda(batch_size, params.base_batch, params.lambda0)?;
                let state = init_unmix(src, params.components, params.alpha, seed)?
                    .with_tau(params.tau)?
                    .with_eps(params.eps)?
                    .with_lam(lam)?;
                SlotState::UnMix(state)
            }
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    /// Re-initialize the slot exactly as it was first built (same seed).
    pub fn reset(&mut self, src: &SourceStats) -> Result<()> {
        self.state = Self::build_state(self.kind, &self.params, src, self.batch_size, self.seed)?;
        Ok(())
    }

    /// Normalize one batch, updating whatever state the kind keeps.
    pub fn forward(&mut self, batch: &FeatureBatch, src: &SourceStats) -> Result<FeatureBatch> {
        let eps = self.params.eps;
        match &mut self.state {
            SlotState::SourceBn => source_bn_forward(batch, src, eps),
            SlotState::Tbn { last } => {
                *last = Some(batch_stats(batch));
                tbn_forward(batch, &src.gamma, &src.beta, eps)
            }
            SlotState::AlphaBn { last } => {
                *last = Some(batch_stats(batch));
                alpha_bn_forward(batch, src, self.params.alpha_bn, eps)
            }
            SlotState::EmaBn(state) => ema_bn_forward(state, batch, &src.gamma, &src.beta, eps),
            SlotState::UnMix(state) => state.forward(batch, &src.gamma, &src.beta),
        }
    }

    /// The channel statistics this slot currently normalizes with — the
    /// quantity compared against the ground-truth oracle when measuring
    /// estimation bias. Stateless kinds report what they used for the most
    /// recent batch (stored stats before any batch is seen).
    pub fn belief(&self, src: &SourceStats) -> ChannelStats {
        match &self.state {
            SlotState::SourceBn => src.channel_stats(),
            SlotState::Tbn { last } => last.clone().unwrap_or_else(|| src.channel_stats()),
            SlotState::AlphaBn { last } => match last {
                None => src.channel_stats(),
                Some(s) => {
                    let a = self.params.alpha_bn;
                    ChannelStats {
                        mean: src
                            .mean
                            .iter()
                            .zip(&s.mean)
                            .map(|(&x, &y)| (1.0 - a) * x + a * y)
                            .collect(),
                        var: src
                            .var
                            .iter()
                            .zip(&s.var)
                            .map(|(&x, &y)| (1.0 - a) * x + a * y)
                            .collect(),
                    }
                }
            },
            SlotState::EmaBn(state) => ChannelStats {
                mean: state.mean.clone(),
                var: state.var.clone(),
            },
            SlotState::UnMix(state) => state.mixture(),
        }
    }

    /// Access the unmixing state when this slot runs one.
    pub fn unmix_state(&self) -> Option<&UnMixState> {
        match &self.state {
            SlotState::UnMix(s) => Some(s),
            _ => None,
        }
    }
}
