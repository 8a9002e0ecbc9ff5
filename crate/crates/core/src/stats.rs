//! Statistics primitives shared by every normalizer.
//!
//! All moments use the population convention (divisor `L` or `B*L`, never
//! `L-1`): the mixture-composition identity used throughout mixes variances
//! directly and is exact only under that convention.

use crate::error::{Error, Result};

/// Tolerance for "mixture weights sum to one" checks.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Norms below this are treated as zero when computing cosine similarity.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// A batch of features entering a normalization layer, shape `B x C x L`
/// (batch, channels, spatial extent), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    data: Vec<f64>,
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl FeatureBatch {
    /// Build a batch from a flat row-major buffer, validating shape and
    /// finiteness.
    pub fn new(data: Vec<f64>, batch: usize, channels: usize, spatial: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || spatial == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature batch dims must be >= 1, got {batch}x{channels}x{spatial}"
            )));
        }
        if data.len() != batch * channels * spatial {
            return Err(Error::ShapeMismatch(format!(
                "feature batch buffer has {} entries, expected {}x{}x{} = {}",
                data.len(),
                batch,
                channels,
                spatial,
                batch * channels * spatial
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature batch contains non-finite entries".to_string(),
            ));
        }
        Ok(Self {
            data,
            batch,
            channels,
            spatial,
        })
    }

    /// Internal constructor for buffers already known to be valid.
    pub(crate) fn from_raw(data: Vec<f64>, batch: usize, channels: usize, spatial: usize) -> Self {
        debug_assert_eq!(data.len(), batch * channels * spatial);
        Self {
            data,
            batch,
            channels,
            spatial,
        }
    }

    /// Fill a batch elementwise from `(b, c, l)`.
    pub fn from_fn(
        batch: usize,
        channels: usize,
        spatial: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(batch * channels * spatial);
        for b in 0..batch {
            for c in 0..channels {
                for l in 0..spatial {
                    data.push(f(b, c, l));
                }
            }
        }
        Self::new(data, batch, channels, spatial)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.spatial)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, l: usize) -> f64 {
        self.data[(b * self.channels + c) * self.spatial + l]
    }

    /// The contiguous `L`-long slice at `(b, c)`.
    #[inline]
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.channels + c) * self.spatial;
        &self.data[start..start + self.spatial]
    }
}

/// Per-channel mean and variance, length `C`. Variance, not standard
/// deviation, is the stored quantity; std is derived where needed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::ShapeMismatch(format!(
                "channel stats mean has {} entries, var has {}",
                mean.len(),
                var.len()
            )));
        }
        if !mean.iter().chain(var.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "channel stats contain non-finite entries".to_string(),
            ));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "channel variance must be nonnegative".to_string(),
            ));
        }
        Ok(Self { mean, var })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Per-instance mean and variance, shape `B x C`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    batch: usize,
    channels: usize,
}

impl InstanceStats {
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

    /// Mean row for instance `b`, length `C`.
    pub fn mean_row(&self, b: usize) -> &[f64] {
        &self.mean[b * self.channels..(b + 1) * self.channels]
    }

    /// Variance row for instance `b`, length `C`.
    pub fn var_row(&self, b: usize) -> &[f64] {
        &self.var[b * self.channels..(b + 1) * self.channels]
    }
}

/// Soft assignment of each instance to each statistics component,
/// shape `B x K`; rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    probs: Vec<f64>,
    batch: usize,
    components: usize,
}

impl AssignmentMatrix {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Assignment row for instance `b`, length `K`.
    pub fn row(&self, b: usize) -> &[f64] {
        &self.probs[b * self.components..(b + 1) * self.components]
    }
}

// Four-accumulator reductions: plain `iter().sum()` builds one serial
// dependency chain whose add latency dominates these hot paths.

pub(crate) fn sum_fast(x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks = x.chunks_exact(4);
    for q in &mut chunks {
        acc[0] += q[0];
        acc[1] += q[1];
        acc[2] += q[2];
        acc[3] += q[3];
    }
    for &v in chunks.remainder() {
        acc[0] += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

pub(crate) fn sq_dev_sum_fast(x: &[f64], m: f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks = x.chunks_exact(4);
    for q in &mut chunks {
        let d0 = q[0] - m;
        let d1 = q[1] - m;
        let d2 = q[2] - m;
        let d3 = q[3] - m;
        acc[0] += d0 * d0;
        acc[1] += d1 * d1;
        acc[2] += d2 * d2;
        acc[3] += d3 * d3;
    }
    for &v in chunks.remainder() {
        let d = v - m;
        acc[0] += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

pub(crate) fn dot_fast(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = [0.0f64; 4];
    let mut uc = u.chunks_exact(4);
    let mut vc = v.chunks_exact(4);
    for (a, b) in (&mut uc).zip(&mut vc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    for (a, b) in uc.remainder().iter().zip(vc.remainder()) {
        acc[0] += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Per-instance moments over the spatial extent only: for each `(b, c)`,
/// `mean = (1/L) sum_l z[b,c,l]` and the population variance around it.
pub fn instance_stats(batch: &FeatureBatch) -> InstanceStats {
    let (b_n, c_n, l_n) = batch.shape();
    let inv_l = 1.0 / l_n as f64;
    let mut mean = vec![0.0; b_n * c_n];
    let mut var = vec![0.0; b_n * c_n];
    for b in 0..b_n {
        for c in 0..c_n {
            let row = batch.row(b, c);
            let m = sum_fast(row) * inv_l;
            mean[b * c_n + c] = m;
            var[b * c_n + c] = sq_dev_sum_fast(row, m) * inv_l;
        }
    }
    InstanceStats {
        mean,
        var,
        batch: b_n,
        channels: c_n,
    }
}

/// Per-channel moments pooled over batch and spatial dims: for each `c`,
/// `mean = (1/BL) sum_{b,l} z[b,c,l]` and the population variance around it.
pub fn batch_stats(batch: &FeatureBatch) -> ChannelStats {
    let (b_n, c_n, _) = batch.shape();
    let inv_n = 1.0 / (b_n * batch.spatial()) as f64;
    let mut mean = vec![0.0; c_n];
    let mut var = vec![0.0; c_n];
    for c in 0..c_n {
        let mut acc = 0.0;
        for b in 0..b_n {
            acc += sum_fast(batch.row(b, c));
        }
        mean[c] = acc * inv_n;
    }
    for c in 0..c_n {
        let m = mean[c];
        let mut acc = 0.0;
        for b in 0..b_n {
            acc += sq_dev_sum_fast(batch.row(b, c), m);
        }
        var[c] = acc * inv_n;
    }
    ChannelStats { mean, var }
}

/// Moments of a weighted mixture of `K` per-channel component distributions.
///
/// `comp_mean`/`comp_var` are `K x C` row-major; `weights` has length `K`,
/// is nonnegative, and must sum to one within [`WEIGHT_SUM_TOL`]. The
/// mixture mean is the weighted mean of component means; the mixture
/// variance follows the law of total variance:
/// `sum_k w_k var_k + sum_k w_k mean_k^2 - (sum_k w_k mean_k)^2`.
pub fn mixture_moments(
    comp_mean: &[f64],
    comp_var: &[f64],
    components: usize,
    channels: usize,
    weights: &[f64],
) -> Result<ChannelStats> {
    if components == 0 || channels == 0 {
        return Err(Error::InvalidArgument(
            "mixture needs at least one component and one channel".to_string(),
        ));
    }
    if comp_mean.len() != components * channels || comp_var.len() != comp_mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "component stats must be {components}x{channels}, got {} and {} entries",
            comp_mean.len(),
            comp_var.len()
        )));
    }
    if weights.len() != components {
        return Err(Error::ShapeMismatch(format!(
            "expected {components} weights, got {}",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::InvalidArgument(
            "mixture weights must be finite and nonnegative".to_string(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidArgument(format!(
            "mixture weights sum to {sum}, expected 1"
        )));
    }
    if comp_var.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "component variances must be nonnegative".to_string(),
        ));
    }

    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut m = 0.0;
        let mut v = 0.0;
        let mut m2 = 0.0;
        for k in 0..components {
            let w = weights[k];
            let mu = comp_mean[k * channels + c];
            m += w * mu;
            m2 += w * mu * mu;
            v += w * comp_var[k * channels + c];
        }
        mean[c] = m;
        // Nonnegative in exact arithmetic; clamp the cancellation residue.
        var[c] = (v + m2 - m * m).max(0.0);
    }
    Ok(ChannelStats { mean, var })
}

/// Uniform mixture weights `1/K`.
pub fn uniform_weights(components: usize) -> Vec<f64> {
    vec![1.0 / components as f64; components]
}

/// Cosine similarity `u.v / (|u||v|)`, returning 0 when either norm is
/// below [`COSINE_NORM_FLOOR`]. Result is clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_sim operands must match in length");
    let nu = dot_fast(u, u).sqrt();
    let nv = dot_fast(v, v).sqrt();
    if nu < COSINE_NORM_FLOOR || nv < COSINE_NORM_FLOOR {
        return 0.0;
    }
    (dot_fast(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Row-wise softmax of `sims / tau` over a `rows x components` score matrix,
/// computed with row-max subtraction.
pub fn assignment_probs(
    sims: &[f64],
    rows: usize,
    components: usize,
    tau: f64,
) -> Result<AssignmentMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be a positive real, got {tau}"
        )));
    }
    if sims.len() != rows * components || components == 0 {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix must be {rows}x{components}, got {} entries",
            sims.len()
        )));
    }
    let mut probs = vec![0.0; rows * components];
    for r in 0..rows {
        let row = &sims[r * components..(r + 1) * components];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut probs[r * components..(r + 1) * components];
        let mut sum = 0.0;
        for (o, &s) in out.iter_mut().zip(row.iter()) {
            let e = ((s - max) / tau).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(AssignmentMatrix {
        probs,
        batch: rows,
        components,
    })
}

/// Batch-size-adjusted update momentum `1 - (1 - lambda0)^(B/B0)`.
///
/// Strictly increasing in `B`, with `lambda(B0) = lambda0` exactly.
pub fn momentum_lambda(batch_size: usize, base_batch: usize, lambda0: f64) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be >= 1".to_string(),
        ));
    }
    if base_batch == 0 {
        return Err(Error::InvalidArgument(
            "base batch size must be >= 1".to_string(),
        ));
    }
    if !(lambda0 > 0.0 && lambda0 < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "base momentum must lie in (0, 1), got {lambda0}"
        )));
    }
    if batch_size == base_batch {
        return Ok(lambda0);
    }
    let exponent = batch_size as f64 / base_batch as f64;
    Ok(1.0 - (1.0 - lambda0).powf(exponent))
}
