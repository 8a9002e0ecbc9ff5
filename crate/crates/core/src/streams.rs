//! Synthetic datasets, parametric domain shifts, and temporally correlated
//! stream ordering.
//!
//! All generators are pure functions of their configuration and seed.
//! Datasets and orderings serialize to a line-oriented text format with a
//! version header so runs are replayable.

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::FeatureBatch;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

const DATASET_HEADER: &str = "unmix-tns-dataset v1";
const ORDER_HEADER: &str = "unmix-tns-order v1";

/// Domain adaptation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// One domain at a time; normalizer state resets at domain boundaries.
    Single,
    /// Domains follow each other with no reset.
    Continual,
    /// Every sample in every batch draws its domain independently.
    Mixed,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Single => "single",
            Scenario::Continual => "continual",
            Scenario::Mixed => "mixed",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Scenario::Single),
            "continual" => Ok(Scenario::Continual),
            "mixed" => Ok(Scenario::Mixed),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario `{other}` (expected single|continual|mixed)"
            ))),
        }
    }
}

/// A parametric covariate shift: per-channel scale and offset plus additive
/// Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise_std: f64,
    pub id: String,
}

impl DomainShift {
    pub fn new(scale: Vec<f64>, offset: Vec<f64>, noise_std: f64, id: impl Into<String>) -> Result<Self> {
        if scale.len() != offset.len() {
            return Err(Error::ShapeMismatch(
                "shift scale and offset must match in length".to_string(),
            ));
        }
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(
                "shift scale must be positive elementwise".to_string(),
            ));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "shift noise std must be nonnegative".to_string(),
            ));
        }
        Ok(Self {
            scale,
            offset,
            noise_std,
            id: id.into(),
        })
    }

    /// Scale 1, offset 0, no noise.
    pub fn identity(channels: usize, id: impl Into<String>) -> Self {
        Self {
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
            noise_std: 0.0,
            id: id.into(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std == 0.0
            && self.scale.iter().all(|&s| s == 1.0)
            && self.offset.iter().all(|&o| o == 0.0)
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// A labeled synthetic dataset of raw inputs, shape `N x C0 x L0`, with the
/// generating class moments kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    samples: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    channels: usize,
    spatial: usize,
    classes: usize,
    class_means: Vec<f64>,
    class_vars: Vec<f64>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `M x C0` class means of the generating mixture.
    pub fn class_means(&self) -> &[f64] {
        &self.class_means
    }

    /// `M x C0` per-channel class variances of the generating mixture.
    pub fn class_vars(&self) -> &[f64] {
        &self.class_vars
    }

    /// The flat `C0 x L0` slice of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let stride = self.channels * self.spatial;
        &self.samples[i * stride..(i + 1) * stride]
    }

    /// Assemble the samples at `indices` into a feature batch, in order.
    pub fn gather(&self, indices: &[usize]) -> FeatureBatch {
        let stride = self.channels * self.spatial;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        FeatureBatch::from_raw(data, indices.len(), self.channels, self.spatial)
    }

    /// Labels at `indices`, in order.
    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> FeatureBatch {
        FeatureBatch::from_raw(self.samples.clone(), self.n, self.channels, self.spatial)
    }

    /// Concatenate this dataset with itself (used to test moment
    /// invariance under duplication).
    pub fn duplicated(&self) -> SynthDataset {
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&self.samples);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&self.labels);
        SynthDataset {
            samples,
            labels,
            n: self.n * 2,
            ..self.clone()
        }
    }

    /// Concatenate several datasets with identical shape metadata.
    pub fn concat(parts: &[&SynthDataset]) -> Result<SynthDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat needs at least one dataset".into()))?;
        let mut out = (*first).clone();
        for ds in &parts[1..] {
            if ds.channels != out.channels || ds.spatial != out.spatial || ds.classes != out.classes
            {
                return Err(Error::ShapeMismatch(
                    "datasets to concatenate must share shape and class count".to_string(),
                ));
            }
            out.samples.extend_from_slice(&ds.samples);
            out.labels.extend_from_slice(&ds.labels);
            out.n += ds.n;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{DATASET_HEADER}")?;
        writeln!(
            w,
            "n={} channels={} spatial={} classes={}",
            self.n, self.channels, self.spatial, self.classes
        )?;
        writeln!(w, "class_means={}", join_floats(&self.class_means))?;
        writeln!(w, "class_vars={}", join_floats(&self.class_vars))?;
        for i in 0..self.n {
            writeln!(w, "{} {}", self.labels[i], join_floats(self.sample(i)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SynthDataset> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let header = next_line(&mut lines)?;
        if header.1 != DATASET_HEADER {
            return Err(Error::parse(1, format!("expected `{DATASET_HEADER}` header")));
        }
        let (ln, dims) = next_line(&mut lines)?;
        let kv = parse_kv_line(&dims, ln)?;
        let n: usize = get_kv(&kv, "n", ln)?;
        let channels: usize = get_kv(&kv, "channels", ln)?;
        let spatial: usize = get_kv(&kv, "spatial", ln)?;
        let classes: usize = get_kv(&kv, "classes", ln)?;
        let (ln, means_line) = next_line(&mut lines)?;
        let class_means = parse_float_field(&means_line, "class_means", classes * channels, ln)?;
        let (ln, vars_line) = next_line(&mut lines)?;
        let class_vars = parse_float_field(&vars_line, "class_vars", classes * channels, ln)?;
        let stride = channels * spatial;
        let mut samples = Vec::with_capacity(n * stride);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = next_line(&mut lines)?;
            let mut parts = line.split_whitespace();
            let label: usize = parts
                .next()
                .ok_or_else(|| Error::parse(ln, "missing label"))?
                .parse()
                .map_err(|e| Error::parse(ln, format!("bad label: {e}")))?;
            if label >= classes {
                return Err(Error::parse(ln, format!("label {label} out of range")));
            }
            labels.push(label);
            let before = samples.len();
            for tok in parts {
                samples.push(
                    tok.parse::<f64>()
                        .map_err(|e| Error::parse(ln, format!("bad float: {e}")))?,
                );
            }
            if samples.len() - before != stride {
                return Err(Error::parse(
                    ln,
                    format!("expected {stride} values, got {}", samples.len() - before),
                ));
            }
        }
        Ok(SynthDataset {
            samples,
            labels,
            n,
            channels,
            spatial,
            classes,
            class_means,
            class_vars,
        })
    }
}

/// Generate a labeled Gaussian-blob dataset.
///
/// Class means sit on a deterministic harmonic layout of norm ~1 (paired
/// cosine/sine coordinates at increasing frequency), and every sample adds
/// i.i.d. per-element noise of standard deviation `spread`. With
/// `spread = 0` each sample equals its class mean.
pub fn synth_source(
    classes: usize,
    channels: usize,
    spatial: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs at least 2 classes".to_string(),
        ));
    }
    if channels == 0 || spatial == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "channels, spatial extent, and samples per class must be >= 1".to_string(),
        ));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::InvalidArgument(
            "spread must be a nonnegative real".to_string(),
        ));
    }

    let mut class_means = vec![0.0; classes * channels];
    let pairs = (channels + 1) / 2;
    let norm = (pairs as f64).sqrt();
    for m in 0..classes {
        let theta = 2.0 * std::f64::consts::PI * m as f64 / classes as f64;
        for c in 0..channels {
            let freq = (c / 2 + 1) as f64;
            let phase = freq * theta;
            class_means[m * channels + c] =
                if c % 2 == 0 { phase.cos() } else { phase.sin() } / norm;
        }
    }
    let class_vars = vec![spread * spread; classes * channels];

    let mut gen = rng::rng_from_seed(seed);
    let n = classes * n_per_class;
    let stride = channels * spatial;
    let mut samples = Vec::with_capacity(n * stride);
    let mut labels = Vec::with_capacity(n);
    for m in 0..classes {
        for _ in 0..n_per_class {
            labels.push(m);
            for c in 0..channels {
                let mu = class_means[m * channels + c];
                for _ in 0..spatial {
                    let z: f64 = StandardNormal.sample(&mut gen);
                    samples.push(mu + spread * z);
                }
            }
        }
    }
    Ok(SynthDataset {
        samples,
        labels,
        n,
        channels,
        spatial,
        classes,
        class_means,
        class_vars,
    })
}

/// Apply a domain shift to one batch: `scale * x + offset + noise`.
/// The identity shift returns the input exactly.
pub fn apply_shift(batch: &FeatureBatch, shift: &DomainShift, seed: u64) -> Result<FeatureBatch> {
    if shift.channels() != batch.channels() {
        return Err(Error::ShapeMismatch(format!(
            "shift has {} channels, batch has {}",
            shift.channels(),
            batch.channels()
        )));
    }
    if shift.is_identity() {
        return Ok(batch.clone());
    }
    let (b_n, c_n, l_n) = batch.shape();
    let mut gen = rng::rng_from_seed(seed);
    let mut data = Vec::with_capacity(b_n * c_n * l_n);
    for b in 0..b_n {
        for c in 0..c_n {
            for &z in batch.row(b, c) {
                let noise: f64 = if shift.noise_std > 0.0 {
                    let eta: f64 = StandardNormal.sample(&mut gen);
                    shift.noise_std * eta
                } else {
                    0.0
                };
                data.push(shift.scale[c] * z + shift.offset[c] + noise);
            }
        }
    }
    Ok(FeatureBatch::from_raw(data, b_n, c_n, l_n))
}

/// Apply a domain shift to a whole dataset, updating the recorded class
/// moments to describe the shifted samples.
pub fn apply_shift_dataset(
    ds: &SynthDataset,
    shift: &DomainShift,
    seed: u64,
) -> Result<SynthDataset> {
    let batch = apply_shift(&ds.as_batch(), shift, seed)?;
    let mut class_means = ds.class_means.clone();
    let mut class_vars = ds.class_vars.clone();
    for m in 0..ds.classes {
        for c in 0..ds.channels {
            let i = m * ds.channels + c;
            class_means[i] = shift.scale[c] * class_means[i] + shift.offset[c];
            class_vars[i] = shift.scale[c] * shift.scale[c] * class_vars[i]
                + shift.noise_std * shift.noise_std;
        }
    }
    Ok(SynthDataset {
        samples: batch.data().to_vec(),
        labels: ds.labels.clone(),
        n: ds.n,
        channels: ds.channels,
        spatial: ds.spatial,
        classes: ds.classes,
        class_means,
        class_vars,
    })
}

/// Draw a point on the simplex from a symmetric Dirichlet with
/// concentration `delta`, via normalized Gamma(delta, 1) draws.
pub(crate) fn dirichlet_weights(gen: &mut rand_chacha::ChaCha8Rng, delta: f64, m: usize) -> Vec<f64> {
    let gamma = Gamma::new(delta, 1.0).expect("delta validated positive");
    let mut draws: Vec<f64> = (0..m).map(|_| gamma.sample(gen)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= f64::MIN_POSITIVE || !sum.is_finite() {
        // Tiny concentrations can underflow every Gamma draw to zero; the
        // limiting Dirichlet is a random one-hot vector.
        let hot = gen.random_range(0..m);
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[hot] = 1.0;
        return draws;
    }
    draws.iter_mut().for_each(|d| *d /= sum);
    draws
}

fn categorical(gen: &mut rand_chacha::ChaCha8Rng, probs: &[f64]) -> usize {
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

/// Order a label sequence into a temporally correlated stream.
///
/// The stream is cut into slots of `slot_size`. Each slot draws class
/// proportions from a symmetric Dirichlet with concentration `delta` and
/// fills its positions by sampling classes from those proportions without
/// replacement from the per-class index pools. When a sampled class is
/// exhausted the position falls back to the first non-empty class in label
/// order, which keeps the output a permutation of `0..N`.
///
/// Small `delta` clumps labels; as `delta` grows the slots approach the
/// global label distribution.
pub fn dirichlet_order(
    labels: &[usize],
    classes: usize,
    delta: f64,
    slot_size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Dirichlet concentration must be a positive real, got {delta}"
        )));
    }
    if slot_size == 0 {
        return Err(Error::InvalidArgument("slot size must be >= 1".to_string()));
    }
    if classes == 0 || labels.iter().any(|&l| l >= classes) {
        return Err(Error::InvalidArgument(
            "labels must lie in [0, classes)".to_string(),
        ));
    }

    let mut pools: Vec<std::collections::VecDeque<usize>> =
        vec![std::collections::VecDeque::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push_back(i);
    }

    let mut gen = rng::rng_from_seed(seed);
    let n = labels.len();
    let mut order = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let take = slot_size.min(remaining);
        let props = dirichlet_weights(&mut gen, delta, classes);
        for _ in 0..take {
            let want = categorical(&mut gen, &props);
            let idx = match pools[want].pop_front() {
                Some(i) => i,
                None => {
                    let fallback = pools
                        .iter_mut()
                        .find(|p| !p.is_empty())
                        .expect("remaining > 0 implies a non-empty pool");
                    fallback.pop_front().unwrap()
                }
            };
            order.push(idx);
        }
        remaining -= take;
    }
    Ok(order)
}

/// A plain uniform shuffle of `0..n` (the i.i.d. reference ordering).
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut gen = rng::rng_from_seed(seed);
    order.shuffle(&mut gen);
    order
}

/// Domain assignment of one batch in a scheduled stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchDomains {
    /// Every sample in the batch comes from one domain.
    Whole(usize),
    /// Per-sample domain indices (mixed scenario).
    PerSample(Vec<usize>),
}

/// Assign a domain to every batch of the stream.
///
/// `single` with one domain keeps it throughout; with several domains both
/// `single` and `continual` split the stream into contiguous, equally sized
/// segments (the two differ only in whether the harness resets state at the
/// boundaries). `mixed` draws an independent domain per sample.
pub fn schedule_domains(
    scenario: Scenario,
    n_domains: usize,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BatchDomains>> {
    if n_domains == 0 {
        return Err(Error::InvalidArgument(
            "domain schedule needs at least one domain".to_string(),
        ));
    }
    match scenario {
        Scenario::Single | Scenario::Continual => {
            let mut out = Vec::with_capacity(n_batches);
            for t in 0..n_batches {
                // Contiguous equal segments; earlier segments absorb the
                // remainder.
                let d = (t * n_domains) / n_batches.max(1);
                out.push(BatchDomains::Whole(d.min(n_domains - 1)));
            }
            Ok(out)
        }
        Scenario::Mixed => {
            let mut gen = rng::rng_from_seed(seed);
            Ok((0..n_batches)
                .map(|_| {
                    BatchDomains::PerSample(
                        (0..batch_size).map(|_| gen.random_range(0..n_domains)).collect(),
                    )
                })
                .collect())
        }
    }
}

/// Stream construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    /// Dirichlet concentration controlling label correlation.
    pub delta: f64,
    /// Samples per Dirichlet slot.
    pub slot_size: usize,
    pub batch_size: usize,
    pub scenario: Scenario,
    pub domains: Vec<DomainShift>,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::config("delta", "must be a positive real"));
        }
        if self.slot_size == 0 {
            return Err(Error::config("slot-size", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch-size", "must be >= 1"));
        }
        if self.domains.is_empty() {
            return Err(Error::config("domains", "need at least one domain"));
        }
        let c = self.domains[0].channels();
        if self.domains.iter().any(|d| d.channels() != c) {
            return Err(Error::config("domains", "all domains must share channel count"));
        }
        Ok(())
    }
}

/// Persist an ordering with a version header.
pub fn save_order(path: &Path, order: &[usize]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{ORDER_HEADER}")?;
    writeln!(w, "n={}", order.len())?;
    for &i in order {
        writeln!(w, "{i}")?;
    }
    Ok(())
}

/// Load an ordering saved by [`save_order`].
pub fn load_order(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header = next_line(&mut lines)?;
    if header.1 != ORDER_HEADER {
        return Err(Error::parse(1, format!("expected `{ORDER_HEADER}` header")));
    }
    let (ln, nline) = next_line(&mut lines)?;
    let kv = parse_kv_line(&nline, ln)?;
    let n: usize = get_kv(&kv, "n", ln)?;
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, line) = next_line(&mut lines)?;
        order.push(
            line.trim()
                .parse::<usize>()
                .map_err(|e| Error::parse(ln, format!("bad index: {e}")))?,
        );
    }
    Ok(order)
}

// Shared text-format helpers (also used by the model checkpoint and trace
// writers). Floats print with Rust's shortest round-trip formatting, so
// save/load is lossless at full precision.

pub(crate) fn join_floats(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:e}");
    }
    s
}

pub(crate) fn next_line(
    lines: &mut impl Iterator<Item = (usize, std::io::Result<String>)>,
) -> Result<(usize, String)> {
    match lines.next() {
        Some((i, Ok(line))) => Ok((i + 1, line)),
        Some((i, Err(e))) => Err(Error::parse(i + 1, e.to_string())),
        None => Err(Error::parse(0, "unexpected end of file")),
    }
}

pub(crate) fn parse_kv_line(line: &str, ln: usize) -> Result<Vec<(String, String)>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::parse(ln, format!("expected key=value, got `{tok}`")))
        })
        .collect()
}

pub(crate) fn get_kv<T: FromStr>(kv: &[(String, String)], key: &str, ln: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = kv
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::parse(ln, format!("missing key `{key}`")))?;
    raw.parse()
        .map_err(|e| Error::parse(ln, format!("bad value for `{key}`: {e}")))
}

pub(crate) fn parse_float_field(
    line: &str,
    key: &str,
    expected: usize,
    ln: usize,
) -> Result<Vec<f64>> {
    let rest = line
        .strip_prefix(&format!("{key}="))
        .ok_or_else(|| Error::parse(ln, format!("expected `{key}=` prefix")))?;
    let values: Vec<f64> = rest
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::parse(ln, format!("bad float in `{key}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::parse(
            ln,
            format!("`{key}` has {} values, expected {expected}", values.len()),
        ));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::batch_stats;

    #[test]
    fn synth_spread_zero_samples_equal_class_mean() {
        let ds = synth_source(2, 4, 3, 5, 0.0, 1).unwrap();
        for i in 0..ds.len() {
            let m = ds.labels()[i];
            for c in 0..4 {
                for l in 0..3 {
                    let v = ds.sample(i)[c * 3 + l];
                    assert_eq!(v, ds.class_means()[m * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn synth_empirical_means_match_layout() {
        let ds = synth_source(3, 4, 2, 10_000, 0.5, 2).unwrap();
        // Standard error of each per-channel class mean over n*L draws.
        let se = 0.5 / ((10_000 * 2) as f64).sqrt();
        for m in 0..3 {
            for c in 0..4 {
                let mut acc = 0.0;
                let mut count = 0usize;
                for i in 0..ds.len() {
                    if ds.labels()[i] == m {
                        for l in 0..2 {
                            acc += ds.sample(i)[c * 2 + l];
                            count += 1;
                        }
                    }
                }
                let emp = acc / count as f64;
                let want = ds.class_means()[m * 4 + c];
                assert!(
                    (emp - want).abs() < 3.0 * se,
                    "class {m} channel {c}: {emp} vs {want}"
                );
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_source(3, 2, 2, 50, 0.3, 42).unwrap();
        let b = synth_source(3, 2, 2, 50, 0.3, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_rejects_single_class() {
        assert!(synth_source(1, 2, 2, 10, 0.1, 0).is_err());
    }

    #[test]
    fn identity_shift_is_exact_identity() {
        let ds = synth_source(2, 3, 2, 20, 0.4, 3).unwrap();
        let batch = ds.as_batch();
        let out = apply_shift(&batch, &DomainShift::identity(3, "id"), 9).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn scale_shift_maps_values() {
        let batch = FeatureBatch::new(vec![1.0, -1.0], 1, 2, 1).unwrap();
        let shift = DomainShift::new(vec![2.0, 2.0], vec![0.0, 0.0], 0.0, "x2").unwrap();
        let out = apply_shift(&batch, &shift, 0).unwrap();
        assert_eq!(out.data(), &[2.0, -2.0]);
    }

    #[test]
    fn noise_std_is_calibrated() {
        let n = 100_000usize;
        let batch = FeatureBatch::new(vec![0.0; n], 1, 1, n).unwrap();
        let shift = DomainShift::new(vec![1.0], vec![0.0], 0.1, "noisy").unwrap();
        let out = apply_shift(&batch, &shift, 7).unwrap();
        let s = batch_stats(&out);
        let emp_std = s.var[0].sqrt();
        assert!(
            (emp_std - 0.1).abs() < 0.002,
            "residual std {emp_std} vs 0.1"
        );
    }

    #[test]
    fn shifted_dataset_updates_class_moments() {
        let ds = synth_source(2, 2, 2, 500, 0.5, 5).unwrap();
        let shift = DomainShift::new(vec![2.0, 0.5], vec![1.0, -1.0], 0.3, "s").unwrap();
        let shifted = apply_shift_dataset(&ds, &shift, 11).unwrap();
        for m in 0..2 {
            for c in 0..2 {
                let i = m * 2 + c;
                assert_eq!(
                    shifted.class_means()[i],
                    shift.scale[c] * ds.class_means()[i] + shift.offset[c]
                );
                assert!(
                    (shifted.class_vars()[i]
                        - (shift.scale[c] * shift.scale[c] * 0.25 + 0.09))
                        .abs()
                        < 1e-12
                );
            }
        }
    }

    #[test]
    fn dirichlet_order_is_permutation() {
        let ds = synth_source(5, 2, 1, 37, 0.1, 8).unwrap();
        let order = dirichlet_order(ds.labels(), 5, 0.05, 16, 3).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn dirichlet_rejects_nonpositive_delta() {
        assert!(dirichlet_order(&[0, 1], 2, 0.0, 2, 0).is_err());
        assert!(dirichlet_order(&[0, 1], 2, -1.0, 2, 0).is_err());
    }

    fn slot_histograms(labels: &[usize], order: &[usize], classes: usize, slot: usize) -> Vec<Vec<usize>> {
        order
            .chunks(slot)
            .map(|chunk| {
                let mut h = vec![0usize; classes];
                for &i in chunk {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    #[test]
    fn huge_delta_gives_near_uniform_slots() {
        // Chi-square goodness-of-fit against the uniform label distribution;
        // 99th-percentile critical value for 9 degrees of freedom. The last
        // slots of a stream are constrained by pool depletion, so the slot
        // count must dwarf that tail for the 95% bound to be meaningful.
        let critical = 21.666;
        let classes = 10;
        let slot = 50;
        let labels: Vec<usize> = (0..20_000).map(|i| i % classes).collect();
        let mut ok = 0usize;
        let mut total = 0usize;
        for seed in 0..10u64 {
            let order = dirichlet_order(&labels, classes, 1e6, slot, seed).unwrap();
            for h in slot_histograms(&labels, &order, classes, slot) {
                let expected = slot as f64 / classes as f64;
                let chi2: f64 = h
                    .iter()
                    .map(|&c| {
                        let d = c as f64 - expected;
                        d * d / expected
                    })
                    .sum();
                total += 1;
                if chi2 < critical {
                    ok += 1;
                }
            }
        }
        assert!(
            ok as f64 >= 0.95 * total as f64,
            "only {ok}/{total} slots below the critical value"
        );
    }

    #[test]
    fn tiny_delta_clumps_labels() {
        let classes = 10;
        let slot = 50;
        let labels: Vec<usize> = (0..2000).map(|i| i % classes).collect();
        let mut entropies = Vec::new();
        for seed in 0..10u64 {
            let order = dirichlet_order(&labels, classes, 0.01, slot, seed).unwrap();
            for h in slot_histograms(&labels, &order, classes, slot) {
                let n: usize = h.iter().sum();
                let mut ent = 0.0;
                for &c in &h {
                    if c > 0 {
                        let p = c as f64 / n as f64;
                        ent -= p * p.ln();
                    }
                }
                entropies.push(ent / (classes as f64).ln());
            }
        }
        let mean: f64 = entropies.iter().sum::<f64>() / entropies.len() as f64;
        assert!(mean < 0.5, "mean normalized slot entropy {mean} >= 0.5");
    }

    #[test]
    fn delta_orders_total_variation_distance() {
        let classes = 5;
        let slot = 50;
        let labels: Vec<usize> = (0..1000).map(|i| i % classes).collect();
        let global = 1.0 / classes as f64;
        let mean_tv = |delta: f64| -> f64 {
            let mut tvs = Vec::new();
            for seed in 0..5u64 {
                let order = dirichlet_order(&labels, classes, delta, slot, seed).unwrap();
                for h in slot_histograms(&labels, &order, classes, slot) {
                    let n: usize = h.iter().sum();
                    let tv: f64 = h
                        .iter()
                        .map(|&c| (c as f64 / n as f64 - global).abs())
                        .sum::<f64>()
                        / 2.0;
                    tvs.push(tv);
                }
            }
            tvs.iter().sum::<f64>() / tvs.len() as f64
        };
        let tv_clumped = mean_tv(0.01);
        let tv_uniform = mean_tv(1e6);
        assert!(
            tv_uniform < tv_clumped,
            "TV at delta=1e6 ({tv_uniform}) should be below delta=0.01 ({tv_clumped})"
        );
        assert!(tv_uniform < 0.15, "near-uniform slots expected, got TV {tv_uniform}");
    }

    #[test]
    fn schedule_single_and_continual_segments() {
        let s = schedule_domains(Scenario::Single, 1, 10, 4, 0).unwrap();
        assert!(s.iter().all(|d| *d == BatchDomains::Whole(0)));
        let c = schedule_domains(Scenario::Continual, 3, 9, 4, 0).unwrap();
        let want: Vec<usize> = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let got: Vec<usize> = c
            .iter()
            .map(|d| match d {
                BatchDomains::Whole(i) => *i,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn schedule_mixed_is_roughly_uniform() {
        let batches = schedule_domains(Scenario::Mixed, 3, 100, 100, 5).unwrap();
        let mut counts = [0usize; 3];
        for b in &batches {
            match b {
                BatchDomains::PerSample(ds) => {
                    for &d in ds {
                        counts[d] += 1;
                    }
                }
                _ => unreachable!(),
            }
        }
        let total: usize = counts.iter().sum();
        assert_eq!(total, 10_000);
        for &c in &counts {
            let freq = c as f64 / total as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "domain frequency {freq}");
        }
    }

    #[test]
    fn dataset_round_trips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.txt");
        let ds = synth_source(3, 2, 2, 25, 0.37, 123).unwrap();
        ds.save(&path).unwrap();
        let back = SynthDataset::load(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn order_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("order.txt");
        let order = shuffled_order(100, 9);
        save_order(&path, &order).unwrap();
        assert_eq!(load_order(&path).unwrap(), order);
    }
}
