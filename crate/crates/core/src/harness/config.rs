//! Experiment configuration, flat key=value config files, and config
//! fingerprinting for trace headers.

use crate::error::{Error, Result};
use crate::normalizers::{NormKind, NormParams};
use crate::streams::{DomainShift, Scenario, StreamConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Synthetic test-data parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub input_channels: usize,
    pub spatial: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            input_channels: 8,
            spatial: 4,
            n_per_class: 1280,
            spread: 0.35,
            seed: 1234,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "must be >= 2"));
        }
        if self.input_channels == 0 || self.spatial == 0 {
            return Err(Error::config("input-channels", "dims must be >= 1"));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("n-per-class", "must be >= 1"));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(Error::config("spread", "must be a nonnegative real"));
        }
        Ok(())
    }
}

/// Everything one experiment run needs besides the trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub norm: NormKind,
    pub params: NormParams,
    pub stream: StreamConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Defaults for a scenario, with the preset domain shifts.
    pub fn default_for(scenario: Scenario) -> Self {
        let data = DataConfig::default();
        Self {
            norm: NormKind::UnMix,
            params: NormParams::default(),
            stream: StreamConfig {
                delta: 0.1,
                slot_size: 64,
                batch_size: 64,
                scenario,
                domains: default_domains(data.input_channels, scenario),
                seed: 0,
            },
            data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.stream.validate()?;
        self.data.validate()?;
        if self.stream.domains[0].channels() != self.data.input_channels {
            return Err(Error::config(
                "domains",
                format!(
                    "domain shifts have {} channels, data has {}",
                    self.stream.domains[0].channels(),
                    self.data.input_channels
                ),
            ));
        }
        let n = self.data.classes * self.data.n_per_class;
        if n < self.stream.batch_size {
            return Err(Error::config(
                "batch-size",
                format!("batch size {} exceeds dataset size {n}", self.stream.batch_size),
            ));
        }
        Ok(())
    }

    /// Canonical flat rendering of the configuration; the config hash in
    /// every trace header is the FNV-1a digest of this string.
    pub fn canonical_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "norm={}", self.norm);
        let _ = writeln!(s, "scenario={}", self.stream.scenario);
        let _ = writeln!(s, "delta={:e}", self.stream.delta);
        let _ = writeln!(s, "slot-size={}", self.stream.slot_size);
        let _ = writeln!(s, "batch-size={}", self.stream.batch_size);
        let _ = writeln!(s, "seed={}", self.stream.seed);
        let _ = writeln!(s, "k={}", self.params.components);
        let _ = writeln!(s, "alpha={:e}", self.params.alpha);
        let _ = writeln!(s, "tau={:e}", self.params.tau);
        let _ = writeln!(s, "eps={:e}", self.params.eps);
        let _ = writeln!(s, "lambda0={:e}", self.params.lambda0);
        let _ = writeln!(s, "base-batch={}", self.params.base_batch);
        let _ = writeln!(s, "alpha-bn={:e}", self.params.alpha_bn);
        let _ = writeln!(s, "ema-momentum={:e}", self.params.ema_momentum);
        let _ = writeln!(s, "classes={}", self.data.classes);
        let _ = writeln!(s, "input-channels={}", self.data.input_channels);
        let _ = writeln!(s, "spatial={}", self.data.spatial);
        let _ = writeln!(s, "n-per-class={}", self.data.n_per_class);
        let _ = writeln!(s, "spread={:e}", self.data.spread);
        let _ = writeln!(s, "data-seed={}", self.data.seed);
        for d in &self.stream.domains {
            let _ = writeln!(
                s,
                "domain={} scale={} offset={} noise={:e}",
                d.id,
                crate::streams::join_floats(&d.scale),
                crate::streams::join_floats(&d.offset),
                d.noise_std
            );
        }
        s
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a(self.canonical_kv().as_bytes())
    }
}

/// The preset parametric shifts used when no explicit domains are given:
/// one moderate shift for single-domain runs, three contrasting shifts for
/// continual and mixed runs.
pub fn default_domains(channels: usize, scenario: Scenario) -> Vec<DomainShift> {
    let a = DomainShift::new(
        vec![1.3; channels],
        vec![0.4; channels],
        0.05,
        "scale-up",
    )
    .expect("preset is valid");
    let b = DomainShift::new(
        vec![0.75; channels],
        vec![-0.3; channels],
        0.1,
        "scale-down",
    )
    .expect("preset is valid");
    let c = DomainShift::new(
        (0..channels)
            .map(|i| if i % 2 == 0 { 1.25 } else { 0.8 })
            .collect(),
        vec![0.2; channels],
        0.05,
        "alternating",
    )
    .expect("preset is valid");
    match scenario {
        Scenario::Single => vec![a],
        Scenario::Continual | Scenario::Mixed => vec![a, b, c],
    }
}

/// Parse a flat `key=value` config file. `#` starts a comment; blank lines
/// are ignored. Keys mirror the CLI flag names.
pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, got `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_any_field() {
        let base = ExperimentConfig::default_for(Scenario::Single);
        let mut other = base.clone();
        other.stream.delta = 0.2;
        assert_ne!(base.config_hash(), other.config_hash());
        let mut other = base.clone();
        other.norm = NormKind::Tbn;
        assert_ne!(base.config_hash(), other.config_hash());
        assert_eq!(base.config_hash(), base.clone().config_hash());
    }

    #[test]
    fn validation_reports_fields() {
        let mut cfg = ExperimentConfig::default_for(Scenario::Single);
        cfg.stream.delta = -1.0;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "delta"),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut cfg = ExperimentConfig::default_for(Scenario::Single);
        cfg.data.n_per_class = 1;
        cfg.data.classes = 2;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "batch-size"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn kv_file_parses_comments_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "# comment\nnorm=tbn\n\ndelta = 0.1 # inline\n").unwrap();
        let map = parse_kv_file(&path).unwrap();
        assert_eq!(map.get("norm").unwrap(), "tbn");
        assert_eq!(map.get("delta").unwrap(), "0.1");
    }
}
