//! Metrics traces: one record per streamed batch, serialized as a
//! self-describing text table with a version header.

use crate::error::{Error, Result};
use crate::normalizers::NormKind;
use crate::streams::Scenario;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

const TRACE_HEADER: &str = "unmix-tns-trace v1";

/// Per-batch measurements of an online run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub scenario: Scenario,
    pub norm: NormKind,
    /// Fraction of this batch misclassified.
    pub batch_error: f64,
    /// Fraction of all samples seen so far misclassified.
    pub cumulative_error: f64,
    /// Per-layer L2 gap between the normalizer's current mean belief and
    /// the oracle mean.
    pub bias_l2: Vec<f64>,
    pub wall_time_us: u64,
}

/// A complete run trace plus the provenance carried in the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTrace {
    pub config_hash: u64,
    pub code_version: String,
    pub layers: usize,
    pub records: Vec<TraceRecord>,
}

impl MetricsTrace {
    /// Final cumulative error of the run (1.0 for an empty trace).
    pub fn final_cumulative_error(&self) -> f64 {
        self.records.last().map(|r| r.cumulative_error).unwrap_or(1.0)
    }

    /// Mean per-layer bias over a half-open record range.
    pub fn mean_bias_l2(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let mut acc = vec![0.0; self.layers];
        let mut count = 0usize;
        for r in &self.records[range] {
            for (a, &b) in acc.iter_mut().zip(r.bias_l2.iter()) {
                *a += b;
            }
            count += 1;
        }
        if count > 0 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
        }
        acc
    }

    /// Serialize. With `include_timing = false` (the reproducible default
    /// of the CLI) the wall-time column is written as zero so that repeated
    /// runs of one configuration produce byte-identical files.
    pub fn write_to(&self, w: &mut impl Write, include_timing: bool) -> Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        writeln!(w, "config_hash={:016x}", self.config_hash)?;
        writeln!(w, "code_version={}", self.code_version)?;
        writeln!(w, "layers={}", self.layers)?;
        write!(w, "columns=t scenario norm batch_error cumulative_error")?;
        for i in 0..self.layers {
            write!(w, " bias_l2_{i}")?;
        }
        writeln!(w, " wall_time_us")?;
        for r in &self.records {
            write!(
                w,
                "{} {} {} {:e} {:e}",
                r.t, r.scenario, r.norm, r.batch_error, r.cumulative_error
            )?;
            for b in &r.bias_l2 {
                write!(w, " {b:e}")?;
            }
            let wall = if include_timing { r.wall_time_us } else { 0 };
            writeln!(w, " {wall}")?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<MetricsTrace> {
        let mut lines = r.lines().enumerate();
        let (_, header) = crate::streams::next_line(&mut lines)?;
        if header != TRACE_HEADER {
            return Err(Error::parse(1, format!("expected `{TRACE_HEADER}` header")));
        }
        let (ln, line) = crate::streams::next_line(&mut lines)?;
        let config_hash = line
            .strip_prefix("config_hash=")
            .ok_or_else(|| Error::parse(ln, "expected config_hash"))
            .and_then(|h| {
                u64::from_str_radix(h, 16).map_err(|e| Error::parse(ln, format!("bad hash: {e}")))
            })?;
        let (ln, line) = crate::streams::next_line(&mut lines)?;
        let code_version = line
            .strip_prefix("code_version=")
            .ok_or_else(|| Error::parse(ln, "expected code_version"))?
            .to_string();
        let (ln, line) = crate::streams::next_line(&mut lines)?;
        let kv = crate::streams::parse_kv_line(&line, ln)?;
        let layers: usize = crate::streams::get_kv(&kv, "layers", ln)?;
        let (_, _columns) = crate::streams::next_line(&mut lines)?;

        let mut records = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            let line = line.map_err(|e| Error::parse(ln, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let want = 6 + layers;
            if toks.len() != want {
                return Err(Error::parse(
                    ln,
                    format!("expected {want} columns, got {}", toks.len()),
                ));
            }
            let t: usize = toks[0]
                .parse()
                .map_err(|e| Error::parse(ln, format!("bad t: {e}")))?;
            let scenario = Scenario::from_str(toks[1])?;
            let norm = NormKind::from_str(toks[2])?;
            let batch_error: f64 = toks[3]
                .parse()
                .map_err(|e| Error::parse(ln, format!("bad batch_error: {e}")))?;
            let cumulative_error: f64 = toks[4]
                .parse()
                .map_err(|e| Error::parse(ln, format!("bad cumulative_error: {e}")))?;
            let mut bias_l2 = Vec::with_capacity(layers);
            for tok in &toks[5..5 + layers] {
                bias_l2.push(
                    tok.parse::<f64>()
                        .map_err(|e| Error::parse(ln, format!("bad bias: {e}")))?,
                );
            }
            let wall_time_us: u64 = toks[5 + layers]
                .parse()
                .map_err(|e| Error::parse(ln, format!("bad wall time: {e}")))?;
            records.push(TraceRecord {
                t,
                scenario,
                norm,
                batch_error,
                cumulative_error,
                bias_l2,
                wall_time_us,
            });
        }
        Ok(MetricsTrace {
            config_hash,
            code_version,
            layers,
            records,
        })
    }

    pub fn save(&self, path: &Path, include_timing: bool) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w, include_timing)
    }

    pub fn load(path: &Path) -> Result<MetricsTrace> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace() -> MetricsTrace {
        MetricsTrace {
            config_hash: 0xdeadbeef01234567,
            code_version: "0.1.0".to_string(),
            layers: 2,
            records: (0..5)
                .map(|t| TraceRecord {
                    t,
                    scenario: Scenario::Continual,
                    norm: NormKind::UnMix,
                    batch_error: 0.25 + t as f64 * 0.01,
                    cumulative_error: 0.3 - t as f64 * 0.001,
                    bias_l2: vec![1.5e-3 * t as f64, 0.7],
                    wall_time_us: 42 + t as u64,
                })
                .collect(),
        }
    }

    #[test]
    fn round_trips_losslessly_with_timing() {
        let trace = sample_trace();
        let mut buf = Vec::new();
        trace.write_to(&mut buf, true).unwrap();
        let back = MetricsTrace::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(trace, back);
    }

    #[test]
    fn timing_is_zeroed_by_default() {
        let trace = sample_trace();
        let mut buf = Vec::new();
        trace.write_to(&mut buf, false).unwrap();
        let back = MetricsTrace::read_from(&mut buf.as_slice()).unwrap();
        assert!(back.records.iter().all(|r| r.wall_time_us == 0));
        // Everything except timing survives.
        for (a, b) in trace.records.iter().zip(&back.records) {
            assert_eq!(a.batch_error, b.batch_error);
            assert_eq!(a.cumulative_error, b.cumulative_error);
            assert_eq!(a.bias_l2, b.bias_l2);
        }
    }

    #[test]
    fn mean_bias_over_ranges() {
        let trace = sample_trace();
        let first = trace.mean_bias_l2(0..2);
        assert!((first[0] - 0.75e-3).abs() < 1e-12);
        assert_eq!(first[1], 0.7);
    }
}
