//! Test-time normalization under temporally correlated (non-i.i.d.) streams.
//!
//! The crate has five parts:
//!
//! - [`stats`]: statistics primitives shared by every normalizer — instance
//!   and batch moments, Gaussian-mixture moment composition, cosine
//!   similarity, the assignment softmax, and the batch-size momentum
//!   schedule.
//! - [`normalizers`]: the statistics-unmixing normalization layer
//!   ([`normalizers::UnMixState`]) together with the source-BN, TBN,
//!   alpha-BN, and EMA-BN baselines behind one pluggable slot type.
//! - [`streams`]: synthetic datasets, parametric domain shifts, and
//!   Dirichlet-correlated stream ordering.
//! - [`toynet`]: a small feedforward classifier with normalization slots,
//!   trained from scratch to produce stored source statistics.
//! - [`harness`]: experiment orchestration, bias measurement against
//!   ground-truth oracles, metrics traces, and parameter sweeps.
//!
//! The `unmix-tns` binary exposes the harness as a CLI with `train-source`,
//! `run`, `bias-trace`, and `sweep` subcommands.

pub mod error;
pub mod harness;
pub mod normalizers;
pub mod rng;
pub mod stats;
pub mod streams;
pub mod toynet;

pub use error::{Error, Result};
