//! Python bindings for the core statistics primitives, the normalizers, and
//! the stream generators.
//!
//! Tensors cross the boundary as flat row-major `list[float]` buffers with
//! explicit dimensions, matching the core crate's layout.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use unmix_tns::normalizers;
use unmix_tns::stats;
use unmix_tns::stats::FeatureBatch;
use unmix_tns::streams;

fn err(e: unmix_tns::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn batch(data: Vec<f64>, b: usize, c: usize, l: usize) -> PyResult<FeatureBatch> {
    FeatureBatch::new(data, b, c, l).map_err(err)
}

/// Per-instance (mean, var) over the spatial extent, both `B x C` flat.
#[pyfunction]
fn instance_stats(data: Vec<f64>, b: usize, c: usize, l: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = stats::instance_stats(&batch(data, b, c, l)?);
    Ok((s.mean().to_vec(), s.var().to_vec()))
}

/// Per-channel (mean, var) pooled over batch and spatial dims.
#[pyfunction]
fn batch_stats(data: Vec<f64>, b: usize, c: usize, l: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = stats::batch_stats(&batch(data, b, c, l)?);
    Ok((s.mean, s.var))
}

/// Moments of a weighted mixture of `k` per-channel components.
#[pyfunction]
fn mixture_moments(
    means: Vec<f64>,
    vars: Vec<f64>,
    k: usize,
    c: usize,
    weights: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = stats::mixture_moments(&means, &vars, k, c, &weights).map_err(err)?;
    Ok((s.mean, s.var))
}

/// Cosine similarity with a zero-vector floor.
#[pyfunction]
fn cosine_sim(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    if u.len() != v.len() {
        return Err(PyValueError::new_err("operands must match in length"));
    }
    Ok(stats::cosine_sim(&u, &v))
}

/// Row-wise softmax of `sims / tau` over a `b x k` score matrix.
#[pyfunction]
fn assignment_probs(sims: Vec<f64>, b: usize, k: usize, tau: f64) -> PyResult<Vec<f64>> {
    let p = stats::assignment_probs(&sims, b, k, tau).map_err(err)?;
    Ok(p.probs().to_vec())
}

/// Batch-size-adjusted momentum `1 - (1 - lambda0)^(b/b0)`.
#[pyfunction]
fn momentum_lambda(b: usize, b0: usize, lambda0: f64) -> PyResult<f64> {
    stats::momentum_lambda(b, b0, lambda0).map_err(err)
}

/// Standardize with the batch's own per-channel statistics.
#[pyfunction]
#[pyo3(signature = (data, b, c, l, gamma, beta, eps = 1e-6))]
fn tbn_forward(
    data: Vec<f64>,
    b: usize,
    c: usize,
    l: usize,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    eps: f64,
) -> PyResult<Vec<f64>> {
    let out = normalizers::tbn_forward(&batch(data, b, c, l)?, &gamma, &beta, eps).map_err(err)?;
    Ok(out.data().to_vec())
}

/// Normalize with frozen stored statistics.
#[pyfunction]
#[pyo3(signature = (data, b, c, l, mean, var, gamma, beta, eps = 1e-6))]
#[allow(clippy::too_many_arguments)]
fn source_bn_forward(
    data: Vec<f64>,
    b: usize,
    c: usize,
    l: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    eps: f64,
) -> PyResult<Vec<f64>> {
    let src = normalizers::SourceStats::new(mean, var, gamma, beta).map_err(err)?;
    let out = normalizers::source_bn_forward(&batch(data, b, c, l)?, &src, eps).map_err(err)?;
    Ok(out.data().to_vec())
}

/// Blend stored and current-batch statistics, then normalize.
#[pyfunction]
#[pyo3(signature = (data, b, c, l, mean, var, gamma, beta, alpha_bn = 0.5, eps = 1e-6))]
#[allow(clippy::too_many_arguments)]
fn alpha_bn_forward(
    data: Vec<f64>,
    b: usize,
    c: usize,
    l: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    alpha_bn: f64,
    eps: f64,
) -> PyResult<Vec<f64>> {
    let src = normalizers::SourceStats::new(mean, var, gamma, beta).map_err(err)?;
    let out =
        normalizers::alpha_bn_forward(&batch(data, b, c, l)?, &src, alpha_bn, eps).map_err(err)?;
    Ok(out.data().to_vec())
}

/// Temporally correlated ordering of a label sequence.
#[pyfunction]
fn dirichlet_order(
    labels: Vec<usize>,
    classes: usize,
    delta: f64,
    slot_size: usize,
    seed: u64,
) -> PyResult<Vec<usize>> {
    streams::dirichlet_order(&labels, classes, delta, slot_size, seed).map_err(err)
}

/// The statistics-unmixing normalization layer with its stored affine
/// parameters.
#[pyclass]
struct UnMixLayer {
    state: normalizers::UnMixState,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

#[pymethods]
impl UnMixLayer {
    /// Initialize `k` components from stored per-channel statistics.
    #[new]
    #[pyo3(signature = (mean, var, gamma, beta, k = 16, alpha = 0.5, seed = 0, tau = 0.07, lam = 0.1, eps = 1e-6))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mean: Vec<f64>,
        var: Vec<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        k: usize,
        alpha: f64,
        seed: u64,
        tau: f64,
        lam: f64,
        eps: f64,
    ) -> PyResult<Self> {
        let src = normalizers::SourceStats::new(mean, var, gamma.clone(), beta.clone()).map_err(err)?;
        let state = normalizers::init_unmix(&src, k, alpha, seed)
            .and_then(|s| s.with_tau(tau))
            .and_then(|s| s.with_lam(lam))
            .and_then(|s| s.with_eps(eps))
            .map_err(err)?;
        Ok(Self { state, gamma, beta })
    }

    /// Normalize one `b x c x l` batch and update the components; returns
    /// the normalized flat buffer.
    fn forward(&mut self, data: Vec<f64>, b: usize, c: usize, l: usize) -> PyResult<Vec<f64>> {
        let out = self
            .state
            .forward(&batch(data, b, c, l)?, &self.gamma, &self.beta)
            .map_err(err)?;
        Ok(out.data().to_vec())
    }

    /// Uniform mixture moments of the current components.
    fn mixture(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.state.mixture();
        (s.mean, s.var)
    }

    /// `k x c` component means, flat.
    fn component_means(&self) -> Vec<f64> {
        self.state.comp_mean().to_vec()
    }

    /// `k x c` component variances, flat.
    fn component_vars(&self) -> Vec<f64> {
        self.state.comp_var().to_vec()
    }

    #[getter]
    fn k(&self) -> usize {
        self.state.components()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.state.channels()
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.state.lam()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.state.tau()
    }
}

#[pymodule]
fn unmix_tns_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(instance_stats, m)?)?;
    m.add_function(wrap_pyfunction!(batch_stats, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_moments, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(assignment_probs, m)?)?;
    m.add_function(wrap_pyfunction!(momentum_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(tbn_forward, m)?)?;
    m.add_function(wrap_pyfunction!(source_bn_forward, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bn_forward, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_order, m)?)?;
    m.add_class::<UnMixLayer>()?;
    Ok(())
}
