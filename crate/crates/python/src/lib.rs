//! Python bindings: the core math operations plus the four pipeline stages.
//!
//! Pipeline functions return JSON strings (parse with `json.loads`) so the
//! report schemas match the CLI artifacts exactly.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use flowrec_core::config::RunConfig;
use flowrec_core::data::Vocab;
use flowrec_core::error::Error;
use flowrec_core::evaluation;
use flowrec_core::gmflow;
use flowrec_core::pipeline;
use flowrec_core::tensor::Tensor;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn load_config(path: &str, seed: Option<u64>, threads: Option<usize>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::load(Path::new(path)).map_err(to_py_err)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(threads) = threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn json_string<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

// ── Math operations ──────────────────────────────────────────────────

/// Standard causal mask as a list of 0/1 rows.
#[pyfunction]
fn build_di_mask(m: usize) -> PyResult<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(PyValueError::new_err("mask size must be >= 1"));
    }
    let t = flowrec_core::encoder::build_di_mask(m);
    Ok((0..m).map(|r| t.row(r).to_vec()).collect())
}

/// Same-domain causal mask for a domain sequence.
#[pyfunction]
fn build_ds_mask(domains: Vec<u16>) -> PyResult<Vec<Vec<f64>>> {
    if domains.is_empty() {
        return Err(PyValueError::new_err("domain sequence must be non-empty"));
    }
    let m = domains.len();
    let t = flowrec_core::encoder::build_ds_mask(&domains);
    Ok((0..m).map(|r| t.row(r).to_vec()).collect())
}

/// Straight-line interpolation (1 - t) x0 + t x1.
#[pyfunction]
fn interpolate(x0: Vec<f64>, x1: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    gmflow::interpolate(&Tensor::vector(x0), &Tensor::vector(x1), t)
        .map(|v| v.data().to_vec())
        .map_err(to_py_err)
}

/// Fused latent lambda * xt + (1 - lambda) * x1.
#[pyfunction]
fn fuse_latent(xt: Vec<f64>, x1: Vec<f64>, lambda: f64) -> PyResult<Vec<f64>> {
    gmflow::fuse_latent(&Tensor::vector(xt), &Tensor::vector(x1), lambda)
        .map(|v| v.data().to_vec())
        .map_err(to_py_err)
}

/// Negative log-likelihood of `target` under a spherical Gaussian mixture.
#[pyfunction]
fn gmm_nll(
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    scales: Vec<f64>,
    target: Vec<f64>,
) -> PyResult<f64> {
    let k = means.len();
    if k == 0 || weights.len() != k || scales.len() != k {
        return Err(PyValueError::new_err("weights/means/scales must share K"));
    }
    let d = means[0].len();
    if means.iter().any(|m| m.len() != d) {
        return Err(PyValueError::new_err("means rows must share one dimension"));
    }
    if weights.iter().any(|&w| w <= 0.0) || scales.iter().any(|&s| s <= 0.0) {
        return Err(PyValueError::new_err("weights and scales must be positive"));
    }
    let flat: Vec<f64> = means.into_iter().flatten().collect();
    let means = Tensor::new(vec![k, d], flat).map_err(to_py_err)?;
    let mean = gmflow::mixture_mean(&weights, &means).map_err(to_py_err)?;
    let mix = gmflow::GaussianMixtureOutput {
        logits: weights.iter().map(|w| w.ln()).collect(),
        weights,
        means,
        scales,
        mean,
    };
    gmflow::gmm_nll(&mix, &Tensor::vector(target)).map_err(to_py_err)
}

/// Fraction of instances ranked within the top k (1-based ranks).
#[pyfunction]
fn hit_rate(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    evaluation::hit_rate(&ranks, k).map_err(to_py_err)
}

/// Mean single-relevant-item NDCG@k over 1-based ranks.
#[pyfunction]
fn ndcg(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    evaluation::ndcg(&ranks, k).map_err(to_py_err)
}

/// Fraction of adjacent positions that change domain.
#[pyfunction]
fn transition_rate(domains: Vec<u16>) -> f64 {
    evaluation::transition_rate(&domains)
}

// ── Pipeline stages ──────────────────────────────────────────────────

/// Generate a synthetic interaction log; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config, out_dir, seed=None))]
fn synth(config: &str, out_dir: &str, seed: Option<u64>) -> PyResult<String> {
    let cfg = load_config(config, seed, None)?;
    let manifest = pipeline::run_synth(&cfg, Path::new(out_dir)).map_err(to_py_err)?;
    json_string(&manifest)
}

/// Ingest + k-core filter + split; writes the split directory and returns
/// counts as JSON.
#[pyfunction]
#[pyo3(signature = (config, raw, out_dir, seed=None))]
fn preprocess(config: &str, raw: &str, out_dir: &str, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = load_config(config, seed, None)?;
    cfg.data.raw_path = Some(raw.to_string());
    let data = pipeline::load_or_prepare(&cfg, None).map_err(to_py_err)?;
    pipeline::save_split(Path::new(out_dir), &data, &cfg.hash()).map_err(to_py_err)?;
    json_string(&serde_json::json!({
        "users": data.split.users.len(),
        "train": data.split.train.len(),
        "validation": data.split.validation.len(),
        "test": data.split.test.len(),
        "num_items": data.vocab.num_items(),
        "num_domains": data.vocab.num_domains,
    }))
}

fn resolve_data(cfg: &RunConfig, split_dir: Option<&str>) -> PyResult<pipeline::PreparedData> {
    pipeline::load_or_prepare(cfg, split_dir.map(Path::new)).map_err(to_py_err)
}

/// Train and evaluate on the test split; returns the test report as JSON.
#[pyfunction]
#[pyo3(signature = (config, out_dir, split_dir=None, seed=None, threads=None))]
fn train(
    config: &str,
    out_dir: &str,
    split_dir: Option<&str>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> PyResult<String> {
    let cfg = load_config(config, seed, threads)?;
    let data = resolve_data(&cfg, split_dir)?;
    let artifacts = pipeline::run_train(&cfg, &data, Path::new(out_dir)).map_err(to_py_err)?;
    json_string(&artifacts.report)
}

/// Evaluate a checkpoint; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, split_dir=None, group=false, few_shot=false, timing=false, steps=None, seed=None, threads=None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    config: &str,
    checkpoint: &str,
    split_dir: Option<&str>,
    group: bool,
    few_shot: bool,
    timing: bool,
    steps: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> PyResult<String> {
    let cfg = load_config(config, seed, threads)?;
    let data = resolve_data(&cfg, split_dir)?;
    let model =
        pipeline::load_model(&cfg, &data.vocab, Path::new(checkpoint)).map_err(to_py_err)?;
    let flags = pipeline::EvalFlags {
        group,
        few_shot,
        timing,
        steps,
        dump_ranks: None::<PathBuf>,
    };
    let report = pipeline::run_eval(&cfg, &model, &data, &flags).map_err(to_py_err)?;
    json_string(&report)
}

/// Item vocabulary summary of a split directory, as JSON.
#[pyfunction]
fn split_info(split_dir: &str) -> PyResult<String> {
    let data = pipeline::load_split(Path::new(split_dir)).map_err(to_py_err)?;
    let vocab: &Vocab = &data.vocab;
    json_string(&serde_json::json!({
        "num_items": vocab.num_items(),
        "num_domains": vocab.num_domains,
        "domain_sizes": (0..vocab.num_domains)
            .map(|d| vocab.domain_size(d as u16))
            .collect::<Vec<_>>(),
        "users": data.split.users.len(),
        "train": data.split.train.len(),
        "test": data.split.test.len(),
    }))
}

#[pymodule]
fn flowrec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(build_di_mask, m)?)?;
    m.add_function(wrap_pyfunction!(build_ds_mask, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_latent, m)?)?;
    m.add_function(wrap_pyfunction!(gmm_nll, m)?)?;
    m.add_function(wrap_pyfunction!(hit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(transition_rate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(split_info, m)?)?;
    Ok(())
}
