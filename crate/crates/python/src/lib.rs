//! Python bindings: episode simulation, pipeline runs, suites and the FLOPs
//! model. Structured results cross the boundary as Python dicts.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use specprune_core::controller::{self, ActionMode};
use specprune_core::flops;
use specprune_core::harness::{self, RunConfig};
use specprune_core::pipeline::{PrunerConfig, Strategy};
use specprune_core::runner;
use specprune_core::sim::{self, SceneSpec, TrajectorySpec};
use specprune_core::static_pruner::{self, OffsetFormula};
use specprune_core::{Error, ModelConfig};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn scale(name: &str) -> PyResult<(ModelConfig, SceneSpec)> {
    match name {
        "small" => Ok((ModelConfig::small(), SceneSpec::small())),
        "paper" => Ok((ModelConfig::bench(), SceneSpec::paper())),
        other => Err(PyValueError::new_err(format!("unknown scale {other:?}; expected small or paper"))),
    }
}

#[pyclass(module = "specprune", name = "Model", frozen)]
struct PyModel {
    inner: specprune_core::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (num_layers=8, hidden_dim=32, num_heads=4, ffn_dim=64, seed=0))]
    fn new(num_layers: usize, hidden_dim: usize, num_heads: usize, ffn_dim: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig { num_layers, hidden_dim, num_heads, ffn_dim, seed };
        Ok(Self { inner: specprune_core::Model::build(cfg).map_err(err)? })
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.config().num_layers
    }

    #[getter]
    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    /// Multiply-accumulates of one layer over `tokens` active tokens.
    fn layer_macs(&self, tokens: usize) -> u64 {
        self.inner.layer_macs(tokens)
    }
}

#[pyclass(module = "specprune", name = "Episode", frozen)]
struct PyEpisode {
    inner: sim::Episode,
}

#[pymethods]
impl PyEpisode {
    /// Simulates one episode at the `small` or `paper` scale.
    #[staticmethod]
    #[pyo3(signature = (scale_name="small", seed=0, steps=None, tau=0.95))]
    fn generate(scale_name: &str, seed: u64, steps: Option<usize>, tau: f64) -> PyResult<Self> {
        let (_, scene) = scale(scale_name)?;
        let scene = SceneSpec { seed, ..scene };
        let traj = TrajectorySpec::randomized(seed);
        let steps = steps.unwrap_or(traj.total_steps());
        Ok(Self { inner: sim::generate_episode(&scene, &traj, steps, tau).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: sim::Episode::load(&path).map_err(err)? })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn visual_tokens(&self) -> usize {
        self.inner.layout.visual_len()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.layout.seq_len()
    }

    /// Ground-truth important token indices at `step`.
    fn important(&self, step: usize) -> PyResult<Vec<usize>> {
        let st = self.inner.steps.get(step).ok_or_else(|| PyValueError::new_err("step out of range"))?;
        Ok(st.truth.important.iter().copied().collect())
    }

    /// Action-oracle error when only `retained` tokens are kept.
    fn oracle_error(&self, step: usize, retained: Vec<usize>) -> PyResult<f64> {
        if step >= self.inner.len() {
            return Err(PyValueError::new_err("step out of range"));
        }
        Ok(sim::action_oracle(&self.inner, step, &retained.into_iter().collect()).error)
    }
}

/// Runs one episode through the pipeline and returns per-step metrics.
#[pyfunction]
#[pyo3(signature = (model, episode, strategy="specprune", alpha=1.0, tau=0.95, k_dynamic=16, seed=0))]
fn run_episode<'py>(
    py: Python<'py>,
    model: &PyModel,
    episode: &PyEpisode,
    strategy: &str,
    alpha: f64,
    tau: f64,
    k_dynamic: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = PrunerConfig { alpha, tau, k_dynamic, ..PrunerConfig::default() };
    let strategy = Strategy::preset(strategy).map_err(err)?;
    let run = py
        .detach(|| runner::run_episode(&model.inner, &episode.inner, &cfg, &strategy, seed))
        .map_err(err)?;
    to_py(py, &run.steps)
}

/// Runs a suite from a TOML config string; returns the summary report.
#[pyfunction]
fn run_suite<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = RunConfig::from_toml_str(config_toml).map_err(err)?;
    let out = py.detach(|| harness::run_suite(&cfg, false)).map_err(err)?;
    to_py(py, &out.report)
}

#[pyfunction]
#[pyo3(signature = (v_t, history_len, unscaled=false))]
fn frame_offset(v_t: f64, history_len: usize, unscaled: bool) -> usize {
    let f = if unscaled { OffsetFormula::Unscaled } else { OffsetFormula::Scaled };
    static_pruner::frame_offset(v_t, history_len, f)
}

#[pyfunction]
fn k_base(fine: bool, alpha: f64) -> usize {
    controller::k_base(if fine { ActionMode::Fine } else { ActionMode::Coarse }, alpha)
}

#[pyfunction]
fn layer_flops(tokens: u64, hidden: u64, ffn: u64) -> u128 {
    flops::layer_flops(tokens, hidden, ffn)
}

#[pyfunction]
fn reduction_estimate(num_layers: usize, static_retention: f64, dynamic_avg: f64) -> f64 {
    flops::paper_reduction_estimate(num_layers, static_retention, dynamic_avg)
}

/// Exact FLOPs breakdown for a per-layer token trajectory.
#[pyfunction]
fn exact_reduction<'py>(
    py: Python<'py>,
    trajectory: Vec<u64>,
    full_tokens: u64,
    hidden: u64,
    ffn: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let n = trajectory.len();
    let b = flops::exact_reduction(&trajectory, full_tokens, n, hidden, ffn).map_err(err)?;
    to_py(py, &b)
}

#[pymodule]
fn specprune(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyEpisode>()?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(frame_offset, m)?)?;
    m.add_function(wrap_pyfunction!(k_base, m)?)?;
    m.add_function(wrap_pyfunction!(layer_flops, m)?)?;
    m.add_function(wrap_pyfunction!(reduction_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(exact_reduction, m)?)?;
    m.add("STRATEGIES", Strategy::PRESETS.to_vec())?;
    Ok(())
}
