//! Python bindings. Clips cross the boundary as `(values, (frames, height, width))`
//! with `values` a flat list in frame-major, row-major order.

use latent_bridge::bridge::{self, Strategy, TaskKind, TaskParams};
use latent_bridge::harness::{self, RunConfig};
use latent_bridge::{metrics, worlds, Condition, Error, InvertOptions, LatentClip, Scope};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type ClipTuple = (Vec<f64>, (usize, usize, usize));

fn to_py(e: Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn clip_tuple(c: &LatentClip) -> ClipTuple {
    (c.values().to_vec(), (c.frames(), c.height(), c.width()))
}

fn parse_scope(name: &str) -> PyResult<Scope> {
    match name {
        "frame" => Ok(Scope::Frame),
        "clip" => Ok(Scope::Clip),
        _ => Err(PyValueError::new_err(format!("scope must be `frame` or `clip`, got `{name}`"))),
    }
}

#[pyclass(name = "NoiseSchedule", frozen)]
struct PySchedule {
    inner: latent_bridge::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (t_train = 1000, beta_start = 1e-4, beta_end = 0.02))]
    fn new(t_train: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let inner = latent_bridge::NoiseSchedule::linear(t_train, beta_start, beta_end).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    fn step_grid(&self, t_infer: usize) -> PyResult<Vec<usize>> {
        let g = latent_bridge::StepGrid::new(&self.inner, t_infer).map_err(to_py)?;
        Ok(g.steps().to_vec())
    }
}

#[pyclass(name = "World", frozen)]
struct PyWorld {
    inner: latent_bridge::MixtureVideoWorld,
}

#[pymethods]
impl PyWorld {
    #[new]
    #[pyo3(signature = (k = 4, frames = 8, height = 16, width = 16, sigma = 0.05, seed = 0))]
    fn new(k: usize, frames: usize, height: usize, width: usize, sigma: f64, seed: u64) -> PyResult<Self> {
        let inner = worlds::make_moving_blob_world(k, frames, height, width, sigma, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.frames(), self.inner.height(), self.inner.width())
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn component_clip(&self, k: usize) -> PyResult<ClipTuple> {
        self.inner.check_component(k).map_err(to_py)?;
        Ok(clip_tuple(&self.inner.component_clip(k)))
    }

    /// Returns `(clip, component)`.
    fn sample(&self, seed: u64) -> (ClipTuple, usize) {
        let (clip, k) = worlds::sample_data(&self.inner, seed);
        (clip_tuple(&clip), k)
    }

    /// Exact noise prediction; `component=None` is the unconditional mixture.
    #[pyo3(signature = (x, t, schedule, scope = "clip", component = None))]
    fn eps(&self, x: Vec<f64>, t: usize, schedule: &PySchedule, scope: &str, component: Option<usize>) -> PyResult<Vec<f64>> {
        let cond = component.map_or(Condition::Null, Condition::Component);
        worlds::mixture_eps(&self.inner, &x, t, &cond, parse_scope(scope)?, &schedule.inner).map_err(to_py)
    }

    fn frame_consistency(&self, values: Vec<f64>) -> PyResult<f64> {
        metrics::frame_consistency(&self.clip(values)?).map_err(to_py)
    }

    fn switch_rate(&self, values: Vec<f64>) -> PyResult<f64> {
        metrics::switch_rate(&self.inner, &self.clip(values)?).map_err(to_py)
    }
}

impl PyWorld {
    fn clip(&self, values: Vec<f64>) -> PyResult<LatentClip> {
        let (m, h, w) = self.shape();
        LatentClip::new(m, h, w, values).map_err(to_py)
    }
}

/// Runs one strategy; returns a dict with `final`, the other trace stages
/// that the strategy produces, and `metrics`.
#[pyfunction]
#[pyo3(signature = (world, schedule, task = "generation", strategy = "sequential", alpha = 0.25, seed = 0, steps = 50, guidance = 7.5, fixed_point = false))]
#[allow(clippy::too_many_arguments)]
fn run_strategy<'py>(
    py: Python<'py>,
    world: &PyWorld,
    schedule: &PySchedule,
    task: &str,
    strategy: &str,
    alpha: f64,
    seed: u64,
    steps: usize,
    guidance: f64,
    fixed_point: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = TaskKind::parse(task).map_err(to_py)?;
    let config = bridge::BridgeConfig {
        alpha,
        strategy: Strategy::parse(strategy).map_err(to_py)?,
        idm_guidance: guidance,
        vdm_guidance: guidance,
        t_infer: steps,
        invert: if fixed_point { InvertOptions::fixed_point(1e-10, 200) } else { InvertOptions::naive() },
        seed,
        alternate_idm_first: true,
    };
    let task = bridge::Task::build(kind, &world.inner, seed, &TaskParams::default()).map_err(to_py)?;
    let trace = bridge::run_strategy(&task, &world.inner, &schedule.inner, &config).map_err(to_py)?;
    let m = harness::clip_metrics(&world.inner, &task, &trace.final_clip, trace.mixed.as_ref()).map_err(to_py)?;
    let out = PyDict::new(py);
    for (name, clip) in trace.stages() {
        out.set_item(name, clip_tuple(clip))?;
    }
    let md = PyDict::new(py);
    md.set_item("frame_consistency", m.frame_consistency)?;
    md.set_item("switch_rate", m.switch_rate)?;
    md.set_item("region_switch_rate", m.region_switch_rate)?;
    md.set_item("control_match_error", m.control_match_error)?;
    md.set_item("latent_corr", m.latent_corr)?;
    out.set_item("metrics", md)?;
    Ok(out)
}

/// Runs a benchmark matrix from a JSON config; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, threads = None))]
fn run_benchmark(py: Python<'_>, config_json: &str, threads: Option<usize>) -> PyResult<String> {
    let config = RunConfig::from_json(config_json).map_err(to_py)?;
    py.detach(|| harness::run_benchmark(&config, threads).and_then(|r| r.to_json()))
        .map_err(to_py)
}

#[pymodule]
fn latent_bridge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyWorld>()?;
    m.add_function(wrap_pyfunction!(run_strategy, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add("__version__", latent_bridge::TOOL_VERSION)?;
    Ok(())
}
