//! Python bindings: run configuration, training sessions, rendering and the
//! small numeric building blocks, with tensors passed as `(shape, values)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybrid_sds::io::clip;
use hybrid_sds::io::config::{parse_config, Profile, RunConfig};
use hybrid_sds::io::session;
use hybrid_sds::render::{self, Camera, RenderOptions};
use hybrid_sds::scene::{self, GridConfig};
use hybrid_sds::scheduler::LogRecord;
use hybrid_sds::synthetic::SyntheticScene;
use hybrid_sds::{guidance, Error, Tensor};

/// A tensor as Python sees it.
pub type Flat = (Vec<usize>, Vec<f32>);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::OutOfRange { .. } | Error::DegeneratePose(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn flat(t: Tensor) -> Flat {
    (t.shape().to_vec(), t.into_data())
}

fn tensor((shape, data): Flat) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

/// Renders `model` from an orbit pose.
pub fn render_view(
    model: &render::RadianceModel,
    azimuth: f32,
    elevation: f32,
    time: f32,
    size: (usize, usize),
    samples: usize,
) -> hybrid_sds::Result<Flat> {
    let cam = Camera::orbit(azimuth, elevation, 1.8, 50.0, size)?;
    let img = render::render_image(
        model,
        &cam,
        time,
        &RenderOptions::deterministic(samples),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    Ok(flat(img.rgb))
}

/// `hash_index` after validating the grid.
pub fn checked_hash_index(coords: &[u32], level: usize, config: &GridConfig) -> hybrid_sds::Result<usize> {
    config.validate()?;
    scene::hash_index(coords, level, config)
}

/// Renders a procedural scene from the same orbit pose as [`render_view`].
pub fn render_synthetic_view(
    scene: &SyntheticScene,
    azimuth: f32,
    elevation: f32,
    time: f32,
    size: (usize, usize),
    samples: usize,
) -> hybrid_sds::Result<Flat> {
    let cam = Camera::orbit(azimuth, elevation, 1.8, 50.0, size)?;
    let img = scene.render(&cam, time, &RenderOptions::deterministic(samples), &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(flat(img.rgb))
}

/// Run configuration; the text form is `key = value` lines.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (profile = "desk"))]
    fn new(profile: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::defaults(Profile::parse(profile).map_err(to_py)?),
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_config(text).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Hex SHA-256 of the text form.
    fn hash(&self) -> String {
        self.inner.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn prompt(&self) -> String {
        self.inner.prompt.clone()
    }

    #[setter]
    fn set_prompt(&mut self, v: String) {
        self.inner.prompt = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn iterations(&self) -> [u64; 3] {
        self.inner.stages.iterations
    }

    #[setter]
    fn set_iterations(&mut self, v: [u64; 3]) {
        self.inner.stages.iterations = v;
    }

    #[getter]
    fn probabilities(&self) -> (f64, f64) {
        (self.inner.stages.p_3d, self.inner.stages.p_img)
    }

    #[setter]
    fn set_probabilities(&mut self, p: (f64, f64)) {
        (self.inner.stages.p_3d, self.inner.stages.p_img) = p;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(profile={}, iterations={:?})",
            self.inner.profile.as_str(),
            self.inner.stages.iterations
        )
    }
}

fn record_dict<'py>(py: Python<'py>, r: &LogRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iteration", r.iteration)?;
    d.set_item("stage", r.stage)?;
    d.set_item("kind", r.kind.as_str())?;
    d.set_item("t_d", r.t_d)?;
    d.set_item("residual_norm", r.residual_norm)?;
    d.set_item("adapter_loss", r.adapter_loss)?;
    Ok(d)
}

/// A training run: model, loop state and guidance models.
#[pyclass(name = "Session", unsendable)]
pub struct PySession {
    inner: session::Session,
}

#[pymethods]
impl PySession {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: session::Session::new(config.inner.clone()).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: session::Session::load(&path).map_err(to_py)?,
        })
    }

    /// Runs up to `n` iterations and returns their log records.
    #[pyo3(signature = (n = 1))]
    fn step<'py>(&mut self, py: Python<'py>, n: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let stop = self.inner.trainer.state.iteration.saturating_add(n);
        let log = self.inner.run_until(stop, None, &mut |_| {}).map_err(to_py)?;
        log.iter().map(|r| record_dict(py, r)).collect()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.trainer.state.iteration
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.inner.trainer.state.stage(&self.inner.config.stages)
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.trainer.finished()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn checkpoint_bytes(&self) -> Vec<u8> {
        self.inner.checkpoint().to_bytes()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner
            .trainer
            .parameter_snapshot()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// `[H, W, 3]` render from an orbit pose at radius 1.8, fov 50°.
    #[pyo3(signature = (azimuth, elevation, time, width = 32, height = 32, samples = 64))]
    fn render(&self, azimuth: f32, elevation: f32, time: f32, width: usize, height: usize, samples: usize) -> PyResult<Flat> {
        render_view(&self.inner.trainer.model, azimuth, elevation, time, (width, height), samples).map_err(to_py)
    }
}

/// Composites one ray; returns `(color, opacity, depth)`.
#[pyfunction]
fn composite(
    density: Vec<f32>,
    colors: Vec<[f32; 3]>,
    deltas: Vec<f32>,
    depths: Vec<f32>,
    background: [f32; 3],
) -> PyResult<([f32; 3], f32, f32)> {
    let c = render::composite(&density, &colors, &deltas, &depths, background).map_err(to_py)?;
    Ok((c.color, c.opacity, c.depth))
}

#[pyfunction]
#[pyo3(signature = (coords, level, levels, base_resolution, per_level_scale, table_size, features_per_level = 2, time_base_resolution = None))]
#[allow(clippy::too_many_arguments)]
fn hash_index(
    coords: Vec<u32>,
    level: usize,
    levels: usize,
    base_resolution: usize,
    per_level_scale: f64,
    table_size: usize,
    features_per_level: usize,
    time_base_resolution: Option<usize>,
) -> PyResult<usize> {
    let config = GridConfig {
        levels,
        features_per_level,
        base_resolution,
        per_level_scale,
        table_size,
        time_base_resolution,
    };
    checked_hash_index(&coords, level, &config).map_err(to_py)
}

#[pyfunction]
fn add_noise(x: Flat, alpha_bar: f64, eps: Flat) -> PyResult<Flat> {
    Ok(flat(guidance::add_noise(&tensor(x)?, alpha_bar, &tensor(eps)?).map_err(to_py)?))
}

/// `100 · max(0, cos(text, image))`.
#[pyfunction]
fn frame_score(text: Vec<f32>, image: Vec<f32>) -> PyResult<f64> {
    clip::frame_score(&text, &image).map_err(to_py)
}

#[pyfunction]
fn psnr(a: Flat, b: Flat) -> PyResult<f64> {
    hybrid_sds::synthetic::psnr(&tensor(a)?, &tensor(b)?, None).map_err(to_py)
}

/// Renders a built-in procedural scene (`sphere`, `moving`, `changing`).
#[pyfunction]
#[pyo3(signature = (name, azimuth, elevation, time, width = 32, height = 32, samples = 64))]
#[allow(clippy::too_many_arguments)]
fn render_synthetic(
    name: &str,
    azimuth: f32,
    elevation: f32,
    time: f32,
    width: usize,
    height: usize,
    samples: usize,
) -> PyResult<Flat> {
    let scene = SyntheticScene::builtin(name).map_err(to_py)?;
    render_synthetic_view(&scene, azimuth, elevation, time, (width, height), samples).map_err(to_py)
}

#[pymodule]
fn hybrid_sds_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(composite, m)?)?;
    m.add_function(wrap_pyfunction!(hash_index, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(frame_score, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(render_synthetic, m)?)?;
    Ok(())
}
