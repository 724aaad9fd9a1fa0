//! Python bindings for config validation, FLOPs counting, checkpoint
//! inspection and f32 inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use unifiedface::checkpoint;
use unifiedface::config::{hex, RunConfig};
use unifiedface::heads::Selection;
use unifiedface::model::Model;
use unifiedface::nn::{init_params, ParamRegistry};
use unifiedface::profile;
use unifiedface::rng::Rng;
use unifiedface::task::Task;
use unifiedface::tensor::{Component, Tape, Tensor, Var};
use unifiedface::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Checkpoint(_)
        | Error::ShapeMismatch { .. }
        | Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn run_config(text: Option<&str>) -> PyResult<RunConfig> {
    match text {
        Some(t) => RunConfig::parse(t).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

/// Parses and validates a TOML run config, returning it with every default
/// filled in. Raises ValueError naming any unknown key.
#[pyfunction]
fn normalize_config(text: &str) -> PyResult<String> {
    Ok(run_config(Some(text))?.to_toml())
}

/// Forward FLOPs per component for a batch of `batch` images.
#[pyfunction]
#[pyo3(signature = (config=None, batch=1))]
fn count_flops<'py>(
    py: Python<'py>,
    config: Option<&str>,
    batch: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(config)?;
    let report = profile::count_flops(&cfg.model, batch).map_err(to_py)?;
    let d = PyDict::new(py);
    for c in Component::MODEL {
        d.set_item(c.name(), report.component(c))?;
    }
    d.set_item("total", report.total)?;
    Ok(d)
}

/// Header fields and tensor names of a checkpoint file.
#[pyfunction]
fn inspect_checkpoint<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let ck = checkpoint::read(&path).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("version", ck.version)?;
    d.set_item("digest", hex(&ck.digest))?;
    d.set_item("scalars", ck.num_scalars())?;
    let tensors: Vec<(String, Vec<usize>)> =
        ck.records.into_iter().map(|r| (r.name, r.shape)).collect();
    d.set_item("tensors", tensors)?;
    Ok(d)
}

#[pyclass(name = "Model", module = "pyunifiedface")]
struct PyModel {
    cfg: RunConfig,
    model: Model,
    reg: ParamRegistry<f32>,
}

#[pymethods]
impl PyModel {
    /// Builds the network from a TOML config (defaults when omitted), then
    /// either loads `checkpoint` or initializes from `seed`.
    #[new]
    #[pyo3(signature = (config=None, seed=0, checkpoint=None))]
    fn new(config: Option<&str>, seed: u64, checkpoint: Option<PathBuf>) -> PyResult<Self> {
        let cfg = run_config(config)?;
        let mut reg = ParamRegistry::new();
        let model = Model::new(&mut reg, cfg.model).map_err(to_py)?;
        match checkpoint {
            Some(p) => checkpoint::load(&p, &mut reg, cfg.digest()).map_err(to_py)?,
            None => init_params(&mut reg, &mut Rng::new(seed)),
        }
        Ok(Self { cfg, model, reg })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.reg.iter().map(|(_, p)| p.tensor.numel()).sum()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.cfg.model.image_height, self.cfg.model.image_width)
    }

    #[getter]
    fn digest(&self) -> String {
        hex(&self.cfg.digest())
    }

    /// Runs every head on `batch` images given as a flat row-major
    /// `[batch, 3, H, W]` list. Returns `{output: (shape, values)}`.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        images: Vec<f32>,
        batch: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (h, w) = self.image_size();
        let pixels = Tensor::new(&[batch, 3, h, w], images).map_err(to_py)?;
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(pixels);
        let out = self
            .model
            .forward(&mut tape, &self.reg, x, &Selection::all(batch, &Task::ALL))
            .map_err(to_py)?;
        let p = &out.predictions;
        let named: [(&str, Option<Var>); 12] = [
            ("parsing", p.parsing),
            ("landmarks", p.landmarks),
            ("heatmaps", p.heatmaps),
            ("headpose", p.headpose),
            ("attributes", p.attributes),
            ("age_logits", p.age_logits),
            ("age", p.age),
            ("gender", p.gender),
            ("race", p.race),
            ("expression", p.expression),
            ("embedding", p.embedding),
            ("visibility", p.visibility),
        ];
        let d = PyDict::new(py);
        for (name, v) in named {
            if let Some(v) = v {
                d.set_item(name, (tape.shape(v).to_vec(), tape.value(v).to_vec()))?;
            }
        }
        Ok(d)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.reg, self.cfg.digest()).map_err(to_py)
    }
}

#[pymodule]
pub fn pyunifiedface(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
