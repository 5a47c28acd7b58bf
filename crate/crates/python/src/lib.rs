//! Python bindings: schedules, metrics, scene generation, the detector and
//! whole training runs.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use semisup_cli::experiment::{history_csv, run_one};
use semisup_cli::{CliError, ExperimentConfig};
use semisup_core::datagen::{generate_benchmark, generate_dataset, Scene};
use semisup_core::detector::{predict, ModelParams};
use semisup_core::geometry::BBox;
use semisup_core::image::Image;
use semisup_core::metrics::{self, Detection, LabelSet, PrPoint};
use semisup_core::schedules::{Schedule as CoreSchedule, Shape};

fn core_err(e: semisup_core::Error) -> PyErr {
    match e {
        semisup_core::Error::InvalidConfig { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Config(m) => PyValueError::new_err(m),
        CliError::Io(m) => PyIOError::new_err(m),
        CliError::Runtime(m) => PyRuntimeError::new_err(m),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => PyList::new(py, a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any(),
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3])
}

fn config(text: Option<&str>) -> PyResult<ExperimentConfig> {
    let cfg = ExperimentConfig::parse(text.unwrap_or("")).map_err(cli_err)?;
    cfg.validate().map_err(cli_err)?;
    Ok(cfg)
}

/// Time-indexed policy value: `shape` is one of constant, linear,
/// warmup-cooldown, cosine, arctan.
#[pyclass(name = "Schedule", from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: CoreSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (shape, start, end, warmup=0.0, cooldown=0.0, steepness=5.0))]
    fn new(shape: &str, start: f64, end: f64, warmup: f64, cooldown: f64, steepness: f64) -> PyResult<Self> {
        let shape: Shape = shape.parse().map_err(|e: String| PyValueError::new_err(e))?;
        let inner = CoreSchedule { shape, start, end, warmup_frac: warmup, cooldown_frac: cooldown, steepness };
        inner.validate("schedule").map_err(core_err)?;
        Ok(PySchedule { inner })
    }

    fn eval(&self, t: usize, total: usize) -> PyResult<f64> {
        self.inner.eval(t, total).map_err(core_err)
    }

    fn values(&self, total: usize) -> PyResult<Vec<f64>> {
        (0..total).map(|t| self.eval(t, total)).collect()
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!("Schedule({:?}, {}, {})", s.shape.name(), s.start, s.end)
    }
}

/// A generated scene: `pixels` is row-major interleaved RGB.
#[pyclass(name = "Scene", skip_from_py_object)]
struct PyScene {
    #[pyo3(get)]
    id: u64,
    #[pyo3(get)]
    width: usize,
    #[pyo3(get)]
    height: usize,
    #[pyo3(get)]
    pixels: Vec<f32>,
    #[pyo3(get)]
    boxes: Vec<[f64; 4]>,
    #[pyo3(get)]
    classes: Vec<usize>,
}

impl From<&Scene> for PyScene {
    fn from(s: &Scene) -> Self {
        PyScene {
            id: s.id,
            width: s.image.width,
            height: s.image.height,
            pixels: s.image.data.clone(),
            boxes: s.labels.boxes.iter().map(BBox::to_array).collect(),
            classes: s.labels.classes.clone(),
        }
    }
}

#[pymethods]
impl PyScene {
    fn __repr__(&self) -> String {
        format!("Scene(id={}, objects={})", self.id, self.boxes.len())
    }
}

/// Detector parameters initialised from `seed` for the architecture in the
/// config text.
#[pyclass(name = "Detector", skip_from_py_object)]
struct PyDetector {
    params: ModelParams,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (seed=0, config=None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        use rand::SeedableRng;
        let cfg = self::config(config)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(PyDetector { params: ModelParams::init(cfg.train.detector.arch, &mut rng) })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyDetector { params: ModelParams::from_text(text).map_err(core_err)? })
    }

    fn to_text(&self) -> String {
        self.params.to_text()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// `(box, class_id, score)` for every query whose argmax is foreground.
    #[pyo3(signature = (scene, floor=0.0))]
    fn predict(&self, scene: &PyScene, floor: f64) -> PyResult<Vec<([f64; 4], usize, f64)>> {
        let image = Image { width: scene.width, height: scene.height, data: scene.pixels.clone() };
        let dets = predict(&self.params, &image, floor).map_err(core_err)?;
        Ok(dets.iter().map(|d| (d.bbox.to_array(), d.class_id, d.score)).collect())
    }
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    semisup_core::geometry::iou(&bbox(a), &bbox(b))
}

/// Minimum-cost assignment of a rectangular cost matrix as `(row, col)` pairs.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    if cost.iter().any(|r| r.len() != cost.first().map_or(0, Vec::len)) {
        return Err(PyValueError::new_err("cost rows must have equal length"));
    }
    Ok(metrics::hungarian_match(&cost).pairs)
}

#[pyfunction]
fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    metrics::f_beta(PrPoint { precision, recall }, beta)
}

/// Single-image AP. `preds` are `(box, class, score)`, `gts` are `(box, class)`.
#[pyfunction]
fn average_precision(preds: Vec<([f64; 4], usize, f64)>, gts: Vec<([f64; 4], usize)>, iou_thresh: f64) -> f64 {
    let preds: Vec<Detection> = preds.into_iter().map(|(b, c, s)| Detection::new(bbox(b), c, s)).collect();
    let mut gt = LabelSet::empty();
    for (b, c) in gts {
        gt.push(bbox(b), c);
    }
    metrics::average_precision(&preds, &gt, iou_thresh)
}

/// The default experiment config as `key = value` text.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_text()
}

/// `n` scenes from the dataset keys of `config`, seeded by `seed`.
#[pyfunction]
#[pyo3(signature = (n, seed, config=None))]
fn generate_scenes(n: usize, seed: u64, config: Option<&str>) -> PyResult<Vec<PyScene>> {
    let cfg = self::config(config)?;
    Ok(generate_dataset(&cfg.dataset, seed, n).map_err(core_err)?.iter().map(PyScene::from).collect())
}

/// Trains one (fold, seed) pair of `config` on a freshly generated dataset
/// and returns the history, final test metrics and regime verdict.
#[pyfunction]
#[pyo3(signature = (config=None, fold=0, seed=0))]
fn train<'py>(py: Python<'py>, config: Option<&str>, fold: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config)?;
    let run = py
        .detach(|| {
            let bench = generate_benchmark(&cfg.dataset, cfg.data_seed, cfg.sizes)?;
            run_one(&cfg, &bench, fold, seed)
        })
        .map_err(cli_err)?;
    let out = PyDict::new(py);
    let history = serde_json::to_value(&run.history).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    out.set_item("history", to_py(py, &history)?)?;
    out.set_item("history_csv", history_csv(&run.history))?;
    let test = serde_json::to_value(run.test).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    out.set_item("test", to_py(py, &test)?)?;
    out.set_item("regime", run.regime.name())?;
    Ok(out)
}

#[pymodule]
fn semisup(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(f_beta, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
