//! Python bindings: configurations, LUTs, schemes, the simulator, the
//! scheme optimizer, predictor training and the wire codec.

use std::path::PathBuf;
use std::sync::Arc;

use coinfer_core::predictor::{self, train_relative, train_throughput, PredictorModel, Sample, TrainOptions};
use coinfer_core::profiles::{fixtures, LayerRange, Lut};
use coinfer_core::runtime::protocol::{self as proto, MsgType};
use coinfer_core::scheduler::{assign_idle, optimize as run_optimize, EvaluatorSpec, SchedulerConfig};
use coinfer_core::sim::{self, dataset, Horizon, SimConfig, SimOptions};
use coinfer_core::sysgraph::{build_raw_features, build_system_graph};
use coinfer_core::types::{self, Strategy};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A validated deployment description.
#[pyclass(module = "coinfer", frozen, from_py_object)]
#[derive(Clone)]
pub struct SystemConfig {
    inner: types::SystemConfig,
}

#[pymethods]
impl SystemConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = types::SystemConfig::from_json(text).map_err(err)?;
        types::validate_config(&inner).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn clients(&self) -> Vec<String> {
        self.inner.clients().map(|d| d.device_id.clone()).collect()
    }

    #[getter]
    fn bandwidth_mbps(&self) -> f64 {
        self.inner.network.bandwidth_mbps
    }

    /// Same system with a different static link.
    fn with_bandwidth(&self, mbps: f64) -> Self {
        let mut inner = self.inner.clone();
        inner.network.bandwidth_mbps = mbps;
        inner.network.trace = None;
        Self { inner }
    }

    fn __repr__(&self) -> String {
        format!(
            "SystemConfig(clients={:?}, bandwidth_mbps={})",
            self.clients(),
            self.inner.network.bandwidth_mbps
        )
    }
}

/// Profiled subtask latencies.
#[pyclass(module = "coinfer", frozen, from_py_object)]
#[derive(Clone)]
pub struct LatencyTable {
    inner: Arc<Lut>,
}

#[pymethods]
impl LatencyTable {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(Lut::from_json(text).map_err(err)?),
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Milliseconds for layers `[start, end)` of `model` on a `kind` device.
    #[pyo3(signature = (kind, model, start, end, batch = 1))]
    fn lookup(&self, kind: &str, model: &str, start: usize, end: usize, batch: u32) -> PyResult<f64> {
        self.inner.lookup(kind, model, LayerRange::new(start, end), batch).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// One strategy per client: `"dp"` or `"pp:<split>"`.
#[pyclass(module = "coinfer", frozen, eq, hash, from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Scheme {
    inner: types::Scheme,
}

#[pymethods]
impl Scheme {
    #[new]
    fn new(assignment: std::collections::BTreeMap<String, String>) -> PyResult<Self> {
        let entries = assignment
            .into_iter()
            .map(|(d, s)| s.parse::<Strategy>().map(|s| (d, s)).map_err(err))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: types::Scheme::new(entries),
        })
    }

    #[staticmethod]
    fn uniform(config: &SystemConfig, strategy: &str) -> PyResult<Self> {
        Ok(Self {
            inner: types::Scheme::uniform(&config.inner, strategy.parse().map_err(err)?),
        })
    }

    fn get(&self, device: &str) -> PyResult<String> {
        self.inner
            .get(device)
            .map(|s| s.to_string())
            .ok_or_else(|| PyKeyError::new_err(device.to_string()))
    }

    fn assignment(&self) -> std::collections::BTreeMap<String, String> {
        self.inner.assignment.iter().map(|(d, s)| (d.clone(), s.to_string())).collect()
    }

    #[getter]
    fn idle(&self) -> Vec<String> {
        self.inner.idle.iter().cloned().collect()
    }

    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn __repr__(&self) -> String {
        format!("Scheme({})", self.inner.tag())
    }
}

/// Outcome of one simulated run.
#[pyclass(module = "coinfer", frozen)]
pub struct SimResult {
    inner: sim::SimResult,
}

#[pymethods]
impl SimResult {
    #[getter]
    fn throughput(&self) -> f64 {
        self.inner.throughput
    }

    #[getter]
    fn completed(&self) -> u64 {
        self.inner.completed
    }

    #[getter]
    fn mean_latency_ms(&self) -> f64 {
        self.inner.mean_latency_ms
    }

    #[getter]
    fn elapsed_ms(&self) -> f64 {
        self.inner.elapsed_ms
    }

    /// `(ms, scheme tag)` for the initial scheme and each switch.
    fn scheme_log(&self) -> Vec<(f64, String)> {
        self.inner.scheme_log.iter().map(|s| (s.at_ms, s.scheme.tag())).collect()
    }

    fn to_json(&self) -> String {
        self.inner.summary_json()
    }
}

/// Simulated training samples.
#[pyclass(module = "coinfer", frozen)]
pub struct Dataset {
    samples: Arc<Vec<Sample>>,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            samples: Arc::new(dataset::load_dataset(&path).map_err(err)?),
        })
    }

    /// Writes the dataset and its manifest; returns the SHA-256 digest.
    #[pyo3(signature = (path, seed = None))]
    fn save(&self, path: PathBuf, seed: Option<u64>) -> PyResult<String> {
        Ok(dataset::save_dataset(&self.samples, &path, seed).map_err(err)?.sha256)
    }

    fn throughputs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.throughput).collect()
    }

    fn __len__(&self) -> usize {
        self.samples.len()
    }
}

/// A trained system-graph predictor.
#[pyclass(module = "coinfer", frozen)]
pub struct Predictor {
    inner: Arc<PredictorModel>,
}

#[pymethods]
impl Predictor {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(predictor::load_checkpoint(&path).map_err(err)?),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        predictor::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden()
    }

    fn predict_throughput(&self, config: &SystemConfig, lut: &LatencyTable, scheme: &Scheme) -> PyResult<f64> {
        let graph = build_system_graph(&config.inner).map_err(err)?;
        let raw = build_raw_features(&graph, &scheme.inner, &config.inner, &lut.inner).map_err(err)?;
        self.inner
            .predict_throughput(&graph, &self.inner.features(&raw))
            .map_err(err)
    }

    /// Probability that `a` outperforms `b` on this system.
    fn predict_relative(&self, config: &SystemConfig, lut: &LatencyTable, a: &Scheme, b: &Scheme) -> PyResult<f64> {
        let graph = build_system_graph(&config.inner).map_err(err)?;
        let fa = build_raw_features(&graph, &a.inner, &config.inner, &lut.inner).map_err(err)?;
        let fb = build_raw_features(&graph, &b.inner, &config.inner, &lut.inner).map_err(err)?;
        self.inner
            .predict_relative(&graph, &self.inner.features(&fa), &self.inner.features(&fb))
            .map_err(err)
    }
}

/// Built-in example system: `adaptivity`, `loopback`, `batch-knee` or `pipeline`.
#[pyfunction]
#[pyo3(signature = (name, drop_at_ms = None, clients = 3))]
fn fixture(name: &str, drop_at_ms: Option<f64>, clients: usize) -> PyResult<(SystemConfig, LatencyTable)> {
    let fx = match name {
        "adaptivity" => fixtures::adaptivity_scenario(drop_at_ms),
        "loopback" => fixtures::loopback_scenario(clients),
        "batch-knee" => fixtures::batch_knee_scenario(6, 5, clients),
        "pipeline" => fixtures::pipeline_scenario(5.0, 2.0, 3.0),
        other => return Err(PyValueError::new_err(format!("unknown fixture {other:?}"))),
    };
    Ok((
        SystemConfig { inner: fx.config },
        LatencyTable {
            inner: Arc::new(fx.lut),
        },
    ))
}

/// Simulates `scheme`. Without `horizon_ms` the oracle horizon is used.
#[pyfunction]
#[pyo3(signature = (config, lut, scheme, horizon_ms = None, seed = 0))]
fn simulate(
    py: Python<'_>,
    config: &SystemConfig,
    lut: &LatencyTable,
    scheme: &Scheme,
    horizon_ms: Option<f64>,
    seed: u64,
) -> PyResult<SimResult> {
    let mut options = SimOptions::oracle();
    options.seed = seed;
    if let Some(ms) = horizon_ms {
        options.horizon = Horizon::Duration { ms };
    }
    let cfg = SimConfig::new(config.inner.clone(), Arc::clone(&lut.inner), options);
    let inner = py.detach(|| sim::simulate(&cfg, &scheme.inner)).map_err(err)?;
    Ok(SimResult { inner })
}

/// Runs the hierarchical optimizer. Uses the simulator as evaluator unless
/// a predictor is given.
#[pyfunction]
#[pyo3(signature = (config, lut, predictor = None, iteration_limit = 10))]
fn optimize(
    py: Python<'_>,
    config: &SystemConfig,
    lut: &LatencyTable,
    predictor: Option<&Predictor>,
    iteration_limit: usize,
) -> PyResult<Scheme> {
    let spec = match predictor {
        Some(p) => EvaluatorSpec::Learned(Arc::clone(&p.inner)),
        None => EvaluatorSpec::Oracle(SimOptions::oracle()),
    };
    let sched = SchedulerConfig {
        iteration_limit,
        ..SchedulerConfig::default()
    };
    let inner = py
        .detach(|| {
            let mut eval = spec.build(&config.inner, &lut.inner)?;
            let s = run_optimize(&config.inner, &lut.inner, &sched, eval.as_mut())?;
            assign_idle(&s, &config.inner, &lut.inner, eval.as_mut())
        })
        .map_err(err)?;
    Ok(Scheme { inner })
}

#[pyfunction]
fn generate_training_set(py: Python<'_>, samples: usize, seed: u64) -> PyResult<Dataset> {
    let data = py.detach(|| dataset::generate_training_set(samples, seed)).map_err(err)?;
    Ok(Dataset {
        samples: Arc::new(data),
    })
}

/// Trains one head; returns the model and a report dictionary.
#[pyfunction]
#[pyo3(signature = (dataset, head, epochs = 100, lr = 2e-3, hidden = 64, seed = 0))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    head: &str,
    epochs: usize,
    lr: f64,
    hidden: usize,
    seed: u64,
) -> PyResult<(Predictor, Bound<'py, PyDict>)> {
    let opts = TrainOptions {
        epochs,
        lr,
        hidden,
        seed,
        ..TrainOptions::default()
    };
    let samples = Arc::clone(&dataset.samples);
    let report = PyDict::new(py);
    let model = match head {
        "throughput" => {
            let (m, r) = py.detach(|| train_throughput(&samples, &opts)).map_err(err)?;
            report.set_item("val_mape", r.val_mape)?;
            report.set_item("val_within_20", r.val_within_20)?;
            report.set_item("train_mape", r.train_mape)?;
            report.set_item("epoch_loss", r.epoch_loss)?;
            m
        }
        "relative" => {
            let (m, r) = py.detach(|| train_relative(&samples, &opts)).map_err(err)?;
            report.set_item("val_accuracy", r.val_accuracy)?;
            report.set_item("train_accuracy", r.train_accuracy)?;
            report.set_item("epoch_loss", r.epoch_loss)?;
            m
        }
        other => return Err(PyValueError::new_err(format!("head must be throughput or relative, got {other:?}"))),
    };
    Ok((Predictor { inner: Arc::new(model) }, report))
}

fn msg_type(t: u8) -> PyResult<MsgType> {
    MsgType::try_from(t).map_err(err)
}

/// Frames `payload` as a message of type `msg_type` (0, 1 or 2).
#[pyfunction]
fn encode_message<'py>(py: Python<'py>, msg_type_byte: u8, task_id: u64, payload: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let frame = proto::encode_message(msg_type(msg_type_byte)?, task_id, payload).map_err(err)?;
    Ok(PyBytes::new(py, &frame))
}

/// Returns `(msg_type, task_id, payload)`.
#[pyfunction]
fn decode_message<'py>(py: Python<'py>, frame: &[u8]) -> PyResult<(u8, u64, Bound<'py, PyBytes>)> {
    let (h, payload) = proto::decode_message(frame).map_err(err)?;
    Ok((h.msg_type as u8, h.task_id, PyBytes::new(py, &payload)))
}

#[pymodule]
fn coinfer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SystemConfig>()?;
    m.add_class::<LatencyTable>()?;
    m.add_class::<Scheme>()?;
    m.add_class::<SimResult>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Predictor>()?;
    m.add_function(wrap_pyfunction!(fixture, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_training_set, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(encode_message, m)?)?;
    m.add_function(wrap_pyfunction!(decode_message, m)?)?;
    Ok(())
}
