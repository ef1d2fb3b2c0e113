//! Python bindings: models, fleets, plans, simulated runs, memory sweeps and
//! K1 calibration. Structured results cross the boundary as plain dicts.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use mcusplit::allocator::{read_calibration_csv, K1Table, Strategy};
use mcusplit::harness::{self, EmulatedCase, Planned};
use mcusplit::model::{fuse_conv_bn_relu, quantize, reinterpret, reinterpret_str, synth};
use mcusplit::runtime::LinkPolicy;

create_exception!(pymcusplit, McuSplitError, PyException, "Base class for planner and simulator errors.");
create_exception!(pymcusplit, InfeasibleError, McuSplitError, "The fleet cannot hold the model.");
create_exception!(pymcusplit, OutOfMemoryError, McuSplitError, "A worker ran out of RAM or flash.");

fn to_py(err: mcusplit::Error) -> PyErr {
    use mcusplit::Error as E;
    let msg = err.to_string();
    match err {
        E::Parse(_) | E::Json(_) | E::Csv(_) | E::Structural { .. } | E::UnsupportedOperator { .. } | E::Bounds(_) | E::Domain(_) => {
            PyValueError::new_err(msg)
        }
        E::InfeasibleCapacity { .. } | E::Allocation(_) => InfeasibleError::new_err(msg),
        E::OutOfMemory { .. } | E::Deployment { .. } => OutOfMemoryError::new_err(msg),
        _ => McuSplitError::new_err(msg),
    }
}

/// Converts any serializable value into Python objects via JSON.
fn to_object<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| McuSplitError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_strategy(s: &str) -> PyResult<Strategy> {
    s.parse().map_err(to_py)
}

fn policy(serialize_sends: bool) -> LinkPolicy {
    if serialize_sends {
        LinkPolicy::Serialized
    } else {
        LinkPolicy::Concurrent
    }
}

/// A CNN in the planner's layer representation.
#[pyclass(name = "Model", frozen)]
struct PyModel(mcusplit::model::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn tiny_cnn(seed: u64) -> Self {
        Self(synth::tiny_cnn(seed))
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn mobilenet_v2_like(seed: u64) -> Self {
        Self(synth::mobilenet_v2_like(seed))
    }

    /// Builds a seeded model from recipes such as `conv:out=8,k=3,p=1,act=relu`.
    #[staticmethod]
    #[pyo3(signature = (input_shape, layers, seed=0))]
    fn synthetic(input_shape: (usize, usize, usize), layers: Vec<String>, seed: u64) -> PyResult<Self> {
        let shape = mcusplit::model::TensorShape::new(input_shape.0, input_shape.1, input_shape.2).map_err(to_py)?;
        let recipes = layers.iter().map(|l| synth::LayerRecipe::parse(l)).collect::<Result<Vec<_>, _>>().map_err(to_py)?;
        synth::build(shape, &recipes, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        reinterpret(path).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        reinterpret_str(text).map(Self).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(to_py)
    }

    /// An int8 copy with calibrated activation scales.
    fn quantize(&self) -> PyResult<Self> {
        quantize(&self.0).map(Self).map_err(to_py)
    }

    /// A copy with batch norms folded into the preceding convolutions.
    fn fuse(&self) -> PyResult<Self> {
        fuse_conv_bn_relu(&self.0).map(Self).map_err(to_py)
    }

    /// Dense single-device output for the seeded synthetic input.
    #[pyo3(signature = (seed=0))]
    fn forward(&self, seed: u64) -> PyResult<Vec<f64>> {
        let input = synth::random_input(self.0.input_shape, seed);
        match self.0.precision {
            mcusplit::model::Precision::Float32 => {
                Ok(mcusplit::oracle::reference_forward(&self.0, &input).map_err(to_py)?.output().to_vec())
            }
            mcusplit::model::Precision::Int8 => mcusplit::oracle::quantized_forward(&self.0, &input).map_err(to_py),
        }
    }

    #[getter]
    fn precision(&self) -> String {
        self.0.precision.to_string()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.0.input_shape;
        (s.channels, s.height, s.width)
    }

    #[getter]
    fn layer_count(&self) -> usize {
        self.0.layers.len()
    }

    #[getter]
    fn weight_bytes(&self) -> usize {
        self.0.weight_bytes()
    }

    #[getter]
    fn total_macs(&self) -> u64 {
        self.0.total_macs()
    }

    fn __repr__(&self) -> String {
        format!("Model({} layers, {}, {} weight bytes)", self.0.layers.len(), self.0.precision, self.0.weight_bytes())
    }
}

/// An ordered list of worker profiles.
#[pyclass(name = "Fleet", frozen)]
struct PyFleet(mcusplit::allocator::Fleet);

#[pymethods]
impl PyFleet {
    #[staticmethod]
    #[pyo3(signature = (count, frequency_mhz=600.0))]
    fn homogeneous(count: usize, frequency_mhz: f64) -> Self {
        Self(mcusplit::allocator::Fleet::homogeneous(count, frequency_mhz))
    }

    /// One of the eight emulated three-worker configurations.
    #[staticmethod]
    fn emulated(case: u8) -> PyResult<Self> {
        EmulatedCase::get(case)
            .map(|c| Self(c.fleet()))
            .ok_or_else(|| PyValueError::new_err(format!("no emulated case {case}; cases are 1-8")))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        mcusplit::allocator::Fleet::from_json(text).map(Self).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        let freqs: Vec<f64> = self.0.workers.iter().map(|w| w.frequency_mhz).collect();
        format!("Fleet({freqs:?} MHz)")
    }
}

/// Ratings, partitions and routing for one model on one fleet.
#[pyclass(name = "Plan", frozen)]
struct PyPlan {
    planned: Planned,
    strategy: Strategy,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn strategy(&self) -> String {
        self.strategy.to_string()
    }

    #[getter]
    fn ratings(&self) -> Vec<f64> {
        self.planned.rated.ratings.clone()
    }

    #[getter]
    fn k_c(&self) -> Vec<f64> {
        self.planned.rated.k_c.clone()
    }

    /// Weight bytes each worker stores.
    #[getter]
    fn fragment_bytes(&self) -> Vec<usize> {
        self.planned.routing.partitions.worker_fragment_bytes()
    }

    /// Output neuron ranges `(start, end)` per worker for every split layer.
    fn ranges<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let ranges: Vec<(usize, Vec<(usize, usize)>)> = self
            .planned
            .routing
            .partitions
            .layers
            .iter()
            .map(|p| (p.layer, p.ranges().iter().map(|r| (r.start, r.end)).collect()))
            .collect();
        to_object(py, &ranges)
    }
}

/// Rates `fleet` under `strategy` and splits every layer of `model`.
#[pyfunction]
#[pyo3(signature = (model, fleet, strategy="optimized"))]
fn plan(model: &PyModel, fleet: &PyFleet, strategy: &str) -> PyResult<PyPlan> {
    let strategy = parse_strategy(strategy)?;
    let planned = harness::plan(&model.0, &fleet.0, &K1Table::default(), strategy).map_err(to_py)?;
    Ok(PyPlan { planned, strategy })
}

/// Executes one inference of the plan and checks it against the oracle.
/// Returns `{"summary": ..., "verdict": ..., "trace_csv": ...}`.
#[pyfunction]
#[pyo3(signature = (model, plan, fleet, seed=0, serialize_sends=false))]
fn run<'py>(
    py: Python<'py>,
    model: &PyModel,
    plan: &PyPlan,
    fleet: &PyFleet,
    seed: u64,
    serialize_sends: bool,
) -> PyResult<Bound<'py, PyAny>> {
    #[derive(Serialize)]
    struct RunResult {
        summary: mcusplit::runtime::RunSummary,
        verdict: mcusplit::oracle::Verdict,
        trace_csv: String,
    }
    let input = synth::random_input(model.0.input_shape, seed);
    let (exec, verdict) =
        harness::run_verified(&model.0, &plan.planned, &fleet.0, &K1Table::default(), policy(serialize_sends), &input)
            .map_err(to_py)?;
    let mut csv = Vec::new();
    exec.trace.write_csv(&mut csv).map_err(to_py)?;
    let result = RunResult {
        summary: exec.trace.summary(),
        verdict,
        trace_csv: String::from_utf8(csv).map_err(|e| McuSplitError::new_err(e.to_string()))?,
    };
    to_object(py, &result)
}

/// Predicted total inference time of each strategy on `fleet`.
#[pyfunction]
#[pyo3(signature = (model, fleet, serialize_sends=false))]
fn compare_strategies(model: &PyModel, fleet: &PyFleet, serialize_sends: bool) -> PyResult<Vec<(String, f64)>> {
    let times = harness::compare_strategies(&model.0, &fleet.0, &K1Table::default(), policy(serialize_sends)).map_err(to_py)?;
    Ok(times.into_iter().map(|(s, t)| (s.to_string(), t)).collect())
}

/// Max per-worker peak RAM for homogeneous fleets of each size.
#[pyfunction]
#[pyo3(signature = (model, counts, frequency_mhz=600.0, ram_kb=512.0))]
fn sweep_memory<'py>(
    py: Python<'py>,
    model: &PyModel,
    counts: Vec<usize>,
    frequency_mhz: f64,
    ram_kb: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let rows = harness::sweep_memory(&model.0, &counts, frequency_mhz, ram_kb).map_err(to_py)?;
    to_object(py, &rows)
}

/// Fits a K1 table from `frequency_mhz,workload_kb,time_s` CSV text.
#[pyfunction]
fn calibrate<'py>(py: Python<'py>, csv_text: &str) -> PyResult<Bound<'py, PyAny>> {
    let records = read_calibration_csv(csv_text).map_err(to_py)?;
    to_object(py, &K1Table::from_records(&records).map_err(to_py)?)
}

#[pymodule]
fn pymcusplit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyFleet>()?;
    m.add_class::<PyPlan>()?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare_strategies, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_memory, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add("McuSplitError", m.py().get_type::<McuSplitError>())?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add("OutOfMemoryError", m.py().get_type::<OutOfMemoryError>())?;
    Ok(())
}
