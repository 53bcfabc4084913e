//! Python bindings: event logs, context assigners, tensors, factor models,
//! training and evaluation.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};

use itals_core::synthetic::{generate, to_tsv, SyntheticSpec};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use itals_core as core;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Chronologically sorted interaction events with their vocabularies.
#[pyclass(name = "EventLog", module = "itals", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEventLog {
    inner: core::EventLog,
}

#[pymethods]
impl PyEventLog {
    /// Parses tab-separated `user item timestamp [category]` lines.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        core::parse_event_log(text.as_bytes(), &core::Schema::default())
            .map(|inner| PyEventLog { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        let file = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        core::parse_event_log(BufReader::new(file), &core::Schema::default())
            .map(|inner| PyEventLog { inner })
            .map_err(err)
    }

    /// Seeded synthetic log whose item preferences depend on the time of day.
    #[staticmethod]
    #[pyo3(signature = (users=1000, items=500, bands=6, days=28, events_per_user=20, test_events_per_user=2, seed=1))]
    fn synthetic(
        users: usize,
        items: usize,
        bands: usize,
        days: u64,
        events_per_user: usize,
        test_events_per_user: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            users,
            items,
            bands,
            days,
            train_events_per_user: events_per_user,
            test_events_per_user,
            seed,
            ..SyntheticSpec::default()
        };
        if users == 0 || items < 2 * spec.clusters || bands < 2 || 86_400 % bands != 0 {
            return Err(PyValueError::new_err("invalid synthetic parameters"));
        }
        Ok(PyEventLog {
            inner: generate(&spec),
        })
    }

    /// Events before `timestamp` and the rest.
    fn split(&self, timestamp: u64) -> (PyEventLog, PyEventLog) {
        let (a, b) = core::time_split(&self.inner, timestamp);
        (PyEventLog { inner: a }, PyEventLog { inner: b })
    }

    fn to_tsv(&self) -> String {
        to_tsv(&self.inner)
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    fn user_index(&self, key: &str) -> Option<u32> {
        self.inner.vocab().users.get(key)
    }

    fn item_key(&self, index: u32) -> Option<String> {
        self.inner.vocab().items.key(index).map(str::to_owned)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "EventLog(events={}, users={}, items={})",
            self.inner.len(),
            self.inner.num_users(),
            self.inner.num_items()
        )
    }
}

/// Maps events to context states.
#[pyclass(
    name = "ContextAssigner",
    module = "itals",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyContextAssigner {
    inner: core::ContextAssigner,
}

#[pymethods]
impl PyContextAssigner {
    #[staticmethod]
    fn none() -> Self {
        PyContextAssigner {
            inner: core::ContextAssigner::none(),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (season_length=86_400, band_length=14_400))]
    fn season(season_length: u64, band_length: u64) -> PyResult<Self> {
        core::ContextAssigner::season(season_length, band_length)
            .map(|inner| PyContextAssigner { inner })
            .map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (level="item", history=1, decay=0.5, chaining=false))]
    fn sequence(level: &str, history: usize, decay: f64, chaining: bool) -> PyResult<Self> {
        let level = match level {
            "item" => core::SequenceLevel::Item,
            "category" => core::SequenceLevel::Category,
            other => return Err(PyValueError::new_err(format!("unknown level '{other}'"))),
        };
        core::ContextAssigner::sequence(level, history, decay)
            .map(|a| PyContextAssigner {
                inner: a.with_test_chaining(chaining),
            })
            .map_err(err)
    }

    fn band(&self, timestamp: u64) -> PyResult<usize> {
        self.inner.assign_season_band(timestamp).map_err(err)
    }

    /// Number of context states for `log`, or `None` without context.
    fn context_size(&self, log: &PyEventLog) -> Option<usize> {
        core::ContextSource::context_size(&self.inner, log.inner.vocab())
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    fn __repr__(&self) -> String {
        format!("ContextAssigner({})", self.inner.kind())
    }
}

/// Sparse weighted preference tensor.
#[pyclass(name = "SparseTensor", module = "itals", frozen)]
struct PySparseTensor {
    inner: core::SparseTensor,
}

#[pymethods]
impl PySparseTensor {
    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.inner.sizes().to_vec()
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    #[getter]
    fn w0(&self) -> f64 {
        self.inner.w0()
    }

    fn weight_at(&self, index: Vec<u32>) -> PyResult<f64> {
        if index.len() != self.inner.ndim() {
            return Err(PyValueError::new_err("index has the wrong length"));
        }
        Ok(self.inner.weight_at(&index))
    }

    fn __repr__(&self) -> String {
        format!(
            "SparseTensor(sizes={:?}, nnz={})",
            self.inner.sizes(),
            self.inner.nnz()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (log, assigner, w0=1.0, wt=100.0, count_scaling=false, alpha=99.0))]
fn build_tensor(
    log: &PyEventLog,
    assigner: &PyContextAssigner,
    w0: f64,
    wt: f64,
    count_scaling: bool,
    alpha: f64,
) -> PyResult<PySparseTensor> {
    let scheme = core::WeightScheme {
        w0,
        wt,
        count_scaling,
        alpha,
    };
    scheme.validate().map_err(err)?;
    core::build_tensor(&log.inner, &assigner.inner, &scheme)
        .map(|inner| PySparseTensor { inner })
        .map_err(err)
}

/// Factor matrices of a CP model; dimension 0 is users, 1 items.
#[pyclass(name = "FactorModel", module = "itals", skip_from_py_object)]
#[derive(Clone)]
struct PyFactorModel {
    inner: core::FactorModel,
}

#[pymethods]
impl PyFactorModel {
    #[new]
    #[pyo3(signature = (sizes, factors=20, seed=42))]
    fn new(sizes: Vec<usize>, factors: usize, seed: u64) -> PyResult<Self> {
        core::FactorModel::init(&sizes, factors, seed)
            .map(|inner| PyFactorModel { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        core::FactorModel::load(BufReader::new(file))
            .map(|inner| PyFactorModel { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        core::FactorModel::from_bytes(data)
            .map(|inner| PyFactorModel { inner })
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let file = File::create(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        self.inner.save(BufWriter::new(file)).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.inner.sizes().to_vec()
    }

    #[getter]
    fn roles(&self) -> Vec<String> {
        self.inner.roles().to_vec()
    }

    /// Column `entity` of dimension `dim`.
    fn column(&self, dim: usize, entity: usize) -> PyResult<Vec<f64>> {
        if dim >= self.inner.ndim() || entity >= self.inner.sizes()[dim] {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.column(dim, entity).to_vec())
    }

    fn predict(&self, indices: Vec<usize>) -> PyResult<f64> {
        self.inner.predict(&indices).map_err(err)
    }

    /// Scores of every item for `user`, optionally in a context state.
    #[pyo3(signature = (user, context=None))]
    fn score_items(&self, user: usize, context: Option<usize>) -> PyResult<Vec<f64>> {
        let mut fixed = vec![Some(core::Fixed::Index(user)), None];
        if self.inner.ndim() == 3 {
            let state =
                context.ok_or_else(|| PyValueError::new_err("this model needs a context state"))?;
            fixed.push(Some(core::Fixed::Index(state)));
        }
        self.inner.score_items(1, &fixed).map_err(err)
    }

    fn __eq__(&self, other: &PyFactorModel) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "FactorModel(k={}, sizes={:?})",
            self.inner.k(),
            self.inner.sizes()
        )
    }
}

fn train_config(
    solver: &str,
    epochs: usize,
    lambda: f64,
    reg_mode: &str,
    inner_iters: usize,
    w0: f64,
) -> PyResult<core::TrainConfig> {
    let config = core::TrainConfig {
        solver: solver.parse().map_err(err)?,
        epochs,
        lambda,
        reg_mode: reg_mode.parse().map_err(err)?,
        inner_iters,
        w0,
        ..core::TrainConfig::default()
    };
    config.validate().map_err(err)?;
    Ok(config)
}

/// Trains `model` in place; returns the per-dimension trace as dicts.
#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (model, tensor, solver="cg", epochs=10, lam=0.1, reg_mode="support", inner_iters=2))]
fn train<'py>(
    py: Python<'py>,
    model: &mut PyFactorModel,
    tensor: &PySparseTensor,
    solver: &str,
    epochs: usize,
    lam: f64,
    reg_mode: &str,
    inner_iters: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config = train_config(
        solver,
        epochs,
        lam,
        reg_mode,
        inner_iters,
        tensor.inner.w0(),
    )?;
    let trace = core::train(&mut model.inner, &tensor.inner, &config, &mut ())
        .map_err(|e| err(e.source))?;
    trace
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("dimension", r.dimension)?;
            d.set_item("wall_ms", r.wall_ms)?;
            d.set_item("loss", r.loss)?;
            Ok(d)
        })
        .collect()
}

/// Weighted squared error plus `lam` times the squared factor norms.
#[pyfunction]
#[pyo3(signature = (model, tensor, lam=0.0))]
fn loss(model: &PyFactorModel, tensor: &PySparseTensor, lam: f64) -> f64 {
    core::loss(&model.inner, &tensor.inner, lam)
}

#[pyfunction]
#[pyo3(signature = (model, train, test, assigner, cutoff=20, exclude_train=false))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyFactorModel,
    train: &PyEventLog,
    test: &PyEventLog,
    assigner: &PyContextAssigner,
    cutoff: usize,
    exclude_train: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = core::EvalOptions {
        cutoff,
        exclude_train_items: exclude_train,
        ..core::EvalOptions::default()
    };
    let report = core::evaluate(
        &model.inner,
        &train.inner,
        &test.inner,
        &assigner.inner,
        &opts,
    )
    .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("recall_at_n", report.recall_at_n)?;
    d.set_item("map_at_n", report.map_at_n)?;
    d.set_item("n", report.n)?;
    d.set_item("events", report.events)?;
    d.set_item("skipped", report.skipped)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (scores, n, exclude=None))]
fn top_n(scores: Vec<f64>, n: usize, exclude: Option<HashSet<u32>>) -> Vec<u32> {
    core::top_n(&scores, n, exclude.as_ref())
}

#[pyfunction]
fn recall_at_n(lists: Vec<Vec<u32>>, items: Vec<u32>, n: usize) -> PyResult<f64> {
    if lists.len() != items.len() {
        return Err(PyValueError::new_err("one list per test event is required"));
    }
    Ok(core::recall_at_n(&lists, &items, n))
}

#[pyfunction]
fn map_at_n(lists: Vec<Vec<u32>>, relevant: Vec<HashSet<u32>>, n: usize) -> PyResult<f64> {
    if lists.len() != relevant.len() {
        return Err(PyValueError::new_err(
            "one relevant set per list is required",
        ));
    }
    Ok(core::map_at_n(&lists, &relevant, n))
}

#[pymodule]
fn itals(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEventLog>()?;
    m.add_class::<PyContextAssigner>()?;
    m.add_class::<PySparseTensor>()?;
    m.add_class::<PyFactorModel>()?;
    m.add_function(wrap_pyfunction!(build_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(top_n, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_n, m)?)?;
    m.add_function(wrap_pyfunction!(map_at_n, m)?)?;
    Ok(())
}
