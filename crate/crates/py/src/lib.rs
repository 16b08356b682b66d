//! Python module `etlearn`. Matrices cross the boundary as lists of rows.

use etlearn_core::linalg::{from_rows, to_rows};
use etlearn_core::lti::{eval_reference, LinearSystem, ReferenceSignal};
use etlearn_core::protocol::{EtseLink, ModelEstimate, Transport};
use etlearn_core::rng::stream;
use etlearn_core::scenario::{self, ScenarioConfig, CSV_COLUMNS};
use etlearn_core::stopping::mc_grid_stopping_time;
use etlearn_core::sysid::{assemble, ols_fit, Sample};
use etlearn_core::{trigger, Error};
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(etlearn, EtlearnError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Dimension(_) | Error::InvalidParameter(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => EtlearnError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<DMatrix<f64>> {
    from_rows(&rows).map_err(|msg| PyValueError::new_err(format!("{what}: {msg}")))
}

/// Steps `system` for `steps` transitions from `x0` under a cosine reference
/// and returns the visited states `x(1)..x(steps)`.
fn trajectory(
    sys: &LinearSystem,
    steps: u64,
    seed: u64,
    x0: DVector<f64>,
    reference: &ReferenceSignal,
) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, 0);
    let mut x = x0;
    (0..steps)
        .map(|k| {
            let r = eval_reference(reference, k, sys.ts(), sys.q());
            x = sys.step(&x, &r, &sys.noise_sampler().sample(&mut rng));
            x.as_slice().to_vec()
        })
        .collect()
}

fn initial_state(x0: Option<Vec<f64>>, n: usize) -> PyResult<DVector<f64>> {
    let x0 = x0.map_or_else(|| DVector::zeros(n), DVector::from_vec);
    if x0.len() != n {
        return Err(PyValueError::new_err(format!("x0 needs {n} entries, got {}", x0.len())));
    }
    Ok(x0)
}

/// Plant `x(k+1) = (A + B F) x(k) + B r(k) + w(k)`, `w ~ N(0, sigma)`.
#[pyclass(name = "System", module = "etlearn", frozen)]
struct PySystem(LinearSystem);

#[pymethods]
impl PySystem {
    #[new]
    fn new(
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
        f: Vec<Vec<f64>>,
        ts: f64,
    ) -> PyResult<Self> {
        LinearSystem::new(
            matrix(a, "a")?,
            matrix(b, "b")?,
            matrix(sigma, "sigma")?,
            matrix(f, "f")?,
            ts,
        )
        .map(PySystem)
        .map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn q(&self) -> usize {
        self.0.q()
    }

    #[getter]
    fn ts(&self) -> f64 {
        self.0.ts()
    }

    #[getter]
    fn closed_loop(&self) -> Vec<Vec<f64>> {
        to_rows(self.0.closed_loop())
    }

    /// States after each of `steps` transitions. `amplitude` and `omega`
    /// describe a cosine reference applied to every input.
    #[pyo3(signature = (steps, seed, x0=None, amplitude=0.0, omega=0.0))]
    fn simulate(
        &self,
        steps: u64,
        seed: u64,
        x0: Option<Vec<f64>>,
        amplitude: f64,
        omega: f64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let x0 = initial_state(x0, self.0.n())?;
        let reference = ReferenceSignal::Cosine { amplitude, omega };
        Ok(trajectory(&self.0, steps, seed, x0, &reference))
    }

    fn __repr__(&self) -> String {
        format!("System(n={}, q={}, ts={})", self.0.n(), self.0.q(), self.0.ts())
    }
}

/// Prediction model shared by both ends of a link.
#[pyclass(name = "Model", module = "etlearn", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(ModelEstimate);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (a_cl, b, sigma, version=0))]
    fn new(a_cl: Vec<Vec<f64>>, b: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, version: u64) -> PyResult<Self> {
        ModelEstimate::new(matrix(a_cl, "a_cl")?, matrix(b, "b")?, matrix(sigma, "sigma")?, version)
            .map(PyModel)
            .map_err(to_py)
    }

    #[getter]
    fn a_cl(&self) -> Vec<Vec<f64>> {
        to_rows(self.0.a_cl())
    }

    #[getter]
    fn b(&self) -> Vec<Vec<f64>> {
        to_rows(self.0.b())
    }

    #[getter]
    fn sigma(&self) -> Vec<Vec<f64>> {
        to_rows(self.0.sigma())
    }

    #[getter]
    fn version(&self) -> u64 {
        self.0.version()
    }

    fn __repr__(&self) -> String {
        format!("Model(n={}, q={}, version={})", self.0.n(), self.0.q(), self.0.version())
    }
}

/// Least-squares model from states `x(0)..x(M)` and inputs `r(0)..r(M-1)`.
#[pyfunction]
#[pyo3(signature = (states, inputs, prev_version=0))]
fn fit_model(states: Vec<Vec<f64>>, inputs: Vec<Vec<f64>>, prev_version: u64) -> PyResult<PyModel> {
    if states.len() != inputs.len() + 1 {
        return Err(PyValueError::new_err(format!(
            "need one more state than inputs, got {} states and {} inputs",
            states.len(),
            inputs.len()
        )));
    }
    let samples: Vec<Sample> = states
        .windows(2)
        .zip(inputs)
        .map(|(x, r)| {
            (
                DVector::from_column_slice(&x[0]),
                DVector::from_vec(r),
                DVector::from_column_slice(&x[1]),
            )
        })
        .collect();
    let data = assemble(&samples).map_err(to_py)?;
    ols_fit(&data, prev_version).map(PyModel).map_err(to_py)
}

/// Sender and receiver of one event-triggered state estimation channel.
#[pyclass(name = "Link", module = "etlearn")]
struct PyLink(EtseLink);

#[pymethods]
impl PyLink {
    #[new]
    #[pyo3(signature = (model, delta, tau_max, ts, x0=None))]
    fn new(model: &PyModel, delta: f64, tau_max: f64, ts: f64, x0: Option<Vec<f64>>) -> PyResult<Self> {
        let x0 = initial_state(x0, model.0.n())?;
        EtseLink::lossless(model.0.clone(), x0, delta, tau_max, ts)
            .map(PyLink)
            .map_err(to_py)
    }

    /// Advances one step with the true state `x` and reference `r`.
    /// Returns `(z_norm, sent, tau)`; `tau` is `None` unless a state update
    /// went out.
    fn step(&mut self, x: Vec<f64>, r: Vec<f64>) -> PyResult<(f64, bool, Option<f64>)> {
        let out = self
            .0
            .step(&DVector::from_vec(x), &DVector::from_vec(r))
            .map_err(to_py)?;
        Ok((out.z_norm, out.event.is_some(), out.tau))
    }

    /// Sends a new model and a fresh state to the receiver.
    fn broadcast_model(&mut self, model: &PyModel, x: Vec<f64>) -> PyResult<()> {
        self.0
            .broadcast_model(model.0.clone(), &DVector::from_vec(x))
            .map(|_| ())
            .map_err(to_py)
    }

    #[getter]
    fn estimate(&self) -> Vec<f64> {
        self.0.receiver().x_hat().as_slice().to_vec()
    }

    #[getter]
    fn messages(&self) -> u64 {
        self.0.transport().messages()
    }

    #[getter]
    fn bytes(&self) -> u64 {
        self.0.transport().bytes()
    }
}

#[pyfunction]
fn kappa_exact(eta: f64, n: usize, tau_max: f64) -> PyResult<f64> {
    check_kappa_args(eta, n, tau_max)?;
    Ok(trigger::kappa_exact(eta, n, tau_max))
}

#[pyfunction]
fn kappa_approx(eta: f64, n: usize, tau_max: f64) -> PyResult<f64> {
    check_kappa_args(eta, n, tau_max)?;
    Ok(trigger::kappa_approx(eta, n, tau_max))
}

fn check_kappa_args(eta: f64, n: usize, tau_max: f64) -> PyResult<()> {
    if eta > 0.0 && eta < 1.0 && n > 0 && tau_max > 0.0 {
        Ok(())
    } else {
        Err(PyValueError::new_err("need 0 < eta < 1, n >= 1 and tau_max > 0"))
    }
}

/// Monte Carlo stopping times of `z(k+1) = a_cl z(k) + e(k)` leaving the
/// `delta` ball. Returns `(mean, samples)`.
#[pyfunction]
#[pyo3(signature = (a_cl, sigma, ts, delta, paths, tau_max, seed=0))]
fn expected_stopping_time(
    py: Python<'_>,
    a_cl: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    ts: f64,
    delta: f64,
    paths: usize,
    tau_max: f64,
    seed: u64,
) -> PyResult<(f64, Vec<f64>)> {
    let (a_cl, sigma) = (matrix(a_cl, "a_cl")?, matrix(sigma, "sigma")?);
    let est = py
        .detach(|| mc_grid_stopping_time(&a_cl, &sigma, ts, delta, paths, tau_max, seed))
        .map_err(to_py)?;
    Ok((est.mean, est.samples))
}

#[pyfunction]
fn builtin_scenarios() -> Vec<&'static str> {
    scenario::builtin_names().collect()
}

/// Runs a scenario given as a file path, a built-in name, or (with
/// `text=True`) TOML source. Returns a dict with the trace columns as lists
/// and the learning episodes. Writes the CSV too when `out` is given.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, out=None, text=false))]
fn run_scenario<'py>(
    py: Python<'py>,
    scenario: &str,
    seed: Option<u64>,
    out: Option<std::path::PathBuf>,
    text: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = if text {
        ScenarioConfig::from_toml_str(scenario)
    } else {
        scenario::load(scenario)
    }
    .map_err(to_py)?;
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    let trace = py
        .detach(|| {
            let trace = scenario::run_scenario(&cfg)?;
            if let Some(path) = &out {
                scenario::emit_csv(&trace, path)?;
            }
            Ok(trace)
        })
        .map_err(to_py)?;

    let result = PyDict::new(py);
    result.set_item("name", &trace.name)?;
    result.set_item("seed", trace.seed)?;
    result.set_item("config_hash", &trace.config_hash)?;
    result.set_item("ts", trace.ts)?;

    let columns = PyDict::new(py);
    let recs = &trace.records;
    let col = |f: fn(&scenario::StepRecord) -> Option<f64>| recs.iter().map(f).collect::<Vec<_>>();
    let flag = |f: fn(&scenario::StepRecord) -> Option<bool>| recs.iter().map(f).collect::<Vec<_>>();
    let count = |f: fn(&scenario::StepRecord) -> u64| recs.iter().map(f).collect::<Vec<_>>();
    for name in CSV_COLUMNS {
        match name {
            "t" => columns.set_item(name, col(|r| Some(r.t)))?,
            "z_norm" => columns.set_item(name, col(|r| r.z_norm))?,
            "gamma_state" => columns.set_item(name, flag(|r| r.gamma_state))?,
            "tau" => columns.set_item(name, col(|r| r.tau))?,
            "window_mean" => columns.set_item(name, col(|r| r.window_mean))?,
            "sim_mean" => columns.set_item(name, col(|r| Some(r.sim_mean)))?,
            "kappa" => columns.set_item(name, col(|r| r.kappa))?,
            "gamma_learn_raw" => columns.set_item(name, flag(|r| r.gamma_learn_raw))?,
            "gamma_learn" => columns.set_item(name, flag(|r| r.gamma_learn))?,
            "model_version" => columns.set_item(name, count(|r| r.model_version))?,
            "messages" => columns.set_item(name, count(|r| r.messages))?,
            "bytes" => columns.set_item(name, count(|r| r.bytes))?,
            other => unreachable!("column {other} has no binding"),
        }
    }
    result.set_item("columns", columns)?;

    let episodes = PyList::empty(py);
    for e in &trace.episodes {
        let d = PyDict::new(py);
        d.set_item("onset_t", e.onset_t)?;
        d.set_item("trigger_t", e.trigger_t)?;
        d.set_item("start_t", e.start_t)?;
        d.set_item("end_t", e.end_t)?;
        d.set_item("samples", e.samples)?;
        d.set_item("version", e.version)?;
        d.set_item("a_cl", &e.a_cl)?;
        d.set_item("b", &e.b)?;
        d.set_item("sigma", &e.sigma)?;
        d.set_item("sim_mean", e.sim_mean)?;
        episodes.append(d)?;
    }
    result.set_item("episodes", episodes)?;
    result.set_item("unfinished_episode_start", trace.unfinished_episode_start)?;
    Ok(result)
}

#[pymodule]
fn etlearn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLink>()?;
    m.add_function(wrap_pyfunction!(fit_model, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_exact, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_approx, m)?)?;
    m.add_function(wrap_pyfunction!(expected_stopping_time, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add("EtlearnError", m.py().get_type::<EtlearnError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
