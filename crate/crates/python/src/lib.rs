//! Python bindings for the price-impact model.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use impact_sde::conditions::{check_theorem, theorem_index_l, CheckOptions};
use impact_sde::config::{ConfigError, ExperimentConfig};
use impact_sde::error::ModelError;
use impact_sde::fields::FieldEngine;
use impact_sde::market::{MarketModel, PayoffSpec};
use impact_sde::pareto::{exponential_closed_form, r_eval, ParetoPoint};
use impact_sde::sim::{initial_state, run_ensemble, OrderFlow, SimulationConfig};
use impact_sde::utility::{build_from_risk_aversion, AgentSet, RiskAversionShape};

fn model_err(e: ModelError) -> PyErr {
    match e {
        ModelError::NumericFailure(_) | ModelError::ConjugateInfeasible { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config_err(e: ConfigError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn point_dict<'py>(py: Python<'py>, p: &ParetoPoint) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("r", p.r)?;
    d.set_item("r_x", p.lambda)?;
    d.set_item("r_v", p.r_v.clone())?;
    d.set_item("r_xx", p.r_xx)?;
    d.set_item("r_xv", p.r_xv.clone())?;
    d.set_item("r_vv", p.r_vv.clone())?;
    d.set_item("allocation", p.allocation.clone())?;
    Ok(d)
}

/// A set of market makers.
#[pyclass(name = "Agents", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAgents {
    inner: AgentSet,
}

#[pymethods]
impl PyAgents {
    /// Exponential utilities `-exp(-a x)/a` with the given coefficients.
    #[staticmethod]
    fn exponential(a: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: AgentSet::exponential(&a).map_err(model_err)?,
        })
    }

    /// Utilities with risk aversion `level + amplitude * tanh(rate * x)`, one per level.
    #[staticmethod]
    #[pyo3(signature = (levels, amplitude = 0.5, rate = 1.0, max_order = 4))]
    fn tanh(levels: Vec<f64>, amplitude: f64, rate: f64, max_order: usize) -> PyResult<Self> {
        let specs = levels
            .into_iter()
            .map(|level| {
                let shape = RiskAversionShape::Tanh { level, amplitude, rate };
                let c = shape.default_bound();
                build_from_risk_aversion(shape, c, max_order)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(model_err)?;
        Ok(Self {
            inner: AgentSet::new(specs).map_err(model_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Common risk-aversion bound `c`.
    #[getter]
    fn c(&self) -> f64 {
        self.inner.c()
    }

    /// Sup-convolution `r(v, x)` with its partials and the optimal allocation.
    fn sup_convolution<'py>(&self, py: Python<'py>, v: Vec<f64>, x: f64) -> PyResult<Bound<'py, PyDict>> {
        let p = r_eval(&self.inner, &v, x).map_err(model_err)?;
        point_dict(py, &p)
    }
}

/// Closed-form sup-convolution for exponential agents.
#[pyfunction]
fn exponential_sup_convolution<'py>(py: Python<'py>, a: Vec<f64>, v: Vec<f64>, x: f64) -> PyResult<Bound<'py, PyDict>> {
    if a.len() != v.len() || a.is_empty() {
        return Err(PyValueError::new_err("a and v must be non-empty and of equal length"));
    }
    point_dict(py, &exponential_closed_form(&a, &v, x))
}

/// Index `l = floor((M + J) / 2) + 1`.
#[pyfunction]
fn theorem_index(m: usize, j: usize) -> usize {
    theorem_index_l(m, j)
}

/// Field engine over a desk with linear endowment `g0 + sigma0 z` and dividends `slope_j z`.
#[pyclass(name = "Engine", frozen)]
struct PyEngine {
    inner: FieldEngine,
}

#[pymethods]
impl PyEngine {
    #[new]
    #[pyo3(signature = (agents, sigma0, slopes, nodes = 64))]
    fn new(agents: &PyAgents, sigma0: f64, slopes: Vec<f64>, nodes: usize) -> PyResult<Self> {
        let dividends = slopes.into_iter().map(|s| PayoffSpec::linear(0.0, s)).collect();
        let model = MarketModel::new(PayoffSpec::linear(0.0, sigma0), dividends).map_err(model_err)?;
        Ok(Self {
            inner: FieldEngine::new(agents.inner.clone(), model, nodes).map_err(model_err)?,
        })
    }

    /// `F` and its partials up to `order` (0, 1 or 2).
    #[pyo3(signature = (t, z, v, x, q, order = 1))]
    fn eval_f<'py>(
        &self,
        py: Python<'py>,
        t: f64,
        z: f64,
        v: Vec<f64>,
        x: f64,
        q: Vec<f64>,
        order: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let f = self.inner.eval_f(t, z, &v, x, &q, order).map_err(model_err)?;
        let d = PyDict::new(py);
        d.set_item("F", f.f)?;
        d.set_item("F_x", f.f_x)?;
        d.set_item("F_v", f.f_v)?;
        d.set_item("F_xx", f.f_xx)?;
        d.set_item("F_xv", f.f_xv)?;
        d.set_item("F_vv", f.f_vv)?;
        Ok(d)
    }

    /// Clark-Ocone integrand `H` and its weight gradient.
    fn eval_h(&self, t: f64, z: f64, v: Vec<f64>, x: f64, q: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        self.inner.eval_h(t, z, &v, x, &q).map_err(model_err)
    }

    /// Weights and cash `(v, x)` with `F_v = u`, `F_x = y`.
    fn solve_conjugate(&self, t: f64, z: f64, u: Vec<f64>, y: f64, q: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        let c = self.inner.solve_conjugate(t, z, &u, y, &q, None).map_err(model_err)?;
        Ok((c.v, c.x))
    }

    /// Volatility `K(u, q)` of the utility process.
    fn eval_k(&self, t: f64, z: f64, u: Vec<f64>, q: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.eval_k(t, z, &u, &q, None).map_err(model_err)?.0)
    }

    /// Initial utilities `U_0` and the normalized weights for `(v0, x0, q0)`.
    fn initial_state(&self, v0: Vec<f64>, x0: f64, q0: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        initial_state(&self.inner, &v0, x0, &q0).map_err(model_err)
    }

    /// Simulates a constant-position ensemble and returns its summary.
    #[pyo3(signature = (v0, x0, q, paths = 100, dt = 1.0 / 256.0, seed = 0, log_coordinates = true))]
    #[allow(clippy::too_many_arguments)]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        v0: Vec<f64>,
        x0: f64,
        q: Vec<f64>,
        paths: usize,
        dt: f64,
        seed: u64,
        log_coordinates: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (u0, v) = initial_state(&self.inner, &v0, x0, &q).map_err(model_err)?;
        let cfg = SimulationConfig {
            dt,
            n_paths: paths,
            seed,
            use_log_coordinates: log_coordinates,
            ..SimulationConfig::default()
        };
        let flow = OrderFlow::Constant(q);
        let ens = py
            .detach(|| run_ensemble(&self.inner, &flow, &cfg, &u0, Some((&v, x0)), 0))
            .map_err(model_err)?;
        let s = &ens.summary;
        let d = PyDict::new(py);
        d.set_item("paths", s.n_paths)?;
        d.set_item("completed", s.completed)?;
        d.set_item("explosions", s.explosions)?;
        d.set_item("u0", s.u0.clone())?;
        d.set_item("mean", s.mean.clone())?;
        d.set_item("stderr", s.stderr.clone())?;
        d.set_item("oracle_error", s.oracle_error)?;
        let terminal: Vec<Vec<f64>> = ens.terminals.iter().map(|p| p.terminal_u().to_vec()).collect();
        let brownian: Vec<f64> = ens.terminals.iter().map(|p| p.terminal_b()).collect();
        d.set_item("terminal_u", terminal)?;
        d.set_item("terminal_b", brownian)?;
        Ok(d)
    }
}

/// An experiment parsed from TOML config text.
#[pyclass(name = "Experiment", frozen)]
struct PyExperiment {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::parse(text).map_err(config_err)?,
        })
    }

    /// Effective config with every default filled in.
    fn echo(&self) -> String {
        self.inner.echo()
    }

    #[getter]
    fn sha256(&self) -> String {
        self.inner.hash()
    }

    /// Checks a theorem's hypotheses; returns `(verdict, report text)`.
    fn check(&self, theorem: u8) -> PyResult<(String, String)> {
        if !(1..=3).contains(&theorem) {
            return Err(PyValueError::new_err("theorem must be 1, 2 or 3"));
        }
        let agents = self.inner.build_agents().map_err(config_err)?;
        let model = self.inner.build_model().map_err(config_err)?;
        let report = check_theorem(&agents, &model, theorem, &CheckOptions::default());
        Ok((report.verdict.to_string(), report.to_string()))
    }

    /// Runs the configured ensemble; returns `(mean U_1, stderr, fraction stopped)`.
    fn simulate(&self) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
        let engine = self.inner.build_engine().map_err(config_err)?;
        let flow = self.inner.build_flow().map_err(config_err)?;
        let (v0, x0) = self.inner.initial();
        let (u0, v) = initial_state(&engine, &v0, x0, &self.inner.start_position()).map_err(model_err)?;
        let ens = run_ensemble(&engine, &flow, &self.inner.simulation(), &u0, Some((&v, x0)), 0).map_err(model_err)?;
        let s = ens.summary;
        let stopped = s.fraction_stopped();
        Ok((s.mean, s.stderr, stopped))
    }
}

#[pymodule]
fn impact_sde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAgents>()?;
    m.add_class::<PyEngine>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(exponential_sup_convolution, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_index, m)?)?;
    Ok(())
}
