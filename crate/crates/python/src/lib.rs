//! Python bindings for flowgrad.

use std::path::PathBuf;

use flowgrad::config::{cavity_viscosity as cavity_nu, Experiment, ExperimentConfig, NoiseLevels};
use flowgrad::fem::{NodalField, StructuredGrid};
use flowgrad::field::{FieldModel, Variant};
use flowgrad::inverse::{relative_mse_values, Problem, Progress, RunOptions, RunReport};
use flowgrad::solver::{cavity_dirichlet, newton_solve, NewtonConfig, PhysicsConstants};
use flowgrad::tape::{Tape, Tensor, DEFAULT_FD_STEP};
use flowgrad::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(flowgrad, NumericalError, PyRuntimeError, "The forward simulation or the optimizer failed.");
create_exception!(flowgrad, GradientCheckError, PyRuntimeError, "Reverse-mode and finite-difference gradients disagree.");

fn py_err(e: Error) -> PyErr {
    match e {
        Error::GradientCheck { .. } => GradientCheckError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        e if e.is_numerical() => NumericalError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Experiment configuration; mirrors the TOML file read by the CLI.
#[pyclass(name = "Config", module = "flowgrad", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults for `experiment`: "cavity_viscosity", "conjugate_heat" or "passive_transport".
    #[new]
    fn new(experiment: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::new(parse(experiment)?),
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn experiment(&self) -> &'static str {
        self.inner.name().as_str()
    }

    #[getter]
    fn nx(&self) -> usize {
        self.inner.grid.nx
    }

    #[setter]
    fn set_nx(&mut self, nx: usize) {
        self.inner.grid.nx = nx;
    }

    #[getter]
    fn ny(&self) -> usize {
        self.inner.grid.ny
    }

    #[setter]
    fn set_ny(&mut self, ny: usize) {
        self.inner.grid.ny = ny;
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().as_str()
    }

    #[setter]
    fn set_variant(&mut self, variant: &str) -> PyResult<()> {
        self.inner.model.variant = Some(parse::<Variant>(variant)?);
        Ok(())
    }

    #[getter]
    fn model_seed(&self) -> u64 {
        self.inner.model.seed
    }

    #[setter]
    fn set_model_seed(&mut self, seed: u64) {
        self.inner.model.seed = seed;
    }

    #[getter]
    fn observation_seed(&self) -> u64 {
        self.inner.observations.seed
    }

    #[setter]
    fn set_observation_seed(&mut self, seed: u64) {
        self.inner.observations.seed = seed;
    }

    #[getter]
    fn observation_count(&self) -> usize {
        self.inner.observation_count()
    }

    #[setter]
    fn set_observation_count(&mut self, count: usize) {
        self.inner.observations.count = Some(count);
    }

    /// Noise levels; a single float or a list for a sweep.
    #[getter]
    fn noise(&self) -> Vec<f64> {
        self.inner.noise_levels()
    }

    #[setter]
    fn set_noise(&mut self, levels: Vec<f64>) {
        self.inner.observations.noise = match levels[..] {
            [eps] => NoiseLevels::Single(eps),
            _ => NoiseLevels::Sweep(levels),
        };
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.inner.optimizer.max_steps
    }

    #[setter]
    fn set_max_steps(&mut self, steps: usize) {
        self.inner.optimizer.max_steps = steps;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(experiment={:?}, nx={}, ny={}, variant={:?})",
            self.experiment(),
            self.nx(),
            self.ny(),
            self.variant()
        )
    }
}

/// Uniform Q1 grid on the unit square, nodes numbered row by row.
#[pyclass(name = "Grid", module = "flowgrad", from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: StructuredGrid,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(nx: usize, ny: usize) -> PyResult<Self> {
        Ok(Self {
            inner: StructuredGrid::new(nx, ny).map_err(py_err)?,
        })
    }

    #[getter]
    fn nx(&self) -> usize {
        self.inner.nx()
    }

    #[getter]
    fn ny(&self) -> usize {
        self.inner.ny()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn spacing(&self) -> (f64, f64) {
        self.inner.spacing()
    }

    fn coords(&self) -> Vec<(f64, f64)> {
        self.inner.coords().iter().map(|&[x, y]| (x, y)).collect()
    }

    fn boundary_nodes(&self) -> Vec<usize> {
        self.inner.all_boundary_nodes()
    }

    fn __repr__(&self) -> String {
        format!("Grid({}, {})", self.inner.nx(), self.inner.ny())
    }
}

/// Summary of a finished inversion.
#[pyclass(name = "RunResult", module = "flowgrad")]
struct PyRunResult {
    report: RunReport,
    estimate: Vec<f64>,
    reference: Vec<f64>,
    params: Vec<f64>,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn relative_mse_percent(&self) -> f64 {
        self.report.relative_mse_percent
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.report.loss_history.clone()
    }

    #[getter]
    fn initial_loss(&self) -> f64 {
        self.report.initial_loss
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.report.final_loss
    }

    #[getter]
    fn steps(&self) -> usize {
        self.report.steps
    }

    #[getter]
    fn newton_iters(&self) -> Vec<usize> {
        self.report.newton_iters.clone()
    }

    #[getter]
    fn termination(&self) -> String {
        serde_json::to_value(self.report.termination)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }

    /// `(u, v, p)` relative errors of the re-solved flow, cavity runs only.
    #[getter]
    fn flow_relative_mse_percent(&self) -> Option<(f64, f64, f64)> {
        self.report.flow_relative_mse_percent.as_ref().map(|f| (f.u, f.v, f.p))
    }

    #[getter]
    fn estimate(&self) -> Vec<f64> {
        self.estimate.clone()
    }

    #[getter]
    fn reference(&self) -> Vec<f64> {
        self.reference.clone()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn report_json(&self) -> String {
        self.report.to_json()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunResult(relative_mse_percent={:.4}, final_loss={:.3e}, steps={})",
            self.report.relative_mse_percent, self.report.final_loss, self.report.steps
        )
    }
}

/// A configured inverse problem: grid, reference field, observations and
/// the untrained field model.
#[pyclass(name = "Problem", module = "flowgrad")]
struct PyProblem {
    inner: Problem,
    model: FieldModel,
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let inner = Problem::new(&config.inner).map_err(py_err)?;
        let model = inner.initial_model();
        Ok(Self { inner, model })
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid {
            inner: self.inner.grid.clone(),
        }
    }

    #[getter]
    fn reference(&self) -> Vec<f64> {
        self.inner.reference.values().to_vec()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn initial_params(&self) -> Vec<f64> {
        self.model.params.clone()
    }

    /// Observed node indices and values per component.
    fn observations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let obs = &self.inner.observations;
        let d = PyDict::new(py);
        d.set_item("nodes", obs.nodes.clone())?;
        for (c, values) in obs.components.iter().zip(&obs.values) {
            d.set_item(c.as_str(), values.clone())?;
        }
        Ok(d)
    }

    /// Every simulated nodal field for a nodal coefficient.
    fn simulate<'py>(&self, py: Python<'py>, coefficient: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let fields = py.detach(|| self.inner.simulate(&coefficient)).map_err(py_err)?;
        let d = PyDict::new(py);
        for (c, values) in fields {
            d.set_item(c.as_str(), values)?;
        }
        Ok(d)
    }

    /// Nodal coefficient produced by `params`, after the positivity floor.
    fn coefficient(&self, params: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut model = self.model.clone();
        model.params = params;
        Ok(self.inner.coefficient(&model).map_err(py_err)?.into_values())
    }

    /// `(loss, gradient)` at `params`.
    fn evaluate(&self, py: Python<'_>, params: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let e = py.detach(|| self.inner.evaluate(&self.model, &params)).map_err(py_err)?;
        Ok((e.loss, e.grad))
    }

    /// Central differences against reverse mode at the initial parameters.
    #[pyo3(signature = (indices, step = DEFAULT_FD_STEP))]
    fn gradcheck<'py>(&self, py: Python<'py>, indices: Vec<usize>, step: f64) -> PyResult<Bound<'py, PyDict>> {
        let check = py
            .detach(|| self.inner.gradcheck(&self.model, &self.model.params, &indices, step))
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("indices", check.indices)?;
        d.set_item("analytic", check.analytic)?;
        d.set_item("numeric", check.numeric)?;
        d.set_item("max_rel_error", check.max_rel_error)?;
        Ok(d)
    }

    /// Fits the field. `progress`, if given, is called with a dict per accepted step.
    #[pyo3(signature = (progress = None, debug_gradcheck = false))]
    fn run(&self, py: Python<'_>, progress: Option<Bound<'_, PyAny>>, debug_gradcheck: bool) -> PyResult<PyRunResult> {
        let mut callback_error: Option<PyErr> = None;
        let mut cb = |p: &Progress| {
            let Some(f) = &progress else { return };
            if callback_error.is_some() {
                return;
            }
            let call = || -> PyResult<()> {
                let d = PyDict::new(py);
                d.set_item("step", p.step)?;
                d.set_item("loss", p.loss)?;
                d.set_item("projected_gradient_norm", p.projected_gradient_norm)?;
                d.set_item("newton_iterations", p.newton_iterations)?;
                d.set_item("newton_residuals", p.newton_residuals.clone())?;
                f.call1((d,))?;
                Ok(())
            };
            if let Err(e) = call() {
                callback_error = Some(e);
            }
        };
        let out = self.inner.run_with(RunOptions {
            debug_gradcheck,
            progress: Some(&mut cb),
        });
        if let Some(e) = callback_error {
            return Err(e);
        }
        let out = out.map_err(py_err)?;
        Ok(PyRunResult {
            estimate: out.estimate.values().to_vec(),
            reference: out.reference.values().to_vec(),
            params: out.model.params,
            report: out.report,
        })
    }
}

#[pyfunction]
fn cavity_viscosity(x: f64, y: f64) -> f64 {
    cavity_nu(x, y)
}

/// Reference coefficient of an experiment at `(x, y)`.
#[pyfunction]
fn reference_coefficient(experiment: &str, x: f64, y: f64) -> PyResult<f64> {
    Ok(parse::<Experiment>(experiment)?.reference_coefficient(x, y))
}

/// Steady lid-driven cavity flow for a nodal viscosity.
#[pyfunction]
#[pyo3(signature = (grid, nu, lid = 1.0, tol = 1e-8, max_iter = 10))]
fn solve_cavity<'py>(
    py: Python<'py>,
    grid: &PyGrid,
    nu: Vec<f64>,
    lid: f64,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let g = &grid.inner;
    let solved = py.detach(|| {
        let mut tape = Tape::new();
        let nu = tape.constant(Tensor::vector(nu));
        let bc = cavity_dirichlet(g, lid)?;
        let config = NewtonConfig {
            tol_residual: tol,
            max_iter,
            initial_guess: None,
        };
        let s = newton_solve(&mut tape, g, nu, &PhysicsConstants::default(), &bc, &config)?;
        let values = |n| tape.value(n).data().to_vec();
        Ok::<_, Error>((values(s.u), values(s.v), values(s.p), s.newton_iterations, s.residual_history))
    });
    let (u, v, p, iterations, residuals) = solved.map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("u", u)?;
    d.set_item("v", v)?;
    d.set_item("p", p)?;
    d.set_item("iterations", iterations)?;
    d.set_item("residuals", residuals)?;
    Ok(d)
}

/// `100 Σ(est - ref)² / Σ ref²`
#[pyfunction]
fn relative_mse(estimate: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    relative_mse_values(&estimate, &reference).map_err(py_err)
}

/// Writes a nodal field as `x,y,value` CSV.
#[pyfunction]
fn write_field_csv(grid: &PyGrid, values: Vec<f64>, path: PathBuf) -> PyResult<()> {
    let field = NodalField::new(&grid.inner, values).map_err(py_err)?;
    let file = std::fs::File::create(path)?;
    field.write_csv(std::io::BufWriter::new(file)).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "flowgrad")]
pub fn flowgrad_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(cavity_viscosity, m)?)?;
    m.add_function(wrap_pyfunction!(reference_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(solve_cavity, m)?)?;
    m.add_function(wrap_pyfunction!(relative_mse, m)?)?;
    m.add_function(wrap_pyfunction!(write_field_csv, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add("GradientCheckError", m.py().get_type::<GradientCheckError>())?;
    Ok(())
}
