//! Python bindings for the R-GTD policy-evaluation lab.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rgtd_core::closed_form;
use rgtd_core::dynamics::{self, PdgdSystem};
use rgtd_core::environments::{self, DistMode, GeneratorConfig};
use rgtd_core::harness::{self, ExperimentConfig};
use rgtd_core::learners::{self, Algorithm, RunSpec, Sampler, StepSchedule};
use rgtd_core::mdp::EvalProblem;
use rgtd_core::{Mat, Vector};

create_exception!(rgtd, RgtdError, PyException);

fn err(e: rgtd_core::Error) -> PyErr {
    RgtdError::new_err(e.to_string())
}

fn to_vec(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dist_mode(name: &str) -> PyResult<DistMode> {
    match name {
        "uniform" => Ok(DistMode::Uniform),
        "stationary" => Ok(DistMode::Stationary),
        "skewed" => Ok(DistMode::Skewed),
        other => Err(RgtdError::new_err(format!("unknown dist mode `{other}`"))),
    }
}

/// A policy-evaluation problem with its derived quantities.
#[pyclass(name = "Problem", module = "rgtd", frozen)]
struct PyProblem {
    inner: EvalProblem,
}

#[pymethods]
impl PyProblem {
    #[staticmethod]
    fn toy() -> Self {
        PyProblem { inner: environments::toy_3state() }
    }

    #[staticmethod]
    fn baird() -> Self {
        PyProblem { inner: environments::baird() }
    }

    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, gamma, n_features, seed=0, threshold=0.2, dist="uniform"))]
    fn random(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        n_features: usize,
        seed: u64,
        threshold: f64,
        dist: &str,
    ) -> PyResult<Self> {
        let cfg = GeneratorConfig {
            n_states,
            n_actions,
            gamma,
            n_features,
            reward_sparsify_threshold: threshold,
            seed,
            dist_mode: dist_mode(dist)?,
        };
        Ok(PyProblem { inner: environments::random_mdp(&cfg).map_err(err)? })
    }

    /// Random problem whose FIM is exactly singular (the last feature spans its null space).
    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, gamma, n_features, seed=0, threshold=0.2, dist="skewed"))]
    fn singular_random(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        n_features: usize,
        seed: u64,
        threshold: f64,
        dist: &str,
    ) -> PyResult<Self> {
        let cfg = GeneratorConfig {
            n_states,
            n_actions,
            gamma,
            n_features,
            reward_sparsify_threshold: threshold,
            seed,
            dist_mode: dist_mode(dist)?,
        };
        Ok(PyProblem { inner: environments::singular_random_mdp(&cfg).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyProblem { inner: EvalProblem::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn singularize(&self) -> PyResult<Self> {
        Ok(PyProblem { inner: environments::singularize(&self.inner).map_err(err)? })
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    #[getter]
    fn phi(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.phi())
    }

    #[getter]
    fn v_pi(&self) -> Vec<f64> {
        to_vec(self.inner.v_pi())
    }

    #[getter]
    fn theta_star(&self) -> Vec<f64> {
        to_vec(self.inner.theta_star())
    }

    /// The FIM `M`, row-major.
    fn fim(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&closed_form::assemble(&self.inner).map_err(err)?.fim))
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(n_states={}, n_actions={}, n_features={}, gamma={})",
            self.inner.n_states(),
            self.inner.mdp().n_actions(),
            self.inner.n_features(),
            self.inner.gamma()
        )
    }
}

/// `theta_RGTD(c)`, the unique minimizer of the regularized objective.
#[pyfunction]
fn rgtd_solution(problem: &PyProblem, c: f64) -> PyResult<Vec<f64>> {
    let cm = closed_form::assemble(&problem.inner).map_err(err)?;
    Ok(to_vec(&closed_form::rgtd_solution(&cm, c).map_err(err)?))
}

/// `(theta, w, lambda)` from the full KKT system.
#[pyfunction]
fn saddle_point(problem: &PyProblem, c: f64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let cm = closed_form::assemble(&problem.inner).map_err(err)?;
    let s = closed_form::saddle_point(&cm, c).map_err(err)?;
    Ok((to_vec(&s.theta), to_vec(&s.w), to_vec(&s.lambda)))
}

/// `(particular, null_basis_columns)` of the GTD2 solution set.
#[pyfunction]
fn gtd2_solutions(problem: &PyProblem) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let cm = closed_form::assemble(&problem.inner).map_err(err)?;
    let set = closed_form::gtd2_solutions(&cm, closed_form::NULL_TOL);
    let cols = set.null_basis.column_iter().map(|c| c.iter().copied().collect()).collect();
    Ok((to_vec(&set.particular), cols))
}

#[pyfunction]
fn mspbe(problem: &PyProblem, theta: Vec<f64>) -> PyResult<f64> {
    let cm = closed_form::assemble(&problem.inner).map_err(err)?;
    if theta.len() != cm.n_features() {
        return Err(RgtdError::new_err(format!("theta needs {} entries", cm.n_features())));
    }
    Ok(closed_form::mspbe(&cm, &Vector::from_vec(theta)))
}

/// Largest real part among the eigenvalues of the PDGD closed-loop matrix.
#[pyfunction]
fn spectral_abscissa(problem: &PyProblem, c: f64) -> PyResult<f64> {
    let cm = closed_form::assemble(&problem.inner).map_err(err)?;
    let sys = PdgdSystem::new(&cm, c).map_err(err)?;
    Ok(dynamics::spectrum_certificate(&sys).map_err(err)?.spectral_abscissa)
}

/// Closed-form report as a JSON string.
#[pyfunction]
#[pyo3(signature = (problem, c=1.0))]
fn solve(problem: &PyProblem, c: f64) -> PyResult<String> {
    harness::to_json(&harness::solve(&problem.inner, c).map_err(err)?).map_err(err)
}

/// One seeded learner run. `algorithm` is `"rgtd"`, `"gtd2"` or `"td0"`; errors are measured
/// against `theta_ref` (default `theta*`).
#[pyfunction]
#[pyo3(signature = (problem, algorithm, iters, seed, c=1.0, theta0=None, theta_ref=None, stride=100))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    algorithm: &str,
    iters: u64,
    seed: u64,
    c: f64,
    theta0: Option<Vec<f64>>,
    theta_ref: Option<Vec<f64>>,
    stride: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let algorithm = match algorithm {
        "rgtd" => Algorithm::Rgtd { c },
        "gtd2" => Algorithm::Gtd2,
        "td0" => Algorithm::Td0,
        other => return Err(RgtdError::new_err(format!("unknown algorithm `{other}`"))),
    };
    let q = problem.inner.n_features();
    let spec = RunSpec {
        algorithm,
        schedule: StepSchedule::Standard,
        iters,
        stride,
        theta0: theta0.unwrap_or_else(|| vec![0.0; q]),
        theta_ref: theta_ref.unwrap_or_else(|| to_vec(problem.inner.theta_star())),
    };
    let sampler = Sampler::new(&problem.inner);
    let t = py.detach(|| learners::run(&sampler, &spec, seed)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("iters", t.iters)?;
    out.set_item("errors", t.errors)?;
    out.set_item("diverged", t.diverged)?;
    out.set_item("theta", t.final_state.theta)?;
    Ok(out)
}

type ToyRows = Vec<(f64, [f64; 3], bool)>;

/// `(c, [Phi theta]_1..3, below_c0)` rows of the toy trajectory followed by the limit point.
#[pyfunction]
fn toy_trajectory() -> PyResult<(ToyRows, [f64; 3])> {
    let toy = harness::toy_trajectory().map_err(err)?;
    Ok((toy.rows.iter().map(|r| (r.c, r.phi_theta, r.below_c0)).collect(), toy.limit))
}

/// Runs an experiment from a JSON config and returns the written file paths.
#[pyfunction]
#[pyo3(signature = (config_json, output=None))]
fn run_experiment(py: Python<'_>, config_json: &str, output: Option<String>) -> PyResult<Vec<String>> {
    let mut cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    if let Some(out) = output {
        cfg.output = out.into();
    }
    let result = py.detach(|| harness::run_experiment(&cfg)).map_err(err)?;
    Ok(result.files.iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
fn rgtd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RgtdError", m.py().get_type::<RgtdError>())?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(rgtd_solution, m)?)?;
    m.add_function(wrap_pyfunction!(saddle_point, m)?)?;
    m.add_function(wrap_pyfunction!(gtd2_solutions, m)?)?;
    m.add_function(wrap_pyfunction!(mspbe, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_abscissa, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(toy_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
