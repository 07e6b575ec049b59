//! Python bindings: step kernels and cut norms, Wasserstein distances,
//! particle simulation and the command-line experiment runner.

use clap::Parser;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gmfc_core::cli::{self, Cli};
use gmfc_core::controls::{InteractionControl, Phi, RegularControl, RelaxedInteractionControl};
use gmfc_core::dynamics::{self, Controls, InitSpec, ModelSpec, SimConfig};
use gmfc_core::error::Error;
use gmfc_core::experiments;
use gmfc_core::kernels::{self, AnalyticGraphon, MarkSpace, WeightedStepKernel};
use gmfc_core::metrics::{self, EmpiricalMeasure};

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(usize, Vec<f64>)> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("expected a non-empty list of equal-length rows"));
    }
    Ok((d, rows.concat()))
}

/// Block-constant kernel on an `n x n` grid of the unit square.
#[pyclass(module = "gmfc", frozen)]
pub struct StepKernel {
    inner: kernels::StepKernel,
}

#[pymethods]
impl StepKernel {
    /// Scalar kernel from an `n x n` matrix with marks in `[lo, hi]`.
    #[staticmethod]
    #[pyo3(signature = (matrix, lo = 0.0, hi = 1.0))]
    fn from_matrix(matrix: Vec<Vec<f64>>, lo: f64, hi: f64) -> PyResult<Self> {
        let space = MarkSpace::interval(lo, hi).map_err(py_err)?;
        let inner = kernels::StepKernel::from_scalar_matrix(&matrix, space).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Samples a graphon id (`constant:c`, `product`, `threshold`,
    /// `sbm2:p:q`, `exp_decay:r`) at the block midpoints.
    #[staticmethod]
    fn from_graphon(graphon_id: &str, n: usize) -> PyResult<Self> {
        let g = AnalyticGraphon::from_id(graphon_id).map_err(py_err)?;
        let inner = kernels::sample_from_graphon(&g, n).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    /// First mark coordinate of block `(i, j)`.
    fn scalar(&self, i: usize, j: usize) -> PyResult<f64> {
        let n = self.inner.n();
        if i >= n || j >= n {
            return Err(PyValueError::new_err(format!(
                "block ({i}, {j}) outside an {n} x {n} grid"
            )));
        }
        Ok(self.inner.scalar(i, j))
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        let n = self.inner.n();
        (0..n)
            .map(|i| (0..n).map(|j| self.inner.scalar(i, j)).collect())
            .collect()
    }

    /// Cut distance to another kernel after mapping marks to their first
    /// coordinate. Returns `(value, method)`.
    fn cut_distance(&self, other: &StepKernel) -> (f64, String) {
        let c = kernels::cut_distance(&self.inner, &other.inner, &|x: &[f64]| x[0]);
        (c.value, c.method.to_string())
    }

    fn __repr__(&self) -> String {
        format!("StepKernel(n={})", self.inner.n())
    }
}

/// Cut norm of a square matrix with uniform weights; exact up to the
/// enumeration cap, a lower bound above it. Returns `(value, method)`.
#[pyfunction]
#[pyo3(signature = (matrix, restarts = 32, seed = 0))]
fn cut_norm(matrix: Vec<Vec<f64>>, restarts: usize, seed: u64) -> PyResult<(f64, String)> {
    let m = WeightedStepKernel::from_rows(&matrix).map_err(py_err)?;
    let c = kernels::cut_norm(
        &m,
        kernels::CutOptions {
            restarts,
            seed,
            ..kernels::CutOptions::default()
        },
    );
    Ok((c.value, c.method.to_string()))
}

#[pyfunction]
fn cut_norm_exact(matrix: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = WeightedStepKernel::from_rows(&matrix).map_err(py_err)?;
    kernels::cut_norm_exact(&m).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (matrix, restarts = 32, seed = 0))]
fn cut_norm_lower_bound(matrix: Vec<Vec<f64>>, restarts: usize, seed: u64) -> PyResult<f64> {
    let m = WeightedStepKernel::from_rows(&matrix).map_err(py_err)?;
    Ok(kernels::cut_norm_lower_bound(&m, restarts, seed))
}

/// W1 between two uniform empirical measures given as lists of points.
#[pyfunction]
#[pyo3(signature = (a, b, seed = 0))]
fn w1(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, seed: u64) -> PyResult<f64> {
    let (da, xa) = flatten(&a)?;
    let (db, xb) = flatten(&b)?;
    let ma = EmpiricalMeasure::new(da, xa).map_err(py_err)?;
    let mb = EmpiricalMeasure::new(db, xb).map_err(py_err)?;
    metrics::w1(&ma, &mb, seed).map_err(py_err)
}

#[pyfunction]
fn w1_sorted(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::w1_sorted(&a, &b).map_err(py_err)
}

/// `T (L(E V) - E L(V))` for `L(e) = linear e - quadratic e^2` and
/// `V` uniform on `[lo, hi]`.
#[pyfunction]
#[pyo3(signature = (linear, quadratic, lo = 0.0, hi = 1.0, t_final = 1.0, nodes = 4096))]
fn jensen_gap(linear: f64, quadratic: f64, lo: f64, hi: f64, t_final: f64, nodes: usize) -> f64 {
    experiments::jensen_gap(&|e| linear * e - quadratic * e * e, lo, hi, t_final, nodes)
}

/// A particle model: drift, diffusion, running and terminal rewards.
#[pyclass(module = "gmfc", frozen)]
pub struct Model {
    inner: ModelSpec,
    phi: Option<Phi>,
}

#[pymethods]
impl Model {
    /// Bang-bang model with interaction drift and reward `Phi`.
    #[staticmethod]
    #[pyo3(signature = (phi = "tanh"))]
    fn example1(phi: &str) -> PyResult<Self> {
        let phi = Phi::from_id(phi).map_err(py_err)?;
        Ok(Self {
            inner: ModelSpec::example1(phi.clone()),
            phi: Some(phi),
        })
    }

    /// Projection model with running reward `linear e - quadratic e^2`.
    #[staticmethod]
    #[pyo3(signature = (linear = 0.0, quadratic = 1.0, sigma = 1.0))]
    fn example2(linear: f64, quadratic: f64, sigma: f64) -> Self {
        Self {
            inner: ModelSpec::example2(linear, quadratic, sigma),
            phi: None,
        }
    }

    #[staticmethod]
    #[pyo3(signature = (d = 1))]
    fn brownian(d: usize) -> Self {
        Self {
            inner: ModelSpec::brownian(d),
            phi: None,
        }
    }

    #[staticmethod]
    #[pyo3(signature = (sigma = 1.0))]
    fn linear(sigma: f64) -> Self {
        Self {
            inner: ModelSpec::linear(sigma),
            phi: None,
        }
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    fn __repr__(&self) -> String {
        format!("Model({}, d={})", self.inner.name, self.inner.d)
    }
}

/// Output of `simulate`: per-replication costs and final states.
#[pyclass(module = "gmfc", frozen, get_all)]
pub struct SimResult {
    pub times: Vec<f64>,
    pub running_cost: Vec<f64>,
    pub terminal_cost: Vec<f64>,
    pub total_cost: Vec<f64>,
    /// One flat `n x d` list per replication.
    pub final_states: Vec<Vec<f64>>,
    pub j_mean: f64,
    pub j_stderr: f64,
}

#[pymethods]
impl SimResult {
    fn __repr__(&self) -> String {
        format!(
            "SimResult(reps={}, J={:.6} +- {:.6})",
            self.total_cost.len(),
            self.j_mean,
            self.j_stderr
        )
    }
}

/// Simulates `reps` replications of the `n`-agent system. `gamma` is an
/// interaction-control family (`constant`, `bang_bang_phi`, `product_form`,
/// `table`, `hashed_labels`, or with `relaxed=True` `echo_v`,
/// `indicator_v`); `init` is `dirac`, `gaussian`, `uniform` or
/// `per_label_table`.
#[pyfunction]
#[pyo3(signature = (
    model, kernel, gamma = "constant", gamma_params = vec![0.0], relaxed = false,
    init = "dirac", init_params = vec![0.0], t_final = 1.0, dt = 0.01, reps = 16, seed = 0,
    store_stride = 10, workers = None
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    model: &Model,
    kernel: &StepKernel,
    gamma: &str,
    gamma_params: Vec<f64>,
    relaxed: bool,
    init: &str,
    init_params: Vec<f64>,
    t_final: f64,
    dt: f64,
    reps: usize,
    seed: u64,
    store_stride: usize,
    workers: Option<usize>,
) -> PyResult<SimResult> {
    let m = &model.inner;
    let alpha = RegularControl::zero(m.reg_box.clone());
    let controls = if relaxed {
        let gbar = RelaxedInteractionControl::from_params(gamma, &gamma_params, m.int_box.clone()).map_err(py_err)?;
        Controls::Relaxed { gbar, alpha }
    } else {
        let g = InteractionControl::from_params(gamma, &gamma_params, m.int_box.clone(), model.phi.clone())
            .map_err(py_err)?;
        Controls::closed(g, alpha)
    };
    let init = InitSpec::from_params(init, &init_params, 0.0).map_err(py_err)?;
    let cfg = SimConfig {
        store_stride,
        workers,
        ..SimConfig::new(kernel.inner.n(), t_final, dt, reps, seed)
    };
    let out = py
        .detach(|| dynamics::simulate(m, &controls, &kernel.inner, &init, &cfg))
        .map_err(py_err)?;
    let summary = dynamics::evaluate_cost(&out.trajectories);
    Ok(SimResult {
        times: out.trajectories.first().map(|t| t.times.clone()).unwrap_or_default(),
        running_cost: out.trajectories.iter().map(|t| t.running_cost).collect(),
        terminal_cost: out.trajectories.iter().map(|t| t.terminal_cost).collect(),
        total_cost: out.trajectories.iter().map(|t| t.total_cost()).collect(),
        final_states: out.trajectories.iter().map(|t| t.final_states().to_vec()).collect(),
        j_mean: summary.mean,
        j_stderr: summary.stderr,
    })
}

/// Runs the command line in-process, e.g.
/// `run_cli(["--config", "c.toml", "experiment", "example1"])`.
/// Returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    let argv = std::iter::once("gmfc".to_string()).chain(args);
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => return (2, String::new(), e.to_string()),
    };
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = py.detach(|| cli::run(&parsed, &mut out, &mut err));
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

#[pymodule]
fn gmfc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<StepKernel>()?;
    m.add_class::<Model>()?;
    m.add_class::<SimResult>()?;
    m.add_function(wrap_pyfunction!(cut_norm, m)?)?;
    m.add_function(wrap_pyfunction!(cut_norm_exact, m)?)?;
    m.add_function(wrap_pyfunction!(cut_norm_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(w1, m)?)?;
    m.add_function(wrap_pyfunction!(w1_sorted, m)?)?;
    m.add_function(wrap_pyfunction!(jensen_gap, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("EXACT_ENUMERATION_CAP", kernels::EXACT_ENUMERATION_CAP)?;
    Ok(())
}
