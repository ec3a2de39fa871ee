//! Python bindings: objectives, probes, gains, filters, integrators and the experiment runner.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use qsa_core::analysis::{self, MarkovChainSpec};
use qsa_core::dynamics::{self as dyn_, FieldSpec, LinearVariant, ProbingGainPolicy};
use qsa_core::experiments::{self, ExperimentConfig, RunManifest};
use qsa_core::filters::{self, FilterSpec};
use qsa_core::integrator::{self, BoxProjection, Channels, GainSchedule, Trajectory};
use qsa_core::objectives;
use qsa_core::probing::{Convention, FrequencyBasis, ProbeSpec};

create_exception!(qsa, QsaError, PyException);

fn err(e: qsa_core::QsaError) -> PyErr {
    QsaError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| QsaError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn variant(s: &str) -> PyResult<LinearVariant> {
    match s {
        "A" | "a" => Ok(LinearVariant::A),
        "B" | "b" => Ok(LinearVariant::B),
        _ => Err(QsaError::new_err(format!("unknown linear variant {s:?}; expected 'A' or 'B'"))),
    }
}

fn trajectory_out(t: &Trajectory) -> (Vec<f64>, Vec<Vec<f64>>) {
    ((0..t.len()).map(|i| t.time(i)).collect(), (0..t.len()).map(|i| t.state(i).to_vec()).collect())
}

fn projection(box_half_width: Option<f64>, d: usize) -> PyResult<BoxProjection> {
    match box_half_width {
        Some(b) => BoxProjection::uniform(d, -b, b).map_err(err),
        None => Ok(BoxProjection::disabled()),
    }
}

/// Scalar test objective with analytic gradient.
#[pyclass(module = "qsa", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Objective {
    inner: objectives::Objective,
}

#[pymethods]
impl Objective {
    #[staticmethod]
    fn rastrigin() -> Self {
        Self { inner: objectives::rastrigin() }
    }

    #[staticmethod]
    fn camel3() -> Self {
        Self { inner: objectives::camel3() }
    }

    /// `(theta - opt)^T P (theta - opt) / 2` style quadratic from a row-major matrix.
    #[staticmethod]
    fn quadratic(p: Vec<Vec<f64>>, opt: Vec<f64>) -> PyResult<Self> {
        let n = p.len();
        if p.iter().any(|r| r.len() != n) {
            return Err(QsaError::new_err("P must be square"));
        }
        let m = DMatrix::from_fn(n, n, |i, j| p[i][j]);
        Ok(Self { inner: objectives::quadratic(m, opt).map_err(err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, theta: Vec<f64>) -> f64 {
        self.inner.value(&theta)
    }

    fn gradient(&self, theta: Vec<f64>) -> Vec<f64> {
        self.inner.gradient(&theta)
    }

    fn __repr__(&self) -> String {
        format!("Objective({:?}, dim={})", self.inner.name(), self.inner.dim())
    }
}

/// Deterministic multi-sine probing signal.
#[pyclass(module = "qsa", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Probe {
    inner: ProbeSpec,
}

#[pymethods]
impl Probe {
    /// `amplitude [sin(t/4 + phase), sin(t/e^2 + phase)]`.
    #[staticmethod]
    #[pyo3(signature = (amplitude = 2.0, phase = 0.0))]
    fn standard_2d(amplitude: f64, phase: f64) -> Self {
        Self { inner: ProbeSpec::standard_2d(amplitude, phase) }
    }

    /// Coordinate `i` is `amplitudes[i] * sin(omegas[i] t + phases[i])`, or the `two-pi-cycles` cosine form.
    #[staticmethod]
    #[pyo3(signature = (omegas, amplitudes, phases, convention = "raw-radian"))]
    fn sinusoids(omegas: Vec<f64>, amplitudes: Vec<f64>, phases: Vec<f64>, convention: &str) -> PyResult<Self> {
        let conv = match convention {
            "raw-radian" => Convention::RawRadian,
            "two-pi-cycles" => Convention::TwoPiCycles,
            other => return Err(QsaError::new_err(format!("unknown convention {other:?}"))),
        };
        let basis = FrequencyBasis::raw(&omegas).map_err(err)?;
        Ok(Self { inner: ProbeSpec::sinusoids(basis, &amplitudes, &phases, conv).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn max_omega(&self) -> f64 {
        self.inner.max_omega()
    }

    fn value_at(&self, t: f64) -> Vec<f64> {
        self.inner.value_at(t)
    }

    /// Mean of `psi psi^T`.
    fn covariance(&self) -> Vec<Vec<f64>> {
        let s = qsa_core::probing::probe_poisson(&self.inner).sigma;
        (0..s.nrows()).map(|i| s.row(i).iter().copied().collect()).collect()
    }
}

/// Step-size schedule `a_t`.
#[pyclass(module = "qsa", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Gain {
    inner: GainSchedule,
}

#[pymethods]
impl Gain {
    #[staticmethod]
    fn constant(alpha: f64) -> PyResult<Self> {
        Self::checked(GainSchedule::constant(alpha))
    }

    /// `alpha / (1 + t / t_e)^rho`.
    #[staticmethod]
    #[pyo3(signature = (alpha, rho, t_e = 1.0))]
    fn power_law(alpha: f64, rho: f64, t_e: f64) -> PyResult<Self> {
        Self::checked(GainSchedule::PowerLaw { alpha, rho, t_e })
    }

    /// `min(c, (t + 1)^-rho)`.
    #[staticmethod]
    fn clipped_power_law(c: f64, rho: f64) -> PyResult<Self> {
        Self::checked(GainSchedule::ClippedPowerLaw { c, rho })
    }

    fn at(&self, t: f64) -> f64 {
        self.inner.at(t)
    }
}

impl Gain {
    fn checked(g: GainSchedule) -> PyResult<Self> {
        g.validate().map_err(err)?;
        Ok(Self { inner: g })
    }
}

/// First- or second-order low-pass output filter.
#[pyclass(module = "qsa")]
struct Filter {
    inner: filters::Filter,
    spec: FilterSpec,
}

#[pymethods]
impl Filter {
    #[staticmethod]
    #[pyo3(signature = (gamma, dim = 1))]
    fn first_order(gamma: f64, dim: usize) -> PyResult<Self> {
        Self::build(FilterSpec::first_order(gamma), dim)
    }

    #[staticmethod]
    #[pyo3(signature = (gamma, zeta = 0.8, dim = 1))]
    fn second_order(gamma: f64, zeta: f64, dim: usize) -> PyResult<Self> {
        Self::build(FilterSpec::second_order(gamma, zeta), dim)
    }

    fn step(&mut self, u: Vec<f64>, dt: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.step(&u, dt).map_err(err)?.to_vec())
    }

    /// Gain magnitude at angular frequency `omega`.
    fn magnitude(&self, omega: f64) -> f64 {
        self.spec.magnitude(omega)
    }
}

impl Filter {
    fn build(spec: FilterSpec, dim: usize) -> PyResult<Self> {
        Ok(Self { inner: filters::Filter::new(spec.clone(), dim).map_err(err)?, spec })
    }
}

/// 1qSGD (`order = 1`) or 2qSGD (`order = 2`) with a constant probing gain. Returns `(times, states)`.
#[pyfunction]
#[pyo3(signature = (objective, epsilon, gain, probe, theta0, dt, horizon, order = 1, box_half_width = None))]
#[allow(clippy::too_many_arguments)]
fn qsgd(
    objective: &Objective,
    epsilon: f64,
    gain: &Gain,
    probe: &Probe,
    theta0: Vec<f64>,
    dt: f64,
    horizon: f64,
    order: u8,
    box_half_width: Option<f64>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let policy = ProbingGainPolicy::constant(epsilon);
    let cost = objective.inner.clone();
    let field = match order {
        1 => FieldSpec::qsgd1(cost, policy),
        2 => FieldSpec::qsgd2(cost, policy),
        _ => return Err(QsaError::new_err("order must be 1 or 2")),
    }
    .map_err(err)?;
    let proj = projection(box_half_width, theta0.len())?;
    let traj = integrator::integrate_qsa(&field, &gain.inner, Some(&probe.inner), &theta0, None, dt, horizon, proj, Channels::default())
        .map_err(err)?;
    Ok(trajectory_out(&traj))
}

/// Scalar linear example with constant gain `alpha`. Returns `(times, states)`.
#[pyfunction]
#[pyo3(signature = (variant, omega, alpha, theta0 = 0.0, dt = 0.1, horizon = 1000.0))]
fn linear_example(variant: &str, omega: f64, alpha: f64, theta0: f64, dt: f64, horizon: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let field = FieldSpec::linear_example(self::variant(variant)?, omega).map_err(err)?;
    let traj = integrator::integrate_qsa(
        &field,
        &GainSchedule::constant(alpha),
        None,
        &[theta0],
        None,
        dt,
        horizon,
        BoxProjection::disabled(),
        Channels::default(),
    )
    .map_err(err)?;
    let (t, x) = trajectory_out(&traj);
    Ok((t, x.into_iter().map(|v| v[0]).collect()))
}

/// Closed-form quantities of a linear example: `theta_star`, `upsilon_bar`, `y_star`, ...
#[pyfunction]
fn linear_closed_forms<'py>(py: Python<'py>, variant: &str, omega: f64) -> PyResult<Bound<'py, PyAny>> {
    let c = dyn_::linear_example_closed_forms(self::variant(variant)?, omega).map_err(err)?;
    let d = serde_json::json!({
        "theta_star": c.theta_star,
        "a_bar": c.a_bar,
        "b_bar": c.b_bar,
        "upsilon_bar": c.upsilon_bar,
        "y_star": c.y_star,
    });
    to_py(py, &d)
}

/// Log-log least squares over `(alpha, bias)` pairs. Returns `(slope, intercept, r2)`.
#[pyfunction]
fn slope_fit(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = analysis::slope_fit(&points).map_err(err)?;
    Ok((f.slope, f.intercept, f.r2))
}

/// Markov-driven linear SA bias decomposition for a finite chain.
#[pyfunction]
#[pyo3(signature = (transition, g, a, alpha, steps, seed = 0))]
fn markov_sa_bias<'py>(
    py: Python<'py>,
    transition: Vec<Vec<f64>>,
    g: Vec<f64>,
    a: Vec<f64>,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = MarkovChainSpec { transition, g, a };
    let rec = py.detach(|| analysis::markov_sa_bias(&spec, alpha, steps, seed)).map_err(err)?;
    let mut v = serde_json::to_value(&rec).map_err(|e| QsaError::new_err(e.to_string()))?;
    v["identity_gap"] = rec.identity_gap().into();
    to_py(py, &v)
}

/// Per-replicate seed derived from a base seed.
#[pyfunction]
fn seed_fanout(base: u64, index: u64) -> u64 {
    experiments::seed_fanout(base, index)
}

/// Runs a TOML experiment config into `output_dir` and returns the manifest as a dict.
#[pyfunction]
fn run_config<'py>(py: Python<'py>, toml: &str, output_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_toml_str(toml).map_err(err)?;
    let manifest = py.detach(|| experiments::run_config_in(&cfg, &output_dir)).map_err(err)?;
    to_py(py, &manifest)
}

/// Re-runs a saved manifest; returns its checks, including byte-for-byte reproducibility.
#[pyfunction]
fn verify<'py>(py: Python<'py>, manifest_path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let m = RunManifest::load(&manifest_path).map_err(err)?;
    let checks = py.detach(|| experiments::verify_manifest(&m)).map_err(err)?;
    to_py(py, &checks)
}

/// Long-format `experiment,series,x,y` CSV text for a saved manifest.
#[pyfunction]
fn plotdata(manifest_path: PathBuf) -> PyResult<String> {
    let m = RunManifest::load(&manifest_path).map_err(err)?;
    let mut buf = Vec::new();
    experiments::emit_plotdata(&m, &mut buf).map_err(err)?;
    String::from_utf8(buf).map_err(|e| QsaError::new_err(e.to_string()))
}

#[pymodule]
fn qsa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("QsaError", m.py().get_type::<QsaError>())?;
    m.add_class::<Objective>()?;
    m.add_class::<Probe>()?;
    m.add_class::<Gain>()?;
    m.add_class::<Filter>()?;
    m.add_function(wrap_pyfunction!(qsgd, m)?)?;
    m.add_function(wrap_pyfunction!(linear_example, m)?)?;
    m.add_function(wrap_pyfunction!(linear_closed_forms, m)?)?;
    m.add_function(wrap_pyfunction!(slope_fit, m)?)?;
    m.add_function(wrap_pyfunction!(markov_sa_bias, m)?)?;
    m.add_function(wrap_pyfunction!(seed_fanout, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(plotdata, m)?)?;
    Ok(())
}
