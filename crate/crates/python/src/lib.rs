//! Python bindings for `seqrand`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use seqrand::cglmp::StateKind;
use seqrand::guessing::{self, GuessScope, ThetaBasis};
use seqrand::npa::{self, NpaError, WordProfile};
use seqrand::seqsim::{self, EpsilonGrid, InstrumentMode};
use seqrand::SolverConfig;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(text: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    text.parse::<T>().map_err(value_err)
}

fn grid(lo: f64, hi: f64, step: f64) -> PyResult<Vec<f64>> {
    Ok(EpsilonGrid::new(lo, hi, step).map_err(value_err)?.points())
}

/// One-Alice/two-Bob CGLMP chain at Bob¹ sharpness `epsilon`.
#[pyclass(module = "seqrand")]
pub struct Scenario {
    inner: seqsim::SequentialScenario,
}

#[pymethods]
impl Scenario {
    #[new]
    #[pyo3(signature = (state, epsilon, mode = "sqrt"))]
    fn new(state: &str, epsilon: f64, mode: &str) -> PyResult<Self> {
        let kind: StateKind = parse(state)?;
        let mode: InstrumentMode = parse(mode)?;
        let inner = match mode {
            InstrumentMode::Mixture => {
                guessing::mixture_scenario(kind, epsilon, ThetaBasis::Eigen).map_err(value_err)?
            }
            _ => seqsim::cglmp_scenario(kind, &[epsilon, 1.0], mode, None).map_err(value_err)?,
        };
        Ok(Scenario { inner })
    }

    /// `[I_3¹, I_3²]`.
    fn violations(&self) -> PyResult<Vec<f64>> {
        seqsim::round_violations(&self.inner, 3).map_err(value_err)
    }

    /// Joint distribution `p(a, b₁, b₂ | x, y₁, y₂)` flattened with settings
    /// outermost, then outcomes, each in party order.
    fn distribution(&self) -> PyResult<Vec<f64>> {
        Ok(seqsim::sequential_distribution(&self.inner)
            .map_err(value_err)?
            .raw()
            .to_vec())
    }
}

/// Guessing probability with its min-entropy.
#[pyclass(module = "seqrand", frozen, get_all)]
#[derive(Clone)]
pub struct Guess {
    pub epsilon: f64,
    pub guess_probability: f64,
    pub min_entropy: f64,
}

#[pymethods]
impl Guess {
    fn __repr__(&self) -> String {
        format!(
            "Guess(epsilon={}, guess_probability={}, min_entropy={})",
            self.epsilon, self.guess_probability, self.min_entropy
        )
    }
}

/// Sequential NPA bound with solver diagnostics.
#[pyclass(module = "seqrand", frozen, get_all)]
#[derive(Clone)]
pub struct NpaBound {
    pub epsilon: f64,
    pub guess_probability: f64,
    pub min_entropy: f64,
    pub status: String,
    pub gap: f64,
    pub iterations: usize,
    pub face_steps: usize,
}

#[pymethods]
impl NpaBound {
    fn __repr__(&self) -> String {
        format!(
            "NpaBound(epsilon={}, guess_probability={}, status={}, gap={:e})",
            self.epsilon, self.guess_probability, self.status, self.gap
        )
    }
}

#[pyfunction]
fn closed_i1(state: &str, epsilon: f64) -> PyResult<f64> {
    Ok(seqsim::closed_i1(parse(state)?, epsilon))
}

#[pyfunction]
fn closed_i2(state: &str, epsilon: f64) -> PyResult<f64> {
    Ok(seqsim::closed_i2(parse(state)?, epsilon))
}

/// `(lower, upper)` sharpness range where both rounds violate the local bound.
#[pyfunction]
fn double_violation_window(state: &str) -> PyResult<(f64, f64)> {
    seqsim::double_violation_window(parse(state)?).map_err(value_err)
}

/// Rows `(epsilon, I1, I2, I1_closed, I2_closed)`.
#[pyfunction]
#[pyo3(signature = (state, lo, hi, step, mode = "sqrt"))]
fn violation_curves(
    state: &str,
    lo: f64,
    hi: f64,
    step: f64,
    mode: &str,
) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
    let pts = seqsim::violation_curves(parse(state)?, parse(mode)?, &grid(lo, hi, step)?)
        .map_err(value_err)?;
    Ok(pts
        .into_iter()
        .map(|p| (p.epsilon, p.i1, p.i2, p.i1_closed, p.i2_closed))
        .collect())
}

/// Trusted-scheme guessing probability of the decomposition attack.
#[pyfunction]
#[pyo3(signature = (state, lo, hi, step, setting = (0, 0, 1), scope = "local", theta = "eigen"))]
fn guess_curve(
    state: &str,
    lo: f64,
    hi: f64,
    step: f64,
    setting: (usize, usize, usize),
    scope: &str,
    theta: &str,
) -> PyResult<Vec<Guess>> {
    let scope: GuessScope = parse(scope)?;
    let theta: ThetaBasis = parse(theta)?;
    let pts = guessing::guess_curve(parse(state)?, &grid(lo, hi, step)?, setting, scope, theta)
        .map_err(value_err)?;
    Ok(pts
        .into_iter()
        .map(|p| Guess {
            epsilon: p.epsilon,
            guess_probability: p.guess,
            min_entropy: p.min_entropy,
        })
        .collect())
}

/// Correlated-branch attack on the CHSH qubit chain.
#[pyfunction]
#[pyo3(signature = (epsilon = 0.5))]
fn chsh_attack(epsilon: f64) -> PyResult<Guess> {
    let r = guessing::chsh_correlated_attack(epsilon).map_err(value_err)?;
    Ok(Guess {
        epsilon,
        guess_probability: r.guess_probability,
        min_entropy: r.min_entropy,
    })
}

/// Maximal residuals `(projective, dilation, recovery)` over a seeded battery.
#[pyfunction]
#[pyo3(signature = (seed = 7, instances = 100))]
fn theorem_check(seed: u64, instances: usize) -> PyResult<(f64, f64, f64)> {
    let r = guessing::theorem_battery(seed, instances).map_err(value_err)?;
    Ok((
        r.max_projective_residual,
        r.max_dilation_residual,
        r.max_recovery_residual,
    ))
}

/// Sequential NPA bound on the local guess of `(b₁, b₂)` at `target`.
#[pyfunction]
#[pyo3(signature = (state, epsilon, target = (0, 1), profile = "default", tol = None))]
fn npa_bound(
    state: &str,
    epsilon: f64,
    target: (usize, usize),
    profile: &str,
    tol: Option<f64>,
) -> PyResult<NpaBound> {
    let mut cfg = SolverConfig::default();
    if let Some(t) = tol {
        cfg.gap_tol = t;
    }
    let profile: WordProfile = parse(profile)?;
    let r = npa::mixture_guess_bound(
        parse(state)?,
        epsilon,
        target,
        ThetaBasis::Eigen,
        profile,
        &cfg,
    )
    .map_err(|e| match e {
        NpaError::SolverFailure { .. } | NpaError::Infeasible(_) | NpaError::Sdp(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => value_err(other),
    })?;
    Ok(NpaBound {
        epsilon,
        guess_probability: r.report.guess_probability,
        min_entropy: r.report.min_entropy,
        status: format!("{:?}", r.status),
        gap: r.gap,
        iterations: r.iterations,
        face_steps: r.face_steps,
    })
}

/// Runs the command-line harness, e.g. `run_cli(["curves", "--state", "mvs"])`,
/// and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    seqrand::cli::main_with_args(std::iter::once("seqrand".to_string()).chain(args))
}

#[pymodule]
fn seqrand_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Guess>()?;
    m.add_class::<NpaBound>()?;
    m.add_function(wrap_pyfunction!(closed_i1, m)?)?;
    m.add_function(wrap_pyfunction!(closed_i2, m)?)?;
    m.add_function(wrap_pyfunction!(double_violation_window, m)?)?;
    m.add_function(wrap_pyfunction!(violation_curves, m)?)?;
    m.add_function(wrap_pyfunction!(guess_curve, m)?)?;
    m.add_function(wrap_pyfunction!(chsh_attack, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_check, m)?)?;
    m.add_function(wrap_pyfunction!(npa_bound, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
