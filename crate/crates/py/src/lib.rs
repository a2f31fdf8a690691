//! Python bindings. Matrices cross the boundary as nested lists of floats and
//! player indices stay 0-based inside lists.

use std::path::Path;

use invgame::cli::{execute, Artifacts, ExperimentConfig, Failure, Mode};
use invgame::inverse_mb::{solve_inverse_model_based, GradientForm, SolverConfig};
use invgame::model::{
    verify_nash as verify, CostParameters, FeedbackProfile, LinearGameSystem, PlayerChannel, Tolerances,
    ValueProfile,
};
use invgame::numerics::Mat;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn to_mat(rows: &Rows, name: &str) -> PyResult<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{name} must be a non-empty rectangular matrix")));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn to_mats(list: &[Rows], name: &str) -> PyResult<Vec<Mat>> {
    list.iter().enumerate().map(|(i, m)| to_mat(m, &format!("{name}[{i}]"))).collect()
}

fn to_table(table: &[Vec<Rows>], name: &str) -> PyResult<Vec<Vec<Mat>>> {
    table
        .iter()
        .enumerate()
        .map(|(i, row)| to_mats(row, &format!("{name}[{i}]")))
        .collect()
}

fn rows(m: &Mat) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn system(a: &Rows, b: &[Rows], c: &[Rows]) -> PyResult<LinearGameSystem> {
    if b.len() != c.len() {
        return Err(PyValueError::new_err("b and c must list the same number of players"));
    }
    let players = to_mats(b, "b")?
        .into_iter()
        .zip(to_mats(c, "c")?)
        .map(|(b, c)| PlayerChannel { b, c })
        .collect();
    LinearGameSystem::new(to_mat(a, "a")?, players).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn mode_of(name: &str) -> PyResult<Mode> {
    Ok(match name {
        "solve-mb" => Mode::SolveMb,
        "solve-mf" => Mode::SolveMf,
        "solve-dist" => Mode::SolveDist,
        "verify-ne" => Mode::VerifyNe,
        "family" => Mode::Family,
        "simulate" => Mode::Simulate,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    })
}

fn failure(f: Failure) -> PyErr {
    match f {
        Failure::Config(_) => PyValueError::new_err(f.to_string()),
        _ => PyRuntimeError::new_err(f.to_string()),
    }
}

fn artifacts_dict<'py>(py: Python<'py>, art: Artifacts) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("result", art.result)?;
    d.set_item("trace", art.trace)?;
    d.set_item("trajectory", art.trajectory)?;
    d.set_item("messages", art.messages)?;
    d.set_item("certificate_failure", art.certificate_failure)?;
    Ok(d)
}

/// Runs a mode on a TOML config file. Returns the output files as strings;
/// `result` is the JSON text of `result.json`.
#[pyfunction]
#[pyo3(signature = (mode, config, seed=None))]
fn run<'py>(py: Python<'py>, mode: &str, config: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let mode = mode_of(mode)?;
    let path = Path::new(config);
    let cfg = ExperimentConfig::load(path).map_err(failure)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let art = py.detach(|| execute(mode, &cfg, dir, seed)).map_err(failure)?;
    artifacts_dict(py, art)
}

/// Same as `run` for a config given as JSON text; relative paths resolve
/// against the working directory.
#[pyfunction]
#[pyo3(signature = (mode, config_json, seed=None))]
fn run_json<'py>(py: Python<'py>, mode: &str, config_json: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let mode = mode_of(mode)?;
    let cfg = ExperimentConfig::parse(config_json, true).map_err(failure)?;
    let art = py.detach(|| execute(mode, &cfg, Path::new("."), seed)).map_err(failure)?;
    artifacts_dict(py, art)
}

/// Model-based inverse solve with the symmetric gradient and uniform steps.
#[pyfunction]
#[pyo3(signature = (a, b, c, k, r, alpha, beta, delta=1e-6))]
#[allow(clippy::too_many_arguments)]
fn solve_mb<'py>(
    py: Python<'py>,
    a: Rows,
    b: Vec<Rows>,
    c: Vec<Rows>,
    k: Vec<Rows>,
    r: Vec<Vec<Rows>>,
    alpha: f64,
    beta: f64,
    delta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let sys = system(&a, &b, &c)?;
    let kd = FeedbackProfile { k: to_mats(&k, "k")? };
    let r = to_table(&r, "r")?;
    let mut cfg = SolverConfig::uniform(sys.num_players(), alpha, beta);
    cfg.delta = vec![delta; sys.num_players()];
    cfg.gradient_form = GradientForm::Symmetric;
    let sol = py
        .detach(|| solve_inverse_model_based(&sys, &r, &kd, &cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("q", sol.costs.q.iter().map(rows).collect::<Vec<_>>())?;
    d.set_item("x", sol.values.x.iter().map(rows).collect::<Vec<_>>())?;
    d.set_item("k", sol.feedback.k.iter().map(rows).collect::<Vec<_>>())?;
    d.set_item("iterations", sol.iterations())?;
    Ok(d)
}

/// Checks a candidate equilibrium with default tolerances.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn verify_nash<'py>(
    py: Python<'py>,
    a: Rows,
    b: Vec<Rows>,
    c: Vec<Rows>,
    q: Vec<Rows>,
    r: Vec<Vec<Rows>>,
    x: Vec<Rows>,
    k: Vec<Rows>,
) -> PyResult<Bound<'py, PyDict>> {
    let sys = system(&a, &b, &c)?;
    let costs = CostParameters::new(to_mats(&q, "q")?, to_table(&r, "r")?)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let values = ValueProfile { x: to_mats(&x, "x")? };
    let fb = FeedbackProfile { k: to_mats(&k, "k")? };
    let cert = verify(&sys, &costs, &values, &fb, &Tolerances::default())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("passed", cert.passed)?;
    d.set_item("residual_norms", cert.residual_norms)?;
    d.set_item("existence_defects", cert.existence_defects)?;
    d.set_item("gain_defects", cert.gain_defects)?;
    d.set_item("spectral_abscissa", cert.spectral_abscissa)?;
    Ok(d)
}

#[pymodule]
fn pyinvgame(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_json, m)?)?;
    m.add_function(wrap_pyfunction!(solve_mb, m)?)?;
    m.add_function(wrap_pyfunction!(verify_nash, m)?)?;
    Ok(())
}
