use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sbarrier_core::certify::{self, BoundCase, BoundInputs};
use sbarrier_core::cli::{self, Command, RunOptions};
use sbarrier_core::mc;

fn command(name: &str) -> PyResult<Command> {
    match name {
        "verify" => Ok(Command::Verify),
        "synthesize" => Ok(Command::Synthesize),
        "simulate" => Ok(Command::Simulate),
        "check" => Ok(Command::Check),
        other => Err(PyValueError::new_err(format!("unknown command `{other}`"))),
    }
}

/// Run a CLI command on TOML config text; returns `(exit_code, {file_name: contents})`.
#[pyfunction]
#[pyo3(signature = (command_name, config, seed=None, compare_alpha_zero=false, controller=None, certificate=None))]
fn run(
    py: Python<'_>,
    command_name: &str,
    config: &str,
    seed: Option<u64>,
    compare_alpha_zero: bool,
    controller: Option<String>,
    certificate: Option<String>,
) -> PyResult<(i32, BTreeMap<String, String>)> {
    let cmd = command(command_name)?;
    let opts = RunOptions { seed, compare_alpha_zero, controller, certificate };
    let config = config.to_owned();
    let result = py.detach(move || cli::run(cmd, &config, &opts));
    Ok(match result {
        Ok(o) => (o.code, o.files.into_iter().collect()),
        Err(e) => (e.code, BTreeMap::from([("error.json".to_string(), e.document())])),
    })
}

/// Finite-horizon failure bound; returns `(value, raw, case)`.
#[pyfunction]
fn probability_bound(alpha: f64, beta: f64, level: f64, horizon: f64) -> PyResult<(f64, f64, &'static str)> {
    let b = certify::probability_bound(&BoundInputs { alpha, beta, level, horizon })
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let case = match b.case {
        BoundCase::BetaOverAlphaLe1 => "beta_over_alpha_le1",
        BoundCase::BetaOverAlphaGe1 => "beta_over_alpha_ge1",
        BoundCase::AlphaZero => "alpha_zero",
    };
    Ok((b.value, b.raw, case))
}

/// 95% Wilson score interval for a binomial proportion.
#[pyfunction]
fn wilson_interval(failures: usize, draws: usize) -> PyResult<(f64, f64)> {
    if draws == 0 || failures > draws {
        return Err(PyValueError::new_err("need 0 <= failures <= draws and draws > 0"));
    }
    Ok(mc::wilson_interval(failures, draws))
}

#[pymodule]
fn sbarrier(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(probability_bound, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    m.add("EXIT_OK", cli::EXIT_OK)?;
    m.add("EXIT_INVALID", cli::EXIT_INVALID)?;
    m.add("EXIT_NO_CERTIFICATE", cli::EXIT_NO_CERTIFICATE)?;
    m.add("EXIT_NUMERICAL", cli::EXIT_NUMERICAL)?;
    Ok(())
}
