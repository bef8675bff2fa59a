//! The `verify`, `synthesize`, `simulate` and `check` commands as pure functions from a
//! configuration to result documents.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::certify::{certify_at, compute_barrier, Certificate, CertifyError, GridPoint, PointFailure};
use crate::config::{parse_config, ConfigError, ProblemConfig};
use crate::mc::{estimate_failure_probability, sweep_csv, McEstimate, SimulationConfig, SweepRow};
use crate::poly::Polynomial;
use crate::sdp::SolveStatus;
use crate::sos::{sampled_soundness, SoundnessReport};
use crate::synth::{synthesize, SynthError, SynthesisResult, SynthesisStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NO_CERTIFICATE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Verify,
    Synthesize,
    Simulate,
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Synthesize => "synthesize",
            Command::Simulate => "simulate",
            Command::Check => "check",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub compare_alpha_zero: bool,
    /// A `synthesize` result document whose controllers `simulate` should use.
    pub controller: Option<String>,
    /// A `verify` or `synthesize` result document (`check` input, `simulate` bound column).
    pub certificate: Option<String>,
}

/// A failed invocation, rendered as a machine-readable error document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliError {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError { code: EXIT_INVALID, kind: "invalid_input".into(), message: message.into() }
    }

    pub fn document(&self) -> String {
        to_json(&serde_json::json!({ "error": self }))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let kind = match e {
            ConfigError::Parse { .. } => "parse_error",
            _ => "validation_error",
        };
        CliError { code: EXIT_INVALID, kind: kind.into(), message: e.to_string() }
    }
}

/// Files produced by a command plus its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub files: Vec<(String, String)>,
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("result documents serialize");
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaZero {
    pub bound: Option<f64>,
    pub failure: Option<PointFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyEntry {
    pub sigma: f64,
    pub certificate: Option<Certificate>,
    pub grid: Vec<GridPoint>,
    pub alpha_zero: Option<AlphaZero>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyDocument {
    pub command: Command,
    pub entries: Vec<VerifyEntry>,
}

fn all_numerical(points: &[GridPoint]) -> bool {
    !points.is_empty()
        && points.iter().all(|p| {
            matches!(
                p.failure,
                Some(PointFailure::Solver { status: SolveStatus::NumericalTrouble | SolveStatus::IterationLimit })
            )
        })
}

pub fn cmd_verify(cfg: &ProblemConfig, opts: &RunOptions) -> Outcome {
    let entries: Vec<(VerifyEntry, i32)> = cfg
        .sigma_sweep
        .par_iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let problem = cfg.problem_at(sigma);
            let u = problem.system.zero_controller();
            let alpha_zero = opts.compare_alpha_zero.then(|| match certify_at(&problem, &u, 0.0, &cfg.options) {
                Ok(c) => AlphaZero { bound: Some(c.bound), failure: None },
                Err(f) => AlphaZero { bound: None, failure: Some(f) },
            });
            let grid = cfg.alpha.grid_for(i);
            match compute_barrier(&problem, &u, &grid, &cfg.options) {
                Ok(g) => (VerifyEntry { sigma, certificate: Some(g.best), grid: g.points, alpha_zero, error: None }, EXIT_OK),
                Err(e) => {
                    let points = match &e {
                        CertifyError::NoFeasiblePoint { points, .. } => points.clone(),
                        _ => Vec::new(),
                    };
                    let code = if all_numerical(&points) { EXIT_NUMERICAL } else { EXIT_NO_CERTIFICATE };
                    (VerifyEntry { sigma, certificate: None, grid: points, alpha_zero, error: Some(e.to_string()) }, code)
                }
            }
        })
        .collect();
    let code = entries.iter().map(|(_, c)| *c).max().unwrap_or(EXIT_OK);
    let entries: Vec<VerifyEntry> = entries.into_iter().map(|(e, _)| e).collect();
    let mut csv = String::from("sigma,alpha,beta,gamma,level,bound,bound_case,alpha_zero_bound\n");
    for e in &entries {
        let az = e.alpha_zero.as_ref().and_then(|a| a.bound);
        match &e.certificate {
            Some(c) => csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.sigma,
                c.alpha,
                c.beta,
                c.gamma,
                c.level,
                c.bound,
                serde_json::to_value(c.bound_case).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                opt(az)
            )),
            None => csv.push_str(&format!("{},,,,,,,{}\n", e.sigma, opt(az))),
        }
    }
    let doc = VerifyDocument { command: Command::Verify, entries };
    Outcome { code, files: vec![("verify.json".into(), to_json(&doc)), ("verify.csv".into(), csv)] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisEntry {
    pub sigma: f64,
    pub alpha: f64,
    pub result: Option<SynthesisResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisDocument {
    pub command: Command,
    pub entries: Vec<SynthesisEntry>,
}

pub fn cmd_synthesize(cfg: &ProblemConfig) -> Result<Outcome, CliError> {
    let settings = cfg.synthesis.as_ref().ok_or_else(|| CliError::invalid("the configuration has no [synthesis] section"))?;
    let n_u = cfg.options.degrees.controller;
    let entries: Vec<(SynthesisEntry, i32)> = cfg
        .sigma_sweep
        .par_iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let sc = settings.for_index(i);
            let problem = cfg.problem_at(sigma);
            match synthesize(&problem, n_u, &sc, &cfg.options) {
                Ok(r) => {
                    let code = if r.status == SynthesisStatus::NotConverged { EXIT_NO_CERTIFICATE } else { EXIT_OK };
                    (SynthesisEntry { sigma, alpha: sc.alpha, result: Some(r), error: None }, code)
                }
                Err(e) => {
                    let code = match &e {
                        SynthError::InvalidConfig(_) => EXIT_INVALID,
                        SynthError::Uncontrolled(CertifyError::NoFeasiblePoint { .. }) => EXIT_NO_CERTIFICATE,
                        SynthError::Infeasible(SolveStatus::NumericalTrouble) => EXIT_NUMERICAL,
                        _ => EXIT_NO_CERTIFICATE,
                    };
                    (SynthesisEntry { sigma, alpha: sc.alpha, result: None, error: Some(e.to_string()) }, code)
                }
            }
        })
        .collect();
    let code = entries.iter().map(|(_, c)| *c).max().unwrap_or(EXIT_OK);
    let entries: Vec<SynthesisEntry> = entries.into_iter().map(|(e, _)| e).collect();
    let mut csv = String::from("sigma,alpha,uncontrolled_bound,bound,c_star,iterations,status\n");
    for e in &entries {
        match &e.result {
            Some(r) => {
                let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    e.sigma, e.alpha, r.uncontrolled_bound, r.certificate.bound, r.c_star, r.iterations, status
                ));
            }
            None => csv.push_str(&format!("{},{},,,,,error\n", e.sigma, e.alpha)),
        }
    }
    let doc = SynthesisDocument { command: Command::Synthesize, entries };
    Ok(Outcome { code, files: vec![("synthesize.json".into(), to_json(&doc)), ("synthesize.csv".into(), csv)] })
}

/// Certificates of a `verify` or `synthesize` document, keyed by sigma.
pub fn load_certificates(text: &str) -> Result<Vec<(f64, Certificate)>, CliError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| CliError::invalid(format!("certificate document: {e}")))?;
    let entries = doc
        .get("entries")
        .and_then(Value::as_array)
        .ok_or_else(|| CliError::invalid("certificate document has no `entries` array"))?;
    let mut out = Vec::new();
    for e in entries {
        let sigma = e.get("sigma").and_then(Value::as_f64).ok_or_else(|| CliError::invalid("entry without sigma"))?;
        let cert = e.get("certificate").filter(|c| !c.is_null()).or_else(|| e.pointer("/result/certificate"));
        if let Some(c) = cert {
            let c: Certificate =
                serde_json::from_value(c.clone()).map_err(|e| CliError::invalid(format!("certificate at sigma {sigma}: {e}")))?;
            out.push((sigma, c));
        }
    }
    Ok(out)
}

fn find_sigma<T: Clone>(items: &[(f64, T)], sigma: f64) -> Option<T> {
    items.iter().find(|(s, _)| *s == sigma).map(|(_, t)| t.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationEntry {
    pub sigma: f64,
    pub controlled: bool,
    pub estimate: McEstimate,
    pub bound: Option<f64>,
}

pub fn cmd_simulate(cfg: &ProblemConfig, opts: &RunOptions, sim: &SimulationConfig) -> Result<Outcome, CliError> {
    let x0 = cfg.problem.x0.clone().ok_or_else(|| CliError::invalid("simulate needs problem.x0"))?;
    let controllers = match &opts.controller {
        Some(text) => load_certificates(text)?,
        None => Vec::new(),
    };
    let bounds = match &opts.certificate {
        Some(text) => load_certificates(text)?,
        None => Vec::new(),
    };
    let mut entries = Vec::with_capacity(cfg.sigma_sweep.len());
    for &sigma in &cfg.sigma_sweep {
        let problem = cfg.problem_at(sigma);
        let u: Vec<Polynomial> = match find_sigma(&controllers, sigma) {
            Some(c) => c.controller_polynomials().map_err(|e| CliError::invalid(e.to_string()))?,
            None => problem.system.zero_controller(),
        };
        let controlled = u.iter().any(|p| !p.is_zero());
        let estimate = estimate_failure_probability(&problem, &u, &x0, sim).map_err(|e| CliError::invalid(e.to_string()))?;
        let bound = find_sigma(&bounds, sigma).map(|c| c.bound);
        entries.push(SimulationEntry { sigma, controlled, estimate, bound });
    }
    let rows: Vec<SweepRow> = entries
        .iter()
        .map(|e| SweepRow { sigma: e.sigma, p_hat: e.estimate.p_hat, ci_low: e.estimate.ci_low, ci_high: e.estimate.ci_high, bound: e.bound })
        .collect();
    let doc = serde_json::json!({ "command": Command::Simulate, "simulation": sim, "entries": entries });
    Ok(Outcome { code: EXIT_OK, files: vec![("simulate.json".into(), to_json(&doc)), ("simulate.csv".into(), sweep_csv(&rows))] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub sigma: f64,
    pub soundness: SoundnessReport,
    pub bound_consistent: bool,
    pub estimate: Option<McEstimate>,
    /// The Monte Carlo lower confidence limit does not exceed the certified bound.
    pub mc_consistent: bool,
    pub passed: bool,
}

pub fn cmd_check(cfg: &ProblemConfig, opts: &RunOptions, sim: &SimulationConfig) -> Result<Outcome, CliError> {
    let text = opts.certificate.as_ref().ok_or_else(|| CliError::invalid("check needs --certificate <file>"))?;
    let certs = load_certificates(text)?;
    if certs.is_empty() {
        return Err(CliError { code: EXIT_NO_CERTIFICATE, kind: "no_certificate".into(), message: "the document holds no certificates".into() });
    }
    let mut entries = Vec::with_capacity(certs.len());
    for (sigma, cert) in &certs {
        let problem = cfg.problem_at(*sigma);
        let bad = |e: &dyn std::fmt::Display| CliError::invalid(format!("certificate at sigma {sigma}: {e}"));
        let b = cert.barrier_polynomial().map_err(|e| bad(&e))?;
        let u = cert.controller_polynomials().map_err(|e| bad(&e))?;
        let soundness = sampled_soundness(
            &problem,
            &b,
            &u,
            cert.alpha,
            cert.beta,
            cert.gamma,
            cfg.options.soundness_samples,
            &cfg.options.soundness,
        )
        .map_err(|e| bad(&e))?;
        let bound_consistent = cert.bound_is_consistent();
        let estimate = match &problem.x0 {
            Some(x0) => Some(estimate_failure_probability(&problem, &u, x0, sim).map_err(|e| bad(&e))?),
            None => None,
        };
        let mc_consistent = estimate.is_none_or(|e| e.ci_low <= cert.bound);
        let passed = soundness.passed && bound_consistent && mc_consistent;
        entries.push(CheckEntry { sigma: *sigma, soundness, bound_consistent, estimate, mc_consistent, passed });
    }
    let code = if entries.iter().all(|e| e.passed) { EXIT_OK } else { EXIT_NO_CERTIFICATE };
    let doc = serde_json::json!({ "command": Command::Check, "entries": entries });
    Ok(Outcome { code, files: vec![("check.json".into(), to_json(&doc))] })
}

/// Parse `config_text` and run `command`.
pub fn run(command: Command, config_text: &str, opts: &RunOptions) -> Result<Outcome, CliError> {
    let cfg = parse_config(config_text)?;
    let mut sim = cfg.simulation;
    if let Some(seed) = opts.seed {
        sim.seed = seed;
    }
    match command {
        Command::Verify => Ok(cmd_verify(&cfg, opts)),
        Command::Synthesize => cmd_synthesize(&cfg),
        Command::Simulate => cmd_simulate(&cfg, opts, &sim),
        Command::Check => cmd_check(&cfg, opts, &sim),
    }
}
