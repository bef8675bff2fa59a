//! Controller synthesis: minimal-effort controllers for a fixed barrier, and the alternation
//! between barrier and controller computation that drives the bound to a goal probability.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{compute_barrier, AlphaGrid, Certificate, CertifyError, CertifyOptions, PolynomialDoc};
use crate::model::SafetyProblem;
use crate::poly::Polynomial;
use crate::sdp::{SolveStatus, SolverSettings};
use crate::sos::{build_controller_program, sampled_soundness, Degrees, SosError};

/// Relative gap accepted from a stalled controller solve.
pub const PROPOSAL_GAP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthesis settings: {0}")]
    InvalidConfig(String),
    #[error("no controller of the requested degree exists at this (alpha, beta) (solver status {0:?})")]
    Infeasible(SolveStatus),
    #[error("the uncontrolled system has no certificate: {0}")]
    Uncontrolled(CertifyError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub p_goal: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub a_inc: f64,
    pub a_dec: f64,
    pub max_iters: usize,
    /// Stop as soon as an incumbent with `c ≤ c_floor` is found; `0` disables the rule.
    pub c_floor: f64,
    /// Penalty on the `β` shortfall when the controller step falls back to elastic mode; `0` disables the fallback.
    pub elastic_penalty: f64,
}

impl SynthesisConfig {
    pub fn new(p_goal: f64, epsilon: f64, alpha: f64) -> Self {
        SynthesisConfig { p_goal, epsilon, alpha, a_inc: 1.25, a_dec: 0.5, max_iters: 50, c_floor: 0.0, elastic_penalty: 10.0 }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(self.p_goal > 0.0 && self.p_goal < 1.0) {
            return bad(format!("p_goal must lie in (0, 1), got {}", self.p_goal));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.a_inc > 1.0 && self.a_inc.is_finite()) {
            return bad(format!("a_inc must exceed 1, got {}", self.a_inc));
        }
        if !(self.a_dec > 0.0 && self.a_dec < 1.0) {
            return bad(format!("a_dec must lie in (0, 1), got {}", self.a_dec));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.c_floor >= 0.0 && self.c_floor.is_finite()) {
            return bad(format!("c_floor must be non-negative, got {}", self.c_floor));
        }
        if !(self.elastic_penalty >= 0.0 && self.elastic_penalty.is_finite()) {
            return bad(format!("elastic_penalty must be non-negative, got {}", self.elastic_penalty));
        }
        Ok(())
    }
}

/// Minimal-`c` controller for a fixed barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSolution {
    pub controller: Vec<Polynomial>,
    pub q: Vec<DMatrix<f64>>,
    pub c: f64,
    /// Mean elastic slack; zero when the requested `β` is met exactly.
    pub mean_shortfall: f64,
}

/// Smallest-coefficient controller `u_k = zᵀQ_k z` of degree `n_u` with `A B ≤ -α B + β` on `X ∖ X_u`.
///
/// With `elastic = Some(κ)` the decay condition may fall short of `β`, at cost `κ` per unit of mean shortfall.
pub fn compute_u(
    problem: &SafetyProblem,
    barrier: &Polynomial,
    alpha: f64,
    beta: f64,
    n_u: u32,
    options: &CertifyOptions,
    elastic: Option<f64>,
) -> Result<ControllerSolution, SynthError> {
    let degrees = Degrees { controller: n_u, ..options.degrees };
    let cp = build_controller_program(problem, barrier, alpha, beta, &degrees, &options.program, elastic)?;
    // The controller is only a proposal: its certificate is re-derived by the barrier search.
    let settings = SolverSettings { tol_gap_stall: options.solver.tol_gap_stall.max(PROPOSAL_GAP), ..options.solver };
    let sol = cp.program.solve(&settings)?;
    if !sol.is_optimal() {
        return Err(SynthError::Infeasible(sol.status));
    }
    let solved = cp.extract(&sol)?;
    Ok(ControllerSolution { controller: solved.controllers, q: solved.q, c: solved.c, mean_shortfall: solved.mean_shortfall })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisStatus {
    /// The incumbent bound lies within `epsilon` below the goal.
    Converged,
    /// The uncontrolled system already meets the goal.
    GoalMetUncontrolled,
    /// An incumbent reached `c_floor`.
    CostFloor,
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// `β` handed to the controller step (the barrier's own `β` on the first iteration).
    pub beta: f64,
    /// Bound of the barrier recomputed with the new controller.
    pub p: Option<f64>,
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub status: SynthesisStatus,
    pub u_star: Vec<PolynomialDoc>,
    /// Row-major coefficient matrix per input channel.
    pub q: Vec<Vec<Vec<f64>>>,
    pub c_star: f64,
    /// Certificate of the returned controller, from the barrier search at fixed `α`.
    pub certificate: Certificate,
    pub uncontrolled_bound: f64,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

struct Incumbent {
    controller: ControllerSolution,
    cert: Certificate,
}

/// Alternate controller and barrier computations at fixed `α`, rescaling `β` until the bound
/// lies within `epsilon` below `p_goal`.
pub fn synthesize(
    problem: &SafetyProblem,
    n_u: u32,
    cfg: &SynthesisConfig,
    options: &CertifyOptions,
) -> Result<SynthesisResult, SynthError> {
    cfg.validate()?;
    let grid = AlphaGrid::fixed(cfg.alpha);
    let zero = problem.system.zero_controller();
    let first = compute_barrier(problem, &zero, &grid, options).map_err(SynthError::Uncontrolled)?.best;
    let uncontrolled_bound = first.bound;
    let mut trace = vec![TraceEntry { iteration: 1, beta: first.beta, p: Some(first.bound), c: Some(0.0) }];
    let zero_q = |cert: &Certificate| SynthesisResult {
        status: SynthesisStatus::NotConverged,
        u_star: zero.iter().map(PolynomialDoc::from_polynomial).collect(),
        q: Vec::new(),
        c_star: 0.0,
        certificate: cert.clone(),
        uncontrolled_bound,
        iterations: 1,
        trace: Vec::new(),
    };
    if first.bound <= cfg.p_goal {
        return Ok(SynthesisResult { status: SynthesisStatus::GoalMetUncontrolled, trace, ..zero_q(&first) });
    }

    let mut barrier = first.barrier_polynomial().map_err(CertifyError::from)?;
    let mut p = first.bound;
    let mut beta = first.beta;
    let mut incumbent: Option<Incumbent> = None;
    let mut status = SynthesisStatus::NotConverged;
    let mut iterations = 1;
    for iteration in 2..=cfg.max_iters {
        iterations = iteration;
        beta *= if p > cfg.p_goal { cfg.a_dec } else { cfg.a_inc };
        let elastic = (cfg.elastic_penalty > 0.0).then_some(cfg.elastic_penalty);
        let attempt = match compute_u(problem, &barrier, cfg.alpha, beta, n_u, options, None) {
            Err(SynthError::Infeasible(_)) if elastic.is_some() => {
                // The fixed barrier leaves no room at this β: take the controller that gets closest.
                compute_u(problem, &barrier, cfg.alpha, beta, n_u, options, elastic)
            }
            other => other,
        };
        let controller = match attempt {
            Ok(c) => c,
            Err(SynthError::Infeasible(s)) => {
                // β was cut too far for any controller of this degree: back off.
                log::info!("iteration {iteration}: no controller at beta {beta:.4e} ({s:?})");
                trace.push(TraceEntry { iteration, beta, p: None, c: None });
                p = 0.0;
                continue;
            }
            Err(e) => return Err(e),
        };
        let cert = match compute_barrier(problem, &controller.controller, &grid, options) {
            Ok(g) => g.best,
            Err(e) => {
                log::info!("iteration {iteration}: no barrier for the new controller ({e})");
                trace.push(TraceEntry { iteration, beta, p: None, c: Some(controller.c) });
                p = 0.0;
                continue;
            }
        };
        log::info!("iteration {iteration}: beta {beta:.4e} c {:.4e} bound {:.4}", controller.c, cert.bound);
        trace.push(TraceEntry { iteration, beta, p: Some(cert.bound), c: Some(controller.c) });
        p = cert.bound;
        barrier = cert.barrier_polynomial().map_err(CertifyError::from)?;
        let improves = incumbent.as_ref().is_none_or(|inc| controller.c < inc.controller.c);
        if p < cfg.p_goal && improves {
            incumbent = Some(Incumbent { controller, cert: cert.clone() });
        }
        beta = cert.beta;
        if let Some(inc) = &incumbent {
            if (inc.cert.bound - cfg.p_goal).abs() <= cfg.epsilon {
                status = SynthesisStatus::Converged;
                break;
            }
            if cfg.c_floor > 0.0 && inc.controller.c <= cfg.c_floor {
                status = SynthesisStatus::CostFloor;
                break;
            }
        }
    }

    let Some(inc) = incumbent else {
        return Ok(SynthesisResult { iterations, trace, ..zero_q(&first) });
    };
    // The incumbent's certificate comes from the barrier search with u = u*; check it once more.
    let u_star = &inc.controller.controller;
    let recheck = sampled_soundness(
        problem,
        &inc.cert.barrier_polynomial().map_err(CertifyError::from)?,
        u_star,
        inc.cert.alpha,
        inc.cert.beta,
        inc.cert.gamma,
        options.soundness_samples,
        &options.soundness,
    )?;
    if !recheck.passed || inc.cert.bound > cfg.p_goal + cfg.epsilon {
        status = SynthesisStatus::NotConverged;
    }
    Ok(SynthesisResult {
        status,
        u_star: u_star.iter().map(PolynomialDoc::from_polynomial).collect(),
        q: inc.controller.q.iter().map(matrix_rows).collect(),
        c_star: inc.controller.c,
        certificate: inc.cert,
        uncontrolled_bound,
        iterations,
        trace,
    })
}

/// Result of the gain search for `u = -k x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSearch {
    pub k_star: f64,
    pub certificate: Certificate,
    /// Every evaluated gain with its best bound (`None` when no certificate was found).
    pub evaluations: Vec<(f64, Option<f64>)>,
}

/// `u_j = -k x_j` for a square input matrix; channels beyond the state dimension get zero.
pub fn linear_controller(problem: &SafetyProblem, k: f64) -> Vec<Polynomial> {
    let n = problem.dim();
    (0..problem.system.input_dim())
        .map(|j| if j < n { Polynomial::var(n, j).scale(-k) } else { Polynomial::zero(n) })
        .collect()
}

/// Bisection on the gain of `u = -k x` for the smallest `k` whose best bound over `grid`
/// is at most `p_goal`, to relative width `rel_tol`.
pub fn linear_gain_search(
    problem: &SafetyProblem,
    p_goal: f64,
    grid: &AlphaGrid,
    options: &CertifyOptions,
    rel_tol: f64,
    k_max: f64,
) -> Result<GainSearch, SynthError> {
    if !(p_goal > 0.0 && p_goal < 1.0) || !(rel_tol > 0.0) || !(k_max > 0.0) {
        return Err(SynthError::InvalidConfig(format!("p_goal {p_goal}, rel_tol {rel_tol}, k_max {k_max}")));
    }
    let mut evaluations = Vec::new();
    let mut eval = |k: f64| -> Option<Certificate> {
        let cert = compute_barrier(problem, &linear_controller(problem, k), grid, options).ok().map(|g| g.best);
        let bound = cert.as_ref().map(|c| c.bound);
        log::info!("gain {k:.6}: bound {bound:?}");
        evaluations.push((k, bound));
        cert.filter(|c| c.bound <= p_goal)
    };
    if let Some(cert) = eval(0.0) {
        return Ok(GainSearch { k_star: 0.0, certificate: cert, evaluations });
    }
    let (mut lo, mut hi) = (0.0, 1.0_f64.min(k_max));
    let mut best = loop {
        if let Some(cert) = eval(hi) {
            break cert;
        }
        if hi >= k_max {
            return Err(SynthError::InvalidConfig(format!("no gain up to {k_max} meets p_goal {p_goal}")));
        }
        lo = hi;
        hi = (2.0 * hi).min(k_max);
    };
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        match eval(mid) {
            Some(cert) => {
                hi = mid;
                best = cert;
            }
            None => lo = mid,
        }
    }
    Ok(GainSearch { k_star: hi, certificate: best, evaluations })
}
