//! Finite-time failure-probability bounds and the `α` grid search over barrier programs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SafetyProblem;
use crate::poly::{Monomial, PolyError, Polynomial};
use crate::sdp::{Residuals, SolveStatus, SolverSettings};
use crate::sos::{
    build_barrier_program, sampled_soundness, Degrees, ProgramOptions, SosError, SoundnessReport,
    SoundnessTolerances, SOUNDNESS_SAMPLES,
};

/// Agreement required between a stored bound and its re-evaluation.
pub const BOUND_RECHECK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertifyError {
    #[error("level must lie in [0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("invalid bound inputs: {0}")]
    InvalidInput(String),
    #[error("invalid alpha grid: {0}")]
    InvalidGrid(String),
    #[error("no grid point produced a valid certificate ({tried} tried)")]
    NoFeasiblePoint { tried: usize, points: Vec<GridPoint> },
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundCase {
    /// `α > 0`, `β/α ≤ 1`: `1 - (1 - level) e^{-βT}`.
    BetaOverAlphaLe1,
    /// `α > 0`, `β/α ≥ 1`: `(level + (e^{βT} - 1) β/α) / e^{βT}`.
    BetaOverAlphaGe1,
    /// `α = 0`: `level + βT`.
    AlphaZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub alpha: f64,
    pub beta: f64,
    /// `B(x0)`, or `γ` when no initial point is known.
    pub level: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityBound {
    /// Clamped to `[0, 1]`.
    pub value: f64,
    /// Value of the selected formula before clamping.
    pub raw: f64,
    pub case: BoundCase,
}

fn bound_le1(beta: f64, level: f64, t: f64) -> f64 {
    1.0 - (1.0 - level) * (-beta * t).exp()
}

fn bound_ge1(alpha: f64, beta: f64, level: f64, t: f64) -> f64 {
    let e = (beta * t).exp();
    (level + (e - 1.0) * beta / alpha) / e
}

/// Evaluate the case-selected bound; exactly at `β = α` both formulas are taken and the smaller kept.
pub fn probability_bound(inputs: &BoundInputs) -> Result<ProbabilityBound, CertifyError> {
    let BoundInputs { alpha, beta, level, horizon } = *inputs;
    if !(level.is_finite() && (0.0..1.0).contains(&level)) {
        return Err(CertifyError::InvalidLevel(level));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(CertifyError::InvalidInput(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(CertifyError::InvalidInput(format!("beta must be finite and non-negative, got {beta}")));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(CertifyError::InvalidInput(format!("horizon must be finite and positive, got {horizon}")));
    }
    let (raw, case) = if alpha == 0.0 {
        (level + beta * horizon, BoundCase::AlphaZero)
    } else {
        let ratio = beta / alpha;
        if ratio < 1.0 {
            (bound_le1(beta, level, horizon), BoundCase::BetaOverAlphaLe1)
        } else if ratio > 1.0 {
            (bound_ge1(alpha, beta, level, horizon), BoundCase::BetaOverAlphaGe1)
        } else {
            let a = bound_le1(beta, level, horizon);
            let b = bound_ge1(alpha, beta, level, horizon);
            if a <= b {
                (a, BoundCase::BetaOverAlphaLe1)
            } else {
                (b, BoundCase::BetaOverAlphaGe1)
            }
        }
    };
    Ok(ProbabilityBound { value: raw.clamp(0.0, 1.0), raw, case })
}

/// Evaluate one specific formula regardless of the `β/α` ratio.
pub fn bound_formula(case: BoundCase, inputs: &BoundInputs) -> f64 {
    let BoundInputs { alpha, beta, level, horizon } = *inputs;
    match case {
        BoundCase::BetaOverAlphaLe1 => bound_le1(beta, level, horizon),
        BoundCase::BetaOverAlphaGe1 => bound_ge1(alpha, beta, level, horizon),
        BoundCase::AlphaZero => level + beta * horizon,
    }
}

/// `α ∈ {l, l + d, …}` up to `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
}

impl AlphaGrid {
    pub fn fixed(alpha: f64) -> Self {
        AlphaGrid { lower: alpha, upper: alpha, step: 1.0 }
    }

    pub fn validate(&self) -> Result<(), CertifyError> {
        let ok = self.lower.is_finite() && self.upper.is_finite() && self.step.is_finite();
        if !ok || self.lower < 0.0 || self.lower > self.upper || self.step <= 0.0 {
            return Err(CertifyError::InvalidGrid(format!(
                "need 0 <= lower <= upper and step > 0, got [{}, {}] step {}",
                self.lower, self.upper, self.step
            )));
        }
        Ok(())
    }

    /// Grid points computed as `l + j·d` so accumulated rounding cannot drop the last point.
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.upper - self.lower) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|j| self.lower + j as f64 * self.step).collect()
    }
}

/// A concrete polynomial as `(exponents, coefficient)` pairs in graded-lex order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialDoc {
    pub dim: usize,
    pub terms: Vec<TermDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDoc {
    pub exponents: Vec<u32>,
    pub coefficient: f64,
}

impl PolynomialDoc {
    pub fn from_polynomial(p: &Polynomial) -> Self {
        let terms = p
            .concrete_terms()
            .into_iter()
            .map(|(m, c)| TermDoc { exponents: m.exponents().to_vec(), coefficient: c })
            .collect();
        PolynomialDoc { dim: p.dim(), terms }
    }

    pub fn to_polynomial(&self) -> Result<Polynomial, PolyError> {
        for t in &self.terms {
            if t.exponents.len() != self.dim {
                return Err(PolyError::DimensionMismatch { expected: self.dim, found: t.exponents.len() });
            }
        }
        Polynomial::from_coefficients(
            self.dim,
            self.terms.iter().map(|t| (Monomial::new(t.exponents.clone()), t.coefficient)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub residuals: Residuals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub barrier: PolynomialDoc,
    /// The fixed controller the barrier was computed for, one entry per input channel.
    pub controller: Vec<PolynomialDoc>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub b_at_x0: Option<f64>,
    /// The level entering the bound: `B(x0)` if known, else `γ`.
    pub level: f64,
    pub horizon: f64,
    pub bound: f64,
    pub raw_bound: f64,
    pub bound_case: BoundCase,
    pub degrees: Degrees,
    pub solver: SolverReport,
    pub soundness: SoundnessReport,
}

impl Certificate {
    pub fn bound_inputs(&self) -> BoundInputs {
        BoundInputs { alpha: self.alpha, beta: self.beta, level: self.level, horizon: self.horizon }
    }

    /// Re-evaluate the stored case's formula and compare with the stored bound.
    pub fn bound_is_consistent(&self) -> bool {
        let raw = bound_formula(self.bound_case, &self.bound_inputs());
        (raw - self.raw_bound).abs() <= BOUND_RECHECK_TOLERANCE
            && (raw.clamp(0.0, 1.0) - self.bound).abs() <= BOUND_RECHECK_TOLERANCE
    }

    pub fn barrier_polynomial(&self) -> Result<Polynomial, PolyError> {
        self.barrier.to_polynomial()
    }

    pub fn controller_polynomials(&self) -> Result<Vec<Polynomial>, PolyError> {
        self.controller.iter().map(PolynomialDoc::to_polynomial).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub degrees: Degrees,
    pub program: ProgramOptions,
    pub solver: SolverSettings,
    pub soundness_samples: usize,
    pub soundness: SoundnessTolerances,
}

impl CertifyOptions {
    pub fn new(degrees: Degrees) -> Self {
        CertifyOptions {
            degrees,
            program: ProgramOptions::default(),
            solver: SolverSettings::default(),
            soundness_samples: SOUNDNESS_SAMPLES,
            soundness: SoundnessTolerances::default(),
        }
    }
}

/// Why a grid point produced no certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PointFailure {
    Solver { status: SolveStatus },
    Unsound { report: SoundnessReport },
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub bound: Option<f64>,
    pub failure: Option<PointFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: Certificate,
    pub points: Vec<GridPoint>,
}

/// Build, solve and validate the barrier program at one `α`.
///
/// Only a certificate whose solve is optimal and which passes the sampled soundness check is returned.
pub fn certify_at(
    problem: &SafetyProblem,
    u: &[Polynomial],
    alpha: f64,
    options: &CertifyOptions,
) -> Result<Certificate, PointFailure> {
    let err = |e: &dyn std::fmt::Display| PointFailure::Error { message: e.to_string() };
    let bp = build_barrier_program(problem, u, alpha, &options.degrees, &options.program).map_err(|e| err(&e))?;
    let sol = bp.program.solve(&options.solver).map_err(|e| err(&e))?;
    if !sol.is_optimal() {
        return Err(PointFailure::Solver { status: sol.status });
    }
    let solved = bp.extract(&sol).map_err(|e| err(&e))?;
    let report = sampled_soundness(
        problem,
        &solved.barrier,
        u,
        alpha,
        solved.beta,
        solved.gamma,
        options.soundness_samples,
        &options.soundness,
    )
    .map_err(|e| err(&e))?;
    if !report.passed {
        return Err(PointFailure::Unsound { report });
    }
    // Rounding can push B(x0) a hair below zero; the level is a probability-like quantity.
    let level = solved.level().max(0.0);
    let inputs = BoundInputs { alpha, beta: solved.beta, level, horizon: problem.horizon };
    let bound = probability_bound(&inputs).map_err(|e| err(&e))?;
    Ok(Certificate {
        barrier: PolynomialDoc::from_polynomial(&solved.barrier),
        controller: u.iter().map(PolynomialDoc::from_polynomial).collect(),
        alpha,
        beta: solved.beta,
        gamma: solved.gamma,
        b_at_x0: solved.b_at_x0,
        level,
        horizon: problem.horizon,
        bound: bound.value,
        raw_bound: bound.raw,
        bound_case: bound.case,
        degrees: options.degrees,
        solver: SolverReport {
            status: sol.status,
            iterations: sol.iterations,
            objective: sol.objective,
            residuals: sol.residuals,
        },
        soundness: report,
    })
}

/// Solve every grid point independently and keep the smallest bound; ties go to the earlier point.
pub fn compute_barrier(
    problem: &SafetyProblem,
    u: &[Polynomial],
    grid: &AlphaGrid,
    options: &CertifyOptions,
) -> Result<GridSearch, CertifyError> {
    grid.validate()?;
    let alphas = grid.points();
    let results: Vec<Result<Certificate, PointFailure>> =
        alphas.par_iter().map(|&a| certify_at(problem, u, a, options)).collect();

    let mut best: Option<Certificate> = None;
    let mut points = Vec::with_capacity(alphas.len());
    for (&alpha, result) in alphas.iter().zip(results) {
        match result {
            Ok(cert) => {
                points.push(GridPoint { alpha, bound: Some(cert.bound), failure: None });
                if best.as_ref().is_none_or(|b| cert.bound < b.bound) {
                    best = Some(cert);
                }
            }
            Err(failure) => {
                log::info!("alpha {alpha}: no certificate ({failure:?})");
                points.push(GridPoint { alpha, bound: None, failure: Some(failure) });
            }
        }
    }
    match best {
        Some(best) => Ok(GridSearch { best, points }),
        None => Err(CertifyError::NoFeasiblePoint { tried: alphas.len(), points }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(alpha: f64, beta: f64, level: f64, horizon: f64) -> ProbabilityBound {
        probability_bound(&BoundInputs { alpha, beta, level, horizon }).unwrap()
    }

    #[test]
    fn case_selection() {
        assert_eq!(b(1.0, 0.0, 0.2, 5.0).case, BoundCase::BetaOverAlphaLe1);
        assert_eq!(b(1.0, 2.0, 0.1, 1.0).case, BoundCase::BetaOverAlphaGe1);
        assert_eq!(b(0.0, 0.2, 0.1, 2.0).case, BoundCase::AlphaZero);
        assert!(probability_bound(&BoundInputs { alpha: 1.0, beta: 0.0, level: 1.0, horizon: 1.0 }).is_err());
    }

    #[test]
    fn grid_points_include_upper_end() {
        let g = AlphaGrid { lower: 0.0, upper: 5.0, step: 0.05 };
        let pts = g.points();
        assert_eq!(pts.len(), 101);
        assert!((pts[100] - 5.0).abs() < 1e-12);
        assert_eq!(AlphaGrid::fixed(1.3).points(), vec![1.3]);
    }

    #[test]
    fn polynomial_doc_round_trip() {
        let p = crate::poly::parse_polynomial("0.1 - x1^2*x2 + 1e-17*x2^3", 2).unwrap();
        let doc = PolynomialDoc::from_polynomial(&p);
        let json = serde_json::to_string(&doc).unwrap();
        let back: PolynomialDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_polynomial().unwrap(), p);
    }
}
