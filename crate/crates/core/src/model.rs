//! Controlled polynomial SDEs, semialgebraic sets and the infinitesimal generator.

use serde::Serialize;
use thiserror::Error;

use crate::poly::{PolyError, Polynomial};
use crate::sampling::BoundingBox;

/// Slack allowed when checking that a supplied initial point lies in the initial set.
pub const INITIAL_POINT_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("{what} has shape {found}, expected {expected}")]
    Shape { what: String, expected: String, found: String },
    #[error("{0} must not contain decision variables")]
    NotConcrete(String),
    #[error("{0} has no constraints")]
    EmptySet(String),
    #[error("time horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("gamma must lie in [0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("initial point {point:?} violates the initial set (constraint {constraint} = {value})")]
    InitialPointOutside { point: Vec<f64>, constraint: usize, value: f64 },
}

/// `dx = (f(x) + g(x) u(x)) dt + sigma(x) dw` with `n` states, `m` noise channels and `k` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticSystem {
    n: usize,
    m: usize,
    k: usize,
    drift: Vec<Polynomial>,
    input: Vec<Vec<Polynomial>>,
    diffusion: Vec<Vec<Polynomial>>,
}

fn check_matrix(what: &str, mat: &[Vec<Polynomial>], rows: usize, cols: usize, n: usize) -> Result<(), ModelError> {
    let bad_shape = mat.len() != rows || mat.iter().any(|r| r.len() != cols);
    if bad_shape {
        let found = format!("{}x{}", mat.len(), mat.first().map_or(0, Vec::len));
        return Err(ModelError::Shape { what: what.into(), expected: format!("{rows}x{cols}"), found });
    }
    for p in mat.iter().flatten() {
        if p.dim() != n {
            return Err(PolyError::DimensionMismatch { expected: n, found: p.dim() }.into());
        }
        if !p.is_concrete() {
            return Err(ModelError::NotConcrete(what.into()));
        }
    }
    Ok(())
}

impl StochasticSystem {
    /// `input` is `n x k`, `diffusion` is `n x m`.
    pub fn new(
        drift: Vec<Polynomial>,
        input: Vec<Vec<Polynomial>>,
        diffusion: Vec<Vec<Polynomial>>,
    ) -> Result<Self, ModelError> {
        let n = drift.len();
        if n == 0 {
            return Err(ModelError::Shape { what: "drift".into(), expected: "n >= 1".into(), found: "0".into() });
        }
        let k = input.first().map_or(0, Vec::len);
        let m = diffusion.first().map_or(0, Vec::len);
        check_matrix("drift", std::slice::from_ref(&drift), 1, n, n)?;
        check_matrix("input matrix g", &input, n, k, n)?;
        check_matrix("diffusion sigma", &diffusion, n, m, n)?;
        Ok(StochasticSystem { n, m, k, drift, input, diffusion })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn input_dim(&self) -> usize {
        self.k
    }

    pub fn drift(&self) -> &[Polynomial] {
        &self.drift
    }

    pub fn input_matrix(&self) -> &[Vec<Polynomial>] {
        &self.input
    }

    pub fn diffusion(&self) -> &[Vec<Polynomial>] {
        &self.diffusion
    }

    /// Same system with every diffusion entry multiplied by `s`.
    pub fn with_diffusion_scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for p in out.diffusion.iter_mut().flatten() {
            *p = p.scale(s);
        }
        out
    }

    /// The zero controller for this system's input dimension.
    pub fn zero_controller(&self) -> Vec<Polynomial> {
        vec![Polynomial::zero(self.n); self.k]
    }

    /// `F = f + g u`.
    pub fn closed_loop_drift(&self, u: &[Polynomial]) -> Result<Vec<Polynomial>, ModelError> {
        if u.len() != self.k {
            return Err(ModelError::Shape {
                what: "controller".into(),
                expected: format!("{} entries", self.k),
                found: format!("{} entries", u.len()),
            });
        }
        let mut out = self.drift.clone();
        for (i, row) in self.input.iter().enumerate() {
            for (gij, uj) in row.iter().zip(u) {
                if uj.is_zero() {
                    continue;
                }
                let prod = gij.mul(uj)?;
                out[i].add_assign_scaled(&prod, 1.0);
            }
        }
        Ok(out)
    }

    /// `sigma sigma^T`, an `n x n` symmetric matrix of polynomials.
    pub fn diffusion_covariance(&self) -> Result<Vec<Vec<Polynomial>>, ModelError> {
        let mut out = vec![vec![Polynomial::zero(self.n); self.n]; self.n];
        for i in 0..self.n {
            for j in i..self.n {
                let mut acc = Polynomial::zero(self.n);
                for l in 0..self.m {
                    acc.add_assign_scaled(&self.diffusion[i][l].mul(&self.diffusion[j][l])?, 1.0);
                }
                out[j][i] = acc.clone();
                out[i][j] = acc;
            }
        }
        Ok(out)
    }
}

/// `A B = sum_i F_i dB/dx_i + 1/2 sum_ij (sigma sigma^T)_ij d2B/dx_i dx_j` with `F = f + g u`.
///
/// Either `b` or `u` may carry decision variables, but not both.
pub fn generator(b: &Polynomial, system: &StochasticSystem, u: &[Polynomial]) -> Result<Polynomial, ModelError> {
    let n = system.state_dim();
    if b.dim() != n {
        return Err(PolyError::DimensionMismatch { expected: n, found: b.dim() }.into());
    }
    if let Some(bad) = u.iter().find(|p| p.dim() != n) {
        return Err(PolyError::DimensionMismatch { expected: n, found: bad.dim() }.into());
    }
    let drift = system.closed_loop_drift(u)?;
    let cov = system.diffusion_covariance()?;
    let grad: Vec<Polynomial> = (0..n).map(|i| b.differentiate(i)).collect::<Result<_, _>>()?;

    let mut out = Polynomial::zero(n);
    for i in 0..n {
        out.add_assign_scaled(&drift[i].mul(&grad[i])?, 1.0);
    }
    for i in 0..n {
        for j in 0..n {
            if cov[i][j].is_zero() {
                continue;
            }
            let second = grad[i].differentiate(j)?;
            if second.is_zero() {
                continue;
            }
            out.add_assign_scaled(&cov[i][j].mul(&second)?, 0.5);
        }
    }
    Ok(out)
}

/// `{x : s_i(x) >= 0 for all i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemialgebraicSet {
    constraints: Vec<Polynomial>,
}

impl SemialgebraicSet {
    pub fn new(constraints: Vec<Polynomial>) -> Result<Self, ModelError> {
        Self::named("set", constraints)
    }

    pub(crate) fn named(name: &str, constraints: Vec<Polynomial>) -> Result<Self, ModelError> {
        let Some(first) = constraints.first() else {
            return Err(ModelError::EmptySet(name.into()));
        };
        let n = first.dim();
        for p in &constraints {
            if p.dim() != n {
                return Err(PolyError::DimensionMismatch { expected: n, found: p.dim() }.into());
            }
            if !p.is_concrete() {
                return Err(ModelError::NotConcrete(name.into()));
            }
        }
        Ok(SemialgebraicSet { constraints })
    }

    pub fn constraints(&self) -> &[Polynomial] {
        &self.constraints
    }

    pub fn dim(&self) -> usize {
        self.constraints[0].dim()
    }

    /// Smallest constraint value at `x`; non-negative exactly when `x` is in the set.
    pub fn min_constraint(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|p| p.eval(x).expect("set constraints are concrete"))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.min_constraint(x) >= 0.0
    }

    /// Hull of the samples found inside the set; `None` if the set looks empty or unbounded.
    ///
    /// The hull is slightly inside the true bounding box (by about one sample spacing).
    pub fn estimate_bounding_box(&self) -> Option<BoundingBox> {
        const SAMPLES: usize = 4096;
        let n = self.dim();
        let mut radius = 1.0;
        for _ in 0..24 {
            let cube = BoundingBox::cube(n, radius);
            let mut lo = vec![f64::INFINITY; n];
            let mut hi = vec![f64::NEG_INFINITY; n];
            let mut any = false;
            for x in cube.samples(SAMPLES * n) {
                if self.contains(&x) {
                    any = true;
                    for i in 0..n {
                        lo[i] = lo[i].min(x[i]);
                        hi[i] = hi[i].max(x[i]);
                    }
                }
            }
            let interior = any && lo.iter().chain(&hi).all(|v| v.abs() <= 0.75 * radius);
            if interior {
                return Some(BoundingBox::new(lo, hi));
            }
            radius *= 2.0;
        }
        None
    }
}

/// Everything needed to state a finite-horizon safety question.
#[derive(Debug, Clone)]
pub struct SafetyProblem {
    pub system: StochasticSystem,
    pub state_space: SemialgebraicSet,
    pub initial_set: SemialgebraicSet,
    pub unsafe_set: SemialgebraicSet,
    pub horizon: f64,
    pub x0: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    state_box: Option<BoundingBox>,
}

impl SafetyProblem {
    pub fn new(
        system: StochasticSystem,
        state_space: SemialgebraicSet,
        initial_set: SemialgebraicSet,
        unsafe_set: SemialgebraicSet,
        horizon: f64,
        x0: Option<Vec<f64>>,
        gamma: Option<f64>,
    ) -> Result<Self, ModelError> {
        let n = system.state_dim();
        for (name, set) in [("state space", &state_space), ("initial set", &initial_set), ("unsafe set", &unsafe_set)] {
            if set.dim() != n {
                return Err(ModelError::Shape {
                    what: name.into(),
                    expected: format!("dimension {n}"),
                    found: format!("dimension {}", set.dim()),
                });
            }
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ModelError::InvalidHorizon(horizon));
        }
        if let Some(g) = gamma {
            if !(0.0..1.0).contains(&g) {
                return Err(ModelError::InvalidGamma(g));
            }
        }
        if let Some(x) = &x0 {
            if x.len() != n {
                return Err(PolyError::DimensionMismatch { expected: n, found: x.len() }.into());
            }
            for (i, s) in initial_set.constraints().iter().enumerate() {
                let v = s.eval(x)?;
                if v < -INITIAL_POINT_MARGIN {
                    return Err(ModelError::InitialPointOutside { point: x.clone(), constraint: i, value: v });
                }
            }
        }
        let state_box = state_space.estimate_bounding_box();
        Ok(SafetyProblem { system, state_space, initial_set, unsafe_set, horizon, x0, gamma, state_box })
    }

    pub fn dim(&self) -> usize {
        self.system.state_dim()
    }

    /// The same problem with the diffusion scaled by `s`.
    pub fn with_diffusion_scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.system = self.system.with_diffusion_scale(s);
        out
    }

    /// Estimated bounding box of the state space, if it looks bounded.
    pub fn state_box(&self) -> Option<&BoundingBox> {
        self.state_box.as_ref()
    }

    /// Box used for sampling-based checks; falls back to `[-10, 10]^n` for unbounded state spaces.
    pub fn sampling_box(&self) -> BoundingBox {
        self.state_box.clone().unwrap_or_else(|| BoundingBox::cube(self.dim(), 10.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemWarning {
    /// The state space did not look bounded under sampling.
    UnboundedStateSpace,
    /// A sample lies in both the initial and the unsafe set.
    InitialUnsafeOverlap { point: Vec<f64> },
    /// A sample lies in the unsafe set but outside the state space.
    UnsafeOutsideStateSpace { point: Vec<f64> },
    /// No sample of the state space lies in the unsafe set.
    UnsafeEmptyWithinStateSpace,
}

/// Number of low-discrepancy samples per dimension used by [`validate_problem`].
pub const VALIDATION_SAMPLES: usize = 8192;

/// Sample the state space's bounding box and report violations of the set-containment assumptions.
///
/// Never fails: containment is only probed, not decided.
pub fn validate_problem(problem: &SafetyProblem) -> Vec<ProblemWarning> {
    let mut warnings = Vec::new();
    if problem.state_box().is_none() {
        warnings.push(ProblemWarning::UnboundedStateSpace);
    }
    let region = problem.sampling_box();
    let mut overlap = None;
    let mut outside = None;
    let mut unsafe_inside = false;
    for x in region.samples(VALIDATION_SAMPLES * problem.dim()) {
        let in_unsafe = problem.unsafe_set.contains(&x);
        if !in_unsafe {
            continue;
        }
        let in_x = problem.state_space.contains(&x);
        unsafe_inside |= in_x;
        if overlap.is_none() && problem.initial_set.contains(&x) {
            overlap = Some(x.clone());
        }
        if outside.is_none() && !in_x {
            outside = Some(x);
        }
    }
    if let Some(point) = overlap {
        warnings.push(ProblemWarning::InitialUnsafeOverlap { point });
    }
    if let Some(point) = outside {
        warnings.push(ProblemWarning::UnsafeOutsideStateSpace { point });
    }
    if !unsafe_inside {
        warnings.push(ProblemWarning::UnsafeEmptyWithinStateSpace);
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{parse_polynomial, Monomial};

    fn p(s: &str, n: usize) -> Polynomial {
        parse_polynomial(s, n).unwrap()
    }

    fn set(items: &[&str], n: usize) -> SemialgebraicSet {
        SemialgebraicSet::new(items.iter().map(|s| p(s, n)).collect()).unwrap()
    }

    fn one_d(sigma: f64) -> StochasticSystem {
        StochasticSystem::new(vec![p("-x1", 1)], vec![vec![p("1", 1)]], vec![vec![Polynomial::constant(1, sigma)]]).unwrap()
    }

    fn nonlinear(sigma: f64) -> StochasticSystem {
        StochasticSystem::new(
            vec![p("x2", 2), p("-x1 - x2 - 0.5*x1^3", 2)],
            vec![vec![p("0", 2)], vec![p("1", 2)]],
            vec![vec![p("0", 2)], vec![Polynomial::constant(2, sigma)]],
        )
        .unwrap()
    }

    #[test]
    fn generator_linear_quadratic() {
        let s = 0.7;
        let gen = generator(&p("x1^2", 1), &one_d(s), &[Polynomial::zero(1)]).unwrap();
        let expected = &p("-2*x1^2", 1) + &Polynomial::constant(1, s * s);
        assert_eq!(gen, expected);
    }

    #[test]
    fn generator_of_constant_vanishes() {
        let gen = generator(&Polynomial::constant(2, 3.0), &nonlinear(1.2), &[Polynomial::zero(2)]).unwrap();
        assert!(gen.is_zero());
    }

    #[test]
    fn generator_nonlinear_benchmark() {
        // hand derivation: 2 x1 x2 + 2 x2 (-x1 - x2 - x1^3/2) + sigma^2
        let s = 1.3;
        let gen = generator(&p("x1^2 + x2^2", 2), &nonlinear(s), &[Polynomial::zero(2)]).unwrap();
        let expected = &p("-2*x2^2 - x1^3*x2", 2) + &Polynomial::constant(2, s * s);
        assert_eq!(gen.len(), 3);
        for (m, c) in expected.concrete_terms() {
            assert!((gen.concrete_coefficient(&m) - c).abs() < 1e-14, "{m}");
        }
        let v = gen.eval(&[1.0, 1.0]).unwrap();
        assert!((v - (-3.0 + s * s)).abs() < 1e-12);
    }

    #[test]
    fn generator_rejects_bilinear_unknowns() {
        use crate::poly::VarId;
        let b = Polynomial::decision(1, VarId(0)).mul(&p("x1^2", 1)).unwrap();
        let u = Polynomial::decision(1, VarId(1)).mul(&p("x1", 1)).unwrap();
        assert!(matches!(generator(&b, &one_d(1.0), &[u]), Err(ModelError::Poly(PolyError::BilinearProduct))));
    }

    #[test]
    fn generator_with_symbolic_controller() {
        use crate::poly::VarId;
        // u = -k x with k a decision variable: A x^2 = -2x^2 - 2 k x^2 + s^2
        let u = Polynomial::decision(1, VarId(0)).mul(&p("-x1", 1)).unwrap();
        let gen = generator(&p("x1^2", 1), &one_d(1.0), &[u]).unwrap();
        let coef = gen.coefficient(&Monomial::new(vec![2])).unwrap();
        assert_eq!(coef.constant_part(), -2.0);
        assert_eq!(coef.coefficient(VarId(0)), -2.0);
        assert_eq!(gen.evaluate(&[2.0], &vec![0.5]).unwrap(), -8.0 - 4.0 + 1.0);
    }

    #[test]
    fn shapes_are_checked() {
        let bad = StochasticSystem::new(vec![p("x1", 1)], vec![vec![p("1", 1)], vec![p("1", 1)]], vec![vec![p("1", 1)]]);
        assert!(matches!(bad, Err(ModelError::Shape { .. })));
    }

    fn one_d_problem(x0: Option<Vec<f64>>, gamma: Option<f64>) -> Result<SafetyProblem, ModelError> {
        SafetyProblem::new(one_d(1.0), set(&["4 - x1^2"], 1), set(&["0.04 - x1^2"], 1), set(&["x1^2 - 1"], 1), 1.0, x0, gamma)
    }

    #[test]
    fn problem_invariants() {
        assert!(one_d_problem(Some(vec![0.0]), None).is_ok());
        assert!(matches!(one_d_problem(Some(vec![0.5]), None), Err(ModelError::InitialPointOutside { .. })));
        assert!(matches!(one_d_problem(None, Some(1.0)), Err(ModelError::InvalidGamma(_))));
        let bb = one_d_problem(None, None).unwrap().state_box().cloned().unwrap();
        assert!(bb.lower[0] >= -2.0 && bb.lower[0] < -1.99);
        assert!(bb.upper[0] <= 2.0 && bb.upper[0] > 1.99);
    }

    #[test]
    fn validation_of_benchmark_sets_is_clean() {
        assert!(validate_problem(&one_d_problem(None, None).unwrap()).is_empty());
    }

    #[test]
    fn validation_flags_overlap_and_empty_unsafe() {
        let overlap =
            SafetyProblem::new(one_d(1.0), set(&["4 - x1^2"], 1), set(&["x1^2 - 1"], 1), set(&["x1^2 - 1"], 1), 1.0, None, None)
                .unwrap();
        let w = validate_problem(&overlap);
        assert!(w.iter().any(|w| matches!(w, ProblemWarning::InitialUnsafeOverlap { .. })));

        let far =
            SafetyProblem::new(one_d(1.0), set(&["4 - x1^2"], 1), set(&["0.04 - x1^2"], 1), set(&["x1 - 3"], 1), 1.0, None, None)
                .unwrap();
        let w = validate_problem(&far);
        assert!(w.contains(&ProblemWarning::UnsafeEmptyWithinStateSpace));
    }
}
