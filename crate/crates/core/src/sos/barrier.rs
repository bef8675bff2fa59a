//! Barrier and controller programs, and the sampled check of a solved certificate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Frame, SosError, SosProgram, SosSolution};
use crate::model::{generator, SafetyProblem};
use crate::poly::{monomial_basis, AffineExpr, Assignment, Monomial, Polynomial, VarId};

/// Gap kept between a free `γ` and 1, so the level stays strictly below 1.
pub const GAMMA_EPSILON: f64 = 1e-3;

/// Samples per set used by [`sampled_soundness`].
pub const SOUNDNESS_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degrees {
    pub barrier: u32,
    /// Degree of every S-procedure multiplier; `None` picks the largest even degree that fits.
    pub multiplier: Option<u32>,
    pub controller: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgramOptions {
    /// Tightening of every SOS condition, `p - margin·zᵀz ∈ Σ`.
    pub margin: f64,
    /// Weight on `β` in the objective `level + w·β`.
    pub objective_weight: f64,
    /// Solve in coordinates that map the state-space box onto `[-1, 1]^n`.
    pub rescale: bool,
}

impl Default for ProgramOptions {
    fn default() -> Self {
        ProgramOptions { margin: 0.0, objective_weight: 1.0, rescale: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaParam {
    Fixed(f64),
    Var(VarId),
}

/// Evaluate the coefficients of `p` at a point, leaving an affine expression.
fn affine_at(p: &Polynomial, x: &[f64]) -> AffineExpr {
    let mut out = AffineExpr::default();
    for (m, c) in p.terms() {
        out.add_scaled(c, m.eval(x));
    }
    out
}

fn frame_for(problem: &SafetyProblem, options: &ProgramOptions) -> Frame {
    if options.rescale {
        Frame::for_problem(problem)
    } else {
        Frame::identity(problem.dim())
    }
}

#[derive(Debug, Clone)]
pub struct BarrierProgram {
    pub program: SosProgram,
    pub frame: Frame,
    /// `B` in local coordinates with free coefficients.
    pub barrier: Polynomial,
    pub beta: VarId,
    pub gamma: GammaParam,
    pub alpha: f64,
    x0_local: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolvedBarrier {
    /// `B` in the problem's own coordinates.
    pub barrier: Polynomial,
    pub beta: f64,
    pub gamma: f64,
    pub b_at_x0: Option<f64>,
}

impl SolvedBarrier {
    /// `B(x0)` when an initial point is known, `γ` otherwise.
    pub fn level(&self) -> f64 {
        self.b_at_x0.unwrap_or(self.gamma)
    }
}

impl BarrierProgram {
    pub fn extract(&self, solution: &SosSolution) -> Result<SolvedBarrier, SosError> {
        let local = self.barrier.instantiate(solution)?;
        let mut barrier = self.frame.to_global(&local)?;
        barrier.prune(crate::poly::prune_tolerance());
        let beta = solution.value(self.beta).unwrap_or(0.0).max(0.0);
        let gamma = match self.gamma {
            GammaParam::Fixed(g) => g,
            GammaParam::Var(id) => solution.value(id).unwrap_or(0.0),
        };
        let b_at_x0 = match &self.x0_local {
            Some(y) => Some(local.eval(y)?),
            None => None,
        };
        Ok(SolvedBarrier { barrier, beta, gamma, b_at_x0 })
    }
}

/// The four barrier conditions at fixed `α` for a fixed controller `u` (problem coordinates):
///
/// 1. `B ≥ 0` on `X`
/// 2. `B ≥ 1` on `X_u`
/// 3. `B ≤ γ` on `X_0`
/// 4. `A B ≤ -α B + β` on `X ∖ X_u`
///
/// minimising `B(x0) + w·β` (or `γ + w·β` without an initial point).
pub fn build_barrier_program(
    problem: &SafetyProblem,
    u: &[Polynomial],
    alpha: f64,
    degrees: &Degrees,
    options: &ProgramOptions,
) -> Result<BarrierProgram, SosError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(SosError::Invalid(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    if u.iter().any(|p| !p.is_concrete()) {
        return Err(crate::poly::PolyError::BilinearProduct.into());
    }
    let frame = frame_for(problem, options);
    let local = frame.local_problem(problem)?;
    let u_local = u.iter().map(|p| frame.to_local(p)).collect::<Result<Vec<_>, _>>()?;
    let n = problem.dim();
    let mult = degrees.multiplier;

    let mut prog = SosProgram::new(n);
    prog.set_margin(options.margin);
    // B ≥ 0 on X, in image form B = σ0 + Σ λ_i s_i so that B carries no free coefficients
    let b = if degrees.barrier % 2 == 0 {
        prog.new_nonneg_on_set_poly(degrees.barrier, &local.state_space, mult)?
    } else {
        let b = prog.new_poly(degrees.barrier);
        prog.require_nonneg_on_set(&b, &local.state_space, None, mult)?;
        b
    };
    let beta = prog.new_nonneg();
    let gamma = match problem.gamma {
        Some(g) => GammaParam::Fixed(g),
        None => {
            let id = prog.new_nonneg();
            let mut cap = AffineExpr::scaled_var(id, -1.0);
            cap.add_constant(1.0 - GAMMA_EPSILON);
            prog.add_inequality(cap);
            GammaParam::Var(id)
        }
    };
    let gamma_poly = match gamma {
        GammaParam::Fixed(g) => Polynomial::constant(n, g),
        GammaParam::Var(id) => Polynomial::decision(n, id),
    };
    let one = Polynomial::constant(n, 1.0);

    prog.require_nonneg_on_set(&(&b - &one), &local.unsafe_set, None, mult)?;
    prog.require_nonneg_on_set(&(&gamma_poly - &b), &local.initial_set, None, mult)?;
    let gen = generator(&b, &local.system, &u_local)?;
    let mut decay = Polynomial::decision(n, beta);
    decay.add_assign_scaled(&b, -alpha);
    decay.add_assign_scaled(&gen, -1.0);
    prog.require_nonneg_on_set(&decay, &local.state_space, Some(&local.unsafe_set), mult)?;

    let mut objective = match &local.x0 {
        Some(y) => affine_at(&b, y),
        None => affine_at(&gamma_poly, &vec![0.0; n]),
    };
    objective.add_term(beta, options.objective_weight);
    prog.set_objective(objective);

    Ok(BarrierProgram { program: prog, frame, barrier: b, beta, gamma, alpha, x0_local: local.x0.clone() })
}

/// One input channel `u_k = zᵀQz`; `entries[i][j]` is `None` where `deg z_i + deg z_j` exceeds the degree.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub basis: Vec<Monomial>,
    entries: Vec<Vec<Option<VarId>>>,
}

impl QuadraticForm {
    pub fn matrix<A: Assignment + ?Sized>(&self, values: &A) -> DMatrix<f64> {
        let n = self.basis.len();
        DMatrix::from_fn(n, n, |i, j| self.entries[i.min(j)][i.max(j)].and_then(|id| values.value(id)).unwrap_or(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct ControllerProgram {
    pub program: SosProgram,
    pub frame: Frame,
    /// One parametric polynomial per input channel, in problem coordinates.
    pub controllers: Vec<Polynomial>,
    pub forms: Vec<QuadraticForm>,
    pub c: VarId,
    /// SOS slack added to the decay condition in elastic mode, in solver coordinates.
    pub shortfall: Option<Polynomial>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolvedController {
    pub controllers: Vec<Polynomial>,
    pub q: Vec<DMatrix<f64>>,
    pub c: f64,
    /// Mean of the elastic slack over the unit box of solver coordinates (zero when not elastic).
    pub mean_shortfall: f64,
}

impl ControllerProgram {
    pub fn extract(&self, solution: &SosSolution) -> Result<SolvedController, SosError> {
        let mut controllers = Vec::with_capacity(self.controllers.len());
        for u in &self.controllers {
            let mut p = u.instantiate(solution)?;
            p.prune(crate::poly::prune_tolerance());
            controllers.push(p);
        }
        let q = self.forms.iter().map(|f| f.matrix(solution)).collect();
        let c = solution.value(self.c).unwrap_or(0.0).max(0.0);
        let mean_shortfall = match &self.shortfall {
            Some(s) => box_mean(s).eval(solution)?.max(0.0),
            None => 0.0,
        };
        Ok(SolvedController { controllers, q, c, mean_shortfall })
    }
}

/// Minimise `c` over controllers `u_k = zᵀQ_k z` (problem coordinates) with `|vec(Q_k)| ≤ c`
/// such that the fixed barrier satisfies `A B ≤ -α B + β` on `X ∖ X_u`.
///
/// `z` is the monomial basis of degree `⌈n_u/2⌉`; for odd `n_u` entries of `Q` whose
/// product exceeds degree `n_u` are left out.
///
/// With `elastic = Some(κ)` the decay condition gains an SOS slack `s(x)` and the objective
/// becomes `c + κ·mean(s)`, the mean taken over the unit box of solver coordinates. The program
/// is then always feasible, and the controller reduces the shortfall wherever it can act.
pub fn build_controller_program(
    problem: &SafetyProblem,
    barrier: &Polynomial,
    alpha: f64,
    beta: f64,
    degrees: &Degrees,
    options: &ProgramOptions,
    elastic: Option<f64>,
) -> Result<ControllerProgram, SosError> {
    if !barrier.is_concrete() {
        return Err(crate::poly::PolyError::BilinearProduct.into());
    }
    let frame = frame_for(problem, options);
    let local = frame.local_problem(problem)?;
    let n = problem.dim();
    let k = problem.system.input_dim();
    let mut prog = SosProgram::new(n);
    prog.set_margin(options.margin);
    let c = prog.new_nonneg();

    let basis = monomial_basis(n, degrees.controller.div_ceil(2));
    let mut controllers = Vec::with_capacity(k);
    let mut forms = Vec::with_capacity(k);
    for _ in 0..k {
        let mut entries = vec![vec![None; basis.len()]; basis.len()];
        let mut u = Polynomial::zero(n);
        for i in 0..basis.len() {
            for j in i..basis.len() {
                let prod = basis[i].mul(&basis[j]);
                if prod.degree() > degrees.controller {
                    continue;
                }
                let id = prog.new_free();
                entries[i][j] = Some(id);
                u.add_term(prod, AffineExpr::scaled_var(id, if i == j { 1.0 } else { 2.0 }));
                let mut upper = AffineExpr::var(c);
                upper.add_term(id, -1.0);
                prog.add_inequality(upper);
                let mut lower = AffineExpr::var(c);
                lower.add_term(id, 1.0);
                prog.add_inequality(lower);
            }
        }
        controllers.push(u);
        forms.push(QuadraticForm { basis: basis.clone(), entries });
    }

    let b_local = frame.to_local(barrier)?;
    let u_local = controllers.iter().map(|p| frame.to_local(p)).collect::<Result<Vec<_>, _>>()?;
    let gen = generator(&b_local, &local.system, &u_local)?;
    let mut decay = Polynomial::constant(n, beta);
    decay.add_assign_scaled(&b_local, -alpha);
    decay.add_assign_scaled(&gen, -1.0);
    let mut objective = AffineExpr::var(c);
    let shortfall = match elastic {
        Some(kappa) => {
            let (s, _) = prog.new_sos_poly(decay.degree().next_multiple_of(2))?;
            decay.add_assign_scaled(&s, 1.0);
            objective.add_scaled(&box_mean(&s), kappa);
            Some(s)
        }
        None => None,
    };
    prog.require_nonneg_on_set(&decay, &local.state_space, Some(&local.unsafe_set), degrees.multiplier)?;
    prog.set_objective(objective);

    Ok(ControllerProgram { program: prog, frame, controllers, forms, c, shortfall })
}

/// Mean of `p` over `[-1, 1]^n` as an affine expression in its coefficients.
fn box_mean(p: &Polynomial) -> AffineExpr {
    let mut out = AffineExpr::constant(0.0);
    for (m, coef) in p.terms() {
        if m.exponents().iter().all(|e| e % 2 == 0) {
            let w: f64 = m.exponents().iter().map(|&e| 1.0 / (e as f64 + 1.0)).product();
            out.add_scaled(coef, w);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoundnessTolerances {
    pub value: f64,
    pub generator: f64,
}

impl Default for SoundnessTolerances {
    fn default() -> Self {
        SoundnessTolerances { value: 1e-6, generator: 1e-6 }
    }
}

/// Worst sampled violation of each barrier condition. Margins are positive when satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub samples_state: usize,
    pub samples_unsafe: usize,
    pub samples_initial: usize,
    pub samples_decay: usize,
    /// `min B` over sampled `X`.
    pub min_on_state: f64,
    /// `min B - 1` over sampled `X_u ∩ X`.
    pub min_on_unsafe: f64,
    /// `min γ - B` over sampled `X_0`.
    pub min_on_initial: f64,
    /// `min (β - αB - A B) / (1 + |A B|)` over sampled `X ∖ X_u`.
    pub min_decay: f64,
    pub passed: bool,
}

/// Check a solved certificate on low-discrepancy samples of each set, in problem coordinates.
#[allow(clippy::too_many_arguments)]
pub fn sampled_soundness(
    problem: &SafetyProblem,
    barrier: &Polynomial,
    u: &[Polynomial],
    alpha: f64,
    beta: f64,
    gamma: f64,
    samples: usize,
    tol: &SoundnessTolerances,
) -> Result<SoundnessReport, SosError> {
    let gen = generator(barrier, &problem.system, u)?;
    let state_box = problem.sampling_box();
    let initial_box = problem.initial_set.estimate_bounding_box().unwrap_or_else(|| state_box.clone());
    let x_set = &problem.state_space;
    let xu = &problem.unsafe_set;

    let mut r = SoundnessReport {
        samples_state: 0,
        samples_unsafe: 0,
        samples_initial: 0,
        samples_decay: 0,
        min_on_state: f64::INFINITY,
        min_on_unsafe: f64::INFINITY,
        min_on_initial: f64::INFINITY,
        min_decay: f64::INFINITY,
        passed: false,
    };
    for x in state_box.samples(samples) {
        if !x_set.contains(&x) {
            continue;
        }
        let b = barrier.eval(&x)?;
        r.samples_state += 1;
        r.min_on_state = r.min_on_state.min(b);
        if xu.contains(&x) {
            r.samples_unsafe += 1;
            r.min_on_unsafe = r.min_on_unsafe.min(b - 1.0);
        } else {
            let ab = gen.eval(&x)?;
            r.samples_decay += 1;
            r.min_decay = r.min_decay.min((beta - alpha * b - ab) / (1.0 + ab.abs()));
        }
    }
    for x in initial_box.samples(samples) {
        if problem.initial_set.contains(&x) {
            r.samples_initial += 1;
            r.min_on_initial = r.min_on_initial.min(gamma - barrier.eval(&x)?);
        }
    }
    let ok = |v: f64, t: f64| v.is_infinite() || v >= -t;
    r.passed = r.min_on_state.is_finite()
        && ok(r.min_on_state, tol.value)
        && ok(r.min_on_unsafe, tol.value)
        && ok(r.min_on_initial, tol.value)
        && ok(r.min_decay, tol.generator)
        && [r.min_on_state, r.min_on_unsafe, r.min_on_initial, r.min_decay].iter().all(|v| !v.is_nan());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SemialgebraicSet, StochasticSystem};
    use crate::poly::parse_polynomial;
    use crate::sdp::{SolveStatus, SolverSettings};

    fn p(s: &str, n: usize) -> Polynomial {
        parse_polynomial(s, n).unwrap()
    }

    fn one_d(sigma: f64, x0: Option<f64>) -> SafetyProblem {
        let sys = StochasticSystem::new(vec![p("-x1", 1)], vec![vec![p("1", 1)]], vec![vec![p(&sigma.to_string(), 1)]])
            .unwrap();
        SafetyProblem::new(
            sys,
            SemialgebraicSet::new(vec![p("4 - x1^2", 1)]).unwrap(),
            SemialgebraicSet::new(vec![p("0.04 - x1^2", 1)]).unwrap(),
            SemialgebraicSet::new(vec![p("x1^2 - 1", 1)]).unwrap(),
            1.0,
            x0.map(|v| vec![v]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn barrier_program_block_sizes() {
        let prob = one_d(1.0, None);
        let deg = Degrees { barrier: 16, multiplier: None, controller: 2 };
        let bp = build_barrier_program(&prob, &[Polynomial::zero(1)], 0.5, &deg, &ProgramOptions::default()).unwrap();
        // B - λ s_X ∈ Σ: Gram block over {1, x, ..., x^8}
        assert!(bp.program.grams().iter().any(|g| g.size() == 9));
        assert!(bp.program.grams().iter().all(|g| g.size() <= 9));
    }

    #[test]
    fn one_d_barrier_is_sound() {
        let prob = one_d(1.0, Some(0.0));
        let deg = Degrees { barrier: 8, multiplier: None, controller: 2 };
        let bp = build_barrier_program(&prob, &[Polynomial::zero(1)], 1.0, &deg, &ProgramOptions::default()).unwrap();
        let sol = bp.program.solve(&SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(bp.program.gram_mismatch(&sol).unwrap() < 1e-6);
        let sb = bp.extract(&sol).unwrap();
        let level = sb.level();
        assert!((0.0..1.0).contains(&level), "{level}");
        let rep = sampled_soundness(
            &prob,
            &sb.barrier,
            &[Polynomial::zero(1)],
            1.0,
            sb.beta,
            sb.gamma,
            2000,
            &SoundnessTolerances::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn zero_controller_when_already_certified() {
        let prob = one_d(0.5, Some(0.0));
        let deg = Degrees { barrier: 6, multiplier: None, controller: 2 };
        let u0 = [Polynomial::zero(1)];
        let bp = build_barrier_program(&prob, &u0, 1.0, &deg, &ProgramOptions::default()).unwrap();
        let sol = bp.program.solve(&SolverSettings::default()).unwrap();
        let sb = bp.extract(&sol).unwrap();
        let cp = build_controller_program(&prob, &sb.barrier, 1.0, sb.beta * 1.01 + 1e-6, &deg, &ProgramOptions::default(), None)
            .unwrap();
        let cs = cp.program.solve(&SolverSettings::default()).unwrap();
        assert_eq!(cs.status, SolveStatus::Optimal);
        let ctl = cp.extract(&cs).unwrap();
        assert!(ctl.c < 1e-5, "{}", ctl.c);
    }
}
