//! Sum-of-squares programs over polynomial decision variables, compiled to conic form.
//!
//! Every decision variable is a scalar [`VarId`]: free, non-negative, or an
//! upper-triangular entry of a Gram matrix. `p ∈ Σ` is encoded as `p = zᵀQz`
//! coefficient by coefficient with `Q` a fresh PSD block.

mod barrier;
mod frame;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::{ModelError, SemialgebraicSet};
use crate::poly::{monomial_basis, AffineExpr, Assignment, Monomial, PolyError, Polynomial, VarId};
use crate::sdp::{self, ConicProblem, Entry, Residuals, SdpError, SolveStatus, SolverSettings};

pub use barrier::{
    build_barrier_program, build_controller_program, sampled_soundness, BarrierProgram, ControllerProgram,
    Degrees, GammaParam, ProgramOptions, QuadraticForm, SolvedBarrier, SolvedController, SoundnessReport,
    SoundnessTolerances, GAMMA_EPSILON, SOUNDNESS_SAMPLES,
};
pub use frame::Frame;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SosError {
    #[error("SOS degree must be even, got {0}")]
    OddDegree(u32),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Free,
    NonNeg,
    Gram { block: usize, row: usize, col: usize },
}

/// `zᵀQz` over `basis` with `Q` stored as upper-triangular decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GramParam {
    pub basis: Vec<Monomial>,
    pub block: usize,
    entries: Vec<VarId>,
}

impl GramParam {
    pub fn size(&self) -> usize {
        self.basis.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> VarId {
        let (i, j) = (i.min(j), i.max(j));
        let n = self.size();
        self.entries[i * n - i * (i + 1) / 2 + j]
    }

    /// The polynomial `zᵀQz` with `Q` symbolic.
    pub fn expand(&self, n: usize) -> Polynomial {
        let mut p = Polynomial::zero(n);
        for i in 0..self.size() {
            for j in i..self.size() {
                let coef = if i == j { 1.0 } else { 2.0 };
                p.add_term(self.basis[i].mul(&self.basis[j]), AffineExpr::scaled_var(self.entry(i, j), coef));
            }
        }
        p
    }

    pub fn matrix<A: Assignment + ?Sized>(&self, values: &A) -> Result<DMatrix<f64>, PolyError> {
        let n = self.size();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let id = self.entry(i, j);
                let v = values.value(id).ok_or(PolyError::MissingAssignment(id))?;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
struct SosConstraint {
    target: Polynomial,
    gram: GramParam,
}

#[derive(Debug, Clone)]
pub struct SosProgram {
    nvars: usize,
    kinds: Vec<VarKind>,
    grams: Vec<GramParam>,
    constraints: Vec<SosConstraint>,
    equalities: Vec<AffineExpr>,
    objective: AffineExpr,
    margin: f64,
}

impl SosProgram {
    /// A program over polynomials in `nvars` state variables.
    pub fn new(nvars: usize) -> Self {
        SosProgram {
            nvars,
            kinds: Vec::new(),
            grams: Vec::new(),
            constraints: Vec::new(),
            equalities: Vec::new(),
            objective: AffineExpr::default(),
            margin: 0.0,
        }
    }

    /// Tighten every subsequent `p ∈ Σ` to `p - margin·zᵀz ∈ Σ`.
    pub fn set_margin(&mut self, margin: f64) {
        self.margin = margin;
    }

    pub fn dim(&self) -> usize {
        self.nvars
    }

    pub fn num_vars(&self) -> usize {
        self.kinds.len()
    }

    pub fn kind(&self, id: VarId) -> VarKind {
        self.kinds[id.index()]
    }

    pub fn grams(&self) -> &[GramParam] {
        &self.grams
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    fn push(&mut self, kind: VarKind) -> VarId {
        self.kinds.push(kind);
        VarId(self.kinds.len() as u32 - 1)
    }

    pub fn new_free(&mut self) -> VarId {
        self.push(VarKind::Free)
    }

    pub fn new_nonneg(&mut self) -> VarId {
        self.push(VarKind::NonNeg)
    }

    /// A polynomial with a free coefficient on every monomial of degree at most `degree`.
    pub fn new_poly(&mut self, degree: u32) -> Polynomial {
        let mut p = Polynomial::zero(self.nvars);
        for m in monomial_basis(self.nvars, degree) {
            let id = self.new_free();
            p.add_term(m, AffineExpr::var(id));
        }
        p
    }

    fn new_gram(&mut self, basis: Vec<Monomial>) -> GramParam {
        let block = self.grams.len();
        let n = basis.len();
        let mut entries = Vec::with_capacity(n * (n + 1) / 2);
        for row in 0..n {
            for col in row..n {
                entries.push(self.push(VarKind::Gram { block, row, col }));
            }
        }
        let g = GramParam { basis, block, entries };
        self.grams.push(g.clone());
        g
    }

    /// A fresh SOS polynomial `zᵀQz` of the given even degree with `Q` PSD.
    pub fn new_sos_poly(&mut self, degree: u32) -> Result<(Polynomial, GramParam), SosError> {
        if degree % 2 != 0 {
            return Err(SosError::OddDegree(degree));
        }
        let g = self.new_gram(monomial_basis(self.nvars, degree / 2));
        Ok((g.expand(self.nvars), g))
    }

    /// Require `p ∈ Σ`; odd degrees are padded to the next even degree.
    pub fn require_sos(&mut self, p: &Polynomial) -> Result<GramParam, SosError> {
        if p.dim() != self.nvars {
            return Err(PolyError::DimensionMismatch { expected: self.nvars, found: p.dim() }.into());
        }
        let half = p.degree().div_ceil(2);
        let g = self.new_gram(monomial_basis(self.nvars, half));
        let mut target = p.clone();
        if self.margin != 0.0 {
            for z in &g.basis {
                target.add_term(z.mul(z), AffineExpr::constant(-self.margin));
            }
        }
        let residual = &target - &g.expand(self.nvars);
        for (_, coef) in residual.terms() {
            self.equalities.push(coef.clone());
        }
        self.constraints.push(SosConstraint { target, gram: g.clone() });
        Ok(g)
    }

    /// Require `p - Σ λ_i s_i ∈ Σ` with fresh SOS multipliers, certifying `p ≥ 0` on `inside`.
    ///
    /// With `outside = {t_j ≥ 0}`, the region shrinks to `inside ∖ outside`: one SOS
    /// condition `p - Σ λ_i s_i + μ_j t_j ∈ Σ` per `t_j`, each covering `{t_j ≤ 0}`, so
    /// together they cover the union. A single outside constraint gives a single condition.
    ///
    /// With `multiplier_degree = None` each multiplier gets the largest even degree that
    /// keeps `λ_i s_i` within the degree of `p` (rounded up to even).
    /// Returns the multiplier Gram blocks.
    pub fn require_nonneg_on_set(
        &mut self,
        p: &Polynomial,
        inside: &SemialgebraicSet,
        outside: Option<&SemialgebraicSet>,
        multiplier_degree: Option<u32>,
    ) -> Result<Vec<GramParam>, SosError> {
        if let Some(d) = multiplier_degree {
            if d % 2 != 0 {
                return Err(SosError::OddDegree(d));
            }
        }
        let target = p.degree().next_multiple_of(2);
        let degree_for = |s: &Polynomial| {
            multiplier_degree.unwrap_or_else(|| {
                let room = target.saturating_sub(s.degree());
                room - room % 2
            })
        };
        let outside_constraints: Vec<Option<&Polynomial>> = match outside {
            Some(set) => set.constraints().iter().map(Some).collect(),
            None => vec![None],
        };
        let mut multipliers = Vec::new();
        for t in outside_constraints {
            let mut composite = p.clone();
            for s in inside.constraints() {
                let (lambda, g) = self.new_sos_poly(degree_for(s))?;
                composite.add_assign_scaled(&lambda.mul(s)?, -1.0);
                multipliers.push(g);
            }
            if let Some(t) = t {
                let (mu, g) = self.new_sos_poly(degree_for(t))?;
                composite.add_assign_scaled(&mu.mul(t)?, 1.0);
                multipliers.push(g);
            }
            self.require_sos(&composite)?;
        }
        Ok(multipliers)
    }

    /// `σ_0 + Σ λ_i s_i` with SOS `σ_0` of the given even degree and SOS multipliers
    /// sized as in [`Self::require_nonneg_on_set`]: a polynomial non-negative on `set` by construction.
    pub fn new_nonneg_on_set_poly(
        &mut self,
        degree: u32,
        set: &SemialgebraicSet,
        multiplier_degree: Option<u32>,
    ) -> Result<Polynomial, SosError> {
        let (mut p, _) = self.new_sos_poly(degree)?;
        for s in set.constraints() {
            let d = multiplier_degree.unwrap_or_else(|| {
                let room = degree.saturating_sub(s.degree());
                room - room % 2
            });
            let (lambda, _) = self.new_sos_poly(d)?;
            p.add_assign_scaled(&lambda.mul(s)?, 1.0);
        }
        Ok(p)
    }

    /// Require `expr = 0`.
    pub fn add_equality(&mut self, expr: AffineExpr) {
        self.equalities.push(expr);
    }

    /// Require `expr ≥ 0` through a non-negative slack.
    pub fn add_inequality(&mut self, mut expr: AffineExpr) {
        let slack = self.new_nonneg();
        expr.add_term(slack, -1.0);
        self.equalities.push(expr);
    }

    pub fn set_objective(&mut self, objective: AffineExpr) {
        self.objective = objective;
    }

    fn entry(&self, id: VarId) -> Entry {
        // indices within each kind follow creation order
        match self.kinds[id.index()] {
            VarKind::Gram { block, row, col } => Entry::psd(block, row, col),
            VarKind::Free | VarKind::NonNeg => unreachable!("scalar entries are mapped by position"),
        }
    }

    /// The equivalent standard-form conic problem and the entry of each decision variable.
    pub fn to_conic(&self) -> (ConicProblem, Vec<Entry>) {
        let mut conic = ConicProblem::new();
        let mut map = Vec::with_capacity(self.kinds.len());
        for g in &self.grams {
            conic.add_block(g.size());
        }
        for (i, kind) in self.kinds.iter().enumerate() {
            map.push(match kind {
                VarKind::Free => conic.add_free(),
                VarKind::NonNeg => conic.add_nonneg(),
                VarKind::Gram { .. } => self.entry(VarId(i as u32)),
            });
        }
        for eq in &self.equalities {
            let terms = eq.terms().map(|(id, c)| (map[id.index()], c)).collect();
            conic.add_row(terms, -eq.constant_part());
        }
        for (id, c) in self.objective.terms() {
            conic.add_objective(map[id.index()], c);
        }
        conic.objective_offset = self.objective.constant_part();
        (conic, map)
    }

    pub fn solve(&self, settings: &SolverSettings) -> Result<SosSolution, SosError> {
        let (conic, map) = self.to_conic();
        log::debug!(
            "solving SOS program: {} equalities, blocks {:?}, {} scalars",
            conic.rows.len(),
            conic.blocks,
            conic.n_free + conic.n_nonneg
        );
        let sol = sdp::solve(&conic, settings)?;
        let values = map.iter().map(|&e| sol.value(e)).collect();
        Ok(SosSolution {
            status: sol.status,
            values,
            objective: sol.objective,
            residuals: sol.residuals,
            iterations: sol.iterations,
        })
    }

    /// Largest coefficient mismatch between each constrained polynomial and its Gram expansion.
    pub fn gram_mismatch(&self, solution: &SosSolution) -> Result<f64, SosError> {
        let mut worst: f64 = 0.0;
        for c in &self.constraints {
            let lhs = c.target.instantiate(solution)?;
            let rhs = c.gram.expand(self.nvars).instantiate(solution)?;
            for (_, coef) in (&lhs - &rhs).terms() {
                worst = worst.max(coef.constant_part().abs());
            }
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SosSolution {
    pub status: SolveStatus,
    /// Value of every decision variable, indexed by [`VarId`].
    pub values: Vec<f64>,
    pub objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl SosSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

impl Assignment for SosSolution {
    fn value(&self, id: VarId) -> Option<f64> {
        self.values.get(id.index()).copied()
    }
}
