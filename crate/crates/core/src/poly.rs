//! Sparse multivariate polynomials with affine decision-variable coefficients.
//!
//! A [`Polynomial`] maps monomials to [`AffineExpr`] coefficients, so the same
//! type carries both concrete polynomials (every coefficient a constant) and
//! parametric ones whose coefficients are unknowns of an SOS program. Products
//! are only allowed while the result stays affine in the decision variables.
//!
//! Monomials are ordered graded-lexicographically: lower total degree first,
//! and within one degree `x1` outranks `x2` (so `x1^2 < x1*x2 < x2^2`).

mod parse;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::parse_polynomial;

/// Default magnitude below which coefficients are dropped after arithmetic.
pub const DEFAULT_PRUNE_TOLERANCE: f64 = 1e-14;

static PRUNE_TOLERANCE: AtomicU64 = AtomicU64::new(DEFAULT_PRUNE_TOLERANCE.to_bits());

/// Current pruning threshold applied by every arithmetic operation.
pub fn prune_tolerance() -> f64 {
    f64::from_bits(PRUNE_TOLERANCE.load(AtomicOrdering::Relaxed))
}

/// Change the process-wide pruning threshold. Negative values are treated as zero.
pub fn set_prune_tolerance(tol: f64) {
    PRUNE_TOLERANCE.store(tol.max(0.0).to_bits(), AtomicOrdering::Relaxed);
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolyError {
    #[error("product of two polynomials that both carry decision variables")]
    BilinearProduct,
    #[error("decision variable {0} has no assigned value")]
    MissingAssignment(VarId),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("variable index {index} out of range for dimension {dim}")]
    VariableIndex { index: usize, dim: usize },
    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
}

/// Identifier of a scalar decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarId(pub u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Values for decision variables, looked up by id.
pub trait Assignment {
    fn value(&self, id: VarId) -> Option<f64>;
}

impl Assignment for [f64] {
    fn value(&self, id: VarId) -> Option<f64> {
        self.get(id.index()).copied()
    }
}

impl Assignment for Vec<f64> {
    fn value(&self, id: VarId) -> Option<f64> {
        self.get(id.index()).copied()
    }
}

impl Assignment for BTreeMap<VarId, f64> {
    fn value(&self, id: VarId) -> Option<f64> {
        self.get(&id).copied()
    }
}

impl Assignment for HashMap<VarId, f64> {
    fn value(&self, id: VarId) -> Option<f64> {
        self.get(&id).copied()
    }
}

/// Exponent vector of a monomial, one entry per state variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial(Box<[u32]>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents.into_boxed_slice())
    }

    pub fn one(n: usize) -> Self {
        Monomial(vec![0; n].into_boxed_slice())
    }

    /// The monomial `x_i` (zero-based index).
    pub fn var(n: usize, i: usize) -> Self {
        let mut e = vec![0; n];
        e[i] = 1;
        Monomial(e.into_boxed_slice())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.dim(), other.dim());
        Monomial(self.0.iter().zip(other.0.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_one() {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// All exponent vectors of total degree at most `d` in `n` variables, in graded-lex order.
///
/// The count is `C(n + d, d)`.
pub fn monomial_basis(n: usize, d: u32) -> Vec<Monomial> {
    assert!(n >= 1, "monomial basis needs at least one variable");
    let mut out = Vec::new();
    for deg in 0..=d {
        let mut current = vec![0u32; n];
        push_of_degree(n, deg, 0, &mut current, &mut out);
    }
    out
}

/// Monomials of exactly degree `deg`, with larger leading exponents first.
fn push_of_degree(n: usize, remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Monomial>) {
    if pos + 1 == n {
        current[pos] = remaining;
        out.push(Monomial::new(current.clone()));
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_of_degree(n, remaining - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// `constant + Σ coef·var`, kept in canonical sparse form.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineExpr {
    constant: f64,
    terms: BTreeMap<VarId, f64>,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        AffineExpr { constant: c, terms: BTreeMap::new() }
    }

    pub fn var(id: VarId) -> Self {
        Self::scaled_var(id, 1.0)
    }

    pub fn scaled_var(id: VarId, coef: f64) -> Self {
        let mut e = AffineExpr::default();
        e.add_term(id, coef);
        e
    }

    pub fn constant_part(&self) -> f64 {
        self.constant
    }

    pub fn terms(&self) -> impl Iterator<Item = (VarId, f64)> + '_ {
        self.terms.iter().map(|(&k, &v)| (k, v))
    }

    pub fn coefficient(&self, id: VarId) -> f64 {
        self.terms.get(&id).copied().unwrap_or(0.0)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.constant == 0.0
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
        if self.constant.abs() < prune_tolerance() {
            self.constant = 0.0;
        }
    }

    pub fn add_term(&mut self, id: VarId, coef: f64) {
        let tol = prune_tolerance();
        let entry = self.terms.entry(id).or_insert(0.0);
        *entry += coef;
        if entry.abs() < tol || *entry == 0.0 {
            self.terms.remove(&id);
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &AffineExpr, scale: f64) {
        if scale == 0.0 {
            return;
        }
        self.add_constant(other.constant * scale);
        for (&id, &c) in &other.terms {
            self.add_term(id, c * scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        if s == 0.0 {
            *self = AffineExpr::default();
            return;
        }
        let tol = prune_tolerance();
        self.constant *= s;
        if self.constant.abs() < tol {
            self.constant = 0.0;
        }
        self.terms.retain(|_, c| {
            *c *= s;
            c.abs() >= tol
        });
    }

    pub fn eval<A: Assignment + ?Sized>(&self, assignment: &A) -> Result<f64, PolyError> {
        let mut acc = self.constant;
        for (&id, &c) in &self.terms {
            let v = assignment.value(id).ok_or(PolyError::MissingAssignment(id))?;
            acc += c * v;
        }
        Ok(acc)
    }
}

impl fmt::Display for AffineExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "{}", self.constant);
        }
        let mut parts = Vec::new();
        if self.constant != 0.0 {
            parts.push(format!("{}", self.constant));
        }
        for (id, c) in &self.terms {
            parts.push(format!("{}*{}", c, id));
        }
        write!(f, "{}", parts.join(" + "))
    }
}

/// Sparse polynomial in `n` state variables with affine decision-variable coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, AffineExpr>,
}

impl Polynomial {
    pub fn zero(n: usize) -> Self {
        Polynomial { nvars: n, terms: BTreeMap::new() }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Self::zero(n);
        p.add_term(Monomial::one(n), AffineExpr::constant(c));
        p
    }

    /// The state variable `x_{i+1}` (zero-based index `i`).
    pub fn var(n: usize, i: usize) -> Self {
        assert!(i < n, "variable index {i} out of range for dimension {n}");
        let mut p = Self::zero(n);
        p.add_term(Monomial::var(n, i), AffineExpr::constant(1.0));
        p
    }

    /// A scalar decision variable viewed as a constant polynomial.
    pub fn decision(n: usize, id: VarId) -> Self {
        let mut p = Self::zero(n);
        p.add_term(Monomial::one(n), AffineExpr::var(id));
        p
    }

    pub fn monomial(mono: Monomial, coef: f64) -> Self {
        let mut p = Self::zero(mono.dim());
        p.add_term(mono, AffineExpr::constant(coef));
        p
    }

    /// Build from `(exponents, coefficient)` pairs; all exponent vectors must have length `n`.
    pub fn from_coefficients<I>(n: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (Monomial, f64)>,
    {
        let mut p = Self::zero(n);
        for (m, c) in terms {
            if m.dim() != n {
                return Err(PolyError::DimensionMismatch { expected: n, found: m.dim() });
            }
            p.add_term(m, AffineExpr::constant(c));
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.nvars
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &AffineExpr)> {
        self.terms.iter()
    }

    pub fn coefficient(&self, mono: &Monomial) -> Option<&AffineExpr> {
        self.terms.get(mono)
    }

    /// Constant part of the coefficient of `mono` (zero if absent).
    pub fn concrete_coefficient(&self, mono: &Monomial) -> f64 {
        self.terms.get(mono).map_or(0.0, |e| e.constant_part())
    }

    /// Coefficients of a concrete polynomial in graded-lex order.
    pub fn concrete_terms(&self) -> Vec<(Monomial, f64)> {
        self.terms.iter().map(|(m, e)| (m.clone(), e.constant_part())).collect()
    }

    pub fn add_term(&mut self, mono: Monomial, coef: AffineExpr) {
        debug_assert_eq!(mono.dim(), self.nvars);
        match self.terms.get_mut(&mono) {
            Some(existing) => {
                existing.add_scaled(&coef, 1.0);
                if existing.is_zero() {
                    self.terms.remove(&mono);
                }
            }
            None => {
                let mut coef = coef;
                coef.scale(1.0);
                if !coef.is_zero() {
                    self.terms.insert(mono, coef);
                }
            }
        }
    }

    fn add_scaled_term(&mut self, mono: Monomial, coef: &AffineExpr, scale: f64) {
        match self.terms.get_mut(&mono) {
            Some(existing) => {
                existing.add_scaled(coef, scale);
                if existing.is_zero() {
                    self.terms.remove(&mono);
                }
            }
            None => {
                let mut c = AffineExpr::default();
                c.add_scaled(coef, scale);
                if !c.is_zero() {
                    self.terms.insert(mono, c);
                }
            }
        }
    }

    pub fn is_concrete(&self) -> bool {
        self.terms.values().all(AffineExpr::is_constant)
    }

    pub fn decision_vars(&self) -> BTreeSet<VarId> {
        self.terms.values().flat_map(|e| e.terms().map(|(id, _)| id)).collect()
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    fn check_dim(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.nvars != other.nvars {
            return Err(PolyError::DimensionMismatch { expected: self.nvars, found: other.nvars });
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let mut out = self.clone();
        out.add_assign_scaled(other, 1.0);
        Ok(out)
    }

    /// `self += scale * other`; panics on dimension mismatch.
    pub fn add_assign_scaled(&mut self, other: &Polynomial, scale: f64) {
        assert_eq!(self.nvars, other.nvars, "dimension mismatch");
        for (m, c) in &other.terms {
            self.add_scaled_term(m.clone(), c, scale);
        }
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        if s == 0.0 {
            return Polynomial::zero(self.nvars);
        }
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in &self.terms {
            let mut c = c.clone();
            c.scale(s);
            if !c.is_zero() {
                out.terms.insert(m.clone(), c);
            }
        }
        out
    }

    /// Product; at most one factor may carry decision variables.
    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let (param, fixed) = match (self.is_concrete(), other.is_concrete()) {
            (_, true) => (self, other),
            (true, false) => (other, self),
            (false, false) => return Err(PolyError::BilinearProduct),
        };
        let mut out = Polynomial::zero(self.nvars);
        for (mf, cf) in &fixed.terms {
            let s = cf.constant_part();
            for (mp, cp) in &param.terms {
                out.add_scaled_term(mf.mul(mp), cp, s);
            }
        }
        Ok(out)
    }

    pub fn pow(&self, k: u32) -> Result<Polynomial, PolyError> {
        let mut acc = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            acc = acc.mul(self)?;
        }
        Ok(acc)
    }

    /// Exact partial derivative with respect to `x_{i+1}`.
    pub fn differentiate(&self, i: usize) -> Result<Polynomial, PolyError> {
        if i >= self.nvars {
            return Err(PolyError::VariableIndex { index: i, dim: self.nvars });
        }
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in &self.terms {
            let e = m.exponents()[i];
            if e == 0 {
                continue;
            }
            let mut exps = m.exponents().to_vec();
            exps[i] -= 1;
            out.add_scaled_term(Monomial::new(exps), c, e as f64);
        }
        Ok(out)
    }

    /// Evaluate at state `x` with decision variables taken from `assignment`.
    pub fn evaluate<A: Assignment + ?Sized>(&self, x: &[f64], assignment: &A) -> Result<f64, PolyError> {
        if x.len() != self.nvars {
            return Err(PolyError::DimensionMismatch { expected: self.nvars, found: x.len() });
        }
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            acc += c.eval(assignment)? * m.eval(x);
        }
        Ok(acc)
    }

    /// Evaluate a concrete polynomial; fails if any decision variable is present.
    pub fn eval(&self, x: &[f64]) -> Result<f64, PolyError> {
        let empty: &[f64] = &[];
        self.evaluate(x, empty)
    }

    /// Substitute values for decision variables, producing a concrete polynomial.
    pub fn instantiate<A: Assignment + ?Sized>(&self, assignment: &A) -> Result<Polynomial, PolyError> {
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), AffineExpr::constant(c.eval(assignment)?));
        }
        Ok(out)
    }

    /// Drop coefficients whose magnitude is below `tol`.
    pub fn prune(&mut self, tol: f64) {
        self.terms.retain(|_, c| {
            c.terms.retain(|_, v| v.abs() >= tol);
            if c.constant.abs() < tol {
                c.constant = 0.0;
            }
            !c.is_zero()
        });
    }

    /// Compose with the per-coordinate affine map `x_i -> scale_i * x_i + shift_i`.
    pub fn affine_substitute(&self, scale: &[f64], shift: &[f64]) -> Result<Polynomial, PolyError> {
        let n = self.nvars;
        if scale.len() != n || shift.len() != n {
            return Err(PolyError::DimensionMismatch { expected: n, found: scale.len().min(shift.len()) });
        }
        let images: Vec<Polynomial> = (0..n)
            .map(|i| {
                let mut p = Polynomial::var(n, i).scale(scale[i]);
                p.add_term(Monomial::one(n), AffineExpr::constant(shift[i]));
                p
            })
            .collect();
        // powers[i][e] = (scale_i x_i + shift_i)^e
        let max_deg: Vec<u32> = (0..n)
            .map(|i| self.terms.keys().map(|m| m.exponents()[i]).max().unwrap_or(0))
            .collect();
        let mut powers: Vec<Vec<Polynomial>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = vec![Polynomial::constant(n, 1.0)];
            for e in 1..=max_deg[i] as usize {
                let next = row[e - 1].mul(&images[i])?;
                row.push(next);
            }
            powers.push(row);
        }
        let mut out = Polynomial::zero(n);
        for (m, c) in &self.terms {
            let mut term = Polynomial::zero(n);
            term.add_term(Monomial::one(n), c.clone());
            for (i, &e) in m.exponents().iter().enumerate() {
                if e > 0 {
                    term = term.mul(&powers[i][e as usize])?;
                }
            }
            out.add_assign_scaled(&term, 1.0);
        }
        Ok(out)
    }
}

impl std::ops::Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        out.add_assign_scaled(rhs, 1.0);
        out
    }
}

impl std::ops::Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        out.add_assign_scaled(rhs, -1.0);
        out
    }
}

impl std::ops::Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            if c.is_constant() {
                let v = c.constant_part();
                let (sign, mag) = if v < 0.0 { ("-", -v) } else { ("+", v) };
                if first {
                    if sign == "-" {
                        write!(f, "-")?;
                    }
                } else {
                    write!(f, " {} ", sign)?;
                }
                if m.is_one() {
                    write!(f, "{}", mag)?;
                } else if mag == 1.0 {
                    write!(f, "{}", m)?;
                } else {
                    write!(f, "{}*{}", mag, m)?;
                }
            } else {
                if !first {
                    write!(f, " + ")?;
                }
                if m.is_one() {
                    write!(f, "({})", c)?;
                } else {
                    write!(f, "({})*{}", c, m)?;
                }
            }
            first = false;
        }
        Ok(())
    }
}
