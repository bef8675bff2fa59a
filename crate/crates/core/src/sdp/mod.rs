//! Standard-form conic programs over PSD blocks, non-negative scalars and free scalars.
//!
//! ```text
//! minimize    <C, X> + c'x + d'v + offset
//! subject to  A(X) + A_lp x + F v = b
//!             X_j PSD,  x >= 0,  v free
//! ```
//!
//! [`solve`] runs a primal-dual interior-point method and then re-checks the
//! returned point against the original rows with an independent eigenvalue
//! routine; a point that fails the check is never reported as optimal.

mod ipm;
mod text;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use text::{read_problem, write_problem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdpError {
    #[error("malformed conic problem: {0}")]
    Malformed(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One scalar slot of the variable vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Entry {
    Free(usize),
    NonNeg(usize),
    /// Entry `(row, col)` of PSD block `block`, normalised so that `row <= col`.
    /// A coefficient on this entry multiplies the matrix element once.
    Psd { block: usize, row: usize, col: usize },
}

impl Entry {
    pub fn psd(block: usize, i: usize, j: usize) -> Self {
        Entry::Psd { block, row: i.min(j), col: i.max(j) }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearRow {
    pub terms: Vec<(Entry, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn inf_norm(&self) -> f64 {
        self.terms.iter().fold(0.0, |m, (_, c)| m.max(c.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConicProblem {
    pub n_free: usize,
    pub n_nonneg: usize,
    pub blocks: Vec<usize>,
    pub rows: Vec<LinearRow>,
    pub objective: Vec<(Entry, f64)>,
    pub objective_offset: f64,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_free(&mut self) -> Entry {
        self.n_free += 1;
        Entry::Free(self.n_free - 1)
    }

    pub fn add_nonneg(&mut self) -> Entry {
        self.n_nonneg += 1;
        Entry::NonNeg(self.n_nonneg - 1)
    }

    /// Declare a symmetric `size x size` PSD block and return its index.
    pub fn add_block(&mut self, size: usize) -> usize {
        self.blocks.push(size);
        self.blocks.len() - 1
    }

    pub fn add_row(&mut self, terms: Vec<(Entry, f64)>, rhs: f64) -> usize {
        let terms = terms.into_iter().map(|(e, c)| (normalise(e), c)).collect();
        self.rows.push(LinearRow { terms, rhs });
        self.rows.len() - 1
    }

    pub fn add_objective(&mut self, entry: Entry, coef: f64) {
        self.objective.push((normalise(entry), coef));
    }

    fn check_entry(&self, e: Entry) -> Result<(), SdpError> {
        let ok = match e {
            Entry::Free(k) => k < self.n_free,
            Entry::NonNeg(k) => k < self.n_nonneg,
            Entry::Psd { block, row, col } => {
                block < self.blocks.len() && row <= col && col < self.blocks[block]
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SdpError::Malformed(format!("undeclared entry {e:?}")))
        }
    }

    /// Every row and objective term must reference declared entries; blocks are non-empty.
    pub fn validate(&self) -> Result<(), SdpError> {
        if let Some(b) = self.blocks.iter().position(|&s| s == 0) {
            return Err(SdpError::Malformed(format!("block {b} has size 0")));
        }
        for (e, c) in self.rows.iter().flat_map(|r| r.terms.iter()).chain(self.objective.iter()) {
            self.check_entry(*e)?;
            if !c.is_finite() {
                return Err(SdpError::Malformed(format!("non-finite coefficient on {e:?}")));
            }
        }
        if let Some(i) = self.rows.iter().position(|r| !r.rhs.is_finite()) {
            return Err(SdpError::Malformed(format!("row {i} has a non-finite right-hand side")));
        }
        Ok(())
    }

    /// Number of scalar unknowns (free, non-negative and upper-triangular PSD entries).
    pub fn num_scalars(&self) -> usize {
        self.n_free + self.n_nonneg + self.blocks.iter().map(|s| s * (s + 1) / 2).sum::<usize>()
    }
}

fn normalise(e: Entry) -> Entry {
    match e {
        Entry::Psd { block, row, col } => Entry::psd(block, row, col),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Bound on the equality residual of row-normalised constraints.
    pub tol_eq: f64,
    /// Most negative eigenvalue tolerated in a returned PSD block.
    pub tol_psd: f64,
    /// Relative duality gap targeted by the interior-point iterations.
    pub tol_gap: f64,
    /// Relative gap still accepted as optimal when the iterations stall short of `tol_gap`.
    pub tol_gap_stall: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tol_eq: 1e-8, tol_psd: 1e-7, tol_gap: 1e-8, tol_gap_stall: 1e-6, max_iter: 120 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalTrouble,
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    /// Max over rows of `|a_i . x - b_i| / ||a_i||_inf`.
    pub equality_inf: f64,
    /// Smallest eigenvalue over all PSD blocks and non-negative scalars.
    pub min_eigenvalue: f64,
    /// `|primal - dual| / (1 + |primal| + |dual|)` as reported by the iterations.
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub free: Vec<f64>,
    pub nonneg: Vec<f64>,
    pub blocks: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub dual_objective: f64,
    /// Equality multipliers, one per row of the original problem.
    pub dual: Vec<f64>,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl ConicSolution {
    pub fn value(&self, e: Entry) -> f64 {
        match e {
            Entry::Free(k) => self.free[k],
            Entry::NonNeg(k) => self.nonneg[k],
            Entry::Psd { block, row, col } => self.blocks[block][(row, col)],
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Row-normalised equality residual and smallest cone eigenvalue of a candidate point.
///
/// Uses a dense symmetric eigensolver unrelated to the one inside the iterations.
pub fn check_point(problem: &ConicProblem, free: &[f64], nonneg: &[f64], blocks: &[DMatrix<f64>]) -> Residuals {
    let value = |e: Entry| match e {
        Entry::Free(k) => free[k],
        Entry::NonNeg(k) => nonneg[k],
        Entry::Psd { block, row, col } => blocks[block][(row, col)],
    };
    let mut equality_inf: f64 = 0.0;
    for row in &problem.rows {
        let lhs: f64 = row.terms.iter().map(|&(e, c)| c * value(e)).sum();
        let scale = row.inf_norm().max(f64::MIN_POSITIVE);
        let r = (lhs - row.rhs).abs() / scale;
        equality_inf = if r.is_nan() { f64::INFINITY } else { equality_inf.max(r) };
    }
    let mut min_eigenvalue = nonneg.iter().copied().fold(f64::INFINITY, f64::min);
    for b in blocks {
        let sym = (b + b.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        min_eigenvalue = if lo.is_nan() { f64::NEG_INFINITY } else { min_eigenvalue.min(lo) };
    }
    if !min_eigenvalue.is_finite() && min_eigenvalue > 0.0 {
        min_eigenvalue = 0.0;
    }
    Residuals { equality_inf, min_eigenvalue, relative_gap: f64::NAN }
}

/// Objective value of a candidate point.
pub fn objective_value(problem: &ConicProblem, free: &[f64], nonneg: &[f64], blocks: &[DMatrix<f64>]) -> f64 {
    problem.objective_offset
        + problem
            .objective
            .iter()
            .map(|&(e, c)| {
                c * match e {
                    Entry::Free(k) => free[k],
                    Entry::NonNeg(k) => nonneg[k],
                    Entry::Psd { block, row, col } => blocks[block][(row, col)],
                }
            })
            .sum::<f64>()
}

enum Presolved {
    Decided(SolveStatus),
    Reduced { problem: ConicProblem, kept_rows: Vec<usize> },
}

/// Drop rows without coefficients and pin free scalars that appear in no row.
fn presolve(problem: &ConicProblem, settings: &SolverSettings) -> Presolved {
    let mut reduced = ConicProblem { rows: Vec::new(), ..problem.clone() };
    let mut kept_rows = Vec::new();
    let mut used_free = vec![false; problem.n_free];
    for (i, row) in problem.rows.iter().enumerate() {
        let mut merged: std::collections::BTreeMap<Entry, f64> = Default::default();
        for &(e, c) in &row.terms {
            *merged.entry(e).or_default() += c;
        }
        merged.retain(|_, c| *c != 0.0);
        if merged.is_empty() {
            if row.rhs.abs() > settings.tol_eq {
                return Presolved::Decided(SolveStatus::Infeasible);
            }
            continue;
        }
        for e in merged.keys() {
            if let Entry::Free(k) = e {
                used_free[*k] = true;
            }
        }
        reduced.rows.push(LinearRow { terms: merged.into_iter().collect(), rhs: row.rhs });
        kept_rows.push(i);
    }
    let mut obj_free = vec![0.0; problem.n_free];
    for &(e, c) in &problem.objective {
        if let Entry::Free(k) = e {
            obj_free[k] += c;
        }
    }
    for k in 0..problem.n_free {
        if !used_free[k] {
            if obj_free[k] != 0.0 {
                return Presolved::Decided(SolveStatus::Unbounded);
            }
            reduced.rows.push(LinearRow { terms: vec![(Entry::Free(k), 1.0)], rhs: 0.0 });
        }
    }
    Presolved::Reduced { problem: reduced, kept_rows }
}

fn trivial_point(problem: &ConicProblem, status: SolveStatus) -> ipm::RawSolution {
    ipm::RawSolution {
        status,
        free: vec![0.0; problem.n_free],
        nonneg: vec![0.0; problem.n_nonneg],
        blocks: problem.blocks.iter().map(|&n| DMatrix::zeros(n, n)).collect(),
        dual: vec![0.0; problem.rows.len()],
        dual_objective: f64::NAN,
        relative_gap: f64::NAN,
        iterations: 0,
    }
}

/// Solve `problem`. Numerical failures are reported through the status, never as errors.
pub fn solve(problem: &ConicProblem, settings: &SolverSettings) -> Result<ConicSolution, SdpError> {
    problem.validate()?;
    let raw = match presolve(problem, settings) {
        Presolved::Decided(status) => trivial_point(problem, status),
        Presolved::Reduced { problem: reduced, kept_rows } => {
            let mut raw = ipm::run(&reduced, settings);
            let mut dual = vec![0.0; problem.rows.len()];
            for (y, &i) in raw.dual.iter().zip(&kept_rows) {
                dual[i] = *y;
            }
            raw.dual = dual;
            raw
        }
    };
    let mut residuals = check_point(problem, &raw.free, &raw.nonneg, &raw.blocks);
    residuals.relative_gap = raw.relative_gap;
    let objective = objective_value(problem, &raw.free, &raw.nonneg, &raw.blocks);
    let mut status = raw.status;
    if status == SolveStatus::Optimal {
        let certified = residuals.equality_inf <= settings.tol_eq && residuals.min_eigenvalue >= -settings.tol_psd;
        if !certified {
            log::debug!(
                "interior point reported optimal but re-check failed: eq {:.3e}, min eig {:.3e}",
                residuals.equality_inf,
                residuals.min_eigenvalue
            );
            status = SolveStatus::NumericalTrouble;
        }
    }
    Ok(ConicSolution {
        status,
        free: raw.free,
        nonneg: raw.nonneg,
        blocks: raw.blocks,
        objective,
        dual_objective: raw.dual_objective + problem.objective_offset,
        dual: raw.dual,
        residuals,
        iterations: raw.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    #[test]
    fn two_by_two_with_unit_off_diagonal() {
        // minimise x s.t. [[x, 1], [1, x]] PSD, written as X00 = X11, X01 = 1
        let mut p = ConicProblem::new();
        let b = p.add_block(2);
        p.add_row(vec![(Entry::psd(b, 0, 0), 1.0), (Entry::psd(b, 1, 1), -1.0)], 0.0);
        p.add_row(vec![(Entry::psd(b, 0, 1), 1.0)], 1.0);
        p.add_objective(Entry::psd(b, 0, 0), 1.0);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.objective - 1.0).abs() < 1e-8, "{}", s.objective);
        assert!(s.residuals.equality_inf <= 1e-8);
    }

    #[test]
    fn constant_indefinite_matrix_is_infeasible() {
        // X = [[1, 2], [2, 1]] has eigenvalues 3 and -1
        let mut p = ConicProblem::new();
        let b = p.add_block(2);
        p.add_row(vec![(Entry::psd(b, 0, 0), 1.0)], 1.0);
        p.add_row(vec![(Entry::psd(b, 1, 1), 1.0)], 1.0);
        p.add_row(vec![(Entry::psd(b, 0, 1), 1.0)], 2.0);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn max_of_two_scalars() {
        // minimise t s.t. diag(t - a, t - b) PSD: X00 - t = -a, X11 - t = -b, X01 = 0
        let (a, b) = (0.3, 0.7);
        let mut p = ConicProblem::new();
        let t = p.add_free();
        let blk = p.add_block(2);
        p.add_row(vec![(Entry::psd(blk, 0, 0), 1.0), (t, -1.0)], -a);
        p.add_row(vec![(Entry::psd(blk, 1, 1), 1.0), (t, -1.0)], -b);
        p.add_row(vec![(Entry::psd(blk, 0, 1), 1.0)], 0.0);
        p.add_objective(t, 1.0);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value(t) - 0.7).abs() < 1e-8, "{}", s.value(t));
    }

    #[test]
    fn linear_program_with_nonnegatives() {
        // minimise x + 2y s.t. x + y = 1, x, y >= 0 -> x = 1
        let mut p = ConicProblem::new();
        let x = p.add_nonneg();
        let y = p.add_nonneg();
        p.add_row(vec![(x, 1.0), (y, 1.0)], 1.0);
        p.add_objective(x, 1.0);
        p.add_objective(y, 2.0);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.objective - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unbounded_direction_detected() {
        // minimise -x s.t. x - y = 0, x, y >= 0
        let mut p = ConicProblem::new();
        let x = p.add_nonneg();
        let y = p.add_nonneg();
        p.add_row(vec![(x, 1.0), (y, -1.0)], 0.0);
        p.add_objective(x, -1.0);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, SolveStatus::Unbounded);
    }

    #[test]
    fn malformed_problem_rejected() {
        let mut p = ConicProblem::new();
        p.add_block(2);
        p.add_row(vec![(Entry::psd(0, 0, 2), 1.0)], 1.0);
        assert!(matches!(solve(&p, &settings()), Err(SdpError::Malformed(_))));
    }

    #[test]
    fn check_point_reports_negative_eigenvalue() {
        let mut p = ConicProblem::new();
        let b = p.add_block(2);
        p.add_row(vec![(Entry::psd(b, 0, 1), 1.0)], 2.0);
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = check_point(&p, &[], &[], &[x]);
        assert!(r.equality_inf < 1e-15);
        assert!((r.min_eigenvalue + 1.0).abs() < 1e-12);
    }
}
