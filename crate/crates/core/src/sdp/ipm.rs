//! Infeasible primal-dual path following with the Nesterov-Todd direction and
//! Mehrotra's predictor-corrector.
//!
//! Dual of the standard form:
//!
//! ```text
//! maximise  b'y   s.t.  A*(y) + Z = C,  A_lp'y + z = c,  F'y = d,  Z PSD, z >= 0
//! ```
//!
//! Each iteration solves the augmented Schur system `[M F; F' 0]` where
//! `M_ij = tr(A_i W A_j W) + sum_k a_ik a_jk x_k / z_k` and `W` is the NT scaling. Rows are sparse in
//! every block (each Gram entry appears in one coefficient-matching row), so
//! `M` is assembled from rank-one products rather than dense traces.

use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::prelude::*;
use faer::{Par, Side};
use nalgebra::DMatrix;

use super::{ConicProblem, Entry, SolveStatus, SolverSettings};

const INFEASIBILITY_TOL: f64 = 1e-8;
const DUAL_TOL: f64 = 1e-8;
const STALL_STEP: f64 = 1e-5;
/// Iterations allowed without the best feasible gap shrinking by `BEST_PROGRESS`.
const BEST_PATIENCE: usize = 12;
const BEST_PROGRESS: f64 = 0.5;

pub(super) struct RawSolution {
    pub status: SolveStatus,
    pub free: Vec<f64>,
    pub nonneg: Vec<f64>,
    pub blocks: Vec<DMatrix<f64>>,
    pub dual: Vec<f64>,
    pub dual_objective: f64,
    pub relative_gap: f64,
    pub iterations: usize,
}

/// Sparse symmetric coefficient matrices of one PSD block, one per touching row.
/// Off-diagonal coefficients are split evenly over `(p, q)` and `(q, p)`.
struct BlockRows {
    n: usize,
    rows: Vec<(usize, Vec<(usize, usize, f64)>)>,
    c: Mat<f64>,
}

struct Data {
    m: usize,
    b: Vec<f64>,
    row_scale: Vec<f64>,
    blocks: Vec<BlockRows>,
    lp_cols: Vec<Vec<(usize, f64)>>,
    lp_c: Vec<f64>,
    free_cols: Vec<Vec<(usize, f64)>>,
    free_d: Vec<f64>,
}

fn build(problem: &ConicProblem) -> Data {
    let m = problem.rows.len();
    let row_scale: Vec<f64> = problem
        .rows
        .iter()
        .map(|r| {
            let nrm = r.inf_norm();
            if nrm > 0.0 {
                1.0 / nrm
            } else {
                1.0
            }
        })
        .collect();
    let b: Vec<f64> = problem.rows.iter().zip(&row_scale).map(|(r, s)| r.rhs * s).collect();

    let mut block_rows: Vec<Vec<(usize, Vec<(usize, usize, f64)>)>> = vec![Vec::new(); problem.blocks.len()];
    let mut lp_cols = vec![Vec::new(); problem.n_nonneg];
    let mut free_cols = vec![Vec::new(); problem.n_free];
    for (i, row) in problem.rows.iter().enumerate() {
        let s = row_scale[i];
        let mut per_block: std::collections::BTreeMap<usize, std::collections::BTreeMap<(usize, usize), f64>> =
            Default::default();
        let mut lp: std::collections::BTreeMap<usize, f64> = Default::default();
        let mut fr: std::collections::BTreeMap<usize, f64> = Default::default();
        for &(e, c) in &row.terms {
            match e {
                Entry::Free(k) => *fr.entry(k).or_default() += c * s,
                Entry::NonNeg(k) => *lp.entry(k).or_default() += c * s,
                Entry::Psd { block, row, col } => {
                    *per_block.entry(block).or_default().entry((row, col)).or_default() += c * s
                }
            }
        }
        for (blk, ents) in per_block {
            let mut list = Vec::with_capacity(2 * ents.len());
            for ((p, q), v) in ents {
                if v == 0.0 {
                    continue;
                }
                if p == q {
                    list.push((p, p, v));
                } else {
                    list.push((p, q, 0.5 * v));
                    list.push((q, p, 0.5 * v));
                }
            }
            if !list.is_empty() {
                block_rows[blk].push((i, list));
            }
        }
        for (k, v) in lp {
            if v != 0.0 {
                lp_cols[k].push((i, v));
            }
        }
        for (k, v) in fr {
            if v != 0.0 {
                free_cols[k].push((i, v));
            }
        }
    }

    let mut cs: Vec<Mat<f64>> = problem.blocks.iter().map(|&n| Mat::zeros(n, n)).collect();
    let mut lp_c = vec![0.0; problem.n_nonneg];
    let mut free_d = vec![0.0; problem.n_free];
    for &(e, c) in &problem.objective {
        match e {
            Entry::Free(k) => free_d[k] += c,
            Entry::NonNeg(k) => lp_c[k] += c,
            Entry::Psd { block, row, col } => {
                if row == col {
                    cs[block][(row, row)] += c;
                } else {
                    cs[block][(row, col)] += 0.5 * c;
                    cs[block][(col, row)] += 0.5 * c;
                }
            }
        }
    }
    let blocks = problem
        .blocks
        .iter()
        .zip(block_rows)
        .zip(cs)
        .map(|((&n, rows), c)| BlockRows { n, rows, c })
        .collect();
    Data { m, b, row_scale, blocks, lp_cols, lp_c, free_cols, free_d }
}

fn inner(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, j)] * b[(i, j)];
        }
    }
    acc
}

fn frob(a: &Mat<f64>) -> f64 {
    inner(a, a).sqrt()
}

fn sym(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

fn axpy(y: &mut Mat<f64>, alpha: f64, x: &Mat<f64>) {
    for j in 0..y.ncols() {
        for i in 0..y.nrows() {
            y[(i, j)] += alpha * x[(i, j)];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn two_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `rp - A(dX) - A_lp dx - F dv`.
fn primal_mismatch(d: &Data, dx: &[Mat<f64>], dxl: &[f64], dv: &[f64], rp: &[f64]) -> Vec<f64> {
    let a = apply_a(d, dx, dxl, dv);
    rp.iter().zip(&a).map(|(r, a)| r - a).collect()
}

/// `A(X) + A_lp x + F v`.
fn apply_a(d: &Data, xs: &[Mat<f64>], xl: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.m];
    for (blk, x) in d.blocks.iter().zip(xs) {
        for (i, ents) in &blk.rows {
            out[*i] += ents.iter().map(|&(p, q, val)| val * x[(p, q)]).sum::<f64>();
        }
    }
    for (col, &xk) in d.lp_cols.iter().zip(xl) {
        for &(i, a) in col {
            out[i] += a * xk;
        }
    }
    for (col, &vk) in d.free_cols.iter().zip(v) {
        for &(i, a) in col {
            out[i] += a * vk;
        }
    }
    out
}

fn apply_at_block(blk: &BlockRows, y: &[f64]) -> Mat<f64> {
    let mut s = Mat::zeros(blk.n, blk.n);
    for (i, ents) in &blk.rows {
        let yi = y[*i];
        if yi == 0.0 {
            continue;
        }
        for &(p, q, val) in ents {
            s[(p, q)] += yi * val;
        }
    }
    s
}

fn apply_at_cols(cols: &[Vec<(usize, f64)>], y: &[f64]) -> Vec<f64> {
    cols.iter().map(|col| col.iter().map(|&(i, a)| a * y[i]).sum()).collect()
}

/// Largest `t` with `X + t dX` PSD (infinite if none), via Cholesky of `X`.
fn max_step_psd(x: &Mat<f64>, dx: &Mat<f64>) -> Option<f64> {
    let llt = x.llt(Side::Lower).ok()?;
    let l = llt.L();
    let mut w = dx.clone();
    solve_lower_triangular_in_place(l, w.as_mut(), Par::Seq);
    let mut wt = w.transpose().to_owned();
    solve_lower_triangular_in_place(l, wt.as_mut(), Par::Seq);
    let ws = sym(&wt);
    let eig = ws.self_adjoint_eigenvalues(Side::Lower).ok()?;
    let lo = eig.first().copied().unwrap_or(0.0);
    if !lo.is_finite() {
        return None;
    }
    Some(if lo >= 0.0 { f64::INFINITY } else { -1.0 / lo })
}

fn max_step_lp(x: &[f64], dx: &[f64]) -> f64 {
    x.iter()
        .zip(dx)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

/// Minimal-norm correction onto `A(X) + A_lp x + F v = r`, via the constant Gram matrix `A A*`.
struct Projector {
    llt: faer::linalg::solvers::Llt<f64>,
}

impl Projector {
    fn new(d: &Data) -> Option<Self> {
        let m = d.m;
        let mut g = vec![0.0; m * m];
        for blk in &d.blocks {
            let mut by_entry: std::collections::BTreeMap<(usize, usize), Vec<(usize, f64)>> = Default::default();
            for (i, ents) in &blk.rows {
                for &(p, q, a) in ents {
                    by_entry.entry((p, q)).or_default().push((*i, a));
                }
            }
            for col in by_entry.values() {
                for &(i, a) in col {
                    for &(j, b) in col {
                        g[i * m + j] += a * b;
                    }
                }
            }
        }
        for col in d.lp_cols.iter().chain(&d.free_cols) {
            for &(i, a) in col {
                for &(j, b) in col {
                    g[i * m + j] += a * b;
                }
            }
        }
        let g = Mat::from_fn(m, m, |i, j| g[i * m + j]);
        g.llt(Side::Lower).ok().map(|llt| Projector { llt })
    }

    /// Add `A*(w)` with `A A* w = err` to the primal direction.
    fn correct(&self, d: &Data, err: &[f64], dx: &mut [Mat<f64>], dxl: &mut [f64], dv: &mut [f64]) {
        let mut w = Mat::from_fn(d.m, 1, |i, _| err[i]);
        self.llt.solve_in_place(w.as_mut());
        let w: Vec<f64> = (0..d.m).map(|i| w[(i, 0)]).collect();
        if w.iter().any(|v| !v.is_finite()) {
            return;
        }
        for (blk, x) in d.blocks.iter().zip(dx.iter_mut()) {
            axpy(x, 1.0, &apply_at_block(blk, &w));
        }
        for (x, a) in dxl.iter_mut().zip(apply_at_cols(&d.lp_cols, &w)) {
            *x += a;
        }
        for (x, a) in dv.iter_mut().zip(apply_at_cols(&d.free_cols, &w)) {
            *x += a;
        }
    }
}

enum Factor {
    Llt(faer::linalg::solvers::Llt<f64>),
    Lu(faer::linalg::solvers::PartialPivLu<f64>),
}

impl Factor {
    fn solve_in_place(&self, rhs: faer::MatMut<'_, f64>) {
        match self {
            Factor::Llt(f) => f.solve_in_place(rhs),
            Factor::Lu(f) => f.solve_in_place(rhs),
        }
    }
}

type Snapshot = (Vec<Mat<f64>>, Vec<f64>, Vec<f64>, Vec<f64>);

struct NtScaling {
    g: Mat<f64>,
    ginv: Mat<f64>,
    lam: Vec<f64>,
    w: Mat<f64>,
}

/// `W = G G'` with `W Z W = X` and `G' Z G = G^-1 X G^-T = diag(lam)`.
fn nt_scaling(x: &Mat<f64>, z: &Mat<f64>) -> Option<NtScaling> {
    let n = x.nrows();
    let llt = x.llt(Side::Lower).ok()?;
    let l = llt.L().to_owned();
    let s = sym(&(&(l.transpose() * z) * &l));
    let eig = s.self_adjoint_eigen(Side::Lower).ok()?;
    let v = eig.U();
    let dvals: Vec<f64> = (0..n).map(|i| eig.S().column_vector()[i]).collect();
    if dvals.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return None;
    }
    let lv = &l * v;
    let g = Mat::from_fn(n, n, |i, j| lv[(i, j)] * dvals[j].powf(-0.25));
    let mut linv = Mat::<f64>::identity(n, n);
    solve_lower_triangular_in_place(l.as_ref(), linv.as_mut(), Par::Seq);
    let vtl = v.transpose() * &linv;
    let ginv = Mat::from_fn(n, n, |i, j| dvals[i].powf(0.25) * vtl[(i, j)]);
    let lam = dvals.iter().map(|e| e.sqrt()).collect();
    let w = sym(&(&g * g.transpose()));
    Some(NtScaling { g, ginv, lam, w })
}

/// Adds `tr(A_i W A_j W)` over the rows touching `blk` to the row-major `k`.
fn add_schur_block(k: &mut [f64], nk: usize, blk: &BlockRows, w: &Mat<f64>) {
    let n = blk.n;
    let ws: Vec<f64> = (0..n * n).map(|t| w[(t / n, t % n)]).collect();
    let mut h = vec![0.0; n * n];
    for (ii, (i, ents_i)) in blk.rows.iter().enumerate() {
        // H = W A_i W = sum a w_p w_q'
        h.iter_mut().for_each(|v| *v = 0.0);
        for &(p, q, a) in ents_i {
            let wq = &ws[q * n..(q + 1) * n];
            for r in 0..n {
                let c = a * ws[r * n + p];
                if c != 0.0 {
                    let hr = &mut h[r * n..(r + 1) * n];
                    for (hv, wv) in hr.iter_mut().zip(wq) {
                        *hv += c * wv;
                    }
                }
            }
        }
        for (j, ents_j) in &blk.rows[ii..] {
            let v: f64 = ents_j.iter().map(|&(r, s, b)| b * h[r * n + s]).sum();
            k[i * nk + j] += v;
            if i != j {
                k[j * nk + i] += v;
            }
        }
    }
}

struct Direction {
    dy: Vec<f64>,
    dv: Vec<f64>,
    dx: Vec<Mat<f64>>,
    dz: Vec<Mat<f64>>,
    dxl: Vec<f64>,
    dzl: Vec<f64>,
}

struct Iterate {
    x: Vec<Mat<f64>>,
    z: Vec<Mat<f64>>,
    xl: Vec<f64>,
    zl: Vec<f64>,
    y: Vec<f64>,
    v: Vec<f64>,
}

fn initial_point(d: &Data) -> Iterate {
    let mut x = Vec::new();
    let mut z = Vec::new();
    for blk in &d.blocks {
        let n = blk.n as f64;
        let mut xi: f64 = 10.0f64.max(n.sqrt());
        let mut eta: f64 = 10.0f64.max(n.sqrt()).max(frob(&blk.c));
        for (i, ents) in &blk.rows {
            let na = ents.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt();
            xi = xi.max(n * (1.0 + d.b[*i].abs()) / (1.0 + na));
            eta = eta.max(na);
        }
        x.push(Mat::from_fn(blk.n, blk.n, |i, j| if i == j { xi } else { 0.0 }));
        z.push(Mat::from_fn(blk.n, blk.n, |i, j| if i == j { eta } else { 0.0 }));
    }
    let nl = d.lp_cols.len();
    let (mut xi, mut eta): (f64, f64) = (10.0f64.max((nl as f64).sqrt()), 10.0f64.max((nl as f64).sqrt()));
    for col in &d.lp_cols {
        let na = col.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        eta = eta.max(na);
        for &(i, _) in col {
            xi = xi.max((1.0 + d.b[i].abs()) / (1.0 + na));
        }
    }
    eta = eta.max(two_norm(&d.lp_c));
    Iterate {
        x,
        z,
        xl: vec![xi; nl],
        zl: vec![eta; nl],
        y: vec![0.0; d.m],
        v: vec![0.0; d.free_cols.len()],
    }
}

pub(super) fn run(problem: &ConicProblem, settings: &SolverSettings) -> RawSolution {
    let d = build(problem);
    let mut it = initial_point(&d);
    let projector = Projector::new(&d);
    let nu = d.blocks.iter().map(|b| b.n).sum::<usize>() + d.lp_cols.len();
    let nf = d.free_cols.len();
    let nk = d.m + nf;
    let norm_c = (d.blocks.iter().map(|b| inner(&b.c, &b.c)).sum::<f64>() + dot(&d.lp_c, &d.lp_c)).sqrt();
    let norm_d = two_norm(&d.free_d);
    let pinf_target = 0.1 * settings.tol_eq;
    let gap_target = 0.1 * settings.tol_gap;

    let mut status = SolveStatus::IterationLimit;
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut stalls = 0;
    let mut last_good: Option<Snapshot> = None;
    // best (smallest gap) iterate that is primal and dual feasible to tolerance
    let mut best: Option<(f64, Snapshot)> = None;
    let mut best_iter = 0;

    for iter in 0..=settings.max_iter {
        iterations = iter;
        // residuals
        let ax = apply_a(&d, &it.x, &it.xl, &it.v);
        let rp: Vec<f64> = d.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let aty_blocks: Vec<Mat<f64>> = d.blocks.iter().map(|b| apply_at_block(b, &it.y)).collect();
        let rd: Vec<Mat<f64>> = d
            .blocks
            .iter()
            .zip(&aty_blocks)
            .zip(&it.z)
            .map(|((b, aty), z)| Mat::from_fn(b.n, b.n, |i, j| b.c[(i, j)] - aty[(i, j)] - z[(i, j)]))
            .collect();
        let aty_lp = apply_at_cols(&d.lp_cols, &it.y);
        let rdl: Vec<f64> = (0..d.lp_c.len()).map(|k| d.lp_c[k] - aty_lp[k] - it.zl[k]).collect();
        let fty = apply_at_cols(&d.free_cols, &it.y);
        let rf: Vec<f64> = d.free_d.iter().zip(&fty).map(|(a, b)| a - b).collect();

        let pobj = d.blocks.iter().zip(&it.x).map(|(b, x)| inner(&b.c, x)).sum::<f64>()
            + dot(&d.lp_c, &it.xl)
            + dot(&d.free_d, &it.v);
        let dobj = dot(&d.b, &it.y);
        let xz = it.x.iter().zip(&it.z).map(|(x, z)| inner(x, z)).sum::<f64>() + dot(&it.xl, &it.zl);
        let mu = if nu > 0 { xz / nu as f64 } else { 0.0 };

        let pinf = inf_norm(&rp);
        let rd_norm = (rd.iter().map(|r| inner(r, r)).sum::<f64>() + dot(&rdl, &rdl)).sqrt();
        let dinf = (rd_norm / (1.0 + norm_c)).max(two_norm(&rf) / (1.0 + norm_d));
        gap = (pobj - dobj).abs().max(xz.max(0.0)) / (1.0 + pobj.abs() + dobj.abs());

        if !(pinf.is_finite() && dinf.is_finite() && gap.is_finite()) {
            status = SolveStatus::NumericalTrouble;
            break;
        }
        log::trace!("iter {iter:3} pobj {pobj:+.6e} dobj {dobj:+.6e} pinf {pinf:.2e} dinf {dinf:.2e} gap {gap:.2e}");
        let snap = (it.x.clone(), it.xl.clone(), it.v.clone(), it.y.clone());
        if pinf <= settings.tol_eq && dinf <= DUAL_TOL && best.as_ref().is_none_or(|(g, _)| gap < *g) {
            if best.as_ref().is_none_or(|(g, _)| gap < BEST_PROGRESS * g) {
                best_iter = iter;
            }
            best = Some((gap, snap.clone()));
        }
        // The best feasible gap has stopped improving.
        if best.is_some() && iter - best_iter > BEST_PATIENCE {
            status = SolveStatus::NumericalTrouble;
            break;
        }
        last_good = Some(snap);
        // Feasibility lost after it was reached: the Schur system has become too ill-conditioned.
        if best.is_some() && pinf > 1e3 * settings.tol_eq {
            status = SolveStatus::NumericalTrouble;
            break;
        }

        if pinf <= pinf_target && dinf <= DUAL_TOL && gap <= gap_target {
            status = SolveStatus::Optimal;
            break;
        }

        // Farkas-type certificates from the scaled iterates
        if dobj > 0.0 {
            let dual_ray = ((d.blocks.iter().zip(&aty_blocks).zip(&it.z))
                .map(|((_, a), z)| {
                    let s = a + z;
                    inner(&s, &s)
                })
                .sum::<f64>()
                + aty_lp.iter().zip(&it.zl).map(|(a, z)| (a + z) * (a + z)).sum::<f64>())
            .sqrt()
            .max(two_norm(&fty));
            if dual_ray / dobj <= INFEASIBILITY_TOL {
                status = SolveStatus::Infeasible;
                break;
            }
        }
        if pobj < 0.0 && inf_norm(&ax) / -pobj <= INFEASIBILITY_TOL {
            status = SolveStatus::Unbounded;
            break;
        }
        if iter == settings.max_iter {
            break;
        }

        // Nesterov-Todd scaling per block
        let Some(scal) = it.x.iter().zip(&it.z).map(|(x, z)| nt_scaling(x, z)).collect::<Option<Vec<_>>>() else {
            status = SolveStatus::NumericalTrouble;
            break;
        };
        let mut k = vec![0.0; nk * nk];
        for (blk, sc) in d.blocks.iter().zip(&scal) {
            add_schur_block(&mut k, nk, blk, &sc.w);
        }
        for (col, (&xk, &zk)) in d.lp_cols.iter().zip(it.xl.iter().zip(&it.zl)) {
            let w = xk / zk;
            for &(i, a) in col {
                for &(j, b) in col {
                    k[i * nk + j] += w * a * b;
                }
            }
        }
        for (c, col) in d.free_cols.iter().enumerate() {
            for &(i, a) in col {
                k[i * nk + d.m + c] += a;
                k[(d.m + c) * nk + i] += a;
            }
        }
        // symmetric diagonal equilibration of the Schur matrix
        let scale: Vec<f64> =
            (0..nk).map(|i| k[i * nk + i].abs()).map(|v| if v > 0.0 && v.is_finite() { 1.0 / v.sqrt() } else { 1.0 }).collect();
        let k = Mat::from_fn(nk, nk, |i, j| scale[i] * k[i * nk + j] * scale[j]);
        let factor = if nf == 0 { k.llt(Side::Lower).ok().map(Factor::Llt) } else { None }
            .unwrap_or_else(|| Factor::Lu(k.partial_piv_lu()));
        let solve_k = |rhs: &[f64]| -> Vec<f64> {
            let mut sol = Mat::from_fn(nk, 1, |i, _| rhs[i] * scale[i]);
            factor.solve_in_place(sol.as_mut());
            // one step of iterative refinement
            let ks = &k * &sol;
            let mut res = Mat::from_fn(nk, 1, |i, _| rhs[i] * scale[i] - ks[(i, 0)]);
            factor.solve_in_place(res.as_mut());
            (0..nk).map(|i| (sol[(i, 0)] + res[(i, 0)]) * scale[i]).collect()
        };

        let wrdw: Vec<Mat<f64>> = scal.iter().zip(&rd).map(|(sc, r)| sym(&(&(&sc.w * r) * &sc.w))).collect();

        let direction = |sigma_mu: f64, corr: Option<&Direction>| -> Option<Direction> {
            // dX + W dZ W = G Rs G' with Rs the scaled complementarity residual
            let mut ts = Vec::with_capacity(d.blocks.len());
            for (b, sc) in scal.iter().enumerate() {
                let n = d.blocks[b].n;
                let second = corr.map(|c| {
                    let dxs = &(&sc.ginv * &c.dx[b]) * sc.ginv.transpose();
                    let dzs = &(sc.g.transpose() * &c.dz[b]) * &sc.g;
                    let p = &dxs * &dzs;
                    Mat::from_fn(n, n, |i, j| p[(i, j)] + p[(j, i)])
                });
                let rs = Mat::from_fn(n, n, |i, j| {
                    let mut r = second.as_ref().map_or(0.0, |s| -s[(i, j)]);
                    if i == j {
                        r += 2.0 * sigma_mu - 2.0 * sc.lam[i] * sc.lam[i];
                    }
                    r / (sc.lam[i] + sc.lam[j])
                });
                let mut t = sym(&(&(&sc.g * &rs) * sc.g.transpose()));
                axpy(&mut t, -1.0, &wrdw[b]);
                ts.push(t);
            }
            let tl: Vec<f64> = (0..it.xl.len())
                .map(|k| {
                    let second = corr.map_or(0.0, |c| c.dxl[k] * c.dzl[k]);
                    (sigma_mu - it.xl[k] * it.zl[k] - second) / it.zl[k] - it.xl[k] * rdl[k] / it.zl[k]
                })
                .collect();
            let mut rhs = vec![0.0; nk];
            let at = apply_a(&d, &ts, &tl, &vec![0.0; nf]);
            for i in 0..d.m {
                rhs[i] = rp[i] - at[i];
            }
            rhs[d.m..].copy_from_slice(&rf);
            let sol = solve_k(&rhs);
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let mut dy = sol[..d.m].to_vec();
            let mut dv = sol[d.m..].to_vec();
            let mut dx = Vec::with_capacity(d.blocks.len());
            let mut dz = Vec::with_capacity(d.blocks.len());
            for (b, blk) in d.blocks.iter().enumerate() {
                let ady = apply_at_block(blk, &dy);
                dz.push(Mat::from_fn(blk.n, blk.n, |i, j| rd[b][(i, j)] - ady[(i, j)]));
                let mut dxb = ts[b].clone();
                axpy(&mut dxb, 1.0, &sym(&(&(&scal[b].w * &ady) * &scal[b].w)));
                dx.push(dxb);
            }
            let ady_l = apply_at_cols(&d.lp_cols, &dy);
            let mut dzl: Vec<f64> = (0..rdl.len()).map(|k| rdl[k] - ady_l[k]).collect();
            let mut dxl: Vec<f64> = (0..tl.len()).map(|k| tl[k] + it.xl[k] * ady_l[k] / it.zl[k]).collect();

            // Refine the whole direction against the primal residual it actually produces.
            let mut err = primal_mismatch(&d, &dx, &dxl, &dv, &rp);
            for _ in 0..2 {
                let e0 = inf_norm(&err);
                if e0 <= 1e-15 {
                    break;
                }
                let fty = apply_at_cols(&d.free_cols, &dy);
                let mut r = err.clone();
                r.extend(rf.iter().zip(&fty).map(|(a, b)| a - b));
                let w = solve_k(&r);
                if w.iter().any(|v| !v.is_finite()) {
                    break;
                }
                let (wy, wv) = w.split_at(d.m);
                let mut cand_dx = dx.clone();
                let mut cand_dz = dz.clone();
                for (b, blk) in d.blocks.iter().enumerate() {
                    let aw = apply_at_block(blk, wy);
                    axpy(&mut cand_dz[b], -1.0, &aw);
                    axpy(&mut cand_dx[b], 1.0, &sym(&(&(&scal[b].w * &aw) * &scal[b].w)));
                }
                let aw_l = apply_at_cols(&d.lp_cols, wy);
                let cand_dxl: Vec<f64> = (0..dxl.len()).map(|k| dxl[k] + it.xl[k] * aw_l[k] / it.zl[k]).collect();
                let cand_dv: Vec<f64> = dv.iter().zip(wv).map(|(a, b)| a + b).collect();
                let cand_err = primal_mismatch(&d, &cand_dx, &cand_dxl, &cand_dv, &rp);
                if inf_norm(&cand_err) >= e0 {
                    break;
                }
                for (y, w) in dy.iter_mut().zip(wy) {
                    *y += w;
                }
                for k in 0..dzl.len() {
                    dzl[k] -= aw_l[k];
                }
                dx = cand_dx;
                dz = cand_dz;
                dxl = cand_dxl;
                dv = cand_dv;
                err = cand_err;
            }
            log::trace!("  direction consistency {:.2e} |dy| {:.2e}", inf_norm(&err), inf_norm(&dy));
            // Whatever mismatch survives is removed by projecting the primal step.
            if let Some(proj) = &projector {
                if inf_norm(&err) > 0.0 {
                    proj.correct(&d, &err, &mut dx, &mut dxl, &mut dv);
                }
            }
            Some(Direction { dy, dv, dx, dz, dxl, dzl })
        };

        let steps = |dir: &Direction| -> Option<(f64, f64)> {
            let mut ap = max_step_lp(&it.xl, &dir.dxl);
            let mut ad = max_step_lp(&it.zl, &dir.dzl);
            for b in 0..d.blocks.len() {
                ap = ap.min(max_step_psd(&it.x[b], &dir.dx[b])?);
                ad = ad.min(max_step_psd(&it.z[b], &dir.dz[b])?);
            }
            Some((ap, ad))
        };

        let Some(pred) = direction(0.0, None) else {
            status = SolveStatus::NumericalTrouble;
            break;
        };
        let Some((ap, ad)) = steps(&pred) else {
            status = SolveStatus::NumericalTrouble;
            break;
        };
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let mut xz_aff = 0.0;
        for b in 0..d.blocks.len() {
            let mut xa = it.x[b].clone();
            axpy(&mut xa, ap, &pred.dx[b]);
            let mut za = it.z[b].clone();
            axpy(&mut za, ad, &pred.dz[b]);
            xz_aff += inner(&xa, &za);
        }
        for k in 0..it.xl.len() {
            xz_aff += (it.xl[k] + ap * pred.dxl[k]) * (it.zl[k] + ad * pred.dzl[k]);
        }
        let mu_aff = if nu > 0 { xz_aff / nu as f64 } else { 0.0 };
        let sigma = if mu > 0.0 { (mu_aff / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };

        let Some(corr) = direction(sigma * mu, Some(&pred)) else {
            status = SolveStatus::NumericalTrouble;
            break;
        };
        let Some((ap_max, ad_max)) = steps(&corr) else {
            status = SolveStatus::NumericalTrouble;
            break;
        };
        let gamma = 0.9 + 0.09 * ap_max.min(ad_max).min(1.0);
        let ap = (gamma * ap_max).min(1.0);
        let ad = (gamma * ad_max).min(1.0);
        log::trace!("  steps primal {ap:.3} dual {ad:.3} sigma {sigma:.2e}");

        for b in 0..d.blocks.len() {
            axpy(&mut it.x[b], ap, &corr.dx[b]);
            axpy(&mut it.z[b], ad, &corr.dz[b]);
            it.x[b] = sym(&it.x[b]);
            it.z[b] = sym(&it.z[b]);
        }
        for k in 0..it.xl.len() {
            it.xl[k] += ap * corr.dxl[k];
            it.zl[k] += ad * corr.dzl[k];
        }
        for (v, dv) in it.v.iter_mut().zip(&corr.dv) {
            *v += ap * dv;
        }
        for (y, dy) in it.y.iter_mut().zip(&corr.dy) {
            *y += ad * dy;
        }

        if ap < STALL_STEP && ad < STALL_STEP {
            stalls += 1;
            if stalls >= 3 {
                status = SolveStatus::NumericalTrouble;
                break;
            }
        } else {
            stalls = 0;
        }
    }

    let (xs, xl, v, y) = match (&status, best, last_good) {
        (SolveStatus::Optimal, ..) => (it.x, it.xl, it.v, it.y),
        // Accept a stalled run whose best feasible iterate has a small gap.
        (_, Some((g, saved)), _) if g <= settings.tol_gap_stall => {
            gap = g;
            status = SolveStatus::Optimal;
            saved
        }
        (SolveStatus::NumericalTrouble, _, Some(saved)) => saved,
        _ => (it.x, it.xl, it.v, it.y),
    };

    let dual: Vec<f64> = y.iter().zip(&d.row_scale).map(|(y, s)| y * s).collect();
    let dual_objective = dot(&d.b, &y);
    let blocks = xs
        .iter()
        .map(|x| DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)]))
        .collect();
    RawSolution { status, free: v, nonneg: xl, blocks, dual, dual_objective, relative_gap: gap, iterations }
}
