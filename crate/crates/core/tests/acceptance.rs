//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbarrier_core::certify::{
    bound_formula, certify_at, compute_barrier, probability_bound, AlphaGrid, BoundCase, BoundInputs, Certificate,
};
use sbarrier_core::config::{parse_config, ProblemConfig};
use sbarrier_core::mc::{estimate_failure_probability, generator_check, SimulationConfig};
use sbarrier_core::model::SafetyProblem;
use sbarrier_core::sdp::{self, ConicProblem, Entry, SolveStatus, SolverSettings};
use sbarrier_core::sos::{sampled_soundness, Degrees, SoundnessTolerances};
use sbarrier_core::synth::{linear_gain_search, synthesize, SynthesisStatus};

const REFERENCE_BOUNDS: [f64; 4] = [0.860, 0.919, 0.912, 0.949];
const REFERENCE_C: [f64; 4] = [2.1821, 0.5251, 0.6396, 1.1488];

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(name: &str) -> ProblemConfig {
    let text = std::fs::read_to_string(root().join("configs").join(name)).expect("config file");
    parse_config(&text).expect("config parses")
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: u32, ok: bool, elapsed: Duration, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("criterion {id:>2}: {} ({:.1} s) {detail}", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    }
}

/// Independent closed forms for the three bound cases.
fn oracle_bound(alpha: f64, beta: f64, level: f64, t: f64) -> f64 {
    let raw = if alpha == 0.0 {
        level + beta * t
    } else if beta < alpha {
        1.0 - (1.0 - level) / (beta * t).exp()
    } else if beta > alpha {
        level * (-beta * t).exp() + (beta / alpha) * (1.0 - (-beta * t).exp())
    } else {
        let a = 1.0 - (1.0 - level) / (beta * t).exp();
        let b = level * (-beta * t).exp() + (1.0 - (-beta * t).exp());
        a.min(b)
    };
    raw.clamp(0.0, 1.0)
}

fn criterion_1() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20_000 {
        let alpha = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..5.0) };
        let beta = rng.random_range(0.0..5.0);
        let level = rng.random_range(0.0..1.0);
        let t = rng.random_range(0.1..3.0);
        let got = probability_bound(&BoundInputs { alpha, beta, level, horizon: t }).unwrap().value;
        worst = worst.max((got - oracle_bound(alpha, beta, level, t)).abs());
    }
    // Across the seam the two formulas agree, so the bound is continuous there.
    let mut seam: f64 = 0.0;
    for &(alpha, level, t) in &[(0.5, 0.1, 1.0), (1.3, 0.4, 2.0), (2.0, 0.9, 0.5)] {
        let at = |beta: f64| probability_bound(&BoundInputs { alpha, beta, level, horizon: t }).unwrap();
        let lo = at(alpha * (1.0 - 1e-9));
        let mid = at(alpha);
        let hi = at(alpha * (1.0 + 1e-9));
        let inputs = BoundInputs { alpha, beta: alpha, level, horizon: t };
        let both = bound_formula(BoundCase::BetaOverAlphaLe1, &inputs).min(bound_formula(BoundCase::BetaOverAlphaGe1, &inputs));
        seam = seam.max((lo.value - mid.value).abs()).max((hi.value - mid.value).abs()).max((mid.raw - both).abs());
        if lo.case != BoundCase::BetaOverAlphaLe1 || hi.case != BoundCase::BetaOverAlphaGe1 {
            seam = f64::INFINITY;
        }
    }
    let invalid = probability_bound(&BoundInputs { alpha: 1.0, beta: 0.5, level: 1.0, horizon: 1.0 }).is_err();
    (worst <= 1e-12 && seam <= 1e-8 && invalid, format!("max |bound - oracle| {worst:.1e}, seam jump {seam:.1e}"))
}

fn mc_config(cfg: &ProblemConfig, draws: usize) -> SimulationConfig {
    SimulationConfig { draws, ..cfg.simulation }
}

struct Soundness {
    ok: bool,
    lines: Vec<String>,
    /// Verified certificates of the scalar system, with the α = 0 bound, per sigma.
    scalar: Vec<(f64, Certificate, Option<f64>)>,
    oscillator: Vec<(f64, Certificate)>,
}

fn sweep(cfg: &ProblemConfig, grid: &AlphaGrid, sigmas: &[f64], lines: &mut Vec<String>, ok: &mut bool) -> Vec<(f64, Certificate, Option<f64>)> {
    let mut out = Vec::new();
    for &sigma in sigmas {
        let problem = cfg.problem_at(sigma);
        let u = problem.system.zero_controller();
        match compute_barrier(&problem, &u, grid, &cfg.options) {
            Ok(search) => {
                let a0 = search.points.iter().find(|p| p.alpha == 0.0).and_then(|p| p.bound);
                let x0 = problem.x0.clone().unwrap();
                let est = estimate_failure_probability(&problem, &u, &x0, &mc_config(cfg, 5000)).unwrap();
                let pass = search.best.bound >= est.ci_low;
                *ok &= pass;
                lines.push(format!(
                    "sigma {sigma}: bound {:.4} (alpha {}) vs MC {:.4} [{:.4}, {:.4}]",
                    search.best.bound, search.best.alpha, est.p_hat, est.ci_low, est.ci_high
                ));
                out.push((sigma, search.best, a0));
            }
            Err(e) => {
                *ok = false;
                lines.push(format!("sigma {sigma}: {e}"));
            }
        }
    }
    out
}

fn criterion_2(scalar: &ProblemConfig, oscillator: &ProblemConfig) -> Soundness {
    let mut ok = true;
    let mut lines = Vec::new();
    let sigmas = [0.5, 1.0, 1.5];
    let scalar_grid = scalar.alpha.grid_for(0);
    let scalar_certs = sweep(scalar, &scalar_grid, &sigmas, &mut lines, &mut ok);
    let grid = AlphaGrid { lower: 0.5, upper: 2.5, step: 0.25 };
    let oscillator_certs = sweep(oscillator, &grid, &sigmas, &mut lines, &mut ok)
        .into_iter()
        .map(|(s, c, _)| (s, c))
        .collect();
    Soundness { ok, lines, scalar: scalar_certs, oscillator: oscillator_certs }
}

fn criterion_3(s: &Soundness) -> (bool, String) {
    let mut ok = s.scalar.len() == 3;
    let mut parts = Vec::new();
    for (sigma, cert, a0) in &s.scalar {
        let a0 = a0.unwrap_or(1.0);
        ok &= cert.bound <= a0;
        if *sigma == 1.5 {
            ok &= a0 - cert.bound >= 0.02;
        }
        parts.push(format!("sigma {sigma}: {:.4} vs alpha=0 {:.4}", cert.bound, a0));
    }
    (ok, parts.join("; "))
}

fn criterion_4(cfg: &ProblemConfig) -> (bool, String, Vec<Certificate>) {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut certs = Vec::new();
    for (i, &sigma) in cfg.sigma_sweep.iter().enumerate() {
        let problem = cfg.problem_at(sigma);
        let grid = cfg.alpha.grid_for(i);
        match certify_at(&problem, &problem.system.zero_controller(), grid.lower, &cfg.options) {
            Ok(c) => {
                ok &= c.bound <= 1.0 && (c.bound - REFERENCE_BOUNDS[i]).abs() <= 0.10;
                parts.push(format!("sigma {sigma}: {:.4} (ref {:.3})", c.bound, REFERENCE_BOUNDS[i]));
                certs.push(c);
            }
            Err(e) => {
                ok = false;
                parts.push(format!("sigma {sigma}: {e:?}"));
            }
        }
    }
    (ok, parts.join("; "), certs)
}

fn criterion_5(cfg: &ProblemConfig) -> (bool, String, Vec<Certificate>) {
    let settings = cfg.synthesis.as_ref().expect("synthesis section");
    let mut ok = true;
    let mut parts = Vec::new();
    let mut certs = Vec::new();
    let mut c_within = 0;
    for (i, &sigma) in cfg.sigma_sweep.iter().enumerate() {
        let sc = settings.for_index(i);
        let problem = cfg.problem_at(sigma);
        match synthesize(&problem, cfg.options.degrees.controller, &sc, &cfg.options) {
            Ok(r) => {
                let converged = r.status == SynthesisStatus::Converged;
                let bound_ok = r.certificate.bound <= 0.12;
                let ratio = r.c_star / REFERENCE_C[i];
                if (1.0 / 3.0..=3.0).contains(&ratio) {
                    c_within += 1;
                }
                ok &= converged && bound_ok;
                parts.push(format!(
                    "sigma {sigma}: {:?} bound {:.4} c* {:.4} (ref {:.4})",
                    r.status, r.certificate.bound, r.c_star, REFERENCE_C[i]
                ));
                certs.push(r.certificate);
            }
            Err(e) => {
                ok = false;
                parts.push(format!("sigma {sigma}: {e}"));
            }
        }
    }
    parts.push(format!("c* within factor 3: {c_within}/4"));
    (ok, parts.join("; "), certs)
}

fn criterion_6(cfg: &ProblemConfig) -> (bool, String, Vec<Certificate>) {
    let problem = cfg.problem_at(1.5);
    let grid = cfg.alpha.grid_for(0);
    let mut ks = Vec::new();
    let mut certs = Vec::new();
    let mut parts = Vec::new();
    for nb in [4, 8, 12, 16] {
        let mut options = cfg.options;
        options.degrees = Degrees { barrier: nb, multiplier: None, controller: options.degrees.controller };
        match linear_gain_search(&problem, 0.30, &grid, &options, 0.01, 64.0) {
            Ok(g) => {
                parts.push(format!("n_B {nb}: k* {:.4} (bound {:.4})", g.k_star, g.certificate.bound));
                ks.push(g.k_star);
                certs.push(g.certificate);
            }
            Err(e) => {
                parts.push(format!("n_B {nb}: {e}"));
                ks.push(f64::NAN);
            }
        }
    }
    let monotone = ks.windows(2).all(|w| w[1] <= w[0]);
    let close = (ks[2] - ks[3]).abs() <= 0.10 * ks[3].abs().max(ks[2].abs());
    (monotone && close, parts.join("; "), certs)
}

fn random_interior_points(problem: &SafetyProblem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let bx = problem.sampling_box();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let x: Vec<f64> = bx.lower.iter().zip(&bx.upper).map(|(l, u)| rng.random_range(*l..*u)).collect();
        if problem.state_space.contains(&x) && !problem.unsafe_set.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn criterion_7(systems: &[(&SafetyProblem, &Certificate)]) -> (bool, String) {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, (problem, cert)) in systems.iter().enumerate() {
        let b = cert.barrier_polynomial().unwrap();
        let u = cert.controller_polynomials().unwrap();
        for (j, x) in random_interior_points(problem, 10, 70 + k as u64).iter().enumerate() {
            let g = generator_check(problem, &b, &u, x, 1e-4, 100_000, 1000 * k as u64 + j as u64).unwrap();
            ok &= g.within(3.0);
            worst = worst.max(g.residual.abs() / g.std_error);
            count += 1;
        }
    }
    (ok, format!("{count} points, worst |residual| / SE {worst:.2}"))
}

fn criterion_8(all: &[(&SafetyProblem, &Certificate)]) -> (bool, String) {
    let mut failed = 0;
    for (problem, cert) in all {
        let b = cert.barrier_polynomial().unwrap();
        let u = cert.controller_polynomials().unwrap();
        let r = sampled_soundness(problem, &b, &u, cert.alpha, cert.beta, cert.gamma, 10_000, &SoundnessTolerances::default())
            .unwrap();
        if !r.passed {
            failed += 1;
        }
    }
    (failed == 0 && !all.is_empty(), format!("{} certificates, {failed} failed", all.len()))
}

fn tiny_sdps() -> Vec<(ConicProblem, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in [2usize, 3, 4] {
        // minimise <C, X> s.t. tr X = 1: the smallest eigenvalue of C
        let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let c = (&c + c.transpose()) * 0.5;
        let lambda = SymmetricEigen::new(c.clone()).eigenvalues.min();
        let mut p = ConicProblem::new();
        let b = p.add_block(n);
        p.add_row((0..n).map(|i| (Entry::psd(b, i, i), 1.0)).collect(), 1.0);
        for i in 0..n {
            for j in i..n {
                p.add_objective(Entry::psd(b, i, j), if i == j { c[(i, j)] } else { 2.0 * c[(i, j)] });
            }
        }
        out.push((p, lambda));
    }
    // minimise t s.t. t I - C PSD: the largest eigenvalue of C
    let c = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let mut p = ConicProblem::new();
    let t = p.add_free();
    let b = p.add_block(2);
    for i in 0..2 {
        for j in i..2 {
            let mut row = vec![(Entry::psd(b, i, j), 1.0)];
            if i == j {
                row.push((t, -1.0));
            }
            p.add_row(row, -c[(i, j)]);
        }
    }
    p.add_objective(t, 1.0);
    out.push((p, 3.0));
    out
}

fn criterion_9() -> (bool, String) {
    let settings = SolverSettings::default();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (p, expected) in tiny_sdps() {
        let s = sdp::solve(&p, &settings).unwrap();
        let r = sdp::check_point(&p, &s.free, &s.nonneg, &s.blocks);
        let obj = sdp::objective_value(&p, &s.free, &s.nonneg, &s.blocks);
        let err = (obj - expected).abs().max(r.equality_inf).max((-r.min_eigenvalue).max(0.0));
        ok &= s.status == SolveStatus::Optimal && err <= 1e-8;
        worst = worst.max(err);
    }
    (ok, format!("worst objective/residual error {worst:.1e}"))
}

fn criterion_10() -> (bool, String) {
    let bin = env!("CARGO_BIN_EXE_sbarrier");
    let config = root().join("configs/scalar_ou.toml");
    let dirs: Vec<PathBuf> = (0..2).map(|i| std::env::temp_dir().join(format!("sbarrier-determinism-{}-{i}", std::process::id()))).collect();
    let mut ok = true;
    for d in &dirs {
        let _ = std::fs::remove_dir_all(d);
        for cmd in ["verify", "simulate"] {
            let mut c = Command::new(bin);
            c.arg(cmd).arg(&config).arg("--out").arg(d).arg("--seed").arg("7");
            if cmd == "simulate" {
                c.arg("--certificate").arg(d.join("verify.json"));
            }
            ok &= c.output().map(|o| o.status.success()).unwrap_or(false);
        }
    }
    let files = ["verify.json", "verify.csv", "simulate.json", "simulate.csv"];
    let mut same = 0;
    for f in files {
        let a = std::fs::read(dirs[0].join(f));
        let b = std::fs::read(dirs[1].join(f));
        if matches!((&a, &b), (Ok(a), Ok(b)) if a == b) {
            same += 1;
        }
    }
    for d in &dirs {
        let _ = std::fs::remove_dir_all(d);
    }
    (ok && same == files.len(), format!("{same}/{} output files byte-identical", files.len()))
}

fn find(v: &[(f64, SafetyProblem)], s: f64) -> &SafetyProblem {
    v.iter().find(|(x, _)| *x == s).map(|(_, p)| p).unwrap()
}

fn main() {
    let mut report = Report { failed: 0 };
    let scalar = load("scalar_ou.toml");
    let oscillator = load("duffing.toml");

    let t = Instant::now();
    let (ok, detail) = criterion_1();
    let elapsed = t.elapsed();
    report.line(1, ok && elapsed < Duration::from_secs(1), elapsed, detail);

    let t = Instant::now();
    let soundness = criterion_2(&scalar, &oscillator);
    let elapsed = t.elapsed();
    report.line(2, soundness.ok && elapsed <= Duration::from_secs(900), elapsed, soundness.lines.join("; "));

    let (ok, detail) = criterion_3(&soundness);
    report.line(3, ok, Duration::ZERO, detail);

    let t = Instant::now();
    let (ok, detail, table) = criterion_4(&oscillator);
    report.line(4, ok, t.elapsed(), detail);

    let t = Instant::now();
    let (ok, detail, synthesized) = criterion_5(&oscillator);
    report.line(5, ok, t.elapsed(), detail);

    let t = Instant::now();
    let (ok, detail, gains) = criterion_6(&scalar);
    report.line(6, ok, t.elapsed(), detail);

    let scalar_problems: Vec<(f64, SafetyProblem)> = [0.5, 1.0, 1.5].iter().map(|&s| (s, scalar.problem_at(s))).collect();
    let oscillator_problems: Vec<(f64, SafetyProblem)> =
        [0.5, 1.0, 1.5].iter().chain(oscillator.sigma_sweep.iter()).map(|&s| (s, oscillator.problem_at(s))).collect();

    let t = Instant::now();
    let mut pairs: Vec<(&SafetyProblem, &Certificate)> = Vec::new();
    if let Some((s, c, _)) = soundness.scalar.last() {
        pairs.push((find(&scalar_problems, *s), c));
    }
    if let Some((s, c)) = soundness.oscillator.last() {
        pairs.push((find(&oscillator_problems, *s), c));
    }
    let (ok, detail) = criterion_7(&pairs);
    report.line(7, ok && pairs.len() == 2, t.elapsed(), detail);

    let t = Instant::now();
    let mut all: Vec<(&SafetyProblem, &Certificate)> = Vec::new();
    for (s, c, _) in &soundness.scalar {
        all.push((find(&scalar_problems, *s), c));
    }
    for (s, c) in &soundness.oscillator {
        all.push((find(&oscillator_problems, *s), c));
    }
    for (c, &s) in table.iter().zip(&oscillator.sigma_sweep) {
        all.push((find(&oscillator_problems, s), c));
    }
    for (c, &s) in synthesized.iter().zip(&oscillator.sigma_sweep) {
        all.push((find(&oscillator_problems, s), c));
    }
    for c in &gains {
        all.push((find(&scalar_problems, 1.5), c));
    }
    let (ok, detail) = criterion_8(&all);
    report.line(8, ok, t.elapsed(), detail);

    let t = Instant::now();
    let (ok, detail) = criterion_9();
    report.line(9, ok, t.elapsed(), detail);

    let t = Instant::now();
    let (ok, detail) = criterion_10();
    report.line(10, ok, t.elapsed(), detail);

    println!("acceptance: {} of 10 criteria passed", 10 - report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
