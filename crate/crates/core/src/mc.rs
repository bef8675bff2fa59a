//! Euler–Maruyama simulation of the stopped process and Monte Carlo failure estimates.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{generator, ModelError, SafetyProblem, SemialgebraicSet};
use crate::poly::{Polynomial, PolyError};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("invalid simulation settings: {0}")]
    InvalidConfig(String),
    #[error("initial point {0:?} lies outside the state space")]
    OutsideStateSpace(Vec<f64>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub horizon: f64,
    pub draws: usize,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(McError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.dt <= self.horizon) {
            return Err(McError::InvalidConfig(format!("dt {} must not exceed the horizon {}", self.dt, self.horizon)));
        }
        if self.draws == 0 {
            return Err(McError::InvalidConfig("draws must be at least 1".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt - 1e-9).ceil().max(1.0) as usize
    }
}

/// A concrete polynomial flattened for fast repeated evaluation.
#[derive(Debug, Clone)]
struct FlatPoly {
    terms: Vec<(Vec<(usize, i32)>, f64)>,
}

impl FlatPoly {
    fn new(p: &Polynomial) -> Self {
        let terms = p
            .concrete_terms()
            .into_iter()
            .map(|(m, c)| {
                let pows = m.exponents().iter().enumerate().filter(|(_, e)| **e > 0).map(|(i, e)| (i, *e as i32)).collect();
                (pows, c)
            })
            .collect();
        FlatPoly { terms }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(pows, c)| pows.iter().fold(*c, |acc, (i, e)| acc * x[*i].powi(*e))).sum()
    }
}

struct FlatSet {
    constraints: Vec<FlatPoly>,
}

impl FlatSet {
    fn new(set: &SemialgebraicSet) -> Self {
        FlatSet { constraints: set.constraints().iter().map(FlatPoly::new).collect() }
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.constraints.iter().all(|g| g.eval(x) >= 0.0)
    }

    fn interior_contains(&self, x: &[f64]) -> bool {
        self.constraints.iter().all(|g| g.eval(x) > 0.0)
    }
}

/// Closed-loop dynamics `dx = F(x) dt + sigma(x) dw` with the safety sets, ready to step.
pub struct Simulator {
    n: usize,
    drift: Vec<FlatPoly>,
    diffusion: Vec<Vec<FlatPoly>>,
    state_space: FlatSet,
    unsafe_set: FlatSet,
}

impl Simulator {
    pub fn new(problem: &SafetyProblem, u: &[Polynomial]) -> Result<Self, McError> {
        if u.iter().any(|p| !p.is_concrete()) {
            return Err(ModelError::NotConcrete("controller".into()).into());
        }
        let system = &problem.system;
        let drift = system.closed_loop_drift(u)?.iter().map(FlatPoly::new).collect();
        let diffusion = system.diffusion().iter().map(|row| row.iter().map(FlatPoly::new).collect()).collect();
        Ok(Simulator {
            n: system.state_dim(),
            drift,
            diffusion,
            state_space: FlatSet::new(&problem.state_space),
            unsafe_set: FlatSet::new(&problem.unsafe_set),
        })
    }

    /// One Euler–Maruyama step in place.
    fn step<R: rand::Rng>(&self, x: &mut [f64], dt: f64, rng: &mut R, xi: &mut [f64], dx: &mut [f64]) {
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let sq = dt.sqrt();
        for i in 0..self.n {
            let noise: f64 = self.diffusion[i].iter().zip(xi.iter()).map(|(s, w)| s.eval(x) * w).sum();
            dx[i] = self.drift[i].eval(x) * dt + noise * sq;
        }
        for (xi, d) in x.iter_mut().zip(dx.iter()) {
            *xi += d;
        }
    }

    fn noise_dim(&self) -> usize {
        self.diffusion.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    pub failed: bool,
    /// First time the path entered the unsafe set or left the interior of the state space.
    pub tau: Option<f64>,
}

/// Simulate one stopped path; failure means entering the unsafe set at a step boundary.
pub fn simulate_path<R: rand::Rng>(sim: &Simulator, x0: &[f64], cfg: &SimulationConfig, rng: &mut R) -> PathOutcome {
    let mut x = x0.to_vec();
    if sim.unsafe_set.contains(&x) {
        return PathOutcome { failed: true, tau: Some(0.0) };
    }
    if !sim.state_space.interior_contains(&x) {
        return PathOutcome { failed: false, tau: Some(0.0) };
    }
    let mut xi = vec![0.0; sim.noise_dim()];
    let mut dx = vec![0.0; sim.n];
    let steps = cfg.steps();
    for k in 1..=steps {
        let dt = if k == steps { cfg.horizon - cfg.dt * (steps - 1) as f64 } else { cfg.dt };
        sim.step(&mut x, dt, rng, &mut xi, &mut dx);
        let t = (k as f64 * cfg.dt).min(cfg.horizon);
        if x.iter().any(|v| !v.is_finite()) {
            return PathOutcome { failed: false, tau: Some(t) };
        }
        if sim.unsafe_set.contains(&x) {
            return PathOutcome { failed: true, tau: Some(t) };
        }
        if !sim.state_space.interior_contains(&x) {
            return PathOutcome { failed: false, tau: Some(t) };
        }
    }
    PathOutcome { failed: false, tau: None }
}

/// Deterministic generator for path `index` of a run seeded with `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// 95% Wilson score interval for `failures` out of `draws`.
pub fn wilson_interval(failures: usize, draws: usize) -> (f64, f64) {
    let n = draws as f64;
    let p = failures as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0).min(p), (center + half).min(1.0).max(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauStats {
    /// Paths stopped before the horizon.
    pub stopped: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub failures: usize,
    pub draws: usize,
    pub tau_stats: TauStats,
}

/// Failure probability of the stopped process started at `x0` over `cfg.horizon`.
pub fn estimate_failure_probability(
    problem: &SafetyProblem,
    u: &[Polynomial],
    x0: &[f64],
    cfg: &SimulationConfig,
) -> Result<McEstimate, McError> {
    cfg.validate()?;
    if x0.len() != problem.dim() {
        return Err(PolyError::DimensionMismatch { expected: problem.dim(), found: x0.len() }.into());
    }
    if !problem.state_space.contains(x0) {
        return Err(McError::OutsideStateSpace(x0.to_vec()));
    }
    let sim = Simulator::new(problem, u)?;
    let outcomes: Vec<PathOutcome> = (0..cfg.draws)
        .into_par_iter()
        .map(|i| simulate_path(&sim, x0, cfg, &mut path_rng(cfg.seed, i as u64)))
        .collect();
    let failures = outcomes.iter().filter(|o| o.failed).count();
    let taus: Vec<f64> = outcomes.iter().filter_map(|o| o.tau).collect();
    let tau_stats = TauStats {
        stopped: taus.len(),
        mean: (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64),
        min: taus.iter().copied().reduce(f64::min),
        max: taus.iter().copied().reduce(f64::max),
    };
    let (ci_low, ci_high) = wilson_interval(failures, cfg.draws);
    Ok(McEstimate { p_hat: failures as f64 / cfg.draws as f64, ci_low, ci_high, failures, draws: cfg.draws, tau_stats })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheck {
    /// `A B(x)` from the symbolic generator.
    pub exact: f64,
    /// Monte Carlo estimate of `(E[B(x_Δ)] - B(x)) / Δ`.
    pub estimate: f64,
    pub std_error: f64,
    /// `estimate - exact`.
    pub residual: f64,
}

impl GeneratorCheck {
    pub fn within(&self, k: f64) -> bool {
        self.residual.abs() <= k * self.std_error
    }
}

/// Compare the symbolic generator of `b` at `x` with a one-step simulation over `delta`.
pub fn generator_check(
    problem: &SafetyProblem,
    b: &Polynomial,
    u: &[Polynomial],
    x: &[f64],
    delta: f64,
    draws: usize,
    seed: u64,
) -> Result<GeneratorCheck, McError> {
    if !(delta > 0.0 && delta.is_finite()) || draws < 2 {
        return Err(McError::InvalidConfig(format!("need delta > 0 and at least 2 draws, got {delta}, {draws}")));
    }
    if !b.is_concrete() {
        return Err(ModelError::NotConcrete("barrier".into()).into());
    }
    let exact = generator(b, &problem.system, u)?.eval(x)?;
    let sim = Simulator::new(problem, u)?;
    let fb = FlatPoly::new(b);
    let b0 = fb.eval(x);
    let samples: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let mut y = x.to_vec();
            let mut xi = vec![0.0; sim.noise_dim()];
            let mut dx = vec![0.0; sim.n];
            sim.step(&mut y, delta, &mut rng, &mut xi, &mut dx);
            (fb.eval(&y) - b0) / delta
        })
        .collect();
    let n = draws as f64;
    let estimate = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - estimate).powi(2)).sum::<f64>() / (n - 1.0);
    let std_error = (var / n).sqrt();
    Ok(GeneratorCheck { exact, estimate, std_error, residual: estimate - exact })
}

/// One row of the σ-sweep table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bound: Option<f64>,
}

/// CSV with header `sigma,p_hat,ci_low,ci_high,bound`; a missing bound is left empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sigma,p_hat,ci_low,ci_high,bound\n");
    for r in rows {
        let bound = r.bound.map(|b| format!("{b}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.sigma, r.p_hat, r.ci_low, r.ci_high, bound));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_zero_of_hundred() {
        let (lo, hi) = wilson_interval(0, 100);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.0370).abs() < 5e-5, "{hi}");
    }

    #[test]
    fn wilson_single_failure() {
        let (lo, hi) = wilson_interval(1, 1);
        assert!((0.0..=1.0).contains(&lo) && hi == 1.0);
    }
}
