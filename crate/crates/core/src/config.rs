//! TOML problem descriptions: parsing, line-anchored diagnostics and validation.

use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::certify::{AlphaGrid, CertifyOptions};
use crate::mc::SimulationConfig;
use crate::model::{SafetyProblem, SemialgebraicSet, StochasticSystem};
use crate::poly::{parse_polynomial, Polynomial};
use crate::sdp::SolverSettings;
use crate::sos::{Degrees, ProgramOptions, SoundnessTolerances, SOUNDNESS_SAMPLES};
use crate::synth::SynthesisConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: RawSystem,
    sets: RawSets,
    problem: RawProblem,
    degrees: RawDegrees,
    alpha: Option<RawAlpha>,
    synthesis: Option<RawSynthesis>,
    mc: Option<RawMc>,
    solver: Option<RawSolver>,
    program: Option<RawProgram>,
    soundness: Option<RawSoundness>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    n: Spanned<usize>,
    m: Spanned<usize>,
    k: Spanned<usize>,
    f: Vec<Spanned<String>>,
    g: Spanned<Vec<Vec<Spanned<String>>>>,
    sigma: Spanned<Vec<Vec<Spanned<String>>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSets {
    state: Vec<Spanned<String>>,
    initial: Vec<Spanned<String>>,
    #[serde(rename = "unsafe")]
    unsafe_set: Vec<Spanned<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    horizon: Spanned<f64>,
    x0: Option<Spanned<Vec<f64>>>,
    gamma: Option<Spanned<f64>>,
    sigma_sweep: Spanned<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDegrees {
    barrier: Spanned<u32>,
    controller: Option<Spanned<u32>>,
    multiplier: Option<Spanned<u32>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlpha {
    lower: Option<Spanned<f64>>,
    upper: Option<Spanned<f64>>,
    step: Option<Spanned<f64>>,
    fixed: Option<Spanned<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthesis {
    p_goal: Spanned<f64>,
    epsilon: Spanned<f64>,
    alpha: Spanned<Vec<f64>>,
    a_inc: Option<f64>,
    a_dec: Option<f64>,
    max_iters: Option<usize>,
    c_floor: Option<f64>,
    elastic_penalty: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    dt: Option<f64>,
    draws: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tol_eq: Option<f64>,
    tol_psd: Option<f64>,
    tol_gap: Option<f64>,
    tol_gap_stall: Option<f64>,
    max_iter: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProgram {
    margin: Option<f64>,
    objective_weight: Option<f64>,
    rescale: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSoundness {
    samples: Option<usize>,
    value: Option<f64>,
    generator: Option<f64>,
}

/// How `verify` chooses `α` for each sweep entry.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaChoice {
    Grid(AlphaGrid),
    /// One fixed `α` per entry of the sigma sweep.
    PerSigma(Vec<f64>),
}

impl AlphaChoice {
    pub fn grid_for(&self, index: usize) -> AlphaGrid {
        match self {
            AlphaChoice::Grid(g) => *g,
            AlphaChoice::PerSigma(v) => AlphaGrid::fixed(v[index]),
        }
    }
}

/// Synthesis settings with one fixed `α` per sweep entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSettings {
    pub base: SynthesisConfig,
    pub alphas: Vec<f64>,
}

impl SynthesisSettings {
    pub fn for_index(&self, index: usize) -> SynthesisConfig {
        SynthesisConfig { alpha: self.alphas[index], ..self.base }
    }
}

/// A validated problem description.
#[derive(Debug, Clone)]
pub struct ProblemConfig {
    /// The problem at unit diffusion scale; the sweep multiplies `sigma` by each entry.
    pub problem: SafetyProblem,
    pub sigma_sweep: Vec<f64>,
    pub options: CertifyOptions,
    pub alpha: AlphaChoice,
    pub synthesis: Option<SynthesisSettings>,
    pub simulation: SimulationConfig,
}

impl ProblemConfig {
    pub fn problem_at(&self, sigma: f64) -> SafetyProblem {
        self.problem.with_diffusion_scale(sigma)
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn err(&self, span: std::ops::Range<usize>, message: impl Into<String>) -> ConfigError {
        ConfigError::Validation { line: line_col(self.text, span.start).0, message: message.into() }
    }

    fn poly(&self, s: &Spanned<String>, n: usize, what: &str) -> Result<Polynomial, ConfigError> {
        parse_polynomial(s.get_ref(), n).map_err(|e| self.err(s.span(), format!("{what}: {e}")))
    }

    fn polys(&self, v: &[Spanned<String>], n: usize, what: &str) -> Result<Vec<Polynomial>, ConfigError> {
        v.iter().map(|s| self.poly(s, n, what)).collect()
    }

    fn matrix(
        &self,
        m: &Spanned<Vec<Vec<Spanned<String>>>>,
        rows: usize,
        cols: usize,
        n: usize,
        what: &str,
    ) -> Result<Vec<Vec<Polynomial>>, ConfigError> {
        let bad = m.get_ref().len() != rows || m.get_ref().iter().any(|r| r.len() != cols);
        if bad {
            return Err(self.err(m.span(), format!("{what} must be a {rows}x{cols} array of polynomials")));
        }
        m.get_ref().iter().map(|r| self.polys(r, n, what)).collect()
    }

    fn set(&self, v: &[Spanned<String>], n: usize, what: &str) -> Result<SemialgebraicSet, ConfigError> {
        SemialgebraicSet::new(self.polys(v, n, what)?).map_err(|e| ConfigError::Invalid(format!("{what}: {e}")))
    }
}

fn positive(ctx: &Ctx, v: &Spanned<f64>, what: &str) -> Result<f64, ConfigError> {
    let x = *v.get_ref();
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(ctx.err(v.span(), format!("{what} must be positive and finite, got {x}")))
    }
}

/// Parse and validate a TOML problem description.
pub fn parse_config(text: &str) -> Result<ProblemConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    })?;
    let ctx = Ctx { text };
    let sys = &raw.system;
    let n = *sys.n.get_ref();
    let m = *sys.m.get_ref();
    let k = *sys.k.get_ref();
    if n == 0 {
        return Err(ctx.err(sys.n.span(), "n must be at least 1"));
    }
    if sys.f.len() != n {
        let span = sys.f.first().map_or(sys.n.span(), |s| s.span());
        return Err(ctx.err(span, format!("f must list {n} polynomials, got {}", sys.f.len())));
    }
    let f = ctx.polys(&sys.f, n, "f")?;
    let g = ctx.matrix(&sys.g, n, k, n, "g")?;
    let sigma = ctx.matrix(&sys.sigma, n, m, n, "sigma")?;
    let system = StochasticSystem::new(f, g, sigma).map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let state = ctx.set(&raw.sets.state, n, "state set")?;
    let initial = ctx.set(&raw.sets.initial, n, "initial set")?;
    let unsafe_set = ctx.set(&raw.sets.unsafe_set, n, "unsafe set")?;

    let pr = &raw.problem;
    let horizon = positive(&ctx, &pr.horizon, "horizon")?;
    if let Some(gm) = &pr.gamma {
        let v = *gm.get_ref();
        if !(0.0..1.0).contains(&v) {
            return Err(ctx.err(gm.span(), format!("gamma must lie in [0, 1), got {v}")));
        }
    }
    if let Some(x0) = &pr.x0 {
        if x0.get_ref().len() != n {
            return Err(ctx.err(x0.span(), format!("x0 must have {n} entries")));
        }
    }
    let sweep = pr.sigma_sweep.get_ref().clone();
    if sweep.is_empty() || sweep.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(ctx.err(pr.sigma_sweep.span(), "sigma_sweep must be a non-empty list of non-negative numbers"));
    }
    let problem = SafetyProblem::new(
        system,
        state,
        initial,
        unsafe_set,
        horizon,
        pr.x0.as_ref().map(|x| x.get_ref().clone()),
        pr.gamma.as_ref().map(|g| *g.get_ref()),
    )
    .map_err(|e| {
        let span = pr.x0.as_ref().map_or(pr.horizon.span(), |x| x.span());
        ctx.err(span, e.to_string())
    })?;

    let dg = &raw.degrees;
    let even = |v: &Spanned<u32>, what: &str| -> Result<u32, ConfigError> {
        let d = *v.get_ref();
        if d == 0 || d % 2 != 0 {
            Err(ctx.err(v.span(), format!("{what} degree must be even and positive, got {d}")))
        } else {
            Ok(d)
        }
    };
    let degrees = Degrees {
        barrier: even(&dg.barrier, "barrier")?,
        multiplier: match &dg.multiplier {
            Some(v) if *v.get_ref() % 2 != 0 => {
                return Err(ctx.err(v.span(), "multiplier degree must be even"));
            }
            other => other.as_ref().map(|v| *v.get_ref()),
        },
        controller: dg.controller.as_ref().map_or(2, |v| *v.get_ref()),
    };
    if let Some(c) = &dg.controller {
        if *c.get_ref() == 0 {
            return Err(ctx.err(c.span(), "controller degree must be at least 1"));
        }
    }

    let defaults = SolverSettings::default();
    let solver = match &raw.solver {
        Some(s) => SolverSettings {
            tol_eq: s.tol_eq.unwrap_or(defaults.tol_eq),
            tol_psd: s.tol_psd.unwrap_or(defaults.tol_psd),
            tol_gap: s.tol_gap.unwrap_or(defaults.tol_gap),
            tol_gap_stall: s.tol_gap_stall.unwrap_or(defaults.tol_gap_stall),
            max_iter: s.max_iter.unwrap_or(defaults.max_iter),
        },
        None => defaults,
    };
    for (name, v) in [("tol_eq", solver.tol_eq), ("tol_psd", solver.tol_psd), ("tol_gap", solver.tol_gap), ("tol_gap_stall", solver.tol_gap_stall)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ConfigError::Invalid(format!("solver.{name} must be positive, got {v}")));
        }
    }
    let pd = ProgramOptions::default();
    let program = match &raw.program {
        Some(p) => ProgramOptions {
            margin: p.margin.unwrap_or(pd.margin),
            objective_weight: p.objective_weight.unwrap_or(pd.objective_weight),
            rescale: p.rescale.unwrap_or(pd.rescale),
        },
        None => pd,
    };
    if !(program.margin >= 0.0 && program.objective_weight >= 0.0) {
        return Err(ConfigError::Invalid("program.margin and program.objective_weight must be non-negative".into()));
    }
    let sd = SoundnessTolerances::default();
    let (soundness_samples, soundness) = match &raw.soundness {
        Some(s) => (
            s.samples.unwrap_or(SOUNDNESS_SAMPLES),
            SoundnessTolerances { value: s.value.unwrap_or(sd.value), generator: s.generator.unwrap_or(sd.generator) },
        ),
        None => (SOUNDNESS_SAMPLES, sd),
    };
    let options = CertifyOptions { degrees, program, solver, soundness_samples, soundness };

    let alpha = match &raw.alpha {
        None => AlphaChoice::Grid(AlphaGrid { lower: 0.0, upper: 5.0, step: 0.05 }),
        Some(a) => match (&a.fixed, &a.lower, &a.upper, &a.step) {
            (Some(fixed), None, None, None) => {
                let v = fixed.get_ref();
                if v.len() != sweep.len() || v.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                    return Err(ctx.err(fixed.span(), "alpha.fixed must list one non-negative alpha per sigma_sweep entry"));
                }
                AlphaChoice::PerSigma(v.clone())
            }
            (None, Some(l), Some(u), Some(d)) => {
                let grid = AlphaGrid { lower: *l.get_ref(), upper: *u.get_ref(), step: *d.get_ref() };
                grid.validate().map_err(|e| ctx.err(l.span(), e.to_string()))?;
                AlphaChoice::Grid(grid)
            }
            _ => return Err(ConfigError::Invalid("[alpha] needs either `fixed` or all of `lower`, `upper`, `step`".into())),
        },
    };

    let synthesis = match &raw.synthesis {
        None => None,
        Some(s) => {
            let alphas = s.alpha.get_ref().clone();
            if alphas.len() != sweep.len() {
                return Err(ctx.err(s.alpha.span(), "synthesis.alpha must list one alpha per sigma_sweep entry"));
            }
            let mut base = SynthesisConfig::new(*s.p_goal.get_ref(), *s.epsilon.get_ref(), alphas[0]);
            base.a_inc = s.a_inc.unwrap_or(base.a_inc);
            base.a_dec = s.a_dec.unwrap_or(base.a_dec);
            base.max_iters = s.max_iters.unwrap_or(base.max_iters);
            base.c_floor = s.c_floor.unwrap_or(base.c_floor);
            base.elastic_penalty = s.elastic_penalty.unwrap_or(base.elastic_penalty);
            for &a in &alphas {
                SynthesisConfig { alpha: a, ..base }.validate().map_err(|e| ctx.err(s.p_goal.span(), e.to_string()))?;
            }
            Some(SynthesisSettings { base, alphas })
        }
    };

    let simulation = SimulationConfig {
        dt: raw.mc.as_ref().and_then(|m| m.dt).unwrap_or(1e-3),
        horizon,
        draws: raw.mc.as_ref().and_then(|m| m.draws).unwrap_or(5000),
        seed: raw.mc.as_ref().and_then(|m| m.seed).unwrap_or(0),
    };
    simulation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    Ok(ProblemConfig { problem, sigma_sweep: sweep, options, alpha, synthesis, simulation })
}
