//! Per-coordinate affine change of variables `x = c + h∘y` that maps the state-space
//! bounding box onto `[-1, 1]^n`, keeping high-degree monomials of order one.

use serde::{Deserialize, Serialize};

use crate::model::{ModelError, SafetyProblem, SemialgebraicSet, StochasticSystem};
use crate::poly::{PolyError, Polynomial};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl Frame {
    pub fn identity(n: usize) -> Self {
        Frame { center: vec![0.0; n], half_width: vec![1.0; n] }
    }

    /// The frame normalising the problem's state-space box; identity if the state space looks unbounded.
    pub fn for_problem(problem: &SafetyProblem) -> Self {
        match problem.state_box() {
            Some(b) => Frame {
                center: b.lower.iter().zip(&b.upper).map(|(l, u)| 0.5 * (l + u)).collect(),
                half_width: b.lower.iter().zip(&b.upper).map(|(l, u)| (0.5 * (u - l)).max(1e-6)).collect(),
            },
            None => Frame::identity(problem.dim()),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.center.iter().all(|&c| c == 0.0) && self.half_width.iter().all(|&h| h == 1.0)
    }

    pub fn to_local_point(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).zip(&self.half_width).map(|((x, c), h)| (x - c) / h).collect()
    }

    /// `p(x)` written in local coordinates: `y ↦ p(c + h∘y)`.
    pub fn to_local(&self, p: &Polynomial) -> Result<Polynomial, PolyError> {
        if self.is_identity() {
            return Ok(p.clone());
        }
        p.affine_substitute(&self.half_width, &self.center)
    }

    /// `q(y)` written in global coordinates: `x ↦ q((x - c)/h)`.
    pub fn to_global(&self, q: &Polynomial) -> Result<Polynomial, PolyError> {
        if self.is_identity() {
            return Ok(q.clone());
        }
        let scale: Vec<f64> = self.half_width.iter().map(|h| 1.0 / h).collect();
        let shift: Vec<f64> = self.center.iter().zip(&self.half_width).map(|(c, h)| -c / h).collect();
        q.affine_substitute(&scale, &shift)
    }

    fn local_set(&self, set: &SemialgebraicSet) -> Result<SemialgebraicSet, ModelError> {
        let cs = set.constraints().iter().map(|p| self.to_local(p)).collect::<Result<Vec<_>, _>>()?;
        SemialgebraicSet::new(cs)
    }

    /// `dy = h⁻¹∘dx`: drift, input and diffusion rows are divided by the half-widths.
    pub fn local_system(&self, system: &StochasticSystem) -> Result<StochasticSystem, ModelError> {
        let row = |i: usize, p: &Polynomial| -> Result<Polynomial, PolyError> {
            Ok(self.to_local(p)?.scale(1.0 / self.half_width[i]))
        };
        let drift = system.drift().iter().enumerate().map(|(i, p)| row(i, p)).collect::<Result<Vec<_>, _>>()?;
        let mat = |m: &[Vec<Polynomial>]| -> Result<Vec<Vec<Polynomial>>, PolyError> {
            m.iter().enumerate().map(|(i, r)| r.iter().map(|p| row(i, p)).collect()).collect()
        };
        StochasticSystem::new(drift, mat(system.input_matrix())?, mat(system.diffusion())?)
    }

    pub fn local_problem(&self, problem: &SafetyProblem) -> Result<SafetyProblem, ModelError> {
        SafetyProblem::new(
            self.local_system(&problem.system)?,
            self.local_set(&problem.state_space)?,
            self.local_set(&problem.initial_set)?,
            self.local_set(&problem.unsafe_set)?,
            problem.horizon,
            problem.x0.as_ref().map(|x| self.to_local_point(x)),
            problem.gamma,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generator;
    use crate::poly::parse_polynomial;

    #[test]
    fn round_trip_and_generator_covariance() {
        let f = Frame { center: vec![-0.5, 0.5], half_width: vec![2.5, 2.5] };
        let p = parse_polynomial("x1^3*x2 - 2*x2^2 + 0.5", 2).unwrap();
        let back = f.to_global(&f.to_local(&p).unwrap()).unwrap();
        let x = [0.3, -1.7];
        assert!((back.eval(&x).unwrap() - p.eval(&x).unwrap()).abs() < 1e-12);

        // (A_y B_y)(y) = (A_x B)(c + h y) when B_y = B(c + h y)
        let sys = StochasticSystem::new(
            vec![parse_polynomial("x2", 2).unwrap(), parse_polynomial("-x1 - x2 - 0.5*x1^3", 2).unwrap()],
            vec![vec![Polynomial::zero(2)], vec![Polynomial::constant(2, 1.0)]],
            vec![vec![Polynomial::zero(2)], vec![Polynomial::constant(2, 0.8)]],
        )
        .unwrap();
        let b = parse_polynomial("x1^2 + x2^4 - x1*x2", 2).unwrap();
        let gx = generator(&b, &sys, &sys.zero_controller()).unwrap();
        let ly = f.local_system(&sys).unwrap();
        let gy = generator(&f.to_local(&b).unwrap(), &ly, &ly.zero_controller()).unwrap();
        let y = [0.2, -0.4];
        let xg = [-0.5 + 2.5 * 0.2, 0.5 - 2.5 * 0.4];
        assert!((gy.eval(&y).unwrap() - gx.eval(&xg).unwrap()).abs() < 1e-10);
    }
}
