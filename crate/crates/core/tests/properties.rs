use proptest::prelude::*;

use sbarrier_core::certify::{probability_bound, BoundCase, BoundInputs};
use sbarrier_core::mc::{path_rng, simulate_path, wilson_interval, SimulationConfig, Simulator};
use sbarrier_core::model::{generator, SafetyProblem, SemialgebraicSet, StochasticSystem};
use sbarrier_core::poly::{parse_polynomial, Monomial, Polynomial};

const N: usize = 2;

fn poly() -> impl Strategy<Value = Polynomial> {
    prop::collection::vec(((0u32..4, 0u32..4), -3.0f64..3.0), 0..6).prop_map(|terms| {
        let mut p = Polynomial::zero(N);
        for ((a, b), c) in terms {
            p.add_assign_scaled(&Polynomial::monomial(Monomial::new(vec![a, b]), c), 1.0);
        }
        p
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, N)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn ring_axioms_hold_pointwise(p in poly(), q in poly(), r in poly(), x in point()) {
        let ev = |p: &Polynomial| p.eval(&x).unwrap();
        let pq = p.mul(&q).unwrap();
        prop_assert!(close(ev(&pq), ev(&q.mul(&p).unwrap()), 1e-10));
        prop_assert!(close(ev(&(&p + &q)), ev(&(&q + &p)), 1e-12));
        let left = p.mul(&(&q + &r)).unwrap();
        let right = &pq + &p.mul(&r).unwrap();
        prop_assert!(close(ev(&left), ev(&right), 1e-10));
        prop_assert!(close(ev(&pq.mul(&r).unwrap()), ev(&p.mul(&q.mul(&r).unwrap()).unwrap()), 1e-9));
        prop_assert!((&p - &p).is_zero());
    }

    #[test]
    fn product_evaluates_to_product_of_values(p in poly(), q in poly(), x in point()) {
        let prod = p.mul(&q).unwrap().eval(&x).unwrap();
        prop_assert!(close(prod, p.eval(&x).unwrap() * q.eval(&x).unwrap(), 1e-10));
    }

    #[test]
    fn derivative_matches_central_difference(p in poly(), x in point(), i in 0usize..N) {
        let h = 1e-5;
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let fd = (p.eval(&xp).unwrap() - p.eval(&xm).unwrap()) / (2.0 * h);
        let d = p.differentiate(i).unwrap().eval(&x).unwrap();
        prop_assert!((fd - d).abs() <= 1e-5 * (1.0 + d.abs()), "{fd} vs {d}");
    }

    #[test]
    fn bound_is_monotone_in_level_and_beta(
        alpha in 0.0f64..4.0, beta in 0.0f64..4.0, l1 in 0.0f64..0.99, dl in 0.0f64..0.5, db in 0.0f64..1.0, t in 0.1f64..3.0,
    ) {
        let l2 = (l1 + dl).min(0.999);
        let at = |beta: f64, level: f64| probability_bound(&BoundInputs { alpha, beta, level, horizon: t }).unwrap().value;
        prop_assert!(at(beta, l1) <= at(beta, l2) + 1e-12);
        prop_assert!(at(beta, l1) <= at(beta + db, l1) + 1e-12);
        let b = at(beta, l1);
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!(b >= l1 - 1e-12);
    }

    #[test]
    fn seam_is_continuous(alpha in 0.05f64..4.0, level in 0.0f64..0.99, t in 0.1f64..3.0) {
        let at = |beta: f64| probability_bound(&BoundInputs { alpha, beta, level, horizon: t }).unwrap();
        let below = at(alpha * (1.0 - 1e-9));
        let above = at(alpha * (1.0 + 1e-9));
        prop_assert_eq!(below.case, BoundCase::BetaOverAlphaLe1);
        prop_assert_eq!(above.case, BoundCase::BetaOverAlphaGe1);
        prop_assert!((below.value - above.value).abs() <= 1e-7);
        prop_assert!((at(alpha).value - below.value).abs() <= 1e-7);
    }

    #[test]
    fn wilson_interval_contains_estimate(n in 1usize..5000, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_interval(k, n);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }
}

fn p(s: &str, n: usize) -> Polynomial {
    parse_polynomial(s, n).unwrap()
}

fn scalar_problem(sigma: f64) -> SafetyProblem {
    let sys = StochasticSystem::new(vec![p("-x1", 1)], vec![vec![p("1", 1)]], vec![vec![p("1", 1)]]).unwrap();
    SafetyProblem::new(
        sys,
        SemialgebraicSet::new(vec![p("4 - x1^2", 1)]).unwrap(),
        SemialgebraicSet::new(vec![p("0.04 - x1^2", 1)]).unwrap(),
        SemialgebraicSet::new(vec![p("x1^2 - 1", 1)]).unwrap(),
        1.0,
        Some(vec![0.0]),
        None,
    )
    .unwrap()
    .with_diffusion_scale(sigma)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn paths_are_reproducible(seed in any::<u64>(), index in 0u64..1000) {
        let problem = scalar_problem(1.2);
        let sim = Simulator::new(&problem, &problem.system.zero_controller()).unwrap();
        let cfg = SimulationConfig { dt: 1e-2, horizon: 1.0, draws: 1, seed };
        let a = simulate_path(&sim, &[0.0], &cfg, &mut path_rng(seed, index));
        let b = simulate_path(&sim, &[0.0], &cfg, &mut path_rng(seed, index));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn generator_of_quadratic_matches_closed_form(sigma in 0.0f64..2.0, x in -2.0f64..2.0) {
        // A x^2 = -2x^2 + sigma^2 for dx = -x dt + sigma dW
        let problem = scalar_problem(sigma);
        let a = generator(&p("x1^2", 1), &problem.system, &problem.system.zero_controller()).unwrap();
        let expected = -2.0 * x * x + sigma * sigma;
        prop_assert!((a.eval(&[x]).unwrap() - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }
}
