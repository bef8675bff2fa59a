use sbarrier_core::certify::AlphaGrid;
use sbarrier_core::config::{parse_config, AlphaChoice, ConfigError};

const BASE: &str = r#"
[system]
n = 1
m = 1
k = 1
f = ["-x1"]
g = [["1"]]
sigma = [["1"]]

[sets]
state = ["4 - x1^2"]
initial = ["0.04 - x1^2"]
unsafe = ["x1^2 - 1"]

[problem]
horizon = 1.0
x0 = [0.0]
sigma_sweep = [0.5, 1.5]

[degrees]
barrier = 6
"#;

#[test]
fn minimal_config_uses_defaults() {
    let cfg = parse_config(BASE).unwrap();
    assert_eq!(cfg.sigma_sweep, vec![0.5, 1.5]);
    assert_eq!(cfg.alpha, AlphaChoice::Grid(AlphaGrid { lower: 0.0, upper: 5.0, step: 0.05 }));
    assert_eq!(cfg.options.degrees.barrier, 6);
    assert_eq!(cfg.simulation.draws, 5000);
    assert_eq!(cfg.simulation.horizon, 1.0);
    assert!(cfg.synthesis.is_none());
    let p = cfg.problem_at(1.5);
    assert_eq!(p.system.diffusion()[0][0].eval(&[0.3]).unwrap(), 1.5);
}

#[test]
fn bundled_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["scalar_ou.toml", "duffing.toml"] {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn gamma_outside_unit_interval_is_rejected_with_line() {
    let text = BASE.replace("x0 = [0.0]", "x0 = [0.0]\ngamma = 1.5");
    let expected = text.lines().position(|l| l.starts_with("gamma")).unwrap() + 1;
    match parse_config(&text) {
        Err(ConfigError::Validation { line, .. }) => assert_eq!(line, expected),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn unknown_key_is_a_parse_error() {
    let text = BASE.replace("barrier = 6", "barrier = 6\nbarier = 4");
    assert!(matches!(parse_config(&text), Err(ConfigError::Parse { .. })));
}

#[test]
fn bad_polynomial_is_rejected() {
    let text = BASE.replace(r#"f = ["-x1"]"#, r#"f = ["-x1 +* 2"]"#);
    assert!(parse_config(&text).is_err());
}

#[test]
fn odd_barrier_degree_or_empty_sweep_is_rejected() {
    assert!(parse_config(&BASE.replace("sigma_sweep = [0.5, 1.5]", "sigma_sweep = []")).is_err());
    assert!(parse_config(&BASE.replace("horizon = 1.0", "horizon = -1.0")).is_err());
}

#[test]
fn fixed_alpha_needs_one_value_per_sigma() {
    let ok = format!("{BASE}\n[alpha]\nfixed = [1.0, 2.0]\n");
    let cfg = parse_config(&ok).unwrap();
    assert_eq!(cfg.alpha.grid_for(1), AlphaGrid::fixed(2.0));
    let bad = format!("{BASE}\n[alpha]\nfixed = [1.0]\n");
    assert!(parse_config(&bad).is_err());
}

#[test]
fn x0_outside_initial_set_is_rejected() {
    assert!(parse_config(&BASE.replace("x0 = [0.0]", "x0 = [0.5]")).is_err());
}
