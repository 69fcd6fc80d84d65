use frl::bias_sim::{closed_form_mean, closed_form_var, simulate_decqn, simulate_dqn, NoiseSimConfig, SimCurve};
use frl::decomp::ActionSpec;

fn config(dims: usize, n: usize) -> NoiseSimConfig {
    NoiseSimConfig {
        seed: 1,
        ..NoiseSimConfig::new(ActionSpec::uniform(dims, n).unwrap())
    }
}

fn within(found: f64, expected: f64, se: f64, sigmas: f64) -> bool {
    (found - expected).abs() <= sigmas * se
}

const SPACES: [(usize, usize); 3] = [(3, 2), (4, 2), (3, 3)];

fn curves(dims: usize, n: usize) -> (SimCurve, SimCurve) {
    let c = config(dims, n);
    (simulate_dqn(&c).unwrap(), simulate_decqn(&c).unwrap())
}

#[test]
fn dqn_endpoints_match_closed_form() {
    for (dims, n) in SPACES {
        let c = config(dims, n);
        let total = n.pow(dims as u32);
        let curve = simulate_dqn(&c).unwrap();
        let full = curve.points[total];
        assert!(within(full.mean, closed_form_mean(total, c.b, c.gamma), full.std_error, 3.0), "{full:?}");
        assert!(within(full.variance, closed_form_var(total, c.b, c.gamma), full.var_std_error, 3.0), "{full:?}");
        let none = curve.points[0];
        assert!(within(none.mean, closed_form_mean(total, c.k * c.b, c.gamma), none.std_error, 3.0), "{none:?}");
        assert!(within(none.variance, closed_form_var(total, c.k * c.b, c.gamma), none.var_std_error, 3.0), "{none:?}");
    }
}

#[test]
fn decqn_endpoints_match_per_dimension_closed_form() {
    for (dims, n) in SPACES {
        let c = config(dims, n);
        let total = n.pow(dims as u32);
        let curve = simulate_decqn(&c).unwrap();
        let nf = dims as f64;
        let full = curve.points[total];
        let mean_in = c.gamma / nf * nf * closed_form_mean(n, c.b, 1.0);
        let var_in = c.gamma * c.gamma / (nf * nf) * nf * closed_form_var(n, c.b, 1.0);
        assert!(within(full.mean, mean_in, full.std_error, 3.0), "{full:?} vs {mean_in}");
        assert!(within(full.variance, var_in, full.var_std_error, 3.0), "{full:?} vs {var_in}");
        let none = curve.points[0];
        let mean_out = c.gamma * closed_form_mean(n, c.k * c.b, 1.0);
        let var_out = c.gamma * c.gamma / (nf * nf) * nf * closed_form_var(n, c.k * c.b, 1.0);
        assert!(within(none.mean, mean_out, none.std_error, 3.0), "{none:?} vs {mean_out}");
        assert!(within(none.variance, var_out, none.var_std_error, 3.0), "{none:?} vs {var_out}");
    }
}

#[test]
fn overestimation_shrinks_with_coverage_and_decomposition_never_exceeds_joint() {
    for (dims, n) in SPACES {
        let (dqn, dec) = curves(dims, n);
        for w in dqn.points.windows(2) {
            let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
            assert!(w[1].mean <= w[0].mean + 3.0 * se, "dqn not decreasing: {w:?}");
        }
        for (a, b) in dqn.points.iter().zip(&dec.points) {
            let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
            assert!(b.mean <= a.mean + 3.0 * se, "N={dims} n={n}: {b:?} above {a:?}");
        }
    }
}

#[test]
fn variance_crossover() {
    for (dims, n) in SPACES {
        let (dqn, dec) = curves(dims, n);
        let total = dqn.points.len() - 1;
        for end in [0, total] {
            let (a, b) = (dqn.points[end], dec.points[end]);
            let se = (a.var_std_error.powi(2) + b.var_std_error.powi(2)).sqrt();
            assert!(b.variance >= a.variance - 3.0 * se, "N={dims} n={n} end {end}: {b:?} vs {a:?}");
        }
        let below = (1..total).any(|i| dec.points[i].variance < dqn.points[i].variance);
        assert!(below, "N={dims} n={n}: no interior point with lower decomposed variance");
    }
}

#[test]
fn standard_errors_scale_with_samples() {
    let mut c = config(3, 2);
    c.outer_reps = 10;
    c.inner_reps = 2000;
    let small = (simulate_dqn(&c).unwrap(), simulate_decqn(&c).unwrap());
    c.inner_reps = 4000;
    let large = (simulate_dqn(&c).unwrap(), simulate_decqn(&c).unwrap());
    for (s, l) in [(&small.0, &large.0), (&small.1, &large.1)] {
        for (a, b) in s.points.iter().zip(&l.points) {
            let ratio = b.std_error / a.std_error;
            assert!((ratio - 0.5f64.sqrt()).abs() <= 0.2 * 0.5f64.sqrt(), "{ratio} at {}", a.in_distribution);
        }
    }
}

#[test]
fn reproducible_for_a_seed() {
    let mut c = config(3, 2);
    c.outer_reps = 4;
    c.inner_reps = 100;
    assert_eq!(simulate_decqn(&c).unwrap(), simulate_decqn(&c).unwrap());
    let other = NoiseSimConfig { seed: c.seed + 1, ..c.clone() };
    assert_ne!(simulate_decqn(&c).unwrap(), simulate_decqn(&other).unwrap());
}
