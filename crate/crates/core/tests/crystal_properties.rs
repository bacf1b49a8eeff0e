use paultrap::crystal::{
    calogero_equilibrium, equilibrium_residual, hessian, multi_start, potential_terms, random_init, solve_equilibrium,
    CalogeroForm, CrystalParameters, InteractionTerm, SolverOptions,
};
use paultrap::hermite::{hermite_1d, hermite_zeros};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fd_gradient(x: &[f64], p: &CrystalParameters) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            let h = 1e-5 * x[k].abs().max(1.0);
            xp[k] = x[k] + h;
            let up = potential_terms(&xp, p).unwrap().total;
            xp[k] = x[k] - h;
            let down = potential_terms(&xp, p).unwrap().total;
            xp[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn spread_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    // reject configurations with nearly coincident ions
    loop {
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let close = (0..n).any(|a| {
            (a + 1..n).any(|b| (0..d).map(|j| (x[a * d + j] - x[b * d + j]).powi(2)).sum::<f64>() < 0.04)
        });
        if !close {
            return x;
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let family = CrystalParameters::family(
        4,
        2,
        1.3,
        0.7,
        vec![
            InteractionTerm::coulomb(),
            InteractionTerm {
                mu: 0.5,
                nu: 1.5,
                coeff: 0.2,
            },
            InteractionTerm {
                mu: 1.0,
                nu: 2.0,
                coeff: -0.4,
            },
        ],
    )
    .unwrap();
    let models = [
        CrystalParameters::coulomb(4, 2, 1.0, 1.0).unwrap(),
        family,
        CrystalParameters::calogero(4, 1.0, 1.0, 0.5, CalogeroForm::InverseSquare).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    for p in &models {
        for _ in 0..34 {
            let x = spread_points(&mut rng, p.n, p.d);
            let g = equilibrium_residual(&x, p).unwrap();
            let fd = fd_gradient(&x, p);
            let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6 * scale, "{a} vs {b}");
            }
            checked += 1;
        }
    }
    assert!(checked >= 100);
}

#[test]
fn solved_configurations_are_local_minima() {
    for (n, d) in [(3, 1), (4, 2), (5, 2), (4, 3)] {
        let p = CrystalParameters::coulomb(n, d, 1.0, 1.0).unwrap();
        for r in multi_start(&p, 7, 3, SolverOptions::default()) {
            let c = r.unwrap();
            assert!(c.residual < 1e-10);
            let h = hessian(&c.flat_positions(), &p).unwrap();
            let eig = h.symmetric_eigen();
            let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
            for l in eig.eigenvalues.iter() {
                assert!(*l >= -1e-6 * lmax, "n={n} d={d} eigenvalue {l}");
            }
        }
    }
}

#[test]
fn hermite_zeros_are_roots_and_symmetric() {
    for n in 1..=12 {
        let z = hermite_zeros(n).unwrap();
        assert_eq!(z.len(), n);
        for &x in &z {
            let slope = 2.0 * n as f64 * hermite_1d(n - 1, x);
            assert!(hermite_1d(n, x).abs() < 1e-8 * slope.abs().max(1.0), "n={n} x={x}");
        }
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        for i in 0..n {
            assert!((sorted[i] + sorted[n - 1 - i]).abs() < 1e-12);
        }
    }
}

#[test]
fn translation_does_not_change_the_solution() {
    let p = CrystalParameters::coulomb(4, 2, 1.0, 1.0).unwrap();
    let init = random_init(&p, 3);
    let shifted: Vec<f64> = init.iter().enumerate().map(|(i, v)| v + [2.5, -1.25][i % 2]).collect();
    let a = solve_equilibrium(&p, &init, SolverOptions::default()).unwrap();
    let b = solve_equilibrium(&p, &shifted, SolverOptions::default()).unwrap();
    for (x, y) in a.flat_positions().iter().zip(b.flat_positions()) {
        assert!((x - y).abs() < 1e-8);
    }
    assert!((a.energy - b.energy).abs() < 1e-8);
}

// s^{-1} Σ r² over ordered pairs equals 2N for every configuration.
#[test]
fn scale_free_term_is_constant() {
    let n = 5;
    let p = CrystalParameters::family(
        n,
        2,
        1.0,
        1.0,
        vec![InteractionTerm {
            mu: 1.0,
            nu: 2.0,
            coeff: 1.0,
        }],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = spread_points(&mut rng, n, 2);
    let v0 = potential_terms(&x, &p).unwrap().terms[0];
    assert!((v0 - 2.0 * n as f64).abs() < 1e-12);
    for lambda in [0.1, 3.0, 40.0] {
        let scaled: Vec<f64> = x.iter().map(|v| lambda * v).collect();
        assert!((potential_terms(&scaled, &p).unwrap().terms[0] - v0).abs() < 1e-12);
    }
}

#[test]
fn calogero_zeros_match_numerical_minimum() {
    for n in [2, 4, 6] {
        let p = CrystalParameters::calogero(n, 2.0, 0.5, 1.5, CalogeroForm::InverseSquare).unwrap();
        let eq = calogero_equilibrium(&p).unwrap();
        assert!(eq.consistent);
        let mut exact = eq.configuration.flat_positions();
        exact.sort_by(f64::total_cmp);
        let mut num = solve_equilibrium(&p, &random_init(&p, 9), SolverOptions::default())
            .unwrap()
            .flat_positions();
        num.sort_by(f64::total_cmp);
        for (a, b) in exact.iter().zip(&num) {
            assert!((a - b).abs() < 1e-8, "n={n}");
        }
    }
}

#[test]
fn printed_calogero_form_is_inconsistent() {
    let p = CrystalParameters::calogero(3, 1.0, 1.0, 0.5, CalogeroForm::Printed).unwrap();
    assert!(!calogero_equilibrium(&p).unwrap().consistent);
}
