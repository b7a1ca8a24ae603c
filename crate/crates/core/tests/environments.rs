mod common;

use proptest::prelude::*;
use rgtd_core::closed_form::{assemble, gtd2_solutions, NULL_TOL};
use rgtd_core::environments::*;
use rgtd_core::linalg::{rank, singular_values};
use rgtd_core::mdp::{induce_target_kernel, stationary_distribution, EvalProblem};
use rgtd_core::{Error, Mat};

fn check_problem_invariants(p: &EvalProblem) {
    let mdp = p.mdp();
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    for s in 0..n {
        for a in 0..na {
            let row: f64 = mdp.next_row(s, a).iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
            assert!(mdp.next_row(s, a).iter().all(|&x| x >= 0.0));
        }
        let t: f64 = (0..na).map(|a| p.target().prob(s, a)).sum();
        let b: f64 = (0..na).map(|a| p.behavior().prob(s, a)).sum();
        assert!((t - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    }
    assert!((p.dist().vector().sum() - 1.0).abs() < 1e-12);
    assert!(p.dist().vector().iter().all(|&d| d > 0.0));
    let lhs = (Mat::identity(n, n) - p.p_pi() * p.gamma()) * p.v_pi();
    assert!((lhs - p.r_pi()).amax() < 1e-9 * p.r_pi().amax().max(1.0));
    let d = p.dist().diag();
    let normal = p.phi().transpose() * &d * (p.phi() * p.theta_star() - p.v_pi());
    assert!(normal.amax() < 1e-9 * p.v_pi().amax().max(1.0));
}

fn on_policy(seed: u64) -> EvalProblem {
    let p = random_mdp(&common::config(12, 3, 0.9, 3, seed)).unwrap();
    let d = stationary_distribution(p.p_pi()).unwrap();
    EvalProblem::new(p.mdp().clone(), p.target().clone(), p.target().clone(), p.features().clone(), d).unwrap()
}

#[test]
fn toy_is_exactly_the_stated_problem() {
    let toy = toy_3state();
    assert_eq!(toy.gamma(), 0.9);
    assert_eq!(toy.mdp().n_actions(), 1);
    assert_eq!(toy.dist().vector().as_slice(), &[1.0 / 3.0; 3]);
    assert_eq!(toy.phi(), &Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
    for s in 0..3 {
        assert_eq!(toy.mdp().next_row(s, 0), &[1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]);
        assert_eq!(toy.target().prob(s, 0), 1.0);
        assert_eq!(toy.behavior().prob(s, 0), 1.0);
    }
    assert_eq!(toy.r_pi().as_slice(), &[1.0, 5.0, 5.0]);
    assert_eq!(rank(toy.phi(), 1e-10), 2);
    let cm = assemble(&toy).unwrap();
    let sv = singular_values(&cm.fim);
    assert!(sv[1] < 1e-12 * sv[0]);
    assert_eq!(gtd2_solutions(&cm, NULL_TOL).dim(), 1);
}

#[test]
fn large_random_problem_satisfies_every_invariant() {
    let cfg = GeneratorConfig::large(0);
    let p = random_mdp(&cfg).unwrap();
    assert_eq!((p.n_states(), p.mdp().n_actions(), p.n_features()), (100, 10, 10));
    assert_eq!(p.gamma(), 0.99);
    check_problem_invariants(&p);
    for s in 0..100 {
        for a in 0..10 {
            assert!(p.behavior().prob(s, a) >= BEHAVIOR_FLOOR - 1e-15);
            for r in p.mdp().reward_row(s, a) {
                assert!(*r == 0.0 || (r.abs() > 0.2 && r.abs() <= 1.0));
            }
        }
    }
    assert_eq!(rank(p.phi(), 1e-10), 10);
}

#[test]
fn full_sparsification_zeroes_everything() {
    let cfg = GeneratorConfig { reward_sparsify_threshold: 1.0, ..common::config(15, 3, 0.9, 4, 2) };
    let p = random_mdp(&cfg).unwrap();
    assert!(p.r_pi().iter().all(|&r| r == 0.0));
    assert!(p.theta_star().iter().all(|&t| t == 0.0));
}

#[test]
fn generation_is_byte_deterministic() {
    for cfg in [common::config(20, 4, 0.99, 5, 7), GeneratorConfig { dist_mode: DistMode::Skewed, ..common::config(20, 4, 0.99, 5, 7) }] {
        let a = random_mdp(&cfg).unwrap().to_json().unwrap();
        let b = random_mdp(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let other = random_mdp(&GeneratorConfig { seed: 8, ..cfg.clone() }).unwrap().to_json().unwrap();
        assert_ne!(a, other);
    }
    let s1 = singular_random_mdp(&GeneratorConfig { dist_mode: DistMode::Skewed, ..common::config(20, 4, 0.99, 5, 3) }).unwrap();
    let s2 = singular_random_mdp(&GeneratorConfig { dist_mode: DistMode::Skewed, ..common::config(20, 4, 0.99, 5, 3) }).unwrap();
    assert_eq!(s1.to_json().unwrap(), s2.to_json().unwrap());
}

#[test]
fn stationary_mode_uses_the_behavior_chain() {
    let cfg = GeneratorConfig { dist_mode: DistMode::Stationary, ..common::config(10, 3, 0.9, 3, 4) };
    let p = random_mdp(&cfg).unwrap();
    let (p_beta, _) = induce_target_kernel(p.mdp(), p.behavior()).unwrap();
    let d = p.dist().vector();
    assert!((p_beta.transpose() * d - d).amax() < 1e-10);
}

#[test]
fn invalid_configs_name_the_field() {
    let cases = [
        (GeneratorConfig { n_features: 0, ..common::config(5, 2, 0.9, 2, 0) }, "n_features"),
        (GeneratorConfig { gamma: 1.0, ..common::config(5, 2, 0.9, 2, 0) }, "gamma"),
        (GeneratorConfig { n_actions: 0, ..common::config(5, 2, 0.9, 2, 0) }, "n_actions"),
        (GeneratorConfig { reward_sparsify_threshold: -0.1, ..common::config(5, 2, 0.9, 2, 0) }, "reward_sparsify_threshold"),
    ];
    for (cfg, name) in cases {
        match random_mdp(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, name),
            other => panic!("expected config error for {name}, got {other:?}"),
        }
    }
}

#[test]
fn singularized_problems_have_an_exactly_singular_fim() {
    for seed in 0..5 {
        let cfg = GeneratorConfig { dist_mode: DistMode::Skewed, ..common::config(20, 4, 0.99, 5, seed) };
        let base = random_mdp(&GeneratorConfig { n_features: 4, ..cfg.clone() }).unwrap();
        let p = singularize(&base).unwrap();
        check_problem_invariants(&p);
        assert_eq!(p.n_features(), 5);
        assert_eq!(rank(p.phi(), 1e-10), 5);
        let cm = assemble(&p).unwrap();
        let sv = singular_values(&cm.fim);
        assert!(sv[4] < 1e-10 * sv[0], "seed {seed}: ratio {}", sv[4] / sv[0]);

        // The appended column is annihilated by the FIM map.
        let n = p.n_states();
        let x = p.phi().column(4).into_owned();
        let t = p.dist().diag() * (p.p_pi() * p.gamma() - Mat::identity(n, n));
        assert!((p.phi().transpose() * &t * &x).norm() < 1e-9 * sv[0]);

        // Range(Phi) keeps the original columns, and B is block diagonal.
        let joined = Mat::from_fn(n, 9, |i, j| if j < 4 { base.phi()[(i, j)] } else { p.phi()[(i, j - 4)] });
        assert_eq!(rank(&joined, 1e-10), 5);
        for j in 0..4 {
            assert!(cm.gram[(j, 4)].abs() < 1e-12 * cm.gram.amax());
        }
    }
}

#[test]
fn on_policy_problems_cannot_be_singularized() {
    for seed in 0..5 {
        match singularize(&on_policy(seed)) {
            Err(Error::Singularize(msg)) => assert!(msg.contains("mismatch insufficient")),
            other => panic!("expected a singularize error, got {other:?}"),
        }
    }
}

#[test]
fn singularize_needs_room_for_a_new_column() {
    let toy = toy_3state();
    assert!(matches!(singularize(&toy), Err(Error::Singularize(_))));
}

#[test]
fn large_singular_problem() {
    let p = singular_random_mdp(&GeneratorConfig { dist_mode: DistMode::Skewed, ..GeneratorConfig::large(0) }).unwrap();
    let cm = assemble(&p).unwrap();
    let sv = singular_values(&cm.fim);
    assert!(sv[9] < 1e-10 * sv[0]);
    assert_eq!(rank(p.phi(), 1e-10), 10);
}

#[test]
fn baird_structure() {
    let b = baird();
    assert_eq!((b.n_states(), b.n_features(), b.mdp().n_actions()), (7, 8, 2));
    assert_eq!(b.gamma(), 0.99);
    assert!(b.v_pi().iter().all(|&v| v == 0.0));
    assert!(b.theta_star().iter().all(|&t| t == 0.0));
    assert_eq!(rank(b.phi(), 1e-10), 7);
    assert!(!b.features().is_full_rank());
    assert!(matches!(assemble(&b), Err(Error::InvalidModel(_))));
    for s in 0..7 {
        assert_eq!(b.mdp().next_row(s, BAIRD_SOLID)[6], 1.0);
        assert!((b.behavior().prob(s, BAIRD_DASHED) - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(b.target().prob(s, BAIRD_SOLID), 1.0);
        assert!((b.rho(s, BAIRD_SOLID) - 7.0).abs() < 1e-12);
        assert_eq!(b.rho(s, BAIRD_DASHED), 0.0);
    }
    let th = baird_initial_theta();
    assert!(((b.phi() * &th) - b.phi() * baird_canonical_theta()).amax() < 1e-12);
}

#[test]
fn null_space_start_is_a_signed_unit_null_vector() {
    let toy = toy_3state();
    let cm = assemble(&toy).unwrap();
    let v = null_space_start(&cm.fim, toy.theta_star()).unwrap();
    assert!((v.norm() - 1.0).abs() < 1e-12);
    assert!((&cm.fim * &v).norm() < 1e-12);
    assert!(v.dot(toy.theta_star()) <= 0.0);
    let ns = assemble(&common::nonsingular(0)).unwrap();
    assert!(null_space_start(&ns.fim, &ns.b).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_problems_are_valid(seed in any::<u64>(), n in 2usize..25, na in 1usize..6, q_frac in 0.0f64..1.0, gamma in 0.05f64..0.99, mode in 0usize..3) {
        let q = 1 + ((n - 1) as f64 * q_frac) as usize;
        let dist_mode = [DistMode::Uniform, DistMode::Stationary, DistMode::Skewed][mode];
        let cfg = GeneratorConfig { dist_mode, ..common::config(n, na, gamma, q, seed) };
        let p = random_mdp(&cfg).unwrap();
        check_problem_invariants(&p);
        prop_assert_eq!(rank(p.phi(), 1e-10), q);
    }

    #[test]
    fn successful_singularization_is_exact(seed in any::<u64>(), n in 8usize..30, q in 2usize..6) {
        let cfg = GeneratorConfig { dist_mode: DistMode::Skewed, ..common::config(n, 3, 0.95, q, seed) };
        match singular_random_mdp(&cfg) {
            Ok(p) => {
                check_problem_invariants(&p);
                let cm = assemble(&p).unwrap();
                let sv = singular_values(&cm.fim);
                prop_assert!(sv[q - 1] < 1e-10 * sv[0]);
                prop_assert_eq!(rank(p.phi(), 1e-10), q);
            }
            Err(e) => prop_assert!(matches!(e, Error::Singularize(_))),
        }
    }
}
