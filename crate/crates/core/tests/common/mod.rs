#![allow(dead_code)]

use rgtd_core::environments::{random_mdp, singular_random_mdp, DistMode, GeneratorConfig};
use rgtd_core::mdp::EvalProblem;
use rgtd_core::rng::Xoshiro256;
use rgtd_core::{Mat, Vector};

pub fn config(n_states: usize, n_actions: usize, gamma: f64, n_features: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_states,
        n_actions,
        gamma,
        n_features,
        reward_sparsify_threshold: 0.2,
        seed,
        dist_mode: DistMode::Uniform,
    }
}

/// Small nonsingular problem (10 states, 3 actions, gamma 0.5, 4 features).
pub fn nonsingular(seed: u64) -> EvalProblem {
    random_mdp(&config(10, 3, 0.5, 4, seed)).unwrap()
}

/// 20-state problem with an exactly singular FIM.
pub fn singular20(seed: u64) -> EvalProblem {
    let cfg = GeneratorConfig { dist_mode: DistMode::Skewed, ..config(20, 4, 0.99, 5, seed) };
    singular_random_mdp(&cfg).unwrap()
}

pub fn random_matrix(rng: &mut Xoshiro256, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

pub fn random_vector(rng: &mut Xoshiro256, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0))
}

/// Random symmetric PSD matrix of the given rank.
pub fn random_psd(rng: &mut Xoshiro256, n: usize, rank: usize) -> Mat {
    let f = random_matrix(rng, n, rank);
    &f * f.transpose()
}

pub fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Dense inverse via Gauss-Jordan with partial pivoting, independent of the library's solvers.
pub fn gauss_jordan_inverse(a: &Mat) -> Mat {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Mat::identity(n, n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs())).unwrap();
        m.swap_rows(col, pivot);
        inv.swap_rows(col, pivot);
        let p = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[(i, col)];
                for j in 0..n {
                    m[(i, j)] -= f * m[(col, j)];
                    inv[(i, j)] -= f * inv[(col, j)];
                }
            }
        }
    }
    inv
}
