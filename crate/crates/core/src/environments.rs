//! Benchmark problems: the 3-state singular toy, random sparsified MDPs, an exact singular-FIM
//! constructor and Baird's star counterexample.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::mdp::{
    induce_target_kernel, stationary_distribution, EvalProblem, FeatureMap, Policy, StateDistribution, TabularMdp,
};
use crate::rng::Xoshiro256;

/// How the state weighting `d` of a generated problem is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistMode {
    #[default]
    Uniform,
    /// Stationary distribution of the behavior chain.
    Stationary,
    /// Random weights `u^2 + 1e-3`, normalized. Strongly non-uniform, which is what makes an
    /// exactly singular FIM constructible.
    Skewed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub n_features: usize,
    #[serde(default = "default_threshold")]
    pub reward_sparsify_threshold: f64,
    pub seed: u64,
    #[serde(default)]
    pub dist_mode: DistMode,
}

fn default_threshold() -> f64 {
    0.2
}

/// Minimum behavior probability of any action.
pub const BEHAVIOR_FLOOR: f64 = 0.01;
pub const TRANSITION_FLOOR: f64 = 1e-3;
pub const FEATURE_RETRIES: usize = 100;

impl GeneratorConfig {
    /// The large singular-experiment setting: 100 states, 10 actions, 10 features, `gamma = 0.99`.
    pub fn large(seed: u64) -> Self {
        GeneratorConfig {
            n_states: 100,
            n_actions: 10,
            gamma: 0.99,
            n_features: 10,
            reward_sparsify_threshold: 0.2,
            seed,
            dist_mode: DistMode::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { field: field.into(), reason: reason.into() });
        if self.n_states == 0 {
            return bad("n_states", "must be positive");
        }
        if self.n_actions == 0 || self.n_actions as f64 * BEHAVIOR_FLOOR > 1.0 {
            return bad("n_actions", "must be between 1 and 100");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if self.n_features == 0 || self.n_features > self.n_states {
            return bad("n_features", "must be between 1 and n_states");
        }
        if !(0.0..=1.0).contains(&self.reward_sparsify_threshold) {
            return bad("reward_sparsify_threshold", "must lie in [0, 1]");
        }
        Ok(())
    }
}

/// The 3-state, 2-feature example whose FIM is exactly singular.
///
/// Every row of `P` is `[1/6, 1/6, 2/3]`, `R = [1, 5, 5]`, `gamma = 0.9`, `d` uniform, one action.
pub fn toy_3state() -> EvalProblem {
    let row = [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0];
    let rewards = [1.0, 5.0, 5.0];
    let transition: Vec<f64> = (0..3).flat_map(|_| row).collect();
    let reward: Vec<f64> = rewards.iter().flat_map(|&r| [r; 3]).collect();
    let mdp = TabularMdp::new(3, 1, transition, reward, 0.9).expect("toy model is valid");
    let phi = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    EvalProblem::new(
        mdp,
        Policy::uniform(3, 1),
        Policy::uniform(3, 1),
        FeatureMap::new(phi).expect("toy features have full rank"),
        StateDistribution::uniform(3),
    )
    .expect("toy problem is valid")
}

fn random_stochastic_rows(rng: &mut Xoshiro256, rows: usize, cols: usize, floor: f64) -> Mat {
    let mut m = Mat::from_fn(rows, cols, |_, _| 0.0);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.next_f64() + floor;
        }
        let s = m.row(i).sum();
        m.row_mut(i).scale_mut(1.0 / s);
    }
    m
}

/// Random problem: transition weights `U(0,1) + 1e-3` normalized per `(s, a)`; rewards
/// `U(-1, 1)` zeroed where `|r| <= threshold`; features `U(0, 1)` redrawn until full column rank;
/// random target policy and a random behavior policy mixed towards uniform so every action has
/// probability at least [`BEHAVIOR_FLOOR`].
pub fn random_mdp(config: &GeneratorConfig) -> Result<EvalProblem> {
    config.validate()?;
    let (n, na, q) = (config.n_states, config.n_actions, config.n_features);
    let mut rng = Xoshiro256::seed_from_u64(config.seed);
    let kernel = random_stochastic_rows(&mut rng, n * na, n, TRANSITION_FLOOR);
    let transition: Vec<f64> = kernel.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
    let reward: Vec<f64> = (0..n * na * n)
        .map(|_| {
            let r = rng.uniform(-1.0, 1.0);
            if r.abs() <= config.reward_sparsify_threshold {
                0.0
            } else {
                r
            }
        })
        .collect();
    let mdp = TabularMdp::new(n, na, transition, reward, config.gamma)?;
    let target = Policy::new(random_stochastic_rows(&mut rng, n, na, 0.0))?;
    let eps = BEHAVIOR_FLOOR * na as f64;
    let raw = random_stochastic_rows(&mut rng, n, na, 0.0);
    let behavior = Policy::new(raw.map(|p| (1.0 - eps) * p + eps / na as f64))?;
    let features = random_features(&mut rng, n, q)?;
    let dist = match config.dist_mode {
        DistMode::Uniform => StateDistribution::uniform(n),
        DistMode::Stationary => stationary_distribution(&induce_target_kernel(&mdp, &behavior)?.0)?,
        DistMode::Skewed => {
            let w = Vector::from_fn(n, |_, _| {
                let u = rng.next_f64();
                u * u + 1e-3
            });
            let total = w.sum();
            StateDistribution::new(w / total)?
        }
    };
    EvalProblem::new(mdp, target, behavior, features, dist)
}

fn random_features(rng: &mut Xoshiro256, n: usize, q: usize) -> Result<FeatureMap> {
    for _ in 0..FEATURE_RETRIES {
        let phi = Mat::from_fn(n, q, |_, _| rng.next_f64());
        if let Ok(f) = FeatureMap::new(phi) {
            return Ok(f);
        }
    }
    Err(Error::Numerical(format!("no full-rank {n}x{q} feature matrix in {FEATURE_RETRIES} draws")))
}

/// Quadratic form `Q(x) = x^T D (gamma P^pi - I) x`.
fn quad(t: &Mat, x: &Vector) -> f64 {
    x.dot(&(t * x))
}

/// Appends a feature column that makes the FIM exactly singular.
///
/// With `T = D (gamma P^pi - I)` and `N = Null(Phi^T T)`, the new column `x` lies in `N` and
/// satisfies `x^T T x = 0`, so the last column of the new FIM vanishes. `x` is found on the segment
/// between the most positive and most negative directions of `Q` restricted to `N` (extreme
/// eigenvectors of its symmetric part), by bisection followed by one Newton step. The existing
/// columns are then made `D`-orthogonal to `x`, which keeps `M e_q = 0` and `span(Phi)` unchanged
/// while making `B` block diagonal, so the Euclidean and `B`-weighted minimal-norm GTD2 solutions
/// coincide.
pub fn singularize(problem: &EvalProblem) -> Result<EvalProblem> {
    let phi = problem.phi();
    let (n, q0) = phi.shape();
    if q0 + 1 >= n {
        return Err(Error::Singularize(format!("need at most n_states - 2 = {} input features", n.saturating_sub(2))));
    }
    let d = problem.dist().diag();
    let t = &d * (problem.p_pi() * problem.gamma() - Mat::identity(n, n));
    let null = linalg::null_space(&(phi.transpose() * &t), 1e-12);
    let restricted = linalg::sym(&(null.transpose() * &t * &null));
    let eig = SymmetricEigen::new(restricted);
    let (mut imax, mut imin) = (0, 0);
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[imax] {
            imax = i;
        }
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
    }
    let scale = linalg::max_abs(&t);
    if !(eig.eigenvalues[imax] > 1e-12 * scale && eig.eigenvalues[imin] < -1e-12 * scale) {
        return Err(Error::Singularize(
            "distribution/policy mismatch insufficient (quadratic form is definite on the null space)"
                .into(),
        ));
    }
    let x_pos = &null * eig.eigenvectors.column(imax);
    let x_neg = &null * eig.eigenvectors.column(imin);
    let point = |s: f64| &x_pos * s + &x_neg * (1.0 - s);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let x = point(mid);
        if quad(&t, &x).abs() < 1e-14 * scale * x.norm_squared() {
            lo = mid;
            hi = mid;
            break;
        }
        if quad(&t, &x) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut s = 0.5 * (lo + hi);
    // Newton polish on the scalar quadratic s -> Q(point(s)).
    let dir = &x_pos - &x_neg;
    let x = point(s);
    let deriv = x.dot(&(&t * &dir)) + dir.dot(&(&t * &x));
    if deriv != 0.0 {
        let step = quad(&t, &x) / deriv;
        if step.abs() < 1e-3 {
            s -= step;
        }
    }
    let mut x = point(s);
    let col_norm = (0..q0).map(|j| phi.column(j).norm()).sum::<f64>() / q0.max(1) as f64;
    let target_norm = if col_norm > 0.0 { col_norm } else { 1.0 };
    x *= target_norm / x.norm();

    let dx = &d * &x;
    let a = phi.transpose() * &dx / x.dot(&dx);
    let mut new_phi = Mat::zeros(n, q0 + 1);
    new_phi.view_mut((0, 0), (n, q0)).copy_from(&(phi - &x * a.transpose()));
    new_phi.column_mut(q0).copy_from(&x);
    let features = FeatureMap::new(new_phi)
        .map_err(|_| Error::Singularize("appended column made the features rank deficient".into()))?;
    problem.with_features(features)
}

/// `singularize(random_mdp(config with n_features - 1))`; the config's `dist_mode` should usually
/// be [`DistMode::Skewed`].
pub fn singular_random_mdp(config: &GeneratorConfig) -> Result<EvalProblem> {
    config.validate()?;
    if config.n_features < 2 {
        return Err(Error::Config { field: "n_features".into(), reason: "must be at least 2 to singularize".into() });
    }
    let base = random_mdp(&GeneratorConfig { n_features: config.n_features - 1, ..config.clone() })?;
    singularize(&base)
}

pub const BAIRD_DASHED: usize = 0;
pub const BAIRD_SOLID: usize = 1;

/// Baird's 7-state star counterexample.
///
/// States 0..=5 are the outer states and 6 the hub. The dashed action jumps uniformly to an outer
/// state; the solid action goes to the hub. The target policy always takes solid, the behavior
/// policy takes dashed with probability 6/7. Rewards are zero and `gamma = 0.99`. The 7x8 feature
/// matrix has rank 7.
pub fn baird() -> EvalProblem {
    let n = 7;
    let mut transition = vec![0.0; n * 2 * n];
    for s in 0..n {
        for t in 0..6 {
            transition[(s * 2 + BAIRD_DASHED) * n + t] = 1.0 / 6.0;
        }
        transition[(s * 2 + BAIRD_SOLID) * n + 6] = 1.0;
    }
    let mdp = TabularMdp::new(n, 2, transition, vec![0.0; n * 2 * n], 0.99).expect("Baird model is valid");
    let mut phi = Mat::zeros(n, 8);
    for i in 0..6 {
        phi[(i, i)] = 2.0;
        phi[(i, 7)] = 1.0;
    }
    phi[(6, 6)] = 1.0;
    phi[(6, 7)] = 2.0;
    let target = Policy::new(Mat::from_fn(n, 2, |_, a| if a == BAIRD_SOLID { 1.0 } else { 0.0 })).expect("valid");
    let behavior =
        Policy::new(Mat::from_fn(n, 2, |_, a| if a == BAIRD_SOLID { 1.0 / 7.0 } else { 6.0 / 7.0 })).expect("valid");
    EvalProblem::new(
        mdp,
        target,
        behavior,
        FeatureMap::allow_rank_deficient(phi).expect("shape is valid"),
        StateDistribution::uniform(n),
    )
    .expect("Baird problem is valid")
}

/// The customary Baird start `(1, 1, 1, 1, 1, 1, 10, 1)`.
pub fn baird_canonical_theta() -> Vector {
    Vector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0, 1.0])
}

/// [`baird_canonical_theta`] with its `Null(Phi)` component removed. The component along
/// `Null(Phi)` is invisible to every learner, so only this part can be driven to `theta* = 0`.
pub fn baird_initial_theta() -> Vector {
    let problem = baird();
    let z = linalg::null_space(problem.phi(), 1e-10);
    let theta = baird_canonical_theta();
    &theta - &z * (z.transpose() * &theta)
}

/// Unit null-space vector of the FIM with its sign chosen so that `v^T theta_ref <= 0`; the
/// initial point of the singular experiments. `None` when the FIM is nonsingular.
pub fn null_space_start(fim: &Mat, theta_ref: &Vector) -> Option<Vector> {
    let basis = linalg::null_space(fim, crate::closed_form::NULL_TOL);
    if basis.ncols() == 0 {
        return None;
    }
    let v: Vector = basis.column(0).into_owned();
    Some(if v.dot(theta_ref) > 0.0 { -v } else { v })
}
