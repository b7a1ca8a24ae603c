//! Stochastic learners: regularized GTD (R-GTD), GTD2 and off-policy TD(0).
//!
//! Samples are drawn i.i.d.: `s ~ d`, `a ~ beta(.|s)`, `s' ~ P(.|s,a)`, with importance ratio
//! `rho = pi(a|s) / beta(a|s)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{vector_norm, Vector};
use crate::mdp::EvalProblem;
use crate::rng::{cumulative, Xoshiro256};

/// `||theta||_2` above this flags a run as diverged and halts it.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
pub const DEFAULT_STRIDE: u64 = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerState {
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iter: u64,
}

impl LearnerState {
    pub fn new(theta: Vec<f64>) -> Self {
        let q = theta.len();
        LearnerState { theta, w: vec![0.0; q], lambda: vec![0.0; q], iter: 0 }
    }

    pub fn zeros(q: usize) -> Self {
        Self::new(vec![0.0; q])
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.w).chain(&self.lambda).all(|x| x.is_finite())
    }

    /// Stacked `[theta; w; lambda]`.
    pub fn stacked(&self) -> Vector {
        Vector::from_iterator(
            3 * self.theta.len(),
            self.theta.iter().chain(&self.w).chain(&self.lambda).copied(),
        )
    }
}

/// Step-size sequence `alpha_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `alpha_k = 1 / (k + 30)`.
    #[default]
    Standard,
    Constant { alpha: f64 },
    /// `alpha_k = scale / (k + offset)`.
    Harmonic { offset: f64, scale: f64 },
}

impl StepSchedule {
    pub fn alpha(&self, k: u64) -> f64 {
        match *self {
            StepSchedule::Standard => 1.0 / (k as f64 + 30.0),
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::Harmonic { offset, scale } => scale / (k as f64 + offset),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Standard => true,
            StepSchedule::Constant { alpha } => alpha > 0.0 && alpha.is_finite(),
            StepSchedule::Harmonic { offset, scale } => offset > 0.0 && scale > 0.0 && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config { field: "schedule".into(), reason: format!("{self:?} has a non-positive step") })
        }
    }
}

/// One observed transition with the feature rows of `s` and `s'`.
#[derive(Clone, Copy, Debug)]
pub struct TransitionSample<'a> {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub r: f64,
    pub rho: f64,
    pub phi: &'a [f64],
    pub phi_next: &'a [f64],
}

/// Precomputed sampling tables for one problem.
#[derive(Clone, Debug)]
pub struct Sampler {
    n_states: usize,
    n_actions: usize,
    q: usize,
    gamma: f64,
    state_cdf: Vec<f64>,
    /// Per state, over actions.
    action_cdf: Vec<f64>,
    /// Per `(s, a)`, over next states.
    next_cdf: Vec<f64>,
    rewards: Vec<f64>,
    rho: Vec<f64>,
    /// Row-major feature rows.
    phi: Vec<f64>,
}

impl Sampler {
    pub fn new(problem: &EvalProblem) -> Self {
        let mdp = problem.mdp();
        let (n, na) = (mdp.n_states(), mdp.n_actions());
        let q = problem.n_features();
        let mut action_cdf = Vec::with_capacity(n * na);
        let mut next_cdf = Vec::with_capacity(n * na * n);
        let mut rewards = Vec::with_capacity(n * na * n);
        let mut rho = Vec::with_capacity(n * na);
        for s in 0..n {
            action_cdf.extend(cumulative((0..na).map(|a| problem.behavior().prob(s, a))));
            for a in 0..na {
                next_cdf.extend(cumulative(mdp.next_row(s, a).iter().copied()));
                rewards.extend_from_slice(mdp.reward_row(s, a));
                rho.push(problem.rho(s, a));
            }
        }
        let phi_m = problem.phi();
        let phi = (0..n).flat_map(|s| (0..q).map(move |j| phi_m[(s, j)])).collect();
        Sampler {
            n_states: n,
            n_actions: na,
            q,
            gamma: problem.gamma(),
            state_cdf: cumulative(problem.dist().vector().iter().copied()),
            action_cdf,
            next_cdf,
            rewards,
            rho,
            phi,
        }
    }

    pub fn n_features(&self) -> usize {
        self.q
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn phi_row(&self, s: usize) -> &[f64] {
        &self.phi[s * self.q..(s + 1) * self.q]
    }

    pub fn sample(&self, rng: &mut Xoshiro256) -> TransitionSample<'_> {
        let (n, na) = (self.n_states, self.n_actions);
        let s = rng.categorical(&self.state_cdf);
        let a = rng.categorical(&self.action_cdf[s * na..(s + 1) * na]);
        let sa = s * na + a;
        let s_next = rng.categorical(&self.next_cdf[sa * n..(sa + 1) * n]);
        TransitionSample {
            s,
            a,
            s_next,
            r: self.rewards[sa * n + s_next],
            rho: self.rho[sa],
            phi: self.phi_row(s),
            phi_next: self.phi_row(s_next),
        }
    }

    /// Every `(s, a, s')` outcome with probability `d(s) beta(a|s) P(s'|s,a) > 0`.
    pub fn outcomes(&self) -> Vec<(f64, TransitionSample<'_>)> {
        let (n, na) = (self.n_states, self.n_actions);
        let mut out = Vec::new();
        let diff = |cdf: &[f64], i: usize| if i == 0 { cdf[0] } else { cdf[i] - cdf[i - 1] };
        for s in 0..n {
            let ds = diff(&self.state_cdf, s);
            let acdf = &self.action_cdf[s * na..(s + 1) * na];
            for a in 0..na {
                let sa = s * na + a;
                let ncdf = &self.next_cdf[sa * n..(sa + 1) * n];
                for s_next in 0..n {
                    let w = ds * diff(acdf, a) * diff(ncdf, s_next);
                    if w > 0.0 {
                        out.push((
                            w,
                            TransitionSample {
                                s,
                                a,
                                s_next,
                                r: self.rewards[sa * n + s_next],
                                rho: self.rho[sa],
                                phi: self.phi_row(s),
                                phi_next: self.phi_row(s_next),
                            },
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Convenience wrapper drawing one sample from a freshly built [`Sampler`].
pub fn sample_transition(problem: &EvalProblem, rng: &mut Xoshiro256) -> (usize, usize, usize, f64, f64) {
    let sampler = Sampler::new(problem);
    let t = sampler.sample(rng);
    (t.s, t.a, t.s_next, t.r, t.rho)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Off-policy TD error `rho r + gamma rho phi'^T theta - phi^T theta`.
pub fn td_error(sample: &TransitionSample<'_>, theta: &[f64], gamma: f64) -> f64 {
    sample.rho * sample.r + gamma * sample.rho * dot(sample.phi_next, theta) - dot(sample.phi, theta)
}

/// R-GTD update:
///
/// ```text
/// theta += alpha [(phi - gamma rho phi') (phi^T lambda) - phi (phi^T theta)]
/// w     += alpha (-c phi^T w - phi^T lambda) phi
/// lambda += alpha (delta + phi^T w) phi
/// ```
pub fn rgtd_step(state: &mut LearnerState, sample: &TransitionSample<'_>, gamma: f64, alpha: f64, c: f64) {
    let delta = td_error(sample, &state.theta, gamma);
    let phi_lambda = dot(sample.phi, &state.lambda);
    let phi_theta = dot(sample.phi, &state.theta);
    let phi_w = dot(sample.phi, &state.w);
    let w_coef = alpha * (-c * phi_w - phi_lambda);
    let lambda_coef = alpha * (delta + phi_w);
    for j in 0..state.theta.len() {
        let (p, pn) = (sample.phi[j], sample.phi_next[j]);
        state.theta[j] += alpha * ((p - gamma * sample.rho * pn) * phi_lambda - p * phi_theta);
        state.w[j] += w_coef * p;
        state.lambda[j] += lambda_coef * p;
    }
    state.iter += 1;
}

/// GTD2 update: `lambda += alpha (delta - phi^T lambda) phi`,
/// `theta += alpha (phi - gamma rho phi') (phi^T lambda)`; `w` is unused.
pub fn gtd2_step(state: &mut LearnerState, sample: &TransitionSample<'_>, gamma: f64, alpha: f64) {
    let delta = td_error(sample, &state.theta, gamma);
    let phi_lambda = dot(sample.phi, &state.lambda);
    let lambda_coef = alpha * (delta - phi_lambda);
    for j in 0..state.theta.len() {
        let (p, pn) = (sample.phi[j], sample.phi_next[j]);
        state.theta[j] += alpha * (p - gamma * sample.rho * pn) * phi_lambda;
        state.lambda[j] += lambda_coef * p;
    }
    state.iter += 1;
}

/// Off-policy TD(0): `theta += alpha rho (r + gamma phi'^T theta - phi^T theta) phi`.
pub fn td0_step(state: &mut LearnerState, sample: &TransitionSample<'_>, gamma: f64, alpha: f64) {
    let delta = sample.r + gamma * dot(sample.phi_next, &state.theta) - dot(sample.phi, &state.theta);
    let coef = alpha * sample.rho * delta;
    for j in 0..state.theta.len() {
        state.theta[j] += coef * sample.phi[j];
    }
    state.iter += 1;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Algorithm {
    Rgtd { c: f64 },
    Gtd2,
    Td0,
}

impl Algorithm {
    pub fn tag(&self) -> &'static str {
        match self {
            Algorithm::Rgtd { .. } => "rgtd",
            Algorithm::Gtd2 => "gtd2",
            Algorithm::Td0 => "td0",
        }
    }

    pub fn c(&self) -> Option<f64> {
        match *self {
            Algorithm::Rgtd { c } => Some(c),
            _ => None,
        }
    }

    /// Applies one update with step `alpha`.
    pub fn step(&self, state: &mut LearnerState, sample: &TransitionSample<'_>, gamma: f64, alpha: f64) {
        match *self {
            Algorithm::Rgtd { c } => rgtd_step(state, sample, gamma, alpha, c),
            Algorithm::Gtd2 => gtd2_step(state, sample, gamma, alpha),
            Algorithm::Td0 => td0_step(state, sample, gamma, alpha),
        }
    }
}

/// Exact expected update direction `E[(theta+ - theta, w+ - w, lambda+ - lambda)] / alpha` at
/// `state`, by enumeration of every outcome weighted by `d(s) beta(a|s) P(s'|s,a)`.
pub fn expected_increment(sampler: &Sampler, algorithm: Algorithm, state: &LearnerState) -> Vector {
    let q = state.theta.len();
    let mut total = Vector::zeros(3 * q);
    for (weight, sample) in sampler.outcomes() {
        total += single_increment(sampler.gamma(), algorithm, state, &sample) * weight;
    }
    total
}

/// Update direction for one sample (the step with `alpha = 1`), stacked `[theta; w; lambda]`.
pub fn single_increment(gamma: f64, algorithm: Algorithm, state: &LearnerState, sample: &TransitionSample<'_>) -> Vector {
    let mut next = state.clone();
    algorithm.step(&mut next, sample, gamma, 1.0);
    next.stacked() - state.stacked()
}

/// Inputs of a single seeded learner run.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    pub schedule: StepSchedule,
    pub iters: u64,
    pub stride: u64,
    pub theta0: Vec<f64>,
    /// Reference point for the error series `||theta_k - theta_ref||_2`.
    pub theta_ref: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Iteration index of each logged error.
    pub iters: Vec<u64>,
    pub errors: Vec<f64>,
    pub final_state: LearnerState,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
}

impl Trajectory {
    pub fn initial_error(&self) -> f64 {
        self.errors[0]
    }

    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("trajectory has at least one entry")
    }

    /// Logged error at the largest logged iteration `<= k`.
    pub fn error_at(&self, k: u64) -> f64 {
        let idx = self.iters.partition_point(|&i| i <= k).saturating_sub(1);
        self.errors[idx]
    }
}

/// Logged iterations: `0, stride, 2 stride, ...` below `iters`, then `iters` itself.
pub fn log_points(iters: u64, stride: u64) -> Vec<u64> {
    let mut pts: Vec<u64> = (0..iters).step_by(stride.max(1) as usize).collect();
    pts.push(iters);
    if iters == 0 {
        pts.truncate(1);
    }
    pts
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs one learner for `spec.iters` updates from `spec.theta0` (with `w = lambda = 0`).
///
/// A run whose `theta` becomes non-finite or exceeds [`DIVERGENCE_THRESHOLD`] in norm halts; the
/// remaining log points repeat the error at the halting iteration.
pub fn run(sampler: &Sampler, spec: &RunSpec, seed: u64) -> Result<Trajectory> {
    let q = sampler.n_features();
    if spec.theta0.len() != q || spec.theta_ref.len() != q {
        return Err(Error::Dimension(format!("theta0 and theta_ref must have {q} entries")));
    }
    if spec.stride == 0 {
        return Err(Error::Config { field: "stride".into(), reason: "must be positive".into() });
    }
    spec.schedule.validate()?;
    let points = log_points(spec.iters, spec.stride);
    let mut errors = Vec::with_capacity(points.len());
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let mut state = LearnerState::new(spec.theta0.clone());
    let gamma = sampler.gamma();
    let mut diverged_at = None;
    let mut next_point = 0;
    let mut k = 0u64;
    loop {
        if next_point < points.len() && points[next_point] == k {
            errors.push(distance(&state.theta, &spec.theta_ref));
            next_point += 1;
        }
        if k == spec.iters {
            break;
        }
        let sample = sampler.sample(&mut rng);
        spec.algorithm.step(&mut state, &sample, gamma, spec.schedule.alpha(k));
        k += 1;
        if !state.is_finite() || vector_norm(&state.theta) > DIVERGENCE_THRESHOLD {
            diverged_at = Some(k);
            let err = distance(&state.theta, &spec.theta_ref);
            let err = if err.is_finite() { err } else { f64::INFINITY };
            errors.resize(points.len(), err);
            break;
        }
    }
    Ok(Trajectory {
        algorithm: spec.algorithm,
        seed,
        iters: points,
        errors,
        final_state: state,
        diverged: diverged_at.is_some(),
        diverged_at,
    })
}
