//! Tabular MDPs, policies, linear features, and the quantities a target policy induces on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

const PROB_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;

fn check_distribution(row: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidModel(format!("{what} has a negative or non-finite entry {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidModel(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Finite discounted MDP with transition kernel `P(s'|s,a)` and rewards `r(s,a,s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flattened `[s][a][s']`.
    transition: Vec<f64>,
    /// Flattened `[s][a][s']`.
    reward: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidModel("state and action counts must be positive".into()));
        }
        let len = n_states * n_actions * n_states;
        if transition.len() != len || reward.len() != len {
            return Err(Error::Dimension(format!(
                "expected {len} transition and reward entries, got {} and {}",
                transition.len(),
                reward.len()
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidModel(format!("discount {gamma} outside (0, 1)")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidModel("non-finite reward".into()));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            let (s, a) = (i / n_actions, i % n_actions);
            check_distribution(row.iter().copied(), &format!("P(.|{s},{a})"))?;
        }
        Ok(TabularMdp { n_states, n_actions, transition, reward, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn idx(&self, s: usize, a: usize, next: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + next
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.idx(s, a, next)]
    }

    pub fn r(&self, s: usize, a: usize, next: usize) -> f64 {
        self.reward[self.idx(s, a, next)]
    }

    /// Next-state distribution `P(.|s,a)`.
    pub fn next_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.idx(s, a, 0);
        &self.transition[start..start + self.n_states]
    }

    pub fn reward_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.idx(s, a, 0);
        &self.reward[start..start + self.n_states]
    }
}

/// Stochastic policy `pi(a|s)` stored as an `|S| x |A|` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    probs: Mat,
}

impl Policy {
    pub fn new(probs: Mat) -> Result<Self> {
        for (s, row) in probs.row_iter().enumerate() {
            check_distribution(row.iter().copied(), &format!("policy row {s}"))?;
        }
        Ok(Policy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy { probs: Mat::from_element(n_states, n_actions, 1.0 / n_actions as f64) }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn matrix(&self) -> &Mat {
        &self.probs
    }
}

/// Feature matrix `Phi` with rows `phi(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    phi: Mat,
    full_rank: bool,
}

impl FeatureMap {
    /// Requires full column rank.
    pub fn new(phi: Mat) -> Result<Self> {
        let f = Self::allow_rank_deficient(phi)?;
        if !f.full_rank {
            return Err(Error::InvalidModel(format!(
                "feature matrix {}x{} does not have full column rank",
                f.phi.nrows(),
                f.phi.ncols()
            )));
        }
        Ok(f)
    }

    /// Accepts a rank-deficient feature matrix (Baird's star features need this).
    pub fn allow_rank_deficient(phi: Mat) -> Result<Self> {
        if phi.ncols() == 0 || phi.nrows() == 0 {
            return Err(Error::InvalidModel("empty feature matrix".into()));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel("non-finite feature".into()));
        }
        let full_rank = linalg::rank(&phi, RANK_TOL) == phi.ncols();
        Ok(FeatureMap { phi, full_rank })
    }

    pub fn is_full_rank(&self) -> bool {
        self.full_rank
    }

    pub fn matrix(&self) -> &Mat {
        &self.phi
    }

    pub fn n_features(&self) -> usize {
        self.phi.ncols()
    }
}

/// Strictly positive state weighting `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDistribution {
    d: Vector,
}

impl StateDistribution {
    pub fn new(d: Vector) -> Result<Self> {
        if d.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidModel("state distribution must be strictly positive".into()));
        }
        check_distribution(d.iter().copied(), "state distribution")?;
        Ok(StateDistribution { d })
    }

    pub fn uniform(n: usize) -> Self {
        StateDistribution { d: Vector::from_element(n, 1.0 / n as f64) }
    }

    pub fn vector(&self) -> &Vector {
        &self.d
    }

    pub fn diag(&self) -> Mat {
        Mat::from_diagonal(&self.d)
    }
}

/// `P^pi(s,s') = sum_a pi(a|s) P(s'|s,a)` and `R^pi(s) = sum_{a,s'} pi(a|s) P(s'|s,a) r(s,a,s')`.
pub fn induce_target_kernel(mdp: &TabularMdp, target: &Policy) -> Result<(Mat, Vector)> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    if target.matrix().shape() != (n, na) {
        return Err(Error::Dimension(format!(
            "policy is {:?}, MDP has {n} states and {na} actions",
            target.matrix().shape()
        )));
    }
    let mut p = Mat::zeros(n, n);
    let mut r = Vector::zeros(n);
    for s in 0..n {
        for a in 0..na {
            let pa = target.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (next, (&pn, &rw)) in mdp.next_row(s, a).iter().zip(mdp.reward_row(s, a)).enumerate() {
                p[(s, next)] += pa * pn;
                r[s] += pa * pn * rw;
            }
        }
    }
    Ok((p, r))
}

pub const STATIONARY_MAX_ITERS: usize = 100_000;
pub const STATIONARY_TOL: f64 = 1e-12;

/// Stationary distribution of a row-stochastic matrix by power iteration from the uniform vector.
pub fn stationary_distribution(p: &Mat) -> Result<StateDistribution> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::Dimension("transition matrix must be square".into()));
    }
    let pt = p.transpose();
    let mut d = Vector::from_element(n, 1.0 / n as f64);
    for _ in 0..STATIONARY_MAX_ITERS {
        let mut next = &pt * &d;
        let total = next.sum();
        next /= total;
        let change = (&next - &d).abs().sum();
        d = next;
        if change < STATIONARY_TOL {
            return StateDistribution::new(d);
        }
    }
    Err(Error::NonErgodic { iterations: STATIONARY_MAX_ITERS })
}

/// Solves `(I - gamma P) V = R` by a dense LU solve.
pub fn value_function(p_pi: &Mat, r_pi: &Vector, gamma: f64) -> Result<Vector> {
    let n = p_pi.nrows();
    let a = Mat::identity(n, n) - p_pi * gamma;
    let v = linalg::solve(&a, r_pi)?;
    let residual = (&a * &v - r_pi).amax();
    if !(residual <= 1e-9 * r_pi.amax().max(1.0)) {
        return Err(Error::Numerical(format!("value-function residual {residual}")));
    }
    Ok(v)
}

/// D-weighted least-squares fit `theta* = (Phi^T D Phi)^{-1} Phi^T D V`; pseudoinverse if `Phi`
/// is rank deficient.
pub fn true_projected_solution(phi: &FeatureMap, dist: &StateDistribution, v: &Vector) -> Result<Vector> {
    let f = phi.matrix();
    let d = dist.diag();
    let b = f.transpose() * &d * f;
    let rhs = f.transpose() * &d * v;
    if phi.is_full_rank() {
        let x = linalg::solve_spd(&b, &Mat::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
        Ok(x.column(0).into_owned())
    } else {
        Ok(linalg::pinv(&b, 1e-10) * rhs)
    }
}

/// D-weighted projection `Phi (Phi^T D Phi)^{-1} Phi^T D` onto the feature range.
pub fn projection_matrix(phi: &FeatureMap, dist: &StateDistribution) -> Result<Mat> {
    let f = phi.matrix();
    let d = dist.diag();
    let b = f.transpose() * &d * f;
    let inner = if phi.is_full_rank() {
        linalg::solve_spd(&b, &(f.transpose() * &d))?
    } else {
        linalg::pinv(&b, 1e-10) * f.transpose() * &d
    };
    Ok(f * inner)
}

/// A policy-evaluation problem: MDP, target and behavior policies, features and state weighting,
/// together with the derived `P^pi`, `R^pi`, `V^pi` and `theta*`.
#[derive(Clone, Debug)]
pub struct EvalProblem {
    mdp: TabularMdp,
    target: Policy,
    behavior: Policy,
    features: FeatureMap,
    dist: StateDistribution,
    p_pi: Mat,
    r_pi: Vector,
    v_pi: Vector,
    theta_star: Vector,
}

impl EvalProblem {
    pub fn new(
        mdp: TabularMdp,
        target: Policy,
        behavior: Policy,
        features: FeatureMap,
        dist: StateDistribution,
    ) -> Result<Self> {
        let (n, na) = (mdp.n_states(), mdp.n_actions());
        if behavior.matrix().shape() != (n, na) {
            return Err(Error::Dimension("behavior policy shape does not match the MDP".into()));
        }
        if features.matrix().nrows() != n || dist.vector().len() != n {
            return Err(Error::Dimension("features or distribution do not match the state count".into()));
        }
        for s in 0..n {
            for a in 0..na {
                if target.prob(s, a) > 0.0 && !(behavior.prob(s, a) > 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "behavior policy has no support for action {a} in state {s}"
                    )));
                }
            }
        }
        let (p_pi, r_pi) = induce_target_kernel(&mdp, &target)?;
        let v_pi = value_function(&p_pi, &r_pi, mdp.gamma())?;
        let theta_star = true_projected_solution(&features, &dist, &v_pi)?;
        Ok(EvalProblem { mdp, target, behavior, features, dist, p_pi, r_pi, v_pi, theta_star })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
    pub fn target(&self) -> &Policy {
        &self.target
    }
    pub fn behavior(&self) -> &Policy {
        &self.behavior
    }
    pub fn features(&self) -> &FeatureMap {
        &self.features
    }
    pub fn phi(&self) -> &Mat {
        self.features.matrix()
    }
    pub fn dist(&self) -> &StateDistribution {
        &self.dist
    }
    pub fn gamma(&self) -> f64 {
        self.mdp.gamma()
    }
    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }
    pub fn n_features(&self) -> usize {
        self.features.n_features()
    }
    pub fn p_pi(&self) -> &Mat {
        &self.p_pi
    }
    pub fn r_pi(&self) -> &Vector {
        &self.r_pi
    }
    pub fn v_pi(&self) -> &Vector {
        &self.v_pi
    }
    pub fn theta_star(&self) -> &Vector {
        &self.theta_star
    }

    /// Importance ratio `pi(a|s) / beta(a|s)`.
    pub fn rho(&self, s: usize, a: usize) -> f64 {
        let pa = self.target.prob(s, a);
        if pa == 0.0 {
            0.0
        } else {
            pa / self.behavior.prob(s, a)
        }
    }

    pub fn with_features(&self, features: FeatureMap) -> Result<Self> {
        EvalProblem::new(self.mdp.clone(), self.target.clone(), self.behavior.clone(), features, self.dist.clone())
    }

    pub fn to_file(&self) -> ProblemFile {
        let (n, na) = (self.mdp.n_states(), self.mdp.n_actions());
        let cube = |f: &dyn Fn(usize, usize, usize) -> f64| {
            (0..n)
                .map(|s| (0..na).map(|a| (0..n).map(|t| f(s, a, t)).collect()).collect())
                .collect()
        };
        let rows = |m: &Mat| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        ProblemFile {
            n_states: n,
            n_actions: na,
            gamma: self.gamma(),
            transition: cube(&|s, a, t| self.mdp.p(s, a, t)),
            reward: cube(&|s, a, t| self.mdp.r(s, a, t)),
            phi: rows(self.phi()),
            target: rows(self.target.matrix()),
            behavior: rows(self.behavior.matrix()),
            dist: self.dist.vector().iter().copied().collect(),
            rank_deficient_features: !self.features.is_full_rank(),
        }
    }

    pub fn from_file(file: &ProblemFile) -> Result<Self> {
        let (n, na) = (file.n_states, file.n_actions);
        let flatten = |name: &str, cube: &Vec<Vec<Vec<f64>>>| -> Result<Vec<f64>> {
            if cube.len() != n || cube.iter().any(|r| r.len() != na || r.iter().any(|x| x.len() != n)) {
                return Err(Error::Dimension(format!("field `{name}` must be indexed [{n}][{na}][{n}]")));
            }
            Ok(cube.iter().flatten().flatten().copied().collect())
        };
        let matrix = |name: &str, rows: &Vec<Vec<f64>>, cols: Option<usize>| -> Result<Mat> {
            let c = cols.or_else(|| rows.first().map(|r| r.len())).unwrap_or(0);
            if rows.len() != n || rows.iter().any(|r| r.len() != c) {
                return Err(Error::Dimension(format!("field `{name}` must have {n} rows of equal length")));
            }
            Ok(Mat::from_fn(n, c, |i, j| rows[i][j]))
        };
        let mdp = TabularMdp::new(
            n,
            na,
            flatten("transition", &file.transition)?,
            flatten("reward", &file.reward)?,
            file.gamma,
        )?;
        let phi = matrix("phi", &file.phi, None)?;
        let features = if file.rank_deficient_features {
            FeatureMap::allow_rank_deficient(phi)?
        } else {
            FeatureMap::new(phi)?
        };
        if file.dist.len() != n {
            return Err(Error::Dimension(format!("field `dist` must have {n} entries")));
        }
        EvalProblem::new(
            mdp,
            Policy::new(matrix("target", &file.target, Some(na))?)?,
            Policy::new(matrix("behavior", &file.behavior, Some(na))?)?,
            features,
            StateDistribution::new(Vector::from_vec(file.dist.clone()))?,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)?;
        Self::from_file(&file)
    }
}

/// On-disk problem schema. Arrays are indexed `transition[s][a][s']`, `reward[s][a][s']`,
/// `phi[s][j]`, `target[s][a]`, `behavior[s][a]` and `dist[s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<Vec<f64>>>,
    pub phi: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub behavior: Vec<Vec<f64>>,
    pub dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rank_deficient_features: bool,
}
