//! Deterministic primal-dual gradient dynamics (PDGD) for R-GTD.
//!
//! With `x = [theta; w; lambda]` the continuous-time flow is
//! `x' = (-grad_theta L, -grad_w L, grad_lambda L) = A_bar x + b_vec`, and its Euler discretization
//! with step `alpha` is the mean of the stochastic R-GTD update.

use nalgebra::linalg::Schur;
use serde::{Deserialize, Serialize};

use crate::closed_form::{self, CoreMatrices, SaddleSolution};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

pub const BLOWUP_THRESHOLD: f64 = 1e12;
pub const DEFAULT_DT: f64 = 0.01;
pub const MAX_HALVINGS: u32 = 8;

#[derive(Clone, Debug)]
pub struct PdgdSystem {
    pub a_bar: Mat,
    pub b_vec: Vector,
    /// `[M | B]`, `q x 2q`.
    pub constraint: Mat,
    pub equilibrium: SaddleSolution,
    fim: Mat,
    gram: Mat,
    b: Vector,
    c: f64,
}

impl PdgdSystem {
    pub fn new(cm: &CoreMatrices, c: f64) -> Result<Self> {
        let equilibrium = closed_form::saddle_point(cm, c)?;
        let q = cm.n_features();
        let mut a_bar = Mat::zeros(3 * q, 3 * q);
        a_bar.view_mut((0, 0), (q, q)).copy_from(&(-&cm.gram));
        a_bar.view_mut((0, 2 * q), (q, q)).copy_from(&(-cm.fim.transpose()));
        a_bar.view_mut((q, q), (q, q)).copy_from(&(&cm.gram * -c));
        a_bar.view_mut((q, 2 * q), (q, q)).copy_from(&(-&cm.gram));
        a_bar.view_mut((2 * q, 0), (q, q)).copy_from(&cm.fim);
        a_bar.view_mut((2 * q, q), (q, q)).copy_from(&cm.gram);
        let mut b_vec = Vector::zeros(3 * q);
        b_vec.rows_mut(2 * q, q).copy_from(&cm.b);
        let mut constraint = Mat::zeros(q, 2 * q);
        constraint.view_mut((0, 0), (q, q)).copy_from(&cm.fim);
        constraint.view_mut((0, q), (q, q)).copy_from(&cm.gram);
        Ok(PdgdSystem {
            a_bar,
            b_vec,
            constraint,
            equilibrium,
            fim: cm.fim.clone(),
            gram: cm.gram.clone(),
            b: cm.b.clone(),
            c,
        })
    }

    pub fn n_features(&self) -> usize {
        self.gram.nrows()
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn distance_to_equilibrium(&self, state: &Vector) -> f64 {
        (state - self.equilibrium.stacked()).norm()
    }
}

/// `(-grad_theta L, -grad_w L, grad_lambda L)` at `state`.
///
/// Written as explicit loops with a fixed summation order so an Euler step reproduces a direct
/// implementation of the three update lines bit for bit.
pub fn flow(sys: &PdgdSystem, state: &Vector) -> Result<Vector> {
    let q = sys.n_features();
    if state.len() != 3 * q {
        return Err(Error::Dimension(format!("state has {} entries, expected {}", state.len(), 3 * q)));
    }
    let (theta, w, lambda) = (state.rows(0, q), state.rows(q, q), state.rows(2 * q, q));
    let (m, bm, c) = (&sys.fim, &sys.gram, sys.c);
    let mut out = Vector::zeros(3 * q);
    for i in 0..q {
        let mut b_theta = 0.0;
        let mut mt_lambda = 0.0;
        let mut b_w = 0.0;
        let mut b_lambda = 0.0;
        let mut m_theta = 0.0;
        for j in 0..q {
            b_theta += bm[(i, j)] * theta[j];
            mt_lambda += m[(j, i)] * lambda[j];
            b_w += bm[(i, j)] * w[j];
            b_lambda += bm[(i, j)] * lambda[j];
            m_theta += m[(i, j)] * theta[j];
        }
        out[i] = -(b_theta + mt_lambda);
        out[q + i] = -(c * b_w + b_lambda);
        out[2 * q + i] = m_theta + b_w + sys.b[i];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

#[derive(Clone, Debug, Serialize)]
pub struct OdeTrace {
    /// Step actually used (after any halving).
    pub dt: f64,
    pub halvings: u32,
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    #[serde(serialize_with = "linalg::ser_vector")]
    pub final_state: Vector,
}

impl OdeTrace {
    /// Least-squares fit of `ln dist` against `t` over the final half of the trace:
    /// `(rate, intercept, r_squared)`.
    pub fn log_linear_fit(&self) -> Option<(f64, f64, f64)> {
        let start = self.times.len() / 2;
        let (t, y): (Vec<f64>, Vec<f64>) = self.times[start..]
            .iter()
            .zip(&self.distances[start..])
            .filter(|(_, d)| **d > 0.0)
            .map(|(t, d)| (*t, d.ln()))
            .unzip();
        (t.len() >= 3).then(|| linalg::fit_line(&t, &y))
    }

    pub fn shrink_factor(&self) -> f64 {
        self.distances[0] / self.final_distance()
    }

    pub fn final_distance(&self) -> f64 {
        *self.distances.last().expect("non-empty trace")
    }
}

fn advance(sys: &PdgdSystem, x: &Vector, dt: f64, mode: Integrator) -> Result<Vector> {
    match mode {
        Integrator::Euler => {
            let f = flow(sys, x)?;
            let mut next = x.clone();
            for i in 0..x.len() {
                next[i] += dt * f[i];
            }
            Ok(next)
        }
        Integrator::Rk4 => {
            let k1 = flow(sys, x)?;
            let k2 = flow(sys, &(x + &k1 * (dt / 2.0)))?;
            let k3 = flow(sys, &(x + &k2 * (dt / 2.0)))?;
            let k4 = flow(sys, &(x + &k3 * dt))?;
            Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
        }
    }
}

fn integrate_once(sys: &PdgdSystem, state0: &Vector, dt: f64, steps: usize, mode: Integrator) -> Result<(Vec<f64>, Vector)> {
    let mut x = state0.clone();
    let mut distances = Vec::with_capacity(steps + 1);
    distances.push(sys.distance_to_equilibrium(&x));
    for k in 0..steps {
        x = advance(sys, &x, dt, mode)?;
        let norm = x.norm();
        if !norm.is_finite() || norm > BLOWUP_THRESHOLD {
            return Err(Error::Numerical(format!("integration blew up at step {}", k + 1)));
        }
        distances.push(sys.distance_to_equilibrium(&x));
    }
    Ok((distances, x))
}

/// Fixed-step integration for `steps` steps from `state0`. On blow-up the step is halved (and the
/// step count doubled, keeping the horizon) up to [`MAX_HALVINGS`] times.
pub fn integrate(sys: &PdgdSystem, state0: &Vector, dt: f64, steps: usize, mode: Integrator) -> Result<OdeTrace> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut last_err = None;
    for halvings in 0..=MAX_HALVINGS {
        let scale = 1usize << halvings;
        let h = dt / scale as f64;
        match integrate_once(sys, state0, h, steps * scale, mode) {
            Ok((distances, final_state)) => {
                let times = (0..distances.len()).map(|k| k as f64 * h).collect();
                return Ok(OdeTrace { dt: h, halvings, times, distances, final_state });
            }
            Err(e @ Error::Numerical(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

#[derive(Clone, Debug, Serialize)]
pub struct RankCertificate {
    pub full_row_rank: bool,
    pub smallest_singular_value: f64,
    pub largest_singular_value: f64,
}

/// Row-rank test of `block` by its smallest singular value relative to the largest.
pub fn block_rank_certificate(block: &Mat, rel_tol: f64) -> RankCertificate {
    let sv = linalg::singular_values(block);
    let largest = sv.first().copied().unwrap_or(0.0);
    let smallest = if sv.len() < block.nrows() { 0.0 } else { sv.last().copied().unwrap_or(0.0) };
    RankCertificate {
        full_row_rank: largest > 0.0 && smallest > rel_tol * largest,
        smallest_singular_value: smallest,
        largest_singular_value: largest,
    }
}

/// Row rank of the constraint block `[M | B]`.
pub fn rank_certificate(sys: &PdgdSystem, rel_tol: f64) -> RankCertificate {
    block_rank_certificate(&sys.constraint, rel_tol)
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumCertificate {
    /// `(re, im)` pairs sorted by descending real part.
    pub eigenvalues: Vec<(f64, f64)>,
    pub spectral_abscissa: f64,
    pub hurwitz: bool,
}

pub const HURWITZ_MARGIN: f64 = 1e-10;

/// Eigenvalues of `A_bar` from a real Schur decomposition.
pub fn spectrum_certificate(sys: &PdgdSystem) -> Result<SpectrumCertificate> {
    eigen_certificate(&sys.a_bar)
}

pub fn eigen_certificate(a: &Mat) -> Result<SpectrumCertificate> {
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("eigenvalue iteration did not converge".into()))?;
    let mut eigenvalues: Vec<(f64, f64)> = schur.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
    eigenvalues.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let spectral_abscissa = eigenvalues.first().map_or(f64::NEG_INFINITY, |e| e.0);
    Ok(SpectrumCertificate { hurwitz: spectral_abscissa < -HURWITZ_MARGIN, eigenvalues, spectral_abscissa })
}
