//! Closed-form quantities of the regularized saddle-point formulation.
//!
//! With `M = Phi^T D (gamma P^pi - I) Phi` (the feature interaction matrix), `B = Phi^T D Phi`,
//! `b = Phi^T D R^pi` and `G = M^T B^{-1} M`, the MSPBE is `1/2 (M theta + b)^T B^{-1} (M theta + b)`,
//! its stationary points form the affine set `{theta : G theta = -M^T B^{-1} b}`, and the
//! regularized solution with penalty `c` solves `(G + B / c) theta = -M^T B^{-1} b`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::mdp::EvalProblem;

/// Singular values below `NULL_TOL * sigma_max` are treated as zero.
pub const NULL_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct CoreMatrices {
    /// Feature interaction matrix `M`.
    pub fim: Mat,
    /// `B = Phi^T D Phi`, positive definite.
    pub gram: Mat,
    pub b: Vector,
    /// `G = M^T B^{-1} M`.
    pub g: Mat,
    /// `K = G^{-1} B G^{-1} M^T B^{-1} b`; `None` when `G` is singular.
    pub k: Option<Vector>,
    pub phi: Mat,
    gram_inv: Mat,
}

pub fn assemble(problem: &EvalProblem) -> Result<CoreMatrices> {
    if !problem.features().is_full_rank() {
        return Err(Error::InvalidModel(
            "Phi^T D Phi is singular for rank-deficient features; closed-form analysis needs full column rank".into(),
        ));
    }
    let phi = problem.phi().clone();
    let n = problem.n_states();
    let d = problem.dist().diag();
    let dphi = &d * &phi;
    let fim = dphi.transpose() * (problem.p_pi() * problem.gamma() - Mat::identity(n, n)) * &phi;
    let gram = phi.transpose() * &dphi;
    let b = dphi.transpose() * problem.r_pi();
    CoreMatrices::from_parts(fim, gram, b, phi)
}

impl CoreMatrices {
    /// Builds the derived quantities from `M`, `B`, `b` and `Phi` directly. `B` must be positive
    /// definite.
    pub fn from_parts(fim: Mat, gram: Mat, b: Vector, phi: Mat) -> Result<CoreMatrices> {
        let q = gram.nrows();
        if fim.shape() != (q, q) || b.len() != q || phi.ncols() != q {
            return Err(Error::Dimension(format!("M, B, b and Phi must agree on q = {q}")));
        }
        let gram = linalg::sym(&gram);
        let gram_inv = linalg::sym(&linalg::solve_spd(&gram, &Mat::identity(q, q))?);
        let g = linalg::sym(&(fim.transpose() * &gram_inv * &fim));
        let mut cm = CoreMatrices { fim, gram, b, g, k: None, phi, gram_inv };
        let sd = SpectralDecomp::new(&cm.g, NULL_TOL);
        if sd.nullity() == 0 {
            let g_inv = linalg::inverse(&cm.g)?;
            cm.k = Some(&g_inv * &cm.gram * &g_inv * cm.normal_rhs());
        }
        Ok(cm)
    }

    pub fn n_features(&self) -> usize {
        self.gram.nrows()
    }

    pub fn gram_inv(&self) -> &Mat {
        &self.gram_inv
    }

    /// `M^T B^{-1} b`, the right-hand side of the normal equation (up to sign).
    pub fn normal_rhs(&self) -> Vector {
        self.fim.transpose() * (&self.gram_inv * &self.b)
    }

    /// Projected Bellman residual `M theta + b`.
    pub fn pbe_residual(&self, theta: &Vector) -> Vector {
        &self.fim * theta + &self.b
    }

    pub fn spectral(&self) -> SpectralDecomp {
        SpectralDecomp::new(&self.g, NULL_TOL)
    }

    pub fn is_singular(&self) -> bool {
        self.k.is_none()
    }
}

/// Pseudoinverse, null-space basis and projectors of a symmetric positive semidefinite matrix.
#[derive(Clone, Debug)]
pub struct SpectralDecomp {
    pub pinv: Mat,
    /// Orthonormal columns spanning the null space.
    pub null_basis: Mat,
    pub null_projector: Mat,
    pub range_projector: Mat,
    /// Descending.
    pub singular_values: Vec<f64>,
}

impl SpectralDecomp {
    pub fn new(g: &Mat, rel_tol: f64) -> Self {
        let q = g.nrows();
        let dec = linalg::svd(g);
        let smax = dec.singular_values.first().copied().unwrap_or(0.0);
        let mut pinv = Mat::zeros(q, q);
        let mut null_cols = Vec::new();
        for (i, &s) in dec.singular_values.iter().enumerate() {
            if smax > 0.0 && s > rel_tol * smax {
                pinv += dec.v.column(i) * dec.u.column(i).transpose() / s;
            } else {
                null_cols.push(i);
            }
        }
        let null_basis = Mat::from_fn(q, null_cols.len(), |r, c| dec.v[(r, null_cols[c])]);
        let null_projector = &null_basis * null_basis.transpose();
        let range_projector = Mat::identity(q, q) - &null_projector;
        SpectralDecomp { pinv, null_basis, null_projector, range_projector, singular_values: dec.singular_values }
    }

    pub fn nullity(&self) -> usize {
        self.null_basis.ncols()
    }
}

/// `(G + Pi_N / c)^{-1} = G^+ + c Pi_N`.
pub fn regularized_inverse(sd: &SpectralDecomp, c: f64) -> Result<Mat> {
    check_c(c)?;
    Ok(&sd.pinv + &sd.null_projector * c)
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("regularization c must be positive and finite, got {c}")));
    }
    Ok(())
}

pub fn mspbe(cm: &CoreMatrices, theta: &Vector) -> f64 {
    let r = cm.pbe_residual(theta);
    0.5 * r.dot(&(&cm.gram_inv * &r))
}

/// `M^T B^{-1} (M theta + b)`.
pub fn mspbe_gradient(cm: &CoreMatrices, theta: &Vector) -> Vector {
    cm.fim.transpose() * (&cm.gram_inv * cm.pbe_residual(theta))
}

/// Regularized objective `c * MSPBE(theta) + 1/2 theta^T B theta`, minimized by [`rgtd_solution`].
pub fn regularized_objective(cm: &CoreMatrices, c: f64, theta: &Vector) -> f64 {
    c * mspbe(cm, theta) + 0.5 * theta.dot(&(&cm.gram * theta))
}

/// Stationary set `theta_p + span(null_basis)` of the MSPBE.
#[derive(Clone, Debug, Serialize)]
pub struct AffineSolutionSet {
    #[serde(serialize_with = "linalg::ser_vector")]
    pub particular: Vector,
    #[serde(serialize_with = "linalg::ser_matrix")]
    pub null_basis: Mat,
}

impl AffineSolutionSet {
    pub fn is_singleton(&self) -> bool {
        self.null_basis.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.null_basis.ncols()
    }

    pub fn point(&self, z: &Vector) -> Vector {
        &self.particular + &self.null_basis * z
    }

    pub fn null_projector(&self) -> Mat {
        &self.null_basis * self.null_basis.transpose()
    }

    /// `theta - Pi_N theta` for the particular solution: the member orthogonal to the null space.
    pub fn orthogonal_member(&self) -> Vector {
        &self.particular - self.null_projector() * &self.particular
    }
}

pub fn gtd2_solutions(cm: &CoreMatrices, rel_tol: f64) -> AffineSolutionSet {
    let sd = SpectralDecomp::new(&cm.g, rel_tol);
    AffineSolutionSet { particular: -(&sd.pinv * cm.normal_rhs()), null_basis: sd.null_basis }
}

/// `theta_RGTD = -(G + B / c)^{-1} M^T B^{-1} b`.
pub fn rgtd_solution(cm: &CoreMatrices, c: f64) -> Result<Vector> {
    check_c(c)?;
    let lhs = &cm.g + &cm.gram / c;
    let rhs = -cm.normal_rhs();
    let x = linalg::solve_spd(&linalg::sym(&lhs), &Mat::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
    Ok(x.column(0).into_owned())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaddleSolution {
    #[serde(serialize_with = "linalg::ser_vector")]
    pub theta: Vector,
    #[serde(serialize_with = "linalg::ser_vector")]
    pub w: Vector,
    #[serde(serialize_with = "linalg::ser_vector")]
    pub lambda: Vector,
    pub c: f64,
}

impl SaddleSolution {
    /// Stacked `[theta; w; lambda]`.
    pub fn stacked(&self) -> Vector {
        let q = self.theta.len();
        Vector::from_fn(3 * q, |i, _| match i / q {
            0 => self.theta[i],
            1 => self.w[i - q],
            _ => self.lambda[i - 2 * q],
        })
    }
}

/// Lagrangian `c/2 w^T B w + 1/2 theta^T B theta + lambda^T (b + M theta + B w)`.
pub fn lagrangian(cm: &CoreMatrices, c: f64, theta: &Vector, w: &Vector, lambda: &Vector) -> f64 {
    0.5 * c * w.dot(&(&cm.gram * w))
        + 0.5 * theta.dot(&(&cm.gram * theta))
        + lambda.dot(&(cm.pbe_residual(theta) + &cm.gram * w))
}

/// Gradients `(d/dtheta, d/dw, d/dlambda)` of [`lagrangian`].
pub fn lagrangian_gradients(
    cm: &CoreMatrices,
    c: f64,
    theta: &Vector,
    w: &Vector,
    lambda: &Vector,
) -> (Vector, Vector, Vector) {
    let g_theta = &cm.gram * theta + cm.fim.transpose() * lambda;
    let g_w = &cm.gram * w * c + &cm.gram * lambda;
    let g_lambda = cm.pbe_residual(theta) + &cm.gram * w;
    (g_theta, g_w, g_lambda)
}

/// KKT system matrix in `[theta; w; lambda]` ordering.
pub fn kkt_matrix(cm: &CoreMatrices, c: f64) -> Mat {
    let q = cm.n_features();
    let mut k = Mat::zeros(3 * q, 3 * q);
    k.view_mut((0, 0), (q, q)).copy_from(&cm.gram);
    k.view_mut((0, 2 * q), (q, q)).copy_from(&cm.fim.transpose());
    k.view_mut((q, q), (q, q)).copy_from(&(&cm.gram * c));
    k.view_mut((q, 2 * q), (q, q)).copy_from(&cm.gram);
    k.view_mut((2 * q, 0), (q, q)).copy_from(&cm.fim);
    k.view_mut((2 * q, q), (q, q)).copy_from(&cm.gram);
    k
}

/// Saddle point of the Lagrangian from a direct solve of the full KKT system; valid whether or
/// not `M` is singular.
pub fn saddle_point(cm: &CoreMatrices, c: f64) -> Result<SaddleSolution> {
    check_c(c)?;
    let q = cm.n_features();
    let mut rhs = Vector::zeros(3 * q);
    rhs.rows_mut(2 * q, q).copy_from(&(-&cm.b));
    let x = linalg::solve(&kkt_matrix(cm, c), &rhs)
        .map_err(|_| Error::Numerical("KKT system is singular despite B > 0".into()))?;
    Ok(SaddleSolution {
        theta: x.rows(0, q).into_owned(),
        w: x.rows(q, q).into_owned(),
        lambda: x.rows(2 * q, q).into_owned(),
        c,
    })
}

/// Norms of the three Lagrangian gradients at `sol`.
pub fn kkt_residuals(cm: &CoreMatrices, sol: &SaddleSolution) -> [f64; 3] {
    let (a, b, c) = lagrangian_gradients(cm, sol.c, &sol.theta, &sol.w, &sol.lambda);
    [a.norm(), b.norm(), c.norm()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `log r` against `log c`.
pub fn fit_log_log(cs: &[f64], rs: &[f64]) -> Option<SlopeFit> {
    if cs.len() < 3 || rs.iter().any(|&r| !(r > 0.0)) {
        return None;
    }
    let x: Vec<f64> = cs.iter().map(|c| c.ln()).collect();
    let y: Vec<f64> = rs.iter().map(|r| r.ln()).collect();
    let (slope, intercept, r_squared) = linalg::fit_line(&x, &y);
    Some(SlopeFit { slope, intercept, r_squared })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExpansionRow {
    pub c: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionReport {
    pub singular: bool,
    pub c0: f64,
    pub rows: Vec<ExpansionRow>,
    /// `None` when a residual is exactly zero (no log-log fit exists).
    pub fit: Option<SlopeFit>,
    /// `||Phi||_2 ||G^{-1} B G^{-1} B G^{-1}||_2 ||M^T B^{-1} b||_2`; nonsingular case only.
    pub gamma_const: Option<f64>,
    /// Large-c target used by the residual: `theta_GTD2 - Pi_N theta_GTD2`, or `theta_GTD2`.
    #[serde(serialize_with = "linalg::ser_vector")]
    pub limit: Vector,
    /// The `B`-norm minimal member of the solution set, which is the true large-c limit of
    /// `theta_RGTD`; it coincides with `limit` whenever `B` maps the null space into itself.
    #[serde(serialize_with = "linalg::ser_vector")]
    pub b_weighted_limit: Vector,
}

/// Expansion threshold `c0`: `||B - Pi_N||_2` if `G` is singular, `||G^{-1} B||_2` otherwise.
pub fn expansion_threshold(cm: &CoreMatrices, set: &AffineSolutionSet) -> Result<f64> {
    if set.is_singleton() {
        Ok(linalg::spectral_norm(&(linalg::inverse(&cm.g)? * &cm.gram)))
    } else {
        Ok(linalg::spectral_norm(&(&cm.gram - set.null_projector())))
    }
}

/// Residual of `theta_RGTD(c)` against its large-c expansion over a grid of `c > c0`.
pub fn expansion_check(cm: &CoreMatrices, set: &AffineSolutionSet, c_grid: &[f64]) -> Result<ExpansionReport> {
    let c0 = expansion_threshold(cm, set)?;
    if let Some(&bad) = c_grid.iter().find(|&&c| !(c > c0)) {
        return Err(Error::BelowThreshold { c: bad, c0 });
    }
    let singular = !set.is_singleton();
    let limit = set.orthogonal_member();
    let mut rows = Vec::with_capacity(c_grid.len());
    for &c in c_grid {
        let theta = rgtd_solution(cm, c)?;
        let residual = if singular {
            (&theta - &limit).norm()
        } else {
            let k = cm.k.as_ref().expect("nonsingular G has K");
            (&theta - &limit - k / c).norm()
        };
        rows.push(ExpansionRow { c, residual });
    }
    let cs: Vec<f64> = rows.iter().map(|r| r.c).collect();
    let rs: Vec<f64> = rows.iter().map(|r| r.residual).collect();
    let gamma_const = if singular {
        None
    } else {
        let g_inv = linalg::inverse(&cm.g)?;
        let second = &g_inv * &cm.gram * &g_inv * &cm.gram * &g_inv;
        Some(linalg::spectral_norm(&cm.phi) * linalg::spectral_norm(&second) * cm.normal_rhs().norm())
    };
    Ok(ExpansionReport {
        singular,
        c0,
        fit: fit_log_log(&cs, &rs),
        rows,
        gamma_const,
        limit,
        b_weighted_limit: b_weighted_member(cm, set)?,
    })
}

/// Member of the solution set minimizing `theta^T B theta`.
pub fn b_weighted_member(cm: &CoreMatrices, set: &AffineSolutionSet) -> Result<Vector> {
    if set.is_singleton() {
        return Ok(set.particular.clone());
    }
    let v = &set.null_basis;
    let lhs = v.transpose() * &cm.gram * v;
    let rhs = -(v.transpose() * &cm.gram * &set.particular);
    let z = linalg::solve_spd(&lhs, &Mat::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
    Ok(set.point(&z.column(0).into_owned()))
}

#[derive(Clone, Debug, Serialize)]
pub struct AffineDistance {
    pub distance: f64,
    /// Closest point of `Phi Theta_GTD2` to `Phi theta`.
    #[serde(serialize_with = "linalg::ser_vector")]
    pub projection: Vector,
}

/// Euclidean distance from `Phi theta` to the image `Phi Theta_GTD2` of the solution set.
pub fn dist_to_gtd2_set(phi: &Mat, theta: &Vector, set: &AffineSolutionSet) -> AffineDistance {
    let base = phi * &set.particular;
    let target = phi * theta;
    let projection = if set.is_singleton() {
        base
    } else {
        let w = phi * &set.null_basis;
        let z = linalg::pinv(&w, 1e-12) * (&target - &base);
        base + w * z
    };
    AffineDistance { distance: (&target - &projection).norm(), projection }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub c: f64,
    pub residual: f64,
    pub bound_lhs: f64,
    pub bound_rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub singular: bool,
    pub c0: f64,
    pub rows: Vec<BoundRow>,
    /// Grid values at or below `c0`, for which no bound is asserted.
    pub skipped: Vec<f64>,
    /// Coefficient of the `1/c` term. Singular case: the empirical envelope
    /// `||Phi||_2 * max_c c * residual(c)` over the grid. Nonsingular case: `||Phi||_2 ||K||_2`.
    pub first_order_const: f64,
    pub gamma_const: Option<f64>,
    pub fit: Option<SlopeFit>,
    /// `dist(Phi theta*, Phi Theta_GTD2)`.
    pub star_distance: f64,
}

/// Slack multiplying `Gamma / c^2` in the nonsingular bound.
pub const SECOND_ORDER_SLACK: f64 = 10.0;

/// Checks the prediction-error bound `||Phi theta_RGTD - Phi theta*||` against its
/// distance-plus-projection decomposition for every grid value above `c0`.
pub fn prediction_error_bound_check(problem: &EvalProblem, c_grid: &[f64]) -> Result<BoundReport> {
    let cm = assemble(problem)?;
    let set = gtd2_solutions(&cm, NULL_TOL);
    let c0 = expansion_threshold(&cm, &set)?;
    let (grid, skipped): (Vec<f64>, Vec<f64>) = c_grid.iter().partition(|&&c| c > c0);
    let report = if grid.is_empty() {
        None
    } else {
        Some(expansion_check(&cm, &set, &grid)?)
    };
    let phi = &cm.phi;
    let phi_norm = linalg::spectral_norm(phi);
    let star = problem.theta_star();
    let star_proj = dist_to_gtd2_set(phi, star, &set);
    let singular = !set.is_singleton();
    let residuals: Vec<ExpansionRow> = report.as_ref().map(|r| r.rows.clone()).unwrap_or_default();
    let first_order_const = if singular {
        phi_norm * residuals.iter().map(|r| r.c * r.residual).fold(0.0, f64::max)
    } else {
        phi_norm * cm.k.as_ref().map(|k| k.norm()).unwrap_or(0.0)
    };
    let gamma_const = report.as_ref().and_then(|r| r.gamma_const);
    let mut rows = Vec::with_capacity(residuals.len());
    for row in &residuals {
        let c = row.c;
        let theta = rgtd_solution(&cm, c)?;
        let lhs = (phi * (&theta - star)).norm();
        let rhs = if singular {
            let rg = dist_to_gtd2_set(phi, &theta, &set);
            star_proj.distance + (&rg.projection - &star_proj.projection).norm() + first_order_const / c
        } else {
            (phi * (&set.particular - star)).norm()
                + first_order_const / c
                + SECOND_ORDER_SLACK * gamma_const.unwrap_or(0.0) / (c * c)
        };
        rows.push(BoundRow { c, residual: row.residual, bound_lhs: lhs, bound_rhs: rhs, holds: lhs <= rhs });
    }
    Ok(BoundReport {
        singular,
        c0,
        rows,
        skipped,
        first_order_const,
        gamma_const,
        fit: report.and_then(|r| r.fit),
        star_distance: star_proj.distance,
    })
}
