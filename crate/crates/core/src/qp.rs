//! Dense convex QP solver for `min ½xᵀPx + qᵀx` over a box intersected with
//! affine constraints.
//!
//! The iteration is an operator-splitting ADMM on the stacked constraint rows
//! `l <= C x <= u` with over-relaxation and residual-balancing step-size
//! adaptation. Once the residuals are small the active set suggested by the
//! multipliers is used to solve the equality-constrained KKT system exactly;
//! that polished point is accepted only if it passes a full KKT check.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::game::{AffineConstraints, BoxSet};

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub adaptive_rho: bool,
    pub adapt_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-8,
            eps_infeasible: 1e-7,
            max_iter: 10_000,
            adaptive_rho: true,
            adapt_interval: 25,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the stacked rows (box rows with a finite bound, then
    /// inequalities, then equalities); positive at an active upper bound.
    pub y: DVector<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

/// Stacked row form `l <= C x <= u` of a box plus affine constraints.
#[derive(Debug, Clone)]
pub struct ConstraintRows {
    pub c: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ConstraintRows {
    pub fn build(bounds: &BoxSet, shared: &AffineConstraints) -> Result<Self> {
        let n = bounds.dim();
        if shared.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "constraint columns",
                expected: n,
                actual: shared.dim(),
            });
        }
        let box_rows: Vec<usize> = (0..n)
            .filter(|&j| bounds.lower()[j].is_finite() || bounds.upper()[j].is_finite())
            .collect();
        let m = box_rows.len() + shared.n_ineq() + shared.n_eq();
        let mut c = DMatrix::zeros(m, n);
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        for (r, &j) in box_rows.iter().enumerate() {
            c[(r, j)] = 1.0;
            lower[r] = bounds.lower()[j];
            upper[r] = bounds.upper()[j];
        }
        let mut r = box_rows.len();
        for k in 0..shared.n_ineq() {
            c.row_mut(r).copy_from(&shared.g.row(k));
            lower[r] = f64::NEG_INFINITY;
            upper[r] = -shared.g0[k];
            r += 1;
        }
        for k in 0..shared.n_eq() {
            c.row_mut(r).copy_from(&shared.h.row(k));
            lower[r] = -shared.h0[k];
            upper[r] = -shared.h0[k];
            r += 1;
        }
        Ok(Self { c, lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |j, _| v[j].clamp(self.lower[j], self.upper[j]))
    }

    fn is_equality(&self, j: usize) -> bool {
        self.lower[j] == self.upper[j]
    }
}

/// Infinity-norm KKT residual of `(x, y)`: stationarity, primal violation and
/// complementarity (multiplier sign against inactive bounds).
pub fn kkt_residual(p: &DMatrix<f64>, q: &DVector<f64>, rows: &ConstraintRows, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let stat = (p * x + q + rows.c.tr_mul(y)).amax();
    let cx = &rows.c * x;
    let mut worst = stat;
    for j in 0..rows.len() {
        let viol = (rows.lower[j] - cx[j]).max(cx[j] - rows.upper[j]).max(0.0);
        worst = worst.max(viol);
        let comp = if y[j] > 0.0 {
            y[j] * (rows.upper[j] - cx[j]).abs().min(1.0)
        } else {
            -y[j] * (cx[j] - rows.lower[j]).abs().min(1.0)
        };
        if comp.is_finite() {
            worst = worst.max(comp);
        } else if y[j] != 0.0 {
            return f64::INFINITY;
        }
    }
    worst
}

/// Minimizer of `½xᵀPx + qᵀx` over `bounds ∩ shared` with default settings.
pub fn solve_qp(p: &DMatrix<f64>, q: &DVector<f64>, bounds: &BoxSet, shared: &AffineConstraints) -> Result<DVector<f64>> {
    solve_qp_with(p, q, bounds, shared, None, &QpSettings::default()).map(|s| s.x)
}

/// Euclidean projection of `point` onto `bounds ∩ shared`.
pub fn project(point: &DVector<f64>, bounds: &BoxSet, shared: &AffineConstraints) -> Result<DVector<f64>> {
    if point.len() != bounds.dim() {
        return Err(Error::DimensionMismatch {
            context: "projection point",
            expected: bounds.dim(),
            actual: point.len(),
        });
    }
    if shared.is_empty() {
        return Ok(bounds.project(point));
    }
    let n = point.len();
    let clamped = bounds.project(point);
    if shared.satisfied(&clamped, 0.0) && clamped == *point {
        return Ok(clamped);
    }
    let eye = DMatrix::identity(n, n);
    solve_qp_with(&eye, &(-point), bounds, shared, Some(&clamped), &QpSettings::default()).map(|s| s.x)
}

pub fn solve_qp_with(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    bounds: &BoxSet,
    shared: &AffineConstraints,
    warm_start: Option<&DVector<f64>>,
    settings: &QpSettings,
) -> Result<QpSolution> {
    let n = q.len();
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "QP Hessian",
            expected: n,
            actual: p.nrows(),
        });
    }
    if bounds.dim() != n {
        return Err(Error::DimensionMismatch {
            context: "QP bounds",
            expected: n,
            actual: bounds.dim(),
        });
    }
    // a product L Lᵀ with a badly scaled factor can fail Cholesky in floating
    // point while still being positive semidefinite to working precision
    let p_chol = p.clone().cholesky();
    if p_chol.is_none() && !nearly_psd(p) {
        return Err(Error::NotPositiveDefinite);
    }
    let rows = ConstraintRows::build(bounds, shared)?;

    if rows.is_empty() {
        let x = p_chol.ok_or(Error::NotPositiveDefinite)?.solve(&(-q));
        let dual_residual = (p * &x + q).amax();
        return Ok(QpSolution {
            x,
            y: DVector::zeros(0),
            iterations: 0,
            primal_residual: 0.0,
            dual_residual,
            polished: false,
        });
    }

    // diagonal Hessian with box rows only: separable, solved by clamping
    if shared.is_empty() && is_diagonal(p) && p.diagonal().iter().all(|d| *d > 0.0) {
        let x = DVector::from_fn(n, |j, _| (-q[j] / p[(j, j)]).clamp(bounds.lower()[j], bounds.upper()[j]));
        let y = -(p * &x + q);
        let y = multipliers_for_box(&rows, &y);
        return Ok(QpSolution {
            x,
            y,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            polished: true,
        });
    }

    Admm::new(p, q, &rows, settings).run(warm_start)
}

fn nearly_psd(p: &DMatrix<f64>) -> bool {
    if (p - p.transpose()).amax() > 1e-12 * p.amax().max(1.0) {
        return false;
    }
    let eig = p.clone().symmetric_eigenvalues();
    eig.min() >= -1e-12 * eig.amax().max(1.0)
}

fn is_diagonal(p: &DMatrix<f64>) -> bool {
    (0..p.nrows()).all(|r| (0..p.ncols()).all(|c| r == c || p[(r, c)] == 0.0))
}

// box rows are unit rows, so `Cᵀ y = -∇f` maps row by row
fn multipliers_for_box(rows: &ConstraintRows, neg_grad: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| {
        let j = rows.c.row(r).iter().position(|v| *v == 1.0).unwrap_or(0);
        neg_grad[j]
    })
}

struct Admm<'a> {
    p: &'a DMatrix<f64>,
    q: &'a DVector<f64>,
    rows: &'a ConstraintRows,
    settings: &'a QpSettings,
    rho: DVector<f64>,
    kkt: Cholesky<f64, Dyn>,
}

impl<'a> Admm<'a> {
    fn new(p: &'a DMatrix<f64>, q: &'a DVector<f64>, rows: &'a ConstraintRows, settings: &'a QpSettings) -> Self {
        let rho = Self::rho_vector(rows, settings.rho);
        let kkt = Self::factor(p, rows, &rho, settings.sigma);
        Self {
            p,
            q,
            rows,
            settings,
            rho,
            kkt,
        }
    }

    fn rho_vector(rows: &ConstraintRows, rho: f64) -> DVector<f64> {
        DVector::from_fn(rows.len(), |j, _| if rows.is_equality(j) { 1e3 * rho } else { rho })
    }

    fn factor(p: &DMatrix<f64>, rows: &ConstraintRows, rho: &DVector<f64>, sigma: f64) -> Cholesky<f64, Dyn> {
        let n = p.nrows();
        let mut scaled = rows.c.clone();
        for (j, mut row) in scaled.row_iter_mut().enumerate() {
            row *= rho[j];
        }
        let k = p + DMatrix::identity(n, n) * sigma + rows.c.tr_mul(&scaled);
        k.cholesky().expect("P + σI + CᵀRC is positive definite")
    }

    fn run(mut self, warm_start: Option<&DVector<f64>>) -> Result<QpSolution> {
        let s = self.settings;
        let (p, q, rows) = (self.p, self.q, self.rows);
        let n = q.len();
        let mut x = warm_start.cloned().unwrap_or_else(|| DVector::zeros(n));
        let mut z = rows.clamp(&(&rows.c * &x));
        let mut y = DVector::zeros(rows.len());
        let mut rho_scalar = s.rho;
        let mut primal_residual = f64::INFINITY;
        let mut dual_residual = f64::INFINITY;

        for it in 1..=s.max_iter {
            let rhs = &x * s.sigma - q + rows.c.tr_mul(&(self.rho.component_mul(&z) - &y));
            let x_tilde = self.kkt.solve(&rhs);
            let z_tilde = &rows.c * &x_tilde;
            let x_next = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let z_relax = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
            let z_next = rows.clamp(&(&z_relax + y.component_div(&self.rho)));
            let y_next = &y + self.rho.component_mul(&(&z_relax - &z_next));
            let dy = &y_next - &y;
            x = x_next;
            z = z_next;
            y = y_next;

            let cx = &rows.c * &x;
            primal_residual = (&cx - &z).amax();
            dual_residual = (p * &x + q + rows.c.tr_mul(&y)).amax();

            if primal_residual <= s.eps_abs && dual_residual <= s.eps_abs {
                return Ok(self.finish(x, y, it, primal_residual, dual_residual));
            }
            if self.certifies_infeasibility(&dy) {
                return Err(Error::QpInfeasible);
            }
            if it % s.adapt_interval == 0 {
                if s.polish && primal_residual < 1e-3 && dual_residual < 1e-3 {
                    if let Some(sol) = self.polish(&x, &z, &y, it) {
                        return Ok(sol);
                    }
                }
                if s.adaptive_rho {
                    let prim_scale = cx.amax().max(z.amax()).max(1e-12);
                    let dual_scale = (p * &x).amax().max(rows.c.tr_mul(&y).amax()).max(q.amax()).max(1e-12);
                    let ratio = ((primal_residual / prim_scale) / (dual_residual / dual_scale).max(1e-300)).sqrt();
                    let new_rho = (rho_scalar * ratio).clamp(1e-6, 1e6);
                    if new_rho > 5.0 * rho_scalar || new_rho < 0.2 * rho_scalar {
                        rho_scalar = new_rho;
                        self.rho = Self::rho_vector(rows, rho_scalar);
                        self.kkt = Self::factor(p, rows, &self.rho, s.sigma);
                    }
                }
            }
        }
        if s.polish {
            if let Some(sol) = self.polish(&x, &z, &y, s.max_iter) {
                return Ok(sol);
            }
        }
        Err(Error::QpMaxIterations {
            iterations: s.max_iter,
            primal_residual,
            dual_residual,
        })
    }

    fn finish(&self, x: DVector<f64>, y: DVector<f64>, it: usize, prim: f64, dual: f64) -> QpSolution {
        if self.settings.polish {
            let z = self.rows.clamp(&(&self.rows.c * &x));
            if let Some(sol) = self.polish(&x, &z, &y, it) {
                return sol;
            }
        }
        QpSolution {
            x,
            y,
            iterations: it,
            primal_residual: prim,
            dual_residual: dual,
            polished: false,
        }
    }

    fn certifies_infeasibility(&self, dy: &DVector<f64>) -> bool {
        let norm = dy.amax();
        if norm <= self.settings.eps_infeasible {
            return false;
        }
        let eps = self.settings.eps_infeasible * norm;
        if self.rows.c.tr_mul(dy).amax() > eps {
            return false;
        }
        let mut support = 0.0;
        for j in 0..dy.len() {
            let term = if dy[j] > 0.0 {
                self.rows.upper[j] * dy[j]
            } else if dy[j] < 0.0 {
                self.rows.lower[j] * dy[j]
            } else {
                0.0
            };
            support += term;
        }
        support < -eps
    }

    fn polish(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>, it: usize) -> Option<QpSolution> {
        let rows = self.rows;
        let n = x.len();
        let active: Vec<(usize, f64)> = (0..rows.len())
            .filter_map(|j| {
                if rows.is_equality(j) {
                    Some((j, rows.lower[j]))
                } else if z[j] - rows.lower[j] < -y[j] {
                    Some((j, rows.lower[j]))
                } else if rows.upper[j] - z[j] < y[j] {
                    Some((j, rows.upper[j]))
                } else {
                    None
                }
            })
            .collect();
        let m = active.len();
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(self.p);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-self.q));
        for (k, &(j, b)) in active.iter().enumerate() {
            for c in 0..n {
                kkt[(n + k, c)] = rows.c[(j, c)];
                kkt[(c, n + k)] = rows.c[(j, c)];
            }
            rhs[n + k] = b;
        }
        let sol = kkt.lu().solve(&rhs)?;
        let xp = sol.rows(0, n).into_owned();
        let mut yp = DVector::zeros(rows.len());
        for (k, &(j, _)) in active.iter().enumerate() {
            yp[j] = sol[n + k];
        }
        if !xp.iter().chain(yp.iter()).all(|v| v.is_finite()) {
            return None;
        }
        let tol = 1e-10 * (1.0 + self.q.amax() + xp.amax());
        for (j, b) in &active {
            if rows.is_equality(*j) {
                continue;
            }
            let yj = yp[*j];
            if (*b == rows.lower[*j] && yj > tol) || (*b == rows.upper[*j] && yj < -tol) {
                return None;
            }
        }
        let cx = &rows.c * &xp;
        let primal_residual = (0..rows.len())
            .map(|j| (rows.lower[j] - cx[j]).max(cx[j] - rows.upper[j]).max(0.0))
            .fold(0.0, f64::max);
        let dual_residual = (self.p * &xp + self.q + rows.c.tr_mul(&yp)).amax();
        if primal_residual > tol || dual_residual > tol {
            return None;
        }
        Some(QpSolution {
            x: xp,
            y: yp,
            iterations: it,
            primal_residual,
            dual_residual,
            polished: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn box_projection_of_origin() {
        let p = DMatrix::from_element(1, 1, 1.0);
        let b = BoxSet::new(vec![1.0], vec![2.0]).unwrap();
        let x = solve_qp(&p, &v(&[0.0]), &b, &AffineConstraints::none(1)).unwrap();
        assert_eq!(x[0], 1.0);
    }

    #[test]
    fn unconstrained_minimum() {
        let p = DMatrix::from_element(1, 1, 1.0);
        let x = solve_qp(&p, &v(&[-3.0]), &BoxSet::unbounded(1), &AffineConstraints::none(1)).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn symmetric_active_halfspace() {
        // KKT: x - 1 + μ = 0 per coordinate with x1 + x2 = 1 → x = (0.5, 0.5), μ = 0.5
        let p = DMatrix::identity(2, 2);
        let shared = AffineConstraints::inequality(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), v(&[-1.0])).unwrap();
        let sol = solve_qp_with(&p, &v(&[-1.0, -1.0]), &BoxSet::unbounded(2), &shared, None, &QpSettings::default()).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-10 && (sol.x[1] - 0.5).abs() < 1e-10);
        assert!((sol.y[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn general_hessian_with_box() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let q = v(&[-4.0, 1.0]);
        let b = BoxSet::uniform(2, 0.0, 1.0).unwrap();
        let sol = solve_qp_with(&p, &q, &b, &AffineConstraints::none(2), None, &QpSettings::default()).unwrap();
        // x2 = 0 active, x1 = min(1, 4/2) = 1
        assert!((&sol.x - v(&[1.0, 0.0])).amax() < 1e-10);
        let rows = ConstraintRows::build(&b, &AffineConstraints::none(2)).unwrap();
        assert!(kkt_residual(&p, &q, &rows, &sol.x, &sol.y) <= 1e-8);
    }

    #[test]
    fn infeasible_set_is_reported() {
        let p = DMatrix::identity(1, 1);
        let b = BoxSet::new(vec![0.0], vec![1.0]).unwrap();
        let shared = AffineConstraints::inequality(DMatrix::from_element(1, 1, 1.0), v(&[1.0])).unwrap();
        let err = solve_qp(&p, &v(&[0.0]), &b, &shared).unwrap_err();
        assert!(matches!(err, Error::QpInfeasible), "{err}");
    }

    #[test]
    fn not_positive_definite() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            solve_qp(&p, &v(&[0.0, 0.0]), &BoxSet::unbounded(2), &AffineConstraints::none(2)),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn projections() {
        let none = AffineConstraints::none(2);
        let unit = BoxSet::uniform(2, 0.0, 1.0).unwrap();
        assert_eq!(project(&v(&[0.3, 0.9]), &unit, &none).unwrap(), v(&[0.3, 0.9]));
        assert_eq!(project(&v(&[2.0, 2.0]), &unit, &none).unwrap(), v(&[1.0, 1.0]));
        let line = AffineConstraints::equality(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), v(&[-1.0])).unwrap();
        let x = project(&v(&[1.0, 0.0]), &BoxSet::unbounded(2), &line).unwrap();
        assert!((x - v(&[1.0, 0.0])).amax() < 1e-12);
        let x = project(&v(&[1.0, 1.0]), &BoxSet::unbounded(2), &line).unwrap();
        assert!((x - v(&[0.5, 0.5])).amax() < 1e-10);
    }

    fn random_qp() -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>, BoxSet, AffineConstraints)> {
        (2usize..5).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.0f64..1.0, n * n),
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(-1.0f64..1.0, n + 1),
            )
                .prop_map(move |(m, q, grow, g)| {
                    let m = DMatrix::from_row_slice(n, n, &m);
                    let p = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
                    let lower: Vec<f64> = grow.iter().map(|v| v - 1.0).collect();
                    let upper: Vec<f64> = grow.iter().map(|v| v + 1.0).collect();
                    let b = BoxSet::new(lower, upper).unwrap();
                    // a halfspace passing near the box center keeps the set nonempty
                    let gm = DMatrix::from_row_slice(1, n, &g[..n]);
                    let center = DVector::from_column_slice(&grow);
                    let g0 = DVector::from_element(1, -(gm.row(0).dot(&center.transpose())) - 0.1 * g[n].abs());
                    let shared = AffineConstraints::inequality(gm, g0).unwrap();
                    (p, DVector::from_vec(q), b, shared)
                })
        })
    }

    proptest! {
        #[test]
        fn solution_satisfies_kkt((p, q, b, shared) in random_qp()) {
            let sol = solve_qp_with(&p, &q, &b, &shared, None, &QpSettings::default()).unwrap();
            let rows = ConstraintRows::build(&b, &shared).unwrap();
            prop_assert!(kkt_residual(&p, &q, &rows, &sol.x, &sol.y) <= 1e-8);
        }

        #[test]
        fn projection_is_idempotent((_p, q, b, shared) in random_qp()) {
            let once = project(&q, &b, &shared).unwrap();
            let twice = project(&once, &b, &shared).unwrap();
            prop_assert!((&once - &twice).amax() <= 1e-10);
        }
    }
}
