//! Numerical kernels: column-space projections, damped Newton root finding
//! with finite-difference Jacobians, and the standard normal distribution.

use nalgebra::{DMatrix, DVector};
use libm::erfc;

use crate::error::NumericsError;

/// Singular values below `RANK_TOL * sigma_max` count as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Orthogonal projection onto the column space of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub p: DMatrix<f64>,
    pub rank: usize,
}

impl Projector {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// `I - P`, the projection onto the orthogonal complement.
    pub fn annihilator(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) - &self.p
    }
}

/// Projects onto `col(m)`, so dependent columns are fine.
///
/// The rank comes from the singular values; the basis from a column-pivoted
/// QR, whose leading `rank` columns of Q span `col(m)`. nalgebra's SVD left
/// vectors are not accurate enough here: on rank-deficient inputs they can
/// leave residuals of order one in `(I - P) m`.
pub fn project(m: &DMatrix<f64>) -> Projector {
    let rows = m.nrows();
    let zero = || Projector {
        p: DMatrix::zeros(rows, rows),
        rank: 0,
    };
    if m.ncols() == 0 || rows == 0 {
        return zero();
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if !(smax > 0.0) {
        return zero();
    }
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
    let q = m.clone().col_piv_qr().q();
    let basis = q.columns(0, rank);
    Projector {
        p: basis * basis.transpose(),
        rank,
    }
}

pub fn singular_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let sv = m.clone().singular_values();
    (sv.max(), sv.min())
}

/// Finite-difference step for coordinate `x`.
pub fn fd_step(x: f64) -> f64 {
    (1e-6 * x.abs()).max(1e-8)
}

/// Jacobian of `f` at `x` by central differences with step [`fd_step`].
pub fn central_jacobian<F>(f: &F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        cols.push((f(&xp) - f(&xm)) / (2.0 * h));
    }
    let rows = cols.first().map(|c| c.len()).unwrap_or(0);
    DMatrix::from_fn(rows, n, |i, j| cols[j][i])
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOptions {
    /// Convergence when `max_i |f_i(x)| < tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Coordinate kept strictly above [`POSITIVE_FLOOR`] (a variance).
    pub positive_index: Option<usize>,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
            positive_index: None,
        }
    }
}

pub const POSITIVE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RootSolveReport {
    pub root: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub jacobian_at_root: DMatrix<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Damped Newton iteration for `f(x) = 0`.
///
/// The residual is tested before any Jacobian is formed, so a start that is
/// already a root returns with zero iterations even when the Jacobian is
/// singular there. Each full Newton step is halved (at most
/// `max_halvings` times) until the residual decreases; if it never does,
/// the smallest finite trial step is taken anyway.
pub fn newton_solve<F>(
    f: F,
    x0: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<RootSolveReport, NumericsError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0.clone();
    let mut fx = f(&x);
    if !all_finite(&fx) {
        return Err(NumericsError::DivergedNonFinite { iteration: 0 });
    }
    let mut norm = inf_norm(&fx);

    for iter in 0..=opts.max_iter {
        if norm < opts.tol {
            return Ok(RootSolveReport {
                jacobian_at_root: central_jacobian(&f, &x),
                root: x,
                residual_norm: norm,
                iterations: iter,
                converged: true,
            });
        }
        if iter == opts.max_iter {
            break;
        }

        let jac = central_jacobian(&f, &x);
        let (smax, smin) = singular_range(&jac);
        if !(smax > 0.0) || smin <= 1e-14 * smax || !smin.is_finite() {
            return Err(NumericsError::SingularJacobian { iteration: iter });
        }
        let step = match jac.lu().solve(&(-&fx)) {
            Some(s) if all_finite(&s) => s,
            _ => return Err(NumericsError::SingularJacobian { iteration: iter }),
        };

        let mut scale = 1.0;
        if let Some(k) = opts.positive_index {
            if x[k] + step[k] <= POSITIVE_FLOOR {
                // stop halfway to the floor
                scale = 0.5 * (x[k] - POSITIVE_FLOOR) / (-step[k]);
            }
        }

        let mut accepted: Option<(DVector<f64>, DVector<f64>, f64)> = None;
        let mut fallback = None;
        for _ in 0..=opts.max_halvings {
            let trial = &x + &step * scale;
            let ft = f(&trial);
            if all_finite(&ft) {
                let n = inf_norm(&ft);
                if n < norm {
                    accepted = Some((trial, ft, n));
                    break;
                }
                fallback = Some((trial, ft, n));
            }
            scale *= 0.5;
        }
        let (xn, fxn, nn) = match accepted.or(fallback) {
            Some(t) => t,
            None => return Err(NumericsError::DivergedNonFinite { iteration: iter + 1 }),
        };
        x = xn;
        fx = fxn;
        norm = nn;
    }

    Err(NumericsError::MaxIterationsExceeded {
        iterations: opts.max_iter,
        residual_norm: norm,
    })
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: Acklam's rational approximation followed by
/// one Halley correction against [`norm_cdf`].
#[allow(clippy::excessive_precision)]
pub fn norm_quantile(p: f64) -> Result<f64, NumericsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NumericsError::DomainError(p));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let e = norm_cdf(x) - p;
    let u = e / norm_pdf(x);
    Ok(x - u / (1.0 + 0.5 * x * u))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }

    #[test]
    fn projection_onto_ones() {
        let p = project(&DMatrix::from_element(3, 1, 1.0));
        assert_eq!(p.rank, 1);
        assert!(max_abs(&(p.p - DMatrix::from_element(3, 3, 1.0 / 3.0))) < 1e-14);
    }

    #[test]
    fn projection_identity() {
        let p = project(&DMatrix::identity(2, 2));
        assert_eq!(p.rank, 2);
        assert!(max_abs(&(p.p - DMatrix::identity(2, 2))) < 1e-14);
    }

    #[test]
    fn duplicated_column_matches_pseudo_inverse_oracle() {
        let m = DMatrix::from_element(3, 2, 1.0);
        let p = project(&m);
        assert_eq!(p.rank, 1);
        // oracle: M M^+ with the Moore-Penrose inverse of the rank-1 matrix
        // M = 1_3 1_2^T, whose pseudo-inverse is M^T / (3 * 2)
        let oracle = &m * (m.transpose() / 6.0);
        assert!(max_abs(&(p.p - oracle)) < 1e-14);
    }

    #[test]
    fn zero_matrix_projects_to_zero() {
        let p = project(&DMatrix::zeros(3, 2));
        assert_eq!(p.rank, 0);
        assert_eq!(max_abs(&p.p), 0.0);
        let empty = project(&DMatrix::zeros(3, 0));
        assert_eq!(empty.rank, 0);
    }

    #[test]
    fn newton_scalar_quadratic() {
        let r = newton_solve(
            |x: &DVector<f64>| DVector::from_element(1, x[0] * x[0] - 4.0),
            &DVector::from_element(1, 3.0),
            &NewtonOptions { tol: 1e-12, ..Default::default() },
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.root[0] - 2.0).abs() < 1e-10);
        assert!((r.jacobian_at_root[(0, 0)] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn newton_linear_pair() {
        let r = newton_solve(
            |x: &DVector<f64>| DVector::from_vec(vec![x[0] + x[1] - 3.0, x[0] - x[1] - 1.0]),
            &DVector::zeros(2),
            &NewtonOptions::default(),
        )
        .unwrap();
        assert!((r.root[0] - 2.0).abs() < 1e-10 && (r.root[1] - 1.0).abs() < 1e-10);
        // the 1e-8 minimum difference step leaves ~1e-8 relative error in
        // the Jacobian at x = 0, so a second step may be needed to reach tol
        assert!(r.iterations <= 2);
    }

    #[test]
    fn newton_cubic_at_root_and_singular_start() {
        // x^3 at x0 = 0: the residual check fires before the (zero) Jacobian
        let r = newton_solve(
            |x: &DVector<f64>| DVector::from_element(1, x[0].powi(3)),
            &DVector::zeros(1),
            &NewtonOptions::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);

        // x^2 + 1 at 0: zero Jacobian and non-zero residual
        let e = newton_solve(
            |x: &DVector<f64>| DVector::from_element(1, x[0] * x[0] + 1.0),
            &DVector::zeros(1),
            &NewtonOptions::default(),
        )
        .unwrap_err();
        assert_eq!(e, NumericsError::SingularJacobian { iteration: 0 });
    }

    #[test]
    fn newton_reports_non_convergence_and_non_finite() {
        let e = newton_solve(
            |x: &DVector<f64>| DVector::from_element(1, x[0].atan() + 0.5 * x[0].sin()),
            &DVector::from_element(1, 40.0),
            &NewtonOptions { max_iter: 1, tol: 1e-300, ..Default::default() },
        )
        .unwrap_err();
        assert!(matches!(e, NumericsError::MaxIterationsExceeded { iterations: 1, .. }));

        let e = newton_solve(
            |_: &DVector<f64>| DVector::from_element(1, f64::NAN),
            &DVector::zeros(1),
            &NewtonOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(e, NumericsError::DivergedNonFinite { .. }));
    }

    #[test]
    fn positive_coordinate_barrier() {
        // root at x = -1 lies below the floor; iterates must stay positive
        let f = |x: &DVector<f64>| DVector::from_element(1, x[0] + 1.0);
        let e = newton_solve(
            f,
            &DVector::from_element(1, 1.0),
            &NewtonOptions { positive_index: Some(0), max_iter: 5, ..Default::default() },
        );
        match e {
            Err(NumericsError::MaxIterationsExceeded { residual_norm, .. }) => {
                assert!(residual_norm > 1.0)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quantile_values() {
        assert_eq!(norm_quantile(0.5).unwrap(), 0.0);
        // 0.8416212335729143 from a 30-digit mpmath evaluation
        assert!((norm_quantile(0.8).unwrap() - 0.841_621_233_572_914_3).abs() < 1e-12);
        assert!((norm_quantile(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-12);
        assert!(norm_quantile(0.0).is_err());
        assert!(norm_quantile(1.0).is_err());
        assert!(norm_quantile(f64::NAN).is_err());
        for k in 1..100 {
            let p = k as f64 / 100.0;
            assert!((norm_cdf(norm_quantile(p).unwrap()) - p).abs() < 1e-9);
        }
    }
}
