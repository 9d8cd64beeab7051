//! Root of the total efficient-score equation, its sandwich covariance and
//! the identifiability checks that have to pass first.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Theta, ThetaEstimate};
use crate::error::EstimatorError;
use crate::impute::ImputedDataset;
use crate::numerics::{
    central_jacobian, newton_solve, singular_range, NewtonOptions, POSITIVE_FLOOR, RANK_TOL,
};
use crate::score::ScoreWorkspace;

/// Relative size below which an annihilated column counts as zero.
const COLUMN_SPACE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct IdentifiabilityReport {
    /// `N = sum_i G_i' (I - P_i) G_i` with `G_i = (Za, s - x 1)`.
    #[serde(skip)]
    pub n_matrix: DMatrix<f64>,
    pub condition_number: f64,
    pub singular: bool,
    /// Za columns inside the random-effects column space for every subject.
    pub degenerate_columns: Vec<usize>,
    pub degenerate_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SandwichCovariance {
    /// Mean Jacobian of the subject scores at the root.
    pub a: DMatrix<f64>,
    /// Mean outer product of the subject scores at the root.
    pub b: DMatrix<f64>,
    /// `A^-1 B A^-T / n`.
    pub v: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct AceFit {
    pub estimate: ThetaEstimate,
    pub sandwich: SandwichCovariance,
    pub identifiability: IdentifiabilityReport,
    pub residual_norm: f64,
}

pub fn check_identifiability(ds: &ImputedDataset) -> IdentifiabilityReport {
    identifiability(&ScoreWorkspace::new(ds), &ds.base.column_names().za)
}

fn identifiability(ws: &ScoreWorkspace, za_names: &[String]) -> IdentifiabilityReport {
    let k = ws.p_a + 1;
    let mut n_matrix = DMatrix::zeros(k, k);
    let mut degenerate = vec![true; ws.p_a];
    for t in &ws.terms {
        let g = t.design();
        let qg = &t.annihilator * &g;
        n_matrix += g.tr_mul(&qg);
        for (j, flag) in degenerate.iter_mut().enumerate() {
            let scale = g.column(j).norm().max(1.0);
            if qg.column(j).norm() > COLUMN_SPACE_TOL * scale {
                *flag = false;
            }
        }
    }
    if ws.terms.is_empty() {
        degenerate.iter_mut().for_each(|f| *f = false);
    }
    let (smax, smin) = singular_range(&n_matrix);
    let singular = !(smax > 0.0) || smin < RANK_TOL * smax;
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let degenerate_columns: Vec<usize> = (0..ws.p_a).filter(|&j| degenerate[j]).collect();
    let degenerate_names = degenerate_columns
        .iter()
        .map(|&j| za_names.get(j).cloned().unwrap_or_else(|| format!("za{}", j + 1)))
        .collect();
    IdentifiabilityReport {
        n_matrix,
        condition_number,
        singular,
        degenerate_columns,
        degenerate_names,
    }
}

fn solve_n(ws: &ScoreWorkspace, report: &IdentifiabilityReport) -> Result<DVector<f64>, EstimatorError> {
    if report.singular {
        return Err(EstimatorError::SingularN(report.condition_number));
    }
    let mut rhs = DVector::zeros(ws.p_a + 1);
    for t in &ws.terms {
        rhs += t.design().tr_mul(&(&t.annihilator * &t.y));
    }
    report
        .n_matrix
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(EstimatorError::SingularN(report.condition_number))
}

fn sigma2_from(ws: &ScoreWorkspace, coefficients: &DVector<f64>) -> Result<f64, EstimatorError> {
    let mut rss = 0.0;
    let mut dof = 0usize;
    for t in &ws.terms {
        let r = &t.y - t.design() * coefficients;
        rss += (&t.annihilator * r).norm_squared();
        dof += t.residual_dof();
    }
    if dof == 0 {
        return Err(EstimatorError::NoResidualDof);
    }
    Ok(rss / dof as f64)
}

/// `(beta, alpha) = N^-1 sum_i G_i' (I - P_i) Y_i`: the root of the beta and
/// alpha blocks, which do not involve sigma2.
pub fn closed_form_beta_alpha(ds: &ImputedDataset) -> Result<DVector<f64>, EstimatorError> {
    let ws = ScoreWorkspace::new(ds);
    let report = identifiability(&ws, &ds.base.column_names().za);
    solve_n(&ws, &report)
}

/// `sigma2 = sum_i |(I - P_i)(Y_i - G_i c)|^2 / sum_i (m_i - rank P_i)`: the
/// root of the sigma2 block at coefficients `c`.
pub fn closed_form_sigma2(ds: &ImputedDataset, coefficients: &DVector<f64>) -> Result<f64, EstimatorError> {
    sigma2_from(&ScoreWorkspace::new(ds), coefficients)
}

/// Solve the total estimating equation, starting from the closed form unless
/// `start` is given, then form the sandwich covariance at the root.
pub fn fit_ace(ds: &ImputedDataset, start: Option<&Theta>) -> Result<AceFit, EstimatorError> {
    let ws = ScoreWorkspace::new(ds);
    let report = identifiability(&ws, &ds.base.column_names().za);
    if !report.degenerate_names.is_empty() {
        return Err(EstimatorError::DegenerateColumns(report.degenerate_names.clone()));
    }
    let x0 = match start {
        Some(theta) => theta.to_vector(),
        None => {
            let coef = solve_n(&ws, &report)?;
            let sigma2 = sigma2_from(&ws, &coef)?;
            if !(sigma2 > POSITIVE_FLOOR) {
                return Err(EstimatorError::NegativeSigma2(sigma2));
            }
            let mut x = coef.insert_row(ws.p_a + 1, 0.0);
            x[ws.p_a + 1] = sigma2;
            x
        }
    };
    if report.singular {
        return Err(EstimatorError::SingularN(report.condition_number));
    }

    let k = ws.dim();
    let opts = NewtonOptions {
        positive_index: Some(k - 1),
        ..NewtonOptions::default()
    };
    let total = |theta: &DVector<f64>| ws.total(theta);
    let solved = newton_solve(total, &x0, &opts)?;
    let root = solved.root;
    if !(root[k - 1] > 0.0) {
        return Err(EstimatorError::NegativeSigma2(root[k - 1]));
    }

    let n = ws.n() as f64;
    let a = central_jacobian(&total, &root) / n;
    let mut b = DMatrix::zeros(k, k);
    for s in ws.per_subject(&root) {
        b.ger(1.0, &s, &s, 1.0);
    }
    b /= n;
    let a_inv = a.clone().try_inverse().ok_or(EstimatorError::SingularBread)?;
    let v = &a_inv * &b * a_inv.transpose() / n;
    let v = (&v + v.transpose()) * 0.5;

    Ok(AceFit {
        estimate: ThetaEstimate {
            theta: Theta::from_vector(&root),
            cov: v.clone(),
            n_used: ws.n(),
            converged: solved.converged,
            iterations: solved.iterations,
        },
        sandwich: SandwichCovariance { a, b, v },
        identifiability: report,
        residual_norm: solved.residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LongitudinalDataset, SubjectRecord};
    use std::sync::Arc;

    fn subject(id: usize, y: &[f64], s: &[f64], za: &[f64], zb: &[f64], w: f64, delta: bool) -> SubjectRecord {
        let m = y.len();
        SubjectRecord {
            id: id.to_string(),
            y: DVector::from_column_slice(y),
            s: DVector::from_column_slice(s),
            za: DMatrix::from_column_slice(m, za.len() / m, za),
            zb: DMatrix::from_column_slice(m, zb.len() / m, zb),
            w,
            delta,
            v: DVector::from_element(1, id as f64),
        }
    }

    fn imputed(subjects: Vec<SubjectRecord>) -> ImputedDataset {
        ImputedDataset::from_observed(Arc::new(LongitudinalDataset::new(subjects, None).unwrap()))
    }

    #[test]
    fn intercept_in_za_with_random_intercept_is_degenerate() {
        let subjects = (0..6)
            .map(|i| {
                let f = i as f64;
                subject(
                    i,
                    &[f, 1.0 + f * 0.3, 2.0 - f],
                    &[0.0, 1.0, 2.0],
                    &[1.0, 1.0, 1.0],
                    &[1.0, 1.0, 1.0],
                    3.0 + f,
                    i % 2 == 0,
                )
            })
            .collect();
        let ds = imputed(subjects);
        let report = check_identifiability(&ds);
        assert_eq!(report.degenerate_columns, vec![0]);
        assert!(report.singular);
        match fit_ace(&ds, None).unwrap_err() {
            EstimatorError::DegenerateColumns(names) => assert_eq!(names, vec!["za1".to_string()]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn single_visit_subject_is_singular() {
        let ds = imputed(vec![subject(0, &[1.0], &[0.0], &[0.5], &[5.0], 2.0, true)]);
        assert!(check_identifiability(&ds).singular);
        assert!(matches!(closed_form_beta_alpha(&ds), Err(EstimatorError::SingularN(_))));
    }

    #[test]
    fn zero_residuals_give_zero_sigma2() {
        // Y = 2 Za + 0.5 (s - x) exactly
        let subjects: Vec<_> = (0..5)
            .map(|i| {
                let f = i as f64;
                let za = [f, 1.0 - f, 0.5 * f * f];
                let s = [0.0, 1.0, 2.0];
                let x = 1.0 + 0.1 * f;
                let y: Vec<f64> = (0..3).map(|j| 2.0 * za[j] + 0.5 * (s[j] - x)).collect();
                subject(i, &y, &s, &za, &[5.0 + f, 4.0, 6.0 - f], x, true)
            })
            .collect();
        let ds = imputed(subjects);
        let coef = closed_form_beta_alpha(&ds).unwrap();
        assert!((coef[0] - 2.0).abs() < 1e-10 && (coef[1] - 0.5).abs() < 1e-10);
        assert!(closed_form_sigma2(&ds, &coef).unwrap().abs() < 1e-16);
        assert!(matches!(fit_ace(&ds, None), Err(EstimatorError::NegativeSigma2(_))));
    }
}
