//! Efficient score vectors for the (beta, alpha, sigma2) estimating equation.
//!
//! With `zeta = Za beta + alpha (s - x 1)` and `P` the projection onto the
//! random-effects columns (`Zb` when the event time is observed, `(1, Zb)`
//! when it was imputed), each subject contributes
//!
//! ```text
//! beta   : sigma^-2 Za' (I - P)(Y - zeta)
//! alpha  : sigma^-2 (s - x 1)' (I - P)(Y - zeta)
//! sigma2 : sigma^-4 [ 1/2 {Y'Y - E(Y'Y)} - zeta' {Y - E(Y)} ]
//! ```
//!
//! with `E(Y) = P Y + (I - P) zeta` and `E(Y'Y) = sigma2 (m - rank P) + |E(Y)|^2`.
//! Neither the random effects nor the imputation error appear: both live in
//! the column space that `I - P` removes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{SubjectRecord, Theta};
use crate::impute::ImputedDataset;
use crate::numerics::{project, Projector};

/// Random-effects design augmented with an intercept, used for subjects
/// whose event time is imputed.
pub fn augmented_design(zb: &DMatrix<f64>) -> DMatrix<f64> {
    zb.clone().insert_column(0, 1.0)
}

/// `P_Zb` for observed event times, `P_(1,Zb)` for imputed ones.
pub fn efficient_projector(subj: &SubjectRecord) -> Projector {
    if subj.delta {
        project(&subj.zb)
    } else {
        project(&augmented_design(&subj.zb))
    }
}

/// Per-subject quantities that do not depend on theta.
#[derive(Debug, Clone)]
pub struct SubjectTerms {
    pub y: DVector<f64>,
    pub za: DMatrix<f64>,
    /// `s - x 1` with `x` the observed or imputed event time.
    pub time_to_event: DVector<f64>,
    pub proj: Projector,
    pub annihilator: DMatrix<f64>,
}

impl SubjectTerms {
    pub fn new(subj: &SubjectRecord, x: f64, proj: Projector) -> Self {
        let annihilator = proj.annihilator();
        Self {
            y: subj.y.clone(),
            za: subj.za.clone(),
            time_to_event: subj.s.map(|s| s - x),
            proj,
            annihilator,
        }
    }

    pub fn n_visits(&self) -> usize {
        self.y.len()
    }

    /// Residual degrees of freedom `m - rank P`.
    pub fn residual_dof(&self) -> usize {
        self.n_visits() - self.proj.rank
    }

    /// Fixed-effects design `(Za, s - x 1)`.
    pub fn design(&self) -> DMatrix<f64> {
        let p = self.za.ncols();
        let mut g = self.za.clone().insert_column(p, 0.0);
        g.set_column(p, &self.time_to_event);
        g
    }

    pub fn zeta(&self, coefficients: &[f64]) -> DVector<f64> {
        let p = self.za.ncols();
        let beta = DVector::from_column_slice(&coefficients[..p]);
        &self.za * beta + &self.time_to_event * coefficients[p]
    }

    /// Score at `theta = (beta, alpha, sigma2)`.
    pub fn score(&self, theta: &DVector<f64>) -> DVector<f64> {
        let k = theta.len();
        let p = k - 2;
        let sigma2 = theta[k - 1];
        let zeta = self.zeta(theta.as_slice());
        let q_resid = &self.annihilator * (&self.y - &zeta);

        let mut out = DVector::zeros(k);
        out.rows_mut(0, p).copy_from(&(self.za.tr_mul(&q_resid) / sigma2));
        out[p] = self.time_to_event.dot(&q_resid) / sigma2;

        let e_y = &self.proj.p * &self.y + &self.annihilator * &zeta;
        let e_yy = sigma2 * self.residual_dof() as f64 + e_y.norm_squared();
        let bracket = 0.5 * (self.y.norm_squared() - e_yy) - zeta.dot(&(&self.y - &e_y));
        out[p + 1] = bracket / (sigma2 * sigma2);
        out
    }
}

/// Score of a subject with observed event time `x = w`.
pub fn score_uncensored(subj: &SubjectRecord, theta: &Theta) -> DVector<f64> {
    debug_assert!(subj.delta);
    SubjectTerms::new(subj, subj.w, project(&subj.zb)).score(&theta.to_vector())
}

/// Score of a subject whose event time was imputed as `xhat`.
pub fn score_censored(subj: &SubjectRecord, xhat: f64, theta: &Theta) -> DVector<f64> {
    debug_assert!(!subj.delta);
    SubjectTerms::new(subj, xhat, project(&augmented_design(&subj.zb))).score(&theta.to_vector())
}

/// Cached per-subject terms for repeated evaluation at different theta.
#[derive(Debug, Clone)]
pub struct ScoreWorkspace {
    pub terms: Vec<SubjectTerms>,
    pub p_a: usize,
}

impl ScoreWorkspace {
    pub fn new(ds: &ImputedDataset) -> Self {
        let terms = ds
            .base
            .subjects()
            .par_iter()
            .zip(ds.xhat.par_iter())
            .map(|(subj, &x)| SubjectTerms::new(subj, x, efficient_projector(subj)))
            .collect();
        Self { terms, p_a: ds.base.p_a() }
    }

    pub fn n(&self) -> usize {
        self.terms.len()
    }

    pub fn dim(&self) -> usize {
        self.p_a + 2
    }

    pub fn per_subject(&self, theta: &DVector<f64>) -> Vec<DVector<f64>> {
        self.terms.par_iter().with_min_len(64).map(|t| t.score(theta)).collect()
    }

    /// Sum of subject scores, reduced in subject order so the result does
    /// not depend on the thread count.
    pub fn total(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.per_subject(theta)
            .into_iter()
            .fold(DVector::zeros(self.dim()), |acc, s| acc + s)
    }
}

pub fn total_estimating_function(ds: &ImputedDataset, theta: &Theta) -> DVector<f64> {
    ScoreWorkspace::new(ds).total(&theta.to_vector())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LongitudinalDataset;
    use std::sync::Arc;

    fn subj(y: &[f64], s: &[f64], za: &[f64], zb: &[f64], w: f64, delta: bool) -> SubjectRecord {
        let m = y.len();
        SubjectRecord {
            id: format!("{w}"),
            y: DVector::from_column_slice(y),
            s: DVector::from_column_slice(s),
            za: DMatrix::from_column_slice(m, za.len() / m, za),
            zb: DMatrix::from_column_slice(m, zb.len() / m, zb),
            w,
            delta,
            v: DVector::from_element(1, 0.0),
        }
    }

    #[test]
    fn two_visit_hand_computation() {
        // Y = (3,1), s = (0,1), x = 0.5, Za = (1,0)', Zb = 1, theta = (1, 2, 2)
        // zeta = (0,1), (I-P)(Y-zeta) = (1.5,-1.5), E(Y) = (1.5,2.5)
        // sigma2 block: [ (10 - 2 - 8.5)/2 + 1.5 ] / 4 = 0.3125
        let s = subj(&[3.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0], 0.5, true);
        let theta = Theta::new(DVector::from_element(1, 1.0), 2.0, 2.0);
        let u = score_uncensored(&s, &theta);
        let expect = [0.75, -0.75, 0.3125];
        for k in 0..3 {
            assert!((u[k] - expect[k]).abs() < 1e-12, "{u}");
        }
    }

    #[test]
    fn exact_fit_leaves_only_the_variance_term() {
        let s = subj(&[0.0; 3], &[0.0, 1.0, 2.0], &[0.3, -1.0, 2.0], &[5.0, 4.5, 6.0], 1.2, true);
        let theta = Theta::new(DVector::from_element(1, 0.7), -0.4, 1.5);
        let mut s2 = s.clone();
        let terms = SubjectTerms::new(&s, s.w, project(&s.zb));
        s2.y = terms.zeta(theta.to_vector().as_slice());
        let u = score_uncensored(&s2, &theta);
        assert!(u[0].abs() < 1e-12 && u[1].abs() < 1e-12);
        assert!((u[2] + (3.0 - 1.0) / (2.0 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn censored_intercept_only_collapses() {
        // Zb = 1 already contains the intercept: (1, Zb) has rank 1
        let s = subj(&[2.0, 0.5, 1.0], &[0.0, 1.0, 2.0], &[0.1, 0.2, -0.3], &[1.0; 3], 3.0, false);
        let theta = Theta::new(DVector::from_element(1, 0.9), 1.1, 0.8);
        let c = score_censored(&s, 3.4, &theta);
        let mut obs = s.clone();
        obs.delta = true;
        obs.w = 3.4;
        let u = score_uncensored(&obs, &theta);
        assert!((c - u).amax() < 1e-12);
    }

    #[test]
    fn censored_score_does_not_depend_on_xhat() {
        let s = subj(&[2.0, 0.5, 1.0], &[0.0, 1.0, 2.0], &[0.1, 0.2, -0.3], &[5.2, 4.1, 6.3], 3.0, false);
        let theta = Theta::new(DVector::from_element(1, 0.9), 1.1, 0.8);
        let a = score_censored(&s, 3.4, &theta);
        let b = score_censored(&s, 7.9, &theta);
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn total_is_ordered_sum_and_additive() {
        let subjects = vec![
            subj(&[2.0, 0.5, 1.0], &[0.0, 1.0, 2.0], &[0.1, 0.2, -0.3], &[5.2, 4.1, 6.3], 3.0, false),
            subj(&[1.0, 0.2], &[0.0, 1.0], &[1.0, -1.0], &[4.0, 5.5], 0.7, true),
        ];
        let ds = Arc::new(LongitudinalDataset::new(subjects.clone(), None).unwrap());
        let imp = ImputedDataset::from_observed(ds);
        let theta = Theta::new(DVector::from_element(1, 0.9), 1.1, 0.8);
        let total = total_estimating_function(&imp, &theta);
        let expect = score_censored(&subjects[0], 3.0, &theta) + score_uncensored(&subjects[1], &theta);
        assert!((total.clone() - expect).amax() < 1e-12);

        let doubled = total_estimating_function(&imp.replicated(2), &theta);
        assert!((doubled - total * 2.0).amax() < 1e-12);
    }
}
