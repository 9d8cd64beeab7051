#![allow(dead_code)]

use std::sync::Arc;

use ace_core::cox::{breslow_baseline, partial_loglik, CoxFit};
use ace_core::{LongitudinalDataset, SubjectRecord};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gauss(rng))
}

/// Random `rows x cols` matrix of rank at most `rank` (product of two
/// Gaussian factors).
pub fn low_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    gauss_matrix(rng, rows, rank) * gauss_matrix(rng, rank, cols)
}

#[allow(clippy::too_many_arguments)]
pub fn subject(
    id: usize,
    y: DVector<f64>,
    s: DVector<f64>,
    za: DMatrix<f64>,
    zb: DMatrix<f64>,
    w: f64,
    delta: bool,
    v: DVector<f64>,
) -> SubjectRecord {
    SubjectRecord {
        id: id.to_string(),
        y,
        s,
        za,
        zb,
        w,
        delta,
        v,
    }
}

/// Random subject with `m` visits, one fixed-effect column and `p_b`
/// random-effect columns. `zb` may be rank deficient.
pub fn random_subject(rng: &mut ChaCha8Rng, id: usize, m: usize, p_b: usize, delta: bool) -> SubjectRecord {
    let zb = if p_b > 1 && rng.random::<bool>() {
        low_rank(rng, m, p_b, 1)
    } else {
        gauss_matrix(rng, m, p_b)
    };
    subject(
        id,
        gauss_matrix(rng, m, 1).column(0).into_owned(),
        DVector::from_fn(m, |j, _| j as f64),
        gauss_matrix(rng, m, 1),
        zb,
        0.5 + rng.random::<f64>(),
        delta,
        DVector::from_element(1, gauss(rng)),
    )
}

/// Cox fit object with a chosen coefficient and the Breslow baseline at it.
pub fn cox_at(w: &[f64], delta: &[bool], v: &DMatrix<f64>, gamma: DVector<f64>) -> Arc<CoxFit> {
    let p = gamma.len();
    Arc::new(CoxFit {
        baseline: breslow_baseline(w, delta, v, &gamma),
        loglik: partial_loglik(w, delta, v, &gamma),
        loglik_null: partial_loglik(w, delta, v, &DVector::zeros(p)),
        gamma,
        gamma_cov: DMatrix::zeros(p, p),
        n_events: delta.iter().filter(|&&d| d).count(),
        iterations: 0,
    })
}

/// Single-visit subjects carrying only survival information.
pub fn survival_dataset(w: &[f64], delta: &[bool], v: &DMatrix<f64>) -> Arc<LongitudinalDataset> {
    let subjects = (0..w.len())
        .map(|i| {
            subject(
                i,
                DVector::from_element(1, 0.0),
                DVector::from_element(1, 0.0),
                DMatrix::zeros(1, 0),
                DMatrix::zeros(1, 0),
                w[i],
                delta[i],
                v.row(i).transpose(),
            )
        })
        .collect();
    Arc::new(LongitudinalDataset::new(subjects, None).unwrap())
}
