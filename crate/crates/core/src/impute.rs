//! Conditional-mean imputation of censored event times under a fitted Cox
//! model, and the stochastic multiple-imputation variant.
//!
//! For a censored subject with censoring time `C` and risk score
//! `e = exp(gamma' v)`,
//!
//! ```text
//! xhat = C + 1/2 * sum_{j: W(j) >= C} {S0(W(j+1))^e + S0(W(j))^e} (W(j+1) - W(j)) / S0(C)^e
//! ```
//!
//! where `W(1) < .. < W(K)` are the distinct observed times of all subjects.
//! The ratio of survival powers is evaluated as `exp(-e (H0(t) - H0(C)))`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cox::{BaselineSurvival, CoxFit};
use crate::data::LongitudinalDataset;
use crate::error::ImputeError;
use crate::rng::{stream, stream_rng};

/// `S0(C)^e` below this is treated as zero and the subject keeps `xhat = C`.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ImputedDataset {
    pub base: Arc<LongitudinalDataset>,
    /// Imputed event time per subject; equals `w` when the event was observed.
    pub xhat: Vec<f64>,
    /// True iff the value was imputed (`delta = 0`).
    pub imputed_flag: Vec<bool>,
    pub cox_fit: Option<Arc<CoxFit>>,
    /// Coefficients actually used (differs from the fit for MCMI draws).
    pub gamma: Option<DVector<f64>>,
    pub warnings: Vec<String>,
}

impl ImputedDataset {
    /// No imputation: `xhat = w` for every subject. Intended for datasets
    /// where every event time is observed.
    pub fn from_observed(ds: Arc<LongitudinalDataset>) -> Self {
        let xhat = ds.w();
        let imputed_flag = ds.subjects().iter().map(|s| !s.delta).collect();
        Self {
            base: ds,
            xhat,
            imputed_flag,
            cox_fit: None,
            gamma: None,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Same imputed values for every subject repeated `times` times.
    pub fn replicated(&self, times: usize) -> Self {
        let subjects: Vec<_> = (0..times)
            .flat_map(|k| {
                self.base.subjects().iter().map(move |s| {
                    let mut s = s.clone();
                    s.id = format!("{}#{k}", s.id);
                    s
                })
            })
            .collect();
        let base = LongitudinalDataset::new(subjects, Some(self.base.column_names().clone()))
            .expect("replicating a valid dataset keeps it valid");
        Self {
            base: Arc::new(base),
            xhat: self.xhat.repeat(times),
            imputed_flag: self.imputed_flag.repeat(times),
            cox_fit: self.cox_fit.clone(),
            gamma: self.gamma.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Distinct sorted observed times with `H0` evaluated at each.
struct TimeGrid {
    times: Vec<f64>,
    cumhaz: Vec<f64>,
}

impl TimeGrid {
    fn new(ds: &LongitudinalDataset, baseline: &BaselineSurvival) -> Self {
        let mut times = ds.w();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let cumhaz = times.iter().map(|&t| baseline.cumulative_hazard_at(t)).collect();
        Self { times, cumhaz }
    }

    fn conditional_mean(&self, c: f64, h_c: f64, e: f64) -> Result<f64, ()> {
        if (-e * h_c).exp() < DENOMINATOR_FLOOR {
            return Err(());
        }
        let start = self.times.partition_point(|&t| t < c);
        let last = match self.times.last() {
            Some(&t) => t,
            None => return Ok(c),
        };
        let mut sum = 0.0;
        for j in start..self.times.len().saturating_sub(1) {
            let lo = (-e * (self.cumhaz[j] - h_c)).exp();
            // Terms are non-increasing, so the rest is at most 2 lo (last - t_j).
            if 2.0 * lo * (last - self.times[j]) < f64::EPSILON * 0.125 * sum {
                break;
            }
            let hi = (-e * (self.cumhaz[j + 1] - h_c)).exp();
            sum += (hi + lo) * (self.times[j + 1] - self.times[j]);
        }
        Ok(c + 0.5 * sum)
    }
}

fn impute_with(
    ds: &LongitudinalDataset,
    grid: &TimeGrid,
    baseline: &BaselineSurvival,
    gamma: &DVector<f64>,
) -> (Vec<f64>, Vec<String>) {
    let mut warnings = Vec::new();
    let xhat = ds
        .subjects()
        .iter()
        .map(|s| {
            if s.delta {
                return s.w;
            }
            let e = gamma.dot(&s.v).exp();
            let h_c = baseline.cumulative_hazard_at(s.w);
            grid.conditional_mean(s.w, h_c, e).unwrap_or_else(|()| {
                warnings.push(format!(
                    "subject `{}`: S0(C)^exp(gamma'v) below {DENOMINATOR_FLOOR:e}, xhat set to C",
                    s.id
                ));
                s.w
            })
        })
        .collect();
    (xhat, warnings)
}

fn check_dims(ds: &LongitudinalDataset, fit: &CoxFit) -> Result<(), ImputeError> {
    if fit.gamma.len() != ds.p_v() {
        return Err(ImputeError::CovariateMismatch {
            fit: fit.gamma.len(),
            data: ds.p_v(),
        });
    }
    Ok(())
}

pub fn conditional_mean_impute(
    ds: Arc<LongitudinalDataset>,
    fit: Arc<CoxFit>,
) -> Result<ImputedDataset, ImputeError> {
    check_dims(&ds, &fit)?;
    let grid = TimeGrid::new(&ds, &fit.baseline);
    let (xhat, warnings) = impute_with(&ds, &grid, &fit.baseline, &fit.gamma);
    let imputed_flag = ds.subjects().iter().map(|s| !s.delta).collect();
    Ok(ImputedDataset {
        base: ds,
        xhat,
        imputed_flag,
        gamma: Some(fit.gamma.clone()),
        cox_fit: Some(fit),
        warnings,
    })
}

/// Square root `L` with `L L' = cov`: Cholesky when positive definite,
/// otherwise a symmetric eigen root for positive semidefinite input.
fn covariance_root(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, ImputeError> {
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale || !l.is_finite()) {
        return Err(ImputeError::NonPDCovariance);
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// `m` imputations with `gamma* ~ Normal(gamma_hat, gamma_cov)`, the Breslow
/// baseline of the point fit held fixed. Draw `k` uses its own seeded stream,
/// so the output does not depend on the thread count.
pub fn draw_multiple_imputations(
    ds: Arc<LongitudinalDataset>,
    fit: Arc<CoxFit>,
    m: usize,
    seed: u64,
) -> Result<Vec<ImputedDataset>, ImputeError> {
    if m < 2 {
        return Err(ImputeError::TooFewImputations(m));
    }
    check_dims(&ds, &fit)?;
    let root = covariance_root(&fit.gamma_cov)?;
    let grid = TimeGrid::new(&ds, &fit.baseline);
    let imputed_flag: Vec<bool> = ds.subjects().iter().map(|s| !s.delta).collect();
    let p = fit.gamma.len();
    let draws: Vec<ImputedDataset> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64, stream::IMPUTATION);
            let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            let gamma = &fit.gamma + &root * z;
            let (xhat, warnings) = impute_with(&ds, &grid, &fit.baseline, &gamma);
            ImputedDataset {
                base: Arc::clone(&ds),
                xhat,
                imputed_flag: imputed_flag.clone(),
                cox_fit: Some(Arc::clone(&fit)),
                gamma: Some(gamma),
                warnings,
            }
        })
        .collect();
    Ok(draws)
}
