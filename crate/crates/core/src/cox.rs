//! Cox proportional-hazards fit for the censored event time given subject
//! covariates, with Breslow ties and the Breslow baseline survival.
//!
//! Risk sets follow `w_j >= t`. The baseline survival is a right-continuous
//! step function with jumps at the distinct event times; it is 1 before the
//! first event and held flat after the last one.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::CoxError;

const MAX_ITER: usize = 50;
const SCORE_TOL: f64 = 1e-8;
const REL_LOGLIK_TOL: f64 = 1e-10;
const MAX_ABS_GAMMA: f64 = 50.0;

/// Breslow estimate of the baseline survival `S0(t) = exp(-H0(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSurvival {
    /// Sorted distinct event times.
    pub times: Vec<f64>,
    /// `H0` at each time.
    pub cumhaz: Vec<f64>,
    /// `S0` at each time.
    pub values: Vec<f64>,
}

impl BaselineSurvival {
    fn index_at(&self, t: f64) -> Option<usize> {
        // last jump at or before t
        let k = self.times.partition_point(|&x| x <= t);
        k.checked_sub(1)
    }

    pub fn cumulative_hazard_at(&self, t: f64) -> f64 {
        self.index_at(t).map_or(0.0, |k| self.cumhaz[k])
    }

    pub fn at(&self, t: f64) -> f64 {
        self.index_at(t).map_or(1.0, |k| self.values[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    /// Log-hazard ratios.
    pub gamma: DVector<f64>,
    /// Inverse observed information at `gamma`.
    pub gamma_cov: DMatrix<f64>,
    pub baseline: BaselineSurvival,
    /// Partial log-likelihood at `gamma`.
    pub loglik: f64,
    /// Partial log-likelihood at `gamma = 0`.
    pub loglik_null: f64,
    pub n_events: usize,
    pub iterations: usize,
}

/// JSON dump of a fit.
#[derive(Debug, Clone, Serialize)]
pub struct CoxSummary {
    pub gamma: Vec<f64>,
    pub se: Vec<f64>,
    pub baseline: BaselineSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineSummary {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

impl CoxFit {
    pub fn se(&self) -> DVector<f64> {
        self.gamma_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn summary(&self) -> CoxSummary {
        CoxSummary {
            gamma: self.gamma.iter().copied().collect(),
            se: self.se().iter().copied().collect(),
            baseline: BaselineSummary {
                times: self.baseline.times.clone(),
                survival: self.baseline.values.clone(),
            },
        }
    }
}

/// `S0(t)^{exp(gamma' v)}`.
pub fn survival_at(fit: &CoxFit, t: f64, v: &DVector<f64>) -> f64 {
    let e = fit.gamma.dot(v).exp();
    (-fit.baseline.cumulative_hazard_at(t) * e).exp()
}

/// Subjects ordered by decreasing time, grouped by distinct time.
struct RiskOrder {
    /// (time, indices with that time)
    blocks: Vec<(f64, Vec<usize>)>,
}

impl RiskOrder {
    fn new(w: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..w.len()).collect();
        idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
        let mut blocks: Vec<(f64, Vec<usize>)> = Vec::new();
        for i in idx {
            match blocks.last_mut() {
                Some((t, members)) if *t == w[i] => members.push(i),
                _ => blocks.push((w[i], vec![i])),
            }
        }
        Self { blocks }
    }
}

struct PartialLik {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn partial_likelihood(order: &RiskOrder, delta: &[bool], v: &DMatrix<f64>, gamma: &DVector<f64>) -> PartialLik {
    let p = v.ncols();
    let eta: DVector<f64> = v * gamma;
    let shift = eta.max();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for (_, members) in &order.blocks {
        for &i in members {
            let r = (eta[i] - shift).exp();
            let vi = v.row(i).transpose();
            s0 += r;
            s1.axpy(r, &vi, 1.0);
            s2.ger(r, &vi, &vi, 1.0);
        }
        let mut d = 0usize;
        for &i in members {
            if delta[i] {
                d += 1;
                loglik += eta[i];
                score += v.row(i).transpose();
            }
        }
        if d > 0 {
            let df = d as f64;
            let mean = &s1 / s0;
            loglik -= df * (s0.ln() + shift);
            score.axpy(-df, &mean, 1.0);
            info += (&s2 / s0 - &mean * mean.transpose()) * df;
        }
    }
    PartialLik { loglik, score, info }
}

/// Partial log-likelihood with Breslow ties; exposed for oracle tests.
pub fn partial_loglik(w: &[f64], delta: &[bool], v: &DMatrix<f64>, gamma: &DVector<f64>) -> f64 {
    partial_likelihood(&RiskOrder::new(w), delta, v, gamma).loglik
}

/// Breslow cumulative hazard `H0(t) = sum_{t_k <= t} d_k / sum_{w_j >= t_k} exp(gamma' v_j)`.
pub fn breslow_baseline(w: &[f64], delta: &[bool], v: &DMatrix<f64>, gamma: &DVector<f64>) -> BaselineSurvival {
    let order = RiskOrder::new(w);
    let eta: DVector<f64> = v * gamma;
    let shift = if eta.is_empty() { 0.0 } else { eta.max() };
    let mut s0 = 0.0;
    let mut jumps: Vec<(f64, f64)> = Vec::new();
    for (t, members) in &order.blocks {
        for &i in members {
            s0 += (eta[i] - shift).exp();
        }
        let d = members.iter().filter(|&&i| delta[i]).count();
        if d > 0 {
            // d / (exp(shift) * s0)
            jumps.push((*t, d as f64 * (-(s0.ln() + shift)).exp()));
        }
    }
    jumps.reverse();
    let mut h = 0.0;
    let mut times = Vec::with_capacity(jumps.len());
    let mut cumhaz = Vec::with_capacity(jumps.len());
    for (t, dh) in jumps {
        h += dh;
        times.push(t);
        cumhaz.push(h);
    }
    let values = cumhaz.iter().map(|h| (-h).exp()).collect();
    BaselineSurvival { times, cumhaz, values }
}

/// Newton-Raphson maximization of the Breslow partial likelihood from
/// `gamma = 0`, followed by the Breslow baseline at the estimate.
///
/// Besides `|gamma| > 50`, a monotone likelihood is reported when the score
/// has vanished but the Newton increment has not (the maximum lies at
/// infinity and the information decays as fast as the score).
pub fn fit_cox(w: &[f64], delta: &[bool], v: &DMatrix<f64>) -> Result<CoxFit, CoxError> {
    let n = w.len();
    let p = v.ncols();
    if delta.len() != n || v.nrows() != n {
        return Err(CoxError::DimensionMismatch(format!(
            "w {n}, delta {}, v {}",
            delta.len(),
            v.nrows()
        )));
    }
    let n_events = delta.iter().filter(|&&d| d).count();
    if n_events == 0 {
        return Err(CoxError::NoEvents);
    }
    if n < p + 1 {
        return Err(CoxError::TooFewSubjects { needed: p + 1, got: n });
    }
    for k in 0..p {
        let col = v.column(k);
        if col.iter().all(|&x| x == col[0]) {
            return Err(CoxError::ConstantCovariate(k));
        }
    }

    // centering leaves gamma unchanged and keeps exp() in range
    let means = DVector::from_fn(p, |k, _| v.column(k).mean());
    let vc = DMatrix::from_fn(n, p, |i, k| v[(i, k)] - means[k]);

    let order = RiskOrder::new(w);
    let mut gamma = DVector::zeros(p);
    let mut cur = partial_likelihood(&order, delta, &vc, &gamma);
    let loglik_null = cur.loglik;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..MAX_ITER {
        iterations = iter;
        if max_abs(&cur.score) < SCORE_TOL {
            converged = true;
            break;
        }
        let step = solve_spd(&cur.info, &cur.score).ok_or(CoxError::SingularInformation)?;
        let mut scale = 1.0;
        let mut next = None;
        for _ in 0..=20 {
            let cand = &gamma + &step * scale;
            let pl = partial_likelihood(&order, delta, &vc, &cand);
            if pl.loglik.is_finite() && pl.loglik >= cur.loglik {
                next = Some((cand, pl));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, pl)) = next else {
            converged = true;
            break;
        };
        let rel = (pl.loglik - cur.loglik).abs() / cur.loglik.abs().max(1e-300);
        gamma = cand;
        cur = pl;
        iterations = iter + 1;
        if max_abs(&gamma) > MAX_ABS_GAMMA {
            return Err(CoxError::MonotoneLikelihood(MAX_ABS_GAMMA));
        }
        if rel < REL_LOGLIK_TOL || max_abs(&cur.score) < SCORE_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CoxError::NonConvergence(MAX_ITER));
    }

    let gamma_cov = cur
        .info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(CoxError::MonotoneLikelihood(MAX_ABS_GAMMA))?;
    if p > 0 {
        let newton_step = &gamma_cov * &cur.score;
        if max_abs(&newton_step) > 1e-3 * (1.0 + max_abs(&gamma)) {
            return Err(CoxError::MonotoneLikelihood(MAX_ABS_GAMMA));
        }
    }

    let baseline = breslow_baseline(w, delta, v, &gamma);
    Ok(CoxFit {
        gamma,
        gamma_cov,
        baseline,
        loglik: cur.loglik,
        loglik_null,
        n_events,
        iterations,
    })
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.is_empty() {
        return Some(DVector::zeros(0));
    }
    a.clone()
        .cholesky()
        .map(|c| c.solve(b))
        .or_else(|| a.clone().lu().solve(b))
}
