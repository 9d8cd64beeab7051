//! Comparison estimators built on a working-normal linear mixed model with a
//! single random-effect column: REML (used for the oracle, complete-case and
//! per-imputation fits) and Rubin's rules for pooling multiple imputations.
//!
//! Fixed effects are `(Za, s - x 1)` without an added intercept; the random
//! effect multiplies the one `Zb` column.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::LongitudinalDataset;
use crate::error::RemlError;
use crate::impute::ImputedDataset;
use crate::numerics::{norm_quantile, RANK_TOL};

const LOG_RATIO_MIN: f64 = -18.420680743952367; // ln 1e-8
const LOG_RATIO_MAX: f64 = 18.420680743952367; // ln 1e8
const GRID_POINTS: usize = 49;
const LOG_RATIO_TOL: f64 = 1e-10;

/// Where the variance-ratio search ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RemlStatus {
    Interior,
    /// `tau2 / sigma2` pinned at 1e-8: the random-effect variance is
    /// estimated as (numerically) zero.
    LowerBoundary,
    UpperBoundary,
}

#[derive(Debug, Clone)]
pub struct RemlFit {
    /// `(beta, alpha)`.
    pub beta_alpha: DVector<f64>,
    pub sigma2: f64,
    pub tau2: f64,
    /// Standard errors of `beta_alpha`.
    pub se: DVector<f64>,
    pub loglik_reml: f64,
    pub log_ratio: f64,
    pub status: RemlStatus,
    pub n_used: usize,
}

/// One cluster: `y = X b + z u + e`, `u ~ N(0, tau2)`, `e ~ N(0, sigma2 I)`.
#[derive(Debug, Clone)]
pub struct RemlGroup {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DVector<f64>,
}

/// Cross products needed to evaluate the profiled criterion in O(p^2) per
/// group via Sherman-Morrison on `H = I + rho z z'`.
struct GroupMoments {
    xtx: DMatrix<f64>,
    xtz: DVector<f64>,
    xty: DVector<f64>,
    ztz: f64,
    zty: f64,
    yty: f64,
}

struct Profile {
    loglik: f64,
    coef: DVector<f64>,
    sigma2: f64,
    xhx_inv: DMatrix<f64>,
}

struct Reml {
    moments: Vec<GroupMoments>,
    n_obs: usize,
    p: usize,
}

impl Reml {
    fn new(groups: &[RemlGroup]) -> Result<Self, RemlError> {
        let p = groups.first().map_or(0, |g| g.x.ncols());
        let n_obs: usize = groups.iter().map(|g| g.y.len()).sum();
        if n_obs <= p {
            return Err(RemlError::NoResidualDof);
        }
        let moments: Vec<GroupMoments> = groups
            .iter()
            .map(|g| GroupMoments {
                xtx: g.x.tr_mul(&g.x),
                xtz: g.x.tr_mul(&g.z),
                xty: g.x.tr_mul(&g.y),
                ztz: g.z.norm_squared(),
                zty: g.z.dot(&g.y),
                yty: g.y.norm_squared(),
            })
            .collect();
        let xtx = moments.iter().fold(DMatrix::zeros(p, p), |a, m| a + &m.xtx);
        let sv = xtx.singular_values();
        if p > 0 && !(sv.min() > RANK_TOL * sv.max()) {
            return Err(RemlError::SingularDesign);
        }
        Ok(Self { moments, n_obs, p })
    }

    fn profile(&self, log_ratio: f64) -> Result<Profile, RemlError> {
        let rho = log_ratio.exp();
        let p = self.p;
        let mut xhx = DMatrix::zeros(p, p);
        let mut xhy = DVector::zeros(p);
        let mut yhy = 0.0;
        let mut logdet_h = 0.0;
        for g in &self.moments {
            let d = 1.0 + rho * g.ztz;
            let c = rho / d;
            xhx += &g.xtx - &g.xtz * g.xtz.transpose() * c;
            xhy += &g.xty - &g.xtz * (c * g.zty);
            yhy += g.yty - c * g.zty * g.zty;
            logdet_h += d.ln();
        }
        let chol = xhx.cholesky().ok_or(RemlError::SingularDesign)?;
        let coef = chol.solve(&xhy);
        let rss = (yhy - coef.dot(&xhy)).max(0.0);
        let dof = (self.n_obs - p) as f64;
        let sigma2 = rss / dof;
        let logdet_xhx = 2.0 * chol.l().diagonal().map(f64::ln).sum();
        let loglik = -0.5 * (dof * sigma2.ln() + logdet_h + logdet_xhx + dof)
            - 0.5 * dof * (2.0 * std::f64::consts::PI).ln();
        Ok(Profile {
            loglik,
            coef,
            sigma2,
            xhx_inv: chol.inverse(),
        })
    }

    fn objective(&self, log_ratio: f64) -> f64 {
        self.profile(log_ratio)
            .ok()
            .map(|p| p.loglik)
            .filter(|l| l.is_finite())
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Maximize `f` on `[a, b]` by golden-section search.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// REML with `(beta, sigma2)` profiled out and a bounded search over
/// `log(tau2 / sigma2)`: coarse grid, then golden section around the best
/// grid point.
pub fn reml(groups: &[RemlGroup]) -> Result<RemlFit, RemlError> {
    let model = Reml::new(groups)?;
    let step = (LOG_RATIO_MAX - LOG_RATIO_MIN) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|k| LOG_RATIO_MIN + step * k as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&t| model.objective(t)).collect();
    let best = (0..GRID_POINTS)
        .filter(|&k| values[k].is_finite())
        .max_by(|&i, &j| values[i].total_cmp(&values[j]))
        .ok_or(RemlError::NonConvergence)?;
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(GRID_POINTS - 1)];
    let mut log_ratio = golden_max(|t| model.objective(t), lo, hi, LOG_RATIO_TOL);
    // the golden section never evaluates the endpoints themselves
    for edge in [LOG_RATIO_MIN, LOG_RATIO_MAX] {
        if (edge == lo || edge == hi) && model.objective(edge) >= model.objective(log_ratio) {
            log_ratio = edge;
        }
    }
    let status = if log_ratio - LOG_RATIO_MIN < 1e-6 {
        RemlStatus::LowerBoundary
    } else if LOG_RATIO_MAX - log_ratio < 1e-6 {
        RemlStatus::UpperBoundary
    } else {
        RemlStatus::Interior
    };
    let prof = model.profile(log_ratio)?;
    if !prof.loglik.is_finite() {
        return Err(RemlError::NonConvergence);
    }
    let se = (prof.xhx_inv.diagonal() * prof.sigma2).map(|v| v.max(0.0).sqrt());
    Ok(RemlFit {
        tau2: log_ratio.exp() * prof.sigma2,
        beta_alpha: prof.coef,
        sigma2: prof.sigma2,
        se,
        loglik_reml: prof.loglik,
        log_ratio,
        status,
        n_used: groups.len(),
    })
}

/// Groups for the outcome model with event times `xhat`.
pub fn model_groups(ds: &ImputedDataset) -> Result<Vec<RemlGroup>, RemlError> {
    if ds.base.p_b() != 1 {
        return Err(RemlError::UnsupportedRandomEffects(ds.base.p_b()));
    }
    Ok(ds
        .base
        .subjects()
        .iter()
        .zip(&ds.xhat)
        .map(|(s, &x)| {
            let p = s.za.ncols();
            let mut design = s.za.clone().insert_column(p, 0.0);
            design.set_column(p, &s.s.map(|t| t - x));
            RemlGroup {
                y: s.y.clone(),
                x: design,
                z: s.zb.column(0).into_owned(),
            }
        })
        .collect())
}

/// REML fit treating `xhat` as the event times.
pub fn fit_reml(ds: &ImputedDataset) -> Result<RemlFit, RemlError> {
    reml(&model_groups(ds)?)
}

/// REML on the uncensored subjects only, with their observed event times.
pub fn complete_case(ds: &LongitudinalDataset) -> Result<RemlFit, RemlError> {
    let n_obs = ds.len() - ds.n_censored();
    if n_obs < 2 {
        return Err(RemlError::TooFewUncensored(n_obs));
    }
    let kept = ds.filter(|s| s.delta).map_err(|_| RemlError::TooFewUncensored(n_obs))?;
    fit_reml(&ImputedDataset::from_observed(std::sync::Arc::new(kept)))
}

#[derive(Debug, Clone, Serialize)]
pub struct PooledEstimate {
    pub theta_bar: Vec<f64>,
    pub within_var: Vec<f64>,
    pub between_var: Vec<f64>,
    pub total_var: Vec<f64>,
    pub m: usize,
    /// Mean of the per-imputation `sigma2` (no variance is pooled for it).
    pub sigma2_bar: f64,
    pub tau2_bar: f64,
}

impl PooledEstimate {
    pub fn se(&self) -> Vec<f64> {
        self.total_var.iter().map(|v| v.sqrt()).collect()
    }

    /// Normal-quantile intervals.
    pub fn ci(&self, level: f64) -> Vec<(f64, f64)> {
        let z = norm_quantile(0.5 + level / 2.0).expect("level in (0, 1)");
        self.theta_bar
            .iter()
            .zip(self.se())
            .map(|(&t, s)| (t - z * s, t + z * s))
            .collect()
    }
}

/// Per-parameter `(mean, within, between, total)` variance components.
pub type RubinParts = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

/// Rubin's rules on estimates and standard errors from `m` imputations.
pub fn rubin(estimates: &[Vec<f64>], ses: &[Vec<f64>]) -> Result<RubinParts, RemlError> {
    let m = estimates.len();
    if m < 2 {
        return Err(RemlError::TooFewFits(m));
    }
    let k = estimates[0].len();
    if ses.len() != m || estimates.iter().chain(ses).any(|v| v.len() != k) {
        return Err(RemlError::LayoutMismatch);
    }
    let mf = m as f64;
    let mut bar = vec![0.0; k];
    let mut within = vec![0.0; k];
    let mut between = vec![0.0; k];
    let mut total = vec![0.0; k];
    for j in 0..k {
        bar[j] = estimates.iter().map(|e| e[j]).sum::<f64>() / mf;
        within[j] = ses.iter().map(|s| s[j] * s[j]).sum::<f64>() / mf;
        between[j] = estimates.iter().map(|e| (e[j] - bar[j]).powi(2)).sum::<f64>() / (mf - 1.0);
        total[j] = within[j] + (1.0 + 1.0 / mf) * between[j];
    }
    Ok((bar, within, between, total))
}

pub fn pool_rubin(fits: &[RemlFit]) -> Result<PooledEstimate, RemlError> {
    let estimates: Vec<Vec<f64>> = fits.iter().map(|f| f.beta_alpha.iter().copied().collect()).collect();
    let ses: Vec<Vec<f64>> = fits.iter().map(|f| f.se.iter().copied().collect()).collect();
    let (theta_bar, within_var, between_var, total_var) = rubin(&estimates, &ses)?;
    let m = fits.len();
    Ok(PooledEstimate {
        theta_bar,
        within_var,
        between_var,
        total_var,
        m,
        sigma2_bar: fits.iter().map(|f| f.sigma2).sum::<f64>() / m as f64,
        tau2_bar: fits.iter().map(|f| f.tau2).sum::<f64>() / m as f64,
    })
}
