//! JSON fit reports shared by every estimator, and the outcome ranking table.

use serde::Serialize;

use crate::baselines::{PooledEstimate, RemlFit, RemlStatus};
use crate::estimator::AceFit;
use crate::numerics::norm_quantile;

#[derive(Debug, Clone, Serialize)]
pub struct ThetaJson {
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: Option<f64>,
    /// Where the variance-ratio search ended, for REML-based fits.
    pub reml_status: Option<RemlStatus>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentifiabilityJson {
    pub condition_number: f64,
    pub degenerate_columns: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub method: String,
    pub outcome: Option<String>,
    pub theta: ThetaJson,
    /// Standard errors in `(beta.., alpha, sigma2)` order; `null` where the
    /// method provides none.
    pub se: Vec<Option<f64>>,
    pub ci95: Vec<Option<[f64; 2]>>,
    pub convergence: Convergence,
    pub identifiability: Option<IdentifiabilityJson>,
    pub n_used: usize,
    pub warnings: Vec<String>,
}

fn intervals(est: &[f64], se: &[Option<f64>]) -> Vec<Option<[f64; 2]>> {
    let z = norm_quantile(0.975).expect("valid level");
    est.iter()
        .zip(se)
        .map(|(&e, s)| s.map(|s| [e - z * s, e + z * s]))
        .collect()
}

fn split(coef: &[f64]) -> (Vec<f64>, f64) {
    let p = coef.len() - 1;
    (coef[..p].to_vec(), coef[p])
}

impl FitReport {
    pub fn from_ace(fit: &AceFit) -> Self {
        let t = &fit.estimate.theta;
        let est: Vec<f64> = t.to_vector().iter().copied().collect();
        let se: Vec<Option<f64>> = fit.estimate.se().iter().map(|&s| Some(s)).collect();
        Self {
            method: "ace".into(),
            outcome: None,
            theta: ThetaJson {
                beta: t.beta.iter().copied().collect(),
                alpha: t.alpha,
                sigma2: t.sigma2,
            },
            ci95: intervals(&est, &se),
            se,
            convergence: Convergence {
                converged: fit.estimate.converged,
                iterations: fit.estimate.iterations,
                residual_norm: Some(fit.residual_norm),
                reml_status: None,
            },
            identifiability: Some(IdentifiabilityJson {
                condition_number: fit.identifiability.condition_number,
                degenerate_columns: fit.identifiability.degenerate_names.clone(),
            }),
            n_used: fit.estimate.n_used,
            warnings: Vec::new(),
        }
    }

    /// Single REML fit (`oracle` or `cca`).
    pub fn from_reml(method: &str, fit: &RemlFit) -> Self {
        let coef: Vec<f64> = fit.beta_alpha.iter().copied().collect();
        let (beta, alpha) = split(&coef);
        let mut est = coef.clone();
        est.push(fit.sigma2);
        let mut se: Vec<Option<f64>> = fit.se.iter().map(|&s| Some(s)).collect();
        se.push(None);
        Self {
            method: method.into(),
            outcome: None,
            theta: ThetaJson {
                beta,
                alpha,
                sigma2: fit.sigma2,
            },
            ci95: intervals(&est, &se),
            se,
            convergence: Convergence {
                converged: true,
                iterations: 0,
                residual_norm: None,
                reml_status: Some(fit.status),
            },
            identifiability: None,
            n_used: fit.n_used,
            warnings: Vec::new(),
        }
    }

    pub fn from_pooled(pooled: &PooledEstimate, n_used: usize) -> Self {
        let (beta, alpha) = split(&pooled.theta_bar);
        let mut est = pooled.theta_bar.clone();
        est.push(pooled.sigma2_bar);
        let mut se: Vec<Option<f64>> = pooled.se().into_iter().map(Some).collect();
        se.push(None);
        Self {
            method: "mcmi".into(),
            outcome: None,
            theta: ThetaJson {
                beta,
                alpha,
                sigma2: pooled.sigma2_bar,
            },
            ci95: intervals(&est, &se),
            se,
            convergence: Convergence {
                converged: true,
                iterations: pooled.m,
                residual_norm: None,
                reml_status: None,
            },
            identifiability: None,
            n_used,
            warnings: Vec::new(),
        }
    }

    /// Slope and its standard error.
    pub fn alpha_with_se(&self) -> (f64, Option<f64>) {
        (self.theta.alpha, self.se[self.theta.beta.len()])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RankingRow {
    pub rank: usize,
    pub outcome: String,
    pub alpha: f64,
    pub se: f64,
    /// `|alpha| / SE(alpha)`.
    pub scaled_slope: f64,
}

/// Order outcomes by scaled slope, largest first. Ties keep input order.
pub fn rank_outcomes(entries: &[(String, f64, f64)]) -> Vec<RankingRow> {
    let mut rows: Vec<RankingRow> = entries
        .iter()
        .map(|(outcome, alpha, se)| RankingRow {
            rank: 0,
            outcome: outcome.clone(),
            alpha: *alpha,
            se: *se,
            scaled_slope: alpha.abs() / se,
        })
        .collect();
    rows.sort_by(|a, b| b.scaled_slope.total_cmp(&a.scaled_slope));
    for (k, r) in rows.iter_mut().enumerate() {
        r.rank = k + 1;
    }
    rows
}
