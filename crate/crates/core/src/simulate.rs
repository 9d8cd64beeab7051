//! Simulation study: synthetic longitudinal data with a Cox-distributed
//! event time, the oracle / MCMI / ACE estimators per replicate, and
//! bias, SEE, ESE, MSE and coverage across replicates.
//!
//! Data for subject `i` with visits `j = 1..m`:
//!
//! ```text
//! V1, V2 ~ N(0, 1)
//! X  = -log(u) / (h0 exp(lp)),  u ~ U(0, 1)   (constant baseline hazard h0)
//! lp = eta1 V1 - eta2 V2    (correct)  or  eta1 V1 - eta2 V1^2   (misspecified)
//! C ~ Exp(lambda_c),  W = min(X, C),  delta = 1{X <= C}
//! Y_ij = beta Za_ij + alpha (s_ij - X) + b_i Z_ij + e_ij,  s_ij = j - 1
//! Za ~ N(0, 1),  Z ~ N(5, 1),  b ~ N(0, 1),  e ~ N(0, sigma2)
//! ```
//!
//! The imputation model sees `(V1, V2)` in the correct scenario and only `V1`
//! in the misspecified one.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_reml, pool_rubin};
use crate::cox::fit_cox;
use crate::data::{ColumnNames, LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::estimator::fit_ace;
use crate::impute::{conditional_mean_impute, draw_multiple_imputations, ImputedDataset};
use crate::numerics::norm_quantile;
use crate::rng::{derive_seed, stream, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    CorrectSpec,
    MisSpec,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::CorrectSpec => "correct",
            Scenario::MisSpec => "misspecified",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Oracle,
    Mcmi,
    Ace,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Oracle, Method::Mcmi, Method::Ace];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Oracle => "oracle",
            Method::Mcmi => "mcmi",
            Method::Ace => "ace",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub scenario: Scenario,
    /// Log-hazard ratios; the scenario default when absent.
    pub eta: Option<[f64; 2]>,
    pub lambda_c: f64,
    /// Constant baseline hazard of the event time.
    pub baseline_hazard: f64,
    /// `(beta, alpha, sigma2)`.
    pub theta0: [f64; 3],
    pub reps: usize,
    pub seed: u64,
    pub m_imputations: usize,
    pub methods: Vec<Method>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            m: 3,
            scenario: Scenario::CorrectSpec,
            eta: None,
            lambda_c: 0.5,
            baseline_hazard: 0.5,
            theta0: [1.0, 1.0, 1.0],
            reps: 300,
            seed: 1,
            m_imputations: 15,
            methods: Method::ALL.to_vec(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 10 {
            return bad(format!("n = {} (need >= 10)", self.n));
        }
        if self.m < 1 {
            return bad("m must be >= 1".into());
        }
        if self.reps < 1 {
            return bad("reps must be >= 1".into());
        }
        if !(self.lambda_c > 0.0) {
            return bad(format!("lambda_c = {} must be > 0", self.lambda_c));
        }
        if !(self.baseline_hazard > 0.0) {
            return bad(format!("baseline_hazard = {} must be > 0", self.baseline_hazard));
        }
        if !(self.theta0[2] > 0.0) {
            return bad("theta0 sigma2 must be > 0".into());
        }
        if self.methods.contains(&Method::Mcmi) && self.m_imputations < 2 {
            return bad("m_imputations must be >= 2".into());
        }
        Ok(())
    }

    pub fn eta(&self) -> [f64; 2] {
        self.eta.unwrap_or(match self.scenario {
            Scenario::CorrectSpec => [1.0, 0.5],
            Scenario::MisSpec => [1.0, 0.25],
        })
    }

    /// Named censoring level for the three standard rates.
    pub fn censoring_label(&self) -> String {
        match self.lambda_c {
            0.125 => "light".into(),
            0.5 => "medium".into(),
            2.0 => "heavy".into(),
            x => x.to_string(),
        }
    }
}

/// A generated dataset together with the latent event times.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub dataset: LongitudinalDataset,
    pub true_x: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate_replicate(cfg: &SimConfig, rep_index: usize) -> Replicate {
    let mut rng = stream_rng(cfg.seed, rep_index as u64, stream::DATA);
    let [eta1, eta2] = cfg.eta();
    let [beta, alpha, sigma2] = cfg.theta0;
    let censor = Exp::new(cfg.lambda_c).expect("lambda_c > 0");
    let noise = Normal::new(0.0, sigma2.sqrt()).expect("sigma2 > 0");
    let m = cfg.m;
    let s = DVector::from_fn(m, |j, _| j as f64);

    let mut subjects = Vec::with_capacity(cfg.n);
    let mut true_x = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let v1 = normal(&mut rng);
        let v2 = normal(&mut rng);
        let lp = match cfg.scenario {
            Scenario::CorrectSpec => eta1 * v1 - eta2 * v2,
            Scenario::MisSpec => eta1 * v1 - eta2 * v1 * v1,
        };
        let u = 1.0 - rng.random::<f64>();
        let x = -u.ln() / (cfg.baseline_hazard * lp.exp());
        let c = censor.sample(&mut rng);
        let b = normal(&mut rng);
        let za = DMatrix::from_fn(m, 1, |_, _| normal(&mut rng));
        let z = DMatrix::from_fn(m, 1, |_, _| 5.0 + normal(&mut rng));
        let y = DVector::from_fn(m, |j, _| {
            beta * za[j] + alpha * (s[j] - x) + b * z[j] + noise.sample(&mut rng)
        });
        let v = match cfg.scenario {
            Scenario::CorrectSpec => DVector::from_column_slice(&[v1, v2]),
            Scenario::MisSpec => DVector::from_element(1, v1),
        };
        subjects.push(SubjectRecord {
            id: (i + 1).to_string(),
            y,
            s: s.clone(),
            za,
            zb: z,
            w: x.min(c),
            delta: x <= c,
            v,
        });
        true_x.push(x);
    }
    let names = ColumnNames {
        za: vec!["za".into()],
        zb: vec!["z".into()],
        v: match cfg.scenario {
            Scenario::CorrectSpec => vec!["v1".into(), "v2".into()],
            Scenario::MisSpec => vec!["v1".into()],
        },
    };
    let dataset = LongitudinalDataset::new(subjects, Some(names)).expect("generated data are valid");
    Replicate { dataset, true_x }
}

/// One method's estimates of `(beta.., alpha, sigma2)` in one replicate.
/// Standard errors are absent where the method does not provide them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodEstimate {
    pub estimate: Vec<f64>,
    pub se: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub rep: usize,
    pub censored_fraction: f64,
    /// Per method, in the order of `SimConfig::methods`.
    pub fits: Vec<(Method, std::result::Result<MethodEstimate, String>)>,
}

fn oracle(rep: &Replicate) -> Result<MethodEstimate> {
    let ds = rep.dataset.with_observed_times(&rep.true_x)?;
    let fit = fit_reml(&ImputedDataset::from_observed(Arc::new(ds)))?;
    let mut estimate: Vec<f64> = fit.beta_alpha.iter().copied().collect();
    let mut se: Vec<Option<f64>> = fit.se.iter().map(|&s| Some(s)).collect();
    estimate.push(fit.sigma2);
    se.push(None);
    Ok(MethodEstimate { estimate, se })
}

fn mcmi(ds: &Arc<LongitudinalDataset>, m: usize, seed: u64) -> Result<MethodEstimate> {
    let cox = Arc::new(fit_cox(&ds.w(), &ds.delta(), &ds.v_matrix())?);
    let draws = draw_multiple_imputations(Arc::clone(ds), cox, m, seed)?;
    let fits = draws.iter().map(fit_reml).collect::<std::result::Result<Vec<_>, _>>()?;
    let pooled = pool_rubin(&fits)?;
    let mut estimate = pooled.theta_bar.clone();
    let mut se: Vec<Option<f64>> = pooled.se().into_iter().map(Some).collect();
    estimate.push(pooled.sigma2_bar);
    se.push(None);
    Ok(MethodEstimate { estimate, se })
}

fn ace(ds: &Arc<LongitudinalDataset>) -> Result<MethodEstimate> {
    let cox = Arc::new(fit_cox(&ds.w(), &ds.delta(), &ds.v_matrix())?);
    let imputed = conditional_mean_impute(Arc::clone(ds), cox)?;
    let fit = fit_ace(&imputed, None)?;
    Ok(MethodEstimate {
        estimate: fit.estimate.theta.to_vector().iter().copied().collect(),
        se: fit.estimate.se().iter().map(|&s| Some(s)).collect(),
    })
}

pub fn run_replicate(cfg: &SimConfig, rep_index: usize) -> ReplicateResult {
    let rep = generate_replicate(cfg, rep_index);
    let ds = Arc::new(rep.dataset.clone());
    let imputation_seed = derive_seed(cfg.seed, rep_index as u64, stream::IMPUTATION);
    let fits = cfg
        .methods
        .iter()
        .map(|&method| {
            let res = match method {
                Method::Oracle => oracle(&rep),
                Method::Mcmi => mcmi(&ds, cfg.m_imputations, imputation_seed),
                Method::Ace => ace(&ds),
            };
            (method, res.map_err(|e| e.to_string()))
        })
        .collect();
    ReplicateResult {
        rep: rep_index,
        censored_fraction: ds.n_censored() as f64 / ds.len() as f64,
        fits,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub method: Method,
    pub parameter: String,
    pub bias: f64,
    /// Mean estimated standard error.
    pub see: Option<f64>,
    /// Standard deviation of the estimates across replicates (n - 1).
    pub ese: Option<f64>,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub n_ok: usize,
    pub n_fail: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub scenario: Scenario,
    pub censoring: String,
    pub lambda_c: f64,
    pub reps: usize,
    pub mean_censored_fraction: f64,
    pub rows: Vec<MetricRow>,
    #[serde(skip)]
    pub replicates: Vec<ReplicateResult>,
}

impl SimReport {
    pub fn row(&self, method: Method, parameter: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.parameter == parameter)
    }

    /// Failure messages as `(rep, method, message)`.
    pub fn failures(&self) -> Vec<(usize, Method, &str)> {
        self.replicates
            .iter()
            .flat_map(|r| {
                r.fits
                    .iter()
                    .filter_map(move |(m, f)| f.as_ref().err().map(|e| (r.rep, *m, e.as_str())))
            })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "scenario", "censoring", "method", "parameter", "bias", "see", "ese", "mse", "coverage", "n_fail",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                self.scenario.to_string(),
                self.censoring.clone(),
                r.method.to_string(),
                r.parameter.clone(),
                r.bias.to_string(),
                opt(r.see),
                opt(r.ese),
                r.mse.to_string(),
                opt(r.coverage),
                r.n_fail.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn parameter_names(p_a: usize) -> Vec<String> {
    let mut names: Vec<String> = if p_a == 1 {
        vec!["beta".into()]
    } else {
        (1..=p_a).map(|k| format!("beta{k}")).collect()
    };
    names.push("alpha".into());
    names.push("sigma2".into());
    names
}

fn metrics(method: Method, truth: &[f64], names: &[String], results: &[ReplicateResult]) -> Vec<MetricRow> {
    let z = norm_quantile(0.975).expect("valid level");
    let ok: Vec<&MethodEstimate> = results
        .iter()
        .filter_map(|r| r.fits.iter().find(|(m, _)| *m == method).and_then(|(_, f)| f.as_ref().ok()))
        .collect();
    let n_fail = results.len() - ok.len();
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let est: Vec<f64> = ok.iter().map(|e| e.estimate[k]).collect();
            let n = est.len() as f64;
            let mean = est.iter().sum::<f64>() / n;
            let bias = mean - truth[k];
            let mse = est.iter().map(|e| (e - truth[k]).powi(2)).sum::<f64>() / n;
            let ese = (est.len() > 1)
                .then(|| (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            let ses: Option<Vec<f64>> = ok.iter().map(|e| e.se[k]).collect();
            let (see, coverage) = match ses {
                Some(ses) if !ses.is_empty() => {
                    let see = ses.iter().sum::<f64>() / n;
                    let hits = est
                        .iter()
                        .zip(&ses)
                        .filter(|(e, s)| (*e - truth[k]).abs() <= z * *s)
                        .count();
                    (Some(see), Some(hits as f64 / n))
                }
                _ => (None, None),
            };
            MetricRow {
                method,
                parameter: name.clone(),
                bias,
                see,
                ese,
                mse,
                coverage,
                n_ok: est.len(),
                n_fail,
            }
        })
        .collect()
}

/// Run every replicate (in parallel) and aggregate per method and parameter.
/// Replicates are independent streams keyed by index, so the report does
/// not depend on the thread count.
pub fn run_study(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let replicates: Vec<ReplicateResult> = (0..cfg.reps).into_par_iter().map(|r| run_replicate(cfg, r)).collect();
    let names = parameter_names(1);
    let truth = cfg.theta0.to_vec();
    let rows = cfg
        .methods
        .iter()
        .flat_map(|&m| metrics(m, &truth, &names, &replicates))
        .collect();
    let mean_censored_fraction =
        replicates.iter().map(|r| r.censored_fraction).sum::<f64>() / replicates.len() as f64;
    Ok(SimReport {
        scenario: cfg.scenario,
        censoring: cfg.censoring_label(),
        lambda_c: cfg.lambda_c,
        reps: cfg.reps,
        mean_censored_fraction,
        rows,
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenario: Scenario) -> SimConfig {
        SimConfig {
            n: 200,
            reps: 1,
            scenario,
            m_imputations: 3,
            ..SimConfig::default()
        }
    }

    #[test]
    fn replicate_is_deterministic() {
        let cfg = small(Scenario::CorrectSpec);
        let a = generate_replicate(&cfg, 4);
        let b = generate_replicate(&cfg, 4);
        assert_eq!(a.true_x, b.true_x);
        assert_eq!(a.dataset.subjects(), b.dataset.subjects());
        assert_ne!(generate_replicate(&cfg, 5).true_x, a.true_x);
    }

    #[test]
    fn layout_per_scenario() {
        let r = generate_replicate(&small(Scenario::MisSpec), 0);
        assert_eq!((r.dataset.p_a(), r.dataset.p_b(), r.dataset.p_v()), (1, 1, 1));
        let r = generate_replicate(&small(Scenario::CorrectSpec), 0);
        assert_eq!(r.dataset.p_v(), 2);
        for (s, &x) in r.dataset.subjects().iter().zip(&r.true_x) {
            assert_eq!(s.delta, x <= s.w);
            assert!(s.w <= x);
            assert_eq!(s.s.as_slice(), &[0.0, 1.0, 2.0]);
        }
    }

    #[test]
    fn zero_eta_gives_unit_exponential() {
        let cfg = SimConfig {
            n: 20000,
            eta: Some([0.0, 0.0]),
            baseline_hazard: 1.0,
            ..small(Scenario::CorrectSpec)
        };
        let r = generate_replicate(&cfg, 0);
        let mean = r.true_x.iter().sum::<f64>() / r.true_x.len() as f64;
        // Exp(1): mean 1, SE of the mean 1/sqrt(n)
        assert!((mean - 1.0).abs() < 4.0 / (cfg.n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn single_rep_report() {
        let report = run_study(&small(Scenario::CorrectSpec)).unwrap();
        assert_eq!(report.rows.len(), 9);
        for row in &report.rows {
            assert_eq!(row.n_fail, 0, "{:?}", report.failures());
            assert!(row.ese.is_none());
            if let Some(c) = row.coverage {
                assert!(c == 0.0 || c == 1.0);
            }
            assert!((row.mse - row.bias * row.bias).abs() < 1e-12);
        }
        assert!(report.row(Method::Oracle, "sigma2").unwrap().see.is_none());
        assert!(report.row(Method::Ace, "sigma2").unwrap().see.is_some());
    }

    #[test]
    fn config_validation_and_defaults() {
        let cfg: SimConfig = serde_json::from_str(r#"{"n": 50, "reps": 2, "scenario": "MisSpec"}"#).unwrap();
        assert_eq!(cfg.eta(), [1.0, 0.25]);
        assert_eq!(cfg.m_imputations, 15);
        assert!(SimConfig { n: 5, ..cfg.clone() }.validate().is_err());
        assert!(SimConfig { lambda_c: 0.0, ..cfg }.validate().is_err());
    }
}
