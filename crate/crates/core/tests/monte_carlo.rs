//! Seeded Monte-Carlo checks against closed-form or independently computed
//! answers.

mod common;

use std::sync::Arc;

use ace_core::cox::{fit_cox, survival_at};
use ace_core::estimator::{closed_form_beta_alpha, closed_form_sigma2, fit_ace};
use ace_core::impute::{conditional_mean_impute, draw_multiple_imputations, ImputedDataset};
use ace_core::rng::stream_rng;
use ace_core::simulate::{generate_replicate, run_study, Method, Scenario, SimConfig};
use ace_core::LongitudinalDataset;
use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};

/// Unit-exponential event times independent of one Gaussian covariate,
/// exponential censoring at `rate`.
fn null_survival(seed: u64, n: usize, censor_rate: f64) -> (Vec<f64>, Vec<bool>, DMatrix<f64>) {
    let mut rng = stream_rng(seed, 0, 77);
    let unit = Exp::new(1.0).unwrap();
    let censor = Exp::new(censor_rate).unwrap();
    let v = gauss_matrix(&mut rng, n, 1);
    let mut w = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = unit.sample(&mut rng);
        let c: f64 = censor.sample(&mut rng);
        w.push(x.min(c));
        delta.push(x <= c);
    }
    (w, delta, v)
}

#[test]
fn cox_null_calibration() {
    // P(C < X) = rate / (1 + rate) = 0.25
    let reps = 500;
    let covered = (0..reps)
        .filter(|&r| {
            let (w, delta, v) = null_survival(r, 2000, 1.0 / 3.0);
            let fit = fit_cox(&w, &delta, &v).unwrap();
            fit.gamma[0].abs() < 3.0 * fit.se()[0]
        })
        .count();
    assert!(covered as f64 >= 0.99 * reps as f64, "{covered} / {reps}");
}

#[test]
fn baseline_survival_matches_exponential() {
    let (w, delta, v) = null_survival(1, 5000, 1.0 / 3.0);
    let fit = fit_cox(&w, &delta, &v).unwrap();
    let s = survival_at(&fit, 1.0, &DVector::zeros(1));
    assert!((s - (-1.0f64).exp()).abs() < 0.03, "S(1) = {s}");
    assert_eq!(survival_at(&fit, 0.0, &DVector::zeros(1)), 1.0);
}

#[test]
fn imputation_recovers_memoryless_mean() {
    // E(X | X > C) = C + 1 for a unit exponential
    let (w, delta, v) = null_survival(2, 5000, 0.5);
    let ds = survival_dataset(&w, &delta, &v);
    let fit = Arc::new(fit_cox(&w, &delta, &v).unwrap());
    let imp = conditional_mean_impute(ds, fit).unwrap();
    let rel: Vec<f64> = (0..w.len())
        .filter(|&i| !delta[i])
        .map(|i| (imp.xhat[i] - (w[i] + 1.0)).abs() / (w[i] + 1.0))
        .collect();
    let mean_rel = rel.iter().sum::<f64>() / rel.len() as f64;
    assert!(mean_rel < 0.05, "mean relative error {mean_rel}");

    // the single-subject example: C = 0.5
    let grid_fit = Arc::new(fit_cox(&w, &delta, &v).unwrap());
    let mut w2 = w.clone();
    let mut d2 = delta.clone();
    w2.push(0.5);
    d2.push(false);
    let v2 = v.clone().insert_row(w.len(), 0.0);
    let ds2 = survival_dataset(&w2, &d2, &v2);
    let imp2 = conditional_mean_impute(ds2, grid_fit).unwrap();
    let x = imp2.xhat[w.len()];
    assert!((x - 1.5).abs() / 1.5 < 0.05, "xhat(C = 0.5) = {x}");
}

#[test]
fn censoring_fractions_by_rate() {
    for (rate, target) in [(0.125, 0.25), (0.5, 0.50), (2.0, 0.75)] {
        let cfg = SimConfig {
            n: 10_000,
            lambda_c: rate,
            ..SimConfig::default()
        };
        let ds = generate_replicate(&cfg, 0).dataset;
        let frac = ds.n_censored() as f64 / ds.len() as f64;
        assert!((frac - target).abs() < 0.03, "rate {rate}: {frac}");
    }
}

#[test]
fn multiple_imputation_draws_vary() {
    let cfg = SimConfig {
        n: 400,
        lambda_c: 2.0,
        ..SimConfig::default()
    };
    let ds = Arc::new(generate_replicate(&cfg, 0).dataset);
    let fit = Arc::new(fit_cox(&ds.w(), &ds.delta(), &ds.v_matrix()).unwrap());
    let draws = draw_multiple_imputations(Arc::clone(&ds), fit, 200, 5).unwrap();
    // earliest censored subject: most room above C
    let i = (0..ds.len())
        .filter(|&i| !ds.subjects()[i].delta)
        .min_by(|&a, &b| ds.subjects()[a].w.total_cmp(&ds.subjects()[b].w))
        .unwrap();
    let xs: Vec<f64> = draws.iter().map(|d| d.xhat[i]).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    assert!(var > 0.0);
    for d in &draws {
        for (k, s) in ds.subjects().iter().enumerate() {
            if s.delta {
                assert_eq!(d.xhat[k], s.w);
            }
        }
    }
}

#[test]
fn single_replicate_fit_is_near_truth() {
    let cfg = SimConfig {
        n: 1000,
        ..SimConfig::default()
    };
    let ds = Arc::new(generate_replicate(&cfg, 0).dataset);
    let cox = Arc::new(fit_cox(&ds.w(), &ds.delta(), &ds.v_matrix()).unwrap());
    let fit = fit_ace(&conditional_mean_impute(ds, cox).unwrap(), None).unwrap();
    assert!(fit.estimate.converged);
    assert!(fit.residual_norm < 1e-8);
    let est = fit.estimate.theta.to_vector();
    let se = fit.estimate.se();
    for k in 0..3 {
        assert!((est[k] - 1.0).abs() < 4.0 * se[k], "component {k}: {} (se {})", est[k], se[k]);
    }
    assert!(!fit.identifiability.singular);
    let v = &fit.sandwich.v;
    assert!((v - v.transpose()).amax() < 1e-15);
    assert!(v.diagonal().iter().all(|&d| d >= 0.0));
}

/// Uncensored subjects whose random-effect column is orthogonal to the
/// fixed-effects design, so the estimator reduces to ordinary least squares.
fn orthogonal_design(seed: u64, n: usize, m: usize) -> Arc<LongitudinalDataset> {
    let mut rng = stream_rng(seed, 0, 78);
    let subjects = (0..n)
        .map(|i| {
            let x = 0.5 + rng.random::<f64>() * 3.0;
            let s = DVector::from_fn(m, |j, _| j as f64);
            let za = gauss_matrix(&mut rng, m, 1);
            let mut g = za.clone().insert_column(1, 0.0);
            g.set_column(1, &s.map(|t| t - x));
            let raw = gauss_matrix(&mut rng, m, 1);
            let q = g.clone().qr().q();
            let zb = &raw - &q * (q.transpose() * &raw);
            let b = gauss(&mut rng);
            let y = DVector::from_fn(m, |j, _| 0.7 * za[j] - 1.3 * (s[j] - x) + b * zb[j] + 0.5 * gauss(&mut rng));
            subject(i, y, s, za, zb, x, true, DVector::from_element(1, gauss(&mut rng)))
        })
        .collect();
    Arc::new(LongitudinalDataset::new(subjects, None).unwrap())
}

#[test]
fn closed_form_matches_least_squares() {
    let ds = orthogonal_design(3, 60, 4);
    let imputed = ImputedDataset::from_observed(Arc::clone(&ds));
    let coef = closed_form_beta_alpha(&imputed).unwrap();

    // stacked OLS of Y on (Za, s - x 1)
    let rows: usize = ds.subjects().iter().map(|s| s.n_visits()).sum();
    let mut g = DMatrix::zeros(rows, 2);
    let mut y = DVector::zeros(rows);
    let mut r = 0;
    for s in ds.subjects() {
        for j in 0..s.n_visits() {
            g[(r, 0)] = s.za[(j, 0)];
            g[(r, 1)] = s.s[j] - s.w;
            y[r] = s.y[j];
            r += 1;
        }
    }
    let ols = g.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    assert!((&coef - &ols).amax() < 1e-10, "{coef} vs {ols}");

    // sigma2: residual sum of squares outside col(Zb) over sum(m - 1)
    let mut rss = 0.0;
    for s in ds.subjects() {
        let resid = DVector::from_fn(s.n_visits(), |j, _| s.y[j] - ols[0] * s.za[(j, 0)] - ols[1] * (s.s[j] - s.w));
        let zb = s.zb.column(0);
        let along = zb.dot(&resid) / zb.norm_squared();
        rss += (resid - zb * along).norm_squared();
    }
    let dof = (rows - ds.len()) as f64;
    let sigma2 = closed_form_sigma2(&imputed, &coef).unwrap();
    assert!((sigma2 - rss / dof).abs() < 1e-10);

    let fit = fit_ace(&imputed, None).unwrap();
    assert!(fit.estimate.iterations <= 2);
    assert!((fit.estimate.theta.coefficients() - &coef).amax() < 1e-8);
    assert!((fit.estimate.theta.sigma2 - sigma2).abs() < 1e-8);
}

#[test]
fn estimates_ignore_subject_order_and_duplication() {
    let cfg = SimConfig {
        n: 300,
        ..SimConfig::default()
    };
    let ds = Arc::new(generate_replicate(&cfg, 4).dataset);
    let cox = Arc::new(fit_cox(&ds.w(), &ds.delta(), &ds.v_matrix()).unwrap());
    let imputed = conditional_mean_impute(Arc::clone(&ds), cox).unwrap();
    let base = fit_ace(&imputed, None).unwrap().estimate.theta.to_vector();

    let doubled = fit_ace(&imputed.replicated(2), None).unwrap().estimate.theta.to_vector();
    assert!((&base - &doubled).amax() < 1e-8);

    let order: Vec<usize> = (0..ds.len()).rev().collect();
    let reversed = LongitudinalDataset::new(
        order.iter().map(|&i| ds.subjects()[i].clone()).collect(),
        Some(ds.column_names().clone()),
    )
    .unwrap();
    let mut rev = ImputedDataset::from_observed(Arc::new(reversed));
    rev.xhat = order.iter().map(|&i| imputed.xhat[i]).collect();
    rev.imputed_flag = order.iter().map(|&i| imputed.imputed_flag[i]).collect();
    let permuted = fit_ace(&rev, None).unwrap().estimate.theta.to_vector();
    assert!((&base - &permuted).amax() < 1e-8);
}

#[test]
fn sandwich_coverage_at_reduced_size() {
    let cfg = SimConfig {
        n: 200,
        reps: 1000,
        seed: 2024,
        methods: vec![Method::Ace],
        ..SimConfig::default()
    };
    let report = run_study(&cfg).unwrap();
    for param in ["beta", "alpha"] {
        let row = report.row(Method::Ace, param).unwrap();
        let cov = row.coverage.unwrap();
        assert!((0.92..=0.97).contains(&cov), "{param} coverage {cov}");
        let ratio = row.see.unwrap() / row.ese.unwrap();
        assert!((0.85..=1.15).contains(&ratio), "{param} SEE/ESE {ratio}");
    }
    assert_eq!(report.row(Method::Ace, "alpha").unwrap().n_fail, 0);
}

#[test]
fn oracle_is_most_precise() {
    let cfg = SimConfig {
        n: 300,
        reps: 40,
        m_imputations: 5,
        scenario: Scenario::CorrectSpec,
        ..SimConfig::default()
    };
    let report = run_study(&cfg).unwrap();
    let ese = |m| report.row(m, "alpha").unwrap().ese.unwrap();
    assert!(ese(Method::Oracle) < ese(Method::Ace));
}
