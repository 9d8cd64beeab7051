//! Per-group sample size and power for a two-arm trial comparing slopes.
//!
//! The treatment arm is assumed to slow the placebo slope by `effect_frac`,
//! so the difference in slopes has magnitude `d = effect_frac * |alpha_p|`.
//! With a one-sided level-`kappa` z-test,
//!
//! ```text
//! n     = ceil( Var(delta) (z_power - z_kappa)^2 / d^2 )
//! power = Phi( d sqrt(n / Var(delta)) + z_kappa )
//! ```

use serde::{Deserialize, Serialize};

use crate::error::PowerError;
use crate::numerics::{norm_cdf, norm_quantile};

/// Slack below an integer before rounding up, so a ratio that is an integer
/// up to rounding error is not pushed to the next one.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    /// Placebo-arm slope.
    pub alpha_p: f64,
    pub effect_frac: f64,
    /// Type-I error rate.
    pub kappa: f64,
    pub power: f64,
    #[serde(default = "default_var")]
    pub var_delta: f64,
}

fn default_var() -> f64 {
    1.0
}

impl PowerSpec {
    pub fn new(alpha_p: f64, effect_frac: f64) -> Self {
        Self {
            alpha_p,
            effect_frac,
            kappa: 0.05,
            power: 0.8,
            var_delta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), PowerError> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.kappa) {
            return Err(PowerError::InvalidSpec(format!("kappa = {} not in (0, 1)", self.kappa)));
        }
        if !in_unit(self.power) {
            return Err(PowerError::InvalidSpec(format!("power = {} not in (0, 1)", self.power)));
        }
        if !(self.effect_frac > 0.0) {
            return Err(PowerError::InvalidSpec(format!("effect_frac = {} must be > 0", self.effect_frac)));
        }
        if !(self.var_delta > 0.0) {
            return Err(PowerError::InvalidSpec(format!("var_delta = {} must be > 0", self.var_delta)));
        }
        if !self.alpha_p.is_finite() {
            return Err(PowerError::InvalidSpec("alpha_p must be finite".into()));
        }
        Ok(())
    }

    /// Slope difference to detect, `effect_frac * |alpha_p|`.
    pub fn d(&self) -> f64 {
        self.effect_frac * self.alpha_p.abs()
    }

    pub fn z_power(&self) -> f64 {
        norm_quantile(self.power).expect("validated power")
    }

    pub fn z_kappa(&self) -> f64 {
        norm_quantile(self.kappa).expect("validated kappa")
    }
}

/// Unrounded per-group size.
pub fn required_n_exact(spec: &PowerSpec) -> Result<f64, PowerError> {
    spec.validate()?;
    let d = spec.d();
    if d == 0.0 {
        return Err(PowerError::ZeroEffect);
    }
    let ratio = spec.var_delta.sqrt() * (spec.z_power() - spec.z_kappa()) / d;
    Ok(ratio * ratio)
}

pub fn required_n(spec: &PowerSpec) -> Result<u64, PowerError> {
    let n = required_n_exact(spec)?;
    Ok(((n - CEIL_SLACK).ceil() as u64).max(1))
}

pub fn power_at(spec: &PowerSpec, n_per_group: u64) -> Result<f64, PowerError> {
    spec.validate()?;
    let z = spec.d() * (n_per_group as f64 / spec.var_delta).sqrt() + spec.z_kappa();
    Ok(norm_cdf(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerPoint {
    pub effect: f64,
    pub n: u64,
    pub power: f64,
}

/// Power over `n = step, 2 step, .., <= n_max` for each effect fraction.
pub fn power_curve(base: &PowerSpec, effects: &[f64], n_max: u64, step: u64) -> Result<Vec<PowerPoint>, PowerError> {
    if step == 0 {
        return Err(PowerError::InvalidSpec("step must be >= 1".into()));
    }
    let mut out = Vec::new();
    for &effect in effects {
        let spec = PowerSpec { effect_frac: effect, ..*base };
        let mut n = step;
        while n <= n_max {
            out.push(PowerPoint { effect, n, power: power_at(&spec, n)? });
            n += step;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_of_one_needs_one_subject() {
        let mut spec = PowerSpec::new(1.0, 1.0);
        spec.alpha_p = spec.z_power() - spec.z_kappa();
        assert_eq!(required_n(&spec).unwrap(), 1);
    }

    #[test]
    fn ceiling_consistency() {
        for slope in [-0.757, -1.258, -0.739, -0.3] {
            let spec = PowerSpec::new(slope, 0.1);
            let n = required_n(&spec).unwrap();
            assert!(power_at(&spec, n).unwrap() >= spec.power);
            assert!(power_at(&spec, n - 1).unwrap() < spec.power);
        }
    }

    #[test]
    fn zero_slope_is_rejected() {
        assert_eq!(required_n(&PowerSpec::new(0.0, 0.1)).unwrap_err(), PowerError::ZeroEffect);
        assert!(matches!(
            required_n(&PowerSpec { kappa: 1.5, ..PowerSpec::new(-1.0, 0.1) }),
            Err(PowerError::InvalidSpec(_))
        ));
    }

    #[test]
    fn curve_is_monotone() {
        let pts = power_curve(&PowerSpec::new(-0.757, 0.1), &[0.1, 0.2], 4000, 10).unwrap();
        assert_eq!(pts.len(), 800);
        for w in pts.windows(2) {
            if w[0].effect == w[1].effect {
                assert!(w[1].power >= w[0].power);
            }
        }
        assert!(pts.last().unwrap().power > 0.999);
    }
}
