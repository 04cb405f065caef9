//! Noise ratios, the relative and absolute identification error bounds, and
//! the closed-loop uncertainty radius.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::datamat::DataMatrices;
use crate::error::{Error, Result};
use crate::numkernel::{ensure_finite, spectral, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioSource {
    /// Computed from ground truth.
    Oracle,
    /// Supplied by the user for external data.
    Declared,
}

/// `||delta_X|| <= r_x1 ||X1*||` and `||delta_UX|| <= r_ux0 ||[U0*; X0*]||`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRatios {
    pub r_x1: f64,
    pub r_ux0: f64,
    pub source: RatioSource,
}

impl NoiseRatios {
    pub fn declared(r_x1: f64, r_ux0: f64) -> Result<Self> {
        let r = NoiseRatios {
            r_x1,
            r_ux0,
            source: RatioSource::Declared,
        };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        if !(self.r_x1 >= 0.0) || !self.r_x1.is_finite() || !(self.r_ux0 >= 0.0) {
            return Err(Error::invalid(format!(
                "noise ratios must be finite and nonnegative (r_X1 = {}, r_UX0 = {})",
                self.r_x1, self.r_ux0
            )));
        }
        if !(self.r_ux0 < 1.0) {
            return Err(Error::AssumptionViolation(format!(
                "r_UX0 = {:.4} >= 1: the data is too noisy to bound the estimate",
                self.r_ux0
            )));
        }
        Ok(())
    }
}

fn ratio(delta: &Mat, reference: &Mat, what: &str) -> Result<f64> {
    let d = spectral(delta);
    let r = spectral(reference);
    if d == 0.0 {
        return Ok(0.0);
    }
    if r == 0.0 {
        return Err(Error::AssumptionViolation(format!("{what} is zero but its perturbation is not")));
    }
    Ok(d / r)
}

/// Tightest ratios from measured and ground-truth data of the same shape.
pub fn compute_noise_ratios(measured: &DataMatrices, truth: &DataMatrices) -> Result<NoiseRatios> {
    if measured.u0.shape() != truth.u0.shape() || measured.x0.shape() != truth.x0.shape() {
        return Err(Error::invalid("measured and ground-truth data matrices differ in shape"));
    }
    for (m, w) in [(&measured.x1, "X1"), (&truth.x1, "X1*")] {
        ensure_finite(m, w)?;
    }
    let stacked_m = measured.stacked();
    let stacked_t = truth.stacked();
    ensure_finite(&stacked_m, "[U0; X0]")?;
    ensure_finite(&stacked_t, "[U0*; X0*]")?;
    let r = NoiseRatios {
        r_x1: ratio(&(&truth.x1 - &measured.x1), &truth.x1, "X1*")?,
        r_ux0: ratio(&(&stacked_t - &stacked_m), &stacked_t, "[U0*; X0*]")?,
        source: RatioSource::Oracle,
    };
    r.check()?;
    Ok(r)
}

/// `c_ux (r_x1 + r_ux0) / (1 - r_ux0)`, with `c_ux` the condition number of
/// the measured stacked matrix.
pub fn relative_error_bound(c_ux: f64, r: &NoiseRatios) -> Result<f64> {
    r.check()?;
    if !(c_ux >= 1.0) || !c_ux.is_finite() {
        return Err(Error::invalid(format!("condition number must be finite and >= 1, got {c_ux}")));
    }
    Ok(c_ux * (r.r_x1 + r.r_ux0) / (1.0 - r.r_ux0))
}

/// `c_bar / (1 - c_bar) * est_norm` when `c_bar < 1`, otherwise `None`.
pub fn absolute_error_bound(relative_bound: f64, est_norm: f64) -> Option<f64> {
    if relative_bound < 1.0 && relative_bound >= 0.0 {
        Some(relative_bound / (1.0 - relative_bound) * est_norm)
    } else {
        None
    }
}

/// `absolute_bound * sqrt(k_bar^2 + 1)`, the largest `||delta_BA [K; I]||`
/// over gains with `||K|| <= k_bar`.
pub fn uncertainty_radius(absolute_bound: f64, k_bar: f64) -> f64 {
    absolute_bound * (k_bar * k_bar + 1.0).sqrt()
}

/// Radius for an estimate obtained through a left scaling `D_L`: the scaled
/// error `e_hat` bounds `||delta_hat||`, and `delta_BA [K; I] =
/// delta_hat D_L [K; I]`, so the radius is `e_hat * ||D_L [K; I]||`.
pub fn scaled_uncertainty_radius(e_hat: f64, k_bar: f64, d_l: &DVector<f64>, m: usize) -> f64 {
    let du = d_l.rows(0, m).iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let dx = d_l.rows(m, d_l.len() - m).iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    e_hat * (du * du * k_bar * k_bar + dx * dx).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub c_ux: f64,
    pub r_x1: f64,
    pub r_ux0: f64,
    pub relative_bound: f64,
    pub c_bar: f64,
    pub absolute_bound: Option<f64>,
    #[serde(rename = "radius_DX1")]
    pub radius_dx1: Option<f64>,
}

/// Assembles the budget for one mode. `est_norm` is `||[B^e A^e]||`; the
/// radius needs `k_bar`.
pub fn error_budget(c_ux: f64, r: &NoiseRatios, est_norm: f64, k_bar: Option<f64>) -> Result<ErrorBudget> {
    let rel = relative_error_bound(c_ux, r)?;
    let abs = absolute_error_bound(rel, est_norm);
    Ok(ErrorBudget {
        c_ux,
        r_x1: r.r_x1,
        r_ux0: r.r_ux0,
        relative_bound: rel,
        c_bar: rel,
        absolute_bound: abs,
        radius_dx1: match (abs, k_bar) {
            (Some(a), Some(k)) => Some(uncertainty_radius(a, k)),
            _ => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamat::StateSource;
    use approx::assert_abs_diff_eq;

    fn scalar_dm(x1: f64) -> DataMatrices {
        DataMatrices::new(
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, x1),
            StateSource::Measured,
        )
        .unwrap()
    }

    #[test]
    fn ratio_examples() {
        let r = compute_noise_ratios(&scalar_dm(2.0), &scalar_dm(2.0)).unwrap();
        assert_eq!((r.r_x1, r.r_ux0), (0.0, 0.0));
        let r = compute_noise_ratios(&scalar_dm(1.9), &scalar_dm(2.0)).unwrap();
        assert_abs_diff_eq!(r.r_x1, 0.05, epsilon = 1e-12);
        assert_eq!(r.r_ux0, 0.0);
        assert_eq!(r.source, RatioSource::Oracle);
    }

    #[test]
    fn too_noisy_stacked_matrix_is_rejected() {
        let truth = scalar_dm(1.0);
        let mut meas = truth.clone();
        meas.u0[(0, 0)] = -1.0;
        meas.x0[(0, 0)] = -1.0;
        assert!(matches!(
            compute_noise_ratios(&meas, &truth),
            Err(Error::AssumptionViolation(_))
        ));
        assert!(NoiseRatios::declared(0.0, 1.0).is_err());
    }

    #[test]
    fn relative_bound_examples() {
        let r = NoiseRatios::declared(0.01, 0.01).unwrap();
        assert_abs_diff_eq!(relative_error_bound(2.0, &r).unwrap(), 0.04 / 0.99, epsilon = 1e-15);
        let zero = NoiseRatios::declared(0.0, 0.0).unwrap();
        assert_eq!(relative_error_bound(123.0, &zero).unwrap(), 0.0);
        assert!(relative_error_bound(0.5, &zero).is_err());
    }

    #[test]
    fn absolute_bound_examples() {
        assert_abs_diff_eq!(absolute_error_bound(0.5, 3.0).unwrap(), 3.0, epsilon = 1e-15);
        assert_eq!(absolute_error_bound(1.2, 3.0), None);
        assert_eq!(absolute_error_bound(1.0, 3.0), None);
        assert_eq!(absolute_error_bound(0.0, 3.0), Some(0.0));
    }

    #[test]
    fn radius_examples() {
        assert_abs_diff_eq!(uncertainty_radius(2.0, 0.0), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(uncertainty_radius(1.0, 3f64.sqrt()), 2.0, epsilon = 1e-15);
        assert_eq!(uncertainty_radius(0.0, 20.0), 0.0);
        let ones = DVector::from_element(3, 1.0);
        assert_abs_diff_eq!(
            scaled_uncertainty_radius(1.5, 2.0, &ones, 1),
            uncertainty_radius(1.5, 2.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn budget_absent_when_c_bar_large() {
        let r = NoiseRatios::declared(0.1, 0.1).unwrap();
        let b = error_budget(10.0, &r, 2.0, Some(1.0)).unwrap();
        assert!(b.c_bar > 1.0);
        assert_eq!(b.absolute_bound, None);
        assert_eq!(b.radius_dx1, None);
        let b = error_budget(1.0, &r, 2.0, Some(1.0)).unwrap();
        assert!(b.absolute_bound.is_some() && b.radius_dx1.is_some());
    }
}
