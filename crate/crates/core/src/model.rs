//! Nonlinear regression models: parameter/domain types, the model interface
//! and the Emax dose-response instance.
//!
//! The Emax mean function is
//!
//! ```text
//! eta(x, theta) = theta0 + theta1 * x / (x + theta2)
//! ```
//!
//! where `theta0` is the placebo response, `theta1` the maximum drug effect
//! and `theta2` the dose producing half the maximum effect. Estimation and
//! information-matrix code only consume the mean, its gradient and its second
//! derivatives, so alternative three-parameter models can be plugged in
//! through [`DoseResponseModel`].

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval constraining the nonlinear parameter `theta2`.
///
/// The default box keeps the profiled maximum-likelihood problem well posed:
/// an unconstrained fit can run away to 0 or infinity on noisy small samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta2Bounds {
    pub min: f64,
    pub max: f64,
}

pub const DEFAULT_THETA2_BOUNDS: Theta2Bounds = Theta2Bounds {
    min: 0.015,
    max: 1500.0,
};

impl Default for Theta2Bounds {
    fn default() -> Self {
        DEFAULT_THETA2_BOUNDS
    }
}

impl Theta2Bounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min <= 0.0 || min > max {
            return Err(Error::invalid(format!(
                "theta2 bounds must satisfy 0 < min <= max, got [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.min && t <= self.max
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.min, self.max)
    }
}

/// Parameter vector of the Emax mean function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Response at dose zero.
    pub theta0: f64,
    /// Maximum effect attributable to the drug.
    pub theta1: f64,
    /// Dose producing half the maximum effect.
    pub theta2: f64,
}

impl ModelParams {
    /// Validates against the default `theta2` box.
    pub fn new(theta0: f64, theta1: f64, theta2: f64) -> Result<Self> {
        Self::with_bounds(theta0, theta1, theta2, &DEFAULT_THETA2_BOUNDS)
    }

    pub fn with_bounds(theta0: f64, theta1: f64, theta2: f64, bounds: &Theta2Bounds) -> Result<Self> {
        if !(theta0.is_finite() && theta1.is_finite() && theta2.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        if !bounds.contains(theta2) {
            return Err(Error::invalid(format!(
                "theta2 = {theta2} outside [{}, {}]",
                bounds.min, bounds.max
            )));
        }
        Ok(Self {
            theta0,
            theta1,
            theta2,
        })
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.theta0, self.theta1, self.theta2)
    }
}

/// Dose interval `[a, b]` with `0 <= a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseInterval {
    pub a: f64,
    pub b: f64,
}

impl DoseInterval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || a >= b {
            return Err(Error::invalid(format!(
                "dose interval must satisfy 0 <= a < b, got [{a}, {b}]"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }
}

/// A regression mean function of three parameters, with the derivatives
/// needed for information matrices, scoring and bias expansions.
pub trait DoseResponseModel: Sync {
    /// Number of mean-function parameters.
    fn dim(&self) -> usize;

    /// Mean response at dose `x`.
    fn mean(&self, x: f64, theta: &ModelParams) -> Result<f64>;

    /// Gradient of the mean in the parameters.
    fn gradient(&self, x: f64, theta: &ModelParams) -> Result<Vector3<f64>>;

    /// Symmetric matrix of second partial derivatives of the mean in the
    /// parameters.
    fn hessian(&self, x: f64, theta: &ModelParams) -> Result<Matrix3<f64>>;
}

/// The Emax dose-response model.
#[derive(Debug, Clone, Copy, Default)]
pub struct Emax;

impl DoseResponseModel for Emax {
    fn dim(&self) -> usize {
        3
    }

    fn mean(&self, x: f64, theta: &ModelParams) -> Result<f64> {
        emax_mean(x, theta)
    }

    fn gradient(&self, x: f64, theta: &ModelParams) -> Result<Vector3<f64>> {
        emax_gradient(x, theta)
    }

    fn hessian(&self, x: f64, theta: &ModelParams) -> Result<Matrix3<f64>> {
        emax_hessian(x, theta)
    }
}

fn check_dose(x: f64, theta: &ModelParams) -> Result<()> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::invalid(format!("dose must be finite and >= 0, got {x}")));
    }
    if x + theta.theta2 <= 0.0 {
        return Err(Error::invalid(format!(
            "x + theta2 must be positive, got {}",
            x + theta.theta2
        )));
    }
    Ok(())
}

/// `theta0 + theta1 * x / (x + theta2)`.
pub fn emax_mean(x: f64, theta: &ModelParams) -> Result<f64> {
    check_dose(x, theta)?;
    Ok(theta.theta0 + theta.theta1 * x / (x + theta.theta2))
}

/// Gradient `(1, x/(x+theta2), -theta1*x/(x+theta2)^2)`.
pub fn emax_gradient(x: f64, theta: &ModelParams) -> Result<Vector3<f64>> {
    check_dose(x, theta)?;
    let s = x + theta.theta2;
    Ok(Vector3::new(1.0, x / s, -theta.theta1 * x / (s * s)))
}

/// Second derivatives of the Emax mean; the only nonzero entries are
/// `d2/dtheta1 dtheta2 = -x/(x+theta2)^2` and
/// `d2/dtheta2^2 = 2*theta1*x/(x+theta2)^3`.
pub fn emax_hessian(x: f64, theta: &ModelParams) -> Result<Matrix3<f64>> {
    check_dose(x, theta)?;
    let s = x + theta.theta2;
    let d12 = -x / (s * s);
    let d22 = 2.0 * theta.theta1 * x / (s * s * s);
    let mut h = Matrix3::zeros();
    h[(1, 2)] = d12;
    h[(2, 1)] = d12;
    h[(2, 2)] = d22;
    Ok(h)
}
