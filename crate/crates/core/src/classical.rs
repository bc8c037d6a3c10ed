//! Comparator estimators: fixed effect, DerSimonian-Laird and Paule-Mandel
//! random effects, and moderator-only WLS meta-regression, each with a Wald
//! interval.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TargetProfile};
use crate::error::{AmtError, Result};
use crate::linalg::{inverse_spd, weighted_gram};
use crate::stats::z_critical;

pub const DEFAULT_LEVEL: f64 = 0.95;

const PM_TOL: f64 = 1e-10;
const PM_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassicalMethod {
    #[serde(rename = "FE")]
    FixedEffect,
    #[serde(rename = "DL_RE")]
    DerSimonianLaird,
    #[serde(rename = "PM_RE")]
    PauleMandel,
    #[serde(rename = "WLS_meta_reg")]
    WlsMetaRegression,
}

impl ClassicalMethod {
    pub fn label(self) -> &'static str {
        match self {
            ClassicalMethod::FixedEffect => "FE",
            ClassicalMethod::DerSimonianLaird => "DL_RE",
            ClassicalMethod::PauleMandel => "PM_RE",
            ClassicalMethod::WlsMetaRegression => "WLS_meta_reg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalResult {
    pub method: ClassicalMethod,
    pub theta_hat: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    /// Between-study variance; 0 for FE and WLS.
    pub tau2: f64,
    pub q_stat: Option<f64>,
    /// Moderator coefficients (WLS only).
    pub beta: Option<Vec<f64>>,
}

fn wald(method: ClassicalMethod, theta: f64, se: f64, level: f64) -> ClassicalResult {
    let z = z_critical(level);
    ClassicalResult {
        method,
        theta_hat: theta,
        se,
        ci_lo: theta - z * se,
        ci_hi: theta + z * se,
        level,
        tau2: 0.0,
        q_stat: None,
        beta: None,
    }
}

fn pooled(y: &[f64], v: &[f64], tau2: f64) -> (f64, f64) {
    let mut sw = 0.0;
    let mut swy = 0.0;
    for (&yi, &vi) in y.iter().zip(v) {
        let w = 1.0 / (vi + tau2);
        sw += w;
        swy += w * yi;
    }
    (swy / sw, sw)
}

fn require_two(ds: &Dataset) -> Result<()> {
    if ds.k() < 2 {
        return Err(AmtError::TooFewTrials { needed: 2, found: ds.k() });
    }
    Ok(())
}

/// Inverse-variance weighted common-effect pool.
pub fn fixed_effect(ds: &Dataset, level: f64) -> ClassicalResult {
    let (theta, sw) = pooled(ds.y(), &ds.v(), 0.0);
    let mut res = wald(ClassicalMethod::FixedEffect, theta, sw.powf(-0.5), level);
    res.q_stat = cochran_q(ds).ok();
    res
}

/// Cochran's heterogeneity statistic around the fixed-effect pool.
pub fn cochran_q(ds: &Dataset) -> Result<f64> {
    require_two(ds)?;
    Ok(generalised_q(ds.y(), &ds.v(), 0.0))
}

fn generalised_q(y: &[f64], v: &[f64], tau2: f64) -> f64 {
    let (theta, _) = pooled(y, v, tau2);
    y.iter().zip(v).map(|(&yi, &vi)| (yi - theta).powi(2) / (vi + tau2)).sum()
}

/// DerSimonian-Laird moment estimator, truncated at zero.
pub fn tau2_dl(ds: &Dataset) -> Result<f64> {
    let q = cochran_q(ds)?;
    let w = ds.weights();
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    let k = ds.k() as f64;
    Ok(((q - (k - 1.0)) / (s1 - s2 / s1)).max(0.0))
}

/// Paule-Mandel estimator: the root of the generalised Q equation
/// `Q(tau2) = K - 1`, found by bisection.
pub fn tau2_pm(ds: &Dataset) -> Result<f64> {
    require_two(ds)?;
    let y = ds.y();
    let v = ds.v();
    let target = (ds.k() - 1) as f64;
    let excess = |t: f64| generalised_q(y, &v, t) - target;
    if excess(0.0) <= 0.0 {
        return Ok(0.0);
    }
    let s1: f64 = ds.weights().iter().sum();
    let mut hi = generalised_q(y, &v, 0.0) / s1 * 10.0 + 1.0;
    // the bracket is normally sufficient; widen for extreme low-weight outliers
    let mut widen = 0;
    while excess(hi) > 0.0 && widen < 200 {
        hi *= 2.0;
        widen += 1;
    }
    let mut lo = 0.0;
    for _ in 0..PM_MAX_ITER {
        if hi - lo <= PM_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inverse-variance pool with weights `1 / (v_i + tau2)`.
pub fn random_effects(ds: &Dataset, tau2: f64, level: f64, method: ClassicalMethod) -> Result<ClassicalResult> {
    if !(tau2 >= 0.0 && tau2.is_finite()) {
        return Err(AmtError::InvalidArgument(format!("tau2 must be finite and >= 0, got {tau2}")));
    }
    let (theta, sw) = pooled(ds.y(), &ds.v(), tau2);
    let mut res = wald(method, theta, sw.powf(-0.5), level);
    res.tau2 = tau2;
    res.q_stat = cochran_q(ds).ok();
    Ok(res)
}

pub fn dersimonian_laird(ds: &Dataset, level: f64) -> Result<ClassicalResult> {
    random_effects(ds, tau2_dl(ds)?, level, ClassicalMethod::DerSimonianLaird)
}

pub fn paule_mandel(ds: &Dataset, level: f64) -> Result<ClassicalResult> {
    random_effects(ds, tau2_pm(ds)?, level, ClassicalMethod::PauleMandel)
}

/// WLS regression of `y` on the moderators only (anchors ignored), evaluated
/// at the target profile. Variance is the plain `(Z'WZ)^-1`.
pub fn wls_meta_regression(ds: &Dataset, tp: &TargetProfile, level: f64) -> Result<ClassicalResult> {
    let p = ds.p();
    tp.check_dim(p)?;
    if ds.k() < p {
        return Err(AmtError::TooFewTrials { needed: p, found: ds.k() });
    }
    let (gram, rhs) = weighted_gram(ds.design(), p, false);
    let inv = inverse_spd(&gram, "moderator Gram matrix")?;
    let beta = &inv * rhs;
    let zq = nalgebra::DVector::from_column_slice(&tp.z_bar);
    let theta = zq.dot(&beta);
    let var = (zq.transpose() * &inv * &zq)[(0, 0)];
    let mut res = wald(ClassicalMethod::WlsMetaRegression, theta, var.max(0.0).sqrt(), level);
    res.beta = Some(beta.iter().copied().collect());
    Ok(res)
}
