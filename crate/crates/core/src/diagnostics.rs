//! Sign stability, abstention and per-regime target effects.

use serde::{Deserialize, Serialize};

use crate::amt::{joint_ridge_wls, Hyperparams};
use crate::data::{Dataset, TargetProfile};
use crate::error::Result;

/// Precision-weighted share of informative trials agreeing in sign with the
/// target estimate.
/// Serialised as a number, or `null` when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "Option<f64>", into = "Option<f64>")]
pub enum SignStability {
    Defined(f64),
    /// No informative trials, or the target estimate is exactly zero.
    Undefined,
}

impl From<Option<f64>> for SignStability {
    fn from(v: Option<f64>) -> Self {
        v.map_or(SignStability::Undefined, SignStability::Defined)
    }
}

impl From<SignStability> for Option<f64> {
    fn from(s: SignStability) -> Self {
        s.value()
    }
}

impl SignStability {
    pub fn value(self) -> Option<f64> {
        match self {
            SignStability::Defined(x) => Some(x),
            SignStability::Undefined => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbstainReason {
    None,
    SignConflict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeMethod {
    Regression,
    WeightedMeanFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeEffect {
    pub regime: String,
    pub k: usize,
    pub theta: f64,
    pub method: RegimeMethod,
}

/// Informative precision-weight fractions on each side of zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSplit {
    pub pos: f64,
    pub neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsResult {
    pub ss_trial: SignStability,
    pub abstain: bool,
    pub abstain_reason: AbstainReason,
    pub informative_weight_pos: f64,
    pub informative_weight_neg: f64,
    pub regime_effects: Vec<RegimeEffect>,
}

pub fn sign_stability(ds: &Dataset, theta_target: f64, delta: f64) -> SignStability {
    sign_stability_raw(ds.y(), ds.weights(), theta_target, delta)
}

pub(crate) fn sign_stability_raw(y: &[f64], w: &[f64], theta: f64, delta: f64) -> SignStability {
    if theta == 0.0 || theta.is_nan() {
        return SignStability::Undefined;
    }
    let (mut agree, mut total) = (0.0, 0.0);
    for (&yi, &wi) in y.iter().zip(w) {
        if yi.abs() > delta {
            total += wi;
            if (yi > 0.0) == (theta > 0.0) && yi != 0.0 {
                agree += wi;
            }
        }
    }
    if total > 0.0 {
        SignStability::Defined(agree / total)
    } else {
        SignStability::Undefined
    }
}

/// Weight fractions of informative trials with positive and negative effect.
/// Both are zero when no trial is informative.
pub fn informative_split(ds: &Dataset, delta: f64) -> WeightSplit {
    let (mut pos, mut neg) = (0.0, 0.0);
    for (&y, &w) in ds.y().iter().zip(ds.weights()) {
        if y.abs() > delta {
            if y > 0.0 {
                pos += w;
            } else {
                neg += w;
            }
        }
    }
    let total = pos + neg;
    if total > 0.0 {
        WeightSplit { pos: pos / total, neg: neg / total }
    } else {
        WeightSplit { pos: 0.0, neg: 0.0 }
    }
}

/// Abstain when sign stability is low and both signs carry at least the
/// minority share of informative weight.
pub fn abstention_decision(ss: SignStability, split: WeightSplit, hp: &Hyperparams) -> (bool, AbstainReason) {
    match ss {
        SignStability::Defined(s) if s < hp.tau_threshold && split.pos.min(split.neg) >= hp.minority_frac => {
            (true, AbstainReason::SignConflict)
        }
        _ => (false, AbstainReason::None),
    }
}

pub fn abstention_rule(ds: &Dataset, ss: SignStability, hp: &Hyperparams) -> (bool, AbstainReason, WeightSplit) {
    let split = informative_split(ds, hp.delta);
    let (abstain, reason) = abstention_decision(ss, split, hp);
    (abstain, reason, split)
}

/// Per-regime target effect: a regime-only ridge fit when the regime has at
/// least `p + q + 1` trials, else its inverse-variance weighted mean.
pub fn regime_target_effects(ds: &Dataset, tp: &TargetProfile, hp: &Hyperparams) -> Result<Vec<RegimeEffect>> {
    tp.check_dim(ds.p())?;
    let need = ds.p() + ds.q() + 1;
    ds.regime_members()
        .into_iter()
        .zip(ds.regimes())
        .map(|(members, name)| {
            let k = members.len();
            let weighted_mean = || {
                let (mut num, mut den) = (0.0, 0.0);
                for &i in &members {
                    let w = ds.weights()[i];
                    num += w * ds.y()[i];
                    den += w;
                }
                num / den
            };
            let (theta, method) = if k >= need {
                let sub = ds.subset(&members)?;
                match joint_ridge_wls(&sub, hp.lambda_gamma, hp.lambda_r) {
                    Ok((beta, _)) => (dot(&tp.z_bar, &beta), RegimeMethod::Regression),
                    Err(_) => (weighted_mean(), RegimeMethod::WeightedMeanFallback),
                }
            } else {
                (weighted_mean(), RegimeMethod::WeightedMeanFallback)
            };
            Ok(RegimeEffect { regime: name.clone(), k, theta, method })
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All diagnostics for a fitted target effect.
pub fn diagnose(ds: &Dataset, theta_target: f64, tp: &TargetProfile, hp: &Hyperparams) -> Result<DiagnosticsResult> {
    let ss = sign_stability(ds, theta_target, hp.delta);
    let (abstain, reason, split) = abstention_rule(ds, ss, hp);
    Ok(DiagnosticsResult {
        ss_trial: ss,
        abstain,
        abstain_reason: reason,
        informative_weight_pos: split.pos,
        informative_weight_neg: split.neg,
        regime_effects: regime_target_effects(ds, tp, hp)?,
    })
}
