//! The blended nuisance-anchor estimator.
//!
//! The objective over `theta = (beta, gamma)` is
//!
//! ```text
//! (1 - rho) L_avg + rho L_rob + lambda_gamma |gamma|^2 + lambda_r |beta|^2
//! L_avg   = sum_i w_i r_i^2 / sum_i w_i
//! L_g     = same, restricted to regime g
//! L_rob   = (s / alpha) log sum_g exp(alpha L_g / s)
//! ```
//!
//! with `r_i = y_i - z_i' beta - a_i' gamma` on standardised anchors and `s`
//! the median regime loss at the closed-form warm start. Only `beta` is
//! transported to a target population; `gamma` absorbs anchor-aligned
//! variation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Design, EffectScale, TargetProfile};
use crate::error::{AmtError, Result};
use crate::linalg::{solve_spd, weighted_gram};
use crate::optim::{bfgs, nelder_mead, QuasiNewtonOptions, SimplexOptions};
use crate::stats::median;

/// Floor for the softmax scale constant.
pub const MIN_SCALE: f64 = 1e-12;

/// Tuning knobs of the estimator plus the diagnostic thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Blend weight between the average and the regime-robust loss.
    pub rho: f64,
    /// Softmax sharpness.
    pub alpha: f64,
    /// Ridge on the anchor coefficients.
    pub lambda_gamma: f64,
    /// Ridge on the moderator coefficients.
    pub lambda_r: f64,
    /// Clinical null band for the sign-stability score.
    pub delta: f64,
    /// Abstain when sign stability falls below this.
    pub tau_threshold: f64,
    /// Minimum informative precision-weight fraction on each side of zero.
    pub minority_frac: f64,
}

impl Hyperparams {
    pub fn for_scale(scale: EffectScale) -> Self {
        Hyperparams {
            rho: 0.2,
            alpha: 6.0,
            lambda_gamma: 1.0,
            lambda_r: 1e-6,
            delta: scale.default_delta(),
            tau_threshold: 0.67,
            minority_frac: 0.10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AmtError::InvalidHyperparameter(msg));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lambda_gamma >= 0.0 && self.lambda_gamma.is_finite()) {
            return bad(format!("lambda_gamma must be >= 0, got {}", self.lambda_gamma));
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return bad(format!("lambda_r must be >= 0, got {}", self.lambda_r));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.tau_threshold > 0.0 && self.tau_threshold <= 1.0) {
            return bad(format!("tau_threshold must lie in (0, 1], got {}", self.tau_threshold));
        }
        if !(0.0..=0.5).contains(&self.minority_frac) {
            return bad(format!("minority_frac must lie in [0, 0.5], got {}", self.minority_frac));
        }
        Ok(())
    }
}

/// Work done by each optimisation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageIterations {
    pub simplex_iters: usize,
    pub simplex_evals: usize,
    pub simplex_converged: bool,
    pub quasi_newton_iters: usize,
    pub quasi_newton_evals: usize,
    pub quasi_newton_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmtFitResult {
    pub beta: Vec<f64>,
    /// Anchor coefficients on the standardised anchor scale.
    pub gamma: Vec<f64>,
    /// Anchor coefficients per unit of the original anchor column.
    pub gamma_original: Vec<f64>,
    pub scale_s: f64,
    pub regime_losses: Vec<f64>,
    pub objective_value: f64,
    pub warm_start_objective: f64,
    pub theta_target: Option<f64>,
    pub converged: bool,
    pub n_iterations: StageIterations,
}

impl AmtFitResult {
    /// Concatenated `(beta, gamma)`.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.beta.clone();
        t.extend_from_slice(&self.gamma);
        t
    }
}

fn split(theta: &[f64], p: usize) -> (&[f64], &[f64]) {
    theta.split_at(p)
}

/// Per-regime and pooled weighted squared residuals at `theta`.
struct LossEvaluator<'a> {
    design: &'a Design,
    regime_of: &'a [usize],
    regime_wsum: Vec<f64>,
    wsum: f64,
}

impl<'a> LossEvaluator<'a> {
    fn new(ds: &'a Dataset) -> Result<Self> {
        let mut regime_wsum = vec![0.0; ds.g()];
        for (&g, &w) in ds.regime_of().iter().zip(ds.weights()) {
            regime_wsum[g] += w;
        }
        if let Some(g) = regime_wsum.iter().position(|&w| w <= 0.0) {
            return Err(AmtError::EmptyRegime(ds.regimes()[g].clone()));
        }
        Ok(LossEvaluator {
            design: ds.design(),
            regime_of: ds.regime_of(),
            regime_wsum,
            wsum: ds.weights().iter().sum(),
        })
    }

    /// Fills `regime` with L_g and returns L_avg.
    fn losses(&self, theta: &[f64], regime: &mut [f64]) -> f64 {
        regime.iter_mut().for_each(|x| *x = 0.0);
        let d = self.design;
        let m = d.ncols();
        let mut total = 0.0;
        for i in 0..d.k {
            let row = &d.x[i * m..(i + 1) * m];
            let mut fit = 0.0;
            for j in 0..m {
                fit += row[j] * theta[j];
            }
            let r = d.y[i] - fit;
            let wr2 = d.w[i] * r * r;
            regime[self.regime_of[i]] += wr2;
            total += wr2;
        }
        for (l, w) in regime.iter_mut().zip(&self.regime_wsum) {
            *l /= w;
        }
        total / self.wsum
    }
}

/// Closed-form minimiser of `L_avg + lambda_gamma |gamma|^2 + lambda_r |beta|^2`.
pub fn joint_ridge_wls(ds: &Dataset, lambda_gamma: f64, lambda_r: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (p, q) = (ds.p(), ds.q());
    let theta = ridge_solve(ds.design(), p, q, lambda_gamma, lambda_r)?;
    let (b, g) = split(theta.as_slice(), p);
    Ok((b.to_vec(), g.to_vec()))
}

fn penalised_gram(design: &Design, p: usize, q: usize, lambda_gamma: f64, lambda_r: f64) -> (DMatrix<f64>, DVector<f64>) {
    let (mut gram, rhs) = weighted_gram(design, p + q, true);
    for j in 0..p {
        gram[(j, j)] += lambda_r;
    }
    for j in p..p + q {
        gram[(j, j)] += lambda_gamma;
    }
    (gram, rhs)
}

fn ridge_solve(design: &Design, p: usize, q: usize, lambda_gamma: f64, lambda_r: f64) -> Result<DVector<f64>> {
    let (gram, rhs) = penalised_gram(design, p, q, lambda_gamma, lambda_r);
    let fully_penalised = lambda_r > 0.0 && (q == 0 || lambda_gamma > 0.0);
    if fully_penalised {
        let chol = gram
            .cholesky()
            .ok_or_else(|| AmtError::SingularDesign("penalised joint Gram matrix".into()))?;
        Ok(chol.solve(&rhs))
    } else {
        solve_spd(&gram, &rhs, "joint Gram matrix")
    }
}

/// Weighted mean squared residual within each regime.
pub fn regime_losses(ds: &Dataset, beta: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
    check_dims(ds, beta, gamma)?;
    let ev = LossEvaluator::new(ds)?;
    let theta: Vec<f64> = beta.iter().chain(gamma).copied().collect();
    let mut out = vec![0.0; ds.g()];
    ev.losses(&theta, &mut out);
    Ok(out)
}

fn check_dims(ds: &Dataset, beta: &[f64], gamma: &[f64]) -> Result<()> {
    if beta.len() != ds.p() || gamma.len() != ds.q() {
        return Err(AmtError::DimensionMismatch(format!(
            "coefficients ({}, {}) do not match dataset (p={}, q={})",
            beta.len(),
            gamma.len(),
            ds.p(),
            ds.q()
        )));
    }
    Ok(())
}

/// Median regime loss at the warm start, floored at [`MIN_SCALE`].
pub fn scale_constant(ds: &Dataset, beta_wls: &[f64], gamma_wls: &[f64]) -> Result<f64> {
    Ok(scale_from_losses(&regime_losses(ds, beta_wls, gamma_wls)?))
}

fn scale_from_losses(losses: &[f64]) -> f64 {
    let s = median(losses);
    if s < MIN_SCALE {
        MIN_SCALE
    } else {
        s
    }
}

/// Softmax regime loss `(s / alpha) log sum_g exp(alpha L_g / s)`, evaluated
/// with the max shift so that `max L_g <= result <= max L_g + (s / alpha) ln G`
/// holds exactly in floating point.
pub fn robust_loss(regime_losses: &[f64], alpha: f64, scale_s: f64) -> f64 {
    let lmax = regime_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = regime_losses
        .iter()
        .map(|&l| (alpha * (l - lmax) / scale_s).exp())
        .sum();
    lmax + (scale_s / alpha) * sum.ln()
}

fn penalty(theta: &[f64], p: usize, lambda_gamma: f64, lambda_r: f64) -> f64 {
    let (b, g) = split(theta, p);
    lambda_r * b.iter().map(|x| x * x).sum::<f64>() + lambda_gamma * g.iter().map(|x| x * x).sum::<f64>()
}

/// Value of the blended objective at `(beta, gamma)` for a fixed scale.
pub fn blended_objective(ds: &Dataset, beta: &[f64], gamma: &[f64], hp: &Hyperparams, scale_s: f64) -> Result<f64> {
    check_dims(ds, beta, gamma)?;
    let ev = LossEvaluator::new(ds)?;
    let theta: Vec<f64> = beta.iter().chain(gamma).copied().collect();
    let mut buf = vec![0.0; ds.g()];
    Ok(objective_at(&ev, &theta, ds.p(), hp, scale_s, &mut buf))
}

fn objective_at(ev: &LossEvaluator, theta: &[f64], p: usize, hp: &Hyperparams, s: f64, buf: &mut [f64]) -> f64 {
    let l_avg = ev.losses(theta, buf);
    let l_rob = robust_loss(buf, hp.alpha, s);
    (1.0 - hp.rho) * l_avg + hp.rho * l_rob + penalty(theta, p, hp.lambda_gamma, hp.lambda_r)
}

/// Fit the estimator: closed-form warm start and scale constant, simplex
/// search, then quasi-Newton refinement. Non-convergence is reported through
/// `converged`; the best iterate is always returned.
pub fn fit_amt(ds: &Dataset, hp: &Hyperparams) -> Result<AmtFitResult> {
    hp.validate()?;
    let ev = LossEvaluator::new(ds)?;
    let (p, q) = (ds.p(), ds.q());
    let design = ds.design();
    let theta0 = ridge_solve(design, p, q, hp.lambda_gamma, hp.lambda_r)?;
    let theta0: Vec<f64> = theta0.iter().copied().collect();

    let g = ds.g();
    let mut buf = vec![0.0; g];
    ev.losses(&theta0, &mut buf);
    let s = scale_from_losses(&buf);

    let objective = |theta: &[f64]| {
        let mut local = vec![0.0; g];
        objective_at(&ev, theta, p, hp, s, &mut local)
    };
    let f0 = objective(&theta0);

    let simplex = nelder_mead(objective, &theta0, SimplexOptions::for_dim(p + q));

    // seed the inverse Hessian with that of the quadratic (rho = 0) part
    let (gram, _) = penalised_gram(design, p, q, hp.lambda_gamma, hp.lambda_r);
    let h0 = (gram * 2.0).cholesky().map(|c| c.inverse());
    let start = if simplex.f <= f0 { &simplex.x } else { &theta0 };
    let qn = bfgs(objective, start, h0, QuasiNewtonOptions::default());

    let mut best = (theta0.clone(), f0);
    if simplex.f < best.1 {
        best = (simplex.x.clone(), simplex.f);
    }
    if qn.f < best.1 {
        best = (qn.x.clone(), qn.f);
    }
    let (theta, fbest) = best;
    ev.losses(&theta, &mut buf);
    let (beta, gamma) = split(&theta, p);

    Ok(AmtFitResult {
        beta: beta.to_vec(),
        gamma: gamma.to_vec(),
        gamma_original: ds.anchor_transform().to_original(gamma),
        scale_s: s,
        regime_losses: buf,
        objective_value: fbest,
        warm_start_objective: f0,
        theta_target: None,
        converged: qn.converged,
        n_iterations: StageIterations {
            simplex_iters: simplex.iters,
            simplex_evals: simplex.evals,
            simplex_converged: simplex.converged,
            quasi_newton_iters: qn.iters,
            quasi_newton_evals: qn.evals,
            quasi_newton_converged: qn.converged,
        },
    })
}

/// Target-population effect `z_bar' beta`. Anchor coefficients are never used.
pub fn stable_target_effect(fit: &AmtFitResult, tp: &TargetProfile) -> Result<f64> {
    tp.check_dim(fit.beta.len())?;
    Ok(tp.z_bar.iter().zip(&fit.beta).map(|(a, b)| a * b).sum())
}

/// Fit and evaluate the target effect in one step.
pub fn fit_for_target(ds: &Dataset, hp: &Hyperparams, tp: &TargetProfile) -> Result<AmtFitResult> {
    tp.check_dim(ds.p())?;
    let mut fit = fit_amt(ds, hp)?;
    fit.theta_target = Some(stable_target_effect(&fit, tp)?);
    Ok(fit)
}

/// Superseded anchor penalty `|Pi_{A_perp} W^{1/2} (y - Z beta)|^2`, where
/// `A_perp` is the anchor block residualised on the moderators in the
/// weighted metric. The projection annihilates `W^{1/2} Z`, so the value does
/// not depend on `beta`; it exists to verify exactly that.
pub fn legacy_anchor_penalty(ds: &Dataset, beta: &[f64]) -> Result<f64> {
    let (p, q, k) = (ds.p(), ds.q(), ds.k());
    if beta.len() != p {
        return Err(AmtError::DimensionMismatch(format!("beta has {} entries, expected {p}", beta.len())));
    }
    if q == 0 {
        return Ok(0.0);
    }
    let d = ds.design();
    let wsum: f64 = d.w.iter().sum();
    let sw: Vec<f64> = d.w.iter().map(|w| (w / wsum).sqrt()).collect();
    let zt = DMatrix::from_fn(k, p, |i, j| sw[i] * d.row(i)[j]);
    let at = DMatrix::from_fn(k, q, |i, j| sw[i] * d.row(i)[p + j]);
    let ztz = zt.transpose() * &zt;
    let coef = ztz
        .clone()
        .cholesky()
        .ok_or_else(|| AmtError::SingularDesign("moderator Gram matrix".into()))?
        .solve(&(zt.transpose() * &at));
    let a_perp = &at - &zt * coef;
    let gram = a_perp.transpose() * &a_perp;
    let resid = DVector::from_fn(k, |i, _| {
        sw[i] * (d.y[i] - d.row(i)[..p].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
    });
    let proj_coef = solve_spd(&gram, &(a_perp.transpose() * &resid), "residualised anchor Gram matrix")?;
    let projected = &a_perp * proj_coef;
    Ok(projected.norm_squared())
}
