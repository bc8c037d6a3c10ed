//! Perturbation-bootstrap intervals and leave-one-study-out tuning.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amt::{fit_amt, stable_target_effect, Hyperparams};
use crate::classical::ClassicalResult;
use crate::data::{Dataset, TargetProfile};
use crate::error::{AmtError, Result};
use crate::rng::{child_stream, derive_seed, stream};
use crate::stats::{quantile, quantile_sorted, sample_sd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalMethod {
    Wald,
    PerturbationBootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub method: IntervalMethod,
    /// Replicates that produced an estimate (equals 1 for Wald intervals).
    pub b_effective: usize,
    /// Set when a quantile interval excludes its own point estimate.
    pub point_outside: bool,
}

impl IntervalEstimate {
    pub fn from_classical(r: &ClassicalResult) -> Self {
        IntervalEstimate {
            point: r.theta_hat,
            lo: r.ci_lo,
            hi: r.ci_hi,
            level: r.level,
            method: IntervalMethod::Wald,
            b_effective: 1,
            point_outside: false,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Tuning grid for leave-one-study-out selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub rho: Vec<f64>,
    pub lambda_gamma: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid { rho: vec![0.0, 0.2, 0.5, 0.8], lambda_gamma: vec![0.1, 0.3, 1.0, 3.0] }
    }
}

impl TuningGrid {
    fn points(&self) -> Vec<(f64, f64)> {
        self.rho
            .iter()
            .flat_map(|&r| self.lambda_gamma.iter().map(move |&l| (r, l)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosoOptions {
    /// Quantile of held-out squared errors used as the score.
    pub quantile: f64,
    pub one_se: bool,
    /// Resampling draws for the score's standard error.
    pub resamples: usize,
    pub seed: u64,
}

impl Default for LosoOptions {
    fn default() -> Self {
        LosoOptions { quantile: 0.90, one_se: true, resamples: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionRule {
    Minimiser,
    OneSE,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub rho: f64,
    pub lambda_gamma: f64,
    pub score: f64,
    pub se: f64,
    /// Folds excluded because the reduced fit failed.
    pub failed_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSelection {
    pub rho_star: f64,
    pub lambda_gamma_star: f64,
    pub score_table: Vec<ScoreRow>,
    pub rule: SelectionRule,
}

impl TuningSelection {
    pub fn apply(&self, hp: &Hyperparams) -> Hyperparams {
        Hyperparams { rho: self.rho_star, lambda_gamma: self.lambda_gamma_star, ..*hp }
    }
}

/// Bootstrap options. `reselect` re-runs tuning on every replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub reselect: Option<(TuningGrid, LosoOptions)>,
    pub seed: u64,
}

impl BootstrapOptions {
    pub fn new(replicates: usize, seed: u64) -> Self {
        BootstrapOptions { replicates, level: 0.95, reselect: None, seed }
    }
}

/// Draw `y_i ~ Normal(y_i, v_i)` for every trial.
pub fn perturb_effects<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R) -> Vec<f64> {
    ds.trials()
        .iter()
        .map(|t| {
            let n = Normal::new(t.y, t.v.sqrt()).expect("variance validated positive");
            n.sample(rng)
        })
        .collect()
}

fn fit_target(ds: &Dataset, hp: &Hyperparams, tp: &TargetProfile, reselect: Option<(&TuningGrid, LosoOptions)>) -> Result<f64> {
    let hp = match reselect {
        Some((grid, opts)) => loso_select(ds, grid, hp, &opts)?.apply(hp),
        None => *hp,
    };
    let fit = fit_amt(ds, &hp)?;
    stable_target_effect(&fit, tp)
}

/// Perturbation-bootstrap interval for the stable target effect.
pub fn perturbation_bootstrap(
    ds: &Dataset,
    hp: &Hyperparams,
    tp: &TargetProfile,
    opts: &BootstrapOptions,
) -> Result<IntervalEstimate> {
    if opts.replicates < 2 {
        return Err(AmtError::InvalidArgument(format!("bootstrap needs B >= 2, got {}", opts.replicates)));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(AmtError::InvalidArgument(format!("level must lie in (0, 1), got {}", opts.level)));
    }
    hp.validate()?;
    tp.check_dim(ds.p())?;
    let reselect = opts.reselect.as_ref().map(|(g, o)| (g, *o));
    let point = fit_target(ds, hp, tp, reselect)?;

    let draws: Vec<Result<f64>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = child_stream(opts.seed, b as u64);
            let y = perturb_effects(ds, &mut rng);
            let rep = ds.with_effects(&y)?;
            let inner = reselect.map(|(g, o)| (g, LosoOptions { seed: derive_seed(o.seed, &[b as u64]), ..o }));
            fit_target(&rep, hp, tp, inner)
        })
        .collect();
    bootstrap_interval(point, draws, opts.level)
}

fn bootstrap_interval(point: f64, draws: Vec<Result<f64>>, level: f64) -> Result<IntervalEstimate> {
    let mut first_err = None;
    let mut ok = Vec::with_capacity(draws.len());
    for d in draws {
        match d {
            Ok(x) if x.is_finite() => ok.push(x),
            Ok(_) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if ok.is_empty() {
        return Err(first_err.unwrap_or_else(|| AmtError::InvalidArgument("no finite bootstrap replicates".into())));
    }
    ok.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&ok, tail);
    let hi = quantile_sorted(&ok, 1.0 - tail);
    Ok(IntervalEstimate {
        point,
        lo,
        hi,
        level,
        method: IntervalMethod::PerturbationBootstrap,
        b_effective: ok.len(),
        point_outside: !(lo <= point && point <= hi),
    })
}

/// Held-out squared errors for one grid point, in trial order. `None` marks a
/// fold whose reduced fit failed.
pub fn loso_errors(ds: &Dataset, hp: &Hyperparams) -> Vec<Option<f64>> {
    (0..ds.k()).into_par_iter().map(|i| fold_error(ds, hp, i)).collect()
}

fn fold_error(ds: &Dataset, hp: &Hyperparams, i: usize) -> Option<f64> {
    let train = ds.leave_out(i).ok()?;
    let fit = fit_amt(&train, hp).ok()?;
    // the reduced dataset keeps the parent's anchor standardisation
    let pred = ds.design().predict_row(i, &fit.theta());
    let e = ds.y()[i] - pred;
    Some(e * e)
}

/// Leave-one-study-out grid search over `(rho, lambda_gamma)`.
pub fn loso_select(ds: &Dataset, grid: &TuningGrid, hp_base: &Hyperparams, opts: &LosoOptions) -> Result<TuningSelection> {
    let needed = ds.p() + ds.q() + 2;
    if ds.k() < needed {
        return Err(AmtError::TooFewTrials { needed, found: ds.k() });
    }
    if grid.rho.is_empty() || grid.lambda_gamma.is_empty() {
        return Err(AmtError::InvalidArgument("tuning grid is empty".into()));
    }
    if !(opts.quantile > 0.0 && opts.quantile <= 1.0) {
        return Err(AmtError::InvalidArgument(format!("quantile must lie in (0, 1], got {}", opts.quantile)));
    }
    let points = grid.points();
    for &(rho, lg) in &points {
        Hyperparams { rho, lambda_gamma: lg, ..*hp_base }.validate()?;
    }
    let k = ds.k();
    let errors: Vec<Option<f64>> = (0..points.len() * k)
        .into_par_iter()
        .map(|t| {
            let (rho, lg) = points[t / k];
            fold_error(ds, &Hyperparams { rho, lambda_gamma: lg, ..*hp_base }, t % k)
        })
        .collect();

    let rows: Vec<ScoreRow> = points
        .iter()
        .zip(errors.chunks(k))
        .map(|(&(rho, lg), chunk)| {
            let e: Vec<f64> = chunk.iter().flatten().copied().collect();
            let failed_folds = k - e.len();
            let (score, se) = if e.is_empty() {
                (f64::INFINITY, f64::INFINITY)
            } else {
                (quantile(&e, opts.quantile), resampled_se(&e, opts.quantile, opts.resamples, opts.seed))
            };
            ScoreRow { rho, lambda_gamma: lg, score, se, failed_folds }
        })
        .collect();
    if rows.iter().all(|r| !r.score.is_finite()) {
        return Err(AmtError::InvalidArgument("every leave-one-out fold failed".into()));
    }

    let tie = tie_slack(ds);
    let (best, rule) = select(&rows, opts.one_se, tie);
    Ok(TuningSelection {
        rho_star: rows[best].rho,
        lambda_gamma_star: rows[best].lambda_gamma,
        score_table: rows,
        rule,
    })
}

/// Absolute tolerance for treating scores as tied: rounding-level relative
/// to the weighted second moment of the effects.
fn tie_slack(ds: &Dataset) -> f64 {
    let wsum: f64 = ds.weights().iter().sum();
    let m2: f64 = ds.y().iter().zip(ds.weights()).map(|(y, w)| w * y * y).sum::<f64>() / wsum;
    64.0 * f64::EPSILON * m2
}

/// Preference order among tied candidates: smaller rho, then larger lambda.
fn prefer(a: &ScoreRow, b: &ScoreRow) -> std::cmp::Ordering {
    a.rho.total_cmp(&b.rho).then(b.lambda_gamma.total_cmp(&a.lambda_gamma))
}

fn select(rows: &[ScoreRow], one_se: bool, tie: f64) -> (usize, SelectionRule) {
    let min_idx = (0..rows.len())
        .min_by(|&a, &b| rows[a].score.total_cmp(&rows[b].score).then(prefer(&rows[a], &rows[b])))
        .unwrap();
    let (bound, rule) = if one_se {
        (rows[min_idx].score + rows[min_idx].se, SelectionRule::OneSE)
    } else {
        (rows[min_idx].score, SelectionRule::Minimiser)
    };
    let best = (0..rows.len())
        .filter(|&i| rows[i].score <= bound + tie)
        .min_by(|&a, &b| prefer(&rows[a], &rows[b]))
        .unwrap_or(min_idx);
    (best, rule)
}

/// Standard deviation of the score across with-replacement resamples of the
/// error vector.
fn resampled_se(e: &[f64], q: f64, resamples: usize, seed: u64) -> f64 {
    if resamples < 2 || e.len() < 2 {
        return 0.0;
    }
    let mut rng = stream(seed, &[0x5E, e.len() as u64]);
    let mut buf = vec![0.0; e.len()];
    let stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for x in buf.iter_mut() {
                *x = e[rng.random_range(0..e.len())];
            }
            quantile(&buf, q)
        })
        .collect();
    sample_sd(&stats)
}
