//! Six-scenario simulation study: data generation, replication runner and
//! performance measures.
//!
//! Every replication draws its design and noise from streams derived from
//! `(base seed, scenario, replication, purpose)`, so output does not depend on
//! how replications are scheduled across threads.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amt::{fit_amt, stable_target_effect, Hyperparams};
use crate::classical::{dersimonian_laird, fixed_effect, paule_mandel, wls_meta_regression, ClassicalMethod};
use crate::data::{Dataset, EffectScale, TargetProfile, TrialRecord};
use crate::diagnostics::{abstention_rule, sign_stability};
use crate::error::{AmtError, Result};
use crate::fmt_f64;
use crate::inference::{perturbation_bootstrap, BootstrapOptions};
use crate::rng::{replication_stream, Purpose};

const EMBEDDED_CONFIG: &str = include_str!("../config/scenarios.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Stable,
    AnchorShift,
    SignFlip,
    TargetShift,
    DominantMegatrial,
    ConfoundedAnchor,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Stable,
        Scenario::AnchorShift,
        Scenario::SignFlip,
        Scenario::TargetShift,
        Scenario::DominantMegatrial,
        Scenario::ConfoundedAnchor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Stable => "stable",
            Scenario::AnchorShift => "anchor_shift",
            Scenario::SignFlip => "sign_flip",
            Scenario::TargetShift => "target_shift",
            Scenario::DominantMegatrial => "dominant_megatrial",
            Scenario::ConfoundedAnchor => "confounded_anchor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| AmtError::InvalidArgument(format!("unknown scenario `{s}`")))
    }

    /// `all` or a comma-separated list of names.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s == "all" {
            return Ok(Scenario::ALL.to_vec());
        }
        s.split(',').map(|x| Scenario::parse(x.trim())).collect()
    }

    fn stream_id(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConstants {
    pub old_era_fraction: f64,
    pub old_years: [i64; 2],
    pub modern_years: [i64; 2],
    pub region_b_prob: f64,
    pub endpoint_narrow_prob: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub diabetes_range: [f64; 2],
    pub statin_base: f64,
    pub statin_slope: f64,
    pub statin_year0: i64,
    pub statin_span: f64,
    pub statin_sd: f64,
    pub sample_size_range: [f64; 2],
    pub variance_numerator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectConstants {
    pub slopes: Vec<f64>,
    pub target: Vec<f64>,
    pub target_effect: f64,
}

/// Scenario-specific departures from the stable design. Absent keys are zero
/// or "no change".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioShifts {
    pub old_era_delta: f64,
    pub region_b_delta: f64,
    pub age_center: Option<f64>,
    pub diabetes_center: Option<f64>,
    pub statin_center: Option<f64>,
    pub megatrial_n: Option<f64>,
    pub megatrial_delta: f64,
    pub old_diabetes_shift: f64,
    pub old_statin_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantsFile {
    version: String,
    k_trials: usize,
    design: DesignConstants,
    effect: EffectConstants,
    scenario: BTreeMap<String, ScenarioShifts>,
}

/// Versioned generative constants plus the checksum of their source text.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConstants {
    pub version: String,
    pub k_trials: usize,
    pub design: DesignConstants,
    pub effect: EffectConstants,
    pub scenarios: BTreeMap<Scenario, ScenarioShifts>,
    source: String,
}

impl SimConstants {
    /// The constants shipped with the crate.
    pub fn embedded() -> Self {
        Self::from_toml_str(EMBEDDED_CONFIG).expect("embedded scenario constants are valid")
    }

    pub fn embedded_source() -> &'static str {
        EMBEDDED_CONFIG
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: ConstantsFile = toml::from_str(text).map_err(|e| AmtError::Config(e.to_string()))?;
        let mut scenarios = BTreeMap::new();
        for (name, shifts) in f.scenario {
            scenarios.insert(Scenario::parse(&name).map_err(|e| AmtError::Config(e.to_string()))?, shifts);
        }
        let c = SimConstants {
            version: f.version,
            k_trials: f.k_trials,
            design: f.design,
            effect: f.effect,
            scenarios,
            source: text.to_string(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the constants' source text.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.source.as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AmtError::Config(m.to_string()));
        let d = &self.design;
        for (p, name) in [
            (d.old_era_fraction, "old_era_fraction"),
            (d.region_b_prob, "region_b_prob"),
            (d.endpoint_narrow_prob, "endpoint_narrow_prob"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if d.old_years[0] > d.old_years[1] || d.modern_years[0] > d.modern_years[1] {
            return bad("year ranges must be increasing");
        }
        if !(d.sample_size_range[0] > 0.0 && d.sample_size_range[0] <= d.sample_size_range[1]) {
            return bad("sample_size_range must be positive and increasing");
        }
        if !(d.variance_numerator > 0.0) || !(d.age_sd >= 0.0) || !(d.statin_sd >= 0.0) || !(d.statin_span > 0.0) {
            return bad("variance and spread constants must be positive");
        }
        if self.effect.slopes.len() + 1 != self.effect.target.len() {
            return bad("effect.target needs one entry per moderator including the intercept");
        }
        if self.effect.target.first() != Some(&1.0) {
            return bad("effect.target must start with the intercept 1");
        }
        if self.k_trials < MODERATORS.len() + ANCHORS.len() + 2 {
            return bad("k_trials too small for the moderator and anchor columns");
        }
        if self.scenarios.len() != Scenario::ALL.len() {
            return bad("every scenario needs a table, even if empty");
        }
        Ok(())
    }

    pub fn scenario(&self, s: Scenario, k_trials: Option<usize>) -> ScenarioConfig {
        let shifts = self.scenarios.get(&s).cloned().unwrap_or_default();
        let e = &self.effect;
        let intercept = e.target_effect - e.target[1..].iter().zip(&e.slopes).map(|(a, b)| a * b).sum::<f64>();
        let mut beta_true = vec![intercept];
        beta_true.extend_from_slice(&e.slopes);
        ScenarioConfig {
            scenario: s,
            k_trials: k_trials.unwrap_or(self.k_trials),
            beta_true,
            target: TargetProfile { z_bar: e.target.clone() },
            design: self.design.clone(),
            shifts,
        }
    }
}

pub const MODERATORS: [&str; 4] = ["intercept", "age", "diabetes", "statin_hi"];
pub const ANCHORS: [&str; 3] = ["era", "region", "endpoint"];

/// Fully resolved generative settings for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub k_trials: usize,
    pub beta_true: Vec<f64>,
    pub target: TargetProfile,
    pub design: DesignConstants,
    pub shifts: ScenarioShifts,
}

impl ScenarioConfig {
    pub fn n_old(&self) -> usize {
        (self.design.old_era_fraction * self.k_trials as f64).round() as usize
    }

    /// Stable target effect, plus the flag marking scenarios without one.
    pub fn truth(&self) -> (f64, bool) {
        let base: f64 = self.target.z_bar.iter().zip(&self.beta_true).map(|(a, b)| a * b).sum();
        if self.shifts.region_b_delta != 0.0 {
            (base + self.design.region_b_prob * self.shifts.region_b_delta, true)
        } else {
            (base, false)
        }
    }

    fn mean_statin(&self) -> f64 {
        let d = &self.design;
        let mid = |r: [i64; 2]| (r[0] + r[1]) as f64 / 2.0;
        let f_old = self.n_old() as f64 / self.k_trials as f64;
        let year = f_old * mid(d.old_years) + (1.0 - f_old) * mid(d.modern_years);
        d.statin_base + d.statin_slope * (year - d.statin_year0 as f64) / d.statin_span
    }
}

/// One simulated meta-analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub dataset: Dataset,
    pub truth: f64,
    pub no_stable_target: bool,
    /// Unweighted mean of the trials' true effects.
    pub sample_avg_effect: f64,
}

/// Draw one replication of a scenario.
pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64, r: u64) -> Result<GeneratedData> {
    let d = &cfg.design;
    let sh = &cfg.shifts;
    let k = cfg.k_trials;
    let n_old = cfg.n_old();
    let mut design_rng = replication_stream(seed, cfg.scenario.stream_id(), r, Purpose::Design);
    let mut noise_rng = replication_stream(seed, cfg.scenario.stream_id(), r, Purpose::Noise);

    let age_mean = sh.age_center.unwrap_or(d.age_mean);
    let dm_shift = sh.diabetes_center.map_or(0.0, |c| c - (d.diabetes_range[0] + d.diabetes_range[1]) / 2.0);
    let statin_shift = sh.statin_center.map_or(0.0, |c| c - cfg.mean_statin());
    let age_dist = Normal::new(age_mean, d.age_sd).map_err(|e| AmtError::Config(e.to_string()))?;
    let statin_noise = Normal::new(0.0, d.statin_sd).map_err(|e| AmtError::Config(e.to_string()))?;
    let dm_dist = Uniform::new_inclusive(d.diabetes_range[0], d.diabetes_range[1]).map_err(|e| AmtError::Config(e.to_string()))?;
    let log_n = Uniform::new_inclusive(d.sample_size_range[0].ln(), d.sample_size_range[1].ln())
        .map_err(|e| AmtError::Config(e.to_string()))?;

    let mut trials = Vec::with_capacity(k);
    let mut theta_sum = 0.0;
    for i in 0..k {
        let old = i < n_old;
        let years = if old { d.old_years } else { d.modern_years };
        let year = design_rng.random_range(years[0]..=years[1]);
        let region_b = design_rng.random_bool(d.region_b_prob);
        let narrow = design_rng.random_bool(d.endpoint_narrow_prob);
        let age = age_dist.sample(&mut design_rng);
        let mut dm = dm_dist.sample(&mut design_rng) + dm_shift;
        let trend = d.statin_base + d.statin_slope * (year - d.statin_year0) as f64 / d.statin_span;
        let mut statin = trend + statin_noise.sample(&mut design_rng) + statin_shift;
        let mut n = log_n.sample(&mut design_rng).exp();
        if old {
            dm += sh.old_diabetes_shift;
            statin += sh.old_statin_shift;
        }
        let mut delta = 0.0;
        if old {
            delta += sh.old_era_delta;
        }
        if region_b {
            delta += sh.region_b_delta;
        }
        if let (Some(mega_n), 0) = (sh.megatrial_n, i) {
            n = mega_n;
            delta += sh.megatrial_delta;
        }
        let statin = statin.clamp(0.0, 1.0);
        let dm = dm.clamp(0.0, 1.0);
        let z = vec![1.0, age, dm, statin];
        let theta: f64 = z.iter().zip(&cfg.beta_true).map(|(a, b)| a * b).sum::<f64>() + delta;
        theta_sum += theta;
        let v = d.variance_numerator / n;
        let y = theta + v.sqrt() * noise_rng.sample::<f64, _>(rand_distr::StandardNormal);
        trials.push(TrialRecord {
            id: format!("s{:02}", i + 1),
            y,
            v,
            z,
            a: vec![old as u8 as f64, region_b as u8 as f64, narrow as u8 as f64],
            regime: format!(
                "{}_{}_{}",
                if old { "old" } else { "modern" },
                if region_b { "B" } else { "A" },
                if narrow { "narrow" } else { "broad" }
            ),
        });
    }
    let dataset = Dataset::new(
        trials,
        EffectScale::RiskDifference,
        MODERATORS.iter().map(|s| s.to_string()).collect(),
        ANCHORS.iter().map(|s| s.to_string()).collect(),
    )?;
    let (truth, no_stable_target) = cfg.truth();
    Ok(GeneratedData { dataset, truth, no_stable_target, sample_avg_effect: theta_sum / k as f64 })
}

/// Estimators compared in the study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SimMethod {
    Classical(ClassicalMethod),
    Amt { rho: f64 },
}

impl SimMethod {
    pub fn default_set() -> Vec<SimMethod> {
        let mut m: Vec<SimMethod> = [
            ClassicalMethod::FixedEffect,
            ClassicalMethod::DerSimonianLaird,
            ClassicalMethod::PauleMandel,
            ClassicalMethod::WlsMetaRegression,
        ]
        .into_iter()
        .map(SimMethod::Classical)
        .collect();
        m.extend([0.0, 0.2, 0.5, 0.8].map(|rho| SimMethod::Amt { rho }));
        m
    }

    pub fn label(&self) -> String {
        match self {
            SimMethod::Classical(c) => c.label().to_string(),
            SimMethod::Amt { rho } => format!("AMT_rho{:02}", (rho * 100.0).round() as i64),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("AMT_rho") {
            let pct: u32 = rest.parse().map_err(|_| AmtError::InvalidArgument(format!("bad method `{s}`")))?;
            return Ok(SimMethod::Amt { rho: pct as f64 / 100.0 });
        }
        [
            ClassicalMethod::FixedEffect,
            ClassicalMethod::DerSimonianLaird,
            ClassicalMethod::PauleMandel,
            ClassicalMethod::WlsMetaRegression,
        ]
        .into_iter()
        .find(|c| c.label() == s)
        .map(SimMethod::Classical)
        .ok_or_else(|| AmtError::InvalidArgument(format!("unknown method `{s}`")))
    }

    pub fn is_amt(&self) -> bool {
        matches!(self, SimMethod::Amt { .. })
    }
}

/// Hyperparameters used by every AMT variant in the study: defaults with the
/// given blend weight and no re-selection.
pub fn study_hyperparams(rho: f64) -> Hyperparams {
    Hyperparams { rho, ..Hyperparams::for_scale(EffectScale::RiskDifference) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub estimate: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub ss_trial: Option<f64>,
    pub abstain: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub scenario: Scenario,
    pub replication: u64,
    pub truth: f64,
    pub no_stable_target: bool,
    pub sample_avg_effect: f64,
    pub outcomes: Vec<MethodOutcome>,
}

fn run_method(data: &GeneratedData, tp: &TargetProfile, m: SimMethod, level: f64) -> MethodOutcome {
    let ds = &data.dataset;
    let label = m.label();
    let result: Result<MethodOutcome> = (|| match m {
        SimMethod::Classical(c) => {
            let r = match c {
                ClassicalMethod::FixedEffect => fixed_effect(ds, level),
                ClassicalMethod::DerSimonianLaird => dersimonian_laird(ds, level)?,
                ClassicalMethod::PauleMandel => paule_mandel(ds, level)?,
                ClassicalMethod::WlsMetaRegression => wls_meta_regression(ds, tp, level)?,
            };
            Ok(MethodOutcome {
                method: label.clone(),
                estimate: Some(r.theta_hat),
                ci: Some((r.ci_lo, r.ci_hi)),
                ss_trial: None,
                abstain: None,
                error: None,
            })
        }
        SimMethod::Amt { rho } => {
            let hp = study_hyperparams(rho);
            let fit = fit_amt(ds, &hp)?;
            let theta = stable_target_effect(&fit, tp)?;
            let ss = sign_stability(ds, theta, hp.delta);
            let (abstain, _, _) = abstention_rule(ds, ss, &hp);
            Ok(MethodOutcome {
                method: label.clone(),
                estimate: Some(theta),
                ci: None,
                ss_trial: ss.value(),
                abstain: Some(abstain),
                error: None,
            })
        }
    })();
    result.unwrap_or_else(|e| MethodOutcome {
        method: label,
        estimate: None,
        ci: None,
        ss_trial: None,
        abstain: None,
        error: Some(e.to_string()),
    })
}

/// Generate one replication and apply every method to it. Method failures
/// become missing cells rather than errors.
pub fn run_replication(cfg: &ScenarioConfig, methods: &[SimMethod], seed: u64, r: u64) -> Result<ReplicationResult> {
    let data = generate_scenario(cfg, seed, r)?;
    let outcomes = methods.iter().map(|&m| run_method(&data, &cfg.target, m, 0.95)).collect();
    Ok(ReplicationResult {
        scenario: cfg.scenario,
        replication: r,
        truth: data.truth,
        no_stable_target: data.no_stable_target,
        sample_avg_effect: data.sample_avg_effect,
        outcomes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub ambiguous_band: f64,
    pub decision_threshold: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { ambiguous_band: 0.005, decision_threshold: -0.005 }
    }
}

/// Performance measures for one (scenario, method) cell. `NaN` marks a measure
/// that does not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub method: String,
    pub bias: f64,
    pub rmse: f64,
    pub mae: f64,
    pub type_s: f64,
    pub coverage: f64,
    pub regret_smart: f64,
    pub ss_trial_mean: f64,
    pub abstain_rate: f64,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

struct Cell<'a> {
    truth: f64,
    out: &'a MethodOutcome,
}

fn cell_metrics(scenario: &str, method: &str, cells: &[Cell], opts: &MetricOptions) -> MetricsRow {
    let est: Vec<(f64, f64, bool, &MethodOutcome)> = cells
        .iter()
        .filter_map(|c| c.out.estimate.map(|e| (e, c.truth, c.out.abstain.unwrap_or(false), c.out)))
        .collect();
    let bias = mean_of(est.iter().map(|(e, t, ..)| e - t));
    let rmse = mean_of(est.iter().map(|(e, t, ..)| (e - t).powi(2))).sqrt();
    let mae = mean_of(est.iter().map(|(e, t, ..)| (e - t).abs()));
    let type_s = mean_of(
        est.iter()
            .filter(|(_, t, abst, _)| !abst && *t != 0.0)
            .map(|(e, t, ..)| if e.signum() != t.signum() || *e == 0.0 { 1.0 } else { 0.0 }),
    );
    let coverage = mean_of(
        est.iter()
            .filter_map(|(_, t, _, o)| o.ci.map(|(lo, hi)| if lo <= *t && *t <= hi { 1.0 } else { 0.0 })),
    );
    let regret_smart = mean_of(est.iter().map(|(e, t, abst, _)| {
        if *abst {
            if t.abs() < opts.ambiguous_band {
                0.0
            } else {
                1.0
            }
        } else if (*e < opts.decision_threshold) != (*t < opts.decision_threshold) {
            1.0
        } else {
            0.0
        }
    }));
    let ss_trial_mean = mean_of(est.iter().filter_map(|(.., o)| o.ss_trial));
    let abstain_rate = mean_of(est.iter().filter_map(|(.., o)| o.abstain.map(|a| a as u8 as f64)));
    MetricsRow {
        scenario: scenario.to_string(),
        method: method.to_string(),
        bias,
        rmse,
        mae,
        type_s,
        coverage,
        regret_smart,
        ss_trial_mean,
        abstain_rate,
    }
}

/// Aggregate replication results into one row per (scenario, method), in
/// order of first appearance.
pub fn aggregate_metrics(results: &[ReplicationResult], opts: &MetricOptions) -> Vec<MetricsRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut cells: BTreeMap<(String, String), Vec<Cell>> = BTreeMap::new();
    for r in results {
        for o in &r.outcomes {
            let key = (r.scenario.name().to_string(), o.method.clone());
            let entry = cells.entry(key.clone()).or_default();
            if entry.is_empty() {
                keys.push(key);
            }
            entry.push(Cell { truth: r.truth, out: o });
        }
    }
    keys.iter()
        .map(|k| cell_metrics(&k.0, &k.1, &cells[k], opts))
        .collect()
}

/// Interval coverage for one (scenario, method) cell of the coverage sub-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub scenario: String,
    pub method: String,
    pub interval: String,
    pub coverage: f64,
    pub mean_width: f64,
    pub n_reps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageOptions {
    pub reps: usize,
    pub boot: usize,
    pub rho: f64,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        CoverageOptions { reps: 100, boot: 30, rho: 0.2 }
    }
}

/// Per-replication intervals of the coverage sub-run.
#[derive(Debug, Clone, PartialEq)]
struct CoverageRecord {
    truth: f64,
    intervals: Vec<(String, &'static str, Option<(f64, f64)>)>,
}

fn coverage_replication(cfg: &ScenarioConfig, opts: &CoverageOptions, seed: u64, r: u64) -> Result<CoverageRecord> {
    let data = generate_scenario(cfg, seed, r)?;
    let mut intervals = Vec::new();
    for m in SimMethod::default_set().into_iter().filter(|m| !m.is_amt()) {
        let o = run_method(&data, &cfg.target, m, 0.95);
        intervals.push((m.label(), "wald", o.ci));
    }
    let mut boot_rng = replication_stream(seed, cfg.scenario.stream_id(), r, Purpose::Bootstrap);
    let boot_seed: u64 = boot_rng.random();
    let hp = study_hyperparams(opts.rho);
    let amt = perturbation_bootstrap(&data.dataset, &hp, &cfg.target, &BootstrapOptions::new(opts.boot, boot_seed))
        .ok()
        .map(|iv| (iv.lo, iv.hi));
    intervals.push((SimMethod::Amt { rho: opts.rho }.label(), "perturbation", amt));
    Ok(CoverageRecord { truth: data.truth, intervals })
}

fn aggregate_coverage(scenario: Scenario, records: &[CoverageRecord]) -> Vec<CoverageRow> {
    let Some(first) = records.first() else { return Vec::new() };
    (0..first.intervals.len())
        .map(|j| {
            let hits: Vec<(f64, f64, f64)> = records
                .iter()
                .filter_map(|rec| rec.intervals[j].2.map(|(lo, hi)| (lo, hi, rec.truth)))
                .collect();
            CoverageRow {
                scenario: scenario.name().to_string(),
                method: first.intervals[j].0.clone(),
                interval: first.intervals[j].1.to_string(),
                coverage: mean_of(hits.iter().map(|(lo, hi, t)| if lo <= t && t <= hi { 1.0 } else { 0.0 })),
                mean_width: mean_of(hits.iter().map(|(lo, hi, _)| hi - lo)),
                n_reps: hits.len(),
            }
        })
        .collect()
}

/// Settings for a full study run.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub scenarios: Vec<Scenario>,
    pub reps: usize,
    pub k_trials: Option<usize>,
    pub seed: u64,
    pub methods: Vec<SimMethod>,
    pub coverage: Option<CoverageOptions>,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub workers: Option<usize>,
    pub metric_options: MetricOptions,
}

impl StudyOptions {
    pub fn new(scenarios: Vec<Scenario>, reps: usize, seed: u64) -> Self {
        StudyOptions {
            scenarios,
            reps,
            k_trials: None,
            seed,
            methods: SimMethod::default_set(),
            coverage: None,
            workers: None,
            metric_options: MetricOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub results: Vec<ReplicationResult>,
    pub metrics: Vec<MetricsRow>,
    pub coverage: Option<Vec<CoverageRow>>,
}

/// Run every requested scenario and replication, in parallel, with results
/// ordered by (scenario, replication).
pub fn run_study(constants: &SimConstants, opts: &StudyOptions) -> Result<StudyOutput> {
    if opts.reps == 0 {
        return Err(AmtError::InvalidArgument("reps must be at least 1".into()));
    }
    if opts.methods.is_empty() {
        return Err(AmtError::InvalidArgument("no methods requested".into()));
    }
    let configs: Vec<ScenarioConfig> = opts.scenarios.iter().map(|&s| constants.scenario(s, opts.k_trials)).collect();
    let min_k = MODERATORS.len() + ANCHORS.len() + 2;
    if let Some(c) = configs.first() {
        if c.k_trials < min_k {
            return Err(AmtError::TooFewTrials { needed: min_k, found: c.k_trials });
        }
    }
    let work = || -> Result<StudyOutput> {
        let tasks: Vec<(usize, u64)> =
            (0..configs.len()).flat_map(|c| (0..opts.reps as u64).map(move |r| (c, r))).collect();
        let results = tasks
            .par_iter()
            .map(|&(c, r)| run_replication(&configs[c], &opts.methods, opts.seed, r))
            .collect::<Result<Vec<_>>>()?;
        let metrics = aggregate_metrics(&results, &opts.metric_options);
        let coverage = match &opts.coverage {
            None => None,
            Some(cov) => {
                let tasks: Vec<(usize, u64)> =
                    (0..configs.len()).flat_map(|c| (0..cov.reps as u64).map(move |r| (c, r))).collect();
                let recs = tasks
                    .par_iter()
                    .map(|&(c, r)| coverage_replication(&configs[c], cov, opts.seed, r))
                    .collect::<Result<Vec<_>>>()?;
                let rows = configs
                    .iter()
                    .enumerate()
                    .flat_map(|(c, cfg)| aggregate_coverage(cfg.scenario, &recs[c * cov.reps..(c + 1) * cov.reps]))
                    .collect();
                Some(rows)
            }
        };
        Ok(StudyOutput { results, metrics, coverage })
    };
    match opts.workers {
        None => work(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| AmtError::InvalidArgument(e.to_string()))?
            .install(work),
    }
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "scenario",
    "method",
    "bias",
    "rmse",
    "mae",
    "type_s",
    "coverage",
    "regret_smart",
    "ss_trial_mean",
    "abstain_rate",
];

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for r in rows {
        let nums = [r.bias, r.rmse, r.mae, r.type_s, r.coverage, r.regret_smart, r.ss_trial_mean, r.abstain_rate];
        let mut rec = vec![r.scenario.clone(), r.method.clone()];
        rec.extend(nums.iter().map(|&x| fmt_f64(x)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_coverage_csv<W: Write>(rows: &[CoverageRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "method", "interval", "coverage", "mean_width", "n_reps"])?;
    for r in rows {
        out.write_record([
            r.scenario.clone(),
            r.method.clone(),
            r.interval.clone(),
            fmt_f64(r.coverage),
            fmt_f64(r.mean_width),
            r.n_reps.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One row per (scenario, replication, method).
pub fn write_raw_csv<W: Write>(results: &[ReplicationResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "scenario",
        "replication",
        "method",
        "truth",
        "no_stable_target",
        "sample_avg_effect",
        "estimate",
        "ci_lo",
        "ci_hi",
        "ss_trial",
        "abstain",
        "error",
    ])?;
    let opt = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), fmt_f64);
    for r in results {
        for o in &r.outcomes {
            out.write_record([
                r.scenario.name().to_string(),
                r.replication.to_string(),
                o.method.clone(),
                fmt_f64(r.truth),
                r.no_stable_target.to_string(),
                fmt_f64(r.sample_avg_effect),
                opt(o.estimate),
                opt(o.ci.map(|c| c.0)),
                opt(o.ci.map(|c| c.1)),
                opt(o.ss_trial),
                o.abstain.map_or_else(|| "NA".to_string(), |a| a.to_string()),
                o.error.clone().unwrap_or_default(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
