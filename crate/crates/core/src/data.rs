//! Trial-level records, validated datasets, target profiles and the CSV
//! ingestion format.
//!
//! Input CSV layout (header required, columns in this order):
//!
//! ```text
//! trial_id, (y, v | events_t, n_t, events_c, n_c), z.intercept, z.<name>*, a.<name>*, regime
//! ```
//!
//! Anchors are standardised at validation time to precision-weighted mean 0
//! and precision-weighted variance 1. The raw values are kept on each
//! [`TrialRecord`] and the transform on the [`Dataset`], so anchor
//! coefficients can be mapped back to the original scale.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{AmtError, Result};
use crate::fmt_f64;

/// Effect-size scale of the `y` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectScale {
    #[serde(rename = "rd")]
    RiskDifference,
    #[serde(rename = "logor")]
    LogOddsRatio,
}

impl EffectScale {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rd" | "risk_difference" => Ok(EffectScale::RiskDifference),
            "logor" | "log_or" | "lor" => Ok(EffectScale::LogOddsRatio),
            other => Err(AmtError::InvalidArgument(format!("unknown effect scale `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EffectScale::RiskDifference => "rd",
            EffectScale::LogOddsRatio => "logor",
        }
    }

    /// Default clinical null band for the sign-stability score on this scale.
    pub fn default_delta(self) -> f64 {
        match self {
            EffectScale::RiskDifference => 0.005,
            EffectScale::LogOddsRatio => 0.0,
        }
    }
}

fn check_counts(events_t: u64, n_t: u64, events_c: u64, n_c: u64) -> Result<()> {
    if n_t == 0 || n_c == 0 {
        return Err(AmtError::InvalidCounts("arm size must be at least 1".into()));
    }
    if events_t > n_t || events_c > n_c {
        return Err(AmtError::InvalidCounts(format!(
            "events exceed arm size ({events_t}/{n_t}, {events_c}/{n_c})"
        )));
    }
    Ok(())
}

/// Woolf log odds ratio and its variance from a 2x2 table.
///
/// With `continuity_correction`, 0.5 is added to all four cells only when
/// some cell is zero.
pub fn log_odds_ratio_from_counts(
    events_t: u64,
    n_t: u64,
    events_c: u64,
    n_c: u64,
    continuity_correction: bool,
) -> Result<(f64, f64)> {
    check_counts(events_t, n_t, events_c, n_c)?;
    let mut cells = [
        events_t as f64,
        (n_t - events_t) as f64,
        events_c as f64,
        (n_c - events_c) as f64,
    ];
    if cells.contains(&0.0) {
        if !continuity_correction {
            return Err(AmtError::ZeroCell);
        }
        for c in cells.iter_mut() {
            *c += 0.5;
        }
    }
    let [a, b, c, d] = cells;
    let y = (a * d / (b * c)).ln();
    let v = 1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d;
    Ok((y, v))
}

/// Risk difference (treatment minus control) and its binomial variance.
///
/// A zero variance is returned as-is; building a [`TrialRecord`] from it
/// fails validation.
pub fn risk_difference_from_counts(
    events_t: u64,
    n_t: u64,
    events_c: u64,
    n_c: u64,
) -> Result<(f64, f64)> {
    check_counts(events_t, n_t, events_c, n_c)?;
    let (nt, nc) = (n_t as f64, n_c as f64);
    let pt = events_t as f64 / nt;
    let pc = events_c as f64 / nc;
    Ok((pt - pc, pt * (1.0 - pt) / nt + pc * (1.0 - pc) / nc))
}

/// One study: effect estimate, sampling variance, moderators, raw anchors and
/// regime label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: String,
    pub y: f64,
    pub v: f64,
    /// Transportable moderators; `z[0]` is the intercept and must equal 1.
    pub z: Vec<f64>,
    /// Anchor covariates on their original scale.
    pub a: Vec<f64>,
    pub regime: String,
}

impl TrialRecord {
    pub fn weight(&self) -> f64 {
        1.0 / self.v
    }
}

/// Column-wise anchor scaling `a_std = a / scale`, with `scale` the
/// precision-weighted standard deviation. Anchors are not centred: zero stays
/// the reference anchor profile, so the intercept never absorbs an average
/// anchor contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTransform {
    pub scale: Vec<f64>,
}

impl AnchorTransform {
    fn fit(trials: &[TrialRecord], q: usize) -> Self {
        let wsum: f64 = trials.iter().map(TrialRecord::weight).sum();
        let mut scale = vec![1.0; q];
        for j in 0..q {
            let m = trials.iter().map(|t| t.weight() * t.a[j]).sum::<f64>() / wsum;
            let var = trials
                .iter()
                .map(|t| t.weight() * (t.a[j] - m).powi(2))
                .sum::<f64>()
                / wsum;
            // constant columns keep unit scale
            if var > 1e-24 * (1.0 + m * m) {
                scale[j] = var.sqrt();
            }
        }
        AnchorTransform { scale }
    }

    /// Map coefficients on standardised anchors back to the original scale.
    pub fn to_original(&self, gamma: &[f64]) -> Vec<f64> {
        gamma.iter().zip(&self.scale).map(|(g, s)| g / s).collect()
    }
}

/// Dense row-major design `[Z, A_std]` with responses and precision weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub k: usize,
    pub p: usize,
    pub q: usize,
    /// Row-major `k x (p + q)`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

impl Design {
    #[inline]
    pub fn ncols(&self) -> usize {
        self.p + self.q
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.ncols();
        &self.x[i * m..(i + 1) * m]
    }

    /// Linear predictor `x_i' theta` for trial `i`.
    pub fn predict_row(&self, i: usize, theta: &[f64]) -> f64 {
        self.row(i).iter().zip(theta).map(|(a, b)| a * b).sum()
    }

    /// Linear predictor for every trial.
    pub fn predict(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.k).map(|i| self.predict_row(i, theta)).collect()
    }
}

/// Validated, immutable collection of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trials: Vec<TrialRecord>,
    scale: EffectScale,
    z_names: Vec<String>,
    a_names: Vec<String>,
    regimes: Vec<String>,
    regime_of: Vec<usize>,
    anchor_transform: AnchorTransform,
    design: Design,
}

impl Dataset {
    /// Validate trials and build the dataset. Regimes are indexed in order of
    /// first appearance.
    pub fn new(
        trials: Vec<TrialRecord>,
        scale: EffectScale,
        z_names: Vec<String>,
        a_names: Vec<String>,
    ) -> Result<Self> {
        validate_trials(&trials, &z_names, &a_names)?;
        let transform = AnchorTransform::fit(&trials, a_names.len());
        Ok(Self::assemble(trials, scale, z_names, a_names, transform))
    }

    fn assemble(
        trials: Vec<TrialRecord>,
        scale: EffectScale,
        z_names: Vec<String>,
        a_names: Vec<String>,
        anchor_transform: AnchorTransform,
    ) -> Self {
        let mut regimes: Vec<String> = Vec::new();
        let mut regime_of = Vec::with_capacity(trials.len());
        for t in &trials {
            let idx = match regimes.iter().position(|r| r == &t.regime) {
                Some(i) => i,
                None => {
                    regimes.push(t.regime.clone());
                    regimes.len() - 1
                }
            };
            regime_of.push(idx);
        }
        let (p, q) = (z_names.len(), a_names.len());
        let mut x = Vec::with_capacity(trials.len() * (p + q));
        for t in &trials {
            x.extend_from_slice(&t.z);
            for j in 0..q {
                x.push(t.a[j] / anchor_transform.scale[j]);
            }
        }
        let design = Design {
            k: trials.len(),
            p,
            q,
            x,
            y: trials.iter().map(|t| t.y).collect(),
            w: trials.iter().map(TrialRecord::weight).collect(),
        };
        Dataset {
            trials,
            scale,
            z_names,
            a_names,
            regimes,
            regime_of,
            anchor_transform,
            design,
        }
    }

    pub fn trials(&self) -> &[TrialRecord] {
        &self.trials
    }
    pub fn scale(&self) -> EffectScale {
        self.scale
    }
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }
    pub fn a_names(&self) -> &[String] {
        &self.a_names
    }
    pub fn regimes(&self) -> &[String] {
        &self.regimes
    }
    /// Dense regime index of each trial.
    pub fn regime_of(&self) -> &[usize] {
        &self.regime_of
    }
    pub fn anchor_transform(&self) -> &AnchorTransform {
        &self.anchor_transform
    }
    pub fn design(&self) -> &Design {
        &self.design
    }
    pub fn k(&self) -> usize {
        self.trials.len()
    }
    pub fn p(&self) -> usize {
        self.z_names.len()
    }
    pub fn q(&self) -> usize {
        self.a_names.len()
    }
    pub fn g(&self) -> usize {
        self.regimes.len()
    }
    pub fn y(&self) -> &[f64] {
        &self.design.y
    }
    pub fn v(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.v).collect()
    }
    pub fn weights(&self) -> &[f64] {
        &self.design.w
    }

    /// Same trials with replaced effect estimates. The anchor transform is
    /// kept, which is exact because it depends only on anchors and variances.
    pub fn with_effects(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.k() {
            return Err(AmtError::DimensionMismatch(format!(
                "expected {} effects, got {}",
                self.k(),
                y.len()
            )));
        }
        let mut trials = self.trials.clone();
        for (t, &yi) in trials.iter_mut().zip(y) {
            if !yi.is_finite() {
                return Err(AmtError::NonFiniteValue { id: t.id.clone(), column: "y".into() });
            }
            t.y = yi;
        }
        Ok(Self::assemble(
            trials,
            self.scale,
            self.z_names.clone(),
            self.a_names.clone(),
            self.anchor_transform.clone(),
        ))
    }

    /// Sub-dataset over the given trial indices, keeping the parent's anchor
    /// transform. Regimes are re-enumerated over the retained trials.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(AmtError::EmptyDataset);
        }
        let trials: Vec<TrialRecord> = indices
            .iter()
            .map(|&i| {
                self.trials.get(i).cloned().ok_or_else(|| {
                    AmtError::InvalidArgument(format!("trial index {i} out of range"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::assemble(
            trials,
            self.scale,
            self.z_names.clone(),
            self.a_names.clone(),
            self.anchor_transform.clone(),
        ))
    }

    /// Dataset without trial `i`.
    pub fn leave_out(&self, i: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..self.k()).filter(|&j| j != i).collect();
        self.subset(&idx)
    }

    /// Trial indices belonging to each regime.
    pub fn regime_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.g()];
        for (i, &g) in self.regime_of.iter().enumerate() {
            members[g].push(i);
        }
        members
    }

    /// Read the CSV input format. Count columns are converted on `scale`.
    pub fn from_csv_reader<R: Read>(
        reader: R,
        scale: EffectScale,
        continuity_correction: bool,
    ) -> Result<Self> {
        let rows = parse_csv(reader, scale, continuity_correction)?;
        validate_dataset(rows, scale)
    }

    pub fn from_csv_path(
        path: impl AsRef<std::path::Path>,
        scale: EffectScale,
        continuity_correction: bool,
    ) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())
            .map_err(|e| AmtError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_csv_reader(f, scale, continuity_correction)
    }

    /// Serialise to the `(y, v)` form of the CSV input format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["trial_id".to_string(), "y".into(), "v".into()];
        header.extend(self.z_names.iter().map(|n| format!("z.{n}")));
        header.extend(self.a_names.iter().map(|n| format!("a.{n}")));
        header.push("regime".into());
        wtr.write_record(&header)?;
        for t in &self.trials {
            let mut rec = vec![t.id.clone(), fmt_f64(t.y), fmt_f64(t.v)];
            rec.extend(t.z.iter().map(|&x| fmt_f64(x)));
            rec.extend(t.a.iter().map(|&x| fmt_f64(x)));
            rec.push(t.regime.clone());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn validate_trials(trials: &[TrialRecord], z_names: &[String], a_names: &[String]) -> Result<()> {
    if trials.is_empty() {
        return Err(AmtError::EmptyDataset);
    }
    let (p, q) = (z_names.len(), a_names.len());
    if p == 0 {
        return Err(AmtError::MissingInterceptColumn("no moderator columns".into()));
    }
    for t in trials {
        if t.z.len() != p || t.a.len() != q {
            return Err(AmtError::DimensionMismatch(format!(
                "trial `{}` has {} moderators and {} anchors, expected {p} and {q}",
                t.id,
                t.z.len(),
                t.a.len()
            )));
        }
        if !t.y.is_finite() {
            return Err(AmtError::NonFiniteValue { id: t.id.clone(), column: "y".into() });
        }
        if !(t.v.is_finite() && t.v > 0.0) {
            return Err(AmtError::NonPositiveVariance { id: t.id.clone(), v: t.v });
        }
        if t.z[0] != 1.0 {
            return Err(AmtError::MissingInterceptColumn(format!(
                "trial `{}` has z[0] = {}",
                t.id, t.z[0]
            )));
        }
        for (j, &x) in t.z.iter().enumerate() {
            if !x.is_finite() {
                return Err(AmtError::NonFiniteValue { id: t.id.clone(), column: format!("z.{}", z_names[j]) });
            }
        }
        for (j, &x) in t.a.iter().enumerate() {
            if !x.is_finite() {
                return Err(AmtError::NonFiniteValue { id: t.id.clone(), column: format!("a.{}", a_names[j]) });
            }
        }
    }
    Ok(())
}

/// One parsed CSV row before dataset-level validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub trial: TrialRecord,
    pub z_names: Vec<String>,
    pub a_names: Vec<String>,
}

/// Build a [`Dataset`] from parsed rows, checking that every row agrees on
/// the moderator and anchor columns and that `z.intercept` comes first.
pub fn validate_dataset(rows: Vec<RawRow>, scale: EffectScale) -> Result<Dataset> {
    let first = rows.first().ok_or(AmtError::EmptyDataset)?;
    let z_names = first.z_names.clone();
    let a_names = first.a_names.clone();
    if z_names.first().map(String::as_str) != Some("intercept") {
        return Err(AmtError::MissingInterceptColumn(
            "first moderator column must be `z.intercept`".into(),
        ));
    }
    let mut trials = Vec::with_capacity(rows.len());
    for row in rows {
        if row.z_names != z_names || row.a_names != a_names {
            return Err(AmtError::DimensionMismatch(format!(
                "row `{}` has different moderator/anchor columns",
                row.trial.id
            )));
        }
        trials.push(row.trial);
    }
    Dataset::new(trials, scale, z_names, a_names)
}

fn parse_num(s: &str, id: &str, col: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| {
        AmtError::Csv(format!("trial `{id}`, column `{col}`: cannot parse `{s}` as a number"))
    })
}

fn parse_count(s: &str, id: &str, col: &str) -> Result<u64> {
    s.trim().parse::<u64>().map_err(|_| {
        AmtError::Csv(format!("trial `{id}`, column `{col}`: cannot parse `{s}` as a count"))
    })
}

/// Parse CSV rows. The header decides between `(y, v)` and count input.
pub fn parse_csv<R: Read>(
    reader: R,
    scale: EffectScale,
    continuity_correction: bool,
) -> Result<Vec<RawRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("trial_id") {
        return Err(AmtError::Csv("first column must be `trial_id`".into()));
    }
    if header.last().map(String::as_str) != Some("regime") {
        return Err(AmtError::Csv("last column must be `regime`".into()));
    }
    let counts = header.get(1).map(String::as_str) == Some("events_t");
    let effect_cols = if counts {
        if header.get(1..5).map(|s| s.to_vec())
            != Some(vec!["events_t".into(), "n_t".into(), "events_c".into(), "n_c".into()])
        {
            return Err(AmtError::Csv("expected events_t, n_t, events_c, n_c".into()));
        }
        4
    } else {
        if header.get(1..3).map(|s| s.to_vec()) != Some(vec!["y".into(), "v".into()]) {
            return Err(AmtError::Csv("expected `y, v` or count columns after trial_id".into()));
        }
        2
    };
    let cov = &header[1 + effect_cols..header.len() - 1];
    let mut z_names = Vec::new();
    let mut a_names = Vec::new();
    for name in cov {
        if let Some(z) = name.strip_prefix("z.") {
            if !a_names.is_empty() {
                return Err(AmtError::Csv(format!("moderator `{name}` after anchor columns")));
            }
            z_names.push(z.to_string());
        } else if let Some(a) = name.strip_prefix("a.") {
            a_names.push(a.to_string());
        } else {
            return Err(AmtError::Csv(format!("unexpected column `{name}`")));
        }
    }

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(AmtError::DimensionMismatch(format!(
                "row {} has {} fields, header has {}",
                rows.len() + 1,
                rec.len(),
                header.len()
            )));
        }
        let id = rec[0].trim().to_string();
        let (y, v) = if counts {
            let et = parse_count(&rec[1], &id, "events_t")?;
            let nt = parse_count(&rec[2], &id, "n_t")?;
            let ec = parse_count(&rec[3], &id, "events_c")?;
            let nc = parse_count(&rec[4], &id, "n_c")?;
            match scale {
                EffectScale::LogOddsRatio => {
                    log_odds_ratio_from_counts(et, nt, ec, nc, continuity_correction)?
                }
                EffectScale::RiskDifference => risk_difference_from_counts(et, nt, ec, nc)?,
            }
        } else {
            (parse_num(&rec[1], &id, "y")?, parse_num(&rec[2], &id, "v")?)
        };
        let base = 1 + effect_cols;
        let z = (0..z_names.len())
            .map(|j| parse_num(&rec[base + j], &id, &z_names[j]))
            .collect::<Result<Vec<_>>>()?;
        let a = (0..a_names.len())
            .map(|j| parse_num(&rec[base + z_names.len() + j], &id, &a_names[j]))
            .collect::<Result<Vec<_>>>()?;
        let regime = rec[rec.len() - 1].trim().to_string();
        rows.push(RawRow {
            trial: TrialRecord { id, y, v, z, a, regime },
            z_names: z_names.clone(),
            a_names: a_names.clone(),
        });
    }
    Ok(rows)
}

/// Target population moderator means, intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProfile {
    pub z_bar: Vec<f64>,
}

impl TargetProfile {
    pub fn new(z_bar: Vec<f64>) -> Result<Self> {
        if z_bar.first() != Some(&1.0) {
            return Err(AmtError::InvalidArgument("target z_bar[0] must be 1".into()));
        }
        if z_bar.iter().any(|x| !x.is_finite()) {
            return Err(AmtError::InvalidArgument("target z_bar must be finite".into()));
        }
        Ok(TargetProfile { z_bar })
    }

    /// Intercept-only target `(1, 0, ..., 0)`.
    pub fn intercept_only(p: usize) -> Self {
        let mut z_bar = vec![0.0; p.max(1)];
        z_bar[0] = 1.0;
        TargetProfile { z_bar }
    }

    pub fn check_dim(&self, p: usize) -> Result<()> {
        if self.z_bar.len() != p {
            return Err(AmtError::DimensionMismatch(format!(
                "target has {} entries, dataset has {p} moderators",
                self.z_bar.len()
            )));
        }
        Ok(())
    }

    /// Parse `{"z_bar": [...]}`.
    pub fn from_json(s: &str) -> Result<Self> {
        let tp: TargetProfile = serde_json::from_str(s)
            .map_err(|e| AmtError::InvalidArgument(format!("target json: {e}")))?;
        TargetProfile::new(tp.z_bar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_or_closed_form() {
        let (y, v) = log_odds_ratio_from_counts(10, 100, 20, 100, false).unwrap();
        assert_abs_diff_eq!(y, (800.0f64 / 1800.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(y, -0.81093, epsilon = 1e-5);
        assert_abs_diff_eq!(v, 1.0 / 10.0 + 1.0 / 90.0 + 1.0 / 20.0 + 1.0 / 80.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.17361, epsilon = 1e-5);

        let (y, _) = log_odds_ratio_from_counts(10, 110, 10, 110, false).unwrap();
        assert_eq!(y, 0.0);
    }

    #[test]
    fn log_or_continuity_correction() {
        assert_eq!(log_odds_ratio_from_counts(0, 50, 5, 50, false), Err(AmtError::ZeroCell));
        let (y, v) = log_odds_ratio_from_counts(0, 50, 5, 50, true).unwrap();
        assert_abs_diff_eq!(y, ((0.5 * 45.5) / (50.5 * 5.5f64)).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(y, -2.50216, epsilon = 1e-5);
        assert_abs_diff_eq!(v, 1.0 / 0.5 + 1.0 / 50.5 + 1.0 / 5.5 + 1.0 / 45.5, epsilon = 1e-12);
        // no zero cell: correction is not applied
        let a = log_odds_ratio_from_counts(10, 100, 20, 100, true).unwrap();
        let b = log_odds_ratio_from_counts(10, 100, 20, 100, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_counts() {
        assert!(matches!(
            log_odds_ratio_from_counts(11, 10, 1, 10, true),
            Err(AmtError::InvalidCounts(_))
        ));
        assert!(matches!(risk_difference_from_counts(1, 10, 11, 10), Err(AmtError::InvalidCounts(_))));
        assert!(matches!(risk_difference_from_counts(0, 0, 1, 10), Err(AmtError::InvalidCounts(_))));
    }

    #[test]
    fn risk_difference_examples() {
        let (y, v) = risk_difference_from_counts(10, 100, 20, 100).unwrap();
        assert_abs_diff_eq!(y, -0.10, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.0025, epsilon = 1e-15);
        let (y, _) = risk_difference_from_counts(7, 40, 7, 40).unwrap();
        assert_eq!(y, 0.0);
        assert_eq!(risk_difference_from_counts(0, 100, 0, 100).unwrap(), (0.0, 0.0));
    }

    fn csv_text(rows: usize, with_zero_v: bool) -> String {
        let mut s = String::from("trial_id,y,v,z.intercept,z.year,z.age,z.dm,a.era,a.region,a.big,regime\n");
        for i in 0..rows {
            let v = if with_zero_v && i == 3 { 0.0 } else { 0.01 + 0.001 * i as f64 };
            s.push_str(&format!(
                "t{i},{},{v},1,{},{},{},{},{},{},{}\n",
                -0.1 + 0.01 * i as f64,
                1990 + i,
                60.0 + 0.3 * i as f64,
                0.2 + 0.01 * (i % 5) as f64,
                i % 2,
                (i / 2) % 2,
                (i / 3) % 2,
                if i % 2 == 0 { "old" } else { "new" }
            ));
        }
        s
    }

    #[test]
    fn validate_pass_through() {
        let ds = Dataset::from_csv_reader(csv_text(24, false).as_bytes(), EffectScale::LogOddsRatio, false)
            .unwrap();
        assert_eq!((ds.k(), ds.p(), ds.q()), (24, 4, 3));
        assert_eq!(ds.regimes(), &["old".to_string(), "new".to_string()]);
        assert_eq!(ds.regime_of()[0], 0);
        assert_eq!(ds.regime_of()[1], 1);
    }

    #[test]
    fn zero_variance_rejected() {
        let err = Dataset::from_csv_reader(csv_text(6, true).as_bytes(), EffectScale::LogOddsRatio, false)
            .unwrap_err();
        assert_eq!(err.kind(), "NonPositiveVariance");
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows = vec![
            TrialRecord { id: "a".into(), y: 0.1, v: 1.0, z: vec![1.0, 2.0], a: vec![], regime: "g".into() },
            TrialRecord { id: "b".into(), y: 0.1, v: 1.0, z: vec![1.0], a: vec![], regime: "g".into() },
        ];
        let err = Dataset::new(rows, EffectScale::RiskDifference, vec!["intercept".into(), "x".into()], vec![])
            .unwrap_err();
        assert_eq!(err.kind(), "DimensionMismatch");

        let text = "trial_id,y,v,z.intercept,regime\na,0.1,1,1,g\nb,0.2,1,1\n";
        let err = Dataset::from_csv_reader(text.as_bytes(), EffectScale::RiskDifference, false).unwrap_err();
        assert_eq!(err.kind(), "DimensionMismatch");
    }

    #[test]
    fn intercept_checked() {
        let text = "trial_id,y,v,z.intercept,regime\na,0.1,1,2,g\n";
        let err = Dataset::from_csv_reader(text.as_bytes(), EffectScale::RiskDifference, false).unwrap_err();
        assert_eq!(err.kind(), "MissingInterceptColumn");
        let text = "trial_id,y,v,z.year,regime\na,0.1,1,1,g\n";
        let err = Dataset::from_csv_reader(text.as_bytes(), EffectScale::RiskDifference, false).unwrap_err();
        assert_eq!(err.kind(), "MissingInterceptColumn");
        let text = "trial_id,y,v,z.intercept,regime\n";
        let err = Dataset::from_csv_reader(text.as_bytes(), EffectScale::RiskDifference, false).unwrap_err();
        assert_eq!(err, AmtError::EmptyDataset);
    }

    #[test]
    fn counts_csv_converted() {
        let text = "trial_id,events_t,n_t,events_c,n_c,z.intercept,regime\nA,10,100,20,100,1,g\nB,0,50,5,50,1,g\n";
        let ds = Dataset::from_csv_reader(text.as_bytes(), EffectScale::LogOddsRatio, true).unwrap();
        assert_abs_diff_eq!(ds.y()[0], -0.81093, epsilon = 1e-5);
        assert_abs_diff_eq!(ds.y()[1], -2.50216, epsilon = 1e-5);
        let err = Dataset::from_csv_reader(text.as_bytes(), EffectScale::LogOddsRatio, false).unwrap_err();
        assert_eq!(err, AmtError::ZeroCell);
    }

    #[test]
    fn anchors_scaled_by_precision_weighted_sd() {
        let ds = Dataset::from_csv_reader(csv_text(24, false).as_bytes(), EffectScale::LogOddsRatio, false)
            .unwrap();
        let d = ds.design();
        let wsum: f64 = d.w.iter().sum();
        for j in 0..ds.q() {
            let col: Vec<f64> = (0..d.k).map(|i| d.row(i)[ds.p() + j]).collect();
            let m: f64 = col.iter().zip(&d.w).map(|(a, w)| a * w).sum::<f64>() / wsum;
            let var: f64 = col.iter().zip(&d.w).map(|(a, w)| w * (a - m).powi(2)).sum::<f64>() / wsum;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
            // no centring: raw zeros stay zero
            for (i, t) in ds.trials().iter().enumerate() {
                if t.a[j] == 0.0 {
                    assert_eq!(d.row(i)[ds.p() + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn csv_round_trip_is_identical() {
        let ds = Dataset::from_csv_reader(csv_text(24, false).as_bytes(), EffectScale::LogOddsRatio, false)
            .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice(), EffectScale::LogOddsRatio, false).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn target_profile_json() {
        let tp = TargetProfile::from_json(r#"{"z_bar": [1, 67, 0.36, 0.82]}"#).unwrap();
        assert_eq!(tp.z_bar, vec![1.0, 67.0, 0.36, 0.82]);
        assert!(TargetProfile::from_json(r#"{"z_bar": [2, 67]}"#).is_err());
        assert!(tp.check_dim(3).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn log_or_antisymmetric(nt in 1u64..500, nc in 1u64..500, ft in 0.0f64..1.0, fc in 0.0f64..1.0) {
                let et = ((nt as f64) * ft).floor() as u64;
                let ec = ((nc as f64) * fc).floor() as u64;
                let (y1, v1) = log_odds_ratio_from_counts(et, nt, ec, nc, true).unwrap();
                let (y2, v2) = log_odds_ratio_from_counts(ec, nc, et, nt, true).unwrap();
                prop_assert!((y1 + y2).abs() <= 1e-12 * (1.0 + y1.abs()));
                prop_assert!((v1 - v2).abs() <= 1e-12 * v1);
            }

            #[test]
            fn rd_antisymmetric(nt in 1u64..500, nc in 1u64..500, ft in 0.0f64..1.0, fc in 0.0f64..1.0) {
                let et = ((nt as f64) * ft).floor() as u64;
                let ec = ((nc as f64) * fc).floor() as u64;
                let (y1, v1) = risk_difference_from_counts(et, nt, ec, nc).unwrap();
                let (y2, v2) = risk_difference_from_counts(ec, nc, et, nt).unwrap();
                prop_assert_eq!(y1, -y2);
                prop_assert!((v1 - v2).abs() <= 1e-15);
            }

            #[test]
            fn csv_round_trip(ys in proptest::collection::vec(-5.0f64..5.0, 1..30),
                              vs in proptest::collection::vec(1e-6f64..10.0, 30),
                              xs in proptest::collection::vec(-100.0f64..100.0, 30)) {
                let trials: Vec<TrialRecord> = ys.iter().enumerate().map(|(i, &y)| TrialRecord {
                    id: format!("s{i}"), y, v: vs[i], z: vec![1.0, xs[i]], a: vec![xs[(i + 7) % 30]],
                    regime: format!("r{}", i % 3),
                }).collect();
                let ds = Dataset::new(trials, EffectScale::RiskDifference,
                    vec!["intercept".into(), "x".into()], vec!["era".into()]).unwrap();
                let mut buf = Vec::new();
                ds.write_csv(&mut buf).unwrap();
                let back = Dataset::from_csv_reader(buf.as_slice(), EffectScale::RiskDifference, false).unwrap();
                prop_assert_eq!(ds, back);
            }
        }
    }
}
