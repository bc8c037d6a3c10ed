use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use amtma::classical::ClassicalResult;
use amtma::inference::IntervalEstimate;
use amtma::simulation::SimConstants;
use amtma::stats::z_critical;
use amtma::{fmt_f64, Dataset};

/// Everything needed to reproduce an output file.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub constants_version: Option<String>,
    pub constants_checksum: Option<String>,
    pub version: String,
    pub duration_seconds: f64,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, config: &T, seed: u64, constants: Option<&SimConstants>, started: Instant) -> Self {
        Manifest {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            constants_version: constants.map(|c| c.version.clone()),
            constants_checksum: constants.map(SimConstants::checksum),
            version: amtma::VERSION.to_string(),
            duration_seconds: started.elapsed().as_secs_f64(),
        }
    }
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Tidy forest-plot rows: one per trial, then one per method.
pub fn write_forest_csv(
    path: &Path,
    ds: &Dataset,
    classical: &[ClassicalResult],
    amt_theta: f64,
    amt_interval: Option<&IntervalEstimate>,
) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["kind", "label", "estimate", "ci_lo", "ci_hi", "weight", "regime"])?;
    let z = z_critical(0.95);
    let wsum: f64 = ds.weights().iter().sum();
    for (t, &wt) in ds.trials().iter().zip(ds.weights()) {
        let half = z * t.v.sqrt();
        w.write_record([
            "trial".to_string(),
            t.id.clone(),
            fmt_f64(t.y),
            fmt_f64(t.y - half),
            fmt_f64(t.y + half),
            fmt_f64(wt / wsum),
            t.regime.clone(),
        ])?;
    }
    for r in classical {
        w.write_record([
            "summary".to_string(),
            r.method.label().to_string(),
            fmt_f64(r.theta_hat),
            fmt_f64(r.ci_lo),
            fmt_f64(r.ci_hi),
            "NA".into(),
            String::new(),
        ])?;
    }
    let (lo, hi) = amt_interval.map_or((f64::NAN, f64::NAN), |iv| (iv.lo, iv.hi));
    w.write_record([
        "summary".to_string(),
        "AMT".into(),
        fmt_f64(amt_theta),
        fmt_f64(lo),
        fmt_f64(hi),
        "NA".into(),
        String::new(),
    ])?;
    w.flush()?;
    Ok(())
}
