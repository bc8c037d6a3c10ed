//! Stable transport meta-analysis.
//!
//! Classical pooled estimators, the blended nuisance-anchor estimator with a
//! softmax regime-robust loss, sign-stability and abstention diagnostics,
//! perturbation-bootstrap inference, leave-one-study-out tuning, and a
//! seeded six-scenario simulation harness.

pub mod amt;
pub mod classical;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod simulation;
pub mod stats;

pub use amt::{fit_amt, stable_target_effect, AmtFitResult, Hyperparams};
pub use classical::{ClassicalMethod, ClassicalResult};
pub use data::{Dataset, EffectScale, TargetProfile, TrialRecord};
pub use diagnostics::{DiagnosticsResult, SignStability};
pub use error::{AmtError, Result};
pub use inference::{IntervalEstimate, TuningSelection};

/// Crate version embedded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Format a float with 17 significant digits (round-trip exact). Non-finite
/// values are written as `NA`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "NA".to_string()
    }
}
