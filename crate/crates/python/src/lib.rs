//! Python bindings.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use amtma_core::amt::fit_for_target;
use amtma_core::classical::{self, ClassicalResult};
use amtma_core::diagnostics;
use amtma_core::inference::{perturbation_bootstrap, BootstrapOptions};
use amtma_core::simulation::{self, Scenario, SimConstants, StudyOptions};
use amtma_core::{AmtError, EffectScale, Hyperparams, TargetProfile, TrialRecord};

create_exception!(amtma, AmtmaError, PyException);

fn err(e: AmtError) -> PyErr {
    AmtmaError::new_err(format!("{}: {e}", e.kind()))
}

fn parse_scale(scale: &str) -> PyResult<EffectScale> {
    EffectScale::parse(scale).map_err(err)
}

/// A validated set of trials.
#[pyclass(module = "amtma", frozen)]
struct Dataset {
    inner: amtma_core::Dataset,
}

#[pymethods]
impl Dataset {
    /// Build from per-trial arrays. `z` rows start with the intercept 1.
    #[new]
    #[pyo3(signature = (y, v, z, a, regimes, z_names, a_names, scale = "logor", ids = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        y: Vec<f64>,
        v: Vec<f64>,
        z: Vec<Vec<f64>>,
        a: Vec<Vec<f64>>,
        regimes: Vec<String>,
        z_names: Vec<String>,
        a_names: Vec<String>,
        scale: &str,
        ids: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let k = y.len();
        if [v.len(), z.len(), a.len(), regimes.len()].iter().any(|&n| n != k) {
            return Err(err(AmtError::DimensionMismatch("y, v, z, a and regimes must have equal length".into())));
        }
        let ids = ids.unwrap_or_else(|| (0..k).map(|i| format!("t{}", i + 1)).collect());
        if ids.len() != k {
            return Err(err(AmtError::DimensionMismatch("ids must match y in length".into())));
        }
        let trials = (0..k)
            .map(|i| TrialRecord {
                id: ids[i].clone(),
                y: y[i],
                v: v[i],
                z: z[i].clone(),
                a: a[i].clone(),
                regime: regimes[i].clone(),
            })
            .collect();
        let inner = amtma_core::Dataset::new(trials, parse_scale(scale)?, z_names, a_names).map_err(err)?;
        Ok(Dataset { inner })
    }

    /// Read the trial-level CSV format.
    #[staticmethod]
    #[pyo3(signature = (path, scale = "logor", continuity_correction = false))]
    fn from_csv(path: &str, scale: &str, continuity_correction: bool) -> PyResult<Self> {
        let inner = amtma_core::Dataset::from_csv_path(path, parse_scale(scale)?, continuity_correction).map_err(err)?;
        Ok(Dataset { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn regimes(&self) -> Vec<String> {
        self.inner.regimes().to_vec()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.k()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(k={}, p={}, q={}, regimes={}, scale={})",
            self.inner.k(),
            self.inner.p(),
            self.inner.q(),
            self.inner.g(),
            self.inner.scale().as_str()
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn hyperparams(
    ds: &amtma_core::Dataset,
    rho: Option<f64>,
    alpha: Option<f64>,
    lambda_gamma: Option<f64>,
    lambda_r: Option<f64>,
    delta: Option<f64>,
    tau: Option<f64>,
    minority_frac: Option<f64>,
) -> PyResult<Hyperparams> {
    let d = Hyperparams::for_scale(ds.scale());
    let hp = Hyperparams {
        rho: rho.unwrap_or(d.rho),
        alpha: alpha.unwrap_or(d.alpha),
        lambda_gamma: lambda_gamma.unwrap_or(d.lambda_gamma),
        lambda_r: lambda_r.unwrap_or(d.lambda_r),
        delta: delta.unwrap_or(d.delta),
        tau_threshold: tau.unwrap_or(d.tau_threshold),
        minority_frac: minority_frac.unwrap_or(d.minority_frac),
    };
    hp.validate().map_err(err)?;
    Ok(hp)
}

fn target(ds: &amtma_core::Dataset, z_bar: Option<Vec<f64>>) -> PyResult<TargetProfile> {
    let tp = match z_bar {
        Some(z) => TargetProfile::new(z).map_err(err)?,
        None => TargetProfile::intercept_only(ds.p()),
    };
    tp.check_dim(ds.p()).map_err(err)?;
    Ok(tp)
}

fn classical_dict<'py>(py: Python<'py>, r: &ClassicalResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("method", r.method.label())?;
    d.set_item("theta_hat", r.theta_hat)?;
    d.set_item("se", r.se)?;
    d.set_item("ci_lo", r.ci_lo)?;
    d.set_item("ci_hi", r.ci_hi)?;
    d.set_item("tau2", r.tau2)?;
    d.set_item("q_stat", r.q_stat)?;
    d.set_item("beta", r.beta.clone())?;
    Ok(d)
}

/// Fixed effect, DerSimonian-Laird and Paule-Mandel pools, plus the
/// moderator regression when a target is given.
#[pyfunction(name = "classical")]
#[pyo3(signature = (ds, target_z = None, level = 0.95))]
fn classical_pools<'py>(
    py: Python<'py>,
    ds: &Dataset,
    target_z: Option<Vec<f64>>,
    level: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let ds = &ds.inner;
    let mut rows = vec![classical::fixed_effect(ds, level)];
    if ds.k() >= 2 {
        rows.push(classical::dersimonian_laird(ds, level).map_err(err)?);
        rows.push(classical::paule_mandel(ds, level).map_err(err)?);
    }
    if target_z.is_some() && ds.k() > ds.p() {
        rows.push(classical::wls_meta_regression(ds, &target(ds, target_z)?, level).map_err(err)?);
    }
    rows.iter().map(|r| classical_dict(py, r)).collect()
}

/// Fit the anchored estimator and return coefficients and the target effect.
#[pyfunction]
#[pyo3(signature = (ds, target_z = None, *, rho = None, alpha = None, lambda_gamma = None, lambda_r = None))]
fn fit<'py>(
    py: Python<'py>,
    ds: &Dataset,
    target_z: Option<Vec<f64>>,
    rho: Option<f64>,
    alpha: Option<f64>,
    lambda_gamma: Option<f64>,
    lambda_r: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = &ds.inner;
    let tp = target(ds, target_z)?;
    let hp = hyperparams(ds, rho, alpha, lambda_gamma, lambda_r, None, None, None)?;
    let f = py.detach(|| fit_for_target(ds, &hp, &tp)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("theta_target", f.theta_target)?;
    d.set_item("beta", f.beta)?;
    d.set_item("gamma", f.gamma)?;
    d.set_item("gamma_original", f.gamma_original)?;
    d.set_item("scale_s", f.scale_s)?;
    d.set_item("regime_losses", f.regime_losses)?;
    d.set_item("objective_value", f.objective_value)?;
    d.set_item("converged", f.converged)?;
    Ok(d)
}

/// Perturbation-bootstrap interval for the target effect.
#[pyfunction]
#[pyo3(signature = (ds, target_z = None, *, replicates = 500, level = 0.95, seed = 0, rho = None, lambda_gamma = None))]
#[allow(clippy::too_many_arguments)]
fn bootstrap<'py>(
    py: Python<'py>,
    ds: &Dataset,
    target_z: Option<Vec<f64>>,
    replicates: usize,
    level: f64,
    seed: u64,
    rho: Option<f64>,
    lambda_gamma: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = &ds.inner;
    let tp = target(ds, target_z)?;
    let hp = hyperparams(ds, rho, None, lambda_gamma, None, None, None, None)?;
    let opts = BootstrapOptions { level, ..BootstrapOptions::new(replicates, seed) };
    let iv = py.detach(|| perturbation_bootstrap(ds, &hp, &tp, &opts)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("point", iv.point)?;
    d.set_item("lo", iv.lo)?;
    d.set_item("hi", iv.hi)?;
    d.set_item("level", iv.level)?;
    d.set_item("b_effective", iv.b_effective)?;
    d.set_item("point_outside", iv.point_outside)?;
    Ok(d)
}

/// Sign stability, abstention and per-regime effects at `theta`.
#[pyfunction]
#[pyo3(signature = (ds, theta, target_z = None, *, delta = None, tau = None, minority_frac = None))]
fn diagnose<'py>(
    py: Python<'py>,
    ds: &Dataset,
    theta: f64,
    target_z: Option<Vec<f64>>,
    delta: Option<f64>,
    tau: Option<f64>,
    minority_frac: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = &ds.inner;
    let tp = target(ds, target_z)?;
    let hp = hyperparams(ds, None, None, None, None, delta, tau, minority_frac)?;
    let r = diagnostics::diagnose(ds, theta, &tp, &hp).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("ss_trial", r.ss_trial.value())?;
    d.set_item("abstain", r.abstain)?;
    d.set_item("informative_weight_pos", r.informative_weight_pos)?;
    d.set_item("informative_weight_neg", r.informative_weight_neg)?;
    let regimes: Vec<(String, usize, f64)> =
        r.regime_effects.iter().map(|e| (e.regime.clone(), e.k, e.theta)).collect();
    d.set_item("regime_effects", regimes)?;
    Ok(d)
}

/// Run the simulation study and return `metrics.csv` as text.
#[pyfunction]
#[pyo3(signature = (scenarios = "all", reps = 500, seed = 20240601, workers = None))]
fn simulate(py: Python<'_>, scenarios: &str, reps: usize, seed: u64, workers: Option<usize>) -> PyResult<String> {
    let list = Scenario::parse_list(scenarios).map_err(err)?;
    let mut opts = StudyOptions::new(list, reps, seed);
    opts.workers = workers;
    let out = py.detach(|| simulation::run_study(&SimConstants::embedded(), &opts)).map_err(err)?;
    let mut buf = Vec::new();
    simulation::write_metrics_csv(&out.metrics, &mut buf).map_err(err)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

#[pymodule]
fn amtma(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", amtma_core::VERSION)?;
    m.add("AmtmaError", m.py().get_type::<AmtmaError>())?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(classical_pools, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
