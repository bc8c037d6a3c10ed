use std::fs;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use amtma::amt::{fit_for_target, AmtFitResult};
use amtma::classical::{self, ClassicalResult};
use amtma::diagnostics::{diagnose as run_diagnostics, DiagnosticsResult};
use amtma::inference::{self, BootstrapOptions, IntervalEstimate, LosoOptions, TuningGrid, TuningSelection};
use amtma::simulation::{self, CoverageOptions, Scenario, SimConstants, StudyOptions};
use amtma::{AmtError, Dataset, Hyperparams, TargetProfile};

use crate::output::{write_forest_csv, write_json, Manifest};
use crate::{BootstrapArgs, DataArgs, DiagnoseArgs, FitArgs, ModelArgs, SimulateArgs, TuneArgs};

fn load(data: &DataArgs) -> Result<Dataset> {
    Ok(Dataset::from_csv_path(&data.data, data.scale.into(), data.continuity_correction)?)
}

fn target(model: &ModelArgs, ds: &Dataset) -> Result<TargetProfile> {
    let tp = match &model.target {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TargetProfile::from_json(&text)?
        }
        None if ds.p() == 1 => TargetProfile::intercept_only(1),
        None => {
            return Err(AmtError::InvalidArgument(format!(
                "--target is required when the data has {} moderator columns",
                ds.p()
            ))
            .into())
        }
    };
    tp.check_dim(ds.p())?;
    Ok(tp)
}

fn hyperparams(model: &ModelArgs, ds: &Dataset) -> Result<Hyperparams> {
    let d = Hyperparams::for_scale(ds.scale());
    let hp = Hyperparams {
        rho: model.rho.unwrap_or(d.rho),
        alpha: model.alpha.unwrap_or(d.alpha),
        lambda_gamma: model.lambda_gamma.unwrap_or(d.lambda_gamma),
        lambda_r: model.lambda_r.unwrap_or(d.lambda_r),
        delta: model.delta.unwrap_or(d.delta),
        tau_threshold: model.tau.unwrap_or(d.tau_threshold),
        minority_frac: model.minority_frac.unwrap_or(d.minority_frac),
    };
    hp.validate()?;
    Ok(hp)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(AmtError::InvalidArgument(format!("--level must lie in (0, 1), got {level}")).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct DataSummary {
    k: usize,
    p: usize,
    q: usize,
    g: usize,
    scale: &'static str,
    moderators: Vec<String>,
    anchors: Vec<String>,
    regimes: Vec<String>,
}

impl DataSummary {
    fn of(ds: &Dataset) -> Self {
        DataSummary {
            k: ds.k(),
            p: ds.p(),
            q: ds.q(),
            g: ds.g(),
            scale: ds.scale().as_str(),
            moderators: ds.z_names().to_vec(),
            anchors: ds.a_names().to_vec(),
            regimes: ds.regimes().to_vec(),
        }
    }
}

#[derive(Serialize)]
struct AmtRow {
    hyperparams: Hyperparams,
    theta_target: f64,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    gamma_original: Vec<f64>,
    scale_s: f64,
    regime_losses: Vec<RegimeLoss>,
    objective_value: f64,
    warm_start_objective: f64,
    converged: bool,
    n_iterations: amtma::amt::StageIterations,
    interval: Option<IntervalEstimate>,
}

#[derive(Serialize)]
struct RegimeLoss {
    regime: String,
    loss: f64,
}

impl AmtRow {
    fn new(ds: &Dataset, hp: Hyperparams, fit: AmtFitResult, interval: Option<IntervalEstimate>) -> Self {
        AmtRow {
            hyperparams: hp,
            theta_target: fit.theta_target.unwrap_or(f64::NAN),
            regime_losses: ds
                .regimes()
                .iter()
                .zip(&fit.regime_losses)
                .map(|(r, &loss)| RegimeLoss { regime: r.clone(), loss })
                .collect(),
            beta: fit.beta,
            gamma: fit.gamma,
            gamma_original: fit.gamma_original,
            scale_s: fit.scale_s,
            objective_value: fit.objective_value,
            warm_start_objective: fit.warm_start_objective,
            converged: fit.converged,
            n_iterations: fit.n_iterations,
            interval,
        }
    }
}

#[derive(Serialize)]
struct FitOutput {
    manifest: Manifest,
    data: DataSummary,
    target: TargetProfile,
    classical: Vec<ClassicalResult>,
    amt: AmtRow,
    diagnostics: DiagnosticsResult,
}

fn classical_rows(ds: &Dataset, tp: &TargetProfile, level: f64) -> Result<Vec<ClassicalResult>> {
    let mut rows = vec![classical::fixed_effect(ds, level)];
    if ds.k() >= 2 {
        rows.push(classical::dersimonian_laird(ds, level)?);
        rows.push(classical::paule_mandel(ds, level)?);
    }
    // moderator regression needs more trials than moderators
    if ds.k() > ds.p() {
        rows.push(classical::wls_meta_regression(ds, tp, level)?);
    }
    Ok(rows)
}

fn bootstrap_options(reps: usize, level: f64, reselect: bool, seed: u64) -> BootstrapOptions {
    BootstrapOptions {
        replicates: reps,
        level,
        reselect: reselect.then(|| (TuningGrid::default(), LosoOptions { seed, ..LosoOptions::default() })),
        seed,
    }
}

pub fn fit(a: FitArgs, started: Instant) -> Result<()> {
    check_level(a.level)?;
    let ds = load(&a.data)?;
    let tp = target(&a.model, &ds)?;
    let hp = hyperparams(&a.model, &ds)?;
    let classical = classical_rows(&ds, &tp, a.level)?;
    let fit = fit_for_target(&ds, &hp, &tp)?;
    let theta = fit.theta_target.unwrap_or(f64::NAN);
    let interval = if a.bootstrap > 0 {
        let opts = bootstrap_options(a.bootstrap, a.level, a.reselect, a.seed);
        Some(inference::perturbation_bootstrap(&ds, &hp, &tp, &opts)?)
    } else {
        None
    };
    let diagnostics = run_diagnostics(&ds, theta, &tp, &hp)?;
    if let Some(path) = &a.forest {
        write_forest_csv(path, &ds, &classical, theta, interval.as_ref())?;
    }
    let out = FitOutput {
        manifest: Manifest::new("fit", &a, a.seed, None, started),
        data: DataSummary::of(&ds),
        target: tp,
        classical,
        amt: AmtRow::new(&ds, hp, fit, interval),
        diagnostics,
    };
    write_json(a.out.as_deref(), &out)
}

#[derive(Serialize)]
struct BootstrapOutput {
    manifest: Manifest,
    interval: IntervalEstimate,
}

pub fn bootstrap(a: BootstrapArgs, started: Instant) -> Result<()> {
    check_level(a.level)?;
    let ds = load(&a.data)?;
    let tp = target(&a.model, &ds)?;
    let hp = hyperparams(&a.model, &ds)?;
    let opts = bootstrap_options(a.replicates, a.level, a.reselect, a.seed);
    let interval = inference::perturbation_bootstrap(&ds, &hp, &tp, &opts)?;
    let out = BootstrapOutput { manifest: Manifest::new("bootstrap", &a, a.seed, None, started), interval };
    write_json(a.out.as_deref(), &out)
}

#[derive(Serialize)]
struct DiagnoseOutput {
    manifest: Manifest,
    theta_target: f64,
    diagnostics: DiagnosticsResult,
}

pub fn diagnose(a: DiagnoseArgs, started: Instant) -> Result<()> {
    let ds = load(&a.data)?;
    let tp = target(&a.model, &ds)?;
    let hp = hyperparams(&a.model, &ds)?;
    let theta = fit_for_target(&ds, &hp, &tp)?.theta_target.unwrap_or(f64::NAN);
    let diagnostics = run_diagnostics(&ds, theta, &tp, &hp)?;
    let out = DiagnoseOutput { manifest: Manifest::new("diagnose", &a, 0, None, started), theta_target: theta, diagnostics };
    write_json(a.out.as_deref(), &out)
}

fn parse_grid(spec: &str) -> Result<TuningGrid> {
    if spec == "default" {
        return Ok(TuningGrid::default());
    }
    let mut grid = TuningGrid { rho: Vec::new(), lambda_gamma: Vec::new() };
    for part in spec.split(';') {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| AmtError::InvalidArgument(format!("grid entry `{part}` lacks `=`")))?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| AmtError::InvalidArgument(format!("grid entry `{part}`: {e}")))?;
        match key.trim() {
            "rho" => grid.rho = values,
            "lambda" | "lambda_gamma" => grid.lambda_gamma = values,
            other => return Err(AmtError::InvalidArgument(format!("unknown grid key `{other}`")).into()),
        }
    }
    let d = TuningGrid::default();
    if grid.rho.is_empty() {
        grid.rho = d.rho;
    }
    if grid.lambda_gamma.is_empty() {
        grid.lambda_gamma = d.lambda_gamma;
    }
    Ok(grid)
}

#[derive(Serialize)]
struct TuneOutput {
    manifest: Manifest,
    grid: TuningGrid,
    selection: TuningSelection,
}

pub fn tune(a: TuneArgs, started: Instant) -> Result<()> {
    let ds = load(&a.data)?;
    let hp = hyperparams(&a.model, &ds)?;
    let grid = parse_grid(&a.grid)?;
    let opts = LosoOptions { quantile: a.quantile, one_se: a.one_se, resamples: a.resamples, seed: a.seed };
    let selection = inference::loso_select(&ds, &grid, &hp, &opts).map_err(|e| match e {
        AmtError::TooFewTrials { needed, found } => anyhow::Error::new(e).context(format!(
            "leave-one-study-out tuning needs at least {needed} trials but the data has {found}; \
             with this few trials keep the default rho and lambda_gamma fixed and report sensitivity instead"
        )),
        other => other.into(),
    })?;
    let out = TuneOutput { manifest: Manifest::new("tune", &a, a.seed, None, started), grid, selection };
    write_json(a.out.as_deref(), &out)
}

pub fn simulate(a: SimulateArgs, workers: usize, started: Instant) -> Result<()> {
    let constants = match &a.constants {
        Some(p) => SimConstants::from_path(p)?,
        None => SimConstants::embedded(),
    };
    let scenarios = Scenario::parse_list(&a.scenario)?;
    let mut opts = StudyOptions::new(scenarios, a.reps, a.seed);
    opts.k_trials = Some(a.trials);
    opts.workers = Some(workers);
    if a.coverage {
        opts.coverage = Some(CoverageOptions { reps: a.coverage_reps, boot: a.coverage_boot, ..CoverageOptions::default() });
    }
    let study = simulation::run_study(&constants, &opts)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let create = |name: &str| {
        let path = a.out.join(name);
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))
    };
    simulation::write_metrics_csv(&study.metrics, create("metrics.csv")?)?;
    if let Some(cov) = &study.coverage {
        simulation::write_coverage_csv(cov, create("coverage.csv")?)?;
    }
    if a.raw {
        simulation::write_raw_csv(&study.results, create("raw.csv")?)?;
    }
    let manifest = Manifest::new("simulate", &a, a.seed, Some(&constants), started);
    write_json(Some(&a.out.join("manifest.json")), &manifest)
}
