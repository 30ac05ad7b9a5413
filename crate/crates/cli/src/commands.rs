use std::path::{Path, PathBuf};

use lbc_core::benchmark::{metrics_rows, run_benchmark, BenchmarkConfig, Method, METRICS_HEADER};
use lbc_core::data::Dataset;
use lbc_core::diagnostics::{balance_report, evaluation_bandwidths, evaluation_grid, hosmer_lemeshow_table};
use lbc_core::estimators::{ate_hajek, bootstrap_se, estimate_report, ipw_weights, truncate_weights};
use lbc_core::io::{
    fmt_f64, ingest_csv, read_scores_csv, write_csv, write_dataset_csv, write_json, write_scores_csv, ColumnRoles,
};
use lbc_core::simulate::{ks_generate, ssmr_generate, Scenario};
use lbc_core::train::{fit_propensity, TrainConfig};
use lbc_core::{Error, Result};
use serde::Serialize;

use crate::args::{BenchmarkArgs, DiagnoseArgs, EstimateArgs, FitArgs, InputArgs, SimulateArgs, TrainArgs};

/// Repetitions run by `benchmark --extended`.
pub const EXTENDED_REPS: usize = 100;

#[derive(Serialize)]
struct Truth<'a> {
    scenario: Scenario,
    n: usize,
    seed: u64,
    estimand: f64,
    true_propensity: &'a [f64],
}

fn roles(input: &InputArgs) -> ColumnRoles {
    ColumnRoles {
        treatment: input.treatment.clone(),
        outcome: Some(input.outcome.clone()),
        id: Some(input.id.clone()),
        covariates: input.covariates.clone(),
    }
}

/// Reads the input; a missing outcome column is tolerated unless `need_outcome`.
fn load(input: &InputArgs, need_outcome: bool) -> Result<Dataset> {
    if !input.input.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("input file {} not found", input.input.display()),
        )));
    }
    let mut r = roles(input);
    if !need_outcome {
        let header = std::fs::read_to_string(&input.input)?
            .lines()
            .next()
            .unwrap_or_default()
            .to_string();
        if !header.split(',').any(|h| h.trim() == input.outcome) {
            r.outcome = None;
        }
    }
    ingest_csv(&input.input, &r)
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig::with_preset(args.loss.into(), args.preset.into());
    if let Some(lr) = args.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(h) = args.hidden {
        config.hidden = h;
    }
    config.epochs = args.epochs;
    config.lambda = args.lambda;
    config.grid_size = args.grid_size;
    config.span = args.span;
    config.sigma_mode = args.sigma_mode.into();
    config.seed = args.seed;
    config.validate()?;
    Ok(config)
}

pub fn simulate(args: &SimulateArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let scenario: Scenario = args.scenario.into();
    let sim = match scenario {
        Scenario::KsCorrect | Scenario::KsMis => ks_generate(args.n, args.seed, scenario == Scenario::KsMis)?,
        Scenario::SsmrCorrect | Scenario::SsmrMis => {
            ssmr_generate(args.n, args.seed, scenario == Scenario::SsmrMis)?
        }
    };
    let data_path = out.join("simulated.csv");
    let truth_path = out.join("truth.json");
    write_dataset_csv(&data_path, &sim.data)?;
    write_json(
        &truth_path,
        &Truth {
            scenario,
            n: args.n,
            seed: args.seed,
            estimand: sim.estimand,
            true_propensity: &sim.true_propensity,
        },
    )?;
    Ok(vec![data_path, truth_path])
}

pub fn fit(args: &FitArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let config = train_config(&args.train)?;
    let data = load(&args.input, false)?;
    let fit = fit_propensity(&data, &config)?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    let fit_path = out.join("fit.json");
    let scores_path = out.join("scores.csv");
    write_json(&fit_path, &fit)?;
    write_scores_csv(&scores_path, &data, &fit.scores)?;
    Ok(vec![fit_path, scores_path])
}

pub fn estimate(args: &EstimateArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let data = load(&args.input, true)?;
    let scores = read_scores_csv(&args.scores, &data)?;
    let mut report = estimate_report(&data, &scores, args.truncate)?;
    if args.bootstrap > 0 {
        let mut config = train_config(&args.train)?;
        if let Some(e) = args.bootstrap_epochs {
            config.epochs = e;
        }
        config.validate()?;
        let truncate = args.truncate;
        let refit = |sample: &Dataset, seed: u64| -> Result<f64> {
            let fit = fit_propensity(sample, &TrainConfig { seed, ..config.clone() })?;
            let mut w = ipw_weights(&fit.scores, sample.treatment())?;
            if let Some(q) = truncate {
                w = truncate_weights(&w, q)?;
            }
            let y = sample.outcome().expect("outcome checked at load");
            ate_hajek(y, sample.treatment(), &w)
        };
        report.bootstrap_se = Some(bootstrap_se(&data, refit, args.bootstrap, args.train.seed)?);
        report.bootstrap_reps = args.bootstrap;
        report.bootstrap_epochs = Some(config.epochs);
    }
    let path = out.join("estimate.json");
    write_json(&path, &report)?;
    Ok(vec![path])
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn diagnose(args: &DiagnoseArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let data = load(&args.input, false)?;
    let scores = read_scores_csv(&args.scores, &data)?;
    if args.points == 0 {
        return Err(Error::Domain("at least one evaluation point is required".into()));
    }
    let p0 = evaluation_grid(args.points);
    let bw = evaluation_bandwidths(&scores, args.grid_size, args.span, &p0)?;
    let report = balance_report(&data, &scores, &p0, &bw)?;
    let table = hosmer_lemeshow_table(&scores, data.treatment())?;

    let header = ["covariate", "measure", "p0", "bandwidth", "value"].map(String::from);
    let mut rows = Vec::new();
    for (c, name) in report.covariates.iter().enumerate() {
        rows.push(vec![name.clone(), "gsd".into(), String::new(), String::new(), fmt_f64(report.gsd[c])]);
        for (i, v) in report.lsd[c].iter().enumerate() {
            rows.push(vec![name.clone(), "lsd".into(), fmt_f64(report.p0[i]), fmt_f64(report.bandwidths[i]), opt(*v)]);
        }
    }
    let balance_csv = out.join("balance.csv");
    write_csv(&balance_csv, &header, &rows)?;
    let balance_json = out.join("balance.json");
    write_json(&balance_json, &report)?;

    let header = ["lower", "upper", "count", "mean_score", "treated_proportion"].map(String::from);
    let rows: Vec<Vec<String>> = table
        .bins
        .iter()
        .map(|b| {
            vec![fmt_f64(b.lower), fmt_f64(b.upper), b.count.to_string(), opt(b.mean_score), opt(b.treated_proportion)]
        })
        .collect();
    let calibration_csv = out.join("calibration.csv");
    write_csv(&calibration_csv, &header, &rows)?;
    Ok(vec![balance_csv, balance_json, calibration_csv])
}

pub fn benchmark(args: &BenchmarkArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let scenario: Scenario = args.scenario.into();
    let methods = args
        .methods
        .iter()
        .map(|m| m.trim().parse::<Method>())
        .collect::<Result<Vec<_>>>()?;
    let reps = if args.extended { EXTENDED_REPS } else { args.reps };
    let config = BenchmarkConfig::for_scenario(scenario, args.n).with_epochs(args.epochs);
    config.lbc.validate()?;
    let report = run_benchmark(scenario, &methods, reps, args.n, args.seed, &config)?;
    let csv_path = out.join("metrics.csv");
    let json_path = out.join("metrics.json");
    write_csv(&csv_path, &METRICS_HEADER.map(String::from), &metrics_rows(&report))?;
    write_json(&json_path, &report)?;
    Ok(vec![csv_path, json_path])
}
