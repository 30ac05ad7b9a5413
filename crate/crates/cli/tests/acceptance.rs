//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Run with `cargo test -p lbc-cli --test acceptance`; pass criterion numbers
//! after `--` to run a subset, e.g. `-- 1 2 9`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use lbc_core::benchmark::{run_benchmark, BenchmarkConfig, Method};
use lbc_core::data::Dataset;
use lbc_core::diagnostics::{
    balance_report, evaluation_bandwidths, evaluation_grid, gsd, hosmer_lemeshow_table, lsd_curve,
};
use lbc_core::estimators::{ate_hajek, ate_ht, effective_sample_size, ipw_weights};
use lbc_core::kernel::LocalGrid;
use lbc_core::objective::{compute_d1k, compute_d2k, compute_q1, compute_q2, compute_sigma_k, SigmaMode};
use lbc_core::simulate::{ks_generate, ssmr_generate, Scenario};
use lbc_core::train::{fit_propensity, preliminary_scores, LossKind, Preset, TrainConfig};

/// Master seed of every Monte Carlo criterion.
const SEED: u64 = 20240101;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Relative error, falling back to absolute for entries near zero.
fn gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut track = |a: f64, b: f64| worst = worst.max(gap(a, b));
    for (n, m, k, seed) in [(20, 2, 3, 1u64), (35, 3, 5, 2), (50, 3, 4, 3), (12, 1, 1, 4), (48, 2, 5, 5)] {
        let (d, p) = random_instance(n, m, seed);
        let grid = LocalGrid::from_scores(k, 0.5, &p).unwrap();
        for i in 0..grid.len() {
            let (c, h) = (grid.centers()[i], grid.bandwidths()[i]);
            for (a, b) in compute_d1k(&d, &p, &grid, i).unwrap().iter().zip(d1(&d, &p, c, h)) {
                track(*a, b);
            }
            let s = compute_sigma_k(&d, &p, &grid, i).unwrap();
            let e = sigma(&d, &p, c, h);
            for a in 0..d.dim() {
                for b in 0..d.dim() {
                    track(s[(a, b)], e[a][b]);
                }
            }
            track(compute_d2k(&d, &p, &grid, i).unwrap(), d2(&d, &p, c, h));
        }
        track(compute_q1(&d, &p, &grid).unwrap(), q1(&d, &p, &grid));
        track(compute_q2(&d, &p, &grid).unwrap(), q2(&d, &p, &grid));

        let t = d.treatment();
        let y = d.outcome().unwrap();
        let w = ipw_weights(&p, t).unwrap();
        track(ate_hajek(y, t, &w).unwrap(), hajek(y, t, &w));
        track(ate_ht(y, t, &w, d.n()).unwrap(), ht(y, t, &w));
        let (m1, m0) = effective_sample_size(t, &w).unwrap();
        track(m1, ess(t, &w, 1));
        track(m0, ess(t, &w, 0));
        for c in 1..d.dim() {
            let z: Vec<f64> = d.design().column(c).iter().copied().collect();
            track(gsd(&z, t, &w).unwrap(), smd(&z, t, &w));
            for p0 in [0.3, 0.5, 0.7] {
                if let Some(v) = lsd_curve(&z, t, &p, &[p0], &[0.25]).unwrap()[0] {
                    track(v, lsd(&z, t, &p, p0, 0.25));
                }
            }
        }
    }
    outcome(worst < 1e-10, format!("max relative error {worst:.2e} (tolerance 1e-10)"))
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    for loss in [LossKind::Lbc, LossKind::Bce] {
        for mode in [SigmaMode::Full, SigmaMode::Detached] {
            for seed in 1..=5 {
                worst = worst.max(fd_gradient_error(seed, loss, mode));
            }
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 20 checks (tolerance 1e-4)"))
}

fn limits_at_true_scores() -> Outcome {
    let (mut sum1, mut sum2) = (0.0, 0.0);
    for seed in 0..5 {
        let sim = ks_generate(5000, seed, false).unwrap();
        let (prelim, _) = preliminary_scores(&sim.data).unwrap();
        let grid = LocalGrid::from_scores(19, 0.1, &prelim).unwrap();
        sum1 += compute_q1(&sim.data, &sim.true_propensity, &grid).unwrap();
        sum2 += compute_q2(&sim.data, &sim.true_propensity, &grid).unwrap();
    }
    let (q1, q2) = (sum1 / 5.0, sum2 / 5.0);
    outcome(
        (3.5..=6.5).contains(&q1) && (0.7..=1.3).contains(&q2),
        format!("mean Q1 {q1:.3} (band [3.5, 6.5]), mean Q2 {q2:.3} (band [0.7, 1.3])"),
    )
}

fn true_score_unbiasedness() -> Outcome {
    let config = BenchmarkConfig::for_scenario(Scenario::KsCorrect, 5000);
    let report = run_benchmark(Scenario::KsCorrect, &[Method::TruePs], 20, 5000, SEED, &config).unwrap();
    let m = &report.methods[0];
    outcome(
        m.pct_bias.abs() < 0.5 && m.rmse < 2.0,
        format!("|%Bias| {:.4} (< 0.5), RMSE {:.4} (< 2.0)", m.pct_bias.abs(), m.rmse),
    )
}

fn misspecification_run(epochs: usize) -> (bool, bool, String) {
    let config = BenchmarkConfig::for_scenario(Scenario::KsMis, 1000).with_epochs(epochs);
    let report = run_benchmark(Scenario::KsMis, &[Method::Logistic, Method::LbcNet], 20, 1000, SEED, &config).unwrap();
    let (logit, lbc) = (&report.methods[0], &report.methods[1]);
    let ratio = lbc.rmse / logit.rmse;
    (
        lbc.pct_bias.abs() < 2.0,
        ratio < 0.5,
        format!(
            "{epochs} epochs: LBC-Net |%Bias| {:.3}, RMSE {:.3}; logistic RMSE {:.3}; ratio {ratio:.3} (< 0.5)",
            lbc.pct_bias.abs(),
            lbc.rmse,
            logit.rmse
        ),
    )
}

fn misspecification_robustness() -> Outcome {
    let (bias_full, ratio_full, full) = misspecification_run(20_000);
    let (_, ratio_short, short) = misspecification_run(5_000);
    outcome(bias_full && ratio_full && ratio_short, format!("{full}; {short}"))
}

fn lbc_config(preset: Preset, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::with_preset(LossKind::Lbc, preset)
    }
}

fn balance_of(data: &Dataset, scores: &[f64]) -> (f64, f64) {
    let p0 = evaluation_grid(99);
    let bw = evaluation_bandwidths(scores, 19, 0.1, &p0).unwrap();
    let r = balance_report(data, scores, &p0, &bw).unwrap();
    (r.summary.max_gsd, r.summary.mean_lsd)
}

fn balance_quality() -> Outcome {
    let sim = ks_generate(1000, SEED, true).unwrap();
    let lbc = lbc_config(Preset::Ks1k, SEED);
    let bce = TrainConfig {
        loss: LossKind::Bce,
        ..lbc.clone()
    };
    let lbc_scores = fit_propensity(&sim.data, &lbc).unwrap().scores;
    let bce_scores = fit_propensity(&sim.data, &bce).unwrap().scores;
    let (max_gsd, lbc_lsd) = balance_of(&sim.data, &lbc_scores);
    let (_, bce_lsd) = balance_of(&sim.data, &bce_scores);
    outcome(
        max_gsd < 10.0 && lbc_lsd < bce_lsd,
        format!("LBC-Net max GSD {max_gsd:.3}% (< 10), mean LSD {lbc_lsd:.3}% vs BCE {bce_lsd:.3}%"),
    )
}

fn calibration() -> Outcome {
    let sim = ks_generate(5000, SEED, false).unwrap();
    let fit = fit_propensity(&sim.data, &lbc_config(Preset::Ks5k, SEED)).unwrap();
    let gap = hosmer_lemeshow_table(&fit.scores, sim.data.treatment()).unwrap().max_gap();
    outcome(gap < 0.05, format!("max |mean score - treated proportion| {gap:.4} (< 0.05)"))
}

fn cli_round(dir: &Path) -> Result<(), String> {
    let d = dir.to_str().unwrap();
    let data = dir.join("simulated.csv");
    let scores = dir.join("scores.csv");
    let (data, scores) = (data.to_str().unwrap(), scores.to_str().unwrap());
    let runs: [&[&str]; 5] = [
        &["simulate", "--scenario", "ks-mis", "--n", "500", "--seed", "3"],
        &["fit", "--input", data, "--epochs", "300", "--seed", "3"],
        &["estimate", "--input", data, "--scores", scores, "--bootstrap", "5", "--bootstrap-epochs", "30"],
        &["diagnose", "--input", data, "--scores", scores],
        &["benchmark", "--scenario", "ssmr-correct", "--reps", "2", "--n", "300", "--epochs", "30", "--seed", "3"],
    ];
    for args in runs {
        let out = Command::new(env!("CARGO_BIN_EXE_lbcnet"))
            .env_remove("LBC_OUT_DIR")
            .args(args)
            .args(["--out-dir", d])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        if let Err(e) = cli_round(dir.path()) {
            return outcome(false, e);
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let differing: Vec<String> = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).ok() != std::fs::read(dirs[1].path().join(n)).ok())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} artifacts from 5 commands compared, differing: {differing:?}", names.len()),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn generator_fidelity() -> Outcome {
    let ssmr = ssmr_generate(50_000, SEED, false).unwrap();
    let z = ssmr.data.covariates();
    let z3_given: Vec<f64> = (0..z.nrows()).filter(|&i| z[(i, 3)] == 1.0).map(|i| z[(i, 2)]).collect();
    let cond = mean(&z3_given);
    let (a, b) = (z.column(4), z.column(5));
    let (ma, mb) = (a.mean(), b.mean());
    let cov = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
    let corr = cov / (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() * b.iter().map(|y| (y - mb).powi(2)).sum::<f64>()).sqrt();

    let ks = ks_generate(100_000, SEED, false).unwrap();
    let y = ks.data.outcome().unwrap();
    let my = mean(y);
    let se = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (y.len() - 1) as f64 / y.len() as f64).sqrt();
    let z_stat = (my - 210.0) / se;
    outcome(
        (cond - 0.6).abs() <= 0.01 && (corr - 0.2).abs() <= 0.02 && z_stat.abs() <= 3.0,
        format!("E[Z3|Z4=1] {cond:.4} (0.6 ± 0.01), corr(Z5,Z6) {corr:.4} (0.2 ± 0.02), mean Y {my:.3} at {z_stat:.2} SE from 210"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient correctness", gradient_correctness),
        ("objective limits at true scores", limits_at_true_scores),
        ("unbiasedness with true scores", true_score_unbiasedness),
        ("misspecification robustness", misspecification_robustness),
        ("balance quality", balance_quality),
        ("calibration", calibration),
        ("determinism", determinism),
        ("generator fidelity", generator_fidelity),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!result.pass);
        println!(
            "criterion {number} {name}: {verdict} [{:.1}s] {}",
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
