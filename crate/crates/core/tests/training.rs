use lbc_core::diagnostics::gsd;
use lbc_core::estimators::ipw_weights;
use lbc_core::objective::{compute_q1, compute_q2};
use lbc_core::simulate::ks_generate;
use lbc_core::train::{fit_propensity, LossKind, Preset, TrainConfig};

fn ks_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::with_preset(LossKind::Lbc, Preset::Ks1k)
    }
}

#[test]
fn ks_fit_reduces_balance_and_calibrates() {
    let sim = ks_generate(1000, 11, false).unwrap();
    let fit = fit_propensity(&sim.data, &ks_config(3000, 11)).unwrap();
    assert!(fit.trace.loss.iter().all(|v| v.is_finite()));
    let first = fit.trace.q1[0];
    let q1 = compute_q1(&sim.data, &fit.scores, &fit.grid).unwrap();
    let q2 = compute_q2(&sim.data, &fit.scores, &fit.grid).unwrap();
    assert!(q1 < first, "Q1 went from {first} to {q1}");
    assert!((0.5..=1.5).contains(&q2), "final Q2 {q2}");
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

// Training is deterministic, so a run of `e` epochs is the checkpoint at
// epoch `e` of any longer run with the same seed.
#[test]
fn global_balance_tracks_local_balance_over_training() {
    let sim = ks_generate(1000, 4, true).unwrap();
    let t = sim.data.treatment();
    let (mut q1s, mut gsds) = (Vec::new(), Vec::new());
    for epochs in [1, 25, 50, 100, 200, 400, 800, 1600] {
        let fit = fit_propensity(&sim.data, &ks_config(epochs, 4)).unwrap();
        let w = ipw_weights(&fit.scores, t).unwrap();
        let z = sim.data.covariates();
        let mean_gsd = (0..z.ncols())
            .map(|c| gsd(z.column(c).as_slice(), t, &w).unwrap())
            .sum::<f64>()
            / z.ncols() as f64;
        q1s.push(compute_q1(&sim.data, &fit.scores, &fit.grid).unwrap());
        gsds.push(mean_gsd);
    }
    let rho = spearman(&q1s, &gsds);
    assert!(rho > 0.0, "Q1 {q1s:?}\nGSD {gsds:?}\nSpearman {rho}");
}
