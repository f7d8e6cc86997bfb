//! Acceptance suite. Each test prints one `PASS` / `FAIL` line for its criterion.
//!
//! Criteria 5-8 run by default. The recovery experiments (1-4, 9) train hundreds of
//! full-length models and are marked `#[ignore]`; run them in release mode with
//! `cargo test --release -p gcdisc --test acceptance -- --ignored --nocapture`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use gcdisc::{cmd_simulate, cmd_sweep, cmd_train, replay, RunConfig, RunManifest, SimKind, SweepSummary};
use gcdisc_core::dataset::{Dataset, WindowSet};
use gcdisc_core::gc::{self, EdgeScores, GcGraph};
use gcdisc_core::selector::{LagMode, SelectorParams};
use gcdisc_core::simulate::{lorenz96_truth, simulate_lorenz96, Lorenz96Config};
use gcdisc_core::train::{self, Ablation, ComponentModel, Forecaster, TrainConfig};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const SEEDS: [u64; 3] = [0, 1, 2];

/// Writes straight to stdout so the line shows even when test output is captured.
fn verdict(criterion: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{status}] criterion {criterion}: {detail}");
    let _ = out.flush();
}

// ---------------------------------------------------------------- criterion 5

const STEP: f64 = 1e-4;

fn central_diff(f: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (f(STEP) - f(-STEP)) - (f(2.0 * STEP) - f(-2.0 * STEP))) / (12.0 * STEP)
}

/// Relative error, absolute below 1e-6 where the difference quotient only carries
/// rounding residue (the input-gate bias gradient is exactly zero).
fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6)
}

fn instance_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, c, d) = (6, 5, 8);
    let cfg = TrainConfig {
        hidden: d,
        heads: [1, 2, 4][seed as usize % 3],
        context: c,
        lag_mode: if seed.is_multiple_of(2) { LagMode::Shared } else { LagMode::PerLag },
        ..Default::default()
    };
    let mut model = ComponentModel::init(seed as usize % v, v, &cfg, seed).unwrap();
    for (name, t) in model.forecaster.tensors_mut() {
        if name == "bias" || name == "head_b" {
            t.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
        }
    }
    model.selector.beta.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let values = Array2::from_shape_simple_fn((v, c + 4), || rng.random_range(-1.5..1.5));
    let windows = WindowSet::from_values(values.view(), c).unwrap();
    let loss = |m: &ComponentModel| m.prediction_loss(&windows).unwrap();
    let grads = model.prediction_grads(&windows).unwrap();
    let mut worst: f64 = 0.0;

    let gw = grads.selector.w.as_slice().unwrap();
    for k in 0..gw.len() {
        let fd = central_diff(|h| {
            let mut m = model.clone();
            m.selector.w.as_slice_mut().unwrap()[k] += h;
            loss(&m)
        });
        worst = worst.max(rel_err(fd, gw[k]));
    }
    for k in 0..grads.selector.b.len() {
        let fd = central_diff(|h| {
            let mut m = model.clone();
            m.selector.b[k] += h;
            loss(&m)
        });
        worst = worst.max(rel_err(fd, grads.selector.b[k]));
    }
    let gf = grads.forecaster.tensors();
    for (ti, (name, g)) in gf.iter().enumerate() {
        for k in 0..g.len() {
            if *name == "r" {
                if let Forecaster::Slstm(p) = &model.forecaster {
                    if !p.in_block(k / (4 * d), k % (4 * d)) {
                        assert_eq!(g[k], 0.0);
                        continue;
                    }
                }
            }
            let fd = central_diff(|h| {
                let mut m = model.clone();
                m.forecaster.tensors_mut()[ti].1[k] += h;
                loss(&m)
            });
            worst = worst.max(rel_err(fd, g[k]));
        }
    }
    let lambda = 10.0;
    let gb = model.selector.reduction_loss(lambda).grad_beta;
    for idx in ndarray::indices(gb.raw_dim()) {
        let fd = central_diff(|h| {
            let mut s = model.selector.clone();
            s.beta[idx] += h;
            s.reduction_loss(lambda).value
        });
        worst = worst.max(rel_err(fd, gb[idx]));
    }
    worst
}

#[test]
fn criterion_5_gradient_exactness() {
    let start = Instant::now();
    let worst = (0..20).map(instance_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let passed = worst < 1e-5 && secs < 60.0;
    verdict(
        "5 (gradient exactness)",
        passed,
        &format!("max relative error {worst:.2e} over 20 instances (D=8, C=5, V=6) in {secs:.1}s"),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_proximal_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut columns, mut worst, mut zero_violations) = (0, 0.0f64, 0);
    while columns < 1000 {
        let v = 10;
        let d = rng.random_range(1..40);
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let w = Array3::from_shape_simple_fn((1, d, v), || rng.random_range(-scale..scale));
        let beta = Array2::from_shape_simple_fn((1, v), || rng.random_range(-4.0..4.0));
        let mut sel = SelectorParams {
            w,
            b: Array1::zeros(d),
            beta,
            lag_mode: LagMode::Shared,
        };
        let lambda = rng.random_range(0.0..20.0);
        let eta = 10f64.powf(rng.random_range(-4.0..0.0));
        let alpha = sel.alpha();
        let pre = sel.column_norms();
        sel.proximal_step(lambda, eta);
        let post = sel.column_norms();
        for c in 0..v {
            let thr = lambda * eta * alpha[[0, c]];
            worst = worst.max((post[[0, c]] - (pre[[0, c]] - thr).max(0.0)).abs());
            if pre[[0, c]] <= thr && sel.w.slice(ndarray::s![0, .., c]).iter().any(|x| x.to_bits() != 0) {
                zero_violations += 1;
            }
            columns += 1;
        }
    }
    let passed = worst <= 1e-12 && zero_violations == 0;
    verdict(
        "6 (proximal exactness)",
        passed,
        &format!("{columns} columns, max norm error {worst:.2e}, {zero_violations} non-bitwise-zero sub-threshold columns"),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- criterion 7

fn trapezoid_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut area, mut i) = (0.0, 0.0, 0.0, 0);
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) / neg * (tp + tp0) / (2.0 * pos);
    }
    area
}

fn graph(adj: Array2<bool>) -> GcGraph {
    let v = adj.nrows();
    GcGraph::new(adj, (0..v).map(|i| format!("x{i}")).collect()).unwrap()
}

#[test]
fn criterion_7_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut instances = 0;
    while instances < 100 {
        let v = rng.random_range(3..12);
        let truth = Array2::from_shape_simple_fn((v, v), || rng.random_bool(0.3));
        if truth.iter().all(|&x| x) || truth.iter().all(|&x| !x) {
            continue;
        }
        let levels = rng.random_range(2..20);
        let scores = Array2::from_shape_simple_fn((v, v), || rng.random_range(0..levels) as f64);
        let a = gc::auroc(&EdgeScores::from_array(&scores).unwrap(), &graph(truth.clone()), true).unwrap();
        let t: Vec<bool> = truth.iter().copied().collect();
        let s: Vec<f64> = scores.iter().copied().collect();
        worst = worst.max((a - trapezoid_auroc(&s, &t)).abs());
        instances += 1;
    }

    let mut hand = Vec::new();
    let truth = lorenz96_truth(20);
    let same = gc::confusion_metrics(&truth, &truth, true).unwrap();
    hand.push(same.accuracy == 1.0 && same.balanced_accuracy == 1.0);
    let empty = GcGraph::empty(20);
    let neg = gc::confusion_metrics(&empty, &truth, true).unwrap();
    hand.push(neg.accuracy == 0.8 && neg.balanced_accuracy == 0.5 && neg.fn_ == 80 && neg.tn == 320);
    let pred = graph(Array2::from_shape_fn((20, 20), |(a, b)| (a * 7 + b * 3) % 5 == 0));
    let m = gc::confusion_metrics(&pred, &truth, true).unwrap();
    let inv = gc::confusion_metrics(&pred.inverted(), &truth, true).unwrap();
    hand.push((inv.balanced_accuracy - (1.0 - m.balanced_accuracy)).abs() < 1e-15);
    let pair_truth = graph(ndarray::arr2(&[[true, true], [false, false]]));
    let pair_scores = EdgeScores::from_array(&ndarray::arr2(&[[3.0, 1.0], [2.0, 0.0]])).unwrap();
    hand.push(gc::auroc(&pair_scores, &pair_truth, true).unwrap() == 0.75);
    let all = graph(Array2::from_elem((2, 2), true));
    let sweep: Vec<(f64, GcGraph)> = (5..=15).map(|l| (l as f64, all.clone())).collect();
    hand.push(gc::edge_scores_from_sweep(&sweep).unwrap().get(0, 1) == 11.0);

    let passed = worst <= 1e-12 && hand.iter().all(|&h| h);
    verdict(
        "7 (metric oracles)",
        passed,
        &format!(
            "AUROC vs trapezoid max diff {worst:.2e} on 100 instances; hand cases {}/{} exact",
            hand.iter().filter(|&&h| h).count(),
            hand.len()
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- criterion 8

fn checkpoint_digests(dir: &Path, manifest: &RunManifest) -> Vec<(String, String)> {
    manifest
        .artifacts
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .map(|p| {
            let bytes = std::fs::read(dir.join(p)).unwrap();
            (p.display().to_string(), Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect::<String>())
        })
        .collect()
}

#[test]
fn criterion_8_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.set_seed(8);
    cfg.lorenz96.variates = 5;
    cfg.lorenz96.steps = 60;
    cfg.train.total_steps = 60;
    cfg.train.warmup_steps = 20;
    cfg.train.compression_start = 15;
    cfg.train.eta_max = 1e-2;
    cfg.train.lambda = 2.0;
    let sim_dir = tmp.path().join("sim");
    cmd_simulate(SimKind::Lorenz96, &cfg, &sim_dir).unwrap();
    let first_dir = tmp.path().join("first");
    let first = cmd_train(&sim_dir.join("data.csv"), Some(&sim_dir.join("truth.json")), true, &cfg, 2, &first_dir).unwrap();
    first.verify(&first_dir).unwrap();
    let recorded = RunManifest::load(&first_dir.join(gcdisc::MANIFEST_FILE)).unwrap();
    let second_dir = tmp.path().join("second");
    let second = replay(&recorded, &second_dir).unwrap();
    let a = checkpoint_digests(&first_dir, &first);
    let b = checkpoint_digests(&second_dir, &second);
    let same_graph = std::fs::read(first_dir.join("graph.json")).unwrap() == std::fs::read(second_dir.join("graph.json")).unwrap();
    let passed = a.len() == 5 && a == b && same_graph;
    verdict(
        "8 (determinism)",
        passed,
        &format!("{} checkpoints compared by SHA-256 after manifest replay, all identical: {}", a.len(), a == b),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- recovery experiments

/// Simulates with `seed`, sweeps the default lambda grid and returns the sweep summary.
fn sweep_run(kind: SimKind, mut cfg: RunConfig, seed: u64) -> SweepSummary {
    let tmp = tempfile::tempdir().unwrap();
    cfg.set_seed(seed);
    let sim = tmp.path().join("sim");
    cmd_simulate(kind, &cfg, &sim).unwrap();
    let out = tmp.path().join("sweep");
    cmd_sweep(&sim.join("data.csv"), Some(&sim.join("truth.json")), true, &cfg, 0, &out).unwrap();
    let text = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Best mean balanced accuracy over the grid, averaging each lambda across seeds.
fn best_mean_ba(kind: SimKind, cfg: &RunConfig, label: &str) -> (f64, f64, f64) {
    let runs: Vec<SweepSummary> = SEEDS.iter().map(|&s| sweep_run(kind, cfg.clone(), s)).collect();
    let lambdas = &cfg.sweep.lambdas;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for (i, &l) in lambdas.iter().enumerate() {
        let mean = runs.iter().map(|r| r.per_lambda[i].balanced_accuracy).sum::<f64>() / runs.len() as f64;
        println!("{label}: lambda {l}: mean BA {mean:.4}");
        if mean > best.0 {
            best = (mean, l);
        }
    }
    let auroc = runs.iter().filter_map(|r| r.auroc).sum::<f64>() / runs.len() as f64;
    (best.0, best.1, auroc)
}

fn lorenz_config(forcing: f64, variates: usize, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.lorenz96 = Lorenz96Config {
        variates,
        steps: 500,
        forcing,
        dt: 0.05,
        ..Default::default()
    };
    cfg.train.total_steps = steps;
    cfg
}

#[test]
#[ignore = "full lambda sweep x 3 seeds at 13,000 steps; tens of CPU-hours"]
fn criterion_1_lorenz_f10() {
    let cfg = lorenz_config(10.0, 20, 13_000);
    let (ba, lambda, auroc) = best_mean_ba(SimKind::Lorenz96, &cfg, "F=10");
    let passed = ba >= 0.92;
    verdict(
        "1 (Lorenz-96 F=10, V=20)",
        passed,
        &format!("best mean BA {ba:.4} at lambda {lambda} (need >= 0.92), mean AUROC {auroc:.4}"),
    );
    assert!(passed);
}

#[test]
#[ignore = "lambda sweep x 3 seeds at 5,000 steps; several CPU-hours"]
fn criterion_1_lorenz_f10_reduced() {
    let cfg = lorenz_config(10.0, 10, 5_000);
    let (ba, lambda, auroc) = best_mean_ba(SimKind::Lorenz96, &cfg, "F=10 reduced");
    let passed = ba >= 0.90;
    verdict(
        "1 (reduced: Lorenz-96 F=10, V=10, 5,000 steps)",
        passed,
        &format!("best mean BA {ba:.4} at lambda {lambda} (need >= 0.90), mean AUROC {auroc:.4}"),
    );
    assert!(passed);
}

#[test]
#[ignore = "full lambda sweep x 3 seeds at 13,000 steps; tens of CPU-hours"]
fn criterion_2_lorenz_f40() {
    let cfg = lorenz_config(40.0, 20, 13_000);
    let (ba, lambda, auroc) = best_mean_ba(SimKind::Lorenz96, &cfg, "F=40");
    let passed = ba >= 0.85;
    verdict(
        "2 (Lorenz-96 F=40, V=20)",
        passed,
        &format!("best mean BA {ba:.4} at lambda {lambda} (need >= 0.85), mean AUROC {auroc:.4}"),
    );
    assert!(passed);
}

#[test]
#[ignore = "per-lag lambda sweep x 3 seeds at 13,000 steps; tens of CPU-hours"]
fn criterion_3_var_per_lag() {
    let mut cfg = RunConfig::default();
    cfg.var.variates = 10;
    cfg.var.steps = 1000;
    cfg.train.lag_mode = LagMode::PerLag;
    cfg.train.context = 5;
    let (ba, lambda, auroc) = best_mean_ba(SimKind::Var, &cfg, "VAR per-lag");
    let passed = ba >= 0.88;
    verdict(
        "3 (VAR V=10 per-lag)",
        passed,
        &format!("best mean aggregated BA {ba:.4} at lambda {lambda} (need >= 0.88), mean AUROC {auroc:.4}"),
    );
    assert!(passed);
}

#[test]
#[ignore = "three lambda sweeps x 3 seeds at 13,000 steps; days of CPU time"]
fn criterion_4_ablation_order() {
    let base = lorenz_config(40.0, 20, 13_000);
    let best = |ablation: Ablation, seed: u64| {
        let mut cfg = base.clone();
        cfg.train.ablation = ablation;
        let r = sweep_run(SimKind::Lorenz96, cfg, seed);
        r.best.map(|b| b.balanced_accuracy).unwrap_or(0.0)
    };
    let mut wins = 0;
    for seed in SEEDS {
        let (full, lstm, lasso) = (best(Ablation::None, seed), best(Ablation::Lstm, seed), best(Ablation::GroupLasso, seed));
        println!("seed {seed}: full {full:.4}, lstm {lstm:.4}, group lasso {lasso:.4}");
        if full > lstm && full > lasso {
            wins += 1;
        }
    }
    let passed = wins >= 2;
    verdict("4 (ablation ordering, F=40)", passed, &format!("full method strictly best on {wins}/3 seeds"));
    assert!(passed);
}

#[test]
#[ignore = "one full V=20 training at 13,000 steps; about two CPU-hours"]
fn criterion_9_training_dynamics() {
    let cfg = TrainConfig {
        lambda: 5.0,
        ..Default::default()
    };
    let data: Dataset = simulate_lorenz96(&Lorenz96Config {
        forcing: 40.0,
        ..Default::default()
    })
    .unwrap();
    let (_, histories) = train::collect_components(train::train_all(&data, &cfg, 0).unwrap()).unwrap();
    let usage = train::mean_usage(&histories);
    let k = cfg.compression_start;
    let before = (usage[0], usage[k - 1]);
    let last = *usage.last().unwrap();
    let passed = last < data.num_variates() as f64;
    verdict(
        "9 (training dynamics, F=40, lambda=5)",
        passed,
        &format!(
            "mean active columns {:.2} at step 1, {:.2} at step K={k}, {last:.2} at step {} (need < {})",
            before.0,
            before.1,
            usage.len(),
            data.num_variates()
        ),
    );
    assert!(passed);
}
