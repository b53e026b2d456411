//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::time::{Duration, Instant};

use rand::Rng;
use wdro::assignment::{solve_assignments, verify_solver, ConstraintSpec, SolveProblem};
use wdro::bounds::{verify_coverage_grid, verify_upper_bound, DEFAULT_P_STAR};
use wdro::cli::write_run;
use wdro::data::{gen_cmnist_like, DataConfig, GeneratorConfig, Split};
use wdro::evaluation::{ablate_epsilon, nvp_select, run_on_splits, run_sweep, ExperimentOutcome};
use wdro::group_weights::GroupWeights;
use wdro::matrix::Matrix;
use wdro::predictor::{finite_diff_grad, loss_and_weighted_grad, relative_error, Activation, ModelKind, ModelParams};
use wdro::seed::rng_for;
use wdro::trainers::{train, Algorithm, TrainConfig};

const ASSIGN_TOL: f64 = 1e-6;
const VERIFY_INSTANCES: usize = 200;
const COVERAGE_TRIALS: u64 = 10_000;
const GRAD_DRAWS: usize = 100;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

// Directional experiment protocol. Every algorithm gets the same grid and
// is selected by NVP on validation, per seed.
const SEEDS: [u64; 3] = [0, 1, 2];
const N_TRAIN: usize = 2000;
const N_VAL: usize = 2000;
const N_TEST: usize = 4000;
const EPOCHS: usize = 100;
const BATCH: usize = 128;
const GRID_ETA_W: [f64; 3] = [0.01, 0.03, 0.1];
const GRID_WD: [f64; 3] = [1e-2, 1e-3, 1e-4];
const GRID_ETA_Q: [f64; 3] = [1e-2, 1e-3, 1e-4];
const NVP_TOP_K: usize = 5;
const MIN_GAIN_OVER_ERM: f64 = 0.05;
const AVG_ACC_BAND: f64 = 0.05;

// Epsilon ablation: one fixed worst-off configuration.
const ABL_EPS: [f64; 4] = [0.0, 0.001, 0.01, 1.0];
const ABL_ETA_W: f64 = 0.01;
const ABL_ETA_Q: f64 = 1e-3;
const ABL_DROP: f64 = 0.03;
const ABL_BAND: f64 = 0.03;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn criterion(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = f();
    let el = t.elapsed();
    let ok = v.passed && el <= limit;
    println!(
        "{} [{id:02}] {name}: {} ({:.1}s, limit {}s)",
        if ok { "PASS" } else { "FAIL" },
        v.detail,
        el.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn example_assignment(eps: f64) -> Vec<Vec<f64>> {
    // q1/p1 = 0.7/0.6 > q2/p2 = 0.3/0.4.
    let p = SolveProblem::new(
        vec![3.0, 2.0, 1.0],
        GroupWeights::new(vec![0.7, 0.3]).unwrap(),
        ConstraintSpec::new(vec![0.6, 0.4], eps, vec![]),
    );
    solve_assignments(&p).unwrap().assignment.matrix().to_rows()
}

fn close(a: &[Vec<f64>], b: &[[f64; 2]]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(r, e)| r.iter().zip(e).all(|(x, y)| (x - y).abs() <= ASSIGN_TOL))
}

fn c1_example() -> Verdict {
    let tight = example_assignment(0.0);
    let loose = example_assignment(1.0);
    let ok = close(&tight, &[[1.0, 0.0], [0.8, 0.2], [0.0, 1.0]]) && close(&loose, &[[1.0, 0.0]; 3]);
    verdict(ok, format!("eps=0 {tight:?}, eps=1 {loose:?}"))
}

fn c2_solver() -> Verdict {
    let r = verify_solver(VERIFY_INSTANCES, 11);
    verdict(
        r.passed && r.instances >= VERIFY_INSTANCES,
        format!("{} instances, max gap {:.2e}, {} failures", r.instances, r.max_objective_gap, r.failures.len()),
    )
}

fn c3_upper_bound() -> Verdict {
    let r = verify_upper_bound(VERIFY_INSTANCES, 12);
    verdict(
        r.passed && r.counterexamples.is_empty(),
        format!("{} instances, min gap {:.2e}, {} violations", r.instances, r.min_gap, r.counterexamples.len()),
    )
}

fn c4_coverage() -> Verdict {
    let g = verify_coverage_grid(&DEFAULT_P_STAR, COVERAGE_TRIALS, 13);
    let failed = g.cells.iter().filter(|c| !c.passed).count();
    let worst = g
        .cells
        .iter()
        .flat_map(|c| {
            let tol = c.report.mc_tolerance();
            c.report.per_group_frequency.iter().map(move |f| f + tol - c.report.analytic_bound.max(0.0))
        })
        .fold(f64::INFINITY, f64::min);
    verdict(g.passed, format!("{} cells, {failed} failed, smallest slack {worst:.4}", g.cells.len()))
}

fn random_model<R: Rng>(rng: &mut R, dim: usize) -> ModelParams {
    let kind = match rng.random_range(0..3) {
        0 => ModelKind::Linear,
        1 => ModelKind::Mlp { hidden: vec![rng.random_range(1..6)], activation: Activation::Tanh },
        _ => ModelKind::Mlp {
            hidden: vec![rng.random_range(1..5), rng.random_range(1..5)],
            activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh },
        },
    };
    // Random biases too: zero biases put dead-unit pre-activations exactly on the ReLU kink.
    let mut params = ModelParams::init(kind, dim, rng).unwrap();
    for w in &mut params.weights {
        *w = rng.random_range(-1.0..1.0);
    }
    params
}

fn c5_gradients() -> Verdict {
    let mut rng = rng_for(14, "acceptance/gradients");
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_DRAWS {
        let dim = rng.random_range(1..6);
        let n = rng.random_range(1..12);
        let params = random_model(&mut rng, dim);
        let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Matrix::from_vec(n, dim, x).unwrap();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let wd = rng.random_range(0.0..0.5);
        let (_, g) = loss_and_weighted_grad(&params, &x, &y, &s, wd).unwrap();
        let fd = finite_diff_grad(&params, &x, &y, &s, wd, FD_STEP);
        worst = worst.max(relative_error(&g, &fd));
    }
    verdict(worst < GRAD_REL_TOL, format!("{GRAD_DRAWS} draws, worst relative error {worst:.2e}"))
}

fn c6_reductions() -> Verdict {
    // (a) Every row labeled and full batches, so batch counts equal the marginals exactly.
    let data = DataConfig { n_train: 600, n_val: 100, n_test: 100, labeled_fraction: 1.0, seed: 21, ..DataConfig::default() };
    let ds = data.generate().unwrap().train;
    let base = TrainConfig { epochs: 20, seed: 5, eta_q: 0.2, epsilon: 0.0, ..TrainConfig::new(Algorithm::GroupDroOracle) };
    let oracle = train(&ds, &base).unwrap();
    let worst = train(&ds, &TrainConfig { algorithm: Algorithm::WorstoffDro, ..base }).unwrap();
    let a = oracle.params == worst.params && oracle.records == worst.records && oracle.q == worst.q;

    // (b) One group, full and mini-batch.
    let single = gen_cmnist_like(400, &[0.2], &[1.0], 1.0, 3.0, 6, 22, Split::Train).unwrap();
    let b = [None, Some(32)].into_iter().all(|batch| {
        let erm_cfg = TrainConfig { epochs: 20, seed: 6, batch_size: batch, weight_decay: 1e-3, ..TrainConfig::new(Algorithm::Erm) };
        let erm = train(&single, &erm_cfg).unwrap();
        let gdro = train(&single, &TrainConfig { algorithm: Algorithm::GroupDroOracle, eta_q: 0.3, ..erm_cfg }).unwrap();
        erm.params == gdro.params
            && erm.records.len() == gdro.records.len()
            && erm.records.iter().zip(&gdro.records).all(|(e, g)| {
                e.loss.to_bits() == g.loss.to_bits() && e.acc_overall.to_bits() == g.acc_overall.to_bits()
            })
    });
    verdict(a && b, format!("fully labeled worst-off == oracle: {a}, single-group DRO == ERM: {b}"))
}

fn protocol_data(seed: u64) -> DataConfig {
    DataConfig {
        generator: GeneratorConfig::cmnist_default(),
        n_train: N_TRAIN,
        n_val: N_VAL,
        n_test: N_TEST,
        labeled_fraction: 0.1,
        seed,
    }
}

fn protocol_grid(alg: Algorithm, seed: u64) -> Vec<TrainConfig> {
    let eqs: &[f64] = if alg.uses_q() { &GRID_ETA_Q } else { &GRID_ETA_Q[..1] };
    let mut out = Vec::new();
    for &eta_w in &GRID_ETA_W {
        for &weight_decay in &GRID_WD {
            for &eta_q in eqs {
                out.push(TrainConfig {
                    eta_w,
                    eta_q,
                    weight_decay,
                    epochs: EPOCHS,
                    batch_size: Some(BATCH),
                    seed,
                    ..TrainConfig::new(alg)
                });
            }
        }
    }
    out
}

const COMPARED: [Algorithm; 4] =
    [Algorithm::Erm, Algorithm::GroupDroPartial, Algorithm::GroupDroOracle, Algorithm::WorstoffDro];

/// NVP-selected config per algorithm, per seed.
struct Selection {
    seed: u64,
    chosen: Vec<(Algorithm, TrainConfig, ExperimentOutcome)>,
}

fn select_all() -> Vec<Selection> {
    SEEDS
        .iter()
        .map(|&seed| {
            let splits = protocol_data(seed).generate().unwrap();
            let chosen = COMPARED
                .iter()
                .map(|&alg| {
                    let sweep = run_sweep(&splits, &protocol_grid(alg, seed));
                    let i = nvp_select(&sweep, NVP_TOP_K).expect("sweep produced no validation record");
                    let cfg = sweep.entries[i].config.clone();
                    let outcome = run_on_splits(&splits, &cfg).unwrap();
                    (alg, cfg, outcome)
                })
                .collect();
            Selection { seed, chosen }
        })
        .collect()
}

fn mean_of(sel: &[Selection], alg: Algorithm, f: impl Fn(&ExperimentOutcome) -> f64) -> f64 {
    let v: Vec<f64> = sel.iter().map(|s| f(&s.chosen.iter().find(|c| c.0 == alg).unwrap().2)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_directional(sel: &[Selection]) -> Verdict {
    let min = |a| mean_of(sel, a, |o| o.test_minority_acc());
    let avg = |a| mean_of(sel, a, |o| o.test.acc_overall);
    let (erm, part, orc, wd) = (
        min(Algorithm::Erm),
        min(Algorithm::GroupDroPartial),
        min(Algorithm::GroupDroOracle),
        min(Algorithm::WorstoffDro),
    );
    let checks = [
        ("worst-off > erm + 0.05", wd > erm + MIN_GAIN_OVER_ERM),
        ("worst-off >= partial", wd >= part),
        ("avg within 0.05 of erm", (avg(Algorithm::WorstoffDro) - avg(Algorithm::Erm)).abs() <= AVG_ACC_BAND),
        ("oracle >= worst-off", orc >= wd),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        failed.is_empty(),
        format!(
            "minority erm {erm:.3} partial {part:.3} oracle {orc:.3} worst-off {wd:.3}; avg erm {:.3} worst-off {:.3}; failed {:?}",
            avg(Algorithm::Erm),
            avg(Algorithm::WorstoffDro),
            failed
        ),
    )
}

fn c8_q_trajectory(sel: &[Selection]) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for s in sel {
        let o = &s.chosen.iter().find(|c| c.0 == Algorithm::WorstoffDro).unwrap().2;
        let q = o.run.q.as_ref().expect("worst-off keeps group weights");
        let uniform = 1.0 / q.len() as f64;
        let seed_ok = (0..q.len()).all(|j| if j == o.minority_group { q.get(j) > uniform } else { q.get(j) < uniform });
        ok &= seed_ok;
        parts.push(format!("seed {} q={:.3?}", s.seed, q.as_slice()));
    }
    verdict(ok, parts.join(", "))
}

fn c9_eps_ablation() -> Verdict {
    let data = protocol_data(0);
    let cfg = TrainConfig {
        eta_w: ABL_ETA_W,
        eta_q: ABL_ETA_Q,
        epochs: EPOCHS,
        batch_size: Some(BATCH),
        ..TrainConfig::new(Algorithm::WorstoffDro)
    };
    let rows = ablate_epsilon(&data, &cfg, &ABL_EPS, &SEEDS).unwrap();
    let at = |e: f64| rows.iter().find(|r| r.value == e).unwrap().min_acc_mean;
    let small: Vec<f64> = [0.0, 0.001, 0.01].iter().map(|&e| at(e)).collect();
    let spread = small.iter().cloned().fold(f64::MIN, f64::max) - small.iter().cloned().fold(f64::MAX, f64::min);
    let drop = at(0.01) - at(1.0);
    verdict(
        drop >= ABL_DROP && spread <= ABL_BAND,
        format!("minority means {:?}, drop at eps=1 {drop:.3}, small-eps spread {spread:.3}", rows.iter().map(|r| format!("{}:{:.3}", r.value, r.min_acc_mean)).collect::<Vec<_>>()),
    )
}

fn c10_determinism(sel: &[Selection]) -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for s in sel {
        let fresh = protocol_data(s.seed).generate().unwrap();
        for (alg, cfg, first) in &s.chosen {
            let name = format!("{}_{}", alg.as_str(), s.seed);
            write_run(&a.path().join(&name), first).unwrap();
            let again = run_on_splits(&fresh, cfg).unwrap();
            write_run(&b.path().join(&name), &again).unwrap();
            for file in ["metrics.jsonl", "params.json"] {
                let x = std::fs::read(a.path().join(&name).join(file)).unwrap();
                let y = std::fs::read(b.path().join(&name).join(file)).unwrap();
                if x != y {
                    return verdict(false, format!("{name}/{file} differs"));
                }
                compared += 1;
            }
        }
    }
    verdict(true, format!("{compared} files byte-identical"))
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= criterion(1, "worked assignment example", secs(1), c1_example);
    ok &= criterion(2, "greedy solver matches oracle", secs(30), c2_solver);
    ok &= criterion(3, "solver optimum bounds group DRO", secs(30), c3_upper_bound);
    ok &= criterion(4, "marginal coverage bounds", secs(120), c4_coverage);
    ok &= criterion(5, "analytic gradients", secs(30), c5_gradients);
    ok &= criterion(6, "reduction identities", secs(60), c6_reductions);

    let mut sel = Vec::new();
    ok &= criterion(7, "directional cmnist-like experiment", secs(300), || {
        sel = select_all();
        c7_directional(&sel)
    });
    ok &= criterion(8, "group weight trajectory", secs(300), || c8_q_trajectory(&sel));
    ok &= criterion(9, "epsilon ablation shape", secs(600), c9_eps_ablation);
    ok &= criterion(10, "deterministic metrics files", secs(300), || c10_determinism(&sel));
    if !ok {
        std::process::exit(1);
    }
}
