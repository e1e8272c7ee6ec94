//! End-to-end acceptance checks. Each test prints one PASS/FAIL line straight
//! to stdout (bypassing the capture of the test harness) and then asserts.
//! Tests share a lock so wall-clock budgets are measured without contention.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use boltznce::coupling::{linear_sum_assignment, CouplingMode};
use boltznce::densities::{make_target, TargetDensity, TargetParams, TargetSpec};
use boltznce::diffnet::{Activation, Mlp, MlpSpec};
use boltznce::ebm::{train_ebm, EbmConfig, NegativeBoundary, NegativeTimeSampler};
use boltznce::emulator::{
    exact_log_likelihood, nll, sample, sample_with_likelihood, train_endpoint, train_vector_field, Dataset,
    FlowTrainConfig,
};
use boltznce::interpolant::Schedule;
use boltznce::metrics::energy_w2;
use boltznce::ode::{integrate, DivergenceMode, OdeOptions};
use boltznce::pipeline::{likelihood_agreement, run_ablation, run_full_pipeline, AblationVariant, ExperimentConfig};
use boltznce::reweight::{estimate_observable, weighted_ensemble, Provenance};
use boltznce::stream_rng;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line and returns whether the criterion passed,
/// including its runtime budget when it has one.
fn verdict(id: &str, pass: bool, detail: &str, elapsed: Duration, budget: Option<Duration>) -> bool {
    let in_time = budget.map_or(true, |b| elapsed <= b);
    let ok = pass && in_time;
    let budget_note = budget.map_or(String::new(), |b| format!(" / budget {} s", b.as_secs()));
    let line = format!(
        "criterion {id}: {} | {detail} | {:.1} s{budget_note}\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    ok
}

fn target(name: &str) -> TargetDensity {
    make_target(&TargetSpec::named(name).unwrap()).unwrap()
}

fn tilted_two_well() -> TargetSpec {
    TargetSpec {
        params: TargetParams::TwoWell { a: 1.0, b: 1.0, c: 2.0, tilt: 0.5 },
        kbt: 1.0,
    }
}

fn desk_emulator() -> FlowTrainConfig {
    FlowTrainConfig {
        hidden: vec![64; 3],
        train_size: 20_000,
        validation_size: 2_000,
        epochs: 40,
        ema_decay: 0.95,
        ..Default::default()
    }
}

/// Desk-scale EBM: independent coupling keeps the score target unbiased and
/// reflected negatives avoid a point mass of negatives at t = 0.
fn desk_ebm() -> EbmConfig {
    EbmConfig {
        hidden: vec![64; 3],
        train_size: 8_000,
        validation_size: 2_000,
        epochs: 400,
        ema_decay: 0.95,
        lr: 3e-3,
        coupling: CouplingMode::Independent,
        negatives: NegativeTimeSampler {
            std: 0.1,
            boundary: NegativeBoundary::Reflect,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_1_ablation_ordering() {
    let _g = serial();
    let start = Instant::now();
    let variants = [AblationVariant::NceOnly, AblationVariant::SmOnly, AblationVariant::Both];
    let dir = tempfile::tempdir().unwrap();
    let mut all_ok = true;
    let mut notes = Vec::new();
    for name in ["eight_gaussians", "checkerboard"] {
        let mut errors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for seed in 0..3 {
            let mut cfg = ExperimentConfig {
                target: TargetSpec::named(name).unwrap(),
                seed,
                out: dir.path().join(format!("{name}_{seed}")),
                ebm: EbmConfig { epochs: 120, ..desk_ebm() },
                ..Default::default()
            };
            cfg.ablation.train_size = 8_000;
            let report = run_ablation(&cfg, &variants).unwrap();
            for (v, label) in variants.iter().zip(["nce_only", "sm_only", "both"]) {
                errors.entry(label).or_default().push(report.error_of(*v).unwrap());
            }
        }
        let m: BTreeMap<&str, f64> = errors.iter().map(|(k, v)| (*k, mean(v))).collect();
        let ok = m["both"] < m["nce_only"] && m["both"] < m["sm_only"];
        all_ok &= ok;
        notes.push(format!(
            "{name}: both {:.4}, nce_only {:.4}, sm_only {:.4}",
            m["both"], m["nce_only"], m["sm_only"]
        ));
    }
    let ok = verdict("1 (ablation ordering)", all_ok, &notes.join("; "), start.elapsed(), Some(Duration::from_secs(1800)));
    assert!(ok);
}

#[test]
fn criterion_2_ebm_matches_exact_likelihood() {
    let _g = serial();
    let start = Instant::now();
    let opts = OdeOptions::default();
    let mut src = target("eight_gaussians");
    // Independent coupling trains ~8x faster per epoch than OT, which buys
    // epochs for the emulator and samples for the EBM within the budget.
    let emu_cfg = FlowTrainConfig { epochs: 150, coupling: CouplingMode::Independent, ..desk_emulator() };
    let emulator = train_vector_field(&mut src, Schedule::Linear, &emu_cfg, 1).unwrap().model;
    let cfg = EbmConfig { train_size: 16_000, ..desk_ebm() };
    let train = sample(&emulator, cfg.train_size + cfg.validation_size, 2, &opts).unwrap();
    let ebm = train_ebm(&mut Dataset::new(train.samples).unwrap(), &cfg, 3).unwrap().model;
    let held = sample_with_likelihood(&emulator, 2_000, 4, DivergenceMode::ExactAutodiff, &opts).unwrap();
    let e = ebm.log_density(held.samples.view()).unwrap();
    let a = likelihood_agreement(e.view(), held.loglik.as_ref().unwrap().view()).unwrap();
    let pass = a.pearson >= 0.95 && a.diff_std <= 0.25;
    let detail = format!("pearson {:.4} (>= 0.95), diff std {:.4} nats (<= 0.25), n {}", a.pearson, a.diff_std, a.n);
    let ok = verdict("2 (EBM vs exact likelihood)", pass, &detail, start.elapsed(), Some(Duration::from_secs(600)));
    assert!(ok);
}

#[test]
fn criterion_3_free_energy_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut worst = [0.0f64; 3];
    for seed in 0..5 {
        let mut cfg = ExperimentConfig {
            target: tilted_two_well(),
            seed,
            out: dir.path().join(format!("seed{seed}")),
            ebm: EbmConfig { hidden: vec![32; 3], epochs: 60, ..desk_ebm() },
            ..Default::default()
        };
        cfg.emulator.train = FlowTrainConfig { hidden: vec![32; 3], epochs: 20, ..desk_emulator() };
        cfg.samples.n = 100_000;
        cfg.metrics.reference_samples = 10_000;
        cfg.metrics.nll_holdout = 1_000;
        let out = run_full_pipeline(&cfg).unwrap();
        let quad = out.metrics.reference_delta_f.unwrap();
        let (fe, fx) = (out.free_energy_ebm.delta_f, out.free_energy_exact.delta_f);
        let gaps = [(fe - quad).abs(), (fx - quad).abs(), (fe - fx).abs()];
        for (w, g) in worst.iter_mut().zip(gaps) {
            *w = w.max(g);
        }
        pass &= gaps.iter().all(|g| *g <= 0.3);
    }
    let detail = format!(
        "max over 5 seeds: |ebm - quad| {:.3}, |exact - quad| {:.3}, |ebm - exact| {:.3} (each <= 0.3), n 1e5",
        worst[0], worst[1], worst[2]
    );
    let ok = verdict("3 (free-energy fidelity)", pass, &detail, start.elapsed(), Some(Duration::from_secs(1200)));
    assert!(ok);
}

#[test]
fn criterion_4_ebm_likelihood_speedup() {
    let _g = serial();
    let start = Instant::now();
    let opts = OdeOptions::default();
    let mut src = target("eight_gaussians");
    let emulator = train_vector_field(&mut src, Schedule::Linear, &FlowTrainConfig { epochs: 5, ..desk_emulator() }, 1)
        .unwrap()
        .model;
    let x = sample(&emulator, 10_000, 2, &opts).unwrap().samples;
    let ebm = train_ebm(&mut Dataset::new(x.clone()).unwrap(), &EbmConfig { epochs: 5, ..desk_ebm() }, 3)
        .unwrap()
        .model;
    let t0 = Instant::now();
    let exact = exact_log_likelihood(&emulator, x.view(), DivergenceMode::ExactAutodiff, &opts).unwrap();
    let t_exact = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let e = ebm.log_density(x.view()).unwrap();
    let t_ebm = t0.elapsed().as_secs_f64();
    assert_eq!((exact.loglik.len(), e.len()), (10_000, 10_000));
    let speedup = t_exact / t_ebm.max(1e-9);
    let detail = format!(
        "divergence integral {:.2} s, EBM {:.4} s for 1e4 points: {speedup:.0}x (>= 10x)",
        t_exact, t_ebm
    );
    let ok = verdict("4 (likelihood speedup)", speedup >= 10.0, &detail, start.elapsed(), None);
    assert!(ok);
}

#[test]
fn criterion_5_endpoint_nll_spread_exceeds_vector_field() {
    let _g = serial();
    let start = Instant::now();
    let opts = OdeOptions::default();
    let cfg = FlowTrainConfig { train_size: 10_000, epochs: 15, ..desk_emulator() };
    let mut pass = true;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let mut src = target("two_well");
        let holdout = src.sample(2_000, &mut stream_rng(seed, 32)).unwrap();
        let vf = train_vector_field(&mut src, Schedule::Linear, &cfg, seed).unwrap().model;
        let ep = train_endpoint(&mut src, Schedule::Linear, &cfg, seed).unwrap().model;
        let s_vf = nll(&vf, holdout.view(), 1_000, &opts).unwrap().std;
        let s_ep = nll(&ep, holdout.view(), 1_000, &opts).unwrap().std;
        pass &= s_ep > s_vf;
        pairs.push(format!("{s_ep:.3}>{s_vf:.3}"));
    }
    let detail = format!("NLL std endpoint > vector field per seed: {}", pairs.join(", "));
    let ok = verdict("5 (endpoint NLL instability)", pass, &detail, start.elapsed(), None);
    assert!(ok);
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// Worst relative error of input, parameter and double-backprop gradients
/// against central differences.
fn gradient_check_error() -> f64 {
    let spec = MlpSpec {
        data_dim: 2,
        out_dim: 1,
        hidden: vec![16, 16],
        activation: Activation::Tanh,
        time_frequencies: vec![std::f64::consts::PI, 2.0 * std::f64::consts::PI],
    };
    let mut net = Mlp::new(spec, 5);
    let mut rng = stream_rng(5, 1);
    // Fresh nets may start with a zero output layer; randomize every weight.
    let params: Vec<f64> = (0..net.param_count()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    net.set_params(&params).unwrap();
    let x = Array2::from_shape_fn((6, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let t = Array1::from_shape_fn(6, |_| rng.gen_range(0.05..0.95));
    let h = 1e-5;
    let mut worst = 0.0f64;

    // Input gradient.
    let g = net.input_gradient(t.view(), x.view()).unwrap();
    let mut fd = Vec::new();
    for i in 0..x.nrows() {
        for k in 0..2 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[[i, k]] += h;
            xm[[i, k]] -= h;
            let fp = net.forward(t.view(), xp.view()).unwrap()[[i, 0]];
            let fm = net.forward(t.view(), xm.view()).unwrap()[[i, 0]];
            fd.push((fp - fm) / (2.0 * h));
        }
    }
    worst = worst.max(rel_err(g.as_slice().unwrap(), &fd));

    // Parameter gradient of sum(w * E) and of a loss through grad_x E.
    let w = Array2::from_shape_fn((6, 1), |(i, _)| 0.3 + i as f64 * 0.1);
    let (_, pg) = net.backward(t.view(), x.view(), w.view()).unwrap();
    let score_loss = |net: &Mlp| -> f64 {
        let (e, g) = net.value_and_input_gradient(t.view(), x.view()).unwrap();
        e.sum() * 0.5 + g.iter().map(|v| v * v).sum::<f64>()
    };
    let (_, dg) = net
        .loss_parameter_gradient(t.view(), x.view(), |e, g| {
            (e.sum() * 0.5 + g.iter().map(|v| v * v).sum::<f64>(), Array1::from_elem(e.len(), 0.5), &g * 2.0)
        })
        .unwrap();
    let (mut fd_p, mut fd_d) = (Vec::new(), Vec::new());
    for j in 0..net.param_count() {
        let (mut np, mut nm) = (net.clone(), net.clone());
        np.params_mut()[j] += h;
        nm.params_mut()[j] -= h;
        let lin = |n: &Mlp| (n.forward(t.view(), x.view()).unwrap() * &w).sum();
        fd_p.push((lin(&np) - lin(&nm)) / (2.0 * h));
        fd_d.push((score_loss(&np) - score_loss(&nm)) / (2.0 * h));
    }
    worst = worst.max(rel_err(&pg, &fd_p));
    worst.max(rel_err(&dg, &fd_d))
}

/// Worst terminal error over closed-form ODE problems at default tolerances.
fn dopri5_error() -> f64 {
    use std::f64::consts::{E, PI};
    type Rhs = Box<dyn Fn(f64, &[f64], &mut [f64]) -> boltznce::Result<()>>;
    let problems: Vec<(Rhs, f64, f64, Vec<f64>, Vec<f64>)> = vec![
        (Box::new(|_, y, dy| { dy[0] = -y[0]; Ok(()) }), 0.0, 1.0, vec![1.0], vec![1.0 / E]),
        (Box::new(|t, _, dy| { dy[0] = t.cos(); Ok(()) }), 0.0, PI, vec![0.0], vec![0.0]),
        (Box::new(|_, y, dy| { dy[0] = y[0]; Ok(()) }), 1.0, 0.0, vec![E], vec![1.0]),
        // Harmonic oscillator over one period.
        (Box::new(|_, y, dy| { dy[0] = y[1]; dy[1] = -y[0]; Ok(()) }), 0.0, 2.0 * PI, vec![1.0, 0.0], vec![1.0, 0.0]),
        // Logistic growth.
        (Box::new(|_, y, dy| { dy[0] = y[0] * (1.0 - y[0]); Ok(()) }), 0.0, 3.0, vec![0.1],
            vec![1.0 / (1.0 + 9.0 * (-3.0f64).exp())]),
    ];
    let mut worst = 0.0f64;
    for (f, t0, t1, y0, exact) in &problems {
        let sol = integrate(|t, y, dy| f(t, y, dy), *t0, *t1, y0, &OdeOptions::default()).unwrap();
        for (a, b) in sol.y.iter().zip(exact) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Number of random cost matrices where the assignment cost differs from
/// brute force.
fn hungarian_mismatches() -> usize {
    let mut rng = stream_rng(6, 0);
    let mut bad = 0;
    for n in 1..=6 {
        let perms = permutations(n);
        for trial in 0..40 {
            let cost = Array2::from_shape_fn((n, n), |_| {
                if trial % 4 == 0 {
                    rng.gen_range(0..4) as f64
                } else {
                    rng.gen::<f64>()
                }
            });
            let a = linear_sum_assignment(&cost);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            let best = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if (got - best).abs() > 1e-12 {
                bad += 1;
            }
        }
    }
    bad
}

fn w2_sorted_vs_assignment() -> f64 {
    let mut rng = stream_rng(7, 0);
    let mut worst = 0.0f64;
    for n in [1, 5, 40, 150] {
        let a = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let b = Array1::from_shape_fn(n, |_| rng.gen::<f64>() * 3.0 - 1.0);
        let cost = Array2::from_shape_fn((n, n), |(i, j)| (a[i] - b[j]).powi(2));
        let p = linear_sum_assignment(&cost);
        let oracle = (p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64).sqrt();
        worst = worst.max((energy_w2(a.view(), b.view()).unwrap() - oracle).abs());
    }
    worst
}

fn trained_flow_mass() -> f64 {
    let mut src = target("two_well");
    let cfg = FlowTrainConfig { train_size: 10_000, epochs: 20, ..desk_emulator() };
    let model = train_vector_field(&mut src, Schedule::Linear, &cfg, 8).unwrap().model;
    let grid = src.covering_grid(100);
    let ll = exact_log_likelihood(&model, grid.nodes().view(), DivergenceMode::ExactAutodiff, &OdeOptions::default())
        .unwrap()
        .loglik;
    grid.log_integral(ll.as_slice().unwrap()).exp()
}

#[test]
fn criterion_6_numerical_infrastructure() {
    let _g = serial();
    let start = Instant::now();
    let grad = gradient_check_error();
    let ode = dopri5_error();
    let lsa = hungarian_mismatches();
    let w2 = w2_sorted_vs_assignment();
    let mass = trained_flow_mass();
    let parts = [grad <= 1e-4, ode <= 1e-5, lsa == 0, w2 <= 1e-10, (mass - 1.0).abs() <= 0.03];
    let detail = format!(
        "(a) gradient rel err {grad:.2e} (<= 1e-4); (b) DOPRI5 max err {ode:.2e} (<= 1e-5); \
         (c) assignment mismatches {lsa} (n <= 6); (d) W2 sorted vs assignment {w2:.2e} (<= 1e-10); \
         (e) grid mass {mass:.4} (1 +/- 0.03)"
    );
    let ok = verdict("6 (numerical infrastructure)", parts.iter().all(|p| *p), &detail, start.elapsed(), None);
    assert!(ok);
}

#[test]
fn criterion_7_reweighting_oracle() {
    let _g = serial();
    let start = Instant::now();
    // Proposal N(mu, diag(s^2)); target N(0, I). E_target[x1^2] = 1.
    let (mu, s) = ([0.5, -0.3], [1.3, 1.2]);
    let n = 100_000;
    let mut pass = true;
    let mut zs = Vec::new();
    for seed in 0..5 {
        let mut rng = stream_rng(seed, 70);
        let x = Array2::from_shape_fn((n, 2), |(_, k)| mu[k] + s[k] * rng.sample::<f64, _>(StandardNormal));
        let log_w: Array1<f64> = x
            .rows()
            .into_iter()
            .map(|r| {
                (0..2)
                    .map(|k| {
                        let z = (r[k] - mu[k]) / s[k];
                        -0.5 * r[k] * r[k] + 0.5 * z * z + s[k].ln()
                    })
                    .sum()
            })
            .collect();
        let ens = weighted_ensemble(x.view(), log_w.view(), Provenance::ExactLikelihood).unwrap();
        let values = x.column(0).mapv(|v| v * v);
        let (est, se) = estimate_observable(&ens, values.view()).unwrap();
        let z = (est - 1.0) / se;
        pass &= z.abs() <= 3.0;
        zs.push(format!("{z:+.2}"));
    }
    let detail = format!("(estimate - 1) / SE per seed: {} (|z| <= 3), n 1e5", zs.join(", "));
    let ok = verdict("7 (reweighting oracle)", pass, &detail, start.elapsed(), None);
    assert!(ok);
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_str().unwrap();
            (name.ends_with(".csv") || name.ends_with(".json")) && name != "timings.json"
        })
        .map(|p| (p.file_name().unwrap().to_str().unwrap().to_string(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn criterion_8_pipeline_determinism() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut notes = Vec::new();
    for name in ["two_well", "eight_gaussians"] {
        let mut cfg = ExperimentConfig {
            target: TargetSpec::named(name).unwrap(),
            seed: 11,
            out: dir.path().join(name),
            ..Default::default()
        };
        cfg.emulator.train = FlowTrainConfig { hidden: vec![16; 2], train_size: 1_000, epochs: 2, ..desk_emulator() };
        cfg.ebm = EbmConfig { hidden: vec![16; 2], train_size: 1_000, epochs: 2, ..desk_ebm() };
        cfg.samples.n = 2_000;
        cfg.metrics.grid_points = 60;
        cfg.metrics.nll_holdout = 200;
        cfg.metrics.reference_samples = 2_000;
        run_full_pipeline(&cfg).unwrap();
        let first = artifacts(&cfg.out);
        std::fs::remove_dir_all(&cfg.out).unwrap();
        run_full_pipeline(&cfg).unwrap();
        let second = artifacts(&cfg.out);
        let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
        pass &= first.len() >= 10 && first.keys().eq(second.keys()) && differing.is_empty();
        notes.push(format!("{name}: {} artifacts, {} differ", first.len(), differing.len()));
    }
    let ok = verdict("8 (determinism)", pass, &notes.join("; "), start.elapsed(), None);
    assert!(ok);
}
