//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! executed criterion fails.
//!
//! The benchmark (criterion 8) and the trained half of the histogram check
//! (criterion 9) need many CPU hours. They run only when `CTDS_ACCEPT_BENCH`
//! names a directory. Each run lives in `<dir>/<preset>-<profile>-s<seed>`
//! and is trained and evaluated there unless its `metrics.json` already
//! exists. `CTDS_ACCEPT_PROFILE` picks the profile (default `reduced`).
//! Without the variable both lines report FAIL as not executed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ctds::dynamics::IntegratorConfig;
use ctds::energy::{GaussianOracle, GaussianSource, PathKind, PathSpec, Target};
use ctds::eval::{assignment, wasserstein2, MetricsReport};
use ctds::models::{Control, Models};
use ctds::nn::FourierSpec;
use ctds::plot::parse_histogram;
use ctds::run::{eval_run, final_temperature_histogram, train_run, Profile, RunConfig, PRESETS};
use ctds::tempering::{joint_energy, Tempering, TemperatureSchedule};
use ctds::training::{
    assign_params, flatten_params, loss_batch, mean_squared_residual, stratified_weights, AdamConfig, ArchConfig, Batch,
    Curriculum, TrainConfig, Trainer,
};
use ctds::verify::{jarzynski_check, oracle_residual_checks, reduction_checks, spot_value_checks, JarzynskiSetup};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    id: &'static str,
    passed: bool,
    executed: bool,
    detail: String,
}

impl Outcome {
    fn new(id: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            passed,
            executed: true,
            detail: detail.into(),
        }
    }

    fn skipped(id: &'static str, detail: impl Into<String>) -> Self {
        Self {
            id,
            passed: false,
            executed: false,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn c1_oracle_residual() -> Outcome {
    let start = Instant::now();
    let checks = oracle_residual_checks(1000, 11).unwrap();
    let took = start.elapsed();
    let worst = checks.iter().map(|c| c.measured).fold(0.0, f64::max);
    Outcome::new(
        "1 oracle zero residual",
        checks.iter().all(|c| c.passed) && took < Duration::from_secs(1),
        format!("max |r| = {worst:.2e} over 1000 points on both paths (< 1e-10), {} (< 1s)", secs(took)),
    )
}

fn c2_jarzynski() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, setup) in [
        ("overdamped", JarzynskiSetup::overdamped(100_000, 1)),
        ("ctds frozen xi", JarzynskiSetup::frozen_ctds(100_000, 1)),
    ] {
        let start = Instant::now();
        let c = jarzynski_check(name, &setup).unwrap();
        let took = start.elapsed();
        ok &= c.passed && took < Duration::from_secs(120);
        parts.push(format!("{name} {:.4} in {}", c.measured, secs(took)));
    }
    Outcome::new(
        "2 jarzynski Z1/Z0 = 4 within 5%",
        ok,
        format!("{} (N = 1e5, dt = 1e-3, < 2 min each)", parts.join(", ")),
    )
}

fn c3_reductions() -> Outcome {
    let start = Instant::now();
    let checks = reduction_checks(500, 5).unwrap();
    let worst = checks.iter().map(|c| c.measured).fold(0.0, f64::max);
    Outcome::new(
        "3 scheme reductions bitwise",
        checks.iter().all(|c| c.passed),
        format!("{} reductions, max |difference| = {worst:e}, {}", checks.len(), secs(start.elapsed())),
    )
}

/// Central difference refined by one Richardson step.
fn derivative(f: &dyn Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-3;
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn fd_arch() -> ArchConfig {
    ArchConfig {
        hidden_width: 16,
        depth: 3,
        x_features: Some(FourierSpec {
            num_features: 4,
            frequency_scale: 0.5,
        }),
        time_features: Some(FourierSpec {
            num_features: 3,
            frequency_scale: 2.0,
        }),
        temperature_features: Some(FourierSpec {
            num_features: 2,
            frequency_scale: 1.0,
        }),
    }
}

fn randomized_models(path: &PathSpec, seed: u64) -> Models {
    let mut m = fd_arch().build(path, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let p: Vec<f64> = flatten_params(&m).iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    assign_params(&mut m, &p).unwrap();
    m
}

fn c4_derivatives() -> Outcome {
    let sched = TemperatureSchedule::default();
    let temp = Tempering::default();
    let path = PathSpec::new(
        PathKind::LearnedContinuum,
        GaussianSource::gmm_default(),
        Target::Mixture(ctds::energy::GaussianMixtureTarget::gmm40(0)),
        Some(sched),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut note = |name: &str, e: f64| {
        if e > worst {
            worst = e;
            worst_at = name.to_string();
        }
    };
    for draw in 0..100u64 {
        let models = randomized_models(&path, draw);
        let x = [rng.random_range(-45.0..45.0), rng.random_range(-45.0..45.0)];
        let t: f64 = rng.random_range(0.05..0.95);
        let xi: f64 = rng.random_range(-3.0..3.0);
        let beta: f64 = rng.random_range(0.2..1.0);

        let Control::Net(c) = &models.control else { unreachable!() };
        let aug = c.net.forward_augmented(&c.params, &x, Some(t), Some(beta)).unwrap();
        let out = |x: [f64; 2], t: f64, b: f64, k: usize| c.net.forward_augmented(&c.params, &x, Some(t), Some(b)).unwrap().value[k];
        for k in 0..2 {
            for j in 0..2 {
                let fd = derivative(
                    &|h| {
                        let mut y = x;
                        y[j] = h;
                        out(y, t, beta, k)
                    },
                    x[j],
                );
                note("control d mu/dx", rel_err(aug.jac_x[k * 2 + j], fd));
            }
            note("control d mu/dt", rel_err(aug.d_dt[k], derivative(&|h| out(x, h, beta, k), t)));
            note("control d mu/dbeta", rel_err(aug.d_dtemperature[k], derivative(&|h| out(x, t, h, k), beta)));
        }
        let div_fd: f64 = (0..2)
            .map(|j| {
                derivative(
                    &|h| {
                        let mut y = x;
                        y[j] = h;
                        out(y, t, beta, j)
                    },
                    x[j],
                )
            })
            .sum();
        note("control div", rel_err(aug.div_x.unwrap(), div_fd));

        let fe = &models.free_energy;
        let f_at = |t: f64, b: f64| fe.eval(Array1::from(vec![t]).view(), Array1::from(vec![b]).view(), false).unwrap().f[0];
        let ev = fe.eval(Array1::from(vec![t]).view(), Array1::from(vec![beta]).view(), true).unwrap();
        note("free energy dF/dt", rel_err(ev.df_dt[0], derivative(&|h| f_at(h, beta), t)));
        note("free energy dF/dbeta", rel_err(ev.df_dbeta[0], derivative(&|h| f_at(t, h), beta)));

        let u = |x: [f64; 2], xi: f64, t: f64| {
            let xa = Array2::from_shape_vec((1, 2), x.to_vec()).unwrap();
            joint_energy(&path, &models, &temp.confining, xa.view(), Array1::from(vec![xi]).view(), Array1::from(vec![t]).view())
                .unwrap()
        };
        let je = u(x, xi, t);
        for j in 0..2 {
            let fd = derivative(
                &|h| {
                    let mut y = x;
                    y[j] = h;
                    u(y, xi, t).u_tilde[0]
                },
                x[j],
            );
            note("joint energy grad_x", rel_err(je.grad_x[[0, j]], fd));
        }
        note("joint energy d/dxi", rel_err(je.du_dxi[0], derivative(&|h| u(x, h, t).u_tilde[0], xi)));
        note("joint energy d/dt", rel_err(je.du_dt[0], derivative(&|h| u(x, xi, h).u_tilde[0], t)));
    }
    let partials_ok = worst < 1e-5;

    // Parameter gradient of the reweighted loss on the same path.
    let models = randomized_models(&path, 500);
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let n = 24;
    let batch = Batch {
        x: Array2::from_shape_fn((n, 2), |_| rng.random_range(-40.0..40.0)),
        t: Array1::from_shape_fn(n, |_| rng.random_range(0.0..1.0)),
        xi: Some(Array1::from_shape_fn(n, |_| rng.random_range(-3.0..3.0))),
        work: Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0)),
    };
    let w = stratified_weights(batch.t.view(), batch.work.view(), 4, 1.0).unwrap();
    let (_, grad) = loss_batch(&models, &path, &batch, Some(&w)).unwrap();
    let p0 = flatten_params(&models);
    let loss_at = |k: usize, v: f64| {
        let mut m = models.clone();
        let mut p = p0.clone();
        p[k] = v;
        assign_params(&mut m, &p).unwrap();
        loss_batch(&m, &path, &batch, Some(&w)).unwrap().0
    };
    let mut worst_p: f64 = 0.0;
    let mut checked = 0;
    for k in (0..p0.len()).step_by(5) {
        worst_p = worst_p.max(rel_err(grad[k], derivative(&|v| loss_at(k, v), p0[k])));
        checked += 1;
    }
    Outcome::new(
        "4 derivative exactness",
        partials_ok && worst_p < 1e-4,
        format!(
            "partials over 100 draws: worst rel err {worst:.2e} ({worst_at}, < 1e-5); loss parameter gradient over {checked} of {} coordinates: {worst_p:.2e} (< 1e-4)",
            p0.len()
        ),
    )
}

fn c5_oracle_training() -> Outcome {
    let start = Instant::now();
    let o = GaussianOracle::new(1.0, 2.0, 2);
    let path = o.path(PathKind::Linear, None).unwrap();
    let arch = ArchConfig {
        hidden_width: 64,
        depth: 3,
        x_features: Some(FourierSpec {
            num_features: 16,
            frequency_scale: 0.3,
        }),
        time_features: Some(FourierSpec {
            num_features: 8,
            frequency_scale: 2.0,
        }),
        temperature_features: None,
    };
    let cfg = TrainConfig {
        path: path.clone(),
        tempering: Tempering::default(),
        integrator: IntegratorConfig::overdamped(1.0, 0.01, 1.0),
        particles: 256,
        iterations_per_epoch: 20,
        batch_size: 512,
        curriculum: Curriculum::constant(2000),
        optimizer: AdamConfig::default(),
        reweight: false,
        time_bins: 10,
        seed: 3,
    };
    // Held-out points from the exact path marginal N(0, I / a_t).
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 2000;
    let t: Array1<f64> = Array1::from_shape_fn(n, |_| rng.random_range(0.0..1.0));
    let mut x = Array2::zeros((n, 2));
    for i in 0..n {
        let sd = 1.0 / ((1.0 - t[i]) + t[i] / 4.0).sqrt();
        for j in 0..2 {
            let z: f64 = rng.sample(StandardNormal);
            x[[i, j]] = sd * z;
        }
    }
    let held = Batch {
        x,
        t,
        xi: None,
        work: Array1::zeros(n),
    };
    let models = arch.build(&path, 11).unwrap();
    let before = mean_squared_residual(&models, &path, &held).unwrap();
    let mut tr = Trainer::new(cfg, models).unwrap();
    while !tr.finished() {
        tr.run_epoch().unwrap();
    }
    let after = mean_squared_residual(&tr.models, &path, &held).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..=200 {
        let t = k as f64 / 200.0;
        let f = tr.models.free_energy.eval_point(None, t, None).unwrap().0;
        // F_t = -(d/2) log(2 pi / a_t), a_t = (1 - t) + t / 4.
        let exact = -(2.0 * std::f64::consts::PI / ((1.0 - t) + t / 4.0)).ln();
        worst = worst.max((f - exact).abs());
    }
    let took = start.elapsed();
    Outcome::new(
        "5 free energy converges on the gaussian path",
        tr.iteration == 2000 && worst < 1e-2 && took < Duration::from_secs(600),
        format!(
            "{} iterations, max |F - F*| over 201 grid points = {worst:.2e} (< 1e-2), held-out residual^2 {before:.2e} -> {after:.2e}, {} (< 10 min)",
            tr.iteration,
            secs(took)
        ),
    )
}

fn c6_spot_values() -> Outcome {
    let checks = spot_value_checks();
    let s = TemperatureSchedule::default();
    let mirrored = s.beta(-1.075).0;
    let detail: Vec<String> = checks.iter().map(|c| format!("{} = {}", c.name, c.measured)).collect();
    Outcome::new(
        "6 schedule and confining spot values",
        checks.iter().all(|c| c.passed) && (mirrored - 0.6).abs() < 1e-12,
        format!("{}, beta(-1.075) = {mirrored}", detail.join(", ")),
    )
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

fn c7_wasserstein() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut assign_ok = true;
    for inst in 0..100 {
        let n = 1 + inst % 6;
        let a: Array2<f64> = Array2::from_shape_fn((n, 2), |_| rng.random_range(-5.0..5.0));
        let b: Array2<f64> = Array2::from_shape_fn((n, 2), |_| rng.random_range(-5.0..5.0));
        let cost: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                (a[[i, 0]] - b[[j, 0]]).powi(2) + (a[[i, 1]] - b[[j, 1]]).powi(2)
            })
            .collect();
        let best = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let brute = (best / n as f64).sqrt();
        let w = wasserstein2(a.view(), b.view()).unwrap();
        worst = worst.max((w - brute).abs() / brute.max(1e-300));
        let (perm, total) = assignment(&cost, n).unwrap();
        assign_ok &= (total - best).abs() <= 1e-12 * best.max(1.0);
        let mut seen = perm.clone();
        seen.sort_unstable();
        assign_ok &= seen == (0..n).collect::<Vec<_>>();
    }
    Outcome::new(
        "7 W2 matches brute force",
        worst < 1e-12 && assign_ok,
        format!("100 instances of 1 to 6 points, worst relative deviation {worst:.1e}, optimal assignments valid"),
    )
}

fn smoke_checkpoints(root: &Path) -> Vec<(String, MetricsReport)> {
    let mut out = Vec::new();
    for preset in PRESETS {
        let cfg = RunConfig::preset(preset).unwrap().with_profile(Profile::Smoke);
        let dir = root.join(preset);
        let tr = train_run(&cfg, &dir, &mut |_| {}).unwrap();
        let report = eval_run(&tr.checkpoint, Some(&cfg), None, None, &dir).unwrap();
        out.push((format!("{preset}-smoke"), report));
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const BENCH_PRESETS: [&str; 4] = ["gmm40-baseline", "gmm40-nets-od-jar", "gmm40-ctds", "gmm40-ctds-jar"];
const BENCH_SEEDS: [u64; 3] = [0, 1, 2];

/// Median `(w2, elbo)` per preset, in `BENCH_PRESETS` order.
fn ordering_holds(medians: &[(f64, f64)]) -> bool {
    let (base, nets) = (medians[0], medians[1]);
    medians[2..].iter().all(|&(w2, elbo)| {
        w2 < base.0 && w2 < nets.0 && elbo > base.1 && elbo > nets.1 && elbo > -0.8
    }) && base.1 < -1.5
}

struct Bench {
    runs: Vec<(String, PathBuf, MetricsReport)>,
    medians: Vec<(f64, f64)>,
    seconds_per_preset: Vec<f64>,
    profile: Profile,
}

fn bench(root: &Path, profile: Profile) -> Bench {
    let name = match profile {
        Profile::Full => "full",
        Profile::Reduced => "reduced",
        Profile::Smoke => "smoke",
    };
    let mut runs = Vec::new();
    let mut medians = Vec::new();
    let mut seconds_per_preset = Vec::new();
    for preset in BENCH_PRESETS {
        let start = Instant::now();
        let (mut w2, mut elbo) = (Vec::new(), Vec::new());
        for seed in BENCH_SEEDS {
            let mut cfg = RunConfig::preset(preset).unwrap().with_profile(profile);
            cfg.seed = seed;
            let dir = root.join(format!("{preset}-{name}-s{seed}"));
            let metrics = dir.join("metrics.json");
            let report: MetricsReport = if metrics.exists() {
                serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap()
            } else {
                let tr = train_run(&cfg, &dir, &mut |r| {
                    eprintln!("{preset} s{seed}: epoch {} iter {} loss {:.3e}", r.epoch, r.iter, r.loss)
                })
                .unwrap();
                eval_run(&tr.checkpoint, Some(&cfg), None, None, &dir).unwrap()
            };
            w2.push(report.w2.mean);
            elbo.push(report.elbo.mean);
            runs.push((format!("{preset}-s{seed}"), dir, report));
        }
        seconds_per_preset.push(start.elapsed().as_secs_f64());
        medians.push((median(&mut w2), median(&mut elbo)));
    }
    Bench {
        runs,
        medians,
        seconds_per_preset,
        profile,
    }
}

fn c8_benchmark(b: Option<&Bench>) -> Outcome {
    let id = "8 gmm40 benchmark ordering";
    let Some(b) = b else {
        return Outcome::skipped(
            id,
            "not executed: 4 presets x 3 seeds of training; on this 1-core machine one reduced-profile CTDS run is estimated at ~11 h \
             (1 s per batch of 6250, 67 s per buffer refill); set CTDS_ACCEPT_BENCH=<dir> to run",
        );
    };
    let rows: Vec<String> = BENCH_PRESETS
        .iter()
        .zip(&b.medians)
        .zip(&b.seconds_per_preset)
        .map(|((p, (w, e)), s)| format!("{p}: W2 {w:.2} ELBO {e:.2} ({:.1} h)", s / 3600.0))
        .collect();
    let budget = if b.profile == Profile::Full { 12.0 } else { 1.5 };
    let within = b.seconds_per_preset.iter().all(|s| s / 3600.0 <= budget);
    Outcome::new(
        id,
        ordering_holds(&b.medians) && within,
        format!("medians over seeds {BENCH_SEEDS:?} [{}], budget {budget} h per preset", rows.join("; ")),
    )
}

fn c9_histograms(b: Option<&Bench>) -> (Outcome, Outcome) {
    let cfg = RunConfig::preset("gmm40-ctds").unwrap().with_profile(Profile::Reduced).resolved();
    let start = Instant::now();
    let models = cfg.network.build(&cfg.path_spec().unwrap(), cfg.seed).unwrap();
    let particles = cfg.training.particles;
    let h = final_temperature_histogram(&cfg, &models, particles, 0).unwrap();
    let untrained = Outcome::new(
        "9a untrained ctds temperature histogram is pooled",
        h.extreme_fraction() >= 0.6,
        format!(
            "{:.1}% of {} particles in the extreme bins (>= 60%), counts {:?}, {}",
            100.0 * h.extreme_fraction(),
            h.total(),
            h.counts,
            secs(start.elapsed())
        ),
    );
    let id = "9b trained ctds temperature histogram is spread";
    let Some(b) = b else {
        return (untrained, Outcome::skipped(id, "not executed: needs the trained reduced-profile runs of criterion 8"));
    };
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (name, dir, _) in b.runs.iter().filter(|(n, _, _)| n.starts_with("gmm40-ctds")) {
        let text = fs::read_to_string(dir.join("beta_hist_trained.csv")).unwrap();
        let (_, counts, _) = parse_histogram(&text).unwrap();
        let total: f64 = counts.iter().sum();
        let frac = (counts[0] + counts[counts.len() - 1]) / total;
        worst = worst.max(frac);
        detail.push(format!("{name} {:.1}%", 100.0 * frac));
    }
    (untrained, Outcome::new(id, worst < 0.35, format!("extreme-bin share {} (< 35%)", detail.join(", "))))
}

fn c10_bounds(reports: &[(String, MetricsReport)]) -> Outcome {
    let mut bad = Vec::new();
    let mut trials = 0;
    for (name, r) in reports {
        for t in &r.per_trial {
            trials += 1;
            let se = (t.elbo.std_err.powi(2) + t.eubo.std_err.powi(2)).sqrt();
            if t.elbo.mean > t.eubo.mean + 2.0 * se {
                bad.push(format!("{name} seed {}: ELBO {:.3} > EUBO {:.3}", t.seed, t.elbo.mean, t.eubo.mean));
            }
        }
    }
    Outcome::new(
        "10 ELBO <= EUBO on evaluated checkpoints",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} checkpoints, {trials} trials, all ordered within 2 combined standard errors", reports.len())
        } else {
            bad.join("; ")
        },
    )
}

/// The criterion 8 rule itself, exercised on hand-made medians.
fn ordering_rule_self_check() {
    let good = [(24.0, -2.1), (20.0, -1.2), (13.0, -0.3), (14.0, -0.3)];
    assert!(ordering_holds(&good));
    let mut weak_baseline = good;
    weak_baseline[0].1 = -1.0;
    assert!(!ordering_holds(&weak_baseline));
    let mut low_elbo = good;
    low_elbo[3].1 = -0.9;
    assert!(!ordering_holds(&low_elbo));
    let mut tie = good;
    tie[2].0 = 20.0;
    assert!(!ordering_holds(&tie));
}

fn report(o: &Outcome) {
    println!("{} [{}] {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.detail);
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let bench_dir = std::env::var_os("CTDS_ACCEPT_BENCH").map(PathBuf::from);
    let profile: Profile = std::env::var("CTDS_ACCEPT_PROFILE")
        .ok()
        .map(|p| p.parse().expect("CTDS_ACCEPT_PROFILE is full, reduced or smoke"))
        .unwrap_or(Profile::Reduced);

    ordering_rule_self_check();
    let mut outcomes = Vec::new();
    let mut run = |o: Outcome| {
        report(&o);
        outcomes.push(o);
    };
    run(c1_oracle_residual());
    run(c2_jarzynski());
    run(c3_reductions());
    run(c4_derivatives());
    run(c5_oracle_training());
    run(c6_spot_values());
    run(c7_wasserstein());

    let bench = bench_dir.as_deref().map(|d| bench(d, profile));
    run(c8_benchmark(bench.as_ref()));
    let (a, b) = c9_histograms(bench.as_ref());
    run(a);
    run(b);

    let tmp = tempfile::tempdir().unwrap();
    let mut reports = smoke_checkpoints(tmp.path());
    if let Some(b) = &bench {
        reports.extend(b.runs.iter().map(|(n, _, r)| (n.clone(), r.clone())));
    }
    run(c10_bounds(&reports));

    let failed: Vec<&str> = outcomes.iter().filter(|o| o.executed && !o.passed).map(|o| o.id).collect();
    let skipped: Vec<&str> = outcomes.iter().filter(|o| !o.executed).map(|o| o.id).collect();
    println!(
        "acceptance: {} passed, {} failed, {} not executed",
        outcomes.iter().filter(|o| o.passed).count(),
        failed.len(),
        skipped.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
