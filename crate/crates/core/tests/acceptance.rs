//! Acceptance suite. Each test checks one criterion at its stated tolerance
//! and prints a single `PASS` or `FAIL` line (written straight to stdout so
//! it shows without `--nocapture`).
//!
//! Run with `cargo test -p ss-core --test acceptance -- --test-threads=1`.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ss_core::experiments::entropy::EntropySetup;
use ss_core::experiments::error_scaling::ErrorScalingSetup;
use ss_core::experiments::fit::FitSetup;
use ss_core::experiments::tlb::{monotone_within, ExpressivitySetup, HeatmapSetup, SweepSetup};
use ss_core::experiments::Config;
use ss_core::langevin::{sample_paths, LinearSde, SdeRun};
use ss_core::lattice::{GridState, LatticeSpec};
use ss_core::mechanics::{assemble_mass, potential_energy, spring_force, PhysicsParams, SpringBatch};
use ss_core::mlp::MlpParams;
use ss_core::stats::{linear_fit, variance};
use ss_core::thermo::FreeEnergyEstimate;
use ss_core::training::{synthesize, train, Dataset, FunctionId, SyntheticSpec, TrainSchedule};

fn verdict(name: &str, pass: bool, started: Instant, detail: &str) {
    let line = format!(
        "{} {name} ({:.1} s): {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

fn config(text: &str) -> Config {
    Config::parse(text, "acceptance").unwrap()
}

#[test]
fn error_scaling_slope() {
    let started = Instant::now();
    let setup = ErrorScalingSetup::from_config(
        &config("error.functions = sin_x, cos_x, square_x, exp_x\nerror.sticks = 2, 4, 8, 16, 32"),
        42,
    )
    .unwrap();
    let fits = setup.run().unwrap().fits();
    let in_band = |s: f64| (-2.3..=-1.7).contains(&s);
    let pass = fits.iter().all(|f| in_band(f.oracle)) && started.elapsed().as_secs_f64() < 10.0;
    let detail: Vec<String> = fits
        .iter()
        .map(|f| format!("{} slope {:.3} (sqrt(E) slope {:.3})", f.function, f.oracle, f.oracle_l2))
        .collect();
    verdict("error scaling slope in [-2.3, -1.7]", pass, started, &detail.join("; "));
}

#[test]
fn ou_stationary_variance() {
    let started = Instant::now();
    let (k, mass, gamma, kt) = (2.0, 1.0, 1.0, 0.5);
    let sde = LinearSde::single_dof(k, mass, gamma, kt).unwrap();
    let run = SdeRun {
        dt: 0.005,
        n_steps: 6000,
        seed: 42,
        record_every: 6000,
    };
    let paths = sample_paths(&sde, &DVector::zeros(2), &run, 2000).unwrap();
    let x: Vec<f64> = paths.iter().map(|p| p.last().unwrap()[0]).collect();
    let var = variance(&x);
    let expected = kt / k;
    let rel = (var - expected).abs() / expected;
    let pass = rel < 0.10 && started.elapsed().as_secs_f64() < 60.0;
    verdict(
        "OU stationary variance",
        pass,
        started,
        &format!("Var[x] = {var:.4} vs k_bT/k = {expected:.4} (rel. error {rel:.3}, 2000 trajectories)"),
    );
}

#[test]
fn free_brownian_growth() {
    let started = Instant::now();
    let sde = LinearSde::single_dof(0.0, 1.0, 1.0, 1.0).unwrap();
    let run = SdeRun {
        dt: 0.01,
        n_steps: 5000,
        seed: 42,
        record_every: 100,
    };
    let paths = sample_paths(&sde, &DVector::zeros(2), &run, 1000).unwrap();
    let times = paths[0].times.clone();
    let vars: Vec<f64> = (0..times.len())
        .map(|i| variance(&paths.iter().map(|p| p.states[i][0]).collect::<Vec<_>>()))
        .collect();
    let fit = linear_fit(&times, &vars);
    let pass = fit.r_squared > 0.95 && started.elapsed().as_secs_f64() < 60.0;
    verdict(
        "free Brownian variance growth",
        pass,
        started,
        &format!("R^2 = {:.4}, slope {:.3} (2 k_bT/(M gamma) = 2)", fit.r_squared, fit.slope),
    );
}

#[test]
fn jarzynski_harmonic_quench() {
    let started = Instant::now();
    let (k_i, k_f, kt) = (1.0, 4.0, 1.0);
    let sde = LinearSde::single_dof(k_i, 1.0, 1.0, kt).unwrap();
    let run = SdeRun {
        dt: 0.005,
        n_steps: 4000,
        seed: 42,
        record_every: 4000,
    };
    let paths = sample_paths(&sde, &DVector::zeros(2), &run, 10_000).unwrap();
    let works: Vec<f64> = paths
        .iter()
        .map(|p| {
            let x = p.last().unwrap()[0];
            0.5 * (k_f - k_i) * x * x
        })
        .collect();
    let est = FreeEnergyEstimate::from_works(&works, kt, 42).unwrap();
    let exact = 0.5 * (k_i / k_f).ln();
    let rel = (est.delta_f - exact).abs() / exact.abs();
    let pass = rel < 0.05 && started.elapsed().as_secs_f64() < 120.0;
    verdict(
        "Jarzynski harmonic quench",
        pass,
        started,
        &format!(
            "deltaF = {:.4} [{:.4}, {:.4}] vs {exact:.4} (rel. error {rel:.3}, 10^4 trajectories)",
            est.delta_f, est.lo, est.hi
        ),
    );
}

#[test]
fn entropy_production() {
    let started = Instant::now();
    let out = EntropySetup::from_config(&config(""), 42).unwrap().run().unwrap();
    let mut pass = started.elapsed().as_secs_f64() < 120.0;
    let mut detail = Vec::new();
    for t in &out.traces {
        let (min, ratio, rho) = (t.min(), t.final_production() / t.peak(), t.transient_spearman());
        pass &= min >= 0.0 && ratio < 1e-3 && rho > 0.9;
        detail.push(format!(
            "gamma={} k={}: min Pi {min:.2e}, final/peak {ratio:.2e}, Spearman {rho:.3}",
            t.gamma, t.k
        ));
    }
    verdict("entropy production", pass, started, &detail.join("; "));
}

#[test]
fn tlb_phenomenology() {
    let started = Instant::now();
    let out = SweepSetup::from_config(&config(""), 42).unwrap().run();
    let slope = out.bottom_two_decade_slope();
    let ratio = out.loss_ratio();
    let pass = slope.abs() < 0.05 && ratio >= 10.0 && started.elapsed().as_secs_f64() < 1200.0;
    verdict(
        "learning-barrier plateau in the scale sweep",
        pass,
        started,
        &format!(
            "ln|deltaF| slope over bottom two decades {slope:.4}/decade, loss(small k)/loss(large k) = {ratio:.1}, plateau |deltaF| = {:.3}",
            out.plateau.delta_f_min
        ),
    );
}

#[test]
fn tlb_trends() {
    let started = Instant::now();
    let expr = ExpressivitySetup::from_config(&config(""), 42).unwrap().run();
    let barriers = expr.barriers();
    let in_ns = monotone_within(&barriers, &expr.half_widths());
    let fit = expr.exponent_fit();
    let exponent_ok = (fit.slope - 1.0).abs() <= 0.3;

    let heat = HeatmapSetup::from_config(&config(""), 42).unwrap().run();
    let (in_t, in_gamma) = heat.monotone();
    let (_, r2) = heat.proportionality();
    let gamma_row: Vec<String> = (0..heat.gammas.len())
        .map(|g| format!("{:.3}", heat.cell(g, heat.temperatures.len() - 1).plateau.delta_f_min))
        .collect();

    let pass = in_ns && exponent_ok && in_t && in_gamma;
    verdict(
        "learning-barrier trends",
        pass,
        started,
        &format!(
            "monotone in N_s: {in_ns} ({:?}); exponent {:.3} +- {:.3}; monotone in T: {in_t}; monotone in gamma: {in_gamma} (T = {} row: {}); R^2 against k_bT gamma {r2:.3}",
            barriers.iter().map(|b| format!("{b:.3}")).collect::<Vec<_>>(),
            fit.slope,
            fit.slope_stderr,
            heat.temperatures.last().unwrap(),
            gamma_row.join(", ")
        ),
    );
}

#[test]
fn lattice_against_network_baselines() {
    let started = Instant::now();
    let mut passed = 0;
    let mut detail = Vec::new();
    for f in ["quadratic_xy2", "sin_cos_xy", "gauss_bump_xy"] {
        let cfg = config(&format!("data.function = {f}\nmlp.lr = 0.05"));
        let out = FitSetup::from_config(&cfg, 42).unwrap().run().unwrap();
        let ss = out.ss_tail_loss();
        let mlp = out.mlp_tail_loss().unwrap();
        let vs_oracle = ss / out.oracle_loss;
        let vs_mlp = ss / mlp;
        let ok = vs_oracle <= 10.0 && (0.1..=10.0).contains(&vs_mlp);
        passed += ok as usize;
        detail.push(format!(
            "{f}: SS {ss:.2e} = {vs_oracle:.1}x oracle, {vs_mlp:.2}x MLP ({mlp:.2e}), MLPf {:.2e} -> {}",
            out.mlpf_tail_loss().unwrap(),
            if ok { "ok" } else { "miss" }
        ));
    }
    verdict(
        "lattice vs MLP on 2 of 3 functions",
        passed >= 2,
        started,
        &format!("{passed}/3; {}", detail.join("; ")),
    );
}

fn random_instance(rng: &mut ChaCha8Rng) -> (LatticeSpec, GridState, SpringBatch, PhysicsParams) {
    let d = rng.random_range(1..=3);
    let m = rng.random_range(1..=2);
    let sticks: Vec<usize> = (0..d).map(|_| rng.random_range(1..=4)).collect();
    let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..0.0)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.5..3.0)).collect();
    let spec = LatticeSpec::covering(&lo, &hi, &sticks, m).unwrap();
    let n = spec.node_count() * m;
    let positions: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let state = GridState::from_parts(&spec, positions, vec![0.0; n]).unwrap();
    let count = rng.random_range(1..=12);
    let inputs: Vec<Vec<f64>> = (0..count)
        .map(|_| lo.iter().zip(&hi).map(|(a, b)| rng.random_range(*a..=*b)).collect())
        .collect();
    let targets: Vec<Vec<f64>> = (0..count).map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let batch = SpringBatch::new(&spec, inputs, targets).unwrap();
    let params = PhysicsParams {
        stiffness: rng.random_range(0.1..10.0),
        ..PhysicsParams::default()
    };
    (spec, state, batch, params)
}

fn force_matches_gradient(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let h = 1e-5;
    for i in 0..20 {
        let (spec, state, batch, params) = random_instance(rng);
        let force = spring_force(&spec, &state, &params, &batch).unwrap();
        for j in 0..force.len() {
            let energy = |delta: f64| {
                let mut s = state.clone();
                s.positions[j] += delta;
                potential_energy(&spec, &s, &params, &batch).unwrap()
            };
            let fd = -(energy(h) - energy(-h)) / (2.0 * h);
            let tol = 1e-6_f64.max(1e-6 * force[j].abs());
            if (force[j] - fd).abs() > tol {
                return Err(format!("instance {i}, entry {j}: force {} vs {fd}", force[j]));
            }
        }
    }
    Ok(())
}

fn mass_is_spd() -> Result<(), String> {
    let shapes: [&[usize]; 9] = [&[1], &[7], &[63], &[1, 1], &[3, 5], &[7, 7], &[1, 1, 1], &[2, 3, 3], &[3, 3, 3]];
    for sticks in shapes {
        let d = sticks.len();
        let spec = LatticeSpec::covering(&vec![0.0; d], &vec![1.0; d], sticks, 1).unwrap();
        let mass = assemble_mass(&spec, &PhysicsParams::default()).map_err(|e| e.to_string())?;
        let min = mass.eigenvalues().into_iter().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(format!("{} nodes: smallest eigenvalue {min}", spec.node_count()));
        }
    }
    Ok(())
}

fn partition_of_unity(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..200 {
        let (spec, _, _, _) = random_instance(rng);
        let u: Vec<f64> = spec.origin().iter().zip(spec.upper()).map(|(a, b)| rng.random_range(*a..=b)).collect();
        let total = spec.interpolation_weights(&u).unwrap().total();
        if (total - 1.0).abs() > 1e-12 {
            return Err(format!("weights sum to {total} at {u:?}"));
        }
    }
    Ok(())
}

fn bit_exact_replay() -> Result<(), String> {
    let data = synthesize(
        &SyntheticSpec {
            function: FunctionId::Cos,
            domain: vec![(0.0, std::f64::consts::TAU)],
            n_points: 40,
            noise_sigma: 0.05,
        },
        9,
    )
    .unwrap();
    let spec = LatticeSpec::covering(&[0.0], &[std::f64::consts::TAU], &[6], 1).unwrap();
    let params = PhysicsParams {
        temperature: 0.1,
        ..PhysicsParams::default()
    };
    let schedule = TrainSchedule {
        epochs: 200,
        batch_size: 8,
        inner_steps: 5,
        seed: 5,
        replica: 3,
        ..TrainSchedule::default()
    };
    let a = train(&spec, &params, &data, &schedule).unwrap();
    let b = train(&spec, &params, &data, &schedule).unwrap();
    let same = a.to_csv() == b.to_csv()
        && a.final_state.positions.iter().zip(&b.final_state.positions).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.ledger.work.to_bits() == b.ledger.work.to_bits();
    if same {
        Ok(())
    } else {
        Err("two runs with the same seed differ".into())
    }
}

fn mlp_gradient(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let h = 1e-6;
    for i in 0..20 {
        let d = rng.random_range(1..=3);
        let m = rng.random_range(1..=2);
        let hidden = rng.random_range(1..=8);
        let n = rng.random_range(1..=10);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let data = Dataset::new(inputs, targets, "random").unwrap();
        let net = MlpParams::init(d, hidden, m, true, rng.random()).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let g = net.grad(&data, &all).to_flat();
        let flat = net.to_flat();
        for j in 0..flat.len() {
            let loss = |delta: f64| {
                let mut p = flat.clone();
                p[j] += delta;
                net.from_flat(&p).loss(&data)
            };
            let fd = (loss(h) - loss(-h)) / (2.0 * h);
            if (g[j] - fd).abs() > 1e-5_f64.max(1e-5 * g[j].abs()) {
                return Err(format!("instance {i}, parameter {j}: backprop {} vs {fd}", g[j]));
            }
        }
    }
    Ok(())
}

#[test]
fn property_suites() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let results = [
        ("force vs finite differences", force_matches_gradient(&mut rng)),
        ("mass matrix SPD up to 64 nodes", mass_is_spd()),
        ("partition of unity", partition_of_unity(&mut rng)),
        ("bit-exact replay", bit_exact_replay()),
        ("MLP backprop vs finite differences", mlp_gradient(&mut rng)),
    ];
    let pass = results.iter().all(|r| r.1.is_ok());
    let detail: Vec<String> = results
        .iter()
        .map(|(name, r)| match r {
            Ok(()) => format!("{name} ok"),
            Err(e) => format!("{name} FAILED: {e}"),
        })
        .collect();
    verdict("property suites", pass, started, &detail.join("; "));
}
