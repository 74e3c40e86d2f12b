//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting unless `QARROW_ACCEPTANCE_STRICT=1`, in which
//! case any FAIL gives exit code 1.

use std::f64::consts::PI;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngSeed, TestRunner};

use qarrow_core::arrow::{predicted_mean_arrow, ArrowTracker};
use qarrow_core::dynamics::{
    run_trajectory, step_forward, step_replica, DelayBuffer, FeedbackConfig, HamiltonianSpec, System, TrajectoryMode,
};
use qarrow_core::engine::{delay_steps_for_fraction, run_engine, BaselineMode, EngineConfig, EngineLedger};
use qarrow_core::ensemble::{
    lindblad_reference, merge_stats, run_arrow_ensemble, run_monitored, run_open_reverse, with_workers,
    EnsembleConfig, EnsembleStats, Experiment, Physics,
};
use qarrow_core::measurement::{kraus_apply, kraus_apply_backward, sample_outcome, MeasurementConfig};
use qarrow_core::qstate::{
    density_from_bloch, expectation, purity, trace_distance, BlochVector, DensityMatrix, Observable,
};
use qarrow_core::rng::{NoiseSource, RandomStream};
use qarrow_core::stats::{mann_kendall, RunningStats, Trend};

const TAU: f64 = 1.0;
const DT: f64 = 1e-3;
const N_ENSEMBLE: u64 = 10_000;
const SIGMAS: f64 = 3.0;

const REPLICA_MAX_TRACE_DISTANCE: f64 = 0.01;
const REPLICA_STEP_RMS: f64 = 1e-5;
const REPLICA_RUNTIME_S: f64 = 1.0;
const ARROW_REPORTED_MEANS: [f64; 4] = [-0.516, -0.022, 1.524, 2.046];
const ARROW_CHIS: [f64; 4] = [-4.0, -3.0, 0.0, 1.0];
const ORACLE_MAX_GAP: f64 = 0.05;
const ORACLE_N: u64 = 1000;
const ORACLE_SHRINK_RANGE: (f64, f64) = (3.0, 5.5);
const GRID_MATCH_FRACTION: f64 = 0.95;
const BACKWARD_FIDELITY: f64 = 1.0 - 1e-6;
const ENGINE_PINNING_DISTANCE: f64 = 0.01;
const ENGINE_OUTPUT_REL: f64 = 0.05;

const SEED_REPLICA: u64 = 0x51_0001;
const SEED_ARROW: u64 = 0x51_0002;
const SEED_ORACLE: u64 = 0x51_0003;
const SEED_OPEN: u64 = 0x51_0004;
const SEED_ENGINE: u64 = 0x51_0005;
const SEED_ENERGY: u64 = 0x51_0007;

struct Outcome {
    pass: bool,
    detail: String,
}

fn system(omega_tau: f64, dt: f64, eta: f64, fb: FeedbackConfig) -> System {
    let cfg = MeasurementConfig::new(TAU, dt, eta, Observable::pauli_z()).unwrap();
    System::new(cfg, HamiltonianSpec::qubit_benchmark(omega_tau / TAU).unwrap(), fb).unwrap()
}

fn pure(x: f64, y: f64, z: f64) -> DensityMatrix {
    density_from_bloch(BlochVector::new(x, y, z)).unwrap()
}

fn within(value: f64, target: f64, se: f64) -> bool {
    (value - target).abs() <= SIGMAS * se + 1e-12
}

fn replication() -> Outcome {
    let sys = system(2.0 * PI, DT, 1.0, FeedbackConfig::disabled());
    let rho0 = pure(0.0, 0.0, 1.0);
    let steps = 3000;
    let start = Instant::now();
    let mut noise = RandomStream::new(SEED_REPLICA, 0);
    let fwd = run_trajectory(&rho0, &sys, steps, TrajectoryMode::Monitored(&mut noise), true).unwrap();
    let rep = run_trajectory(&rho0, &sys, steps, TrajectoryMode::Replica(&fwd.record), true).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let fs = fwd.states.as_ref().unwrap();
    let rs = rep.states.as_ref().unwrap();
    let max_td = fs.iter().zip(rs).map(|(a, b)| trace_distance(a, b).unwrap()).fold(0.0, f64::max);
    let mut sq = 0.0;
    let mut step_max: f64 = 0.0;
    for j in 0..steps {
        let one = step_replica(&fs[j], &sys, fwd.record.outcomes[j]).unwrap();
        let d = trace_distance(&one, &fs[j + 1]).unwrap();
        sq += d * d;
        step_max = step_max.max(d);
    }
    let rms = (sq / steps as f64).sqrt();
    Outcome {
        pass: max_td <= REPLICA_MAX_TRACE_DISTANCE && rms <= REPLICA_STEP_RMS && elapsed < REPLICA_RUNTIME_S,
        detail: format!(
            "max trace distance {max_td:.3e} (<= {REPLICA_MAX_TRACE_DISTANCE}), single-step rms {rms:.3e} (<= {REPLICA_STEP_RMS:e}), single-step max {step_max:.3e} (info), runtime {elapsed:.3}s"
        ),
    }
}

fn arrow_means() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (chi, reported) in ARROW_CHIS.iter().zip(ARROW_REPORTED_MEANS) {
        let fb = if *chi == 0.0 {
            FeedbackConfig::disabled()
        } else {
            FeedbackConfig::new(*chi, 1).unwrap()
        };
        let physics = Physics::new(system(8.0 * PI, DT, 1.0, fb), pure(0.0, 0.0, 1.0), 1000).unwrap();
        let e = run_arrow_ensemble(&physics, N_ENSEMBLE, SEED_ARROW).unwrap();
        let s = e.stats();
        let predicted = predicted_mean_arrow(*chi, physics.duration() * TAU, TAU);
        let ok_reported = within(s.mean(), reported, s.stderr());
        let ok_pred = within(s.mean(), predicted, s.stderr());
        pass &= ok_reported && ok_pred;
        parts.push(format!(
            "chi={chi}: {:.4}±{:.4} vs reported {reported} [{}] vs predicted {predicted} [{}]",
            s.mean(),
            s.stderr(),
            if ok_reported { "ok" } else { "off" },
            if ok_pred { "ok" } else { "off" }
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn random_pure_state(seed: u64, index: u64) -> DensityMatrix {
    let mut g = RandomStream::new(seed ^ 0xA5A5, index);
    let (x, y, z) = (g.next_standard_normal(), g.next_standard_normal(), g.next_standard_normal());
    let n = (x * x + y * y + z * z).sqrt();
    pure(x / n, y / n, z / n)
}

fn oracle_max_gap(steps_per_tau: usize) -> f64 {
    let dt = TAU / steps_per_tau as f64;
    let sys = system(8.0 * PI, dt, 1.0, FeedbackConfig::disabled());
    let obs = Observable::pauli_z();
    let mut worst: f64 = 0.0;
    for i in 0..ORACLE_N {
        let mut rho = random_pure_state(SEED_ORACLE, i);
        let mut noise = RandomStream::new(SEED_ORACLE, i);
        let mut buffer = DelayBuffer::new(1);
        let mut tracker = ArrowTracker::new();
        let mut a = expectation(&rho, &obs).unwrap();
        for _ in 0..steps_per_tau {
            let s = step_forward(&rho, &sys, &mut buffer, &mut noise).unwrap();
            let a_next = expectation(&s.state, &obs).unwrap();
            tracker.push(s.r, a, a_next);
            a = a_next;
            rho = s.state;
        }
        let gap = (tracker.ln_r_stratonovich(dt, TAU) - tracker.ln_r_from_probabilities(dt, TAU)).abs();
        worst = worst.max(gap);
    }
    worst
}

fn oracle_equivalence() -> Outcome {
    let coarse = oracle_max_gap(1000);
    let fine = oracle_max_gap(4000);
    let ratio = coarse / fine;
    Outcome {
        pass: coarse <= ORACLE_MAX_GAP && ratio >= ORACLE_SHRINK_RANGE.0 && ratio <= ORACLE_SHRINK_RANGE.1,
        detail: format!(
            "max |gap| {coarse:.3e} at tau/dt=1e3 (<= {ORACLE_MAX_GAP}), {fine:.3e} at tau/dt=4e3, shrink {ratio:.2}x (in [{}, {}])",
            ORACLE_SHRINK_RANGE.0, ORACLE_SHRINK_RANGE.1
        ),
    }
}

fn fraction_within(a: &[RunningStats], target: impl Fn(usize) -> f64) -> f64 {
    let hits = a.iter().enumerate().filter(|(k, s)| within(s.mean(), target(*k), s.stderr())).count();
    hits as f64 / a.len() as f64
}

fn open_dynamics() -> Outcome {
    let physics = Physics::new(system(2.0 * PI, DT, 1.0, FeedbackConfig::disabled()), pure(0.0, 0.0, 1.0), 1000).unwrap();
    let cfg = EnsembleConfig {
        n_traj: N_ENSEMBLE,
        base_seed: SEED_OPEN,
        grid_points: 20,
        experiment: Experiment::BackwardAverage,
        physics: physics.clone(),
    };
    let o = run_open_reverse(&cfg).unwrap();
    let lind = lindblad_reference(&physics, 20).unwrap();
    let g = o.monitored.len();

    let frac_a = fraction_within(&o.monitored.z, |k| lind.z[k].mean());
    let ok_a = frac_a >= GRID_MATCH_FRACTION;
    let ok_b = (0..g).all(|k| {
        let se = o.monitored.z[k].stderr().max(o.replica.z[k].stderr());
        within(o.replica.z[k].mean(), o.monitored.z[k].mean(), se)
    });
    let ok_c = (0..g).all(|k| {
        let fwd = &o.replica.z[g - 1 - k];
        within(o.backward.z[k].mean(), fwd.mean(), fwd.stderr().max(o.backward.z[k].stderr()))
    });
    let fwd_entropy = o.replica.entropy().unwrap();
    let back_entropy = o.backward.entropy().unwrap();
    let mk_f = mann_kendall(&fwd_entropy);
    let mk_b = mann_kendall(&back_entropy);
    let ok_d = mk_f.trend == Trend::Increasing && mk_b.trend == Trend::Decreasing;
    let ok_e = o.min_backward_fidelity >= BACKWARD_FIDELITY;
    let max_dz = (0..g)
        .map(|k| (o.replica.z[k].mean() - o.monitored.z[k].mean()).abs())
        .fold(0.0, f64::max);
    Outcome {
        pass: ok_a && ok_b && ok_c && ok_d && ok_e,
        detail: format!(
            "(a) {:.0}% of grid within 3se of Lindblad [{}]; (b) replica vs monitored [{}], max |dz| {max_dz:.2e}; (c) backward(T-t) vs forward(t) [{}]; (d) entropy MK z fwd {:.2} back {:.2} [{}]; (e) min fidelity 1-{:.1e} [{}]",
            100.0 * frac_a,
            ok(ok_a),
            ok(ok_b),
            ok(ok_c),
            mk_f.z,
            mk_b.z,
            ok(ok_d),
            1.0 - o.min_backward_fidelity,
            ok(ok_e)
        ),
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "off"
    }
}

const ENGINE_OMEGA_TAU: f64 = 2.0 * PI;
const ENGINE_STEPS: usize = 1000;
const ENGINE_GRID: usize = 100;

fn engine_run(eta: f64, delay_fraction: f64) -> EngineLedger {
    let d = delay_steps_for_fraction(delay_fraction, ENGINE_STEPS).unwrap();
    let sys = system(ENGINE_OMEGA_TAU, DT, eta, FeedbackConfig::new(-1.0, d).unwrap());
    let cfg = EngineConfig {
        physics: Physics::new(sys, pure(0.0, -1.0, 0.0), ENGINE_STEPS).unwrap(),
        n_traj: N_ENSEMBLE,
        base_seed: SEED_ENGINE,
        grid_points: ENGINE_GRID,
        baseline: BaselineMode::Analytic,
    };
    run_engine(&cfg).unwrap()
}

fn engine_ideal(l: &EngineLedger) -> Outcome {
    let s = l.summary().unwrap();
    let target = s.predicted_output;
    let rel = (s.extracted.mean - target).abs() / target;
    let pinned = s.max_mean_state_distance <= ENGINE_PINNING_DISTANCE;
    Outcome {
        pass: pinned && rel <= ENGINE_OUTPUT_REL,
        detail: format!(
            "averaged-state distance max {:.2e} (<= {ENGINE_PINNING_DISTANCE}); extracted {:.4}±{:.4} vs {target:.4} ({:.2}% <= {}%); info: baseline-minus-energy {:.4}, -sum(dW) {:.4}",
            s.max_mean_state_distance,
            s.extracted.mean,
            s.extracted.stderr,
            100.0 * rel,
            100.0 * ENGINE_OUTPUT_REL,
            s.output.mean,
            s.formula_output.mean
        ),
    }
}

fn engine_nonideal(ideal: &EngineLedger) -> Outcome {
    let delayed = engine_run(1.0, 0.1);
    let lossy = engine_run(0.7, 0.0);
    let worst = engine_run(0.5, 0.2);
    let t = &delayed.time_grid;
    let last = t.len() - 1;
    let eps = 1e-9;

    let null_before = (0..=last)
        .filter(|&k| t[k] < 0.1 - eps)
        .all(|k| within(delayed.output[k].mean(), 0.0, delayed.output[k].stderr()));
    let positive_after = (0..=last)
        .filter(|&k| t[k] >= 0.2 - eps)
        .all(|k| delayed.output[k].mean() > SIGMAS * delayed.output[k].stderr());
    let dips = (0..=last)
        .filter(|&k| t[k] < 0.4 - eps)
        .any(|k| worst.output[k].mean() < -SIGMAS * worst.output[k].stderr());
    let recovers = worst.output[last].mean() > SIGMAS * worst.output[last].stderr();

    let fin = |l: &EngineLedger| (l.output[last].mean(), l.output[last].stderr());
    let gap = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0) / (a.1 * a.1 + b.1 * b.1).sqrt().max(1e-300);
    let (f0, f1, f2, f3) = (fin(ideal), fin(&delayed), fin(&lossy), fin(&worst));
    let ordered = gap(f0, f1) > SIGMAS && gap(f1, f2) > -SIGMAS && gap(f2, f3) > SIGMAS;
    Outcome {
        pass: null_before && positive_after && dips && recovers && ordered,
        detail: format!(
            "(eta=1,d=0.1T) null before 0.1T [{}], positive from 0.2T [{}]; (eta=0.5,d=0.2T) negative before 0.4T [{}], positive at T [{}]; final outputs {:.4}, {:.4}, {:.4}, {:.4} ordered [{}]",
            ok(null_before),
            ok(positive_after),
            ok(dips),
            ok(recovers),
            f0.0,
            f1.0,
            f2.0,
            f3.0,
            ok(ordered)
        ),
    }
}

fn energy_law() -> Outcome {
    let physics = Physics::new(system(ENGINE_OMEGA_TAU, DT, 1.0, FeedbackConfig::disabled()), pure(0.0, -1.0, 0.0), 1000).unwrap();
    let h0 = -0.5 * ENGINE_OMEGA_TAU / TAU;
    let cfg = EnsembleConfig {
        n_traj: N_ENSEMBLE,
        base_seed: SEED_ENERGY,
        grid_points: 20,
        experiment: Experiment::Monitored,
        physics,
    };
    let s = run_monitored(&cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for (k, e) in s.expect_h.iter().enumerate() {
        let expected = (-s.time_grid[k] / (2.0 * TAU)).exp();
        let ratio = e.mean() / h0;
        let se = e.stderr() / h0.abs();
        if se > 0.0 {
            worst = worst.max((ratio - expected).abs() / se);
        }
        pass &= within(ratio, expected, se);
    }
    Outcome {
        pass,
        detail: format!("21 grid points, worst deviation {worst:.2} stderr (<= {SIGMAS})"),
    }
}

fn prop_runner(cases: u32, seed: u64) -> TestRunner {
    TestRunner::new(PropConfig {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..PropConfig::default()
    })
}

fn bloch_strategy() -> impl Strategy<Value = (f64, f64)> {
    (0.05f64..PI - 0.05, 0.0f64..2.0 * PI)
}

fn invariants() -> Outcome {
    let mut results: Vec<(&str, std::result::Result<(), String>)> = Vec::new();

    let r = prop_runner(64, 1).run(
        &(bloch_strategy(), -4.0f64..4.0, 0u64..1000),
        |((theta, phi), chi, seed)| {
            let fb = if chi.abs() < 0.1 {
                FeedbackConfig::disabled()
            } else {
                FeedbackConfig::new(chi, 1).unwrap()
            };
            let sys = system(2.0 * PI, DT, 1.0, fb);
            let mut rho = pure(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let mut noise = RandomStream::new(seed, 0);
            let mut buffer = DelayBuffer::new(1);
            for _ in 0..200 {
                rho = step_forward(&rho, &sys, &mut buffer, &mut noise).unwrap().state;
                let m = rho.matrix();
                prop_assert!((m.trace().re - 1.0).abs() < 1e-10 && m.trace().im.abs() < 1e-12);
                prop_assert!(m.hermiticity_residual() < 1e-12);
                prop_assert!((purity(&rho) - 1.0).abs() < 1e-8);
            }
            Ok(())
        },
    );
    results.push(("purity/trace/hermiticity", r.map_err(|e| e.to_string())));

    let r = prop_runner(256, 2).run(&(bloch_strategy(), 0.2f64..1.0, -60.0f64..60.0), |((theta, phi), len, r)| {
        let cfg = MeasurementConfig::new(TAU, DT, 1.0, Observable::pauli_z()).unwrap();
        let rho = density_from_bloch(BlochVector::new(
            len * theta.sin() * phi.cos(),
            len * theta.sin() * phi.sin(),
            len * theta.cos(),
        ))
        .unwrap();
        let back = kraus_apply_backward(&kraus_apply(&rho, r, &cfg).unwrap(), r, &cfg).unwrap();
        prop_assert!(trace_distance(&back, &rho).unwrap() < 1e-9);
        Ok(())
    });
    results.push(("kraus reversibility", r.map_err(|e| e.to_string())));

    let r = prop_runner(16, 3).run(&(bloch_strategy(), 0.3f64..=1.0, 0u64..1000), |((theta, phi), eta, seed)| {
        let cfg = MeasurementConfig::new(TAU, DT, eta, Observable::pauli_z()).unwrap();
        let rho = pure(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
        let mut noise = RandomStream::new(seed, 1);
        let samples: RunningStats = (0..20_000).map(|_| sample_outcome(&rho, &cfg, &mut noise).unwrap()).collect();
        let var = TAU / (eta * DT);
        prop_assert!((samples.mean() - theta.cos()).abs() < 4.5 * (var / 20_000.0).sqrt());
        prop_assert!((samples.variance() / var - 1.0).abs() < 0.05);
        Ok(())
    });
    results.push(("measurement mean/variance", r.map_err(|e| e.to_string())));

    let r = prop_runner(8, 4).run(&(0u64..1_000_000), |seed| {
        let parts: Vec<EnsembleStats> = (0..3)
            .map(|p| {
                let physics = Physics::new(system(2.0 * PI, DT, 1.0, FeedbackConfig::disabled()), pure(0.0, 0.0, 1.0), 100).unwrap();
                run_monitored(&EnsembleConfig {
                    n_traj: 5 + p,
                    base_seed: seed + p,
                    grid_points: 10,
                    experiment: Experiment::Monitored,
                    physics,
                })
                .unwrap()
            })
            .collect();
        let left = merge_stats(&merge_stats(&parts[0], &parts[1]).unwrap(), &parts[2]).unwrap();
        let right = merge_stats(&parts[0], &merge_stats(&parts[1], &parts[2]).unwrap()).unwrap();
        for (a, b) in left.z.iter().zip(&right.z).chain(left.expect_h.iter().zip(&right.expect_h)) {
            prop_assert!((a.mean() - b.mean()).abs() < 1e-12 && (a.variance() - b.variance()).abs() < 1e-12);
        }
        Ok(())
    });
    results.push(("merge associativity", r.map_err(|e| e.to_string())));

    let r = prop_runner(6, 5).run(&(0u64..1_000_000, -4.0f64..2.0), |(seed, chi)| {
        let fb = FeedbackConfig::new(chi, 1).unwrap();
        let physics = Physics::new(system(8.0 * PI, DT, 1.0, fb), pure(0.0, 0.0, 1.0), 100).unwrap();
        let cfg = EnsembleConfig {
            n_traj: 200,
            base_seed: seed,
            grid_points: 10,
            experiment: Experiment::Monitored,
            physics: physics.clone(),
        };
        let one = with_workers(Some(1), || run_monitored(&cfg)).unwrap().unwrap();
        let many = with_workers(Some(4), || run_monitored(&cfg)).unwrap().unwrap();
        let bits = |s: &EnsembleStats| s.z.iter().chain(&s.purity).map(|r| (r.mean().to_bits(), r.variance().to_bits())).collect::<Vec<_>>();
        prop_assert_eq!(bits(&one), bits(&many));
        let a1 = with_workers(Some(1), || run_arrow_ensemble(&physics, 150, seed)).unwrap().unwrap();
        let a4 = with_workers(Some(3), || run_arrow_ensemble(&physics, 150, seed)).unwrap().unwrap();
        let lr = |e: &qarrow_core::ensemble::ArrowEnsemble| e.samples.iter().map(|s| s.ln_r.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(lr(&a1), lr(&a4));
        Ok(())
    });
    results.push(("parallel determinism", r.map_err(|e| e.to_string())));

    let pass = results.iter().all(|(_, r)| r.is_ok());
    let detail = results
        .iter()
        .map(|(name, r)| match r {
            Ok(()) => format!("{name} [ok]"),
            Err(e) => format!("{name} [off: {e}]"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { pass, detail }
}

fn main() {
    let strict = std::env::var("QARROW_ACCEPTANCE_STRICT").map(|v| v == "1").unwrap_or(false);
    let mut failures = 0;
    let mut report = |n: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failures += 1;
        }
        println!(
            "{} criterion {n} ({name}): {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "replication", &mut replication);
    report(2, "reshaped arrow means", &mut arrow_means);
    report(3, "ln R oracle equivalence", &mut oracle_equivalence);
    report(4, "open-dynamics emulation", &mut open_dynamics);
    let ideal = engine_run(1.0, 0.0);
    report(5, "engine ideal regime", &mut || engine_ideal(&ideal));
    report(6, "engine non-idealities", &mut || engine_nonideal(&ideal));
    report(7, "zero-feedback energy law", &mut energy_law);
    report(8, "invariant suite", &mut invariants);
    println!("acceptance: {} of 8 criteria passed", 8 - failures);
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
