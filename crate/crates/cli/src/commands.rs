use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qarrow_core::arrow::{build_histogram, predicted_mean_arrow, ArrowSummary};
use qarrow_core::dynamics::{run_trajectory, FeedbackConfig, HamiltonianSpec, System, TrajectoryMode};
use qarrow_core::engine::{delay_steps_for_fraction, run_engine, EngineConfig, EngineSummary};
use qarrow_core::ensemble::{lindblad_reference, run_arrow_ensemble, run_open_reverse, EnsembleConfig, Experiment, Physics};
use qarrow_core::measurement::MeasurementConfig;
use qarrow_core::qstate::{trace_distance, Observable};
use qarrow_core::stats::{mann_kendall, MannKendall};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

fn system(cfg: &RunConfig, eta: f64, fb: FeedbackConfig) -> Result<System, CliError> {
    let meas = MeasurementConfig::new(1.0, cfg.dt(), eta, Observable::pauli_z())?;
    Ok(System::new(meas, HamiltonianSpec::qubit_benchmark(cfg.omega_tau)?, fb)?)
}

fn feedback(chi: f64, delay_steps: usize) -> Result<FeedbackConfig, CliError> {
    if chi == 0.0 {
        Ok(FeedbackConfig::disabled())
    } else {
        Ok(FeedbackConfig::new(chi, delay_steps)?)
    }
}

fn physics(cfg: &RunConfig, sys: System) -> Result<Physics, CliError> {
    Ok(Physics::new(sys, cfg.initial.clone(), cfg.steps)?)
}

/// Creates `dir/name` and writes the manifest line before `body`.
fn write_csv(cfg: &RunConfig, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<PathBuf, CliError> {
    let path = cfg.out.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "{}", cfg.manifest())?;
    body(&mut w)?;
    w.flush()?;
    Ok(path)
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    experiment: String,
    config: &'a str,
    seed: u64,
    settings: &'a std::collections::BTreeMap<String, String>,
}

fn write_json<T: Serialize>(cfg: &RunConfig, settings: &std::collections::BTreeMap<String, String>, name: &str, results: &T) -> Result<PathBuf, CliError> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        manifest: Manifest<'a>,
        results: &'a T,
    }
    let doc = Doc {
        manifest: Manifest {
            version: env!("CARGO_PKG_VERSION"),
            experiment: cfg.experiment.to_string(),
            config: &cfg.digest,
            seed: cfg.seed,
            settings,
        },
        results,
    };
    let path = cfg.out.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(path)
}

pub fn write_timing(out: &Path, experiment: &str, seconds: f64, workers: Option<usize>) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Timing<'a> {
        experiment: &'a str,
        wall_seconds: f64,
        workers: Option<usize>,
    }
    let w = File::create(out.join("run_timing.json"))?;
    serde_json::to_writer_pretty(
        w,
        &Timing {
            experiment,
            wall_seconds: seconds,
            workers,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Comparison {
    steps: usize,
    max_trace_distance: f64,
    mean_trace_distance: f64,
    max_abs_dz: f64,
}

pub fn replicate(cfg: &RunConfig, settings: &std::collections::BTreeMap<String, String>) -> Result<Vec<PathBuf>, CliError> {
    let sys = system(cfg, cfg.eta[0], FeedbackConfig::disabled())?;
    let mut noise = qarrow_core::rng::RandomStream::new(cfg.seed, 0);
    let fwd = run_trajectory(&cfg.initial, &sys, cfg.steps, TrajectoryMode::Monitored(&mut noise), true)?;
    let rep = run_trajectory(&cfg.initial, &sys, cfg.steps, TrajectoryMode::Replica(&fwd.record), true)?;
    let (fs, rs) = match (&fwd.states, &rep.states) {
        (Some(f), Some(r)) => (f, r),
        _ => return Err(CliError::Runtime("trajectory states were not kept".into())),
    };
    let mut max_td: f64 = 0.0;
    let mut sum_td = 0.0;
    for (a, b) in fs.iter().zip(rs) {
        let d = trace_distance(a, b)?;
        max_td = max_td.max(d);
        sum_td += d;
    }
    let max_abs_dz = fwd
        .bloch
        .iter()
        .zip(&rep.bloch)
        .map(|(a, b)| (a.z - b.z).abs())
        .fold(0.0, f64::max);
    let comparison = Comparison {
        steps: cfg.steps,
        max_trace_distance: max_td,
        mean_trace_distance: sum_td / fs.len() as f64,
        max_abs_dz,
    };
    Ok(vec![
        write_csv(cfg, "original.csv", |w| Ok(fwd.write_csv(w)?))?,
        write_csv(cfg, "replica.csv", |w| Ok(rep.write_csv(w)?))?,
        write_csv(cfg, "record.csv", |w| Ok(fwd.record.write_csv(w)?))?,
        write_json(cfg, settings, "comparison.json", &comparison)?,
    ])
}

#[derive(Serialize)]
struct ArrowResult {
    #[serde(flatten)]
    summary: ArrowSummary,
    histogram: String,
    /// Largest per-trajectory gap between the two ln R evaluations.
    oracle_max_gap: f64,
}

/// File-name form of a gain, e.g. `-4` or `0.5`.
fn chi_label(chi: f64) -> String {
    format!("{chi}")
}

pub fn arrow(cfg: &RunConfig, settings: &std::collections::BTreeMap<String, String>) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let mut results = Vec::new();
    for &chi in cfg.chi.as_deref().unwrap_or(&[]) {
        let sys = system(cfg, cfg.eta[0], feedback(chi, 1)?)?;
        let phys = physics(cfg, sys)?;
        let e = run_arrow_ensemble(&phys, cfg.n_traj, cfg.seed)?;
        let hist = build_histogram(&e.samples, cfg.bins)?;
        let name = format!("arrow_chi_{}.csv", chi_label(chi));
        files.push(write_csv(cfg, &name, |w| Ok(hist.write_csv(w)?))?);
        let mut summary = hist.summary();
        summary.predicted_mean = predicted_mean_arrow(chi, cfg.t_over_tau, 1.0);
        results.push(ArrowResult {
            summary,
            histogram: name,
            oracle_max_gap: e.oracle_gaps.iter().fold(0.0, |m: f64, g| m.max(g.abs())),
        });
    }
    files.push(write_json(cfg, settings, "summary.json", &results)?);
    Ok(files)
}

#[derive(Serialize)]
struct OpenReverseSummary {
    min_backward_fidelity: f64,
    max_replica_trace_distance: f64,
    entropy_trend_forward: MannKendall,
    entropy_trend_backward: MannKendall,
}

pub fn open_reverse(cfg: &RunConfig, settings: &std::collections::BTreeMap<String, String>) -> Result<Vec<PathBuf>, CliError> {
    let sys = system(cfg, cfg.eta[0], FeedbackConfig::disabled())?;
    let phys = physics(cfg, sys)?;
    let ens = EnsembleConfig {
        n_traj: cfg.n_traj,
        base_seed: cfg.seed,
        grid_points: cfg.grid_points,
        experiment: Experiment::BackwardAverage,
        physics: phys.clone(),
    };
    let o = run_open_reverse(&ens)?;
    let lind = lindblad_reference(&phys, cfg.grid_points)?;
    let s_mon = o.monitored.entropy()?;
    let s_rep = o.replica.entropy()?;
    let s_back = o.backward.entropy()?;
    let s_lind = lind.entropy()?;
    let files = vec![
        write_csv(cfg, "monitored.csv", |w| Ok(o.monitored.write_csv(w)?))?,
        write_csv(cfg, "replica.csv", |w| Ok(o.replica.write_csv(w)?))?,
        write_csv(cfg, "backward.csv", |w| Ok(o.backward.write_csv(w)?))?,
        write_csv(cfg, "lindblad.csv", |w| Ok(lind.write_csv(w)?))?,
        write_csv(cfg, "entropy.csv", |w| {
            writeln!(w, "time,monitored,replica,backward,lindblad")?;
            for k in 0..lind.len() {
                writeln!(w, "{},{},{},{},{}", lind.time_grid[k], s_mon[k], s_rep[k], s_back[k], s_lind[k])?;
            }
            Ok(())
        })?,
        write_json(
            cfg,
            settings,
            "summary.json",
            &OpenReverseSummary {
                min_backward_fidelity: o.min_backward_fidelity,
                max_replica_trace_distance: o.max_replica_trace_distance,
                entropy_trend_forward: mann_kendall(&s_rep),
                entropy_trend_backward: mann_kendall(&s_back),
            },
        )?,
    ];
    Ok(files)
}

#[derive(Serialize)]
struct EngineCase {
    eta: f64,
    delay_over_t: f64,
    delay_steps: usize,
    ledger: String,
    work: String,
    #[serde(flatten)]
    summary: EngineSummary,
}

pub fn engine(cfg: &RunConfig, settings: &std::collections::BTreeMap<String, String>) -> Result<Vec<PathBuf>, CliError> {
    let chi = cfg.chi.as_ref().and_then(|c| c.first().copied()).ok_or_else(|| CliError::Validation("engine requires 'chi'".into()))?;
    let mut files = Vec::new();
    let mut cases = Vec::new();
    for (eta, frac) in cfg.engine_cases() {
        let d = delay_steps_for_fraction(frac, cfg.steps)?;
        let sys = system(cfg, eta, FeedbackConfig::new(chi, d)?)?;
        let ec = EngineConfig {
            physics: physics(cfg, sys)?,
            n_traj: cfg.n_traj,
            base_seed: cfg.seed,
            grid_points: cfg.grid_points,
            baseline: cfg.baseline,
        };
        ec.validate()?;
        let ledger = run_engine(&ec)?;
        let tag = format!("eta{eta}_delay{frac}");
        let ledger_name = format!("ledger_{tag}.csv");
        let work_name = format!("work_{tag}.csv");
        files.push(write_csv(cfg, &ledger_name, |w| Ok(ledger.write_csv(w)?))?);
        files.push(write_csv(cfg, &work_name, |w| Ok(ledger.write_work_csv(w)?))?);
        cases.push(EngineCase {
            eta,
            delay_over_t: frac,
            delay_steps: d,
            ledger: ledger_name,
            work: work_name,
            summary: ledger.summary()?,
        });
    }
    files.push(write_json(cfg, settings, "summary.json", &cases)?);
    Ok(files)
}
