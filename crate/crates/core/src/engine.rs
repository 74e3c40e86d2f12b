//! Continuous measurement engine: energy pumped in by monitoring, work done
//! by the feedback drive, and the resulting engine output.
//!
//! Three output measures are tracked per trajectory:
//!
//! * `output`: baseline energy minus the system's energy, the baseline being
//!   the no-feedback mean energy.
//! * `extracted`: energy removed by the feedback unitaries, summed step by
//!   step as `⟨H⟩(ρ_post) − ⟨H⟩(ρ_after_feedback)`.
//! * `formula_output`: `−Σ δW` with `δW = χ (r_fb dt/τ) cov(A,H)` evaluated
//!   on the state the feedback acts on.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::{greedy_sign, step_forward, DelayBuffer, FeedbackConfig, HamiltonianSpec, System};
use crate::ensemble::{chunked, Physics};
use crate::error::{Error, Result};
use crate::measurement::MeasurementConfig;
use crate::qstate::{
    covariance_unchecked, expectation_of, hermitize_and_renormalize, trace_distance, ComplexMatrix, DensityMatrix,
};
use crate::rng::RandomStream;
use crate::stats::RunningStats;

fn check_dims(rho: &DensityMatrix, cfg: &MeasurementConfig, ham: &HamiltonianSpec) -> Result<()> {
    for d in [cfg.observable().dim(), ham.dim()] {
        if d != rho.dim() {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: rho.dim(),
            });
        }
    }
    Ok(())
}

/// Energy change due to one measurement outcome, `(r dt/τ)·cov(A,H)`.
pub fn energy_increment_measurement(rho: &DensityMatrix, r: f64, cfg: &MeasurementConfig, ham: &HamiltonianSpec) -> Result<f64> {
    check_dims(rho, cfg, ham)?;
    Ok(r * cfg.dt() / cfg.tau() * covariance_unchecked(rho, cfg.observable().matrix(), ham.h()))
}

/// Work done by the feedback drive over one step,
/// `χ·(r_delayed dt/τ)·cov(A,H)`. Positive values cost energy.
pub fn work_increment_feedback(
    rho: &DensityMatrix,
    r_delayed: f64,
    cfg: &MeasurementConfig,
    fb: &FeedbackConfig,
    ham: &HamiltonianSpec,
) -> Result<f64> {
    if !fb.enabled {
        return Err(Error::InvalidConfig("feedback work requested with feedback disabled".into()));
    }
    Ok(fb.chi * energy_increment_measurement(rho, r_delayed, cfg, ham)?)
}

/// `−sign(r·cov(A,H))`: the gain sign that makes the next feedback step
/// extract energy.
pub fn greedy_sign_policy(rho: &DensityMatrix, r: f64, cfg: &MeasurementConfig, ham: &HamiltonianSpec) -> Result<f64> {
    check_dims(rho, cfg, ham)?;
    Ok(greedy_sign(rho, r, cfg.observable().matrix(), ham.h()))
}

/// Mean work extracted over `duration` in the pinned regime,
/// `−⟨H⟩₀·T/(2τ)`.
pub fn predicted_engine_output(h0_expectation: f64, duration: f64, tau: f64) -> f64 {
    -h0_expectation * duration / (2.0 * tau)
}

/// Delay in steps for a delay given as a fraction of the run length. The
/// first feedback acts at step `d`, so `d = round(f·steps)`, with one step
/// as the physical minimum.
pub fn delay_steps_for_fraction(fraction: f64, steps: usize) -> Result<usize> {
    if !(fraction.is_finite() && (0.0..=1.0).contains(&fraction)) {
        return Err(Error::InvalidConfig(format!("delay fraction {fraction} outside [0, 1]")));
    }
    Ok(((fraction * steps as f64).round() as usize).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// `e^{−t/(2τ)}⟨H⟩₀`; only valid for `A = σ_z`, `H ∝ σ_y`.
    Analytic,
    /// Zero-feedback trajectory driven by the same noise stream.
    Paired,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub physics: Physics,
    pub n_traj: u64,
    pub base_seed: u64,
    pub grid_points: usize,
    pub baseline: BaselineMode,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::InvalidConfig("n_traj must be at least 1".into()));
        }
        let steps = self.physics.steps;
        if self.grid_points == 0 || steps % self.grid_points != 0 {
            return Err(Error::InvalidConfig(format!(
                "grid_points ({}) must divide the step count ({steps})",
                self.grid_points
            )));
        }
        if !self.physics.system.feedback().enabled {
            return Err(Error::InvalidConfig("the engine requires feedback".into()));
        }
        let sys = &self.physics.system;
        let h0 = expectation_of(&self.physics.initial, sys.hamiltonian().h())?;
        if h0 >= 0.0 {
            return Err(Error::InvalidConfig(format!("engine needs ⟨H⟩₀ < 0, got {h0}")));
        }
        if self.baseline == BaselineMode::Analytic && !is_qubit_benchmark(sys) {
            return Err(Error::InvalidConfig(
                "analytic baseline needs A = σ_z and H ∝ σ_y; use the paired baseline".into(),
            ));
        }
        Ok(())
    }
}

fn is_qubit_benchmark(sys: &System) -> bool {
    if sys.dim() != 2 {
        return false;
    }
    let a = sys.measurement().observable().matrix();
    let h = sys.hamiltonian().h();
    let omega = 2.0 * h[(1, 0)].im;
    let expected = ComplexMatrix::pauli_y().scale_real(omega / 2.0);
    a.max_abs_diff(&ComplexMatrix::pauli_z()) < 1e-12 && h.max_abs_diff(&expected) < 1e-12
}

/// Ensemble-averaged engine bookkeeping on a uniform grid.
#[derive(Clone, Debug)]
pub struct EngineLedger {
    /// Elapsed time in units of tau.
    pub time_grid: Vec<f64>,
    pub energy: Vec<RunningStats>,
    /// No-feedback reference energy.
    pub baseline: Vec<f64>,
    /// `baseline − energy`.
    pub output: Vec<RunningStats>,
    pub extracted: Vec<RunningStats>,
    pub formula_output: Vec<RunningStats>,
    /// Cumulative `Σ (r dt/τ) cov(A,H)` on the pre-measurement state.
    pub measurement_input: Vec<RunningStats>,
    /// `|Σ δW − (E(T) − E(0) − measurement input)|` per trajectory.
    pub residual: RunningStats,
    /// Largest trace distance from `ρ₀` seen along any single trajectory
    /// at grid points.
    pub max_trajectory_distance: f64,
    pub h0: f64,
    pub tau: f64,
    state_sum: Vec<ComplexMatrix>,
    baseline_sum: Vec<RunningStats>,
    initial: DensityMatrix,
    pub n_completed: u64,
}

impl EngineLedger {
    fn empty(cfg: &EngineConfig) -> Result<Self> {
        let sys = &cfg.physics.system;
        let stride = cfg.physics.steps / cfg.grid_points;
        let g = cfg.grid_points + 1;
        let time_grid: Vec<f64> = (0..g).map(|k| (k * stride) as f64 * sys.dt() / sys.tau()).collect();
        let h0 = expectation_of(&cfg.physics.initial, sys.hamiltonian().h())?;
        let baseline = match cfg.baseline {
            BaselineMode::Analytic => time_grid.iter().map(|t| (-t / 2.0).exp() * h0).collect(),
            BaselineMode::Paired => vec![0.0; g],
        };
        Ok(Self {
            time_grid,
            energy: vec![RunningStats::new(); g],
            baseline,
            output: vec![RunningStats::new(); g],
            extracted: vec![RunningStats::new(); g],
            formula_output: vec![RunningStats::new(); g],
            measurement_input: vec![RunningStats::new(); g],
            residual: RunningStats::new(),
            max_trajectory_distance: 0.0,
            h0,
            tau: sys.tau(),
            state_sum: vec![ComplexMatrix::zeros(sys.dim()); g],
            baseline_sum: vec![RunningStats::new(); g],
            initial: cfg.physics.initial.clone(),
            n_completed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.time_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_grid.is_empty()
    }

    /// Averaged state at grid point `k`.
    pub fn mean_state(&self, k: usize) -> Result<DensityMatrix> {
        if self.n_completed == 0 {
            return Err(Error::EmptyInput("engine ledger has no trajectories"));
        }
        hermitize_and_renormalize(&self.state_sum[k].scale_real(1.0 / self.n_completed as f64), false)
    }

    /// Largest trace distance of the averaged state from `ρ₀` over the grid.
    pub fn max_mean_state_distance(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..self.len() {
            worst = worst.max(trace_distance(&self.mean_state(k)?, &self.initial)?);
        }
        Ok(worst)
    }

    /// Mean `δW` summed over each grid interval; the first entry is 0.
    pub fn work_increments(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for k in 1..self.len() {
            out[k] = self.formula_output[k - 1].mean() - self.formula_output[k].mean();
        }
        out
    }

    pub fn predicted_output(&self) -> f64 {
        predicted_engine_output(self.h0, *self.time_grid.last().unwrap_or(&0.0) * self.tau, self.tau)
    }

    /// Columns `time,energy_mean,energy_stderr,baseline,output_mean,output_stderr`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time,energy_mean,energy_stderr,baseline,output_mean,output_stderr")?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.time_grid[k],
                self.energy[k].mean(),
                self.energy[k].stderr(),
                self.baseline[k],
                self.output[k].mean(),
                self.output[k].stderr()
            )?;
        }
        Ok(())
    }

    /// Columns `time,extracted_mean,extracted_stderr,formula_output_mean,
    /// formula_output_stderr,measurement_input_mean,measurement_input_stderr`.
    pub fn write_work_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "time,extracted_mean,extracted_stderr,formula_output_mean,formula_output_stderr,measurement_input_mean,measurement_input_stderr"
        )?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.time_grid[k],
                self.extracted[k].mean(),
                self.extracted[k].stderr(),
                self.formula_output[k].mean(),
                self.formula_output[k].stderr(),
                self.measurement_input[k].mean(),
                self.measurement_input[k].stderr()
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<EngineSummary> {
        let last = self.len() - 1;
        let final_of = |s: &[RunningStats]| Estimate {
            mean: s[last].mean(),
            stderr: s[last].stderr(),
        };
        Ok(EngineSummary {
            n: self.n_completed,
            duration: self.time_grid[last],
            h0: self.h0,
            predicted_output: self.predicted_output(),
            output: final_of(&self.output),
            extracted: final_of(&self.extracted),
            formula_output: final_of(&self.formula_output),
            final_energy: final_of(&self.energy),
            max_mean_state_distance: self.max_mean_state_distance()?,
            max_trajectory_distance: self.max_trajectory_distance,
            mean_residual: self.residual.mean(),
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Headline numbers of an engine run.
#[derive(Clone, Debug, Serialize)]
pub struct EngineSummary {
    pub n: u64,
    /// Run length in units of tau.
    pub duration: f64,
    pub h0: f64,
    pub predicted_output: f64,
    pub output: Estimate,
    pub extracted: Estimate,
    pub formula_output: Estimate,
    pub final_energy: Estimate,
    pub max_mean_state_distance: f64,
    pub max_trajectory_distance: f64,
    pub mean_residual: f64,
}

/// Pools two ledgers built from the same configuration.
pub fn merge_ledgers(a: &EngineLedger, b: &EngineLedger) -> Result<EngineLedger> {
    let mut out = a.clone();
    merge_into(&mut out, b)?;
    Ok(out)
}

fn merge_into(a: &mut EngineLedger, b: &EngineLedger) -> Result<()> {
    if a.time_grid != b.time_grid || a.h0 != b.h0 || a.state_sum.first().map(|m| m.dim()) != b.state_sum.first().map(|m| m.dim()) {
        return Err(Error::GridMismatch("engine ledgers differ in grid or initial state".into()));
    }
    let series = [
        (&mut a.energy, &b.energy),
        (&mut a.output, &b.output),
        (&mut a.extracted, &b.extracted),
        (&mut a.formula_output, &b.formula_output),
        (&mut a.measurement_input, &b.measurement_input),
        (&mut a.baseline_sum, &b.baseline_sum),
    ];
    for (dst, src) in series {
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            d.merge(s);
        }
    }
    for (d, s) in a.state_sum.iter_mut().zip(b.state_sum.iter()) {
        *d = &*d + s;
    }
    a.residual.merge(&b.residual);
    a.max_trajectory_distance = a.max_trajectory_distance.max(b.max_trajectory_distance);
    a.n_completed += b.n_completed;
    Ok(())
}

/// Energy path of the zero-feedback partner trajectory on the grid.
fn baseline_path(physics: &Physics, free: &System, stride: usize, seed: u64, index: u64) -> Result<Vec<f64>> {
    let mut noise = RandomStream::new(seed, index);
    let mut buffer = DelayBuffer::new(1);
    let mut rho = physics.initial.clone();
    let h = free.hamiltonian().h();
    let mut out = vec![expectation_of(&rho, h)?];
    for j in 1..=physics.steps {
        rho = step_forward(&rho, free, &mut buffer, &mut noise)?.state;
        if j % stride == 0 {
            out.push(expectation_of(&rho, h)?);
        }
    }
    Ok(out)
}

fn engine_trajectory(cfg: &EngineConfig, free: &System, ledger: &mut EngineLedger, index: u64) -> Result<()> {
    let physics = &cfg.physics;
    let sys = &physics.system;
    let stride = physics.steps / cfg.grid_points;
    let (dt, tau) = (sys.dt(), sys.tau());
    let a = sys.measurement().observable().matrix();
    let h = sys.hamiltonian().h();

    let reference = match cfg.baseline {
        BaselineMode::Analytic => ledger.baseline.clone(),
        BaselineMode::Paired => baseline_path(physics, free, stride, cfg.base_seed, index)?,
    };

    let mut noise = RandomStream::new(cfg.base_seed, index);
    let mut buffer = DelayBuffer::new(sys.feedback().delay_steps);
    let mut rho = physics.initial.clone();
    let e0 = expectation_of(&rho, h)?;
    let (mut extracted, mut work, mut input) = (0.0, 0.0, 0.0);
    let record = |k: usize, rho: &DensityMatrix, extracted: f64, work: f64, input: f64, l: &mut EngineLedger| -> Result<()> {
        let e = expectation_of(rho, h)?;
        l.energy[k].push(e);
        l.output[k].push(reference[k] - e);
        l.baseline_sum[k].push(reference[k]);
        l.extracted[k].push(extracted);
        l.formula_output[k].push(-work);
        l.measurement_input[k].push(input);
        l.state_sum[k] = &l.state_sum[k] + rho.matrix();
        l.max_trajectory_distance = l.max_trajectory_distance.max(trace_distance(rho, &l.initial)?);
        Ok(())
    };
    record(0, &rho, 0.0, 0.0, 0.0, ledger)?;
    for j in 1..=physics.steps {
        let step = step_forward(&rho, sys, &mut buffer, &mut noise)?;
        input += step.r * dt / tau * covariance_unchecked(&step.pre_measurement, a, h);
        if let Some(r_fb) = step.feedback_outcome {
            work += step.chi_applied * r_fb * dt / tau * covariance_unchecked(&step.post_measurement, a, h);
            extracted += expectation_of(&step.post_measurement, h)? - expectation_of(&step.state, h)?;
        }
        rho = step.state;
        if j % stride == 0 {
            record(j / stride, &rho, extracted, work, input, ledger)?;
        }
    }
    let e_final = expectation_of(&rho, h)?;
    ledger.residual.push((work - (e_final - e0 - input)).abs());
    ledger.n_completed += 1;
    Ok(())
}

/// Monitored-plus-feedback ensemble with per-step energy and work
/// accounting. Results do not depend on the rayon pool size.
pub fn run_engine(cfg: &EngineConfig) -> Result<EngineLedger> {
    cfg.validate()?;
    let free = cfg.physics.system.without_feedback();
    let template = EngineLedger::empty(cfg)?;
    let parts = chunked(cfg.n_traj, cfg.base_seed, || Ok(template.clone()), |acc, i| {
        engine_trajectory(cfg, &free, acc, i)
    })?;
    let mut out = template;
    for p in &parts {
        merge_into(&mut out, p)?;
    }
    if cfg.baseline == BaselineMode::Paired {
        out.baseline = out.baseline_sum.iter().map(|s| s.mean()).collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{density_from_bloch, BlochVector, Observable};
    use proptest::prelude::*;

    fn meas(eta: f64) -> MeasurementConfig {
        MeasurementConfig::new(1.0, 1e-3, eta, Observable::pauli_z()).unwrap()
    }

    fn bloch(x: f64, y: f64, z: f64) -> DensityMatrix {
        density_from_bloch(BlochVector::new(x, y, z)).unwrap()
    }

    fn engine_cfg(chi: f64, eta: f64, delay: usize, n: u64, steps: usize, baseline: BaselineMode) -> EngineConfig {
        let sys = System::new(
            meas(eta),
            HamiltonianSpec::qubit_benchmark(1.0).unwrap(),
            FeedbackConfig::new(chi, delay).unwrap(),
        )
        .unwrap();
        EngineConfig {
            physics: Physics::new(sys, bloch(0.0, -1.0, 0.0), steps).unwrap(),
            n_traj: n,
            base_seed: 11,
            grid_points: 10,
            baseline,
        }
    }

    #[test]
    fn zero_covariance_gives_zero_increment() {
        let ham = HamiltonianSpec::qubit_benchmark(1.0).unwrap();
        // cov(σz, σy) = −⟨σz⟩⟨σy⟩ vanishes on the equator's x axis.
        let rho = bloch(1.0, 0.0, 0.0);
        assert_eq!(energy_increment_measurement(&rho, 1.3, &meas(1.0), &ham).unwrap(), 0.0);
    }

    #[test]
    fn increment_arithmetic() {
        // cov = −z·(ω/2)·y = 0.25 for ω = 1, y = −z = −1/√2.
        let ham = HamiltonianSpec::qubit_benchmark(1.0).unwrap();
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let v = energy_increment_measurement(&bloch(0.0, -c, c), 1.0, &meas(1.0), &ham).unwrap();
        assert!((v - 2.5e-4).abs() < 1e-15, "{v}");
    }

    #[test]
    fn work_is_chi_times_measurement_increment() {
        let ham = HamiltonianSpec::qubit_benchmark(1.3).unwrap();
        let rho = bloch(0.3, -0.6, 0.5);
        let m = energy_increment_measurement(&rho, 0.8, &meas(1.0), &ham).unwrap();
        let w = work_increment_feedback(&rho, 0.8, &meas(1.0), &FeedbackConfig::new(-1.0, 1).unwrap(), &ham).unwrap();
        assert_eq!(w, -m);
        let zero = work_increment_feedback(&rho, 0.8, &meas(1.0), &FeedbackConfig::new(0.0, 1).unwrap(), &ham).unwrap();
        assert_eq!(zero, 0.0);
        assert!(work_increment_feedback(&rho, 0.8, &meas(1.0), &FeedbackConfig::disabled(), &ham).is_err());
    }

    #[test]
    fn work_matches_finite_difference_of_feedback_hamiltonian() {
        // δW = tr(ρ dH_fb) with dH_fb = χ(−i r/2τ)[dρ, A] and dρ the
        // unitary change −i[H + H_meas + H_fb, ρ]dt, evaluated by brute force.
        let cfg = meas(1.0);
        let ham = HamiltonianSpec::qubit_benchmark(1.7).unwrap();
        let rho = bloch(0.4, -0.5, 0.6).with_pure_expected(false).unwrap();
        let (chi, r, dt, tau) = (-1.0, 0.8, 1e-3, 1.0);
        let m = rho.matrix();
        let a = ComplexMatrix::pauli_z();
        let i = crate::qstate::C64::new(0.0, 1.0);
        let hm = m.commutator(&a).scale(-i * (r / (2.0 * tau)));
        let total = ham.h() + &(&hm + &hm.scale_real(chi));
        let drho = total.commutator(m).scale(-i * dt);
        let dh_fb = drho.commutator(&a).scale(-i * (chi * r / (2.0 * tau)));
        let oracle = m.trace_product(&dh_fb).re;
        let w = work_increment_feedback(&rho, r, &cfg, &FeedbackConfig::new(chi, 1).unwrap(), &ham).unwrap();
        assert!((w - oracle).abs() < 1e-12, "{w} vs {oracle}");
    }

    #[test]
    fn greedy_sign_cases() {
        let ham = HamiltonianSpec::qubit_benchmark(1.0).unwrap();
        let rho = bloch(0.0, -0.6, 0.8); // cov = −0.8·(−0.3) > 0
        assert_eq!(greedy_sign_policy(&rho, 1.0, &meas(1.0), &ham).unwrap(), -1.0);
        assert_eq!(greedy_sign_policy(&rho, -1.0, &meas(1.0), &ham).unwrap(), 1.0);
        assert_eq!(greedy_sign_policy(&rho, 0.0, &meas(1.0), &ham).unwrap(), 0.0);
    }

    #[test]
    fn predicted_output_values() {
        assert_eq!(predicted_engine_output(0.0, 1.0, 1.0), 0.0);
        assert_eq!(predicted_engine_output(-0.5, 1.0, 1.0), 0.25);
    }

    #[test]
    fn delay_fraction_mapping() {
        assert_eq!(delay_steps_for_fraction(0.0, 1000).unwrap(), 1);
        assert_eq!(delay_steps_for_fraction(0.1, 1000).unwrap(), 100);
        assert!(delay_steps_for_fraction(-0.1, 1000).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = engine_cfg(-1.0, 1.0, 1, 4, 100, BaselineMode::Analytic);
        assert!(c.validate().is_ok());
        c.physics.initial = bloch(0.0, 1.0, 0.0);
        assert!(c.validate().is_err());
        let mut c = engine_cfg(-1.0, 1.0, 1, 4, 100, BaselineMode::Analytic);
        c.physics.system = c.physics.system.without_feedback();
        assert!(c.validate().is_err());
        let mut c = engine_cfg(-1.0, 1.0, 1, 4, 100, BaselineMode::Analytic);
        let sys = System::new(
            MeasurementConfig::new(1.0, 1e-3, 1.0, Observable::pauli_x()).unwrap(),
            HamiltonianSpec::qubit_benchmark(1.0).unwrap(),
            FeedbackConfig::new(-1.0, 1).unwrap(),
        )
        .unwrap();
        c.physics.system = sys;
        assert!(c.validate().is_err());
        c.baseline = BaselineMode::Paired;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn ledger_output_is_baseline_minus_energy() {
        let l = run_engine(&engine_cfg(-1.0, 1.0, 1, 20, 200, BaselineMode::Analytic)).unwrap();
        for k in 0..l.len() {
            assert!((l.output[k].mean() - (l.baseline[k] - l.energy[k].mean())).abs() < 1e-12);
        }
        let w = l.work_increments();
        let total: f64 = w.iter().sum();
        assert!((total + l.formula_output[10].mean()).abs() < 1e-12);
    }

    #[test]
    fn paired_baseline_tracks_free_energy_law() {
        let l = run_engine(&engine_cfg(-1.0, 1.0, 1, 400, 500, BaselineMode::Paired)).unwrap();
        for (k, t) in l.time_grid.iter().enumerate() {
            let analytic = (-t / 2.0).exp() * l.h0;
            assert!((l.baseline[k] - analytic).abs() < 0.03, "{k}: {} vs {analytic}", l.baseline[k]);
        }
    }

    #[test]
    fn greedy_feedback_never_costs_work() {
        let sys = System::new(
            meas(1.0),
            HamiltonianSpec::qubit_benchmark(1.0).unwrap(),
            FeedbackConfig::greedy(1.0, 1).unwrap(),
        )
        .unwrap();
        let cfg = sys.measurement().clone();
        let ham = sys.hamiltonian().clone();
        for i in 0..20 {
            let mut noise = RandomStream::new(5, i);
            let mut buffer = DelayBuffer::new(1);
            let mut rho = bloch(0.0, -0.6, 0.8);
            for _ in 0..200 {
                let s = step_forward(&rho, &sys, &mut buffer, &mut noise).unwrap();
                let r_fb = s.feedback_outcome.unwrap();
                let dw = s.chi_applied * energy_increment_measurement(&s.post_measurement, r_fb, &cfg, &ham).unwrap();
                assert!(dw <= 0.0);
                rho = s.state;
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_ledger() {
        let c = engine_cfg(-1.0, 0.7, 3, 150, 100, BaselineMode::Analytic);
        let a = crate::ensemble::with_workers(Some(1), || run_engine(&c)).unwrap().unwrap();
        let b = crate::ensemble::with_workers(Some(6), || run_engine(&c)).unwrap().unwrap();
        let bits = |l: &EngineLedger| {
            l.energy.iter().chain(l.extracted.iter()).map(|s| s.mean().to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn csv_headers() {
        let l = run_engine(&engine_cfg(-1.0, 1.0, 1, 2, 100, BaselineMode::Analytic)).unwrap();
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,energy_mean,energy_stderr,baseline,output_mean,output_stderr\n"));
        assert_eq!(text.lines().count(), 12);
        let mut buf = Vec::new();
        l.write_work_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("time,extracted_mean"));
        let s = serde_json::to_string(&l.summary().unwrap()).unwrap();
        assert!(s.contains("predicted_output"));
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, rng_seed: proptest::test_runner::RngSeed::Fixed(17), ..ProptestConfig::default() })]

        #[test]
        fn prop_work_over_measurement_ratio_is_chi(
            theta in 0.1f64..3.0, phi in 0.0f64..6.28, len in 0.2f64..1.0,
            r in -4.0f64..4.0, chi in -5.0f64..5.0,
        ) {
            let rho = bloch(len * theta.sin() * phi.cos(), len * theta.sin() * phi.sin(), len * theta.cos());
            let ham = HamiltonianSpec::qubit_benchmark(2.0).unwrap();
            let m = energy_increment_measurement(&rho, r, &meas(1.0), &ham).unwrap();
            let w = work_increment_feedback(&rho, r, &meas(1.0), &FeedbackConfig::new(chi, 1).unwrap(), &ham).unwrap();
            if m != 0.0 {
                prop_assert!((w / m - chi).abs() < 1e-9);
            }
        }
    }
}
