//! Trajectory steppers: monitored evolution with optional delayed feedback,
//! Hamiltonian replay of a measurement record, the backward process, and the
//! deterministic Lindblad reference.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{Error, Result};
use crate::measurement::{kraus_apply, kraus_apply_backward, sample_outcome, MeasurementConfig, MeasurementRecord};
use crate::qstate::{
    bloch_unchecked, covariance_unchecked, expectation, expectation_of, hermitize_and_renormalize,
    purity, unitary_exp_unchecked, von_neumann_entropy, BlochVector, ComplexMatrix, DensityMatrix,
    C64, OPERATOR_HERMITIAN_TOL,
};
use crate::rng::NoiseSource;

/// System Hamiltonian `H` and its time-reversed partner `H̃`.
#[derive(Clone, Debug)]
pub struct HamiltonianSpec {
    h: ComplexMatrix,
    h_reversed: ComplexMatrix,
}

impl HamiltonianSpec {
    pub fn new(h: ComplexMatrix, h_reversed: ComplexMatrix) -> Result<Self> {
        if h.dim() != h_reversed.dim() {
            return Err(Error::DimensionMismatch {
                expected: h.dim(),
                found: h_reversed.dim(),
            });
        }
        h.ensure_hermitian(OPERATOR_HERMITIAN_TOL * h.max_abs().max(1.0))?;
        h_reversed.ensure_hermitian(OPERATOR_HERMITIAN_TOL * h_reversed.max_abs().max(1.0))?;
        Ok(Self { h, h_reversed })
    }

    /// `H̃ = −H`: every term of `H` is odd under time reversal (a field coupled
    /// to a spin). This makes the backward process the exact inverse of the
    /// forward one.
    pub fn with_odd_field(h: ComplexMatrix) -> Result<Self> {
        let rev = h.scale_real(-1.0);
        Self::new(h, rev)
    }

    /// `H̃ = H`.
    pub fn time_symmetric(h: ComplexMatrix) -> Result<Self> {
        Self::new(h.clone(), h)
    }

    /// `H = ω σy / 2`, `H̃ = −H`.
    pub fn qubit_benchmark(omega: f64) -> Result<Self> {
        Self::with_odd_field(ComplexMatrix::pauli_y().scale_real(omega / 2.0))
    }

    pub fn h(&self) -> &ComplexMatrix {
        &self.h
    }

    pub fn h_reversed(&self) -> &ComplexMatrix {
        &self.h_reversed
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackPolicy {
    /// Constant gain `chi`.
    Fixed,
    /// Gain `|chi|·(−sign(r·cov(A,H)))` chosen per step.
    GreedySign,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeedbackConfig {
    pub chi: f64,
    /// Steps between acquiring an outcome and acting on it; 1 means the
    /// outcome is fed back right after the measurement that produced it.
    pub delay_steps: usize,
    pub enabled: bool,
    pub policy: FeedbackPolicy,
}

impl FeedbackConfig {
    pub fn disabled() -> Self {
        Self {
            chi: 0.0,
            delay_steps: 1,
            enabled: false,
            policy: FeedbackPolicy::Fixed,
        }
    }

    pub fn new(chi: f64, delay_steps: usize) -> Result<Self> {
        let fb = Self {
            chi,
            delay_steps,
            enabled: true,
            policy: FeedbackPolicy::Fixed,
        };
        fb.validate()?;
        Ok(fb)
    }

    pub fn greedy(chi_magnitude: f64, delay_steps: usize) -> Result<Self> {
        let fb = Self {
            chi: chi_magnitude.abs(),
            delay_steps,
            enabled: true,
            policy: FeedbackPolicy::GreedySign,
        };
        fb.validate()?;
        Ok(fb)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.chi.is_finite() {
            return Err(Error::InvalidConfig(format!("chi must be finite, got {}", self.chi)));
        }
        if self.enabled && self.delay_steps < 1 {
            return Err(Error::InvalidConfig("feedback delay must be at least one step".into()));
        }
        Ok(())
    }

    /// Gain fed to the recorded-trajectory arrow: `chi` when feedback is on.
    pub fn nominal_chi(&self) -> f64 {
        if self.enabled {
            self.chi
        } else {
            0.0
        }
    }
}

/// FIFO holding outcomes until they are due for feedback.
#[derive(Clone, Debug)]
pub struct DelayBuffer {
    delay: usize,
    queue: VecDeque<f64>,
    due: Option<f64>,
}

impl DelayBuffer {
    pub fn new(delay_steps: usize) -> Self {
        Self {
            delay: delay_steps.max(1),
            queue: VecDeque::with_capacity(delay_steps.max(1)),
            due: None,
        }
    }

    /// Stores the outcome of the current step and returns the outcome due
    /// for feedback now, i.e. the one pushed `delay − 1` calls earlier.
    pub fn push(&mut self, r: f64) -> Option<f64> {
        self.queue.push_back(r);
        self.due = if self.queue.len() == self.delay {
            self.queue.pop_front()
        } else {
            None
        };
        self.due
    }

    pub fn is_filled(&self) -> bool {
        self.due.is_some()
    }

    pub fn due(&self) -> Result<f64> {
        self.due.ok_or(Error::BufferUnderflow)
    }
}

/// Outcome fed back during step `j` of a record, given the delay.
pub fn feedback_outcome_for_step(record: &MeasurementRecord, step: usize, delay_steps: usize) -> Result<Option<f64>> {
    let lag = delay_steps.max(1) - 1;
    if step < lag {
        Ok(None)
    } else {
        record.get(step - lag).map(Some)
    }
}

/// Physics of one run: measurement, Hamiltonian and feedback, with the
/// step propagators cached.
#[derive(Clone, Debug)]
pub struct System {
    measurement: MeasurementConfig,
    hamiltonian: HamiltonianSpec,
    feedback: FeedbackConfig,
    u_forward: ComplexMatrix,
    u_reversed: ComplexMatrix,
    h_is_zero: bool,
}

impl System {
    pub fn new(measurement: MeasurementConfig, hamiltonian: HamiltonianSpec, feedback: FeedbackConfig) -> Result<Self> {
        if measurement.observable().dim() != hamiltonian.dim() {
            return Err(Error::DimensionMismatch {
                expected: measurement.observable().dim(),
                found: hamiltonian.dim(),
            });
        }
        feedback.validate()?;
        let dt = measurement.dt();
        let u_forward = unitary_exp_unchecked(hamiltonian.h(), dt);
        let u_reversed = unitary_exp_unchecked(hamiltonian.h_reversed(), dt);
        let h_is_zero = hamiltonian.h().max_abs() == 0.0 && hamiltonian.h_reversed().max_abs() == 0.0;
        Ok(Self {
            measurement,
            hamiltonian,
            feedback,
            u_forward,
            u_reversed,
            h_is_zero,
        })
    }

    pub fn measurement(&self) -> &MeasurementConfig {
        &self.measurement
    }

    pub fn hamiltonian(&self) -> &HamiltonianSpec {
        &self.hamiltonian
    }

    pub fn feedback(&self) -> &FeedbackConfig {
        &self.feedback
    }

    pub fn dt(&self) -> f64 {
        self.measurement.dt()
    }

    pub fn tau(&self) -> f64 {
        self.measurement.tau()
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }

    /// Same physics with feedback switched off.
    pub fn without_feedback(&self) -> Self {
        Self {
            feedback: FeedbackConfig::disabled(),
            ..self.clone()
        }
    }

    fn check_state(&self, rho: &DensityMatrix) -> Result<()> {
        if rho.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: rho.dim(),
            });
        }
        Ok(())
    }

    fn evolve_free(&self, rho: &DensityMatrix, u: &ComplexMatrix) -> Result<DensityMatrix> {
        if self.h_is_zero {
            return Ok(rho.clone());
        }
        hermitize_and_renormalize(&rho.matrix().conjugate_by(u), rho.is_pure_expected())
    }
}

fn conjugate_with(rho: &DensityMatrix, h: &ComplexMatrix, dt: f64) -> Result<DensityMatrix> {
    let u = unitary_exp_unchecked(h, dt);
    hermitize_and_renormalize(&rho.matrix().conjugate_by(&u), rho.is_pure_expected())
}

/// `−i(r/2τ)[ρ,A] + i(1/4τ)[ρ,A²]`; the second term vanishes for `A² = 𝟙`.
pub fn h_meas(rho: &DensityMatrix, r: f64, cfg: &MeasurementConfig) -> Result<ComplexMatrix> {
    let obs = cfg.observable();
    if rho.dim() != obs.dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.dim(),
            found: rho.dim(),
        });
    }
    let tau = cfg.tau();
    let mut h = rho.matrix().commutator(obs.matrix()).scale(C64::new(0.0, -r / (2.0 * tau)));
    if !obs.is_involutory() {
        let second = rho.matrix().commutator(obs.square()).scale(C64::new(0.0, 1.0 / (4.0 * tau)));
        h = &h + &second;
    }
    Ok(h)
}

/// `χ·(−i r_delayed/(2τ))[ρ,A]`.
pub fn h_fback(rho: &DensityMatrix, r_delayed: f64, cfg: &MeasurementConfig, fb: &FeedbackConfig) -> Result<ComplexMatrix> {
    if !fb.enabled {
        return Err(Error::InvalidConfig("feedback Hamiltonian requested with feedback disabled".into()));
    }
    feedback_hamiltonian(rho, r_delayed, fb.chi, cfg)
}

fn feedback_hamiltonian(rho: &DensityMatrix, r: f64, chi: f64, cfg: &MeasurementConfig) -> Result<ComplexMatrix> {
    let obs = cfg.observable();
    if rho.dim() != obs.dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.dim(),
            found: rho.dim(),
        });
    }
    if chi == 0.0 {
        return Ok(ComplexMatrix::zeros(rho.dim()));
    }
    Ok(rho
        .matrix()
        .commutator(obs.matrix())
        .scale(C64::new(0.0, -chi * r / (2.0 * cfg.tau()))))
}

/// Flow of `sign·χ·h_meas` over one step, integrated with the explicit
/// midpoint rule. The generator depends on the state it moves, so a single
/// left-point exponential would add an O(dt) drift per step.
fn feedback_rotation(rho: &DensityMatrix, r: f64, chi: f64, sys: &System, sign: f64) -> Result<DensityMatrix> {
    let dt = sys.dt();
    let h1 = feedback_hamiltonian(rho, r, chi, &sys.measurement)?.scale_real(sign);
    let half = conjugate_with(rho, &h1, 0.5 * dt)?;
    let h2 = feedback_hamiltonian(&half, r, chi, &sys.measurement)?.scale_real(sign);
    conjugate_with(rho, &h2, dt)
}

/// `−sign(r·cov(A,H))`, or 0 when the product vanishes.
pub fn greedy_sign(rho: &DensityMatrix, r: f64, a: &ComplexMatrix, h: &ComplexMatrix) -> f64 {
    let p = r * covariance_unchecked(rho, a, h);
    if p > 0.0 {
        -1.0
    } else if p < 0.0 {
        1.0
    } else {
        0.0
    }
}

fn effective_chi(sys: &System, rho: &DensityMatrix, r_fb: f64) -> f64 {
    let fb = &sys.feedback;
    match fb.policy {
        FeedbackPolicy::Fixed => fb.chi,
        FeedbackPolicy::GreedySign => {
            fb.chi.abs() * greedy_sign(rho, r_fb, sys.measurement.observable().matrix(), sys.hamiltonian.h())
        }
    }
}

/// Everything produced by one monitored step.
#[derive(Clone, Debug)]
pub struct ForwardStep {
    /// State after the free evolution, from which `r` was sampled.
    pub pre_measurement: DensityMatrix,
    pub post_measurement: DensityMatrix,
    /// State at the end of the step (after feedback, if any).
    pub state: DensityMatrix,
    pub r: f64,
    /// Outcome that drove the feedback unitary, if feedback acted.
    pub feedback_outcome: Option<f64>,
    /// Gain actually applied (0 when feedback did not act).
    pub chi_applied: f64,
}

/// One monitored step: `e^{−iH dt}`, sample `r`, Kraus update, then the
/// feedback unitary `e^{−iH_fback dt}` built from the post-measurement state
/// and the outcome due from the delay buffer.
pub fn step_forward(
    state: &DensityMatrix,
    sys: &System,
    buffer: &mut DelayBuffer,
    noise: &mut dyn NoiseSource,
) -> Result<ForwardStep> {
    sys.check_state(state)?;
    let pre = sys.evolve_free(state, &sys.u_forward)?;
    let r = sample_outcome(&pre, &sys.measurement, noise)?;
    let post = kraus_apply(&pre, r, &sys.measurement)?;
    let mut feedback_outcome = None;
    let mut chi_applied = 0.0;
    let mut next = None;
    if sys.feedback.enabled {
        if let Some(r_fb) = buffer.push(r) {
            feedback_outcome = Some(r_fb);
            chi_applied = effective_chi(sys, &post, r_fb);
            if chi_applied != 0.0 {
                next = Some(feedback_rotation(&post, r_fb, chi_applied, sys, 1.0)?);
            }
        }
    }
    let state = next.unwrap_or_else(|| post.clone());
    Ok(ForwardStep {
        pre_measurement: pre,
        post_measurement: post,
        state,
        r,
        feedback_outcome,
        chi_applied,
    })
}

/// Replays outcome `r` unitarily: `e^{−iH dt}` followed by the flow of
/// `h_meas`, integrated with an explicit midpoint rule.
pub fn step_replica(state: &DensityMatrix, sys: &System, r: f64) -> Result<DensityMatrix> {
    step_replica_with_generator(state, sys, r).map(|(rho, _)| rho)
}

/// [`step_replica`] that also returns the measurement generator applied
/// after the free evolution, so the step can be undone exactly by
/// [`unstep_replica`].
pub fn step_replica_with_generator(state: &DensityMatrix, sys: &System, r: f64) -> Result<(DensityMatrix, ComplexMatrix)> {
    sys.check_state(state)?;
    if !r.is_finite() {
        return Err(Error::NonFiniteOutcome(r));
    }
    let dt = sys.dt();
    let a = sys.evolve_free(state, &sys.u_forward)?;
    let h1 = h_meas(&a, r, &sys.measurement)?;
    let half = conjugate_with(&a, &h1, 0.5 * dt)?;
    let h2 = h_meas(&half, r, &sys.measurement)?;
    Ok((conjugate_with(&a, &h2, dt)?, h2))
}

/// Drives `state` for one step with `−H − h` in reverse order, inverting a
/// replica step whose measurement generator was `h`.
pub fn unstep_replica(state: &DensityMatrix, sys: &System, generator: &ComplexMatrix) -> Result<DensityMatrix> {
    sys.check_state(state)?;
    let rho = conjugate_with(state, generator, -sys.dt())?;
    if sys.h_is_zero {
        return Ok(rho);
    }
    hermitize_and_renormalize(&rho.matrix().conjugate_by(&sys.u_forward.adjoint()), rho.is_pure_expected())
}

/// One step of the backward process for forward outcome `r`: the
/// negated-field feedback unitary (when `r_fb` is due), then `M_{−r}`, then
/// `e^{−iH̃ dt}`.
pub fn step_backward(state: &DensityMatrix, sys: &System, r: f64, r_fb: Option<f64>) -> Result<DensityMatrix> {
    sys.check_state(state)?;
    let mut rho = state.clone();
    if sys.feedback.enabled {
        if let Some(r_fb) = r_fb {
            let chi = effective_chi(sys, &rho, r_fb);
            if chi != 0.0 {
                rho = feedback_rotation(&rho, r_fb, chi, sys, -1.0)?;
            }
        }
    }
    let rho = kraus_apply_backward(&rho, r, &sys.measurement)?;
    sys.evolve_free(&rho, &sys.u_reversed)
}

fn lindblad_rhs(rho: &ComplexMatrix, h: &ComplexMatrix, a: &ComplexMatrix, tau: f64) -> ComplexMatrix {
    let unitary = h.commutator(rho).scale(C64::new(0.0, -1.0));
    let dephasing = a.commutator(&a.commutator(rho)).scale_real(-1.0 / (8.0 * tau));
    &unitary + &dephasing
}

/// Largest Hermiticity/trace drift accepted from one Lindblad step.
pub const LINDBLAD_DRIFT_TOL: f64 = 1e-8;

/// One classical fourth-order Runge–Kutta step of
/// `dρ/dt = −i[H,ρ] − (1/8τ)[A,[A,ρ]]`.
pub fn step_lindblad(rho: &DensityMatrix, sys: &System) -> Result<DensityMatrix> {
    sys.check_state(rho)?;
    let dt = sys.dt();
    let (h, a, tau) = (sys.hamiltonian.h(), sys.measurement.observable().matrix(), sys.tau());
    let y = rho.matrix();
    let f = |m: &ComplexMatrix| lindblad_rhs(m, h, a, tau);
    let k1 = f(y);
    let k2 = f(&(y + &k1.scale_real(0.5 * dt)));
    let k3 = f(&(y + &k2.scale_real(0.5 * dt)));
    let k4 = f(&(y + &k3.scale_real(dt)));
    let incr = &(&k1 + &k4) + &(&k2 + &k3).scale_real(2.0);
    let next = y + &incr.scale_real(dt / 6.0);
    let trace_drift = (next.trace() - C64::new(1.0, 0.0)).norm();
    let herm_drift = next.hermiticity_residual();
    if trace_drift > LINDBLAD_DRIFT_TOL || herm_drift > LINDBLAD_DRIFT_TOL {
        return Err(Error::Integrator(format!(
            "Lindblad step drift: trace {trace_drift:.3e}, Hermiticity {herm_drift:.3e}"
        )));
    }
    hermitize_and_renormalize(&next, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Monitored,
    Replica,
    Backward,
    Lindblad,
}

pub enum TrajectoryMode<'a> {
    /// Sample outcomes from `noise` and record them.
    Monitored(&'a mut dyn NoiseSource),
    /// Drive with `H + h_meas` built from a recorded run.
    Replica(&'a MeasurementRecord),
    /// Run the backward process of a recorded run, starting from its final
    /// state and consuming outcomes last-to-first.
    Backward(&'a MeasurementRecord),
    Lindblad,
}

/// Per-step scalars: index `k` refers to the state after `k` steps.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub dt: f64,
    pub tau: f64,
    /// Gain of the feedback that generated the run (0 without feedback).
    pub chi: f64,
    pub expect_a: Vec<f64>,
    pub expect_h: Vec<f64>,
    pub purity: Vec<f64>,
    pub entropy: Vec<f64>,
    /// Bloch coordinates; empty unless the system is a qubit.
    pub bloch: Vec<BlochVector>,
    pub record: MeasurementRecord,
    pub final_state: DensityMatrix,
    pub states: Option<Vec<DensityMatrix>>,
}

impl Trajectory {
    fn start(kind: TrajectoryKind, sys: &System, record: MeasurementRecord, steps: usize, keep_states: bool, initial: &DensityMatrix) -> Self {
        let cap = steps + 1;
        Self {
            kind,
            dt: sys.dt(),
            tau: sys.tau(),
            chi: sys.feedback.nominal_chi(),
            expect_a: Vec::with_capacity(cap),
            expect_h: Vec::with_capacity(cap),
            purity: Vec::with_capacity(cap),
            entropy: Vec::with_capacity(cap),
            bloch: Vec::with_capacity(if sys.dim() == 2 { cap } else { 0 }),
            record,
            final_state: initial.clone(),
            states: keep_states.then(|| Vec::with_capacity(cap)),
        }
    }

    fn observe(&mut self, rho: &DensityMatrix, sys: &System) -> Result<()> {
        self.expect_a.push(expectation(rho, sys.measurement.observable())?);
        self.expect_h.push(expectation_of(rho, sys.hamiltonian.h())?);
        self.purity.push(purity(rho));
        self.entropy.push(von_neumann_entropy(rho));
        if rho.dim() == 2 {
            self.bloch.push(bloch_unchecked(rho.matrix()));
        }
        if let Some(states) = self.states.as_mut() {
            states.push(rho.clone());
        }
        self.final_state = rho.clone();
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.expect_a.len().saturating_sub(1)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt / self.tau
    }

    /// CSV with columns `step,time,x,y,z,expect_a,expect_h,purity,entropy,r`.
    ///
    /// Row `k` holds the state after `k` steps and the outcome of step `k`
    /// (monitored and replica runs; blank on the last row and for other
    /// kinds). Bloch columns are blank for non-qubit systems.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,time,x,y,z,expect_a,expect_h,purity,entropy,r")?;
        let with_r = matches!(self.kind, TrajectoryKind::Monitored | TrajectoryKind::Replica);
        for k in 0..self.expect_a.len() {
            let (x, y, z) = match self.bloch.get(k) {
                Some(v) => (v.x.to_string(), v.y.to_string(), v.z.to_string()),
                None => (String::new(), String::new(), String::new()),
            };
            let r = if with_r {
                self.record.outcomes.get(k).map(|r| r.to_string()).unwrap_or_default()
            } else {
                String::new()
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                k,
                self.time(k),
                x,
                y,
                z,
                self.expect_a[k],
                self.expect_h[k],
                self.purity[k],
                self.entropy[k],
                r
            )?;
        }
        Ok(())
    }
}

/// Runs `steps` steps from `initial` in the requested mode, recording
/// scalars after every step. Full states are kept only if `keep_states`.
pub fn run_trajectory(
    initial: &DensityMatrix,
    sys: &System,
    steps: usize,
    mode: TrajectoryMode<'_>,
    keep_states: bool,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidConfig("a trajectory needs at least one step".into()));
    }
    sys.check_state(initial)?;
    match mode {
        TrajectoryMode::Monitored(noise) => {
            let (seed, index) = noise.stream_key();
            let mut record = MeasurementRecord::new(&sys.measurement, seed, index);
            record.outcomes.reserve(steps);
            let mut traj = Trajectory::start(TrajectoryKind::Monitored, sys, record, steps, keep_states, initial);
            traj.observe(initial, sys)?;
            let mut buffer = DelayBuffer::new(sys.feedback.delay_steps);
            let mut rho = initial.clone();
            for _ in 0..steps {
                let step = step_forward(&rho, sys, &mut buffer, noise)?;
                traj.record.outcomes.push(step.r);
                rho = step.state;
                traj.observe(&rho, sys)?;
            }
            Ok(traj)
        }
        TrajectoryMode::Replica(record) => {
            record.check_compatible(&sys.measurement)?;
            if sys.feedback.enabled {
                return Err(Error::Unsupported("replica mode does not replay feedback".into()));
            }
            let mut traj = Trajectory::start(TrajectoryKind::Replica, sys, record.clone(), steps, keep_states, initial);
            traj.observe(initial, sys)?;
            let mut rho = initial.clone();
            for j in 0..steps {
                rho = step_replica(&rho, sys, record.get(j)?)?;
                traj.observe(&rho, sys)?;
            }
            Ok(traj)
        }
        TrajectoryMode::Backward(record) => {
            record.check_compatible(&sys.measurement)?;
            if steps > record.len() {
                return Err(Error::RecordExhausted {
                    step: steps - 1,
                    len: record.len(),
                });
            }
            let mut traj = Trajectory::start(TrajectoryKind::Backward, sys, record.clone(), steps, keep_states, initial);
            traj.observe(initial, sys)?;
            let mut rho = initial.clone();
            for j in (0..steps).rev() {
                let r_fb = if sys.feedback.enabled {
                    feedback_outcome_for_step(record, j, sys.feedback.delay_steps)?
                } else {
                    None
                };
                rho = step_backward(&rho, sys, record.get(j)?, r_fb)?;
                traj.observe(&rho, sys)?;
            }
            Ok(traj)
        }
        TrajectoryMode::Lindblad => {
            let record = MeasurementRecord::new(&sys.measurement, 0, 0);
            let mut traj = Trajectory::start(TrajectoryKind::Lindblad, sys, record, steps, keep_states, initial);
            let mut rho = initial.clone().with_pure_expected(false)?;
            traj.observe(&rho, sys)?;
            for _ in 0..steps {
                rho = step_lindblad(&rho, sys)?;
                traj.observe(&rho, sys)?;
            }
            Ok(traj)
        }
    }
}
