//! Parallel Monte Carlo ensembles.
//!
//! Trajectory `i` always draws its noise from `RandomStream::new(base_seed,
//! i)`. Indices are processed in fixed-size chunks; each chunk is folded
//! sequentially and the chunk results are merged in index order, so the
//! output is bit-identical for any number of worker threads.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arrow::{ArrowSample, ArrowTracker, ChiDecomposition};
use crate::dynamics::{
    step_forward, step_lindblad, step_replica_with_generator, unstep_replica, DelayBuffer, System,
    TrajectoryKind,
};
use crate::error::{Error, Result};
use crate::measurement::MeasurementRecord;
use crate::qstate::{
    bloch_unchecked, expectation, expectation_of, fidelity, hermitize_and_renormalize, purity,
    trace_distance, von_neumann_entropy, ComplexMatrix, DensityMatrix,
};
use crate::rng::RandomStream;
use crate::stats::RunningStats;

/// Trajectories per work unit. Part of the determinism contract: changing
/// it changes floating-point merge order.
pub const CHUNK_SIZE: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Monitored,
    ReplicaAverage,
    BackwardAverage,
    ArrowHistogram,
    Engine,
}

/// Initial state, dynamics and run length shared by every trajectory.
#[derive(Clone, Debug)]
pub struct Physics {
    pub system: System,
    pub initial: DensityMatrix,
    pub steps: usize,
}

impl Physics {
    pub fn new(system: System, initial: DensityMatrix, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("at least one step is required".into()));
        }
        if initial.dim() != system.dim() {
            return Err(Error::DimensionMismatch {
                expected: system.dim(),
                found: initial.dim(),
            });
        }
        Ok(Self {
            system,
            initial,
            steps,
        })
    }

    /// Run length in units of tau.
    pub fn duration(&self) -> f64 {
        self.steps as f64 * self.system.dt() / self.system.tau()
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub n_traj: u64,
    pub base_seed: u64,
    pub grid_points: usize,
    pub experiment: Experiment,
    pub physics: Physics,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::InvalidConfig("n_traj must be at least 1".into()));
        }
        grid_stride(self.physics.steps, self.grid_points).map(|_| ())
    }

    pub fn stride(&self) -> Result<usize> {
        grid_stride(self.physics.steps, self.grid_points)
    }
}

fn grid_stride(steps: usize, grid_points: usize) -> Result<usize> {
    if grid_points == 0 || steps % grid_points != 0 {
        return Err(Error::InvalidConfig(format!(
            "grid_points ({grid_points}) must divide the step count ({steps})"
        )));
    }
    Ok(steps / grid_points)
}

/// Grid-sampled ensemble moments plus the running sum of states, from which
/// the averaged state and its entropy are formed.
#[derive(Clone, Debug)]
pub struct EnsembleStats {
    pub kind: TrajectoryKind,
    /// Elapsed time in units of tau, `grid_points + 1` entries from 0.
    pub time_grid: Vec<f64>,
    pub x: Vec<RunningStats>,
    pub y: Vec<RunningStats>,
    pub z: Vec<RunningStats>,
    pub expect_a: Vec<RunningStats>,
    pub expect_h: Vec<RunningStats>,
    pub purity: Vec<RunningStats>,
    state_sum: Vec<ComplexMatrix>,
    pub n_completed: u64,
}

impl EnsembleStats {
    pub fn empty(kind: TrajectoryKind, time_grid: Vec<f64>, dim: usize) -> Self {
        let g = time_grid.len();
        let bloch_len = if dim == 2 { g } else { 0 };
        Self {
            kind,
            x: vec![RunningStats::new(); bloch_len],
            y: vec![RunningStats::new(); bloch_len],
            z: vec![RunningStats::new(); bloch_len],
            expect_a: vec![RunningStats::new(); g],
            expect_h: vec![RunningStats::new(); g],
            purity: vec![RunningStats::new(); g],
            state_sum: vec![ComplexMatrix::zeros(dim); g],
            time_grid,
            n_completed: 0,
        }
    }

    fn for_physics(kind: TrajectoryKind, physics: &Physics, grid_points: usize) -> Result<Self> {
        let stride = grid_stride(physics.steps, grid_points)?;
        let sys = &physics.system;
        let grid = (0..=grid_points)
            .map(|k| (k * stride) as f64 * sys.dt() / sys.tau())
            .collect();
        Ok(Self::empty(kind, grid, sys.dim()))
    }

    pub fn len(&self) -> usize {
        self.time_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_grid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.state_sum.first().map(|m| m.dim()).unwrap_or(0)
    }

    /// Records `rho` at grid point `k` for the current trajectory.
    pub fn observe(&mut self, k: usize, rho: &DensityMatrix, sys: &System) -> Result<()> {
        if k >= self.len() {
            return Err(Error::GridMismatch(format!("grid index {k} out of range {}", self.len())));
        }
        if !self.x.is_empty() {
            let v = bloch_unchecked(rho.matrix());
            self.x[k].push(v.x);
            self.y[k].push(v.y);
            self.z[k].push(v.z);
        }
        self.expect_a[k].push(expectation(rho, sys.measurement().observable())?);
        self.expect_h[k].push(expectation_of(rho, sys.hamiltonian().h())?);
        self.purity[k].push(purity(rho));
        self.state_sum[k] = &self.state_sum[k] + rho.matrix();
        Ok(())
    }

    pub fn finish_trajectory(&mut self) {
        self.n_completed += 1;
    }

    /// Ensemble-averaged state at grid point `k`.
    pub fn mean_state(&self, k: usize) -> Result<DensityMatrix> {
        if self.n_completed == 0 {
            return Err(Error::EmptyInput("ensemble has no completed trajectories"));
        }
        let m = self.state_sum[k].scale_real(1.0 / self.n_completed as f64);
        hermitize_and_renormalize(&m, false)
    }

    /// Von Neumann entropy of the averaged state at each grid point.
    pub fn entropy(&self) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|k| self.mean_state(k).map(|rho| von_neumann_entropy(&rho)))
            .collect()
    }

    pub fn means(series: &[RunningStats]) -> Vec<f64> {
        series.iter().map(|s| s.mean()).collect()
    }

    pub fn stderrs(series: &[RunningStats]) -> Vec<f64> {
        series.iter().map(|s| s.stderr()).collect()
    }

    /// Columns: `time`, mean and stderr of `x,y,z` (qubits only),
    /// `expect_a`, `expect_h`, `purity`, then the averaged-state `entropy`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut series: Vec<(&str, &Vec<RunningStats>)> = Vec::new();
        if !self.x.is_empty() {
            series.extend([("x", &self.x), ("y", &self.y), ("z", &self.z)]);
        }
        series.extend([
            ("expect_a", &self.expect_a),
            ("expect_h", &self.expect_h),
            ("purity", &self.purity),
        ]);
        let mut header = vec!["time".to_string()];
        for (name, _) in &series {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_stderr"));
        }
        header.push("entropy".into());
        writeln!(w, "{}", header.join(","))?;
        let entropy = self.entropy()?;
        for k in 0..self.len() {
            let mut row = vec![self.time_grid[k].to_string()];
            for (_, s) in &series {
                row.push(s[k].mean().to_string());
                row.push(s[k].stderr().to_string());
            }
            row.push(entropy[k].to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Pooled statistics of two ensembles on the same grid.
pub fn merge_stats(a: &EnsembleStats, b: &EnsembleStats) -> Result<EnsembleStats> {
    let mut out = a.clone();
    merge_into(&mut out, b)?;
    Ok(out)
}

fn merge_into(a: &mut EnsembleStats, b: &EnsembleStats) -> Result<()> {
    if a.time_grid != b.time_grid || a.dim() != b.dim() || a.kind != b.kind {
        return Err(Error::GridMismatch("ensembles have different grids or kinds".into()));
    }
    let pairs = [
        (&mut a.x, &b.x),
        (&mut a.y, &b.y),
        (&mut a.z, &b.z),
        (&mut a.expect_a, &b.expect_a),
        (&mut a.expect_h, &b.expect_h),
        (&mut a.purity, &b.purity),
    ];
    for (dst, src) in pairs {
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            d.merge(s);
        }
    }
    for (d, s) in a.state_sum.iter_mut().zip(b.state_sum.iter()) {
        *d = &*d + s;
    }
    a.n_completed += b.n_completed;
    Ok(())
}

/// Runs `body` for trajectory indices `0..n` in fixed chunks on the current
/// rayon pool, returning the per-chunk accumulators in index order.
pub(crate) fn chunked<A, I, B>(n: u64, base_seed: u64, init: I, body: B) -> Result<Vec<A>>
where
    A: Send,
    I: Fn() -> Result<A> + Sync,
    B: Fn(&mut A, u64) -> Result<()> + Sync,
{
    let chunks = n.div_ceil(CHUNK_SIZE);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init()?;
            for i in c * CHUNK_SIZE..((c + 1) * CHUNK_SIZE).min(n) {
                body(&mut acc, i).map_err(|e| Error::TrajectoryFailed {
                    index: i,
                    seed: base_seed,
                    source: Box::new(e),
                })?;
            }
            Ok(acc)
        })
        .collect()
}

/// Runs `f` on a dedicated pool of `workers` threads (`None`: rayon default).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidConfig("workers must be at least 1".into())),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn fold_stats(mut parts: Vec<EnsembleStats>, template: EnsembleStats) -> Result<EnsembleStats> {
    let mut out = if parts.is_empty() { template } else { parts.remove(0) };
    for p in &parts {
        merge_into(&mut out, p)?;
    }
    Ok(out)
}

/// Monitored run of one trajectory, observing on the grid and keeping the
/// record.
fn monitored_run(physics: &Physics, stride: usize, seed: u64, index: u64, stats: Option<&mut EnsembleStats>) -> Result<(MeasurementRecord, DensityMatrix)> {
    let sys = &physics.system;
    let mut noise = RandomStream::new(seed, index);
    let mut record = MeasurementRecord::new(sys.measurement(), seed, index);
    record.outcomes.reserve(physics.steps);
    let mut buffer = DelayBuffer::new(sys.feedback().delay_steps);
    let mut rho = physics.initial.clone();
    let mut stats = stats;
    if let Some(s) = stats.as_deref_mut() {
        s.observe(0, &rho, sys)?;
    }
    for j in 1..=physics.steps {
        let step = step_forward(&rho, sys, &mut buffer, &mut noise)?;
        record.outcomes.push(step.r);
        rho = step.state;
        if j % stride == 0 {
            if let Some(s) = stats.as_deref_mut() {
                s.observe(j / stride, &rho, sys)?;
            }
        }
    }
    if let Some(s) = stats {
        s.finish_trajectory();
    }
    Ok((record, rho))
}

/// Ensemble of monitored trajectories (Kraus updates plus any feedback).
pub fn run_monitored(cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    cfg.validate()?;
    let stride = cfg.stride()?;
    let physics = &cfg.physics;
    let template = EnsembleStats::for_physics(TrajectoryKind::Monitored, physics, cfg.grid_points)?;
    let parts = chunked(
        cfg.n_traj,
        cfg.base_seed,
        || Ok(template.clone()),
        |acc, i| monitored_run(physics, stride, cfg.base_seed, i, Some(acc)).map(|_| ()),
    )?;
    fold_stats(parts, template)
}

/// Dispatches the averaged-curve experiments.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    match cfg.experiment {
        Experiment::Monitored => run_monitored(cfg),
        Experiment::ReplicaAverage => emulate_open_forward(cfg),
        Experiment::BackwardAverage => emulate_open_backward(cfg),
        Experiment::ArrowHistogram => Err(Error::Unsupported(
            "arrow ensembles produce samples; use run_arrow_ensemble".into(),
        )),
        Experiment::Engine => Err(Error::Unsupported("engine ensembles produce ledgers; use engine::run_engine".into())),
    }
}

/// Averages of the three open-dynamics emulations, built from the same
/// trajectories.
#[derive(Clone, Debug)]
pub struct OpenReverse {
    /// Kraus-updated monitored trajectories.
    pub monitored: EnsembleStats,
    /// Hamiltonian replicas (`H + H_meas`) of the monitored records.
    pub replica: EnsembleStats,
    /// Each replica driven back from its final state with `−H − H_meas`;
    /// the time axis is elapsed backward time.
    pub backward: EnsembleStats,
    /// Smallest fidelity between a backward endpoint and the initial state.
    pub min_backward_fidelity: f64,
    /// Largest replica-vs-monitored trace distance seen at grid points.
    pub max_replica_trace_distance: f64,
}

struct OpenReverseAcc {
    monitored: EnsembleStats,
    replica: EnsembleStats,
    backward: EnsembleStats,
    min_fidelity: f64,
    max_distance: f64,
}

fn open_reverse_trajectory(
    physics: &Physics,
    stride: usize,
    seed: u64,
    index: u64,
    acc: &mut OpenReverseAcc,
    want: (bool, bool, bool),
) -> Result<()> {
    let sys = &physics.system;
    let steps = physics.steps;
    let mut monitored_states = Vec::with_capacity(steps / stride + 1);
    let mut noise = RandomStream::new(seed, index);
    let mut buffer = DelayBuffer::new(sys.feedback().delay_steps);
    let mut outcomes = Vec::with_capacity(steps);
    let mut rho = physics.initial.clone();
    monitored_states.push(rho.clone());
    for j in 1..=steps {
        let step = step_forward(&rho, sys, &mut buffer, &mut noise)?;
        outcomes.push(step.r);
        rho = step.state;
        if j % stride == 0 {
            monitored_states.push(rho.clone());
        }
    }
    if want.0 {
        for (k, s) in monitored_states.iter().enumerate() {
            acc.monitored.observe(k, s, sys)?;
        }
        acc.monitored.finish_trajectory();
    }
    if !(want.1 || want.2) {
        return Ok(());
    }

    let mut generators = Vec::with_capacity(steps);
    let mut rho = physics.initial.clone();
    if want.1 {
        acc.replica.observe(0, &rho, sys)?;
    }
    for (j, &r) in outcomes.iter().enumerate() {
        let (next, h) = step_replica_with_generator(&rho, sys, r)?;
        rho = next;
        generators.push(h);
        if (j + 1) % stride == 0 {
            let k = (j + 1) / stride;
            acc.max_distance = acc.max_distance.max(trace_distance(&rho, &monitored_states[k])?);
            if want.1 {
                acc.replica.observe(k, &rho, sys)?;
            }
        }
    }
    if want.1 {
        acc.replica.finish_trajectory();
    }

    if want.2 {
        acc.backward.observe(0, &rho, sys)?;
        for (m, h) in generators.iter().rev().enumerate() {
            rho = unstep_replica(&rho, sys, h)?;
            if (m + 1) % stride == 0 {
                acc.backward.observe((m + 1) / stride, &rho, sys)?;
            }
        }
        acc.backward.finish_trajectory();
        acc.min_fidelity = acc.min_fidelity.min(fidelity(&rho, &physics.initial)?);
    }
    Ok(())
}

fn open_reverse_impl(cfg: &EnsembleConfig, want: (bool, bool, bool)) -> Result<OpenReverse> {
    cfg.validate()?;
    if cfg.physics.system.feedback().enabled {
        return Err(Error::Unsupported("open-dynamics emulation runs without feedback".into()));
    }
    let stride = cfg.stride()?;
    let physics = &cfg.physics;
    let make = |kind| EnsembleStats::for_physics(kind, physics, cfg.grid_points);
    let template = || -> Result<OpenReverseAcc> {
        Ok(OpenReverseAcc {
            monitored: make(TrajectoryKind::Monitored)?,
            replica: make(TrajectoryKind::Replica)?,
            backward: make(TrajectoryKind::Backward)?,
            min_fidelity: 1.0,
            max_distance: 0.0,
        })
    };
    let parts = chunked(cfg.n_traj, cfg.base_seed, template, |acc, i| {
        open_reverse_trajectory(physics, stride, cfg.base_seed, i, acc, want)
    })?;
    let mut out = template()?;
    for p in &parts {
        merge_into(&mut out.monitored, &p.monitored)?;
        merge_into(&mut out.replica, &p.replica)?;
        merge_into(&mut out.backward, &p.backward)?;
        out.min_fidelity = out.min_fidelity.min(p.min_fidelity);
        out.max_distance = out.max_distance.max(p.max_distance);
    }
    Ok(OpenReverse {
        monitored: out.monitored,
        replica: out.replica,
        backward: out.backward,
        min_backward_fidelity: out.min_fidelity,
        max_replica_trace_distance: out.max_distance,
    })
}

/// Monitored, replica-averaged and backward-averaged curves from one set of
/// trajectories.
pub fn run_open_reverse(cfg: &EnsembleConfig) -> Result<OpenReverse> {
    open_reverse_impl(cfg, (true, true, true))
}

/// Average of Hamiltonian replicas (`H + H_meas`) of in-process records.
pub fn emulate_open_forward(cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    open_reverse_impl(cfg, (false, true, false)).map(|o| o.replica)
}

/// Average of replicas driven backward from their final states with
/// `−H − H_meas(T − t)`.
pub fn emulate_open_backward(cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    open_reverse_impl(cfg, (false, false, true)).map(|o| o.backward)
}

/// Replica average over a bank of stored records.
pub fn replay_records(records: &[MeasurementRecord], physics: &Physics, grid_points: usize) -> Result<EnsembleStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput("record bank"));
    }
    let stride = grid_stride(physics.steps, grid_points)?;
    let sys = &physics.system;
    for rec in records {
        rec.check_compatible(sys.measurement())?;
        if rec.len() < physics.steps {
            return Err(Error::RecordExhausted {
                step: physics.steps - 1,
                len: rec.len(),
            });
        }
    }
    let template = EnsembleStats::for_physics(TrajectoryKind::Replica, physics, grid_points)?;
    let parts = chunked(records.len() as u64, 0, || Ok(template.clone()), |acc, i| {
        let rec = &records[i as usize];
        let mut rho = physics.initial.clone();
        acc.observe(0, &rho, sys)?;
        for j in 0..physics.steps {
            rho = step_replica_with_generator(&rho, sys, rec.outcomes[j])?.0;
            if (j + 1) % stride == 0 {
                acc.observe((j + 1) / stride, &rho, sys)?;
            }
        }
        acc.finish_trajectory();
        Ok(())
    })?;
    fold_stats(parts, template)
}

/// Deterministic Lindblad solution on the same grid, as a one-member
/// "ensemble" with zero standard errors.
pub fn lindblad_reference(physics: &Physics, grid_points: usize) -> Result<EnsembleStats> {
    let stride = grid_stride(physics.steps, grid_points)?;
    let sys = &physics.system;
    let mut stats = EnsembleStats::for_physics(TrajectoryKind::Lindblad, physics, grid_points)?;
    let mut rho = physics.initial.clone().with_pure_expected(false)?;
    stats.observe(0, &rho, sys)?;
    for j in 1..=physics.steps {
        rho = step_lindblad(&rho, sys)?;
        if j % stride == 0 {
            stats.observe(j / stride, &rho, sys)?;
        }
    }
    stats.finish_trajectory();
    Ok(stats)
}

/// Arrow-of-time samples of a monitored ensemble, in trajectory order.
#[derive(Clone, Debug)]
pub struct ArrowEnsemble {
    pub samples: Vec<ArrowSample>,
    pub decompositions: Vec<ChiDecomposition>,
    /// `ln_r_from_probabilities − ln_r_stratonovich` per trajectory.
    pub oracle_gaps: Vec<f64>,
}

impl ArrowEnsemble {
    pub fn stats(&self) -> RunningStats {
        self.samples.iter().map(|s| s.ln_r).collect()
    }
}

/// Runs `n_traj` monitored trajectories and evaluates `ln R_χ` online.
pub fn run_arrow_ensemble(physics: &Physics, n_traj: u64, base_seed: u64) -> Result<ArrowEnsemble> {
    if n_traj == 0 {
        return Err(Error::InvalidConfig("n_traj must be at least 1".into()));
    }
    let sys = &physics.system;
    let chi = sys.feedback().nominal_chi();
    let (dt, tau) = (sys.dt(), sys.tau());
    let duration = physics.duration();
    let obs = sys.measurement().observable();
    type Acc = Vec<(ArrowSample, ChiDecomposition, f64)>;
    let parts: Vec<Acc> = chunked(n_traj, base_seed, || Ok(Vec::new()), |acc, i| {
        let mut noise = RandomStream::new(base_seed, i);
        let mut buffer = DelayBuffer::new(sys.feedback().delay_steps);
        let mut tracker = ArrowTracker::new();
        let mut rho = physics.initial.clone();
        let mut a = expectation(&rho, obs)?;
        for _ in 0..physics.steps {
            let step = step_forward(&rho, sys, &mut buffer, &mut noise)?;
            let a_next = expectation(&step.state, obs)?;
            tracker.push(step.r, a, a_next);
            a = a_next;
            rho = step.state;
        }
        let d = tracker.decomposition(chi, dt, tau);
        let gap = tracker.ln_r_from_probabilities(dt, tau) - d.total;
        acc.push((
            ArrowSample {
                ln_r: d.total,
                chi,
                duration,
            },
            d,
            gap,
        ));
        Ok(())
    })?;
    let mut out = ArrowEnsemble {
        samples: Vec::with_capacity(n_traj as usize),
        decompositions: Vec::with_capacity(n_traj as usize),
        oracle_gaps: Vec::with_capacity(n_traj as usize),
    };
    for (s, d, g) in parts.into_iter().flatten() {
        out.samples.push(s);
        out.decompositions.push(d);
        out.oracle_gaps.push(g);
    }
    Ok(out)
}
