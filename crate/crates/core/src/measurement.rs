//! Gaussian weak measurement of an observable `A`: outcome statistics and the
//! conditional state update, with optional detector efficiency `eta`.

use std::io::{Read, Write};

use log::warn;

use crate::error::{Error, Result};
use crate::qstate::{
    expectation, normalize_positive, ComplexMatrix, DensityMatrix, Observable, C64,
};
use crate::rng::NoiseSource;

/// Ratio `dt/tau` above which a warning is logged.
pub const DT_WARN_RATIO: f64 = 0.01;
/// Ratio `dt/tau` above which configuration is rejected.
pub const DT_MAX_RATIO: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct MeasurementConfig {
    tau: f64,
    dt: f64,
    eta: f64,
    observable: Observable,
}

impl MeasurementConfig {
    pub fn new(tau: f64, dt: f64, eta: f64, observable: Observable) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidConfig(format!("eta must lie in (0, 1], got {eta}")));
        }
        let ratio = dt / tau;
        if ratio > DT_MAX_RATIO {
            return Err(Error::InvalidConfig(format!(
                "dt/tau = {ratio} exceeds {DT_MAX_RATIO}"
            )));
        }
        if ratio > DT_WARN_RATIO {
            warn!("dt/tau = {ratio} is coarse; results carry O(dt) bias");
        }
        Ok(Self {
            tau,
            dt,
            eta,
            observable,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn observable(&self) -> &Observable {
        &self.observable
    }

    /// Standard deviation of a single outcome, `√(τ/(η dt))`.
    pub fn outcome_std(&self) -> f64 {
        (self.tau / (self.eta * self.dt)).sqrt()
    }

    pub fn is_ideal(&self) -> bool {
        self.eta == 1.0
    }

    fn check_state(&self, rho: &DensityMatrix) -> Result<()> {
        if rho.dim() != self.observable.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.observable.dim(),
                found: rho.dim(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub outcomes: Vec<f64>,
    pub dt: f64,
    pub tau: f64,
    pub eta: f64,
    pub base_seed: u64,
    pub trajectory_index: u64,
}

const ARCHIVE_MAGIC: &[u8; 4] = b"QREC";
const ARCHIVE_VERSION: u32 = 1;

impl MeasurementRecord {
    pub fn new(cfg: &MeasurementConfig, base_seed: u64, trajectory_index: u64) -> Self {
        Self {
            outcomes: Vec::new(),
            dt: cfg.dt,
            tau: cfg.tau,
            eta: cfg.eta,
            base_seed,
            trajectory_index,
        }
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn get(&self, step: usize) -> Result<f64> {
        self.outcomes.get(step).copied().ok_or(Error::RecordExhausted {
            step,
            len: self.outcomes.len(),
        })
    }

    /// Checks that the record was produced under `cfg`.
    pub fn check_compatible(&self, cfg: &MeasurementConfig) -> Result<()> {
        if self.dt != cfg.dt || self.tau != cfg.tau || self.eta != cfg.eta {
            return Err(Error::InvalidConfig(format!(
                "record (dt={}, tau={}, eta={}) does not match configuration (dt={}, tau={}, eta={})",
                self.dt, self.tau, self.eta, cfg.dt, cfg.tau, cfg.eta
            )));
        }
        Ok(())
    }

    /// CSV with columns `step,time,r`; time in units of tau.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,time,r")?;
        for (j, r) in self.outcomes.iter().enumerate() {
            writeln!(w, "{},{},{}", j, j as f64 * self.dt / self.tau, r)?;
        }
        Ok(())
    }

    /// Little-endian archive: `"QREC"`, u32 version, f64 dt, f64 tau, f64 eta,
    /// u64 base_seed, u64 trajectory_index, u64 count, then `count` f64 outcomes.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        for x in [self.dt, self.tau, self.eta] {
            w.write_all(&x.to_le_bytes())?;
        }
        for x in [self.base_seed, self.trajectory_index, self.outcomes.len() as u64] {
            w.write_all(&x.to_le_bytes())?;
        }
        for r in &self.outcomes {
            w.write_all(&r.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut b8)?;
            Ok(b8)
        };
        let dt = f64::from_le_bytes(next(&mut r)?);
        let tau = f64::from_le_bytes(next(&mut r)?);
        let eta = f64::from_le_bytes(next(&mut r)?);
        let base_seed = u64::from_le_bytes(next(&mut r)?);
        let trajectory_index = u64::from_le_bytes(next(&mut r)?);
        let count = u64::from_le_bytes(next(&mut r)?);
        let count = usize::try_from(count).map_err(|_| Error::Archive("count overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(Error::Archive(format!(
                "expected {count} outcomes, found {} bytes",
                bytes.len()
            )));
        }
        let outcomes = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            outcomes,
            dt,
            tau,
            eta,
            base_seed,
            trajectory_index,
        })
    }
}

/// Draws `r = ⟨A⟩ + √(τ/(η dt))·z` with `z` standard normal.
pub fn sample_outcome(
    rho: &DensityMatrix,
    cfg: &MeasurementConfig,
    noise: &mut dyn NoiseSource,
) -> Result<f64> {
    cfg.check_state(rho)?;
    let mean = expectation(rho, &cfg.observable)?;
    Ok(mean + cfg.outcome_std() * noise.next_standard_normal())
}

/// Outcome density `√(dt/2πτ)·exp(−(r−⟨A⟩)² dt/(2τ))` for ideal detection.
pub fn outcome_pdf(r: f64, rho: &DensityMatrix, cfg: &MeasurementConfig) -> Result<f64> {
    if !cfg.is_ideal() {
        return Err(Error::Unsupported(
            "outcome density is only defined for eta = 1".into(),
        ));
    }
    cfg.check_state(rho)?;
    let mean = expectation(rho, &cfg.observable)?;
    let (dt, tau) = (cfg.dt, cfg.tau);
    Ok((dt / (std::f64::consts::TAU * tau)).sqrt() * (-(r - mean).powi(2) * dt / (2.0 * tau)).exp())
}

/// Conditional update `M_r ρ M_r†` normalised.
///
/// For `A² = 𝟙` and `eta = 1` the Kraus operator `e^{ε A}`, `ε = r dt/(2τ)`, is
/// applied as `𝟙 + tanh(ε) A` (equal up to normalisation and overflow-free).
/// Otherwise the update is carried out in the eigenbasis of `A`, where the
/// Gaussian Kraus operator is diagonal, followed by the dephasing of the
/// unobserved fraction `1 − eta`.
pub fn kraus_apply(rho: &DensityMatrix, r: f64, cfg: &MeasurementConfig) -> Result<DensityMatrix> {
    if !r.is_finite() {
        return Err(Error::NonFiniteOutcome(r));
    }
    cfg.check_state(rho)?;
    let pure = rho.is_pure_expected() && cfg.is_ideal();
    let obs = &cfg.observable;
    if obs.is_involutory() && cfg.is_ideal() {
        let t = (r * cfg.dt / (2.0 * cfg.tau)).tanh();
        let d = rho.dim();
        let a = obs.matrix();
        let m = ComplexMatrix::from_fn(d, |i, j| {
            let id = if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
            id + a[(i, j)] * t
        });
        return normalize_positive(&rho.matrix().conjugate_by(&m), pure);
    }
    kraus_eigenbasis(rho, r, cfg, pure)
}

fn kraus_eigenbasis(rho: &DensityMatrix, r: f64, cfg: &MeasurementConfig, pure: bool) -> Result<DensityMatrix> {
    let obs = &cfg.observable;
    let lambdas = obs.eigenvalues();
    let (dt, tau, eta) = (cfg.dt, cfg.tau, cfg.eta);
    let log_m: Vec<f64> = lambdas
        .iter()
        .map(|l| -eta * (r - l).powi(2) * dt / (4.0 * tau))
        .collect();
    let max_log = log_m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m: Vec<f64> = log_m.iter().map(|l| (l - max_log).exp()).collect();
    let dephase = |i: usize, j: usize| {
        if eta == 1.0 {
            1.0
        } else {
            (-(1.0 - eta) * (lambdas[i] - lambdas[j]).powi(2) * dt / (8.0 * tau)).exp()
        }
    };
    let d = rho.dim();
    let v = obs.eigenvectors();
    let in_eigenbasis = if obs.is_diagonal() {
        rho.matrix().clone()
    } else {
        v.adjoint().matmul(rho.matrix()).matmul(v)
    };
    let updated = ComplexMatrix::from_fn(d, |i, j| in_eigenbasis[(i, j)] * (m[i] * m[j] * dephase(i, j)));
    let back = if obs.is_diagonal() {
        updated
    } else {
        v.matmul(&updated).matmul(&v.adjoint())
    };
    normalize_positive(&back, pure)
}

/// The retrodictive update `M_{−r} ρ M_{−r}†`, which undoes [`kraus_apply`]
/// exactly when `A² = 𝟙` and `eta = 1`.
pub fn kraus_apply_backward(
    rho: &DensityMatrix,
    r: f64,
    cfg: &MeasurementConfig,
) -> Result<DensityMatrix> {
    if !r.is_finite() {
        return Err(Error::NonFiniteOutcome(r));
    }
    kraus_apply(rho, -r, cfg)
}

/// One Itô step of the diffusive stochastic master equation with efficiency
/// `eta`, written in the positivity-preserving Kraus-like form
///
/// `ρ' ∝ M ρ M† + (1−η)(dt/4τ) A ρ A`,  `M = 𝟙 − (dt/8τ)A² + (η r dt/2τ) A`.
///
/// To first order in `dt` this is
/// `dρ = −(1/8τ)[A,[A,ρ]]dt + √(η/4τ)({A,ρ} − 2⟨A⟩ρ)dW` with
/// `dW = (r − ⟨A⟩)dt√(η/τ)`.
pub fn ito_step_inefficient(
    rho: &DensityMatrix,
    r: f64,
    cfg: &MeasurementConfig,
) -> Result<DensityMatrix> {
    if !r.is_finite() {
        return Err(Error::NonFiniteOutcome(r));
    }
    cfg.check_state(rho)?;
    let (dt, tau, eta) = (cfg.dt, cfg.tau, cfg.eta);
    let a = cfg.observable.matrix();
    let a2 = cfg.observable.square();
    let d = rho.dim();
    let c2 = dt / (8.0 * tau);
    let c1 = eta * r * dt / (2.0 * tau);
    let m = ComplexMatrix::from_fn(d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        C64::new(id, 0.0) - a2[(i, j)] * c2 + a[(i, j)] * c1
    });
    let mut next = rho.matrix().conjugate_by(&m);
    if eta < 1.0 {
        let jump = rho.matrix().conjugate_by(a).scale_real((1.0 - eta) * dt / (4.0 * tau));
        next = &next + &jump;
    }
    normalize_positive(&next, rho.is_pure_expected() && cfg.is_ideal())
}
