//! Flat `key = value` run configuration.
//!
//! Sources are layered in this order, later ones winning: the `--config`
//! file, `QARROW_<KEY>` environment variables, `--set key=value` flags,
//! then `--seed`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use qarrow_core::engine::BaselineMode;
use qarrow_core::qstate::{density_from_bloch, BlochVector, ComplexMatrix, DensityMatrix, C64};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const ENV_PREFIX: &str = "QARROW_";

/// Every key the config format accepts, with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("omega_tau", "qubit frequency times tau (H = omega sigma_y / 2)"),
    ("tau_over_dt", "steps per tau (default 1000)"),
    ("t_over_tau", "run length in units of tau"),
    ("eta", "measurement efficiency; comma list for engine (default 1)"),
    ("chi", "feedback gain; comma list for arrow, single value for engine"),
    ("delay_over_t", "feedback delay as a fraction of T; comma list for engine (default 0)"),
    ("initial", "initial Bloch vector x,y,z (default 0,0,1)"),
    ("initial_state", "JSON file with the initial density matrix ({\"re\": [[..]], \"im\": [[..]]})"),
    ("n_traj", "number of trajectories (default 1)"),
    ("seed", "base seed (default 0)"),
    ("grid_points", "output grid intervals; must divide the step count"),
    ("bins", "histogram bins for arrow (default 60)"),
    ("baseline", "engine baseline: analytic or paired (default analytic)"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Replicate,
    Arrow,
    OpenReverse,
    Engine,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Replicate => "replicate",
            Self::Arrow => "arrow",
            Self::OpenReverse => "open-reverse",
            Self::Engine => "engine",
        })
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Raw string values before typing.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut raw = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key = value", no + 1)))?;
            raw.set(k.trim(), v.trim())?;
        }
        Ok(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().to_ascii_lowercase();
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(invalid(format!("unknown config key '{key}'")));
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects key=value, got '{assignment}'")))?;
        self.set(k, v)
    }

    pub fn apply_env(&mut self, vars: impl Iterator<Item = (String, String)>) -> Result<(), CliError> {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if KEYS.iter().any(|(k, _)| *k == key) {
                    self.set(&key, &value)?;
                }
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// SHA-256 of the sorted `key=value` lines plus the experiment name.
    pub fn digest(&self, experiment: ExperimentKind) -> String {
        let mut h = Sha256::new();
        h.update(format!("experiment={experiment}\n"));
        for (k, v) in &self.values {
            h.update(format!("{k}={v}\n"));
        }
        format!("{:x}", h.finalize())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, CliError> {
    let x: f64 = v.parse().map_err(|_| invalid(format!("{key}: '{v}' is not a number")))?;
    if !x.is_finite() {
        return Err(invalid(format!("{key}: must be finite")));
    }
    Ok(x)
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    let out = v
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_f64(key, s))
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(invalid(format!("{key}: empty list")));
    }
    Ok(out)
}

fn parse_u64(key: &str, v: &str) -> Result<u64, CliError> {
    v.parse().map_err(|_| invalid(format!("{key}: '{v}' is not a non-negative integer")))
}

#[derive(Deserialize)]
struct StateFile {
    re: Vec<Vec<f64>>,
    #[serde(default)]
    im: Option<Vec<Vec<f64>>>,
}

fn load_state(path: &Path) -> Result<DensityMatrix, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read state file {}: {e}", path.display())))?;
    let f: StateFile = serde_json::from_str(&text).map_err(|e| invalid(format!("state file: {e}")))?;
    let d = f.re.len();
    let im = f.im.unwrap_or_else(|| vec![vec![0.0; d]; d]);
    if im.len() != d || f.re.iter().chain(&im).any(|row| row.len() != d) {
        return Err(invalid("state file: re and im must be square and of equal size"));
    }
    let entries = (0..d * d).map(|k| C64::new(f.re[k / d][k % d], im[k / d][k % d])).collect();
    let m = ComplexMatrix::new(d, entries).map_err(|e| invalid(format!("state file: {e}")))?;
    let mixed = DensityMatrix::new(m, false).map_err(|e| invalid(format!("state file: {e}")))?;
    let p = qarrow_core::qstate::purity(&mixed);
    mixed
        .with_pure_expected((p - 1.0).abs() < 1e-8)
        .map_err(|e| invalid(format!("state file: {e}")))
}

/// Typed, validated run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub omega_tau: f64,
    pub tau_over_dt: f64,
    pub t_over_tau: f64,
    pub steps: usize,
    pub eta: Vec<f64>,
    pub chi: Option<Vec<f64>>,
    pub delay_over_t: Vec<f64>,
    pub initial: DensityMatrix,
    pub n_traj: u64,
    pub seed: u64,
    pub grid_points: usize,
    pub bins: usize,
    pub baseline: BaselineMode,
    pub digest: String,
    pub out: PathBuf,
}

/// Largest divisor of `steps` not above `cap`.
pub fn default_grid(steps: usize, cap: usize) -> usize {
    (1..=cap.min(steps)).rev().find(|g| steps % g == 0).unwrap_or(1)
}

impl RunConfig {
    pub fn resolve(experiment: ExperimentKind, raw: &RawConfig, out: PathBuf) -> Result<Self, CliError> {
        let num = |key: &str, default: Option<f64>| -> Result<f64, CliError> {
            match raw.get(key) {
                Some(v) => parse_f64(key, v),
                None => default.ok_or_else(|| invalid(format!("missing required key '{key}'"))),
            }
        };
        let omega_tau = num("omega_tau", None)?;
        let tau_over_dt = num("tau_over_dt", Some(1000.0))?;
        let t_over_tau = num("t_over_tau", None)?;
        if tau_over_dt <= 0.0 {
            return Err(invalid("tau_over_dt must be positive"));
        }
        if t_over_tau <= 0.0 {
            return Err(invalid("t_over_tau must be positive"));
        }
        let exact = t_over_tau * tau_over_dt;
        let steps = exact.round();
        if steps < 1.0 {
            return Err(invalid("run has zero steps (t_over_tau * tau_over_dt < 1)"));
        }
        if (exact - steps).abs() > 1e-9 * steps.max(1.0) {
            return Err(invalid(format!("t_over_tau * tau_over_dt = {exact} is not an integer step count")));
        }
        let steps = steps as usize;

        let eta = match raw.get("eta") {
            Some(v) => parse_list("eta", v)?,
            None => vec![1.0],
        };
        if eta.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(invalid("eta must lie in (0, 1]"));
        }
        let chi = raw.get("chi").map(|v| parse_list("chi", v)).transpose()?;
        let delay_over_t = match raw.get("delay_over_t") {
            Some(v) => parse_list("delay_over_t", v)?,
            None => vec![0.0],
        };
        if delay_over_t.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(invalid("delay_over_t must lie in [0, 1]"));
        }

        let initial = match (raw.get("initial_state"), raw.get("initial")) {
            (Some(path), _) => load_state(Path::new(path))?,
            (None, Some(v)) => {
                let c = parse_list("initial", v)?;
                if c.len() != 3 {
                    return Err(invalid("initial must be a Bloch vector x,y,z"));
                }
                density_from_bloch(BlochVector::new(c[0], c[1], c[2])).map_err(|e| invalid(format!("initial: {e}")))?
            }
            (None, None) => density_from_bloch(BlochVector::new(0.0, 0.0, 1.0)).expect("pole state is valid"),
        };

        let n_traj = raw.get("n_traj").map(|v| parse_u64("n_traj", v)).transpose()?.unwrap_or(1);
        if n_traj == 0 {
            return Err(invalid("n_traj must be at least 1"));
        }
        let seed = raw.get("seed").map(|v| parse_u64("seed", v)).transpose()?.unwrap_or(0);
        let grid_points = match raw.get("grid_points") {
            Some(v) => parse_u64("grid_points", v)? as usize,
            None => default_grid(steps, 100),
        };
        if grid_points == 0 || steps % grid_points != 0 {
            return Err(invalid(format!("grid_points ({grid_points}) must divide the step count ({steps})")));
        }
        let bins = raw.get("bins").map(|v| parse_u64("bins", v)).transpose()?.unwrap_or(60) as usize;
        if bins == 0 {
            return Err(invalid("bins must be at least 1"));
        }
        let baseline = match raw.get("baseline").unwrap_or("analytic") {
            "analytic" => BaselineMode::Analytic,
            "paired" => BaselineMode::Paired,
            other => return Err(invalid(format!("baseline must be analytic or paired, got '{other}'"))),
        };

        match experiment {
            ExperimentKind::Arrow | ExperimentKind::Engine if chi.is_none() => {
                return Err(invalid(format!("{experiment} requires 'chi'")));
            }
            ExperimentKind::Engine => {
                if chi.as_ref().is_some_and(|c| c.len() != 1) {
                    return Err(invalid("engine takes a single chi"));
                }
                if eta.len() != delay_over_t.len() && eta.len() != 1 && delay_over_t.len() != 1 {
                    return Err(invalid("eta and delay_over_t lists must have equal length (or length 1)"));
                }
            }
            _ => {}
        }
        if experiment != ExperimentKind::Engine && eta.len() != 1 {
            return Err(invalid(format!("{experiment} takes a single eta")));
        }

        Ok(Self {
            experiment,
            omega_tau,
            tau_over_dt,
            t_over_tau,
            steps,
            eta,
            chi,
            delay_over_t,
            initial,
            n_traj,
            seed,
            grid_points,
            bins,
            baseline,
            digest: raw.digest(experiment),
            out,
        })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tau_over_dt
    }

    /// `(eta, delay_over_t)` pairs for the engine, broadcasting a length-1
    /// list against the other.
    pub fn engine_cases(&self) -> Vec<(f64, f64)> {
        let n = self.eta.len().max(self.delay_over_t.len());
        (0..n)
            .map(|i| {
                let e = self.eta[if self.eta.len() == 1 { 0 } else { i }];
                let d = self.delay_over_t[if self.delay_over_t.len() == 1 { 0 } else { i }];
                (e, d)
            })
            .collect()
    }

    pub fn manifest(&self) -> String {
        format!(
            "# qarrow {} experiment={} config={} seed={}",
            env!("CARGO_PKG_VERSION"),
            self.experiment,
            self.digest,
            self.seed
        )
    }
}
