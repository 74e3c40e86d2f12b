//! Arrow-of-time statistics: the log relative likelihood `ln R` of the
//! forward and backward processes, its feedback-modified form, and
//! histograms over ensembles.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::stats::RunningStats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrowSample {
    pub ln_r: f64,
    pub chi: f64,
    /// Run length in units of tau.
    pub duration: f64,
}

fn check_series(outcomes: &[f64], expect_a: &[f64]) -> Result<()> {
    if outcomes.is_empty() {
        return Err(Error::MissingData("trajectory has no outcomes".into()));
    }
    if expect_a.len() != outcomes.len() + 1 {
        return Err(Error::MissingData(format!(
            "need {} values of <A> for {} outcomes, found {}",
            outcomes.len() + 1,
            outcomes.len(),
            expect_a.len()
        )));
    }
    Ok(())
}

/// `Σ_j r_j (⟨A⟩_j + ⟨A⟩_{j+1}) dt/τ` on raw series.
pub fn ln_r_midpoint(outcomes: &[f64], expect_a: &[f64], dt: f64, tau: f64) -> Result<f64> {
    check_series(outcomes, expect_a)?;
    let sum: f64 = outcomes
        .iter()
        .enumerate()
        .map(|(j, r)| r * (expect_a[j] + expect_a[j + 1]))
        .sum();
    Ok(sum * dt / tau)
}

/// `Σ_j [−(r_j − ⟨A⟩_j)² + (r_j + ⟨A⟩_{j+1})²] dt/(2τ)` on raw series.
pub fn ln_r_gaussian(outcomes: &[f64], expect_a: &[f64], dt: f64, tau: f64) -> Result<f64> {
    check_series(outcomes, expect_a)?;
    let sum: f64 = outcomes
        .iter()
        .enumerate()
        .map(|(j, r)| (r + expect_a[j + 1]).powi(2) - (r - expect_a[j]).powi(2))
        .sum();
    Ok(sum * dt / (2.0 * tau))
}

/// `(χ/τ) Σ_j (1 − ⟨A⟩²_{j+1}) dt`.
pub fn chi_term(expect_a: &[f64], chi: f64, dt: f64, tau: f64) -> f64 {
    let sum: f64 = expect_a.iter().skip(1).map(|a| 1.0 - a * a).sum();
    chi * sum * dt / tau
}

fn monitored(traj: &Trajectory) -> Result<()> {
    if traj.record.is_empty() {
        return Err(Error::MissingData("trajectory carries no measurement record".into()));
    }
    Ok(())
}

/// Midpoint (Stratonovich) discretisation of `(2/τ)∫ r ⟨A⟩ dt`.
pub fn ln_r_stratonovich(traj: &Trajectory) -> Result<f64> {
    monitored(traj)?;
    ln_r_midpoint(&traj.record.outcomes, &traj.expect_a, traj.dt, traj.tau)
}

/// `ln P_F(r⃗)/P_B(r⃗)` evaluated directly from the Gaussian outcome
/// densities of the forward and backward processes.
pub fn ln_r_from_probabilities(traj: &Trajectory) -> Result<f64> {
    monitored(traj)?;
    if traj.record.eta != 1.0 {
        return Err(Error::Unsupported("outcome densities require eta = 1".into()));
    }
    ln_r_gaussian(&traj.record.outcomes, &traj.expect_a, traj.dt, traj.tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiDecomposition {
    /// `ln R_χ` of the feedback-driven trajectory.
    pub total: f64,
    /// `total − chi_term`.
    pub base: f64,
    pub chi_term: f64,
}

/// `ln R_χ` of a trajectory generated with feedback gain `traj.chi`, split
/// into the plain arrow and the feedback term.
pub fn ln_r_chi(traj: &Trajectory) -> Result<ChiDecomposition> {
    let total = ln_r_stratonovich(traj)?;
    let chi_term = chi_term(&traj.expect_a, traj.chi, traj.dt, traj.tau);
    Ok(ChiDecomposition {
        total,
        base: total - chi_term,
        chi_term,
    })
}

/// Ensemble mean `(T/2τ)(3 + χ)` for the qubit benchmark.
pub fn predicted_mean_arrow(chi: f64, duration: f64, tau: f64) -> f64 {
    duration / (2.0 * tau) * (3.0 + chi)
}

/// Running `ln R` sums fed one step at a time.
#[derive(Clone, Copy, Debug, Default)]
pub struct ArrowTracker {
    midpoint: f64,
    gaussian: f64,
    one_minus_a2: f64,
    steps: usize,
}

impl ArrowTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds step `j` with outcome `r`, `⟨A⟩_j` and `⟨A⟩_{j+1}`.
    pub fn push(&mut self, r: f64, a_before: f64, a_after: f64) {
        self.midpoint += r * (a_before + a_after);
        self.gaussian += (r + a_after).powi(2) - (r - a_before).powi(2);
        self.one_minus_a2 += 1.0 - a_after * a_after;
        self.steps += 1;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn ln_r_stratonovich(&self, dt: f64, tau: f64) -> f64 {
        self.midpoint * dt / tau
    }

    pub fn ln_r_from_probabilities(&self, dt: f64, tau: f64) -> f64 {
        self.gaussian * dt / (2.0 * tau)
    }

    pub fn decomposition(&self, chi: f64, dt: f64, tau: f64) -> ChiDecomposition {
        let total = self.ln_r_stratonovich(dt, tau);
        let chi_term = chi * self.one_minus_a2 * dt / tau;
        ChiDecomposition {
            total,
            base: total - chi_term,
            chi_term,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrowHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_total: u64,
    pub mean: f64,
    pub stderr: f64,
    pub prob_forward: f64,
    /// Samples with `ln_r == 0`, counted as forward.
    pub ties: u64,
    pub chi: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrowSummary {
    pub n: u64,
    pub mean: f64,
    pub stderr: f64,
    pub prob_forward: f64,
    pub ties: u64,
    pub chi: f64,
    #[serde(rename = "T_over_tau")]
    pub t_over_tau: f64,
    pub predicted_mean: f64,
}

impl ArrowHistogram {
    /// Rows `bin_left,bin_right,count,normalized_density`; densities
    /// integrate to one.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_left,bin_right,count,normalized_density")?;
        for (k, &c) in self.counts.iter().enumerate() {
            let (l, r) = (self.bin_edges[k], self.bin_edges[k + 1]);
            let density = c as f64 / (self.n_total as f64 * (r - l));
            writeln!(w, "{l},{r},{c},{density}")?;
        }
        Ok(())
    }

    /// `duration` is measured in units of tau.
    pub fn summary(&self) -> ArrowSummary {
        ArrowSummary {
            n: self.n_total,
            mean: self.mean,
            stderr: self.stderr,
            prob_forward: self.prob_forward,
            ties: self.ties,
            chi: self.chi,
            t_over_tau: self.duration,
            predicted_mean: predicted_mean_arrow(self.chi, self.duration, 1.0),
        }
    }
}

/// Equal-width histogram over `[min, max]` padded by 1% on each side.
pub fn build_histogram(samples: &[ArrowSample], bins: usize) -> Result<ArrowHistogram> {
    let first = samples.first().ok_or(Error::EmptyInput("arrow samples"))?;
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let mut stats = RunningStats::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut forward, mut ties) = (0u64, 0u64);
    for s in samples {
        if !s.ln_r.is_finite() {
            return Err(Error::NonFinite);
        }
        stats.push(s.ln_r);
        lo = lo.min(s.ln_r);
        hi = hi.max(s.ln_r);
        if s.ln_r > 0.0 {
            forward += 1;
        } else if s.ln_r == 0.0 {
            forward += 1;
            ties += 1;
        }
    }
    let span = hi - lo;
    let pad = if span > 0.0 { 0.01 * span } else { 0.01 * lo.abs().max(1.0) };
    let (left, right) = (lo - pad, hi + pad);
    let width = (right - left) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|k| left + k as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for s in samples {
        let k = (((s.ln_r - left) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = stats.count();
    Ok(ArrowHistogram {
        bin_edges,
        counts,
        n_total: n,
        mean: stats.mean(),
        stderr: stats.stderr(),
        prob_forward: forward as f64 / n as f64,
        ties,
        chi: first.chi,
        duration: first.duration,
    })
}
