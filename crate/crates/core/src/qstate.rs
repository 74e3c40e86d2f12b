//! Dense complex linear algebra for small Hilbert spaces and the quantum-state
//! bookkeeping shared by every other module.
//!
//! Matrices are stored row-major in a `SmallVec` whose inline capacity holds a
//! qubit operator, so the d = 2 hot paths never touch the heap. Dimensions
//! 2..=16 are supported; anything beyond d = 2 falls back to an
//! eigendecomposition through `nalgebra`.

use std::fmt;
use std::ops::{Add, Index, Mul, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use smallvec::SmallVec;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const MAX_DIM: usize = 16;

/// Entrywise Hermiticity tolerance for density matrices.
pub const STATE_HERMITIAN_TOL: f64 = 1e-10;
pub const STATE_TRACE_TOL: f64 = 1e-10;
pub const STATE_EIGEN_TOL: f64 = 1e-9;
pub const PURITY_TOL: f64 = 1e-8;
/// Entrywise Hermiticity tolerance for observables and Hamiltonians.
pub const OPERATOR_HERMITIAN_TOL: f64 = 1e-12;
/// Largest drift `hermitize_and_renormalize` will silently repair.
pub const DRIFT_TOL: f64 = 1e-6;
/// Residual imaginary part tolerated in expectation values of Hermitian operators.
pub const EXPECTATION_IMAG_TOL: f64 = 1e-10;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    dim: usize,
    data: SmallVec<[C64; 4]>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix({}x{})", self.dim, self.dim)?;
        for i in 0..self.dim {
            let row: Vec<String> = (0..self.dim)
                .map(|j| {
                    let z = self[(i, j)];
                    format!("{:+.6}{:+.6}i", z.re, z.im)
                })
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if (2..=MAX_DIM).contains(&dim) {
        Ok(())
    } else {
        Err(Error::UnsupportedDimension(dim))
    }
}

impl ComplexMatrix {
    /// Builds a matrix from row-major entries, rejecting unsupported
    /// dimensions and non-finite values.
    pub fn new(dim: usize, entries: Vec<C64>) -> Result<Self> {
        check_dim(dim)?;
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: entries.len(),
            });
        }
        let m = Self {
            dim,
            data: SmallVec::from_vec(entries),
        };
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(m)
    }

    pub fn from_real(dim: usize, entries: &[f64]) -> Result<Self> {
        Self::new(dim, entries.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub(crate) fn from_fn(dim: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        let mut data = SmallVec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: SmallVec::from_elem(ZERO, dim * dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |i, j| if i == j { ONE } else { ZERO })
    }

    pub fn pauli_x() -> Self {
        Self::from_fn(2, |i, j| if i != j { ONE } else { ZERO })
    }

    pub fn pauli_y() -> Self {
        Self::from_fn(2, |i, j| match (i, j) {
            (0, 1) => -I,
            (1, 0) => I,
            _ => ZERO,
        })
    }

    pub fn pauli_z() -> Self {
        Self::from_fn(2, |i, j| match (i, j) {
            (0, 0) => ONE,
            (1, 1) => -ONE,
            _ => ZERO,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[C64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(j, i)].conj())
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    /// `tr(self · other)` without forming the product.
    pub fn trace_product(&self, other: &Self) -> C64 {
        let d = self.dim;
        let mut acc = ZERO;
        for i in 0..d {
            for k in 0..d {
                acc += self.data[i * d + k] * other.data[k * d + i];
            }
        }
        acc
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let d = self.dim;
        debug_assert_eq!(d, other.dim);
        let mut out = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                if a == ZERO {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] += a * other.data[k * d + j];
                }
            }
        }
        out
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn commutator(&self, other: &Self) -> Self {
        &self.matmul(other) - &other.matmul(self)
    }

    pub fn anticommutator(&self, other: &Self) -> Self {
        &self.matmul(other) + &other.matmul(self)
    }

    /// `u · self · u†`
    pub fn conjugate_by(&self, u: &Self) -> Self {
        u.matmul(self).matmul(&u.adjoint())
    }

    pub fn kron(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.dim, other.dim);
        check_dim(a * b)?;
        Ok(Self::from_fn(a * b, |i, j| {
            self[(i / b, j / b)] * other[(i % b, j % b)]
        }))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `max |M − M†|` entrywise.
    pub fn hermiticity_residual(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in i..d {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn ensure_hermitian(&self, tol: f64) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NonFinite);
        }
        let residual = self.hermiticity_residual();
        if residual > tol {
            Err(Error::NotHermitian { residual })
        } else {
            Ok(())
        }
    }

    fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self[(i, j)])
    }

    /// Eigenvalues of a Hermitian matrix in ascending order. Only the
    /// Hermitian part is looked at.
    pub fn hermitian_eigenvalues(&self) -> Vec<f64> {
        if self.dim == 2 {
            let a = self[(0, 0)].re;
            let d = self[(1, 1)].re;
            let b = 0.5 * (self[(0, 1)] + self[(1, 0)].conj());
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
            return vec![mean - rad, mean + rad];
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_nalgebra())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Eigendecomposition of a Hermitian matrix: ascending eigenvalues and
    /// the matching orthonormal eigenvectors as columns.
    pub fn hermitian_eigen(&self) -> (Vec<f64>, ComplexMatrix) {
        let eig = SymmetricEigen::new(self.to_nalgebra());
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = Self::from_fn(self.dim, |i, j| eig.eigenvectors[(i, order[j])]);
        (values, vectors)
    }

    /// `V f(Λ) V†` for a Hermitian matrix.
    pub fn hermitian_function(&self, f: impl Fn(f64) -> C64) -> Self {
        let (values, v) = self.hermitian_eigen();
        let d = self.dim;
        Self::from_fn(d, |i, j| {
            (0..d)
                .map(|k| v[(i, k)] * f(values[k]) * v[(j, k)].conj())
                .sum()
        })
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.dim + j]
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        debug_assert_eq!(self.dim, rhs.dim);
        ComplexMatrix {
            dim: self.dim,
            data: self.data.iter().zip(rhs.data.iter()).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        debug_assert_eq!(self.dim, rhs.dim);
        ComplexMatrix {
            dim: self.dim,
            data: self.data.iter().zip(rhs.data.iter()).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(rhs)
    }
}

/// `e^{−i h dt}` for Hermitian `h`.
///
/// Qubits use the closed-form Pauli exponential; larger dimensions go through
/// an eigendecomposition. Negative `dt` gives the inverse propagator.
pub fn matrix_exponential_unitary(h: &ComplexMatrix, dt: f64) -> Result<ComplexMatrix> {
    if !dt.is_finite() {
        return Err(Error::InvalidConfig(format!("non-finite time step {dt}")));
    }
    let tol = OPERATOR_HERMITIAN_TOL * h.max_abs().max(1.0);
    h.ensure_hermitian(tol)?;
    Ok(unitary_exp_unchecked(h, dt))
}

pub(crate) fn unitary_exp_unchecked(h: &ComplexMatrix, dt: f64) -> ComplexMatrix {
    if h.dim == 2 {
        let a = h[(0, 0)].re;
        let d = h[(1, 1)].re;
        let b = 0.5 * (h[(0, 1)] + h[(1, 0)].conj());
        let h0 = 0.5 * (a + d);
        let hz = 0.5 * (a - d);
        let norm = (hz * hz + b.norm_sqr()).sqrt();
        let theta = norm * dt;
        let c = theta.cos();
        // sin(norm·dt)/norm, finite as norm → 0
        let s = if theta.abs() < 1e-8 {
            dt * (1.0 - theta * theta / 6.0)
        } else {
            theta.sin() / norm
        };
        let phase = C64::from_polar(1.0, -h0 * dt);
        // traceless part: [[hz, b], [b*, −hz]]
        let u00 = C64::new(c, -s * hz);
        let u11 = C64::new(c, s * hz);
        let u01 = -I * s * b;
        let u10 = -I * s * b.conj();
        return ComplexMatrix::from_fn(2, |i, j| {
            phase
                * match (i, j) {
                    (0, 0) => u00,
                    (0, 1) => u01,
                    (1, 0) => u10,
                    _ => u11,
                }
        });
    }
    h.hermitian_function(|lambda| C64::from_polar(1.0, -lambda * dt))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    matrix: ComplexMatrix,
    pure_expected: bool,
}

impl DensityMatrix {
    /// Validates every density-matrix invariant before accepting `matrix`.
    pub fn new(matrix: ComplexMatrix, pure_expected: bool) -> Result<Self> {
        let rho = Self {
            matrix,
            pure_expected,
        };
        rho.validate()?;
        Ok(rho)
    }

    pub(crate) fn from_trusted(matrix: ComplexMatrix, pure_expected: bool) -> Self {
        Self {
            matrix,
            pure_expected,
        }
    }

    /// `|ψ⟩⟨ψ|` for a (not necessarily normalised) ket.
    pub fn from_ket(amplitudes: &[C64]) -> Result<Self> {
        let dim = amplitudes.len();
        check_dim(dim)?;
        let norm2: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if !(norm2.is_finite() && norm2 > 0.0) {
            return Err(Error::InvalidState("zero or non-finite ket".into()));
        }
        let m = ComplexMatrix::from_fn(dim, |i, j| amplitudes[i] * amplitudes[j].conj() / norm2);
        Self::new(m, true)
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Self::new(ComplexMatrix::identity(dim).scale_real(1.0 / dim as f64), false)
    }

    #[inline]
    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.matrix.dim
    }

    pub fn is_pure_expected(&self) -> bool {
        self.pure_expected
    }

    pub fn with_pure_expected(mut self, flag: bool) -> Result<Self> {
        self.pure_expected = flag;
        self.validate()?;
        Ok(self)
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    /// Full invariant check: finiteness, Hermiticity, unit trace, positivity
    /// and, when flagged, purity.
    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        let herm = m.hermiticity_residual();
        if herm > STATE_HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("Hermiticity residual {herm:.3e}")));
        }
        let tr = m.trace();
        if (tr - ONE).norm() > STATE_TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        let min_ev = m.hermitian_eigenvalues()[0];
        if min_ev < -STATE_EIGEN_TOL {
            return Err(Error::InvalidState(format!("negative eigenvalue {min_ev:.3e}")));
        }
        if self.pure_expected {
            let p = purity(self);
            if p < 1.0 - PURITY_TOL {
                return Err(Error::InvalidState(format!("expected pure state, purity {p}")));
            }
        }
        Ok(())
    }
}

/// Repairs accumulated Hermiticity and trace drift: returns `(m + m†)/2`
/// rescaled to unit trace.
///
/// Drift beyond [`DRIFT_TOL`], a non-positive trace, or (for qubits) a
/// negative eigenvalue are reported as integrator failures.
pub fn hermitize_and_renormalize(m: &ComplexMatrix, pure_expected: bool) -> Result<DensityMatrix> {
    if !m.is_finite() {
        return Err(Error::Integrator("non-finite state".into()));
    }
    let tr = m.trace();
    if tr.re <= 0.0 {
        return Err(Error::Integrator(format!("non-positive trace {}", tr.re)));
    }
    if (tr - ONE).norm() > DRIFT_TOL {
        return Err(Error::Integrator(format!("trace drift {:.3e}", (tr - ONE).norm())));
    }
    let herm = m.hermiticity_residual();
    if herm > DRIFT_TOL {
        return Err(Error::Integrator(format!("Hermiticity drift {herm:.3e}")));
    }
    let inv = 1.0 / tr.re;
    let d = m.dim;
    let out = ComplexMatrix::from_fn(d, |i, j| {
        if i == j {
            C64::new(m[(i, i)].re * inv, 0.0)
        } else {
            0.5 * (m[(i, j)] + m[(j, i)].conj()) * inv
        }
    });
    if d == 2 {
        let min_ev = out.hermitian_eigenvalues()[0];
        if min_ev < -STATE_EIGEN_TOL {
            return Err(Error::Integrator(format!("negative eigenvalue {min_ev:.3e}")));
        }
    }
    let rho = DensityMatrix::from_trusted(out, pure_expected);
    if pure_expected {
        let p = purity(&rho);
        if p < 1.0 - PURITY_TOL {
            return Err(Error::Integrator(format!("purity loss on a pure path: {p}")));
        }
    }
    Ok(rho)
}

/// Normalises an unnormalised positive matrix (e.g. `M ρ M†`) to unit trace
/// and then applies [`hermitize_and_renormalize`].
pub(crate) fn normalize_positive(m: &ComplexMatrix, pure_expected: bool) -> Result<DensityMatrix> {
    let tr = m.trace().re;
    if !(tr.is_finite() && tr > 0.0) {
        return Err(Error::Integrator(format!("non-positive trace {tr}")));
    }
    hermitize_and_renormalize(&m.scale_real(1.0 / tr), pure_expected)
}

/// A Hermitian observable with its eigendecomposition cached at construction.
#[derive(Clone, Debug)]
pub struct Observable {
    matrix: ComplexMatrix,
    square: ComplexMatrix,
    involutory: bool,
    diagonal: bool,
    eigenvalues: Vec<f64>,
    eigenvectors: ComplexMatrix,
}

impl Observable {
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        matrix.ensure_hermitian(OPERATOR_HERMITIAN_TOL)?;
        let square = matrix.matmul(&matrix);
        let involutory = square.max_abs_diff(&ComplexMatrix::identity(matrix.dim)) <= OPERATOR_HERMITIAN_TOL;
        let d = matrix.dim;
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || matrix[(i, j)].norm() == 0.0));
        let (eigenvalues, eigenvectors) = if diagonal {
            // keep the computational basis so that eigen-basis updates are exact
            let values = (0..d).map(|i| matrix[(i, i)].re).collect();
            (values, ComplexMatrix::identity(d))
        } else {
            matrix.hermitian_eigen()
        };
        Ok(Self {
            matrix,
            square,
            involutory,
            diagonal,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn pauli_x() -> Self {
        Self::new(ComplexMatrix::pauli_x()).expect("Pauli X is Hermitian")
    }

    pub fn pauli_y() -> Self {
        Self::new(ComplexMatrix::pauli_y()).expect("Pauli Y is Hermitian")
    }

    pub fn pauli_z() -> Self {
        Self::new(ComplexMatrix::pauli_z()).expect("Pauli Z is Hermitian")
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    /// A².
    pub fn square(&self) -> &ComplexMatrix {
        &self.square
    }

    pub fn is_involutory(&self) -> bool {
        self.involutory
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvectors as columns, matching [`Observable::eigenvalues`].
    pub fn eigenvectors(&self) -> &ComplexMatrix {
        &self.eigenvectors
    }
}

fn ensure_same_dim(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        })
    }
}

/// `tr(ρ M)` for a Hermitian `M`.
pub fn expectation_of(rho: &DensityMatrix, m: &ComplexMatrix) -> Result<f64> {
    ensure_same_dim(rho.dim(), m.dim)?;
    let v = rho.matrix.trace_product(m);
    let scale = m.max_abs().max(1.0);
    if v.im.abs() > EXPECTATION_IMAG_TOL * scale {
        return Err(Error::InvalidState(format!(
            "expectation has imaginary residue {:.3e}",
            v.im
        )));
    }
    Ok(v.re)
}

/// `⟨A⟩ = tr(ρ A)`.
pub fn expectation(rho: &DensityMatrix, obs: &Observable) -> Result<f64> {
    expectation_of(rho, &obs.matrix)
}

/// `tr(ρ{A,H})/2 − tr(ρA)·tr(ρH)`.
pub fn covariance(rho: &DensityMatrix, a: &Observable, h: &ComplexMatrix) -> Result<f64> {
    ensure_same_dim(rho.dim(), h.dim)?;
    h.ensure_hermitian(OPERATOR_HERMITIAN_TOL * h.max_abs().max(1.0))?;
    Ok(covariance_unchecked(rho, a.matrix(), h))
}

pub(crate) fn covariance_unchecked(rho: &DensityMatrix, a: &ComplexMatrix, h: &ComplexMatrix) -> f64 {
    let m = &rho.matrix;
    let sym = 0.5 * (m.trace_product(&a.matmul(h)) + m.trace_product(&h.matmul(a)));
    sym.re - m.trace_product(a).re * m.trace_product(h).re
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

pub fn bloch_from_density(rho: &DensityMatrix) -> Result<BlochVector> {
    if rho.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: rho.dim(),
        });
    }
    Ok(bloch_unchecked(&rho.matrix))
}

#[inline]
pub(crate) fn bloch_unchecked(m: &ComplexMatrix) -> BlochVector {
    let off = m[(1, 0)];
    BlochVector {
        x: 2.0 * off.re,
        y: 2.0 * off.im,
        z: (m[(0, 0)] - m[(1, 1)]).re,
    }
}

/// `(𝟙 + xσx + yσy + zσz)/2`; flagged pure when the vector has unit length.
pub fn density_from_bloch(v: BlochVector) -> Result<DensityMatrix> {
    let (x, y, z) = (v.x, v.y, v.z);
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(Error::NonFinite);
    }
    let r = v.norm();
    if r > 1.0 + 1e-9 {
        return Err(Error::InvalidState(format!("Bloch vector length {r} exceeds 1")));
    }
    let m = ComplexMatrix::from_fn(2, |i, j| match (i, j) {
        (0, 0) => C64::new(0.5 * (1.0 + z), 0.0),
        (1, 1) => C64::new(0.5 * (1.0 - z), 0.0),
        (0, 1) => C64::new(0.5 * x, -0.5 * y),
        _ => C64::new(0.5 * x, 0.5 * y),
    });
    DensityMatrix::new(m, (r - 1.0).abs() <= 1e-8)
}

/// `tr(ρ²)`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.matrix.trace_product(&rho.matrix).re
}

/// Von Neumann entropy in nats, eigenvalues clamped to [0, 1] and 0·ln 0 = 0.
pub fn von_neumann_entropy(rho: &DensityMatrix) -> f64 {
    rho.matrix
        .hermitian_eigenvalues()
        .into_iter()
        .map(|l| l.clamp(0.0, 1.0))
        .filter(|&l| l > 0.0)
        .fold(0.0, |acc, l| acc - l * l.ln())
}

/// `½ Σ |λ(ρ − σ)|`.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    ensure_same_dim(a.dim(), b.dim())?;
    let diff = &a.matrix - &b.matrix;
    Ok(0.5 * diff.hermitian_eigenvalues().iter().map(|l| l.abs()).sum::<f64>())
}

/// Uhlmann fidelity `(tr √(√ρ σ √ρ))²`.
pub fn fidelity(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    ensure_same_dim(a.dim(), b.dim())?;
    let overlap = a.matrix.trace_product(&b.matrix).re;
    if a.dim() == 2 {
        let det = |m: &ComplexMatrix| (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).re.max(0.0);
        return Ok((overlap + 2.0 * (det(&a.matrix) * det(&b.matrix)).sqrt()).clamp(0.0, 1.0));
    }
    if a.pure_expected || b.pure_expected {
        return Ok(overlap.clamp(0.0, 1.0));
    }
    let sqrt_a = a.matrix.hermitian_function(|l| C64::new(l.max(0.0).sqrt(), 0.0));
    let inner = sqrt_a.matmul(&b.matrix).matmul(&sqrt_a);
    let root_sum: f64 = inner.hermitian_eigenvalues().iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((root_sum * root_sum).clamp(0.0, 1.0))
}

/// Convex mixture helper used by ensemble averaging: `Σ w_k ρ_k` re-validated.
pub fn mixture(states: &[(f64, &DensityMatrix)]) -> Result<DensityMatrix> {
    let first = states.first().ok_or(Error::EmptyInput("mixture"))?;
    let d = first.1.dim();
    let mut acc = ComplexMatrix::zeros(d);
    for (w, rho) in states {
        ensure_same_dim(d, rho.dim())?;
        acc = &acc + &rho.matrix.scale_real(*w);
    }
    hermitize_and_renormalize(&acc, false)
}
