//! Dense symmetric positive-definite matrix kernel.
//!
//! Everything the optimizer needs from linear algebra lives here:
//! eigendecomposition with a scale-relative positivity floor, fractional
//! powers (inverse, square root, inverse square root), the additive
//! precision-matrix update with a skip-on-failure guard, the closed-form
//! 2-Wasserstein distance between Gaussians, and spectral summaries used by
//! the stability diagnostics.
//!
//! Matrices are dense and small (d is expected to stay below ~64); every
//! operation is a pure function of its inputs.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::rng::Stream;

/// Errors from symmetric/PD matrix operations.
#[derive(Debug, Error)]
pub enum PsdError {
    /// Smallest eigenvalue fell at or below the positivity floor.
    #[error("matrix is not positive definite (min eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { min_eig: f64 },
    /// NaN or infinity encountered in an input or intermediate.
    #[error("non-finite matrix entries")]
    NonFinite,
    /// Operand dimensions disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Positivity floor below which an eigenvalue is treated as zero.
///
/// Scale-relative so that well-conditioned matrices of small magnitude are
/// not spuriously rejected.
fn pd_floor(max_eig: f64) -> f64 {
    1e-12 * max_eig.max(1.0)
}

/// A real symmetric matrix with finite entries.
///
/// Construction symmetrizes via (a + aᵀ)/2 so floating-point drift in
/// accumulated updates cannot break symmetry downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Symmetrizes and validates a square matrix.
    pub fn new(m: DMatrix<f64>) -> Result<Self, PsdError> {
        if m.nrows() != m.ncols() {
            return Err(PsdError::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let s = (&m + m.transpose()) * 0.5;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(PsdError::NonFinite);
        }
        Ok(SymMatrix { m: s })
    }

    /// d-dimensional identity.
    pub fn identity(dim: usize) -> Self {
        SymMatrix {
            m: DMatrix::identity(dim, dim),
        }
    }

    /// scale · identity.
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        assert!(scale.is_finite(), "scale must be finite");
        SymMatrix {
            m: DMatrix::identity(dim, dim) * scale,
        }
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        assert!(diag.iter().all(|v| v.is_finite()), "diagonal must be finite");
        SymMatrix {
            m: DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
        }
    }

    /// Builds from explicit rows; rows must form a square table.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, PsdError> {
        let d = rows.len();
        let mut m = DMatrix::zeros(d, d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(PsdError::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        SymMatrix::new(m)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.norm()
    }

    /// Matrix-vector product A·v.
    pub fn matvec(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim(), "matvec dimension mismatch");
        &self.m * v
    }

    /// Quadratic form vᵀ A v.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        self.matvec(v).dot(v)
    }

    /// self + scale · other, revalidated for finiteness.
    pub fn add_scaled(&self, other: &SymMatrix, scale: f64) -> Result<SymMatrix, PsdError> {
        if other.dim() != self.dim() {
            return Err(PsdError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        SymMatrix::new(&self.m + &other.m * scale)
    }
}

/// Exponents supported by [`psd_power`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsdPower {
    /// A⁻¹
    Inverse,
    /// A^{-1/2}
    InvSqrt,
    /// A^{1/2}
    Sqrt,
}

/// Eigendecomposition of a positive-definite symmetric matrix.
///
/// Eigenvalues are stored ascending with matching orthonormal eigenvector
/// columns; the three fractional powers used by the optimizer are computed
/// lazily and cached.
#[derive(Debug, Clone)]
pub struct PsdFactorization {
    source: SymMatrix,
    eigvals: DVector<f64>,
    q: DMatrix<f64>,
    inv: OnceLock<SymMatrix>,
    sqrt: OnceLock<SymMatrix>,
    inv_sqrt: OnceLock<SymMatrix>,
}

impl PsdFactorization {
    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    /// The matrix that was factorized.
    pub fn source(&self) -> &SymMatrix {
        &self.source
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }

    pub fn min_eig(&self) -> f64 {
        self.eigvals[0]
    }

    pub fn max_eig(&self) -> f64 {
        self.eigvals[self.dim() - 1]
    }

    fn power_matrix(&self, p: PsdPower) -> SymMatrix {
        let mut scaled = self.q.clone();
        for i in 0..self.dim() {
            let lambda = self.eigvals[i];
            let w = match p {
                PsdPower::Inverse => lambda.recip(),
                PsdPower::InvSqrt => lambda.sqrt().recip(),
                PsdPower::Sqrt => lambda.sqrt(),
            };
            scaled.column_mut(i).scale_mut(w);
        }
        SymMatrix::new(scaled * self.q.transpose())
            .expect("powers of a positive-definite factorization are finite")
    }

    /// A⁻¹, cached.
    pub fn inv(&self) -> &SymMatrix {
        self.inv.get_or_init(|| self.power_matrix(PsdPower::Inverse))
    }

    /// A^{1/2}, cached.
    pub fn sqrt(&self) -> &SymMatrix {
        self.sqrt.get_or_init(|| self.power_matrix(PsdPower::Sqrt))
    }

    /// A^{-1/2}, cached.
    pub fn inv_sqrt(&self) -> &SymMatrix {
        self.inv_sqrt
            .get_or_init(|| self.power_matrix(PsdPower::InvSqrt))
    }

    /// Factorization of A⁻¹, reusing this eigenbasis (no new decomposition).
    pub fn inverse_fact(&self) -> PsdFactorization {
        let d = self.dim();
        let mut vals = DVector::zeros(d);
        let mut q = DMatrix::zeros(d, d);
        // Reciprocal eigenvalues reverse the ascending order.
        for i in 0..d {
            vals[i] = self.eigvals[d - 1 - i].recip();
            q.set_column(i, &self.q.column(d - 1 - i));
        }
        let fact = PsdFactorization {
            source: self.inv().clone(),
            eigvals: vals,
            q,
            inv: OnceLock::new(),
            sqrt: OnceLock::new(),
            inv_sqrt: OnceLock::new(),
        };
        let _ = fact.inv.set(self.source.clone());
        fact
    }
}

/// Eigendecomposition without any positivity check; ascending eigenvalues.
pub(crate) fn sym_eig_raw(a: &SymMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let se = a.m.clone().symmetric_eigen();
    let d = a.dim();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        se.eigenvalues[i]
            .partial_cmp(&se.eigenvalues[j])
            .expect("eigenvalues of a finite symmetric matrix are finite")
    });
    let mut vals = DVector::zeros(d);
    let mut q = DMatrix::zeros(d, d);
    for (i, &src) in order.iter().enumerate() {
        vals[i] = se.eigenvalues[src];
        q.set_column(i, &se.eigenvectors.column(src));
    }
    (vals, q)
}

/// Factorizes a symmetric matrix, requiring strict positive-definiteness.
///
/// Fails with [`PsdError::NotPositiveDefinite`] when the smallest eigenvalue
/// does not clear the scale-relative floor 1e-12 · max(1, λ_max).
pub fn sym_eig(a: SymMatrix) -> Result<PsdFactorization, PsdError> {
    let (vals, q) = sym_eig_raw(&a);
    let d = a.dim();
    let min_eig = vals[0];
    if min_eig <= pd_floor(vals[d - 1]) {
        return Err(PsdError::NotPositiveDefinite { min_eig });
    }
    Ok(PsdFactorization {
        source: a,
        eigvals: vals,
        q,
        inv: OnceLock::new(),
        sqrt: OnceLock::new(),
        inv_sqrt: OnceLock::new(),
    })
}

/// Q Λ^p Qᵀ for p ∈ {−1, −1/2, 1/2}.
pub fn psd_power(f: &PsdFactorization, p: PsdPower) -> SymMatrix {
    match p {
        PsdPower::Inverse => f.inv().clone(),
        PsdPower::InvSqrt => f.inv_sqrt().clone(),
        PsdPower::Sqrt => f.sqrt().clone(),
    }
}

/// Additive precision update with a positivity guard.
///
/// Forms `sigma_inv + (eta/4)·h`; if the candidate clears the positivity
/// floor it is returned with `clipped = false`, otherwise the update is
/// skipped entirely and the previous precision is returned with
/// `clipped = true`. Skipping (rather than clamping eigenvalues) is the
/// minimal intervention that keeps every downstream quantity well-defined.
pub fn update_precision(
    sigma_inv: &SymMatrix,
    h: &SymMatrix,
    eta: f64,
) -> Result<(SymMatrix, bool), PsdError> {
    match try_precision_step(sigma_inv, h, eta)? {
        Some(fact) => Ok((fact.source().clone(), false)),
        None => Ok((sigma_inv.clone(), true)),
    }
}

/// Like [`update_precision`] but yields the factorized candidate on success
/// (`None` when the candidate fails the positivity floor), so callers can
/// reuse the eigendecomposition instead of refactorizing.
pub(crate) fn try_precision_step(
    sigma_inv: &SymMatrix,
    h: &SymMatrix,
    eta: f64,
) -> Result<Option<PsdFactorization>, PsdError> {
    if !eta.is_finite() {
        return Err(PsdError::NonFinite);
    }
    debug_assert!(eta >= 0.0, "step size must be nonnegative");
    let candidate = sigma_inv.add_scaled(h, eta / 4.0)?;
    match sym_eig(candidate) {
        Ok(fact) => Ok(Some(fact)),
        Err(PsdError::NotPositiveDefinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// 2-Wasserstein distance between N(μ₁, Σ₁) and N(μ₂, Σ₂).
///
/// Evaluates the closed form
/// ‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})
/// and returns its square root; round-off can push the expression a hair
/// below zero on identical inputs, so values ≥ −1e-10 clamp to zero.
pub fn wasserstein2_gaussian(
    mu1: &DVector<f64>,
    f1: &PsdFactorization,
    mu2: &DVector<f64>,
    f2: &PsdFactorization,
) -> Result<f64, PsdError> {
    let d = mu1.len();
    for got in [f1.dim(), mu2.len(), f2.dim()] {
        if got != d {
            return Err(PsdError::DimensionMismatch { expected: d, got });
        }
    }
    // Identical inputs have distance exactly zero; the general expression
    // below would instead surface ~√ε·tr(Σ) of cancellation noise.
    if mu1 == mu2 && f1.source() == f2.source() {
        return Ok(0.0);
    }
    let s1 = f1.sqrt().as_matrix();
    let inner = SymMatrix::new(s1 * f2.source().as_matrix() * s1)?;
    let (vals, _) = sym_eig_raw(&inner);
    // The congruence is PSD up to round-off; negative dust is truncated.
    let cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let expr =
        (mu1 - mu2).norm_squared() + f1.source().trace() + f2.source().trace() - 2.0 * cross;
    debug_assert!(expr >= -1e-10, "distance expression too negative: {expr}");
    Ok(expr.max(0.0).sqrt())
}

/// Spectral summary of a factorized PD matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralStats {
    pub trace: f64,
    pub op_norm: f64,
    pub min_eig: f64,
    pub logdet: f64,
}

/// Trace, operator norm, smallest eigenvalue, and log-determinant.
pub fn spectral_stats(f: &PsdFactorization) -> SpectralStats {
    SpectralStats {
        trace: f.eigvals.sum(),
        op_norm: f.max_eig(),
        min_eig: f.min_eig(),
        logdet: f.eigvals.iter().map(|l| l.ln()).sum(),
    }
}

/// Random PD matrix with eigenvalues log-uniform in [eig_lo, eig_hi] and a
/// Haar-ish eigenbasis from the QR of a Gaussian matrix. Test/verify utility.
pub fn random_pd(dim: usize, eig_lo: f64, eig_hi: f64, rng: &mut Stream) -> SymMatrix {
    assert!(dim >= 1 && eig_lo > 0.0 && eig_hi >= eig_lo);
    let (lo_ln, hi_ln) = (eig_lo.ln(), eig_hi.ln());
    let mut vals = DVector::zeros(dim);
    for i in 0..dim {
        vals[i] = (lo_ln + (hi_ln - lo_ln) * rng.uniform()).exp();
    }
    let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.standard_normal());
    let q = gauss.qr().q();
    let mut scaled = q.clone();
    for i in 0..dim {
        scaled.column_mut(i).scale_mut(vals[i]);
    }
    SymMatrix::new(scaled * q.transpose()).expect("finite by construction")
}
