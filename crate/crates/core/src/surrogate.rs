//! Monte-Carlo oracle for the smoothed surrogate loss and the distributional
//! identities behind the optimizer's single-sample estimators.
//!
//! For a loss f, a Gaussian N(μ, Σ), and a smoothing weight λ ∈ (0, 1), the
//! surrogate is
//!
//!   s(z) = E_X[(1 − 1/λ)·f(X) + (1/λ)·f((1−λ)X + λz)],  X ~ N(μ, Σ),
//!
//! a convex lower bound on f whose derivatives admit the integral forms
//!
//!   ∇s(z)  = 1/(1−λ)   · E_X[f((1−λ)X + λz) · Σ⁻¹(X−μ)]
//!   ∇²s(z) = λ/(1−λ)²  · E_X[f((1−λ)X + λz) · (Σ⁻¹(X−μ)(X−μ)ᵀΣ⁻¹ − Σ⁻¹)].
//!
//! With Z drawn from the widened Gaussian N(μ, β²Σ), β² = (2−λ)/λ, the
//! surrogate inherits exact averaging identities that make the optimizer's
//! loss-difference estimators unbiased for the surrogate's mean gradient and
//! curvature. This module estimates both sides of those identities with
//! independent sample streams, provides closed-form Gaussian moment oracles
//! with Monte-Carlo cross-checks, and probes the production estimators for
//! bias.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bandit;
use crate::env::{Environment, LossSpec};
use crate::psd::{sym_eig_raw, PsdError, PsdFactorization, SymMatrix};
use crate::rng::Stream;

/// The surrogate's defining data: loss, base Gaussian, and smoothing weight.
#[derive(Debug, Clone)]
pub struct SurrogateSpec {
    pub loss: LossSpec,
    pub mu: DVector<f64>,
    pub sigma: PsdFactorization,
    /// Smoothing weight λ ∈ (0, 1).
    pub lambda: f64,
    /// Variance ratio of the outer sampling distribution N(μ, β²Σ).
    /// Defaults to (2 − λ)/λ, the unique ratio under which the averaging
    /// identities hold.
    pub beta_sq: f64,
}

impl SurrogateSpec {
    pub fn new(loss: LossSpec, mu: DVector<f64>, sigma: PsdFactorization, lambda: f64) -> Self {
        assert!(lambda > 0.0 && lambda < 1.0, "lambda must be in (0, 1)");
        assert_eq!(loss.dim(), mu.len());
        assert_eq!(sigma.dim(), mu.len());
        let beta_sq = (2.0 - lambda) / lambda;
        SurrogateSpec {
            loss,
            mu,
            sigma,
            lambda,
            beta_sq,
        }
    }

    /// Overrides the outer sampling variance ratio. Any value other than
    /// (2 − λ)/λ breaks the radial balance identity; the verification suite
    /// uses this as a negative control.
    pub fn with_beta_sq(mut self, beta_sq: f64) -> Self {
        assert!(beta_sq > 0.0);
        self.beta_sq = beta_sq;
        self
    }
}

/// A Monte-Carlo estimate with its standard-error summary (for vector and
/// matrix values, the largest componentwise standard error).
#[derive(Debug, Clone)]
pub struct McEstimate<T> {
    pub value: T,
    pub stderr: f64,
    pub samples: usize,
}

/// Streaming mean/variance accumulator.
#[derive(Debug, Clone)]
struct Accum {
    sum: f64,
    sumsq: f64,
    n: usize,
}

impl Accum {
    fn new() -> Self {
        Accum {
            sum: 0.0,
            sumsq: 0.0,
            n: 0,
        }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sumsq += v * v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Standard error of the mean.
    fn se(&self) -> f64 {
        let n = self.n as f64;
        let m = self.mean();
        ((self.sumsq / n - m * m).max(0.0) / n).sqrt()
    }
}

/// Per-component accumulator for vector-valued estimates.
struct VecAccum {
    comps: Vec<Accum>,
}

impl VecAccum {
    fn new(d: usize) -> Self {
        VecAccum {
            comps: vec![Accum::new(); d],
        }
    }

    fn push(&mut self, v: &DVector<f64>) {
        for (acc, &x) in self.comps.iter_mut().zip(v.iter()) {
            acc.push(x);
        }
    }

    fn means(&self) -> DVector<f64> {
        DVector::from_iterator(self.comps.len(), self.comps.iter().map(Accum::mean))
    }

    fn ses(&self) -> DVector<f64> {
        DVector::from_iterator(self.comps.len(), self.comps.iter().map(Accum::se))
    }
}

/// Per-entry accumulator for matrix-valued estimates (row-major).
struct MatAccum {
    d: usize,
    comps: Vec<Accum>,
}

impl MatAccum {
    fn new(d: usize) -> Self {
        MatAccum {
            d,
            comps: vec![Accum::new(); d * d],
        }
    }

    fn push(&mut self, m: &DMatrix<f64>) {
        for i in 0..self.d {
            for j in 0..self.d {
                self.comps[i * self.d + j].push(m[(i, j)]);
            }
        }
    }

    fn means(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| self.comps[i * self.d + j].mean())
    }

    fn ses(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| self.comps[i * self.d + j].se())
    }
}

/// The evaluation point of the smoothed loss: v = (1−λ)x + λz.
fn blend(x: &DVector<f64>, z: &DVector<f64>, lambda: f64) -> DVector<f64> {
    x * (1.0 - lambda) + z * lambda
}

/// Monte-Carlo estimate of s(z).
pub fn surrogate_value(
    spec: &SurrogateSpec,
    z: &DVector<f64>,
    n_samples: usize,
    rng: &mut Stream,
) -> McEstimate<f64> {
    assert!(n_samples >= 1);
    let d = spec.mu.len();
    let s_half = spec.sigma.sqrt();
    let (a, b) = (1.0 - spec.lambda.recip(), spec.lambda.recip());
    let mut acc = Accum::new();
    for _ in 0..n_samples {
        let x = &spec.mu + s_half.matvec(&rng.standard_normal_vec(d));
        let v = blend(&x, z, spec.lambda);
        acc.push(a * spec.loss.eval(&x) + b * spec.loss.eval(&v));
    }
    McEstimate {
        value: acc.mean(),
        stderr: acc.se(),
        samples: n_samples,
    }
}

/// Monte-Carlo estimate of ∇s(z), with the largest componentwise standard
/// error as the summary.
pub fn surrogate_grad(
    spec: &SurrogateSpec,
    z: &DVector<f64>,
    n_samples: usize,
    rng: &mut Stream,
) -> McEstimate<DVector<f64>> {
    assert!(n_samples >= 1);
    let d = spec.mu.len();
    let s_half = spec.sigma.sqrt();
    let s_inv_half = spec.sigma.inv_sqrt();
    let coeff = (1.0 - spec.lambda).recip();
    let mut acc = VecAccum::new(d);
    for _ in 0..n_samples {
        let w = rng.standard_normal_vec(d);
        let x = &spec.mu + s_half.matvec(&w);
        // Σ⁻¹(x − μ) = Σ^{-1/2}w because x − μ = Σ^{1/2}w.
        let u = s_inv_half.matvec(&w);
        let v = blend(&x, z, spec.lambda);
        acc.push(&(u * (coeff * spec.loss.eval(&v))));
    }
    McEstimate {
        value: acc.means(),
        stderr: acc.ses().max(),
        samples: n_samples,
    }
}

/// Monte-Carlo estimate of ∇²s(z), symmetrized, with the largest entrywise
/// standard error as the summary.
pub fn surrogate_hess(
    spec: &SurrogateSpec,
    z: &DVector<f64>,
    n_samples: usize,
    rng: &mut Stream,
) -> McEstimate<SymMatrix> {
    assert!(n_samples >= 1);
    let d = spec.mu.len();
    let s_half = spec.sigma.sqrt();
    let s_inv_half = spec.sigma.inv_sqrt();
    let sigma_inv = spec.sigma.inv().as_matrix().clone();
    let coeff = spec.lambda / ((1.0 - spec.lambda) * (1.0 - spec.lambda));
    let mut acc = MatAccum::new(d);
    for _ in 0..n_samples {
        let w = rng.standard_normal_vec(d);
        let x = &spec.mu + s_half.matvec(&w);
        let u = s_inv_half.matvec(&w);
        let v = blend(&x, z, spec.lambda);
        let c = coeff * spec.loss.eval(&v);
        let sample = (&u * u.transpose() - &sigma_inv) * c;
        acc.push(&sample);
    }
    McEstimate {
        value: SymMatrix::new(acc.means()).expect("finite Monte-Carlo mean"),
        stderr: acc.ses().max(),
        samples: n_samples,
    }
}

/// One identity's verdict: both sides estimated on independent streams, the
/// worst component's normalized deviation, and the 4-standard-error verdict.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    /// max |LHS − RHS| / √(se_LHS² + se_RHS²) over components.
    pub margin: f64,
    pub pass: bool,
    /// Worst component's two side values, for diagnostics.
    pub lhs: f64,
    pub rhs: f64,
    pub samples: usize,
}

/// Report of the four averaging-identity checks.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
    pub all_pass: bool,
}

impl IdentityReport {
    pub fn check(&self, name: &str) -> Option<&IdentityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn margin_of(delta: f64, combined_se: f64) -> f64 {
    if delta == 0.0 {
        0.0
    } else {
        delta.abs() / combined_se.max(1e-300)
    }
}

fn worst_component(
    l_mean: &[f64],
    l_se: &[f64],
    r_mean: &[f64],
    r_se: &[f64],
) -> (f64, f64, f64) {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..l_mean.len() {
        let se = (l_se[i] * l_se[i] + r_se[i] * r_se[i]).sqrt();
        let m = margin_of(l_mean[i] - r_mean[i], se);
        if m >= worst.0 {
            worst = (m, l_mean[i], r_mean[i]);
        }
    }
    worst
}

/// Estimates both sides of the four averaging identities on independent
/// child streams and applies the 4·(combined standard error) criterion.
///
/// The outer point Z is sampled from N(μ, `spec.beta_sq`·Σ) while the radial
/// balance multiplier is always computed from λ as (2 − λ)/λ, so an
/// inconsistent `beta_sq` makes that check fail decisively.
pub fn check_identities(spec: &SurrogateSpec, n_samples: usize, rng: &Stream) -> IdentityReport {
    assert!(n_samples >= 10_000, "identity checks need ≥ 1e4 samples");
    let d = spec.mu.len();
    let lambda = spec.lambda;
    let beta = spec.beta_sq.sqrt();
    let s_half = spec.sigma.sqrt();
    let s_inv_half = spec.sigma.inv_sqrt();
    let sigma_inv = spec.sigma.inv().as_matrix().clone();
    let grad_coeff = (1.0 - lambda).recip();
    let hess_coeff = lambda / ((1.0 - lambda) * (1.0 - lambda));
    // The balance multiplier comes from λ alone, never from the sampling
    // ratio actually used for Z.
    let balance = (2.0 - lambda) / lambda;

    let draw_x = |rng: &mut Stream| -> (DVector<f64>, DVector<f64>) {
        let w = rng.standard_normal_vec(d);
        let x = &spec.mu + s_half.matvec(&w);
        (w, x)
    };
    let draw_z = |rng: &mut Stream| -> DVector<f64> {
        &spec.mu + s_half.matvec(&rng.standard_normal_vec(d)) * beta
    };

    let mut checks = Vec::with_capacity(4);

    // E[s(Z)] = E[f(X)].
    {
        let mut lhs_rng = rng.child(0);
        let mut rhs_rng = rng.child(1);
        let mut lhs = Accum::new();
        for _ in 0..n_samples {
            let (_, x) = draw_x(&mut lhs_rng);
            let z = draw_z(&mut lhs_rng);
            let v = blend(&x, &z, lambda);
            lhs.push((1.0 - lambda.recip()) * spec.loss.eval(&x)
                + lambda.recip() * spec.loss.eval(&v));
        }
        let mut rhs = Accum::new();
        for _ in 0..n_samples {
            let (_, x) = draw_x(&mut rhs_rng);
            rhs.push(spec.loss.eval(&x));
        }
        let se = (lhs.se().powi(2) + rhs.se().powi(2)).sqrt();
        let margin = margin_of(lhs.mean() - rhs.mean(), se);
        checks.push(IdentityCheck {
            name: "value_mean".into(),
            margin,
            pass: margin <= 4.0,
            lhs: lhs.mean(),
            rhs: rhs.mean(),
            samples: n_samples,
        });
    }

    // E[∇s(Z)] = E[f(X)·Σ⁻¹(X − μ)].
    {
        let mut lhs_rng = rng.child(2);
        let mut rhs_rng = rng.child(3);
        let mut lhs = VecAccum::new(d);
        for _ in 0..n_samples {
            let (w, x) = draw_x(&mut lhs_rng);
            let z = draw_z(&mut lhs_rng);
            let u = s_inv_half.matvec(&w);
            let v = blend(&x, &z, lambda);
            lhs.push(&(u * (grad_coeff * spec.loss.eval(&v))));
        }
        let mut rhs = VecAccum::new(d);
        for _ in 0..n_samples {
            let (w, x) = draw_x(&mut rhs_rng);
            let u = s_inv_half.matvec(&w);
            rhs.push(&(u * spec.loss.eval(&x)));
        }
        let (margin, l, r) = worst_component(
            lhs.means().as_slice(),
            lhs.ses().as_slice(),
            rhs.means().as_slice(),
            rhs.ses().as_slice(),
        );
        checks.push(IdentityCheck {
            name: "gradient_mean".into(),
            margin,
            pass: margin <= 4.0,
            lhs: l,
            rhs: r,
            samples: n_samples,
        });
    }

    // E[∇²s(Z)] = λ·E[f(X)·(Σ⁻¹(X−μ)(X−μ)ᵀΣ⁻¹ − Σ⁻¹)].
    {
        let mut lhs_rng = rng.child(4);
        let mut rhs_rng = rng.child(5);
        let mut lhs = MatAccum::new(d);
        for _ in 0..n_samples {
            let (w, x) = draw_x(&mut lhs_rng);
            let z = draw_z(&mut lhs_rng);
            let u = s_inv_half.matvec(&w);
            let v = blend(&x, &z, lambda);
            let c = hess_coeff * spec.loss.eval(&v);
            lhs.push(&((&u * u.transpose() - &sigma_inv) * c));
        }
        let mut rhs = MatAccum::new(d);
        for _ in 0..n_samples {
            let (w, x) = draw_x(&mut rhs_rng);
            let u = s_inv_half.matvec(&w);
            let c = lambda * spec.loss.eval(&x);
            rhs.push(&((&u * u.transpose() - &sigma_inv) * c));
        }
        let (margin, l, r) = worst_component(
            lhs.means().as_slice(),
            lhs.ses().as_slice(),
            rhs.means().as_slice(),
            rhs.ses().as_slice(),
        );
        checks.push(IdentityCheck {
            name: "hessian_mean".into(),
            margin,
            pass: margin <= 4.0,
            lhs: l,
            rhs: r,
            samples: n_samples,
        });
    }

    // E[⟨∇s(Z), Z − μ⟩] = ((2−λ)/λ)·E[tr(Σ·∇²s(Z))].
    {
        let mut lhs_rng = rng.child(6);
        let mut rhs_rng = rng.child(7);
        let mut lhs = Accum::new();
        for _ in 0..n_samples {
            let (w, x) = draw_x(&mut lhs_rng);
            let z = draw_z(&mut lhs_rng);
            let u = s_inv_half.matvec(&w);
            let v = blend(&x, &z, lambda);
            lhs.push(grad_coeff * spec.loss.eval(&v) * u.dot(&(&z - &spec.mu)));
        }
        let mut rhs = Accum::new();
        for _ in 0..n_samples {
            let (w, x) = draw_x(&mut rhs_rng);
            let z = draw_z(&mut rhs_rng);
            let v = blend(&x, &z, lambda);
            // tr(Σ(uuᵀ − Σ⁻¹)) collapses to ‖w‖² − d for whitened w.
            rhs.push(balance * hess_coeff * spec.loss.eval(&v) * (w.norm_squared() - d as f64));
        }
        let se = (lhs.se().powi(2) + rhs.se().powi(2)).sqrt();
        let margin = margin_of(lhs.mean() - rhs.mean(), se);
        checks.push(IdentityCheck {
            name: "stein_radial".into(),
            margin,
            pass: margin <= 4.0,
            lhs: lhs.mean(),
            rhs: rhs.mean(),
            samples: n_samples,
        });
    }

    let all_pass = checks.iter().all(|c| c.pass);
    IdentityReport { checks, all_pass }
}

/// Closed-form fourth-moment products of W ~ N(0, I) under a PSD weight A.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianQuadMoments {
    /// E[‖W‖²_A] = tr(A).
    pub norm2_mean: f64,
    /// E[‖W‖⁴_A] = tr(A)² + 2·tr(A²).
    pub norm4_mean: f64,
    /// E[tr(A·M·A·M)] for M = WWᵀ − I: tr(A)² + tr(A²).
    pub centered_alternating: f64,
    /// E[tr(A·M·M·A)] for M = WWᵀ − I: (d+1)·tr(A²), since
    /// E[M²] = E[‖W‖²WWᵀ] − 2E[WWᵀ] + I = (d+2)I − 2I + I = (d+1)I.
    pub centered_squared: f64,
}

fn require_psd(a: &SymMatrix) -> Result<(), PsdError> {
    let (vals, _) = sym_eig_raw(a);
    let min_eig = vals[0];
    let max_eig = vals[a.dim() - 1];
    if min_eig < -1e-12 * max_eig.abs().max(1.0) {
        return Err(PsdError::NotPositiveDefinite { min_eig });
    }
    Ok(())
}

/// tr(A²) = Σ_ij A_ij² for symmetric A, summed directly so that integer
/// matrices give exact integers.
fn trace_of_square(a: &SymMatrix) -> f64 {
    a.as_matrix().iter().map(|v| v * v).sum()
}

/// Closed-form quadratic/quartic Gaussian moments for a PSD weight matrix.
pub fn gaussian_moment_oracle(a: &SymMatrix) -> Result<GaussianQuadMoments, PsdError> {
    require_psd(a)?;
    let d = a.dim() as f64;
    let tr = a.trace();
    let tr_sq = trace_of_square(a);
    Ok(GaussianQuadMoments {
        norm2_mean: tr,
        norm4_mean: tr * tr + 2.0 * tr_sq,
        centered_alternating: tr * tr + tr_sq,
        centered_squared: (d + 1.0) * tr_sq,
    })
}

/// Monte-Carlo counterparts of [`gaussian_moment_oracle`].
#[derive(Debug, Clone)]
pub struct QuadMomentsMc {
    pub norm2_mean: McEstimate<f64>,
    pub norm4_mean: McEstimate<f64>,
    pub centered_alternating: McEstimate<f64>,
    pub centered_squared: McEstimate<f64>,
}

/// Estimates the four weighted moments by direct sampling of W ~ N(0, I).
pub fn mc_quad_moments(a: &SymMatrix, n_samples: usize, rng: &mut Stream) -> QuadMomentsMc {
    let d = a.dim();
    let am = a.as_matrix();
    let mut m2 = Accum::new();
    let mut m4 = Accum::new();
    let mut alt = Accum::new();
    let mut sq = Accum::new();
    for _ in 0..n_samples {
        let w = rng.standard_normal_vec(d);
        let u = am * &w;
        let s2 = u.dot(&w);
        m2.push(s2);
        m4.push(s2 * s2);
        // Entries of A·(wwᵀ − I) are u_i·w_j − A_ij; the two trace products
        // follow from (A·M)ᵀ = M·A for symmetric A and M.
        let mut tr_alt = 0.0;
        let mut tr_sq = 0.0;
        for i in 0..d {
            for j in 0..d {
                let amij = u[i] * w[j] - am[(i, j)];
                let amji = u[j] * w[i] - am[(j, i)];
                tr_alt += amij * amji;
                tr_sq += amij * amij;
            }
        }
        alt.push(tr_alt);
        sq.push(tr_sq);
    }
    let wrap = |a: &Accum| McEstimate {
        value: a.mean(),
        stderr: a.se(),
        samples: n_samples,
    };
    QuadMomentsMc {
        norm2_mean: wrap(&m2),
        norm4_mean: wrap(&m4),
        centered_alternating: wrap(&alt),
        centered_squared: wrap(&sq),
    }
}

/// Closed-form E[‖Z‖²] and E[‖Z‖⁴] for Z ~ N(μ, Σ):
///
///   E‖Z‖² = tr(Σ) + ‖μ‖²
///   E‖Z‖⁴ = tr(Σ)² + 2tr(Σ²) + 4μᵀΣμ + ‖μ‖⁴ + 2tr(Σ)‖μ‖²
///
/// (expanding (‖X‖² + 2⟨μ,X⟩ + ‖μ‖²)² for centered X gives the cross term
/// E[(2⟨μ,X⟩)²] = 4μᵀΣμ; scalar sanity check: N(3,1) has fourth moment
/// 138 = 81 + 6·9 + 3). Also asserts the bound E‖Z‖⁴ ≤ 3(E‖Z‖²)².
pub fn gaussian_norm_moments(mu: &DVector<f64>, sigma: &SymMatrix) -> Result<(f64, f64), PsdError> {
    if mu.len() != sigma.dim() {
        return Err(PsdError::DimensionMismatch {
            expected: sigma.dim(),
            got: mu.len(),
        });
    }
    require_psd(sigma)?;
    let tr = sigma.trace();
    let tr_sq = trace_of_square(sigma);
    let mu2 = mu.norm_squared();
    let mu_sigma = sigma.quad_form(mu);
    let e2 = tr + mu2;
    let e4 = tr * tr + 2.0 * tr_sq + 4.0 * mu_sigma + mu2 * mu2 + 2.0 * tr * mu2;
    assert!(
        e4 <= 3.0 * e2 * e2 * (1.0 + 1e-12),
        "fourth-moment bound violated: {e4} > 3·{e2}²"
    );
    Ok((e2, e4))
}

/// Monte-Carlo counterpart of [`gaussian_norm_moments`].
pub fn mc_norm_moments(
    mu: &DVector<f64>,
    sigma: &PsdFactorization,
    n_samples: usize,
    rng: &mut Stream,
) -> (McEstimate<f64>, McEstimate<f64>) {
    let d = mu.len();
    let s_half = sigma.sqrt();
    let mut e2 = Accum::new();
    let mut e4 = Accum::new();
    for _ in 0..n_samples {
        let z = mu + s_half.matvec(&rng.standard_normal_vec(d));
        let n2 = z.norm_squared();
        e2.push(n2);
        e4.push(n2 * n2);
    }
    (
        McEstimate {
            value: e2.mean(),
            stderr: e2.se(),
            samples: n_samples,
        },
        McEstimate {
            value: e4.mean(),
            stderr: e4.se(),
            samples: n_samples,
        },
    )
}

/// Closed form of E[exp(⟨x,W⟩²/t²)] for unit x and standard normal W:
/// 1/√(1 − 2/t²), finite for t² > 2.
pub fn exp_square_moment(t: f64) -> f64 {
    assert!(t * t > 2.0, "moment diverges for t² ≤ 2");
    (1.0 - 2.0 / (t * t)).sqrt().recip()
}

/// Monte-Carlo counterpart of [`exp_square_moment`].
pub fn mc_exp_square_moment(t: f64, n_samples: usize, rng: &mut Stream) -> McEstimate<f64> {
    let inv_t_sq = (t * t).recip();
    let mut acc = Accum::new();
    for _ in 0..n_samples {
        let z = rng.standard_normal();
        acc.push((z * z * inv_t_sq).exp());
    }
    McEstimate {
        value: acc.mean(),
        stderr: acc.se(),
        samples: n_samples,
    }
}

/// Bias probe verdict for the production gradient/curvature estimators.
#[derive(Debug, Clone, Serialize)]
pub struct BiasProbeReport {
    /// Worst-component normalized gap between E[g] and the surrogate's mean
    /// gradient.
    pub grad_margin: f64,
    pub grad_pass: bool,
    /// Worst-entry normalized gap between E[H] and the surrogate's mean
    /// curvature.
    pub hess_margin: f64,
    pub hess_pass: bool,
    pub samples: usize,
    #[serde(skip)]
    pub grad_estimator_mean: DVector<f64>,
    #[serde(skip)]
    pub grad_estimator_se: DVector<f64>,
    #[serde(skip)]
    pub hess_estimator_mean: DMatrix<f64>,
    #[serde(skip)]
    pub hess_estimator_se: DMatrix<f64>,
}

/// Simulates the optimizer's untruncated estimators around a fixed state
/// (μ, Σ, λ) and compares their means against the surrogate's mean gradient
/// and curvature over Z ~ N(μ, β²Σ).
///
/// Observations are Y = f(X) + ε − y_baseline; the baseline multiplies a
/// mean-zero factor, so any finite value leaves both expectations unchanged.
/// The estimator sides run the same `g`/`H` code the optimizer uses.
pub fn estimator_bias_probe(
    mu: &DVector<f64>,
    sigma: &PsdFactorization,
    lambda: f64,
    env: &Environment,
    y_baseline: f64,
    n_samples: usize,
    rng: &Stream,
) -> BiasProbeReport {
    assert!(lambda > 0.0 && lambda < 1.0);
    let d = mu.len();
    let s_half = sigma.sqrt();
    let s_inv_half = sigma.inv_sqrt();
    let sigma_inv = sigma.inv().as_matrix().clone();
    let beta = ((2.0 - lambda) / lambda).sqrt();
    let grad_coeff = (1.0 - lambda).recip();
    let hess_coeff = lambda / ((1.0 - lambda) * (1.0 - lambda));

    // E[g]: production gradient estimate around μ with baseline-shifted
    // observations.
    let mut g_rng = rng.child(0);
    let mut g_acc = VecAccum::new(d);
    for _ in 0..n_samples {
        let w = g_rng.standard_normal_vec(d);
        let dx = s_half.matvec(&w);
        let x = mu + &dx;
        let y = env.observe(&x, &mut g_rng) - y_baseline;
        g_acc.push(&bandit::grad_est(sigma, y, &dx));
    }

    // E[H]: production curvature estimate, same protocol.
    let mut h_rng = rng.child(1);
    let mut h_acc = MatAccum::new(d);
    for _ in 0..n_samples {
        let w = h_rng.standard_normal_vec(d);
        let x = mu + s_half.matvec(&w);
        let y = env.observe(&x, &mut h_rng) - y_baseline;
        let h = bandit::hess_est(sigma, lambda, y, &w).expect("finite curvature sample");
        h_acc.push(h.as_matrix());
    }

    // Surrogate sides: noiseless integrands averaged over (X, Z).
    let mut sg_rng = rng.child(2);
    let mut sg_acc = VecAccum::new(d);
    for _ in 0..n_samples {
        let w = sg_rng.standard_normal_vec(d);
        let x = mu + s_half.matvec(&w);
        let z = mu + s_half.matvec(&sg_rng.standard_normal_vec(d)) * beta;
        let u = s_inv_half.matvec(&w);
        let v = blend(&x, &z, lambda);
        sg_acc.push(&(u * (grad_coeff * env.loss().eval(&v))));
    }

    let mut sh_rng = rng.child(3);
    let mut sh_acc = MatAccum::new(d);
    for _ in 0..n_samples {
        let w = sh_rng.standard_normal_vec(d);
        let x = mu + s_half.matvec(&w);
        let z = mu + s_half.matvec(&sh_rng.standard_normal_vec(d)) * beta;
        let u = s_inv_half.matvec(&w);
        let v = blend(&x, &z, lambda);
        let c = hess_coeff * env.loss().eval(&v);
        sh_acc.push(&((&u * u.transpose() - &sigma_inv) * c));
    }

    let (grad_margin, _, _) = worst_component(
        g_acc.means().as_slice(),
        g_acc.ses().as_slice(),
        sg_acc.means().as_slice(),
        sg_acc.ses().as_slice(),
    );
    let (hess_margin, _, _) = worst_component(
        h_acc.means().as_slice(),
        h_acc.ses().as_slice(),
        sh_acc.means().as_slice(),
        sh_acc.ses().as_slice(),
    );
    BiasProbeReport {
        grad_margin,
        grad_pass: grad_margin <= 4.0,
        hess_margin,
        hess_pass: hess_margin <= 4.0,
        samples: n_samples,
        grad_estimator_mean: g_acc.means(),
        grad_estimator_se: g_acc.ses(),
        hess_estimator_mean: h_acc.means(),
        hess_estimator_se: h_acc.ses(),
    }
}

/// Worst excess of the estimated surrogate above the loss, over random
/// probe points: max over z of ŝ(z) − f(z) − 4·se − dust. Nonpositive means
/// the lower-bound property held everywhere probed.
pub fn upper_bound_excess(
    spec: &SurrogateSpec,
    probe_points: usize,
    n_samples: usize,
    radius: f64,
    rng: &Stream,
) -> f64 {
    let d = spec.mu.len();
    let mut z_rng = rng.child(0);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..probe_points {
        let z = &spec.mu + z_rng.in_ball(d, radius);
        let est = surrogate_value(spec, &z, n_samples, &mut rng.child(1 + k as u64));
        let f_z = spec.loss.eval(&z);
        let dust = 1e-9 * f_z.abs().max(1.0);
        worst = worst.max(est.value - f_z - 4.0 * est.stderr - dust);
    }
    worst
}

/// Worst midpoint-convexity excess of the estimated surrogate along random
/// segments, using common random numbers across the three evaluation points:
/// max over segments of ŝ(mid) − (ŝ(z₁)+ŝ(z₂))/2 − 4·se − dust. The common
/// draws make the compared quantity a pointwise-nonpositive average, so this
/// is nonpositive up to round-off for a convex loss.
pub fn convexity_excess(
    spec: &SurrogateSpec,
    segments: usize,
    n_samples: usize,
    radius: f64,
    rng: &Stream,
) -> f64 {
    let d = spec.mu.len();
    let s_half = spec.sigma.sqrt();
    let inv_lambda = spec.lambda.recip();
    let mut z_rng = rng.child(0);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..segments {
        let z1 = &spec.mu + z_rng.in_ball(d, radius);
        let z2 = &spec.mu + z_rng.in_ball(d, radius);
        let mid = (&z1 + &z2) * 0.5;
        let mut x_rng = rng.child(1 + k as u64);
        let mut acc = Accum::new();
        let mut scale: f64 = 1.0;
        for _ in 0..n_samples {
            let x = &spec.mu + s_half.matvec(&x_rng.standard_normal_vec(d));
            // The (1 − 1/λ)f(x) terms cancel in the midpoint combination.
            let f_mid = spec.loss.eval(&blend(&x, &mid, spec.lambda));
            let f_1 = spec.loss.eval(&blend(&x, &z1, spec.lambda));
            let f_2 = spec.loss.eval(&blend(&x, &z2, spec.lambda));
            acc.push(inv_lambda * (f_mid - 0.5 * (f_1 + f_2)));
            scale = scale.max(f_mid.abs());
        }
        worst = worst.max(acc.mean() - 4.0 * acc.se() - 1e-9 * scale);
    }
    worst
}
