//! Gaussian-search zeroth-order optimizer.
//!
//! The optimizer maintains a Gaussian proposal distribution N(μ_t, Σ_t). Each
//! round it plays a sample X_t, observes a noisy loss Y_t, and turns the
//! single-round loss difference Y_t − Y_{t−1} into unbiased-in-expectation
//! gradient and curvature signals for a smoothed surrogate of the loss:
//!
//!   W_t = Σ_t^{-1/2}(X_t − μ_t)                    (whitened displacement)
//!   D_t = T_t · (Y_t − Y_{t−1})                     (truncated difference)
//!   g_t = D_t · Σ_t⁻¹(X_t − μ_t)                    (gradient estimate)
//!   H_t = λ·D_t · Σ_t^{-1/2}(W_tW_tᵀ − I)Σ_t^{-1/2} (curvature estimate)
//!
//! The mean then takes a preconditioned gradient step μ_{t+1} = μ_t − ηΣ_t g_t
//! (equivalently μ_t − ηD_t(X_t − μ_t)) and the precision accumulates
//! curvature, Σ_{t+1}⁻¹ = Σ_t⁻¹ + (η/4)H_t, skipped if it would lose positive
//! definiteness. Round 1 only samples and observes; the first update happens
//! on the second observation.
//!
//! Two parameter modes are provided: a `Theoretical` mode with explicit
//! logarithmic truncation thresholds, and a `Practical` mode that drops the
//! log factors and truncation entirely.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::psd::{self, PsdError, PsdFactorization, SymMatrix};
use crate::rng::Stream;

/// Optimizer construction/update errors.
#[derive(Debug, Error)]
pub enum BanditError {
    #[error("horizon must be at least 2, got {0}")]
    InvalidHorizon(usize),
    #[error("sampling radius must be at least 1 and finite, got {0}")]
    InvalidRadius(f64),
    #[error("non-finite observation or intermediate value")]
    NonFinite,
    #[error("input dimension does not match optimizer state")]
    StateMismatch,
}

impl From<PsdError> for BanditError {
    fn from(e: PsdError) -> Self {
        match e {
            PsdError::NonFinite => BanditError::NonFinite,
            PsdError::DimensionMismatch { .. } => BanditError::StateMismatch,
            // Positivity failures inside the update are handled as skips and
            // never surface as errors.
            PsdError::NotPositiveDefinite { .. } => BanditError::NonFinite,
        }
    }
}

/// Parameter regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Explicit truncation thresholds and log-factor step sizes.
    Theoretical,
    /// No truncation; η = (1/(1+r/d))·√(d/n), λ = min(1/d, 0.99).
    Practical,
}

/// Tunable constants of the theoretical parameterization. The analysis only
/// requires them "suitably large/small"; the defaults below are the all-ones
/// choice and are not certified by any bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdConstants {
    /// Multiplier on the truncation thresholds and curvature budget (≥ 1).
    pub c_mult: f64,
    /// Multiplier on the step size and smoothing weight (in (0, 1]).
    pub c_step: f64,
    /// Exponent of the polynomial scale P = max(2, n, d, r)^m (≥ 1).
    pub m_exp: f64,
}

impl Default for ThresholdConstants {
    fn default() -> Self {
        ThresholdConstants {
            c_mult: 1.0,
            c_step: 1.0,
            m_exp: 1.0,
        }
    }
}

/// Fully derived run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoParams {
    pub n: usize,
    pub d: usize,
    pub r: f64,
    pub x_init: DVector<f64>,
    pub mode: Mode,
    pub consts: ThresholdConstants,
    /// Polynomial scale P = max(2, n, d, r)^m.
    pub p: f64,
    /// Natural log of P.
    pub log_p: f64,
    /// Whitened-displacement truncation threshold (∞ in practical mode).
    pub w_max: f64,
    /// Loss-difference truncation threshold (∞ in practical mode).
    pub d_max: f64,
    /// Step size η.
    pub eta: f64,
    /// Smoothing weight λ ∈ (0, 1).
    pub lambda: f64,
    /// Curvature budget for the focus region (informational in practical
    /// mode).
    pub f_max: f64,
    /// Diagnostic cap on tr(Σ_t⁻¹): (n·d²/r² + d·n²/4 + n)².
    pub sigma_inv_trace_cap: f64,
}

/// Derives all run parameters for the chosen mode.
///
/// In practical mode `consts` is stored but does not enter any formula; the
/// scale P is reported with exponent 1 for reference.
pub fn make_params(
    n: usize,
    d: usize,
    r: f64,
    x_init: DVector<f64>,
    mode: Mode,
    consts: ThresholdConstants,
) -> Result<AlgoParams, BanditError> {
    if n < 2 {
        return Err(BanditError::InvalidHorizon(n));
    }
    if !(r.is_finite() && r >= 1.0) {
        return Err(BanditError::InvalidRadius(r));
    }
    assert!(d >= 1, "dimension must be at least 1");
    assert_eq!(x_init.len(), d, "x_init must have length d");
    assert!(
        consts.c_mult >= 1.0 && consts.c_step > 0.0 && consts.c_step <= 1.0 && consts.m_exp >= 1.0,
        "constants out of range: need c_mult ≥ 1, c_step in (0,1], m_exp ≥ 1"
    );

    let (nf, df) = (n as f64, d as f64);
    let base = 2f64.max(nf).max(df).max(r);
    let m_exp = match mode {
        Mode::Theoretical => consts.m_exp,
        Mode::Practical => 1.0,
    };
    let p = base.powf(m_exp);
    let log_p = m_exp * base.ln();

    let (w_max, d_max, eta, lambda, f_max) = match mode {
        Mode::Theoretical => {
            let w_max = consts.c_mult * (df * log_p).sqrt();
            let d_max = consts.c_mult * (1.0 + r / df) * log_p.sqrt();
            let eta = (consts.c_step / d_max) * (df / nf).sqrt().min((df * log_p.sqrt()).recip());
            let f_max = consts.c_mult * df * df * log_p.powi(3);
            let lambda = (consts.c_step / (f_max * log_p).sqrt()).min(0.99);
            (w_max, d_max, eta, lambda, f_max)
        }
        Mode::Practical => {
            let eta = (1.0 + r / df).recip() * (df / nf).sqrt();
            let lambda = df.recip().min(0.99);
            let f_max = df * df * log_p.powi(3);
            (f64::INFINITY, f64::INFINITY, eta, lambda, f_max)
        }
    };
    debug_assert!(eta > 0.0 && lambda > 0.0 && lambda < 1.0);

    let sigma_inv_trace_cap = (nf * df * df / (r * r) + df * nf * nf / 4.0 + nf).powi(2);

    Ok(AlgoParams {
        n,
        d,
        r,
        x_init,
        mode,
        consts,
        p,
        log_p,
        w_max,
        d_max,
        eta,
        lambda,
        f_max,
        sigma_inv_trace_cap,
    })
}

/// Mutable optimizer state: round index, proposal mean and covariance, the
/// previous observation, and event counters.
#[derive(Debug, Clone)]
pub struct GaussianSearchState {
    t: usize,
    mu: DVector<f64>,
    sigma: PsdFactorization,
    y_prev: Option<f64>,
    trunc_count: u64,
    clip_count: u64,
    /// Round-1 covariance, kept for the covariance-growth diagnostic.
    sigma1: SymMatrix,
    /// Reference point of the potential diagnostic (defaults to x_init; set
    /// to the environment's known minimizer by the harness).
    x_ref: DVector<f64>,
    debug_checks: bool,
}

impl GaussianSearchState {
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &PsdFactorization {
        &self.sigma
    }

    pub fn y_prev(&self) -> Option<f64> {
        self.y_prev
    }

    pub fn trunc_count(&self) -> u64 {
        self.trunc_count
    }

    pub fn clip_count(&self) -> u64 {
        self.clip_count
    }

    pub fn x_ref(&self) -> &DVector<f64> {
        &self.x_ref
    }

    /// Sets the reference point used by the potential diagnostic.
    pub fn set_diagnostic_reference(&mut self, x_ref: DVector<f64>) {
        assert_eq!(x_ref.len(), self.mu.len());
        self.x_ref = x_ref;
    }

    /// Enables per-round algebraic cross-checks (costs one extra O(d³)
    /// product per round; intended for debug runs).
    pub fn enable_debug_checks(&mut self, on: bool) {
        self.debug_checks = on;
    }

    /// Test-only constructor for states that `init` cannot reach (arbitrary
    /// covariance or smoothing weight).
    #[cfg(test)]
    pub(crate) fn new_raw(
        t: usize,
        mu: DVector<f64>,
        sigma: PsdFactorization,
        y_prev: Option<f64>,
    ) -> Self {
        let x_ref = mu.clone();
        let sigma1 = sigma.source().clone();
        GaussianSearchState {
            t,
            mu,
            sigma,
            y_prev,
            trunc_count: 0,
            clip_count: 0,
            sigma1,
            x_ref,
            debug_checks: false,
        }
    }
}

/// Per-round sampling/update telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Round index of the observation this record describes.
    pub t: usize,
    pub x: DVector<f64>,
    pub y: f64,
    /// ‖W_t‖ (0 for the observation-only first round).
    pub w_norm: f64,
    /// True when the truncation test zeroed this round's update.
    pub truncated: bool,
    /// Truncated loss difference D_t.
    pub d_t: f64,
    /// ‖g_t‖.
    pub g_norm: f64,
    /// True when the curvature update was skipped to preserve positive
    /// definiteness.
    pub hessian_skipped: bool,
    pub diag: DiagnosticFlags,
    /// ‖Σ_t·Σ_{t+1}⁻¹ − I − (η/4)Σ_t·H_t‖_F, populated only in debug-check
    /// runs on rounds where the curvature update was applied.
    pub precision_identity_residual: Option<f64>,
}

/// Observable stability conditions, recomputed from state every round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticFlags {
    /// Σ_{t+1} ≤ 2Σ₁ in the positive-semidefinite order (up to round-off).
    pub cov_le_two_sigma1: bool,
    /// tr(Σ_{t+1}⁻¹) within its diagnostic cap.
    pub trace_inv_ok: bool,
    /// ½‖μ_{t+1} − x_ref‖² in the Σ_{t+1}⁻¹ norm.
    pub potential: f64,
}

/// Fresh state at round 1: μ = x_init, Σ = (r²/d²)·I, nothing observed yet.
pub fn init(params: &AlgoParams) -> GaussianSearchState {
    let scale = (params.r / params.d as f64).powi(2);
    let sigma1 = SymMatrix::scaled_identity(params.d, scale);
    let sigma = psd::sym_eig(sigma1.clone()).expect("scaled identity is positive definite");
    GaussianSearchState {
        t: 1,
        mu: params.x_init.clone(),
        sigma,
        y_prev: None,
        trunc_count: 0,
        clip_count: 0,
        sigma1,
        x_ref: params.x_init.clone(),
        debug_checks: false,
    }
}

/// Samples the next query point X = μ + Σ^{1/2}z. Consumes exactly
/// 2·⌈d/2⌉ raw draws, so the stream position is a function of the round
/// count alone.
pub fn propose(state: &GaussianSearchState, rng: &mut Stream) -> DVector<f64> {
    let z = rng.standard_normal_vec(state.mu.len());
    &state.mu + state.sigma.sqrt().matvec(&z)
}

/// g = D·Σ⁻¹(x − μ). Shared with the estimator-bias probes.
pub(crate) fn grad_est(sigma: &PsdFactorization, d_t: f64, dx: &DVector<f64>) -> DVector<f64> {
    sigma.inv().matvec(dx) * d_t
}

/// H = λ·D·Σ^{-1/2}(wwᵀ − I)Σ^{-1/2}. Shared with the estimator-bias probes.
pub(crate) fn hess_est(
    sigma: &PsdFactorization,
    lambda: f64,
    d_t: f64,
    w: &DVector<f64>,
) -> Result<SymMatrix, PsdError> {
    let d = w.len();
    let s = sigma.inv_sqrt().as_matrix();
    let centered = w * w.transpose() - DMatrix::identity(d, d);
    SymMatrix::new((s * centered * s) * (lambda * d_t))
}

/// Processes the observation `y` at the played point `x`.
///
/// Round 1 stores the observation as the baseline and advances; from round 2
/// on it runs the full truncate/estimate/update cycle described in the module
/// docs. A zero loss difference leaves (μ, Σ) bit-identical. Returns the
/// telemetry record for the round just consumed.
pub fn update(
    state: &mut GaussianSearchState,
    params: &AlgoParams,
    x: &DVector<f64>,
    y: f64,
) -> Result<StepRecord, BanditError> {
    if !y.is_finite() {
        return Err(BanditError::NonFinite);
    }
    if x.len() != state.mu.len() || x.len() != params.d {
        return Err(BanditError::StateMismatch);
    }

    let t_obs = state.t;
    if t_obs == 1 {
        state.y_prev = Some(y);
        state.t = 2;
        let diag = diagnostics(state, params, &state.sigma1, &state.x_ref);
        return Ok(StepRecord {
            t: t_obs,
            x: x.clone(),
            y,
            w_norm: 0.0,
            truncated: false,
            d_t: 0.0,
            g_norm: 0.0,
            hessian_skipped: false,
            diag,
            precision_identity_residual: None,
        });
    }

    let y_prev = state.y_prev.expect("rounds ≥ 2 have an observed baseline");
    let dx = x - &state.mu;
    let w = state.sigma.inv_sqrt().matvec(&dx);
    let w_norm = w.norm();
    let dy = y - y_prev;
    let truncated = !(dy.abs() <= params.d_max && w_norm <= params.w_max);
    let d_t = if truncated { 0.0 } else { dy };

    let mut g_norm = 0.0;
    let mut hessian_skipped = false;
    let mut precision_identity_residual = None;

    if truncated {
        state.trunc_count += 1;
    } else if d_t != 0.0 {
        let g = grad_est(&state.sigma, d_t, &dx);
        g_norm = g.norm();
        let h = hess_est(&state.sigma, params.lambda, d_t, &w)?;

        // tr(Σ·H) collapses algebraically to λ·D·(‖w‖² − d); guard the
        // matrix plumbing against that scalar in debug builds.
        debug_assert!(
            {
                let traced = state
                    .sigma
                    .source()
                    .as_matrix()
                    .component_mul(h.as_matrix())
                    .sum();
                let direct = params.lambda * d_t * (w_norm * w_norm - params.d as f64);
                (traced - direct).abs() <= 1e-10 * direct.abs().max(1.0)
            },
            "trace identity violated"
        );

        // Mean step along the sampled direction; the preconditioned form
        // μ − ηΣg collapses to this because Σ·Σ⁻¹dx = dx.
        let mu_next = &state.mu - &dx * (params.eta * d_t);
        debug_assert!(
            {
                let via_matrix = &state.mu - state.sigma.source().matvec(&g) * params.eta;
                (&via_matrix - &mu_next).norm() <= 1e-12 * state.mu.norm().max(1.0)
            },
            "mean-update routes disagree"
        );
        if mu_next.iter().any(|v| !v.is_finite()) {
            return Err(BanditError::NonFinite);
        }

        match psd::try_precision_step(state.sigma.inv(), &h, params.eta)? {
            Some(prec_next) => {
                if state.debug_checks {
                    let sig_t = state.sigma.source().as_matrix();
                    let residual = sig_t * prec_next.source().as_matrix()
                        - DMatrix::identity(params.d, params.d)
                        - sig_t * h.as_matrix() * (params.eta / 4.0);
                    precision_identity_residual = Some(residual.norm());
                }
                state.sigma = prec_next.inverse_fact();
            }
            None => {
                hessian_skipped = true;
                state.clip_count += 1;
            }
        }
        state.mu = mu_next;
    }
    // d_t == 0 without truncation: both estimates vanish, state untouched.

    state.y_prev = Some(y);
    state.t += 1;
    let diag = diagnostics(state, params, &state.sigma1, &state.x_ref);
    Ok(StepRecord {
        t: t_obs,
        x: x.clone(),
        y,
        w_norm,
        truncated,
        d_t,
        g_norm,
        hessian_skipped,
        diag,
        precision_identity_residual,
    })
}

/// Recomputes the stability diagnostics from the post-update state.
pub fn diagnostics(
    state: &GaussianSearchState,
    params: &AlgoParams,
    sigma1: &SymMatrix,
    x_ref: &DVector<f64>,
) -> DiagnosticFlags {
    debug_assert!(state.t >= 2);
    // min eig(2Σ₁ − Σ) ≥ −1e-10·‖Σ₁‖ realizes Σ ≤ 2Σ₁ up to round-off.
    let gap = sigma1
        .add_scaled(state.sigma.source(), -0.5)
        .expect("diagnostic difference is finite");
    let (gap_eigs, _) = psd::sym_eig_raw(&gap);
    let (sigma1_eigs, _) = psd::sym_eig_raw(sigma1);
    let sigma1_norm = sigma1_eigs[sigma1.dim() - 1].abs();
    let cov_le_two_sigma1 = 2.0 * gap_eigs[0] >= -1e-10 * sigma1_norm;

    let trace_inv: f64 = state.sigma.eigenvalues().iter().map(|l| l.recip()).sum();
    let trace_inv_ok = trace_inv <= params.sigma_inv_trace_cap;

    let centered = &state.mu - x_ref;
    let potential = 0.5 * state.sigma.inv().quad_form(&centered);

    DiagnosticFlags {
        cov_le_two_sigma1,
        trace_inv_ok,
        potential,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Environment, LossSpec, NoiseSpec};

    fn vecd(vals: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(vals)
    }

    fn practical(n: usize, d: usize, r: f64) -> AlgoParams {
        make_params(
            n,
            d,
            r,
            DVector::zeros(d),
            Mode::Practical,
            ThresholdConstants::default(),
        )
        .unwrap()
    }

    #[test]
    fn practical_params_match_hand_arithmetic() {
        let p = practical(10_000, 4, 4.0);
        assert!((p.eta - 0.01).abs() < 1e-15);
        assert!((p.lambda - 0.25).abs() < 1e-15);
        assert!(p.w_max.is_infinite() && p.d_max.is_infinite());

        // λ = 1/d would hit 1 at d = 1; the cap keeps it inside (0, 1).
        let p = practical(4, 1, 1.0);
        assert!((p.eta - 0.25).abs() < 1e-15);
        assert!((p.lambda - 0.99).abs() < 1e-15);
    }

    #[test]
    fn theoretical_params_match_hand_arithmetic() {
        let p = make_params(
            2,
            2,
            2.0,
            DVector::zeros(2),
            Mode::Theoretical,
            ThresholdConstants::default(),
        )
        .unwrap();
        let ln2 = 2f64.ln();
        assert!((p.p - 2.0).abs() < 1e-15);
        assert!((p.log_p - ln2).abs() < 1e-15);
        assert!((p.f_max - 4.0 * ln2.powi(3)).abs() < 1e-15);
        assert!((p.f_max - 1.3320986079557178).abs() < 1e-12);
        // Raw λ = 1/√(F_max·log P) ≈ 1.0407 exceeds 1, so it is capped.
        assert!((p.f_max * ln2).sqrt().recip() > 1.04);
        assert!((p.lambda - 0.99).abs() < 1e-15);
        assert!((p.w_max - (2.0 * ln2).sqrt()).abs() < 1e-15);
        assert!((p.d_max - 2.0 * ln2.sqrt()).abs() < 1e-15);
        let eta_expect = (1.0 / p.d_max) * 1f64.min((2.0 * ln2.sqrt()).recip());
        assert!((p.eta - eta_expect).abs() < 1e-15);
    }

    #[test]
    fn trace_cap_matches_hand_arithmetic() {
        let p = practical(100, 2, 2.0);
        assert_eq!(p.sigma_inv_trace_cap, 27_040_000.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let r = make_params(
            1,
            2,
            2.0,
            DVector::zeros(2),
            Mode::Practical,
            ThresholdConstants::default(),
        );
        assert!(matches!(r, Err(BanditError::InvalidHorizon(1))));
        let r = make_params(
            10,
            2,
            0.5,
            DVector::zeros(2),
            Mode::Practical,
            ThresholdConstants::default(),
        );
        assert!(matches!(r, Err(BanditError::InvalidRadius(_))));
    }

    #[test]
    fn init_sets_isotropic_covariance() {
        let p = make_params(
            16,
            2,
            4.0,
            vecd(&[1.0, 1.0]),
            Mode::Practical,
            ThresholdConstants::default(),
        )
        .unwrap();
        let s = init(&p);
        assert_eq!(s.t(), 1);
        assert_eq!(s.mu(), &vecd(&[1.0, 1.0]));
        for i in 0..2 {
            assert!((s.sigma().eigenvalues()[i] - 4.0).abs() < 1e-14);
        }

        let p = practical(16, 3, 6.0);
        let s = init(&p);
        for i in 0..3 {
            assert!((s.sigma().eigenvalues()[i] - 4.0).abs() < 1e-14);
        }

        let p = practical(16, 1, 1.0);
        let s = init(&p);
        assert!((s.sigma().eigenvalues()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn propose_with_identity_covariance_returns_raw_draw() {
        // r = d makes Σ₁ the identity.
        let p = practical(16, 2, 2.0);
        let s = init(&p);
        let x = propose(&s, &mut Stream::new(5));
        let z = Stream::new(5).standard_normal_vec(2);
        assert_eq!(x, z);
    }

    #[test]
    fn propose_moments_match_target_gaussian() {
        let sigma = psd::sym_eig(SymMatrix::from_diagonal(&[1.0, 4.0])).unwrap();
        let s = GaussianSearchState::new_raw(2, vecd(&[0.5, -0.5]), sigma, Some(0.0));
        let mut rng = Stream::new(9);
        let n = 1_000_000usize;
        let mut mean = DVector::zeros(2);
        let mut cov = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = propose(&s, &mut rng);
            mean += &x;
            let c = &x - s.mu();
            cov += &c * c.transpose();
        }
        mean /= n as f64;
        cov /= n as f64;
        let sds = [1.0, 2.0];
        for i in 0..2 {
            let se = sds[i] / (n as f64).sqrt();
            assert!((mean[i] - s.mu()[i]).abs() <= 5.0 * se, "mean[{i}]");
            for j in 0..2 {
                let truth = if i == j { sds[i] * sds[i] } else { 0.0 };
                // Var of x_i x_j products: σ_i²σ_j²(1 + δ_ij).
                let se = sds[i] * sds[j] * ((1.0 + (i == j) as usize as f64) / n as f64).sqrt();
                assert!((cov[(i, j)] - truth).abs() <= 5.0 * se, "cov[({i},{j})]");
            }
        }
    }

    #[test]
    fn first_round_only_stores_baseline() {
        let p = practical(16, 2, 4.0);
        let mut s = init(&p);
        s.set_diagnostic_reference(vecd(&[0.0, 0.0]));
        let mu_before = s.mu().clone();
        let sigma_before = s.sigma().source().clone();
        let x = vecd(&[0.3, -0.7]);
        let rec = update(&mut s, &p, &x, 1.25).unwrap();
        assert_eq!(s.t(), 2);
        assert_eq!(s.y_prev(), Some(1.25));
        assert_eq!(s.mu(), &mu_before);
        assert_eq!(s.sigma().source(), &sigma_before);
        assert_eq!((rec.t, rec.d_t, rec.g_norm, rec.w_norm), (1, 0.0, 0.0, 0.0));
        assert!(!rec.truncated && !rec.hessian_skipped);
        assert!(rec.diag.cov_le_two_sigma1 && rec.diag.trace_inv_ok);
        // Potential right after init: ½‖x∘ − x_ref‖²·d²/r² (x∘ = 0 here).
        assert!((rec.diag.potential - 0.0).abs() < 1e-15);
    }

    #[test]
    fn potential_after_init_matches_closed_form() {
        let p = make_params(
            16,
            2,
            4.0,
            vecd(&[1.0, 1.0]),
            Mode::Practical,
            ThresholdConstants::default(),
        )
        .unwrap();
        let mut s = init(&p);
        s.set_diagnostic_reference(vecd(&[0.0, 0.0]));
        let rec = update(&mut s, &p, &vecd(&[1.0, 1.0]), 0.5).unwrap();
        // ½·‖(1,1)‖²·d²/r² = ½·2·(4/16) = 0.25.
        assert!((rec.diag.potential - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_difference_is_identity_on_state() {
        let p = practical(16, 2, 4.0);
        let mut s = init(&p);
        update(&mut s, &p, &vecd(&[0.1, 0.0]), 0.75).unwrap();
        let mu_before = s.mu().clone();
        let sigma_before = s.sigma().source().clone();
        let rec = update(&mut s, &p, &vecd(&[0.4, -0.2]), 0.75).unwrap();
        assert_eq!(rec.d_t, 0.0);
        assert_eq!(rec.g_norm, 0.0);
        assert!(!rec.truncated);
        assert_eq!(s.mu(), &mu_before);
        assert_eq!(s.sigma().source(), &sigma_before);
        assert_eq!(s.t(), 3);
        assert_eq!(s.y_prev(), Some(0.75));
    }

    #[test]
    fn scalar_update_matches_hand_evaluation() {
        // d=1, λ=1 (raw state; make_params caps λ below 1), Σ=1, μ=0:
        // x=0.5, Δy=0.2 → W=0.5, g=0.1, H=0.2·(0.25−1)=−0.15,
        // μ' = −0.1η, (Σ')⁻¹ = 1 − 0.0375η.
        let eta = 0.5;
        let mut params = practical(16, 1, 1.0);
        params.eta = eta;
        params.lambda = 1.0;
        let sigma = psd::sym_eig(SymMatrix::identity(1)).unwrap();
        let mut s = GaussianSearchState::new_raw(2, vecd(&[0.0]), sigma, Some(0.0));
        let rec = update(&mut s, &params, &vecd(&[0.5]), 0.2).unwrap();
        assert!((rec.w_norm - 0.5).abs() < 1e-15);
        assert!((rec.d_t - 0.2).abs() < 1e-15);
        assert!((rec.g_norm - 0.1).abs() < 1e-15);
        assert!(!rec.truncated && !rec.hessian_skipped);
        assert!((s.mu()[0] - (-0.1 * eta)).abs() < 1e-15);
        let sigma_inv_next = 1.0 / s.sigma().source().as_matrix()[(0, 0)];
        assert!((sigma_inv_next - (1.0 - 0.0375 * eta)).abs() < 1e-12);
    }

    #[test]
    fn oversized_loss_difference_is_truncated() {
        let p = make_params(
            2,
            2,
            2.0,
            DVector::zeros(2),
            Mode::Theoretical,
            ThresholdConstants::default(),
        )
        .unwrap();
        assert!(p.d_max < 2.0);
        let mut s = init(&p);
        update(&mut s, &p, &vecd(&[0.1, 0.1]), 0.0).unwrap();
        let mu_before = s.mu().clone();
        let sigma_before = s.sigma().source().clone();
        let rec = update(&mut s, &p, &vecd(&[0.2, 0.0]), 10.0).unwrap();
        assert!(rec.truncated);
        assert_eq!(rec.d_t, 0.0);
        assert_eq!(s.trunc_count(), 1);
        assert_eq!(s.mu(), &mu_before);
        assert_eq!(s.sigma().source(), &sigma_before);
        assert_eq!(s.y_prev(), Some(10.0));
    }

    #[test]
    fn oversized_whitened_displacement_is_truncated() {
        let p = make_params(
            2,
            2,
            2.0,
            DVector::zeros(2),
            Mode::Theoretical,
            ThresholdConstants::default(),
        )
        .unwrap();
        // W_max = √(2 ln 2) ≈ 1.18 with Σ = identity here.
        let mut s = init(&p);
        update(&mut s, &p, &vecd(&[0.1, 0.1]), 0.0).unwrap();
        let rec = update(&mut s, &p, &vecd(&[5.0, 0.0]), 0.1).unwrap();
        assert!(rec.w_norm > p.w_max);
        assert!(rec.truncated);
        assert_eq!(s.trunc_count(), 1);
    }

    #[test]
    fn destabilizing_curvature_update_is_skipped() {
        // x = μ makes w = 0, so H = −λ·D·Σ⁻¹; a large positive D with a big
        // step drives the precision candidate negative.
        let mut params = practical(16, 1, 1.0);
        params.eta = 4.0;
        params.lambda = 0.5;
        let sigma = psd::sym_eig(SymMatrix::identity(1)).unwrap();
        let mut s = GaussianSearchState::new_raw(2, vecd(&[0.0]), sigma, Some(0.0));
        let mu_before = s.mu().clone();
        let rec = update(&mut s, &params, &vecd(&[0.0]), 2.5).unwrap();
        assert!(rec.hessian_skipped);
        assert_eq!(s.clip_count(), 1);
        // Mean step direction x − μ is zero here, so μ is unchanged too.
        assert_eq!(s.mu(), &mu_before);
        assert!((s.sigma().source().as_matrix()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn precision_identity_residual_in_debug_runs() {
        let p = practical(64, 2, 4.0);
        let env = Environment::new(
            LossSpec::Distance {
                center: vecd(&[0.5, -0.25]),
            },
            NoiseSpec::Gaussian { sigma: 0.1 },
        )
        .unwrap();
        let mut s = init(&p);
        s.enable_debug_checks(true);
        let mut rng = Stream::new(33);
        let mut noise_rng = rng.child(1);
        let mut applied = 0;
        for _ in 0..64 {
            let x = propose(&s, &mut rng);
            let y = env.observe(&x, &mut noise_rng);
            let rec = update(&mut s, &p, &x, y).unwrap();
            if let Some(residual) = rec.precision_identity_residual {
                assert!(residual <= 1e-9, "residual {residual}");
                applied += 1;
            }
        }
        assert!(applied > 50, "only {applied} applied updates");
    }

    #[test]
    fn trace_identity_holds_on_random_rounds() {
        let mut rng = Stream::new(61);
        for trial in 0..50 {
            let d = 1 + (trial % 4) as usize;
            let a = psd::random_pd(d, 0.3, 8.0, &mut rng);
            let sigma = psd::sym_eig(a).unwrap();
            let dx = rng.standard_normal_vec(d);
            let w = sigma.inv_sqrt().matvec(&dx);
            let (lambda, d_t) = (0.4, rng.standard_normal());
            if d_t == 0.0 {
                continue;
            }
            let h = hess_est(&sigma, lambda, d_t, &w).unwrap();
            let traced = sigma.source().as_matrix().component_mul(h.as_matrix()).sum();
            let direct = lambda * d_t * (w.norm_squared() - d as f64);
            assert!(
                (traced - direct).abs() <= 1e-10 * direct.abs().max(1.0),
                "trial {trial}: {traced} vs {direct}"
            );
        }
    }

    #[test]
    fn mean_moves_along_sampled_direction() {
        let mut rng = Stream::new(71);
        let a = psd::random_pd(3, 0.5, 4.0, &mut rng);
        let sigma = psd::sym_eig(a).unwrap();
        let mu = rng.standard_normal_vec(3);
        let mut p = practical(64, 3, 3.0);
        p.eta = 0.05;
        let mut s = GaussianSearchState::new_raw(2, mu.clone(), sigma, Some(0.3));
        let x = propose(&s, &mut rng);
        update(&mut s, &p, &x, 0.9).unwrap();
        let expected = &mu - (&x - &mu) * (p.eta * (0.9 - 0.3));
        assert!((s.mu() - expected).norm() <= 1e-12 * mu.norm().max(1.0));
    }

    #[test]
    fn runs_are_deterministic_in_the_seed() {
        let p = practical(128, 2, 4.0);
        let env = Environment::new(
            LossSpec::Distance {
                center: vecd(&[0.4, 0.4]),
            },
            NoiseSpec::Gaussian { sigma: 0.1 },
        )
        .unwrap();
        let run = || {
            let mut s = init(&p);
            let mut rng = Stream::new(2718);
            let mut noise = rng.child(1);
            let mut recs = Vec::new();
            for _ in 0..128 {
                let x = propose(&s, &mut rng);
                let y = env.observe(&x, &mut noise);
                recs.push(update(&mut s, &p, &x, y).unwrap());
            }
            recs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn update_rejects_bad_inputs() {
        let p = practical(16, 2, 4.0);
        let mut s = init(&p);
        let err = update(&mut s, &p, &vecd(&[0.0, 0.0]), f64::NAN).unwrap_err();
        assert!(matches!(err, BanditError::NonFinite));
        let err = update(&mut s, &p, &vecd(&[0.0]), 0.5).unwrap_err();
        assert!(matches!(err, BanditError::StateMismatch));
    }
}
