//! Convex 1-Lipschitz test losses with known minimizers, plus the noisy
//! observation model.
//!
//! Every shipped loss is convex with global Lipschitz constant at most 1 and
//! declares the point used for optimality-gap accounting. Noise is mean-zero
//! conditionally on the query point. Statistical probes for the Lipschitz
//! and convexity properties live here too, since they are shared by the unit
//! tests and the verification suite.

use nalgebra::DVector;
use thiserror::Error;

use crate::rng::Stream;

/// Environment construction/validation errors.
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    ConfigInvalid(String),
}

/// A convex loss with Lipschitz constant ≤ 1 and a declared minimizer.
///
/// The affine loss is unbounded below; its `reference_min` exists only so a
/// bounded-region experiment can account a gap against a fixed point. It is
/// admitted for estimator checks but rejected by the regret harness.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// f(x) = ⟨direction, x⟩ with ‖direction‖ ≤ 1.
    Affine {
        direction: DVector<f64>,
        reference_min: DVector<f64>,
    },
    /// f(x) = ‖x − center‖ (Euclidean; nonsmooth at the center).
    Distance { center: DVector<f64> },
    /// f(x) = max_i ⟨slopes[i], x⟩ + offsets[i], each ‖slopes[i]‖ ≤ 1.
    MaxAffine {
        slopes: Vec<DVector<f64>>,
        offsets: Vec<f64>,
        minimizer: DVector<f64>,
    },
    /// Huber-flattened paraboloid around `center`: quadratic with the given
    /// curvature out to radius 1/curvature, linear with unit slope beyond.
    HuberizedQuadratic {
        center: DVector<f64>,
        curvature: f64,
    },
}

impl LossSpec {
    /// max_i |x_i − center_i| expressed through its affine pieces
    /// ⟨±e_i, x⟩ ∓ center_i; a standard polyhedral test loss.
    pub fn linf_distance(center: DVector<f64>) -> LossSpec {
        let d = center.len();
        let mut slopes = Vec::with_capacity(2 * d);
        let mut offsets = Vec::with_capacity(2 * d);
        for i in 0..d {
            for sign in [1.0, -1.0] {
                let mut c = DVector::zeros(d);
                c[i] = sign;
                slopes.push(c);
                offsets.push(-sign * center[i]);
            }
        }
        LossSpec::MaxAffine {
            slopes,
            offsets,
            minimizer: center,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LossSpec::Affine { direction, .. } => direction.len(),
            LossSpec::Distance { center } => center.len(),
            LossSpec::MaxAffine { minimizer, .. } => minimizer.len(),
            LossSpec::HuberizedQuadratic { center, .. } => center.len(),
        }
    }

    /// The declared reference point for optimality-gap accounting.
    pub fn minimizer(&self) -> &DVector<f64> {
        match self {
            LossSpec::Affine { reference_min, .. } => reference_min,
            LossSpec::Distance { center } => center,
            LossSpec::MaxAffine { minimizer, .. } => minimizer,
            LossSpec::HuberizedQuadratic { center, .. } => center,
        }
    }

    /// Evaluates the loss. Panics on dimension mismatch; dimensions are
    /// fixed per run and validated at construction.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "loss evaluated at wrong dimension");
        match self {
            LossSpec::Affine { direction, .. } => direction.dot(x),
            LossSpec::Distance { center } => (x - center).norm(),
            LossSpec::MaxAffine { slopes, offsets, .. } => slopes
                .iter()
                .zip(offsets)
                .map(|(c, b)| c.dot(x) + b)
                .fold(f64::NEG_INFINITY, f64::max),
            LossSpec::HuberizedQuadratic { center, curvature } => {
                let t = (x - center).norm();
                if t <= curvature.recip() {
                    0.5 * curvature * t * t
                } else {
                    t - 0.5 * curvature.recip()
                }
            }
        }
    }

    /// Structural validation: dimension agreement, slope-norm caps, positive
    /// curvature.
    pub fn validate(&self) -> Result<(), EnvError> {
        let norm_cap = 1.0 + 1e-12;
        match self {
            LossSpec::Affine {
                direction,
                reference_min,
            } => {
                if direction.is_empty() {
                    return Err(EnvError::ConfigInvalid("affine direction is empty".into()));
                }
                if reference_min.len() != direction.len() {
                    return Err(EnvError::ConfigInvalid(
                        "affine reference point dimension differs from direction".into(),
                    ));
                }
                if direction.norm() > norm_cap {
                    return Err(EnvError::ConfigInvalid(format!(
                        "affine direction norm {} exceeds 1",
                        direction.norm()
                    )));
                }
            }
            LossSpec::Distance { center } => {
                if center.is_empty() {
                    return Err(EnvError::ConfigInvalid("distance center is empty".into()));
                }
            }
            LossSpec::MaxAffine {
                slopes,
                offsets,
                minimizer,
            } => {
                if slopes.is_empty() {
                    return Err(EnvError::ConfigInvalid("max-affine needs ≥ 1 piece".into()));
                }
                if slopes.len() != offsets.len() {
                    return Err(EnvError::ConfigInvalid(format!(
                        "max-affine has {} slopes but {} offsets",
                        slopes.len(),
                        offsets.len()
                    )));
                }
                for (i, c) in slopes.iter().enumerate() {
                    if c.len() != minimizer.len() {
                        return Err(EnvError::ConfigInvalid(format!(
                            "max-affine slope {i} has dimension {} (expected {})",
                            c.len(),
                            minimizer.len()
                        )));
                    }
                    if c.norm() > norm_cap {
                        return Err(EnvError::ConfigInvalid(format!(
                            "max-affine slope {i} has norm {} > 1",
                            c.norm()
                        )));
                    }
                }
            }
            LossSpec::HuberizedQuadratic { curvature, .. } => {
                if !(curvature.is_finite() && *curvature > 0.0) {
                    return Err(EnvError::ConfigInvalid(format!(
                        "curvature must be positive and finite, got {curvature}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean-zero observation noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    None,
    Gaussian { sigma: f64 },
    /// Uniform on [−σ√3, σ√3], so the variance matches a Gaussian of the
    /// same σ.
    Uniform { sigma: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let sigma = match self {
            NoiseSpec::None => return Ok(()),
            NoiseSpec::Gaussian { sigma } | NoiseSpec::Uniform { sigma } => *sigma,
        };
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(EnvError::ConfigInvalid(format!(
                "noise scale must be a nonnegative finite number, got {sigma}"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut Stream) -> f64 {
        match self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Gaussian { sigma } => sigma * rng.standard_normal(),
            NoiseSpec::Uniform { sigma } => sigma * 3f64.sqrt() * (2.0 * rng.uniform() - 1.0),
        }
    }
}

/// A loss plus its observation noise and cached minimum value.
#[derive(Debug, Clone)]
pub struct Environment {
    loss: LossSpec,
    noise: NoiseSpec,
    f_star: f64,
}

impl Environment {
    pub fn new(loss: LossSpec, noise: NoiseSpec) -> Result<Self, EnvError> {
        loss.validate()?;
        noise.validate()?;
        let f_star = loss.eval(loss.minimizer());
        Ok(Environment { loss, noise, f_star })
    }

    pub fn loss(&self) -> &LossSpec {
        &self.loss
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    /// Loss value at the declared minimizer.
    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn minimizer(&self) -> &DVector<f64> {
        self.loss.minimizer()
    }

    /// Noisy observation f(x) + ε. With [`NoiseSpec::None`] this is the loss
    /// value bit-exactly (no `+ 0.0` that could flip a signed zero).
    pub fn observe(&self, x: &DVector<f64>, rng: &mut Stream) -> f64 {
        let f = self.loss.eval(x);
        match self.noise {
            NoiseSpec::None => f,
            _ => f + self.noise.sample(rng),
        }
    }
}

/// Maximum |f(x)−f(y)|/‖x−y‖ over random pairs in the ball of the given
/// radius around the declared minimizer. Must stay ≤ 1 for shipped losses.
pub fn lipschitz_probe(spec: &LossSpec, rng: &mut Stream, trials: usize, radius: f64) -> f64 {
    let center = spec.minimizer().clone();
    let d = spec.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = &center + rng.in_ball(d, radius);
        let y = &center + rng.in_ball(d, radius);
        let gap = (&x - &y).norm();
        if gap > 1e-12 {
            worst = worst.max((spec.eval(&x) - spec.eval(&y)).abs() / gap);
        }
    }
    worst
}

/// Maximum midpoint-convexity violation f((x+y)/2) − (f(x)+f(y))/2 over
/// random pairs; at most round-off for a convex loss.
pub fn convexity_probe(spec: &LossSpec, rng: &mut Stream, trials: usize, radius: f64) -> f64 {
    let center = spec.minimizer().clone();
    let d = spec.dim();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let x = &center + rng.in_ball(d, radius);
        let y = &center + rng.in_ball(d, radius);
        let mid = (&x + &y) * 0.5;
        worst = worst.max(spec.eval(&mid) - 0.5 * (spec.eval(&x) + spec.eval(&y)));
    }
    worst
}
