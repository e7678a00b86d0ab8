//! Zeroth-order stochastic convex optimization with an adaptive Gaussian
//! search distribution, plus the verification machinery that keeps it
//! honest.
//!
//! The optimizer queries one point per round, observes only a noisy loss
//! value, and maintains a Gaussian N(μ_t, Σ_t) whose mean follows a
//! loss-difference gradient estimate and whose precision matrix accumulates
//! a loss-difference curvature estimate. Everything it estimates is the
//! gradient or Hessian of a smoothed surrogate loss; the [`surrogate`]
//! module carries Monte-Carlo oracles for the exact averaging identities
//! behind that claim, and [`verify`] packages them into runnable suites.
//!
//! Modules:
//! - [`rng`]: seedable, splittable random streams with portable output.
//! - [`psd`]: symmetric eigendecomposition utilities, precision updates,
//!   and the closed-form Gaussian transport distance.
//! - [`env`]: convex 1-Lipschitz test losses and noise models.
//! - [`bandit`]: the optimizer itself (practical and theoretical modes).
//! - [`surrogate`]: surrogate-loss estimators, identity checks, moment
//!   oracles, and estimator bias probes.
//! - [`baselines`]: one-point gradient descent and random search.
//! - [`harness`]: config-driven seeded experiments with CSV/JSON output.
//! - [`verify`]: the structured check suites behind `verify`.

pub mod bandit;
pub mod baselines;
pub mod env;
pub mod harness;
pub mod psd;
pub mod rng;
pub mod surrogate;
pub mod verify;
