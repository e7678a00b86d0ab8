//! Experiment harness: config ingestion and validation, seeded parallel
//! replications, regret accounting against the noiseless loss, power-law
//! slope fitting, and deterministic CSV/JSON emission.
//!
//! Replications are embarrassingly parallel with isolated state and isolated
//! random streams; results are buffered and written in replication order, so
//! output files are byte-identical regardless of scheduling. Regret always
//! uses the exact loss value at the played point, never the noisy
//! observation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{one_point_gd_with, random_search, BaselineState};
use crate::bandit::{self, AlgoParams, BanditError, Mode, ThresholdConstants};
use crate::env::{Environment, LossSpec, NoiseSpec};
use crate::rng::{child_key, Stream};

/// Fixed column order of the emitted trace file.
pub const CSV_HEADER: &str =
    "replication,t,regret_cum,trunc_count,clip_count,potential,trace_sigma_inv,min_eig_sigma";

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "ZO_BANDIT_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("environment returned a non-finite loss at replication {replication}, round {t}")]
    NonFiniteLoss { replication: usize, t: usize },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse failure: {0}")]
    Parse(String),
    #[error("slope fit needs at least {needed} points in the window, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("slope fit undefined: cumulative regret is not strictly positive at every checkpoint")]
    NonpositiveRegret,
    #[error(transparent)]
    Bandit(#[from] BanditError),
}

// ---------------------------------------------------------------------------
// Config surface (mirrors the TOML file; unknown keys are errors everywhere).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub algorithm: AlgorithmConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// Search radius: the initial covariance scale (r/d)² and the baselines'
    /// exploration ball.
    pub r: f64,
    /// Start point shared by every algorithm.
    pub x_init: Vec<f64>,
    pub loss: LossConfig,
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// One of: distance, linf_distance, max_affine, huberized_quadratic,
    /// affine.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curvature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slopes: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimizer: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_min: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// One of: none, gaussian, uniform.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    /// One of: gaussian_practical, gaussian_theoretical, one_point_gd,
    /// random_search.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_mult: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_exp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub horizon: usize,
    pub replications: usize,
    pub master_seed: u64,
    /// Rounds at which cumulative regret is recorded; defaults to powers of
    /// two up to the horizon, plus the horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    /// Verifies Σ_t·Σ_{t+1}⁻¹ = I + (η/4)Σ_t·H_t on every applied update and
    /// records the worst residual.
    #[serde(default)]
    pub debug_identity_checks: bool,
}

// ---------------------------------------------------------------------------
// Validation into runnable form.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum AlgoSpec {
    GaussianPractical,
    GaussianTheoretical(ThresholdConstants),
    OnePointGd { delta: Option<f64>, step: Option<f64> },
    RandomSearch,
}

#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub env: Environment,
    pub r: f64,
    pub x_init: DVector<f64>,
    pub algo: AlgoSpec,
    pub horizon: usize,
    pub replications: usize,
    pub master_seed: u64,
    pub checkpoints: Vec<usize>,
    pub debug_identity_checks: bool,
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

fn finite_vec(name: &str, v: &[f64]) -> Result<DVector<f64>, HarnessError> {
    if v.is_empty() {
        return Err(invalid(format!("{name} must be nonempty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(format!("{name} must be finite")));
    }
    Ok(DVector::from_row_slice(v))
}

/// Per-kind field discipline: every present optional must be allowed for the
/// kind, every required field must be present.
fn check_fields(
    ctx: &str,
    kind: &str,
    present: &[(&str, bool)],
    allowed: &[&str],
    required: &[&str],
) -> Result<(), HarnessError> {
    for (name, is_present) in present {
        if *is_present && !allowed.contains(name) {
            return Err(invalid(format!(
                "{ctx} field `{name}` does not apply to kind `{kind}`"
            )));
        }
        if !*is_present && required.contains(name) {
            return Err(invalid(format!(
                "{ctx} kind `{kind}` requires field `{name}`"
            )));
        }
    }
    Ok(())
}

impl LossConfig {
    pub fn to_spec(&self) -> Result<LossSpec, HarnessError> {
        let present = [
            ("center", self.center.is_some()),
            ("curvature", self.curvature.is_some()),
            ("slopes", self.slopes.is_some()),
            ("offsets", self.offsets.is_some()),
            ("minimizer", self.minimizer.is_some()),
            ("direction", self.direction.is_some()),
            ("reference_min", self.reference_min.is_some()),
        ];
        let spec = match self.kind.as_str() {
            "distance" => {
                check_fields("loss", &self.kind, &present, &["center"], &["center"])?;
                LossSpec::Distance {
                    center: finite_vec("loss.center", self.center.as_ref().unwrap())?,
                }
            }
            "linf_distance" => {
                check_fields("loss", &self.kind, &present, &["center"], &["center"])?;
                LossSpec::linf_distance(finite_vec("loss.center", self.center.as_ref().unwrap())?)
            }
            "max_affine" => {
                let fields = ["slopes", "offsets", "minimizer"];
                check_fields("loss", &self.kind, &present, &fields, &fields)?;
                let slopes = self
                    .slopes
                    .as_ref()
                    .unwrap()
                    .iter()
                    .map(|s| finite_vec("loss.slopes", s))
                    .collect::<Result<Vec<_>, _>>()?;
                let offsets = self.offsets.clone().unwrap();
                if offsets.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("loss.offsets must be finite"));
                }
                LossSpec::MaxAffine {
                    slopes,
                    offsets,
                    minimizer: finite_vec("loss.minimizer", self.minimizer.as_ref().unwrap())?,
                }
            }
            "huberized_quadratic" => {
                let fields = ["center", "curvature"];
                check_fields("loss", &self.kind, &present, &fields, &fields)?;
                LossSpec::HuberizedQuadratic {
                    center: finite_vec("loss.center", self.center.as_ref().unwrap())?,
                    curvature: self.curvature.unwrap(),
                }
            }
            "affine" => {
                let fields = ["direction", "reference_min"];
                check_fields("loss", &self.kind, &present, &fields, &fields)?;
                LossSpec::Affine {
                    direction: finite_vec("loss.direction", self.direction.as_ref().unwrap())?,
                    reference_min: finite_vec(
                        "loss.reference_min",
                        self.reference_min.as_ref().unwrap(),
                    )?,
                }
            }
            other => return Err(invalid(format!("unknown loss kind `{other}`"))),
        };
        spec.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(spec)
    }
}

impl NoiseConfig {
    pub fn to_spec(&self) -> Result<NoiseSpec, HarnessError> {
        let present = [("sigma", self.sigma.is_some())];
        let spec = match self.kind.as_str() {
            "none" => {
                check_fields("noise", &self.kind, &present, &[], &[])?;
                NoiseSpec::None
            }
            "gaussian" => {
                check_fields("noise", &self.kind, &present, &["sigma"], &["sigma"])?;
                NoiseSpec::Gaussian { sigma: self.sigma.unwrap() }
            }
            "uniform" => {
                check_fields("noise", &self.kind, &present, &["sigma"], &["sigma"])?;
                NoiseSpec::Uniform { sigma: self.sigma.unwrap() }
            }
            other => return Err(invalid(format!("unknown noise kind `{other}`"))),
        };
        spec.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(spec)
    }
}

impl AlgorithmConfig {
    pub fn to_spec(&self) -> Result<AlgoSpec, HarnessError> {
        let present = [
            ("c_mult", self.c_mult.is_some()),
            ("c_step", self.c_step.is_some()),
            ("m_exp", self.m_exp.is_some()),
            ("delta", self.delta.is_some()),
            ("step", self.step.is_some()),
        ];
        for (name, value) in [
            ("c_mult", self.c_mult),
            ("c_step", self.c_step),
            ("m_exp", self.m_exp),
            ("delta", self.delta),
            ("step", self.step),
        ] {
            if let Some(v) = value {
                if !(v.is_finite() && v > 0.0) {
                    return Err(invalid(format!("algorithm.{name} must be finite and > 0")));
                }
            }
        }
        match self.kind.as_str() {
            "gaussian_practical" => {
                check_fields("algorithm", &self.kind, &present, &[], &[])?;
                Ok(AlgoSpec::GaussianPractical)
            }
            "gaussian_theoretical" => {
                check_fields(
                    "algorithm",
                    &self.kind,
                    &present,
                    &["c_mult", "c_step", "m_exp"],
                    &[],
                )?;
                let defaults = ThresholdConstants::default();
                Ok(AlgoSpec::GaussianTheoretical(ThresholdConstants {
                    c_mult: self.c_mult.unwrap_or(defaults.c_mult),
                    c_step: self.c_step.unwrap_or(defaults.c_step),
                    m_exp: self.m_exp.unwrap_or(defaults.m_exp),
                }))
            }
            "one_point_gd" => {
                check_fields("algorithm", &self.kind, &present, &["delta", "step"], &[])?;
                Ok(AlgoSpec::OnePointGd { delta: self.delta, step: self.step })
            }
            "random_search" => {
                check_fields("algorithm", &self.kind, &present, &[], &[])?;
                Ok(AlgoSpec::RandomSearch)
            }
            other => Err(invalid(format!("unknown algorithm kind `{other}`"))),
        }
    }
}

/// Powers of two below the horizon, then the horizon itself.
pub fn default_checkpoints(horizon: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut p = 1usize;
    while p < horizon {
        v.push(p);
        p *= 2;
    }
    v.push(horizon);
    v
}

pub fn validate(config: &ExperimentConfig) -> Result<ValidatedConfig, HarnessError> {
    let loss = config.environment.loss.to_spec()?;
    if matches!(loss, LossSpec::Affine { .. }) {
        return Err(invalid(
            "affine losses are unbounded below and are not admitted for regret runs",
        ));
    }
    let noise = config.environment.noise.to_spec()?;
    let env = Environment::new(loss, noise).map_err(|e| invalid(e.to_string()))?;

    let r = config.environment.r;
    if !(r.is_finite() && r >= 1.0) {
        return Err(invalid("environment.r must be finite and ≥ 1"));
    }
    let x_init = finite_vec("environment.x_init", &config.environment.x_init)?;
    if x_init.len() != env.loss().dim() {
        return Err(invalid(format!(
            "environment.x_init has dimension {}, loss has dimension {}",
            x_init.len(),
            env.loss().dim()
        )));
    }

    let algo = config.algorithm.to_spec()?;

    let n = config.run.horizon;
    if n < 2 {
        return Err(invalid("run.horizon must be ≥ 2"));
    }
    if config.run.replications < 1 {
        return Err(invalid("run.replications must be ≥ 1"));
    }
    let checkpoints = match &config.run.checkpoints {
        None => default_checkpoints(n),
        Some(list) => {
            if list.is_empty() {
                return Err(invalid("run.checkpoints must be nonempty when given"));
            }
            for pair in list.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(invalid("run.checkpoints must be strictly increasing"));
                }
            }
            if list[0] < 1 || *list.last().unwrap() > n {
                return Err(invalid("run.checkpoints must lie in [1, horizon]"));
            }
            list.clone()
        }
    };

    Ok(ValidatedConfig {
        env,
        r,
        x_init,
        algo,
        horizon: n,
        replications: config.run.replications,
        master_seed: config.run.master_seed,
        checkpoints,
        debug_identity_checks: config.run.debug_identity_checks,
    })
}

// ---------------------------------------------------------------------------
// Simulation.
// ---------------------------------------------------------------------------

/// Quantities recorded at one checkpoint of one replication. The first seven
/// numeric fields after `t` map onto the CSV columns; the average-iterate
/// error is summary-only.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRow {
    pub t: usize,
    pub regret_cum: f64,
    pub trunc_count: u64,
    pub clip_count: u64,
    /// ½‖μ_t − x*‖²_{Σ_t⁻¹}; NaN for baselines.
    pub potential: f64,
    /// tr(Σ_t⁻¹); NaN for baselines.
    pub trace_sigma_inv: f64,
    /// Smallest eigenvalue of Σ_t; NaN for baselines.
    pub min_eig_sigma: f64,
    /// f(mean of X_1..X_t) − f(x*).
    pub avg_iterate_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub replication: usize,
    pub rows: Vec<CheckpointRow>,
    pub final_regret: f64,
    pub final_avg_iterate_error: f64,
    pub trunc_count: u64,
    pub clip_count: u64,
    /// Worst ‖Σ_t·Σ_{t+1}⁻¹ − I − (η/4)Σ_t·H_t‖_F over applied updates, when
    /// debug identity checks were on.
    pub max_precision_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub checkpoints: Vec<usize>,
    pub reps: Vec<RepRecord>,
}

enum Template {
    Gaussian(AlgoParams),
    Baseline(BaselineState),
}

fn build_template(v: &ValidatedConfig) -> Result<Template, HarnessError> {
    let d = v.x_init.len();
    Ok(match &v.algo {
        AlgoSpec::GaussianPractical => Template::Gaussian(bandit::make_params(
            v.horizon,
            d,
            v.r,
            v.x_init.clone(),
            Mode::Practical,
            ThresholdConstants::default(),
        )?),
        AlgoSpec::GaussianTheoretical(consts) => Template::Gaussian(bandit::make_params(
            v.horizon,
            d,
            v.r,
            v.x_init.clone(),
            Mode::Theoretical,
            *consts,
        )?),
        AlgoSpec::OnePointGd { delta, step } => {
            let n = v.horizon as f64;
            let delta = delta.unwrap_or_else(|| n.powf(-0.25));
            let step = step.unwrap_or_else(|| v.r * n.powf(-0.75) / d as f64);
            Template::Baseline(one_point_gd_with(v.x_init.clone(), v.r, delta, step))
        }
        AlgoSpec::RandomSearch => Template::Baseline(random_search(v.x_init.clone(), v.r)),
    })
}

fn run_replication(
    rep: usize,
    v: &ValidatedConfig,
    template: &Template,
) -> Result<RepRecord, HarnessError> {
    let d = v.x_init.len();
    let f_star = v.env.f_star();
    let mut rng = Stream::new(child_key(v.master_seed, rep as u64));

    enum Runner {
        Gaussian(bandit::GaussianSearchState, AlgoParams),
        Baseline(BaselineState),
    }
    let mut runner = match template {
        Template::Gaussian(params) => {
            let mut state = bandit::init(params);
            state.set_diagnostic_reference(v.env.minimizer().clone());
            state.enable_debug_checks(v.debug_identity_checks);
            Runner::Gaussian(state, params.clone())
        }
        Template::Baseline(b) => Runner::Baseline(b.clone()),
    };

    let mut regret_cum = 0.0;
    let mut x_sum = DVector::zeros(d);
    let mut rows = Vec::with_capacity(v.checkpoints.len());
    let mut next_cp = 0usize;
    let mut max_resid: Option<f64> = None;
    let mut final_avg_err = 0.0;

    for t in 1..=v.horizon {
        let x = match &runner {
            Runner::Gaussian(state, _) => bandit::propose(state, &mut rng),
            Runner::Baseline(b) => b.propose(&mut rng),
        };
        let f_val = v.env.loss().eval(&x);
        if !f_val.is_finite() {
            return Err(HarnessError::NonFiniteLoss { replication: rep, t });
        }
        let y = v.env.observe(&x, &mut rng);
        regret_cum += f_val - f_star;
        x_sum += &x;

        let mut potential = f64::NAN;
        match &mut runner {
            Runner::Gaussian(state, params) => {
                let rec = bandit::update(state, params, &x, y)?;
                potential = rec.diag.potential;
                if let Some(res) = rec.precision_identity_residual {
                    max_resid = Some(max_resid.unwrap_or(0.0).max(res));
                }
            }
            Runner::Baseline(b) => b.update(&x, y),
        }

        let at_checkpoint = next_cp < v.checkpoints.len() && v.checkpoints[next_cp] == t;
        let is_final = t == v.horizon;
        if at_checkpoint || is_final {
            let avg_err = v.env.loss().eval(&(&x_sum / t as f64)) - f_star;
            if is_final {
                final_avg_err = avg_err;
            }
            if at_checkpoint {
                next_cp += 1;
                let (trunc, clip, trace_inv, min_eig) = match &runner {
                    Runner::Gaussian(state, _) => {
                        let trace_inv: f64 =
                            state.sigma().eigenvalues().iter().map(|l| l.recip()).sum();
                        (
                            state.trunc_count(),
                            state.clip_count(),
                            trace_inv,
                            state.sigma().min_eig(),
                        )
                    }
                    Runner::Baseline(_) => (0, 0, f64::NAN, f64::NAN),
                };
                rows.push(CheckpointRow {
                    t,
                    regret_cum,
                    trunc_count: trunc,
                    clip_count: clip,
                    potential,
                    trace_sigma_inv: trace_inv,
                    min_eig_sigma: min_eig,
                    avg_iterate_error: avg_err,
                });
            }
        }
    }

    let (trunc, clip) = match &runner {
        Runner::Gaussian(state, _) => (state.trunc_count(), state.clip_count()),
        Runner::Baseline(_) => (0, 0),
    };
    Ok(RepRecord {
        replication: rep,
        rows,
        final_regret: regret_cum,
        final_avg_iterate_error: final_avg_err,
        trunc_count: trunc,
        clip_count: clip,
        max_precision_residual: max_resid,
    })
}

/// Runs all replications (in parallel, collected in replication order).
pub fn run_experiment(v: &ValidatedConfig) -> Result<RegretTrace, HarnessError> {
    let template = build_template(v)?;
    let reps = (0..v.replications)
        .into_par_iter()
        .map(|rep| run_replication(rep, v, &template))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RegretTrace { checkpoints: v.checkpoints.clone(), reps })
}

/// Validates and runs in one step.
pub fn run(config: &ExperimentConfig) -> Result<RegretTrace, HarnessError> {
    run_experiment(&validate(config)?)
}

// ---------------------------------------------------------------------------
// Slope fitting.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares fit of log y against log x.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<SlopeFit, HarnessError> {
    if points.len() < 4 {
        return Err(HarnessError::InsufficientData { needed: 4, got: points.len() });
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(HarnessError::NonpositiveRegret);
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let ss_res: f64 = logs
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + exponent * p.0);
            r * r
        })
        .sum();
    let ss_tot: f64 = logs.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(SlopeFit { exponent, intercept, r_squared, points: points.len() })
}

/// Median cumulative regret across replications at each checkpoint in
/// [from, to], fit to a power law.
pub fn fit_regret_slope(
    trace: &RegretTrace,
    from: usize,
    to: usize,
) -> Result<SlopeFit, HarnessError> {
    let mut points = Vec::new();
    for (i, &t) in trace.checkpoints.iter().enumerate() {
        if t < from || t > to {
            continue;
        }
        let vals: Vec<f64> = trace.reps.iter().map(|r| r.rows[i].regret_cum).collect();
        points.push((t as f64, median(vals)));
    }
    fit_power_law(&points)
}

pub fn median(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    quantile_sorted(&vals, 0.5)
}

/// Linear-interpolation quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n >= 1);
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatSummary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub q10: f64,
    pub q90: f64,
}

fn stat_summary(vals: &[f64]) -> StatSummary {
    let mut sorted = vals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    StatSummary {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: quantile_sorted(&sorted, 0.5),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        q10: quantile_sorted(&sorted, 0.1),
        q90: quantile_sorted(&sorted, 0.9),
    }
}

// ---------------------------------------------------------------------------
// Emission.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RepSummary {
    pub replication: usize,
    pub final_regret: f64,
    pub avg_iterate_error: f64,
    pub trunc_count: u64,
    pub clip_count: u64,
    pub max_precision_residual: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryDoc {
    /// Exact config for reproduction.
    pub config: ExperimentConfig,
    pub checkpoints: Vec<usize>,
    pub final_regret: StatSummary,
    pub avg_iterate_error: StatSummary,
    pub trunc_total: u64,
    pub clip_total: u64,
    /// Fit window [lo, hi] used for the slope below.
    pub slope_window: (usize, usize),
    pub slope: Option<SlopeFit>,
    pub slope_error: Option<String>,
    pub per_replication: Vec<RepSummary>,
}

/// Builds the summary document: final-regret statistics, slope over late
/// checkpoints (t ≥ 32 when at least four such checkpoints exist), totals,
/// and the per-replication table.
pub fn summarize(trace: &RegretTrace, config: &ExperimentConfig) -> SummaryDoc {
    let finals: Vec<f64> = trace.reps.iter().map(|r| r.final_regret).collect();
    let avg_errs: Vec<f64> = trace.reps.iter().map(|r| r.final_avg_iterate_error).collect();
    let horizon = config.run.horizon;
    let late = trace.checkpoints.iter().filter(|&&t| t >= 32).count();
    let window_lo = if late >= 4 { 32 } else { 1 };
    let (slope, slope_error) = match fit_regret_slope(trace, window_lo, horizon) {
        Ok(fit) => (Some(fit), None),
        Err(e) => (None, Some(e.to_string())),
    };
    SummaryDoc {
        config: config.clone(),
        checkpoints: trace.checkpoints.clone(),
        final_regret: stat_summary(&finals),
        avg_iterate_error: stat_summary(&avg_errs),
        trunc_total: trace.reps.iter().map(|r| r.trunc_count).sum(),
        clip_total: trace.reps.iter().map(|r| r.clip_count).sum(),
        slope_window: (window_lo, horizon),
        slope,
        slope_error,
        per_replication: trace
            .reps
            .iter()
            .map(|r| RepSummary {
                replication: r.replication,
                final_regret: r.final_regret,
                avg_iterate_error: r.final_avg_iterate_error,
                trunc_count: r.trunc_count,
                clip_count: r.clip_count,
                max_precision_residual: r.max_precision_residual,
            })
            .collect(),
    }
}

pub fn render_csv(trace: &RegretTrace) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for rep in &trace.reps {
        for row in &rep.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                rep.replication,
                row.t,
                row.regret_cum,
                row.trunc_count,
                row.clip_count,
                row.potential,
                row.trace_sigma_inv,
                row.min_eig_sigma
            )
            .expect("string write");
        }
    }
    s
}

/// Writes trace.csv, summary.json, and the config echo into `out_dir`.
pub fn emit_outputs(
    trace: &RegretTrace,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<SummaryDoc, HarnessError> {
    fs::create_dir_all(out_dir)?;
    let doc = summarize(trace, config);
    fs::write(out_dir.join("trace.csv"), render_csv(trace))?;
    let mut json = serde_json::to_string_pretty(&doc).expect("summary serializes");
    json.push('\n');
    fs::write(out_dir.join("summary.json"), json)?;
    let echo = toml::to_string_pretty(config).expect("config serializes");
    fs::write(out_dir.join("config.toml"), echo)?;
    Ok(doc)
}

/// Output directory precedence: CLI flag, then the `ZO_BANDIT_OUT`
/// environment variable, then the config's `run.out_dir`, then `out`.
pub fn resolve_out_dir(
    cli: Option<&Path>,
    env_override: Option<&str>,
    run: &RunConfig,
) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(e) = env_override {
        if !e.is_empty() {
            return PathBuf::from(e);
        }
    }
    if let Some(c) = &run.out_dir {
        return PathBuf::from(c);
    }
    PathBuf::from("out")
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))
}

/// Full pipeline for the CLI: load, validate, run, emit. Returns the output
/// directory and the summary document.
pub fn run_from_config(
    path: &Path,
    cli_out: Option<&Path>,
    env_out: Option<&str>,
) -> Result<(PathBuf, SummaryDoc), HarnessError> {
    let config = load_config(path)?;
    let validated = validate(&config)?;
    let trace = run_experiment(&validated)?;
    let out = resolve_out_dir(cli_out, env_out, &config.run);
    let doc = emit_outputs(&trace, &config, &out)?;
    Ok((out, doc))
}

/// Reads an emitted trace file and returns (t, median regret) points within
/// [from, to] for slope fitting.
pub fn read_median_regret_csv(
    path: &Path,
    from: usize,
    to: usize,
) -> Result<Vec<(f64, f64)>, HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| HarnessError::Parse("empty csv".into()))?;
    if header != CSV_HEADER {
        return Err(HarnessError::Parse(format!("unexpected csv header `{header}`")));
    }
    let mut by_t: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(HarnessError::Parse(format!(
                "line {}: expected 8 fields, got {}",
                idx + 2,
                fields.len()
            )));
        }
        let t: usize = fields[1]
            .parse()
            .map_err(|e| HarnessError::Parse(format!("line {}: bad t: {e}", idx + 2)))?;
        let regret: f64 = fields[2]
            .parse()
            .map_err(|e| HarnessError::Parse(format!("line {}: bad regret: {e}", idx + 2)))?;
        if t >= from && t <= to {
            by_t.entry(t).or_default().push(regret);
        }
    }
    Ok(by_t.into_iter().map(|(t, vals)| (t as f64, median(vals))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
            [environment]
            r = 4.0
            x_init = [1.0, 1.0]

            [environment.loss]
            kind = "distance"
            center = [0.0, 0.0]

            [environment.noise]
            kind = "gaussian"
            sigma = 0.1

            [algorithm]
            kind = "gaussian_practical"

            [run]
            horizon = 64
            replications = 2
            master_seed = 7
        "#
        .to_string()
    }

    fn parse(s: &str) -> Result<ExperimentConfig, HarnessError> {
        toml::from_str::<ExperimentConfig>(s).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let config = parse(&base_toml()).unwrap();
        let echoed = toml::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = toml::from_str(&echoed).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for (needle, extra) in [
            ("[run]", "[run]\nbogus = 1"),
            ("[environment.loss]", "[environment.loss]\nbogus = 1"),
            ("[algorithm]", "[algorithm]\nbogus = 1"),
            ("[environment]", "[environment]\nbogus = 1"),
        ] {
            let text = base_toml().replace(needle, extra);
            assert!(parse(&text).is_err(), "accepted unknown key under {needle}");
        }
    }

    #[test]
    fn loss_field_discipline() {
        // Missing required field.
        let text = base_toml().replace("center = [0.0, 0.0]", "");
        assert!(validate(&parse(&text).unwrap()).is_err());
        // Field from another kind.
        let text = base_toml().replace("center = [0.0, 0.0]", "center = [0.0, 0.0]\ncurvature = 2.0");
        assert!(validate(&parse(&text).unwrap()).is_err());
    }

    #[test]
    fn noise_and_algorithm_field_discipline() {
        let text = base_toml().replace("sigma = 0.1", "");
        assert!(validate(&parse(&text).unwrap()).is_err());
        let text = base_toml().replace(
            "kind = \"gaussian_practical\"",
            "kind = \"gaussian_practical\"\nc_mult = 2.0",
        );
        assert!(validate(&parse(&text).unwrap()).is_err());
        let text = base_toml().replace(
            "kind = \"gaussian_practical\"",
            "kind = \"gaussian_theoretical\"\nc_mult = 2.0",
        );
        let v = validate(&parse(&text).unwrap()).unwrap();
        match v.algo {
            AlgoSpec::GaussianTheoretical(c) => {
                assert_eq!(c.c_mult, 2.0);
                assert_eq!(c.c_step, 1.0);
            }
            _ => panic!("wrong algorithm"),
        }
    }

    #[test]
    fn affine_loss_is_rejected_for_regret_runs() {
        let text = base_toml().replace(
            "kind = \"distance\"\n            center = [0.0, 0.0]",
            "kind = \"affine\"\n            direction = [0.6, 0.8]\n            reference_min = [0.0, 0.0]",
        );
        let err = validate(&parse(&text).unwrap()).unwrap_err();
        assert!(matches!(err, HarnessError::ConfigInvalid(_)), "{err}");
    }

    #[test]
    fn default_checkpoints_are_powers_of_two_plus_horizon() {
        assert_eq!(default_checkpoints(16), vec![1, 2, 4, 8, 16]);
        assert_eq!(default_checkpoints(20), vec![1, 2, 4, 8, 16, 20]);
        assert_eq!(default_checkpoints(2), vec![1, 2]);
    }

    #[test]
    fn bad_checkpoints_are_rejected() {
        for list in ["[8, 4]", "[0, 4]", "[4, 4]", "[4, 128]", "[]"] {
            let text = base_toml().replace("master_seed = 7", &format!("master_seed = 7\ncheckpoints = {list}"));
            assert!(validate(&parse(&text).unwrap()).is_err(), "accepted {list}");
        }
    }

    #[test]
    fn random_search_regret_is_nonnegative_nondecreasing_and_ball_bounded() {
        let text = base_toml()
            .replace("x_init = [1.0, 1.0]", "x_init = [0.0, 0.0]")
            .replace("kind = \"gaussian_practical\"", "kind = \"random_search\"")
            .replace("kind = \"gaussian\"\n            sigma = 0.1", "kind = \"none\"");
        let v = validate(&parse(&text).unwrap()).unwrap();
        let trace = run_experiment(&v).unwrap();
        for rep in &trace.reps {
            let mut prev = 0.0;
            for row in &rep.rows {
                assert!(row.regret_cum >= prev - 1e-12);
                prev = row.regret_cum;
            }
            // x∘ = x*: every increment is ‖X_t − x*‖ ≤ r.
            assert!(rep.final_regret <= 4.0 * 64.0 + 1e-9);
            assert!(rep.final_regret >= 0.0);
            assert!(rep.rows.last().unwrap().potential.is_nan());
        }
    }

    #[test]
    fn horizon_two_performs_exactly_one_update() {
        let text = base_toml()
            .replace("horizon = 64", "horizon = 2")
            .replace("kind = \"gaussian\"\n            sigma = 0.1", "kind = \"none\"");
        let v = validate(&parse(&text).unwrap()).unwrap();
        let trace = run_experiment(&v).unwrap();
        let rows = &trace.reps[0].rows;
        assert_eq!(rows.len(), 2);
        // Round 1 only records the baseline: Σ still (r/d)²·I = 4·I.
        assert!((rows[0].min_eig_sigma - 4.0).abs() < 1e-12);
        assert_eq!(rows[0].trunc_count, 0);
        // Round 2 applies the single curvature update.
        assert!(
            (rows[1].min_eig_sigma - rows[0].min_eig_sigma).abs() > 1e-12
                || (rows[1].potential - rows[0].potential).abs() > 1e-12,
            "no state change observed at t = 2"
        );
    }

    #[test]
    fn reruns_are_bit_identical() {
        let v = validate(&parse(&base_toml()).unwrap()).unwrap();
        let a = run_experiment(&v).unwrap();
        let b = run_experiment(&v).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn average_iterate_error_obeys_the_regret_bound() {
        let v = validate(&parse(&base_toml()).unwrap()).unwrap();
        let trace = run_experiment(&v).unwrap();
        for rep in &trace.reps {
            for row in &rep.rows {
                assert!(
                    row.avg_iterate_error <= row.regret_cum / row.t as f64 + 1e-12,
                    "t={} err={} regret/t={}",
                    row.t,
                    row.avg_iterate_error,
                    row.regret_cum / row.t as f64
                );
            }
        }
    }

    #[test]
    fn checkpoint_subsampling_preserves_shared_values() {
        let full: Vec<String> = (1..=64).map(|t| t.to_string()).collect();
        let text = base_toml().replace(
            "master_seed = 7",
            &format!("master_seed = 7\ncheckpoints = [{}]", full.join(", ")),
        );
        let dense = run_experiment(&validate(&parse(&text).unwrap()).unwrap()).unwrap();
        let sparse = run_experiment(&validate(&parse(&base_toml()).unwrap()).unwrap()).unwrap();
        for (rep_d, rep_s) in dense.reps.iter().zip(&sparse.reps) {
            for row_s in &rep_s.rows {
                let row_d = rep_d.rows.iter().find(|r| r.t == row_s.t).unwrap();
                assert_eq!(row_d, row_s);
            }
        }
    }

    #[test]
    fn power_law_fit_recovers_exact_exponents() {
        let linear: Vec<(f64, f64)> = (1..=8).map(|t| (t as f64, 3.0 * t as f64)).collect();
        let fit = fit_power_law(&linear).unwrap();
        assert!((fit.exponent - 1.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);

        let sqrt: Vec<(f64, f64)> = (1..=8).map(|t| (t as f64, (t as f64).sqrt())).collect();
        let fit = fit_power_law(&sqrt).unwrap();
        assert!((fit.exponent - 0.5).abs() < 1e-9);

        assert!(matches!(
            fit_power_law(&linear[..3]),
            Err(HarnessError::InsufficientData { needed: 4, got: 3 })
        ));
        let mut degenerate = linear.clone();
        degenerate[2].1 = 0.0;
        assert!(matches!(fit_power_law(&degenerate), Err(HarnessError::NonpositiveRegret)));
    }

    #[test]
    fn emitted_outputs_are_consistent_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let config = parse(&base_toml()).unwrap();
        let v = validate(&config).unwrap();
        let trace = run_experiment(&v).unwrap();
        let out1 = dir.path().join("a");
        let doc = emit_outputs(&trace, &config, &out1).unwrap();

        // Row count and header.
        let csv = fs::read_to_string(out1.join("trace.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.count(), v.replications * v.checkpoints.len());

        // Summary mean equals the mean of per-replication finals.
        let mean = doc.per_replication.iter().map(|r| r.final_regret).sum::<f64>()
            / doc.per_replication.len() as f64;
        assert!((doc.final_regret.mean - mean).abs() <= 1e-12);

        // Re-running from the emitted config reproduces both files bit-exactly.
        let reloaded = load_config(&out1.join("config.toml")).unwrap();
        assert_eq!(reloaded, config);
        let trace2 = run_experiment(&validate(&reloaded).unwrap()).unwrap();
        let out2 = dir.path().join("b");
        emit_outputs(&trace2, &reloaded, &out2).unwrap();
        assert_eq!(
            fs::read(out1.join("trace.csv")).unwrap(),
            fs::read(out2.join("trace.csv")).unwrap()
        );
        assert_eq!(
            fs::read(out1.join("summary.json")).unwrap(),
            fs::read(out2.join("summary.json")).unwrap()
        );
    }

    #[test]
    fn csv_median_extraction_matches_the_trace() {
        let dir = tempfile::tempdir().unwrap();
        let config = parse(&base_toml()).unwrap();
        let v = validate(&config).unwrap();
        let trace = run_experiment(&v).unwrap();
        emit_outputs(&trace, &config, dir.path()).unwrap();
        let points = read_median_regret_csv(&dir.path().join("trace.csv"), 1, 64).unwrap();
        assert_eq!(points.len(), v.checkpoints.len());
        let fit_csv = fit_power_law(&points).unwrap();
        let fit_mem = fit_regret_slope(&trace, 1, 64).unwrap();
        assert!((fit_csv.exponent - fit_mem.exponent).abs() < 1e-12);
    }

    #[test]
    fn out_dir_precedence() {
        let run = RunConfig {
            horizon: 2,
            replications: 1,
            master_seed: 0,
            checkpoints: None,
            out_dir: Some("from_config".into()),
            debug_identity_checks: false,
        };
        let cli = PathBuf::from("from_cli");
        assert_eq!(resolve_out_dir(Some(&cli), Some("from_env"), &run), cli);
        assert_eq!(
            resolve_out_dir(None, Some("from_env"), &run),
            PathBuf::from("from_env")
        );
        assert_eq!(resolve_out_dir(None, None, &run), PathBuf::from("from_config"));
        let bare = RunConfig { out_dir: None, ..run };
        assert_eq!(resolve_out_dir(None, None, &bare), PathBuf::from("out"));
    }

    #[test]
    fn debug_identity_checks_record_residuals() {
        let text = base_toml().replace("master_seed = 7", "master_seed = 7\ndebug_identity_checks = true");
        let v = validate(&parse(&text).unwrap()).unwrap();
        let trace = run_experiment(&v).unwrap();
        for rep in &trace.reps {
            let resid = rep.max_precision_residual.expect("debug run records residuals");
            assert!(resid <= 1e-9, "residual {resid}");
        }
    }

    #[test]
    fn practical_mode_beats_random_search_per_seed() {
        // d = 2 distance loss, sigma 0.1, n = 2^14: the adaptive method should
        // win on nearly every seed, with common per-replication streams.
        let text = base_toml()
            .replace("horizon = 64", "horizon = 16384")
            .replace("replications = 2", "replications = 10")
            .replace(
                "x_init = [1.0, 1.0]",
                "x_init = [1.4142135623730951, 1.4142135623730951]",
            );
        let bandit = run(&parse(&text).unwrap()).unwrap();
        let rs = run(&parse(&text.replace("gaussian_practical", "random_search")).unwrap()).unwrap();
        let wins = bandit
            .reps
            .iter()
            .zip(&rs.reps)
            .filter(|(b, r)| b.final_regret < r.final_regret)
            .count();
        assert!(wins >= 9, "adaptive method won only {wins}/10 seeds against random search");
    }
}
