//! Verification suites behind the CLI `verify` subcommand: the averaging
//! identity checks across a loss/dimension/smoothing grid, estimator bias
//! probes, closed-form moment oracles against Monte-Carlo, and the Gaussian
//! transport-distance checks. The acceptance tests drive the same suites at
//! full sample counts.

use nalgebra::DVector;
use serde::Serialize;

use crate::env::{Environment, LossSpec, NoiseSpec};
use crate::psd::{random_pd, sym_eig, wasserstein2_gaussian, SymMatrix};
use crate::rng::Stream;
use crate::surrogate::{
    check_identities, estimator_bias_probe, exp_square_moment, gaussian_moment_oracle,
    gaussian_norm_moments, mc_exp_square_moment, mc_norm_moments, mc_quad_moments,
    SurrogateSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevel {
    /// Reduced sample counts for a quick signal.
    Fast,
    /// The full sample counts used by the acceptance gate.
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub level: String,
    pub seed: u64,
    pub lines: Vec<CheckLine>,
    pub all_pass: bool,
}

fn line(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> CheckLine {
    CheckLine { name: name.into(), pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Shared fixtures: one base Gaussian and three losses per dimension.
// ---------------------------------------------------------------------------

fn head(vals: &[f64], d: usize) -> DVector<f64> {
    DVector::from_row_slice(&vals[..d])
}

pub fn grid_mu(d: usize) -> DVector<f64> {
    head(&[0.5, -0.3, 0.2], d)
}

pub fn grid_sigma(d: usize) -> SymMatrix {
    let full = [
        [1.0, 0.3, 0.1],
        [0.3, 2.0, 0.2],
        [0.1, 0.2, 0.5],
    ];
    let rows: Vec<Vec<f64>> = (0..d).map(|i| full[i][..d].to_vec()).collect();
    SymMatrix::from_rows(&rows).expect("fixture covariance is well formed")
}

/// The nonsmooth/polyhedral/smooth loss triple exercised per dimension.
pub fn grid_losses(d: usize) -> Vec<(&'static str, LossSpec)> {
    vec![
        ("distance", LossSpec::Distance { center: head(&[0.9, 0.1, -0.4], d) }),
        ("max_affine", LossSpec::linf_distance(head(&[-0.2, 0.5, 0.1], d))),
        (
            "huberized_quadratic",
            LossSpec::HuberizedQuadratic {
                center: head(&[0.3, -0.6, 0.5], d),
                curvature: 2.0,
            },
        ),
    ]
}

pub fn grid_affine(d: usize) -> LossSpec {
    let dir = head(&[3.0, -1.0, 1.0], d);
    let dir = &dir / dir.norm();
    LossSpec::Affine { direction: dir, reference_min: DVector::zeros(d) }
}

pub const GRID_DIMS: [usize; 3] = [1, 2, 3];
pub const GRID_LAMBDAS: [f64; 2] = [0.25, 0.5];

// ---------------------------------------------------------------------------
// Suites.
// ---------------------------------------------------------------------------

/// Both sides of the four averaging identities on every grid point, plus the
/// negative control that samples Z with variance ratio 1 instead of
/// (2 − λ)/λ and must fail the radial balance check.
pub fn identity_suite(n_samples: usize, seed: u64) -> Vec<CheckLine> {
    let master = Stream::new(seed);
    let mut lines = Vec::new();
    let mut combo = 0u64;
    for &d in &GRID_DIMS {
        let sigma = grid_sigma(d);
        for &lambda in &GRID_LAMBDAS {
            for (lname, loss) in grid_losses(d) {
                let spec =
                    SurrogateSpec::new(loss, grid_mu(d), sym_eig(sigma.clone()).unwrap(), lambda);
                let report = check_identities(&spec, n_samples, &master.child(combo));
                combo += 1;
                let worst = report
                    .checks
                    .iter()
                    .max_by(|a, b| a.margin.total_cmp(&b.margin))
                    .expect("four checks");
                lines.push(line(
                    format!("identities {lname} d={d} lambda={lambda}"),
                    report.all_pass,
                    format!("worst margin {:.2} ({})", worst.margin, worst.name),
                ));
            }
        }
    }

    // Negative control: wrong outer variance must break radial balance.
    let spec = SurrogateSpec::new(
        LossSpec::Distance { center: head(&[0.9, 0.1, -0.4], 2) },
        grid_mu(2),
        sym_eig(grid_sigma(2)).unwrap(),
        0.25,
    )
    .with_beta_sq(1.0);
    let report = check_identities(&spec, n_samples, &master.child(combo));
    let stein = report.check("stein_radial").expect("radial check present");
    lines.push(line(
        "negative control beta_sq=1 fails radial balance",
        !stein.pass,
        format!("margin {:.1} (must exceed 4)", stein.margin),
    ));
    lines
}

/// Production estimator bias on every grid point, plus the affine case whose
/// mean gradient and curvature are known exactly.
pub fn bias_suite(n_samples: usize, seed: u64) -> Vec<CheckLine> {
    let master = Stream::new(seed);
    let mut lines = Vec::new();
    let mut combo = 1000u64;
    for &d in &GRID_DIMS {
        let sigma = sym_eig(grid_sigma(d)).unwrap();
        let mu = grid_mu(d);
        for &lambda in &GRID_LAMBDAS {
            for (lname, loss) in grid_losses(d) {
                let baseline = loss.eval(&mu);
                let env = Environment::new(loss, NoiseSpec::Gaussian { sigma: 0.1 }).unwrap();
                let report = estimator_bias_probe(
                    &mu,
                    &sigma,
                    lambda,
                    &env,
                    baseline,
                    n_samples,
                    &master.child(combo),
                );
                combo += 1;
                lines.push(line(
                    format!("bias {lname} d={d} lambda={lambda}"),
                    report.grad_pass && report.hess_pass,
                    format!(
                        "grad margin {:.2}, hess margin {:.2}",
                        report.grad_margin, report.hess_margin
                    ),
                ));
            }
        }

        // Affine: E[g] is the slope itself and E[H] vanishes.
        let affine = grid_affine(d);
        let slope = match &affine {
            LossSpec::Affine { direction, .. } => direction.clone(),
            _ => unreachable!(),
        };
        let baseline = affine.eval(&mu);
        let env = Environment::new(affine, NoiseSpec::Gaussian { sigma: 0.1 }).unwrap();
        let report =
            estimator_bias_probe(&mu, &sigma, 0.25, &env, baseline, n_samples, &master.child(combo));
        combo += 1;
        let mut pass = true;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            let m = (report.grad_estimator_mean[i] - slope[i]).abs()
                / report.grad_estimator_se[i].max(1e-300);
            worst = worst.max(m);
            pass &= m <= 4.0;
            for j in 0..d {
                let se = report.hess_estimator_se[(i, j)].max(1e-300);
                let m = report.hess_estimator_mean[(i, j)].abs() / se;
                worst = worst.max(m);
                pass &= m <= 4.0;
            }
        }
        lines.push(line(
            format!("bias affine d={d} exact targets"),
            pass,
            format!("worst margin {worst:.2}"),
        ));
    }
    lines
}

/// Closed-form Gaussian moment oracles against Monte-Carlo on random PSD
/// inputs, the exactly-known identity-matrix cases, and the scaled
/// exponential-square moment at t = 2.
pub fn moment_suite(
    n_random: usize,
    n_mc: usize,
    n_exp_mc: usize,
    seed: u64,
) -> Vec<CheckLine> {
    let master = Stream::new(seed);
    let mut lines = Vec::new();

    // Exact identity-matrix cases.
    let exact_ok = {
        let m2 = gaussian_moment_oracle(&SymMatrix::identity(2)).unwrap();
        let m3 = gaussian_moment_oracle(&SymMatrix::identity(3)).unwrap();
        m2.norm4_mean == 8.0
            && m2.centered_alternating == 6.0
            && m2.centered_squared == 6.0
            && m3.norm4_mean == 15.0
            && m3.centered_squared == 12.0
    };
    lines.push(line(
        "moment oracle identity-matrix cases",
        exact_ok,
        "d=2: (8, 6, 6); d=3: m4 = 15, squared = 12",
    ));

    let mut gen_rng = master.child(0);
    for k in 0..n_random {
        let d = (k % 8) + 1;
        let a = random_pd(d, 0.2, 5.0, &mut gen_rng);
        let mu = gen_rng.standard_normal_vec(d) * 0.8;
        let oracle = gaussian_moment_oracle(&a).unwrap();
        let (e2, e4) = gaussian_norm_moments(&mu, &a).unwrap();
        let fact = sym_eig(a.clone()).unwrap();

        let mut mc_rng = master.child(1 + k as u64);
        let quad = mc_quad_moments(&a, n_mc, &mut mc_rng);
        let (m2, m4) = mc_norm_moments(&mu, &fact, n_mc, &mut mc_rng);

        let comparisons = [
            ("quad norm2", oracle.norm2_mean, quad.norm2_mean.value, quad.norm2_mean.stderr),
            ("quad norm4", oracle.norm4_mean, quad.norm4_mean.value, quad.norm4_mean.stderr),
            (
                "alternating",
                oracle.centered_alternating,
                quad.centered_alternating.value,
                quad.centered_alternating.stderr,
            ),
            (
                "squared",
                oracle.centered_squared,
                quad.centered_squared.value,
                quad.centered_squared.stderr,
            ),
            ("norm e2", e2, m2.value, m2.stderr),
            ("norm e4", e4, m4.value, m4.stderr),
        ];
        let mut pass = true;
        let mut worst = (0.0f64, "");
        for (cname, exact, est, se) in comparisons {
            let m = (est - exact).abs() / se.max(1e-300);
            if m > worst.0 {
                worst = (m, cname);
            }
            pass &= m <= 5.0;
        }
        lines.push(line(
            format!("moments random input {k} d={d}"),
            pass,
            format!("worst margin {:.2} ({})", worst.0, worst.1),
        ));
    }

    let exact = exp_square_moment(2.0);
    let est = mc_exp_square_moment(2.0, n_exp_mc, &mut master.child(999));
    let rel = (est.value - exact).abs() / exact;
    lines.push(line(
        "exp-square moment t=2",
        rel < 0.01,
        format!("relative error {rel:.5} vs sqrt(2)"),
    ));
    lines
}

/// Gaussian transport distance: zero on identical inputs, a hand-computable
/// scalar case, and symmetry on random pairs.
pub fn w2_suite(seed: u64) -> Vec<CheckLine> {
    let mut rng = Stream::new(seed);
    let mut lines = Vec::new();

    let mut worst_self: f64 = 0.0;
    for k in 0..5 {
        let d = k + 1;
        let sigma = sym_eig(random_pd(d, 0.1, 10.0, &mut rng)).unwrap();
        let mu = rng.standard_normal_vec(d) * 2.0;
        let w = wasserstein2_gaussian(&mu, &sigma, &mu, &sigma).unwrap();
        worst_self = worst_self.max(w);
    }
    lines.push(line(
        "transport distance vanishes on identical Gaussians",
        worst_self <= 1e-12,
        format!("worst {worst_self:.2e}"),
    ));

    // d=1: means 0 and 3, standard deviations 1 and 2: √(9 + (2−1)²) = √10.
    let a = sym_eig(SymMatrix::scaled_identity(1, 1.0)).unwrap();
    let b = sym_eig(SymMatrix::scaled_identity(1, 4.0)).unwrap();
    let w = wasserstein2_gaussian(
        &DVector::from_row_slice(&[0.0]),
        &a,
        &DVector::from_row_slice(&[3.0]),
        &b,
    )
    .unwrap();
    let err = (w - 10f64.sqrt()).abs();
    lines.push(line(
        "transport distance scalar case sqrt(10)",
        err <= 1e-10,
        format!("error {err:.2e}"),
    ));

    let mut worst_asym: f64 = 0.0;
    for k in 0..100 {
        let d = (k % 5) + 1;
        let s1 = sym_eig(random_pd(d, 0.1, 10.0, &mut rng)).unwrap();
        let s2 = sym_eig(random_pd(d, 0.1, 10.0, &mut rng)).unwrap();
        let m1 = rng.standard_normal_vec(d) * 2.0;
        let m2 = rng.standard_normal_vec(d) * 2.0;
        let ab = wasserstein2_gaussian(&m1, &s1, &m2, &s2).unwrap();
        let ba = wasserstein2_gaussian(&m2, &s2, &m1, &s1).unwrap();
        worst_asym = worst_asym.max((ab - ba).abs());
    }
    lines.push(line(
        "transport distance symmetric on 100 random pairs",
        worst_asym <= 1e-12,
        format!("worst asymmetry {worst_asym:.2e}"),
    ));
    lines
}

/// Assembles all suites at the level's sample counts.
pub fn run_verify(level: VerifyLevel, seed: u64) -> VerifyReport {
    let (n_identity, n_bias, n_mc, n_exp) = match level {
        VerifyLevel::Fast => (100_000, 100_000, 100_000, 1_000_000),
        VerifyLevel::Full => (1_000_000, 1_000_000, 1_000_000, 10_000_000),
    };
    let mut lines = Vec::new();
    lines.extend(identity_suite(n_identity, seed));
    lines.extend(bias_suite(n_bias, seed.wrapping_add(1)));
    lines.extend(moment_suite(20, n_mc, n_exp, seed.wrapping_add(2)));
    lines.extend(w2_suite(seed.wrapping_add(3)));
    let all_pass = lines.iter().all(|l| l.pass);
    VerifyReport {
        level: match level {
            VerifyLevel::Fast => "fast".into(),
            VerifyLevel::Full => "full".into(),
        },
        seed,
        lines,
        all_pass,
    }
}
