//! Derivative-free baselines for regret comparisons: one-point
//! ball-smoothed gradient descent and uniform random search.

use nalgebra::DVector;

use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    OnePointGd,
    RandomSearch,
}

/// State of a baseline optimizer. Both baselines propose a query point each
/// round and consume the noisy observation for that exact point.
#[derive(Debug, Clone)]
pub struct BaselineState {
    kind: BaselineKind,
    x_init: DVector<f64>,
    radius: f64,
    center: DVector<f64>,
    delta: f64,
    step: f64,
    best_seen: Option<(f64, DVector<f64>)>,
}

/// One-point gradient descent with the default horizon-based tuning:
/// smoothing radius δ = n^{-1/4} and step size r·n^{-3/4}/d.
pub fn one_point_gd(x_init: DVector<f64>, radius: f64, horizon: usize) -> BaselineState {
    assert!(horizon >= 1);
    let d = x_init.len() as f64;
    let n = horizon as f64;
    let delta = n.powf(-0.25);
    let step = radius * n.powf(-0.75) / d;
    one_point_gd_with(x_init, radius, delta, step)
}

/// One-point gradient descent with explicit smoothing radius and step size.
pub fn one_point_gd_with(
    x_init: DVector<f64>,
    radius: f64,
    delta: f64,
    step: f64,
) -> BaselineState {
    assert!(radius > 0.0 && radius.is_finite());
    assert!(delta > 0.0 && delta.is_finite());
    assert!(step >= 0.0 && step.is_finite());
    BaselineState {
        kind: BaselineKind::OnePointGd,
        center: x_init.clone(),
        x_init,
        radius,
        delta,
        step,
        best_seen: None,
    }
}

/// Uniform random search in the ball of the given radius around the start.
pub fn random_search(x_init: DVector<f64>, radius: f64) -> BaselineState {
    assert!(radius > 0.0 && radius.is_finite());
    BaselineState {
        kind: BaselineKind::RandomSearch,
        center: x_init.clone(),
        x_init,
        radius,
        delta: 0.0,
        step: 0.0,
        best_seen: None,
    }
}

impl BaselineState {
    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn best_seen(&self) -> Option<&(f64, DVector<f64>)> {
        self.best_seen.as_ref()
    }

    /// Draws the next query point.
    pub fn propose(&self, rng: &mut Stream) -> DVector<f64> {
        let d = self.x_init.len();
        match self.kind {
            BaselineKind::OnePointGd => &self.center + rng.unit_sphere(d) * self.delta,
            BaselineKind::RandomSearch => &self.x_init + rng.in_ball(d, self.radius),
        }
    }

    /// Consumes the observation for the most recent proposal `x`.
    pub fn update(&mut self, x: &DVector<f64>, y: f64) {
        assert_eq!(x.len(), self.x_init.len());
        assert!(y.is_finite());
        match self.kind {
            BaselineKind::OnePointGd => {
                // Recover the probe direction; the one-point gradient
                // estimate is (d/δ)·y·u.
                let u = (x - &self.center) / self.delta;
                let scale = self.step * (self.x_init.len() as f64 / self.delta) * y;
                self.center -= u * scale;
            }
            BaselineKind::RandomSearch => {
                if self.best_seen.as_ref().is_none_or(|(b, _)| y < *b) {
                    self.best_seen = Some((y, x.clone()));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::LossSpec;

    fn vecd(vals: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(vals)
    }

    #[test]
    fn default_tuning_follows_the_horizon() {
        let gd = one_point_gd(vecd(&[0.0]), 2.0, 16);
        assert_eq!(gd.delta(), 0.5);
        assert_eq!(gd.step(), 0.25);
    }

    #[test]
    fn gd_proposals_sit_on_the_probe_sphere() {
        let gd = one_point_gd_with(vecd(&[1.0, -2.0, 0.5]), 4.0, 0.3, 0.1);
        let mut rng = Stream::new(1);
        for _ in 0..50 {
            let x = gd.propose(&mut rng);
            assert!(((x - gd.center()).norm() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn gd_update_moves_against_the_one_point_estimate() {
        let mut gd = one_point_gd_with(vecd(&[0.0]), 1.0, 1.0, 0.1);
        gd.update(&vecd(&[1.0]), 2.0);
        // center ← 0 − 0.1·(1/1)·2·1.
        assert!((gd.center()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_observation_leaves_gd_in_place() {
        let mut gd = one_point_gd_with(vecd(&[0.7, -0.2]), 1.0, 0.5, 0.3);
        let mut rng = Stream::new(2);
        let x = gd.propose(&mut rng);
        gd.update(&x, 0.0);
        assert_eq!(gd.center(), &vecd(&[0.7, -0.2]));
    }

    #[test]
    fn random_search_stays_in_the_ball_and_tracks_the_best() {
        let mut rs = random_search(vecd(&[1.0, 1.0]), 3.0);
        let mut rng = Stream::new(3);
        let mut best = f64::INFINITY;
        for _ in 0..200 {
            let x = rs.propose(&mut rng);
            assert!((x.clone() - vecd(&[1.0, 1.0])).norm() <= 3.0 + 1e-12);
            let y = x.norm_squared();
            rs.update(&x, y);
            best = best.min(y);
            assert_eq!(rs.best_seen().unwrap().0, best);
        }
    }

    #[test]
    fn proposals_are_reproducible_per_seed() {
        let gd = one_point_gd(vecd(&[0.0, 0.0]), 2.0, 64);
        let a: Vec<_> = {
            let mut rng = Stream::new(9);
            (0..10).map(|_| gd.propose(&mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = Stream::new(9);
            (0..10).map(|_| gd.propose(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn gd_descends_a_smooth_bowl() {
        let loss = LossSpec::HuberizedQuadratic {
            center: vecd(&[0.0, 0.0]),
            curvature: 0.5,
        };
        let x0 = vecd(&[1.0, 0.0]);
        let mut gd = one_point_gd(x0.clone(), 2.0, 2048);
        let mut rng = Stream::new(4);
        for _ in 0..2048 {
            let x = gd.propose(&mut rng);
            let y = loss.eval(&x);
            gd.update(&x, y);
        }
        assert!(
            loss.eval(gd.center()) < loss.eval(&x0) / 4.0,
            "final loss {} from {}",
            loss.eval(gd.center()),
            loss.eval(&x0)
        );
    }
}
