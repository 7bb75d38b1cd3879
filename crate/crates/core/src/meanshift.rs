//! Weighted Gaussian mean-shift mode seeking over 3D points.
//!
//! The density is `p(y) = sum_i w_i * exp(-||(y - z_i) / b||^2)` (unnormalized,
//! squared exponent with no 1/2 factor). One ascent starts from every
//! positive-weight input point and climbs by moving to the kernel-weighted mean
//! until the displacement drops below the convergence tolerance. Ascents that
//! converge within the merge radius of an earlier mode pool their weight into
//! it, so a mode's score is the total input weight that flowed to it.
//!
//! Everything here is deterministic: ascents are independent (and may run in
//! parallel) but results are merged in input order, and score ties are broken
//! by lexicographic position order.

use crate::exec;
use crate::geom::Vec3;

pub type AbsoluteVote = WeightedPoint;

/// A 3D position in meters with a nonnegative weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedPoint {
    pub position: Vec3,
    pub weight: f64,
}

impl WeightedPoint {
    pub fn new(position: Vec3, weight: f64) -> Self {
        WeightedPoint { position, weight }
    }
}

/// A local maximum of the vote density and the weight mass that converged to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub position: Vec3,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct MeanShiftConfig {
    /// Ascent stops once the mean-shift displacement is at most this (meters).
    pub convergence_tolerance: f64,
    /// Ascents that run longer than this are discarded as non-converged.
    pub max_iterations: usize,
    /// Modes closer than this are merged; defaults to half the bandwidth.
    pub merge_radius: Option<f64>,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        MeanShiftConfig { convergence_tolerance: 1e-5, max_iterations: 100, merge_radius: None }
    }
}

impl MeanShiftConfig {
    pub fn merge_radius_for(&self, bandwidth: f64) -> f64 {
        self.merge_radius.unwrap_or(bandwidth * 0.5)
    }
}

/// Unnormalized kernel density at `query`: `sum_i w_i * exp(-||query - z_i||^2 / b^2)`.
pub fn density(query: Vec3, points: &[WeightedPoint], bandwidth: f64) -> f64 {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    let inv_b_sq = 1.0 / (bandwidth * bandwidth);
    let mut sum = 0.0;
    for p in points {
        sum += p.weight * (-query.dist_sq(p.position) * inv_b_sq).exp();
    }
    sum
}

/// One mean-shift step: the kernel-weighted mean of `points` seen from `y`.
/// `None` when the kernel mass at `y` underflows to zero.
fn shift_target(y: Vec3, points: &[WeightedPoint], inv_b_sq: f64) -> Option<Vec3> {
    let mut mass = 0.0;
    let mut mean = Vec3::ZERO;
    for p in points {
        let k = p.weight * (-y.dist_sq(p.position) * inv_b_sq).exp();
        mass += k;
        mean += p.position * k;
    }
    if mass > 0.0 {
        Some(mean.scale(1.0 / mass))
    } else {
        None
    }
}

fn ascend(start: Vec3, points: &[WeightedPoint], inv_b_sq: f64, config: &MeanShiftConfig) -> (Vec3, bool) {
    let mut y = start;
    for _ in 0..config.max_iterations {
        let Some(target) = shift_target(y, points, inv_b_sq) else {
            // isolated iterate: nothing moves it, treat as stationary
            return (y, true);
        };
        if target.dist(y) <= config.convergence_tolerance {
            return (y, true);
        }
        y = target;
    }
    (y, false)
}

/// Every iterate of the ascent from `start`, starting position included.
/// The last entry is the converged position (or the final iterate if the
/// iteration cap was hit). Used by diagnostics and by tests that audit
/// per-step density monotonicity.
pub fn ascent_trajectory(
    start: Vec3,
    points: &[WeightedPoint],
    bandwidth: f64,
    config: &MeanShiftConfig,
) -> Vec<Vec3> {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    let inv_b_sq = 1.0 / (bandwidth * bandwidth);
    let mut trajectory = vec![start];
    let mut y = start;
    for _ in 0..config.max_iterations {
        let Some(target) = shift_target(y, points, inv_b_sq) else {
            break;
        };
        if target.dist(y) <= config.convergence_tolerance {
            break;
        }
        y = target;
        trajectory.push(y);
    }
    trajectory
}

/// All modes of the vote density, sorted by descending score (ties by
/// lexicographic position). Points with zero weight neither seed an ascent nor
/// contribute mass, so an all-zero-weight input yields no modes.
pub fn find_modes(points: &[WeightedPoint], bandwidth: f64, config: &MeanShiftConfig) -> Vec<Mode> {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    let inv_b_sq = 1.0 / (bandwidth * bandwidth);

    let seeds: Vec<WeightedPoint> = points.iter().copied().filter(|p| p.weight > 0.0).collect();
    let ascents = exec::map_slice(&seeds, |seed| ascend(seed.position, points, inv_b_sq, config));

    let merge_radius_sq = {
        let r = config.merge_radius_for(bandwidth);
        r * r
    };
    let mut modes: Vec<Mode> = Vec::new();
    for (seed, (position, converged)) in seeds.iter().zip(&ascents) {
        if !converged {
            continue;
        }
        match modes.iter_mut().find(|m| m.position.dist_sq(*position) <= merge_radius_sq) {
            Some(m) => m.score += seed.weight,
            None => modes.push(Mode { position: *position, score: seed.weight }),
        }
    }
    modes.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.position.lex_cmp(&b.position)));
    modes
}

/// The `k` highest-scoring modes.
pub fn top_k_modes(
    points: &[WeightedPoint],
    bandwidth: f64,
    k: usize,
    config: &MeanShiftConfig,
) -> Vec<Mode> {
    let mut modes = find_modes(points, bandwidth, config);
    modes.truncate(k);
    modes
}
