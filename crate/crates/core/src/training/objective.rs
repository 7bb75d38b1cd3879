//! Node error functions for the greedy split objective.
//!
//! Both error functions reduce a sample set to integer sufficient statistics —
//! label counts for classification, fixed-point offset moments for regression —
//! and only then convert to floating point. Integer accumulation is exact and
//! order-independent, so the incremental threshold sweep inside the trainer and
//! a from-scratch evaluation of the same partition produce bit-identical error
//! values, which keeps exhaustive re-checks of chosen splits exact.

use crate::geom::Vec3;
use crate::training::{TrainingSample, TrainingSet};

/// Offsets are quantized to 2^-20 m (about a micrometer) and clamped to
/// +/- 256 m before accumulation.
const OFFSET_QUANTUM_PER_M: f64 = (1u64 << 20) as f64;
const OFFSET_QUANT_CLAMP: f64 = (1u64 << 28) as f64;

#[inline]
fn quantize_component(x: f64) -> i32 {
    (x * OFFSET_QUANTUM_PER_M).round().clamp(-OFFSET_QUANT_CLAMP, OFFSET_QUANT_CLAMP) as i32
}

pub(crate) fn quantize_offset(delta: Vec3) -> [i32; 3] {
    [quantize_component(delta.x), quantize_component(delta.y), quantize_component(delta.z)]
}

/// `|Q| * H(Q)` with H the natural-log Shannon entropy of the label counts.
pub(crate) fn size_scaled_entropy(counts: &[u32], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.ln();
        }
    }
    n * h
}

/// Per-sample payload the split sweep reads instead of recomputing offsets.
pub(crate) enum PreparedObjective {
    Classification {
        labels: Vec<u16>,
        class_count: usize,
    },
    Regression {
        joint_count: usize,
        /// sample-major `[i32; 3]` quantized offsets, length `n * joint_count`
        qoff: Vec<[i32; 3]>,
        /// per (sample, joint): true iff the original offset norm is <= rho
        retained: Vec<bool>,
    },
}

impl PreparedObjective {
    pub(crate) fn classification(samples: &[TrainingSample], class_count: usize) -> Self {
        PreparedObjective::Classification {
            labels: samples.iter().map(|s| s.part_label).collect(),
            class_count,
        }
    }

    pub(crate) fn regression(set: &TrainingSet, samples: &[TrainingSample], inclusion_radius: f64) -> Self {
        let joint_count = set.joint_count();
        let rho_sq = inclusion_radius * inclusion_radius;
        let mut qoff = Vec::with_capacity(samples.len() * joint_count);
        let mut retained = Vec::with_capacity(samples.len() * joint_count);
        for s in samples {
            let joints = &set.images()[s.image_index as usize].joints;
            for joint in joints {
                let delta = *joint - s.world;
                retained.push(delta.norm_sq() <= rho_sq);
                qoff.push(quantize_offset(delta));
            }
        }
        PreparedObjective::Regression { joint_count, qoff, retained }
    }
}

/// Exact integer sufficient statistics of one side of a split.
pub(crate) trait SplitStats: Clone + Send + Sync {
    fn empty(prepared: &PreparedObjective) -> Self;
    /// Folds sample `i` (an index into the prepared payload) into the stats.
    fn add(&mut self, prepared: &PreparedObjective, i: usize);
    /// Exact `self - other`; `other` must be a sub-accumulation of `self`.
    fn subtract(&self, other: &Self) -> Self;
    fn sample_count(&self) -> u64;
    fn error(&self) -> f64;
}

#[derive(Clone)]
pub(crate) struct ClsStats {
    counts: Vec<u32>,
    total: u64,
}

impl SplitStats for ClsStats {
    fn empty(prepared: &PreparedObjective) -> Self {
        let class_count = match prepared {
            PreparedObjective::Classification { class_count, .. } => *class_count,
            _ => panic!("classification stats over non-classification payload"),
        };
        ClsStats { counts: vec![0; class_count], total: 0 }
    }

    fn add(&mut self, prepared: &PreparedObjective, i: usize) {
        let PreparedObjective::Classification { labels, .. } = prepared else {
            panic!("classification stats over non-classification payload");
        };
        self.counts[labels[i] as usize] += 1;
        self.total += 1;
    }

    fn subtract(&self, other: &Self) -> Self {
        ClsStats {
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a - b).collect(),
            total: self.total - other.total,
        }
    }

    fn sample_count(&self) -> u64 {
        self.total
    }

    fn error(&self) -> f64 {
        size_scaled_entropy(&self.counts, self.total)
    }
}

#[derive(Clone, Copy, Default)]
struct JointMoments {
    count: u32,
    sum: [i64; 3],
    sum_sq: i128,
}

#[derive(Clone)]
pub(crate) struct RegStats {
    joints: Vec<JointMoments>,
    total: u64,
}

impl SplitStats for RegStats {
    fn empty(prepared: &PreparedObjective) -> Self {
        let joint_count = match prepared {
            PreparedObjective::Regression { joint_count, .. } => *joint_count,
            _ => panic!("regression stats over non-regression payload"),
        };
        RegStats { joints: vec![JointMoments::default(); joint_count], total: 0 }
    }

    fn add(&mut self, prepared: &PreparedObjective, i: usize) {
        let PreparedObjective::Regression { joint_count, qoff, retained } = prepared else {
            panic!("regression stats over non-regression payload");
        };
        let base = i * *joint_count;
        for j in 0..*joint_count {
            if retained[base + j] {
                let q = qoff[base + j];
                let m = &mut self.joints[j];
                m.count += 1;
                m.sum[0] += q[0] as i64;
                m.sum[1] += q[1] as i64;
                m.sum[2] += q[2] as i64;
                let sq = q[0] as i64 * q[0] as i64
                    + q[1] as i64 * q[1] as i64
                    + q[2] as i64 * q[2] as i64;
                m.sum_sq += sq as i128;
            }
        }
        self.total += 1;
    }

    fn subtract(&self, other: &Self) -> Self {
        RegStats {
            joints: self
                .joints
                .iter()
                .zip(&other.joints)
                .map(|(a, b)| JointMoments {
                    count: a.count - b.count,
                    sum: [a.sum[0] - b.sum[0], a.sum[1] - b.sum[1], a.sum[2] - b.sum[2]],
                    sum_sq: a.sum_sq - b.sum_sq,
                })
                .collect(),
            total: self.total - other.total,
        }
    }

    fn sample_count(&self) -> u64 {
        self.total
    }

    /// Sum over joints of the squared deviation from the retained-offset mean:
    /// `sum ||d||^2 - ||sum d||^2 / n` per joint, in square meters.
    fn error(&self) -> f64 {
        let scale = OFFSET_QUANTUM_PER_M * OFFSET_QUANTUM_PER_M;
        let mut total = 0.0;
        for m in &self.joints {
            if m.count == 0 {
                continue;
            }
            let n = m.count as f64;
            let sx = m.sum[0] as f64;
            let sy = m.sum[1] as f64;
            let sz = m.sum[2] as f64;
            let e = (m.sum_sq as f64 - (sx * sx + sy * sy + sz * sz) / n) / scale;
            total += e.max(0.0);
        }
        total
    }
}

/// The Eq.-style size-weighted child error: `(nl/n) * el + (nr/n) * er`.
/// Shared by the sweep and the reference path so both combine identically.
pub(crate) fn weighted_child_error(
    n_left: u64,
    e_left: f64,
    n_right: u64,
    e_right: f64,
    n_total: u64,
) -> f64 {
    let n = n_total as f64;
    (n_left as f64 / n) * e_left + (n_right as f64 / n) * e_right
}
