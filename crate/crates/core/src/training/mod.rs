//! Forest training: greedy tree-structure learning over depth-comparison
//! features, and leaf-vote learning by reservoir sampling + mean-shift
//! clustering of relative offsets.
//!
//! Structure learning repeatedly splits the pixel set with the test that
//! minimizes the size-weighted child error `sum_s (|Q_s|/|Q|) E(Q_s)`, where E
//! is either the classification entropy over surrogate part labels or the
//! regression offset variance (see `objective`). Leaf learning then routes
//! every training pixel to its leaf, reservoir-samples the per-joint relative
//! offsets it carries, clusters each reservoir with mean shift, and keeps the
//! top K weighted modes as the leaf's votes.
//!
//! Trees train in parallel on distinct RNG streams; candidate evaluation
//! within a node is also parallel. Both produce the same forest as a
//! sequential run.

pub mod config;
mod objective;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Objective, ObjectiveKind, TrainingConfig};

use crate::dataset::Dataset;
use crate::depth::{back_project, evaluate_split, Branch, CameraIntrinsics, DepthImage, SplitTest};
use crate::error::{Error, Result};
use crate::exec;
use crate::forest::{Forest, LeafModel, RelativeVote, Tree, TreeNode};
use crate::geom::{Pixel, Vec3};
use crate::meanshift::{top_k_modes, MeanShiftConfig, WeightedPoint};
use crate::reservoir::Reservoir;
use objective::{weighted_child_error, ClsStats, PreparedObjective, RegStats, SplitStats};

/// One labeled depth image: pixels, camera, and ground-truth joint positions.
#[derive(Clone, Debug)]
pub struct TrainingImage {
    pub image: DepthImage,
    pub camera: CameraIntrinsics,
    pub joints: Vec<Vec3>,
}

/// An in-memory training corpus with a consistent joint count.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    images: Vec<TrainingImage>,
    joint_count: usize,
}

impl TrainingSet {
    pub fn new(images: Vec<TrainingImage>) -> Result<Self> {
        let joint_count = images
            .first()
            .map(|i| i.joints.len())
            .ok_or_else(|| Error::invalid("training set", "no images"))?;
        if joint_count == 0 {
            return Err(Error::invalid("training set", "images carry no joints"));
        }
        for (i, img) in images.iter().enumerate() {
            if img.joints.len() != joint_count {
                return Err(Error::invalid(
                    "training set",
                    format!("image {i} has {} joints, expected {joint_count}", img.joints.len()),
                ));
            }
            if img.joints.iter().any(|j| !j.is_finite()) {
                return Err(Error::invalid("training set", format!("image {i} has non-finite joints")));
            }
        }
        Ok(TrainingSet { images, joint_count })
    }

    /// Loads every image and sidecar listed in a dataset manifest.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let loaded = exec::map_range(dataset.len(), |i| -> Result<TrainingImage> {
            let (image, sidecar) = dataset.load_entry(i)?;
            Ok(TrainingImage { image, camera: sidecar.intrinsics, joints: sidecar.joints })
        });
        Self::new(loaded.into_iter().collect::<Result<_>>()?)
    }

    pub fn images(&self) -> &[TrainingImage] {
        &self.images
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }
}

/// One sampled foreground pixel with its world position and surrogate label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    pub image_index: u32,
    pub pixel: Pixel,
    pub world: Vec3,
    pub part_label: u16,
}

impl TrainingSample {
    /// Relative offset from this pixel's world position to a ground-truth joint.
    pub fn offset_to(&self, set: &TrainingSet, joint: usize) -> Vec3 {
        set.images[self.image_index as usize].joints[joint] - self.world
    }
}

/// Index of the nearest ground-truth joint: the surrogate body-part label that
/// stands in for a labeled part map under the classification objective.
pub fn surrogate_part_label(world: Vec3, joints: &[Vec3]) -> u16 {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (j, z) in joints.iter().enumerate() {
        let d = world.dist_sq(*z);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best as u16
}

/// Uniformly samples up to `per_image` foreground pixels from every image
/// (without replacement), back-projects them, and attaches surrogate labels.
pub fn sample_pixels(set: &TrainingSet, per_image: usize, rng: &mut impl Rng) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for (image_index, img) in set.images.iter().enumerate() {
        let mut fg: Vec<Pixel> = img.image.foreground_pixels().collect();
        let m = per_image.min(fg.len());
        for k in 0..m {
            let j = rng.random_range(k..fg.len());
            fg.swap(k, j);
            let pixel = fg[k];
            let world = back_project(pixel, &img.image, &img.camera)
                .expect("foreground pixel back-projects");
            let part_label = surrogate_part_label(world, &img.joints);
            out.push(TrainingSample { image_index: image_index as u32, pixel, world, part_label });
        }
    }
    out
}

/// E^cls: `|Q|` times the natural-log entropy of the part-label distribution.
pub fn classification_error(samples: &[TrainingSample], class_count: usize) -> f64 {
    let prepared = PreparedObjective::classification(samples, class_count);
    let mut acc = ClsStats::empty(&prepared);
    for i in 0..samples.len() {
        acc.add(&prepared, i);
    }
    acc.error()
}

/// E^reg: sum over joints of the squared deviation of relative offsets from
/// their per-joint mean, restricted to offsets with norm at most
/// `inclusion_radius`. Joints with no retained offsets contribute 0.
pub fn regression_error(set: &TrainingSet, samples: &[TrainingSample], inclusion_radius: f64) -> f64 {
    let prepared = PreparedObjective::regression(set, samples, inclusion_radius);
    let mut acc = RegStats::empty(&prepared);
    for i in 0..samples.len() {
        acc.add(&prepared, i);
    }
    acc.error()
}

/// The greedy split objective `sum_{s in {l,r}} (|Q_s|/|Q|) E(Q_s)` for one
/// candidate test, with the partition induced by `evaluate_split`.
pub fn split_objective(
    set: &TrainingSet,
    samples: &[TrainingSample],
    test: &SplitTest,
    objective: Objective,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    match objective {
        Objective::Classification => {
            let prepared = PreparedObjective::classification(samples, set.joint_count());
            split_objective_impl::<ClsStats>(set, samples, test, &prepared)
        }
        Objective::Regression { inclusion_radius } => {
            let prepared = PreparedObjective::regression(set, samples, inclusion_radius);
            split_objective_impl::<RegStats>(set, samples, test, &prepared)
        }
    }
}

fn split_objective_impl<S: SplitStats>(
    set: &TrainingSet,
    samples: &[TrainingSample],
    test: &SplitTest,
    prepared: &PreparedObjective,
) -> Result<f64> {
    let mut left = S::empty(prepared);
    let mut right = S::empty(prepared);
    for (i, s) in samples.iter().enumerate() {
        let image = &set.images[s.image_index as usize].image;
        match evaluate_split(image, s.pixel, test)? {
            Branch::Left => left.add(prepared, i),
            Branch::Right => right.add(prepared, i),
        }
    }
    Ok(weighted_child_error(
        left.sample_count(),
        left.error(),
        right.sample_count(),
        right.error(),
        samples.len() as u64,
    ))
}

/// Draws `count` probe-offset pairs uniformly from a disc of `radius_m`
/// pixel-meters. Exposed so audits can regenerate a node's candidate grid.
pub fn sample_probe_offset_pairs(
    rng: &mut impl Rng,
    count: usize,
    radius_m: f64,
) -> Vec<([f32; 2], [f32; 2])> {
    (0..count).map(|_| (sample_disc(rng, radius_m), sample_disc(rng, radius_m))).collect()
}

fn sample_disc(rng: &mut impl Rng, radius: f64) -> [f32; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    [(r * theta.cos()) as f32, (r * theta.sin()) as f32]
}

/// `count` thresholds spread evenly over the open response interval.
pub fn candidate_thresholds(min_response: i32, max_response: i32, count: usize) -> Vec<f32> {
    let lo = min_response as f64;
    let hi = max_response as f64;
    (1..=count)
        .map(|t| (lo + (hi - lo) * t as f64 / (count + 1) as f64) as f32)
        .collect()
}

struct BuildContext<'a> {
    set: &'a TrainingSet,
    samples: &'a [TrainingSample],
    depth_mm: Vec<u16>,
    prepared: PreparedObjective,
    config: &'a TrainingConfig,
}

impl BuildContext<'_> {
    #[inline]
    fn response(&self, sample: u32, test: &SplitTest) -> i32 {
        let s = &self.samples[sample as usize];
        let image = &self.set.images[s.image_index as usize].image;
        crate::depth::feature_response_at(image, s.pixel, self.depth_mm[sample as usize], test)
    }
}

/// Grows the tree structure greedily; every leaf is left empty for
/// [`learn_leaf_votes`] to fill. Splitting stops at `max_depth`, below
/// `2 * min_samples_per_leaf` samples, at zero node error, or when no sampled
/// candidate strictly improves the objective.
pub fn train_tree(
    set: &TrainingSet,
    samples: &[TrainingSample],
    config: &TrainingConfig,
    rng: &mut impl Rng,
) -> Result<Tree> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training samples", "empty sample set"));
    }
    let mut depth_mm = Vec::with_capacity(samples.len());
    for s in samples {
        let image = &set.images[s.image_index as usize].image;
        depth_mm.push(image.foreground_depth_mm(s.pixel)?);
    }
    let prepared = match config.objective() {
        Objective::Classification => PreparedObjective::classification(samples, set.joint_count()),
        Objective::Regression { inclusion_radius } => {
            PreparedObjective::regression(set, samples, inclusion_radius)
        }
    };
    let ctx = BuildContext { set, samples, depth_mm, prepared, config };
    let mut nodes = Vec::new();
    let mut order: Vec<u32> = (0..samples.len() as u32).collect();
    match config.objective() {
        Objective::Classification => {
            build_node::<ClsStats>(&ctx, &mut nodes, &mut order, 0, samples.len(), 0, rng);
        }
        Objective::Regression { .. } => {
            build_node::<RegStats>(&ctx, &mut nodes, &mut order, 0, samples.len(), 0, rng);
        }
    }
    Tree::new(nodes)
}

fn build_node<S: SplitStats>(
    ctx: &BuildContext,
    nodes: &mut Vec<TreeNode>,
    order: &mut Vec<u32>,
    lo: usize,
    hi: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> u32 {
    let index = nodes.len() as u32;
    nodes.push(TreeNode::Leaf(LeafModel::empty(ctx.set.joint_count)));

    let n = hi - lo;
    let mut total = S::empty(&ctx.prepared);
    for &i in &order[lo..hi] {
        total.add(&ctx.prepared, i as usize);
    }
    let parent_error = total.error();

    let splittable = depth < ctx.config.max_depth
        && n >= 2 * ctx.config.min_samples_per_leaf
        && parent_error > 0.0;
    if !splittable {
        return index;
    }
    let Some(test) = select_split::<S>(ctx, &order[lo..hi], &total, parent_error, rng) else {
        return index;
    };

    // stable partition of order[lo..hi] by the chosen test
    let mut left_buf = Vec::with_capacity(n);
    let mut right_buf = Vec::with_capacity(n);
    for &i in &order[lo..hi] {
        match crate::depth::branch_for_response(ctx.response(i, &test), test.threshold_mm) {
            Branch::Left => left_buf.push(i),
            Branch::Right => right_buf.push(i),
        }
    }
    debug_assert!(!left_buf.is_empty() && !right_buf.is_empty());
    let mid = lo + left_buf.len();
    order[lo..mid].copy_from_slice(&left_buf);
    order[mid..hi].copy_from_slice(&right_buf);

    let left = build_node::<S>(ctx, nodes, order, lo, mid, depth + 1, rng);
    let right = build_node::<S>(ctx, nodes, order, mid, hi, depth + 1, rng);
    nodes[index as usize] = TreeNode::Split { test, left, right };
    index
}

/// Candidate probe pairs come from the node's RNG; evaluation is parallel and
/// RNG-free. The winner is the grid minimum with ties broken by (candidate
/// index, threshold index), and must strictly improve on the parent error.
fn select_split<S: SplitStats>(
    ctx: &BuildContext,
    node_samples: &[u32],
    total: &S,
    parent_error: f64,
    rng: &mut impl Rng,
) -> Option<SplitTest> {
    let pairs = sample_probe_offset_pairs(
        rng,
        ctx.config.candidate_tests,
        ctx.config.candidate_offset_radius,
    );
    let evals = exec::map_slice(&pairs, |&(offset_u, offset_v)| {
        evaluate_candidate::<S>(ctx, node_samples, total, offset_u, offset_v)
    });

    let mut best: Option<(f64, usize, usize, f32)> = None;
    for (candidate_index, eval) in evals.iter().enumerate() {
        if let Some((objective, threshold_index, threshold)) = eval {
            let better = match &best {
                None => true,
                Some((b_obj, b_cand, b_thr, _)) => {
                    objective.total_cmp(b_obj).then(candidate_index.cmp(b_cand)).then(threshold_index.cmp(b_thr))
                        == std::cmp::Ordering::Less
                }
            };
            if better {
                best = Some((*objective, candidate_index, *threshold_index, *threshold));
            }
        }
    }
    let (objective, candidate_index, _, threshold) = best?;
    if objective >= parent_error {
        return None;
    }
    let (offset_u, offset_v) = pairs[candidate_index];
    Some(SplitTest { offset_u, offset_v, threshold_mm: threshold })
}

/// Sweeps all thresholds of one probe pair in a single pass over the node's
/// samples sorted by response. Left statistics accumulate incrementally and
/// the right side is the exact integer difference from the node total, so the
/// objective equals a from-scratch evaluation of the same partition bit for
/// bit. Returns the best (objective, threshold index, threshold), or None if
/// the responses are constant or no threshold satisfies the leaf minimum.
fn evaluate_candidate<S: SplitStats>(
    ctx: &BuildContext,
    node_samples: &[u32],
    total: &S,
    offset_u: [f32; 2],
    offset_v: [f32; 2],
) -> Option<(f64, usize, f32)> {
    let probe = SplitTest { offset_u, offset_v, threshold_mm: 0.0 };
    let n = node_samples.len();
    let mut responses: Vec<(i32, u32)> =
        node_samples.iter().map(|&i| (ctx.response(i, &probe), i)).collect();
    let lo = responses.iter().map(|r| r.0).min()?;
    let hi = responses.iter().map(|r| r.0).max()?;
    if lo == hi {
        return None;
    }
    responses.sort_unstable_by_key(|r| r.0);
    let thresholds = candidate_thresholds(lo, hi, ctx.config.candidate_thresholds);

    let min_leaf = ctx.config.min_samples_per_leaf as u64;
    let mut left = S::empty(&ctx.prepared);
    let mut cursor = 0usize;
    let mut best: Option<(f64, usize, f32)> = None;
    for (threshold_index, &tau) in thresholds.iter().enumerate() {
        while cursor < n && (responses[cursor].0 as f64) < tau as f64 {
            left.add(&ctx.prepared, responses[cursor].1 as usize);
            cursor += 1;
        }
        let n_left = left.sample_count();
        let n_right = n as u64 - n_left;
        if n_left < min_leaf || n_right < min_leaf {
            continue;
        }
        let right = total.subtract(&left);
        let objective =
            weighted_child_error(n_left, left.error(), n_right, right.error(), n as u64);
        if best.as_ref().is_none_or(|(b, _, _)| objective < *b) {
            best = Some((objective, threshold_index, tau));
        }
    }
    best
}

/// Fills every leaf with per-joint votes: routes each training pixel to its
/// leaf, reservoir-samples the relative offsets per (leaf, joint), clusters
/// each reservoir with mean shift at `cluster_bandwidth`, and keeps the top K
/// modes as votes. Vote weights are mode scores normalized by reservoir size,
/// so per (leaf, joint) they sum to the fraction of reservoir mass retained.
pub fn learn_leaf_votes(
    tree: Tree,
    set: &TrainingSet,
    samples: &[TrainingSample],
    config: &TrainingConfig,
    rng: &mut impl Rng,
) -> Result<Tree> {
    config.validate()?;
    let joint_count = set.joint_count();

    // route every sample to its leaf (parallel; order irrelevant to the result)
    let routed = exec::map_slice(samples, |s| -> Result<u32> {
        let image = &set.images[s.image_index as usize].image;
        let depth = image.foreground_depth_mm(s.pixel)?;
        tree.leaf_index(image, s.pixel, depth)
    });
    let leaf_of = routed.into_iter().collect::<Result<Vec<u32>>>()?;

    // reservoir collection is sequential in sample order for determinism
    let mut reservoirs: Vec<Option<Vec<Reservoir<Vec3>>>> = vec![None; tree.node_count()];
    for (s, &leaf) in samples.iter().zip(&leaf_of) {
        let slot = reservoirs[leaf as usize]
            .get_or_insert_with(|| vec![Reservoir::new(config.reservoir_capacity); joint_count]);
        let joints = &set.images[s.image_index as usize].joints;
        for (j, z) in joints.iter().enumerate() {
            slot[j].offer(*z - s.world, rng);
        }
    }

    let ms = MeanShiftConfig::default();
    let models = exec::map_range(tree.node_count(), |node| {
        reservoirs[node].as_ref().map(|per_joint| {
            let votes = per_joint
                .iter()
                .map(|r| cluster_reservoir(r, config.cluster_bandwidth, config.votes_per_leaf, &ms))
                .collect();
            LeafModel::new(votes, config.votes_per_leaf).expect("clustered votes satisfy leaf invariants")
        })
    });

    let nodes = tree
        .nodes()
        .iter()
        .zip(models)
        .map(|(node, model)| match node {
            TreeNode::Split { .. } => node.clone(),
            TreeNode::Leaf(_) => {
                TreeNode::Leaf(model.unwrap_or_else(|| LeafModel::empty(joint_count)))
            }
        })
        .collect();
    Tree::new(nodes)
}

fn cluster_reservoir(
    reservoir: &Reservoir<Vec3>,
    bandwidth: f64,
    k: usize,
    ms: &MeanShiftConfig,
) -> Vec<RelativeVote> {
    if reservoir.is_empty() {
        return Vec::new();
    }
    let points: Vec<WeightedPoint> =
        reservoir.items().iter().map(|&d| WeightedPoint::new(d, 1.0)).collect();
    let inv_mass = 1.0 / reservoir.len() as f64;
    top_k_modes(&points, bandwidth, k, ms)
        .into_iter()
        .map(|m| RelativeVote { delta: m.position, weight: m.score * inv_mass })
        .collect()
}

/// Trains the full forest: per tree, a distinct RNG stream drives pixel
/// sampling, candidate generation, and reservoir sampling, so trees are
/// independent and the forest is a pure function of (data, config, seed).
pub fn train_forest(set: &TrainingSet, config: &TrainingConfig) -> Result<Forest> {
    config.validate()?;
    let joint_count = set.joint_count();
    let lambda = config.resolve_lambda(joint_count)?;
    let bandwidth = config.resolve_aggregation_bandwidth(joint_count)?;

    let trees = exec::map_range(config.tree_count, |t| -> Result<Tree> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(t as u64 + 1);
        let samples = sample_pixels(set, config.pixels_per_image, &mut rng);
        if samples.is_empty() {
            return Err(Error::invalid("training set", "no foreground pixels to sample"));
        }
        let tree = train_tree(set, &samples, config, &mut rng)?;
        learn_leaf_votes(tree, set, &samples, config, &mut rng)
    });
    let trees: Vec<Tree> = trees.into_iter().collect::<Result<_>>()?;
    Forest::new(trees, joint_count, config.votes_per_leaf, lambda, bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::DEFAULT_BACKGROUND_DEPTH_MM;

    fn flat_training_image(depth: u16, joints: Vec<Vec3>) -> TrainingImage {
        TrainingImage {
            image: DepthImage::new(3, 3, DEFAULT_BACKGROUND_DEPTH_MM, vec![depth; 9]).unwrap(),
            camera: CameraIntrinsics::new(100.0, 100.0, 1.0, 1.0).unwrap(),
            joints,
        }
    }

    /// Set with one flat image and one joint at the origin; worlds are chosen
    /// per test via hand-made samples, so only the joints matter here.
    fn offset_fixture(joints: Vec<Vec3>) -> TrainingSet {
        TrainingSet::new(vec![flat_training_image(2000, joints)]).unwrap()
    }

    fn sample_at(world: Vec3, label: u16) -> TrainingSample {
        TrainingSample { image_index: 0, pixel: Pixel::new(1, 1), world, part_label: label }
    }

    #[test]
    fn regression_error_zero_for_identical_offsets() {
        let set = offset_fixture(vec![Vec3::new(0.5, 0.0, 0.0)]);
        let samples = vec![sample_at(Vec3::new(0.1, 0.0, 0.0), 0); 4];
        assert_eq!(regression_error(&set, &samples, 1.0), 0.0);
    }

    #[test]
    fn regression_error_zero_when_all_offsets_exceed_rho() {
        let set = offset_fixture(vec![Vec3::new(5.0, 0.0, 0.0)]);
        let samples = vec![sample_at(Vec3::ZERO, 0), sample_at(Vec3::new(0.2, 0.0, 0.0), 0)];
        assert_eq!(regression_error(&set, &samples, 0.5), 0.0);
    }

    #[test]
    fn regression_error_hand_computed_variance() {
        // offsets (0,0,0), (0.02,0,0), (0.04,0,0): mean 0.02, squared deviations
        // 4e-4 + 0 + 4e-4 = 8e-4
        let set = offset_fixture(vec![Vec3::ZERO]);
        let samples = vec![
            sample_at(Vec3::ZERO, 0),
            sample_at(Vec3::new(-0.02, 0.0, 0.0), 0),
            sample_at(Vec3::new(-0.04, 0.0, 0.0), 0),
        ];
        let e = regression_error(&set, &samples, 1.0);
        assert!((e - 8e-4).abs() < 1e-7, "got {e}");
    }

    #[test]
    fn classification_error_examples() {
        let s = |label| sample_at(Vec3::ZERO, label);
        assert_eq!(classification_error(&[s(1), s(1), s(1)], 3), 0.0);
        let two = classification_error(&[s(0), s(1)], 2);
        assert!((two - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let four = classification_error(&[s(0), s(0), s(1), s(1)], 2);
        assert!((four - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn split_objective_everything_left_equals_parent_error() {
        let set = offset_fixture(vec![Vec3::ZERO, Vec3::new(0.0, 0.0, 9.0)]);
        let samples = vec![
            sample_at(Vec3::ZERO, 0),
            sample_at(Vec3::new(0.1, 0.0, 0.0), 0),
            sample_at(Vec3::new(0.0, 0.3, 0.0), 1),
        ];
        // constant image: response 0 < 1, so every sample branches left
        let test = SplitTest { offset_u: [0.0; 2], offset_v: [0.0; 2], threshold_mm: 1.0 };
        let obj = split_objective(&set, &samples, &test, Objective::Classification).unwrap();
        assert_eq!(obj, classification_error(&samples, 2));
        let obj_reg =
            split_objective(&set, &samples, &test, Objective::Regression { inclusion_radius: 1.0 })
                .unwrap();
        assert_eq!(obj_reg, regression_error(&set, &samples, 1.0));
    }

    /// Two flat images at different depths; a probe pushed off the image reads
    /// background, so the response separates the images cleanly.
    fn two_plane_set() -> TrainingSet {
        TrainingSet::new(vec![
            flat_training_image(1000, vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 9.0)]),
            flat_training_image(3000, vec![Vec3::new(0.0, 0.0, 9.0), Vec3::new(0.0, 0.0, 3.0)]),
        ])
        .unwrap()
    }

    fn two_plane_samples(set: &TrainingSet) -> Vec<TrainingSample> {
        let mut samples = Vec::new();
        for (i, img) in set.images().iter().enumerate() {
            for pixel in img.image.foreground_pixels() {
                let world = back_project(pixel, &img.image, &img.camera).unwrap();
                let label = surrogate_part_label(world, &img.joints);
                samples.push(TrainingSample { image_index: i as u32, pixel, world, part_label: label });
            }
        }
        samples
    }

    #[test]
    fn split_objective_pure_partition_is_zero() {
        let set = two_plane_set();
        let samples = two_plane_samples(&set);
        // probe 9 pixel-meters right: off-image at both depths, reading the
        // 10000 mm background; response = 10000 - depth separates the planes.
        let test = SplitTest { offset_u: [9.0, 0.0], offset_v: [0.0, 0.0], threshold_mm: 8000.0 };
        let obj = split_objective(&set, &samples, &test, Objective::Classification).unwrap();
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn split_objective_matches_hand_computed_mixed_case() {
        // 4 samples, labels [0, 0, 1 | 1]: objective =
        // (3/4) * 3 * H(2/3, 1/3) + (1/4) * 0
        let set = offset_fixture(vec![Vec3::ZERO, Vec3::new(0.0, 0.0, 9.0)]);
        let deep = flat_training_image(3000, vec![Vec3::ZERO, Vec3::new(0.0, 0.0, 9.0)]);
        let set = TrainingSet::new(vec![set.images()[0].clone(), deep]).unwrap();
        let samples = vec![
            sample_at(Vec3::ZERO, 0),
            sample_at(Vec3::new(0.1, 0.0, 0.0), 0),
            sample_at(Vec3::new(0.0, 0.3, 0.0), 1),
            TrainingSample { image_index: 1, pixel: Pixel::new(1, 1), world: Vec3::ZERO, part_label: 1 },
        ];
        // image 0 (1000 mm): response 9000; image 1 (3000 mm): 7000; threshold
        // 8000 sends image-0 samples left, the image-1 sample right.
        let test = SplitTest { offset_u: [0.0, 0.0], offset_v: [9.0, 0.0], threshold_mm: -8000.0 };
        let got = split_objective(&set, &samples, &test, Objective::Classification).unwrap();
        let h = -(2.0 / 3.0) * (2.0f64 / 3.0).ln() - (1.0 / 3.0) * (1.0f64 / 3.0).ln();
        let expected = 0.75 * 3.0 * h;
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
    }

    fn quick_config() -> TrainingConfig {
        TrainingConfig {
            tree_count: 1,
            max_depth: 3,
            candidate_tests: 40,
            candidate_thresholds: 8,
            min_samples_per_leaf: 1,
            pixels_per_image: 9,
            candidate_offset_radius: 12.0,
            reservoir_capacity: 50,
            cluster_bandwidth: 0.01,
            votes_per_leaf: 2,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn train_tree_single_leaf_when_labels_identical() {
        let set = offset_fixture(vec![Vec3::ZERO]);
        let samples = vec![sample_at(Vec3::new(0.1, 0.0, 0.0), 0); 6];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tree = train_tree(&set, &samples, &quick_config(), &mut rng).unwrap();
        assert_eq!(tree.node_count(), 1);
        assert_eq!(tree.depth(), 0);
    }

    #[test]
    fn train_tree_zero_max_depth_is_single_leaf() {
        let set = two_plane_set();
        let samples = two_plane_samples(&set);
        let cfg = TrainingConfig { max_depth: 0, ..quick_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tree = train_tree(&set, &samples, &cfg, &mut rng).unwrap();
        assert_eq!(tree.node_count(), 1);
    }

    #[test]
    fn train_tree_separates_two_planes_at_depth_one() {
        let set = two_plane_set();
        let samples = two_plane_samples(&set);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = quick_config();
        let tree = train_tree(&set, &samples, &cfg, &mut rng).unwrap();
        // the two planes are perfectly separable by probes that fall off the
        // 3x3 images, and nothing inside a plane separates further
        assert_eq!(tree.depth(), 1, "tree: {:?}", tree.nodes());
        let img0 = &set.images()[0].image;
        let img1 = &set.images()[1].image;
        let l0 = tree.descend(img0, Pixel::new(1, 1)).unwrap() as *const _;
        let l1 = tree.descend(img1, Pixel::new(1, 1)).unwrap() as *const _;
        assert_ne!(l0, l1);
    }

    #[test]
    fn chosen_split_is_grid_minimum() {
        // regenerate the candidate grid from the same seed and re-check the
        // root split exhaustively with the reference objective
        let set = two_plane_set();
        let samples = two_plane_samples(&set);
        let cfg = TrainingConfig { max_depth: 1, ..quick_config() };

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tree = train_tree(&set, &samples, &cfg, &mut rng).unwrap();
        let TreeNode::Split { test, .. } = &tree.nodes()[0] else {
            panic!("expected a root split");
        };
        let chosen = split_objective(&set, &samples, test, cfg.objective()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pairs = sample_probe_offset_pairs(&mut rng, cfg.candidate_tests, cfg.candidate_offset_radius);
        for (offset_u, offset_v) in pairs {
            let probe = SplitTest { offset_u, offset_v, threshold_mm: 0.0 };
            let responses: Vec<i32> = samples
                .iter()
                .map(|s| {
                    crate::depth::feature_response(&set.images()[s.image_index as usize].image, s.pixel, &probe)
                        .unwrap()
                })
                .collect();
            let (lo, hi) = (responses.iter().min().unwrap(), responses.iter().max().unwrap());
            if lo == hi {
                continue;
            }
            for tau in candidate_thresholds(*lo, *hi, cfg.candidate_thresholds) {
                let candidate = SplitTest { offset_u, offset_v, threshold_mm: tau };
                let obj = split_objective(&set, &samples, &candidate, cfg.objective()).unwrap();
                let counts = responses.iter().filter(|&&r| (r as f64) < tau as f64).count();
                if counts < cfg.min_samples_per_leaf || samples.len() - counts < cfg.min_samples_per_leaf {
                    continue;
                }
                assert!(chosen <= obj, "candidate beats chosen split: {obj} < {chosen}");
            }
        }
    }

    #[test]
    fn learn_leaf_votes_single_pixel_single_joint() {
        let joint = Vec3::new(0.25, -0.1, 2.2);
        let set = offset_fixture(vec![joint]);
        let world = Vec3::new(0.0, 0.0, 2.0);
        let samples = vec![sample_at(world, 0)];
        let tree = Tree::new(vec![TreeNode::Leaf(LeafModel::empty(1))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = learn_leaf_votes(tree, &set, &samples, &quick_config(), &mut rng).unwrap();
        let TreeNode::Leaf(model) = &tree.nodes()[0] else { panic!() };
        let votes = model.votes_for(0);
        assert_eq!(votes.len(), 1);
        assert_eq!(votes[0].delta, joint - world);
        assert_eq!(votes[0].weight, 1.0);
    }

    #[test]
    fn learn_leaf_votes_clusters_weighted_seven_three() {
        // two tight offset clusters of sizes 7 and 3, far apart vs the
        // clustering bandwidth
        let c1 = Vec3::new(0.3, 0.0, 0.0);
        let c2 = Vec3::new(-0.4, 0.2, 0.0);
        let set = offset_fixture(vec![Vec3::ZERO]);
        let mut samples = Vec::new();
        for _ in 0..7 {
            samples.push(sample_at(-c1, 0));
        }
        for _ in 0..3 {
            samples.push(sample_at(-c2, 0));
        }
        let tree = Tree::new(vec![TreeNode::Leaf(LeafModel::empty(1))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = quick_config();
        let tree = learn_leaf_votes(tree, &set, &samples, &cfg, &mut rng).unwrap();
        let TreeNode::Leaf(model) = &tree.nodes()[0] else { panic!() };
        let votes = model.votes_for(0);
        assert_eq!(votes.len(), 2);
        assert!(votes[0].delta.dist(c1) < 1e-6);
        assert!((votes[0].weight - 0.7).abs() < 1e-12);
        assert!(votes[1].delta.dist(c2) < 1e-6);
        assert!((votes[1].weight - 0.3).abs() < 1e-12);

        // K = 1 keeps only the heavier cluster
        let cfg1 = TrainingConfig { votes_per_leaf: 1, ..cfg };
        let tree = Tree::new(vec![TreeNode::Leaf(LeafModel::empty(1))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = learn_leaf_votes(tree, &set, &samples, &cfg1, &mut rng).unwrap();
        let TreeNode::Leaf(model) = &tree.nodes()[0] else { panic!() };
        let votes = model.votes_for(0);
        assert_eq!(votes.len(), 1);
        assert!(votes[0].delta.dist(c1) < 1e-6);
    }

    #[test]
    fn stored_offsets_reconstruct_ground_truth() {
        let set = two_plane_set();
        let samples = two_plane_samples(&set);
        for s in &samples {
            for j in 0..set.joint_count() {
                let z = set.images()[s.image_index as usize].joints[j];
                let reconstructed = s.world + s.offset_to(&set, j);
                assert!(reconstructed.dist(z) < 1e-12);
            }
        }
    }

    #[test]
    fn train_forest_depth_zero_single_leaf_with_global_votes() {
        let set = two_plane_set();
        let cfg = TrainingConfig { max_depth: 0, ..quick_config() };
        let forest = train_forest(&set, &cfg).unwrap();
        assert_eq!(forest.trees().len(), 1);
        assert_eq!(forest.trees()[0].node_count(), 1);
        let TreeNode::Leaf(model) = &forest.trees()[0].nodes()[0] else { panic!() };
        assert!(model.max_votes_per_joint() >= 1);
    }

    #[test]
    fn train_forest_is_deterministic() {
        let set = two_plane_set();
        let cfg = TrainingConfig { tree_count: 2, ..quick_config() };
        let a = train_forest(&set, &cfg).unwrap().serialize();
        let b = train_forest(&set, &cfg).unwrap().serialize();
        assert_eq!(a, b);
    }

    #[test]
    fn surrogate_label_picks_nearest_joint_lowest_index_on_tie() {
        let joints = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.9, 0.0, 0.0)];
        assert_eq!(surrogate_part_label(Vec3::new(0.95, 0.0, 0.0), &joints), 2);
        assert_eq!(surrogate_part_label(Vec3::ZERO, &joints), 0);
    }

    #[test]
    fn sample_pixels_respects_per_image_budget_and_labels() {
        let set = two_plane_set();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = sample_pixels(&set, 4, &mut rng);
        assert_eq!(samples.len(), 8);
        for s in &samples {
            let img = &set.images()[s.image_index as usize];
            assert!(img.image.is_foreground(s.pixel));
            assert_eq!(s.part_label, surrogate_part_label(s.world, &img.joints));
        }
        // without replacement within an image
        let mut seen = std::collections::HashSet::new();
        for s in samples.iter().filter(|s| s.image_index == 0) {
            assert!(seen.insert((s.pixel.x, s.pixel.y)));
        }
    }
}
