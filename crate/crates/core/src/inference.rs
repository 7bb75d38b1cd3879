//! Joint-position inference: per-pixel vote collection across the forest,
//! vote-length filtering, depth-squared weight adaptation, subsampling, and
//! mean-shift aggregation into ranked hypotheses.
//!
//! For every foreground pixel q with world position x_q, every tree routes q
//! to a leaf; each stored relative vote (delta, w) for joint j with
//! ||delta|| <= lambda_j casts the absolute vote (x_q + delta, w * z_q^2),
//! z_q in meters. Per joint, the pooled votes are subsampled to N, and the
//! modes of the Gaussian vote density at bandwidth b_j become hypotheses
//! ranked by their converged weight mass.

use std::io::{self, BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::depth::{back_project, CameraIntrinsics, DepthImage};
use crate::error::{Error, Result};
use crate::exec;
use crate::forest::Forest;
use crate::geom::{Pixel, Vec3};
use crate::meanshift::{find_modes, MeanShiftConfig, WeightedPoint};
use crate::reservoir::Reservoir;

pub use crate::meanshift::AbsoluteVote;

/// One proposed joint position with its aggregated confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hypothesis {
    pub joint: usize,
    pub position: Vec3,
    pub confidence: f64,
}

#[derive(Clone, Debug)]
pub struct InferenceConfig {
    /// N: per-joint vote count after subsampling.
    pub vote_subsample: usize,
    /// Ranked hypotheses kept per joint.
    pub max_hypotheses: usize,
    /// Seed for subsampling; batch runs derive per-image seeds from it.
    pub seed: u64,
    /// Per-joint overrides of the forest's stored vote-length thresholds.
    pub lambda_override: Option<Vec<f64>>,
    /// Per-joint overrides of the forest's stored aggregation bandwidths.
    pub bandwidth_override: Option<Vec<f64>>,
    pub mean_shift: MeanShiftConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            vote_subsample: 200,
            max_hypotheses: 2,
            seed: 0,
            lambda_override: None,
            bandwidth_override: None,
            mean_shift: MeanShiftConfig::default(),
        }
    }
}

/// Collects the per-joint absolute vote sets cast by every foreground pixel
/// through every tree, filtered by the forest's vote-length thresholds.
pub fn collect_votes(
    image: &DepthImage,
    cam: &CameraIntrinsics,
    forest: &Forest,
) -> Result<Vec<Vec<AbsoluteVote>>> {
    collect_votes_with_lambda(image, cam, forest, forest.lambda_m())
}

/// As [`collect_votes`] with explicit thresholds. Rows are processed in
/// parallel and concatenated in row order, so vote order is deterministic.
pub fn collect_votes_with_lambda(
    image: &DepthImage,
    cam: &CameraIntrinsics,
    forest: &Forest,
    lambda_m: &[f64],
) -> Result<Vec<Vec<AbsoluteVote>>> {
    let joint_count = forest.joint_count();
    if lambda_m.len() != joint_count {
        return Err(Error::invalid(
            "lambda",
            format!("{} entries for {joint_count} joints", lambda_m.len()),
        ));
    }
    let lambda_sq: Vec<f64> = lambda_m.iter().map(|l| l * l).collect();

    let rows = exec::map_range(image.height() as usize, |y| -> Result<Vec<Vec<AbsoluteVote>>> {
        let mut per_joint = vec![Vec::new(); joint_count];
        for x in 0..image.width() {
            let q = Pixel::new(x, y as u32);
            let depth_mm = image.depth_mm(q).expect("in bounds");
            if depth_mm == image.background_depth_mm() {
                continue;
            }
            let x_q = back_project(q, image, cam)?;
            let weight_scale = x_q.z * x_q.z;
            for tree in forest.trees() {
                let leaf = tree.leaf_index(image, q, depth_mm)?;
                let model = tree.nodes()[leaf as usize].as_leaf();
                for (joint, lam_sq) in lambda_sq.iter().enumerate() {
                    for vote in model.votes_for(joint) {
                        if vote.delta.norm_sq() <= *lam_sq {
                            per_joint[joint]
                                .push(WeightedPoint::new(x_q + vote.delta, vote.weight * weight_scale));
                        }
                    }
                }
            }
        }
        Ok(per_joint)
    });

    let mut votes = vec![Vec::new(); joint_count];
    for row in rows {
        for (joint, row_votes) in row?.into_iter().enumerate() {
            votes[joint].extend(row_votes);
        }
    }
    Ok(votes)
}

/// Uniform subsample without replacement down to `n` votes (reservoir method);
/// inputs of at most `n` votes pass through unchanged.
pub fn subsample(votes: &[AbsoluteVote], n: usize, rng: &mut impl Rng) -> Vec<AbsoluteVote> {
    assert!(n > 0, "subsample size must be positive");
    if votes.len() <= n {
        return votes.to_vec();
    }
    let mut reservoir = Reservoir::new(n);
    for v in votes {
        reservoir.offer(*v, rng);
    }
    reservoir.into_items()
}

/// Full single-image inference: collect, subsample, aggregate, rank.
/// An image with no foreground pixels yields empty hypothesis lists.
pub fn infer(
    image: &DepthImage,
    cam: &CameraIntrinsics,
    forest: &Forest,
    config: &InferenceConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    let joint_count = forest.joint_count();
    let lambda = resolve_override(&config.lambda_override, forest.lambda_m(), "lambda_override")?;
    let bandwidth =
        resolve_override(&config.bandwidth_override, forest.bandwidth_m(), "bandwidth_override")?;
    if config.vote_subsample == 0 {
        return Err(Error::Config("vote_subsample must be positive".into()));
    }

    let votes = collect_votes_with_lambda(image, cam, forest, lambda)?;
    let hypotheses = exec::map_range(joint_count, |joint| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(joint as u64);
        let kept = subsample(&votes[joint], config.vote_subsample, &mut rng);
        let mut modes = find_modes(&kept, bandwidth[joint], &config.mean_shift);
        modes.truncate(config.max_hypotheses);
        modes
            .into_iter()
            .map(|m| Hypothesis { joint, position: m.position, confidence: m.score })
            .collect::<Vec<_>>()
    });
    Ok(hypotheses)
}

fn resolve_override<'a>(
    configured: &'a Option<Vec<f64>>,
    stored: &'a [f64],
    name: &str,
) -> Result<&'a [f64]> {
    match configured {
        None => Ok(stored),
        Some(values) if values.len() == stored.len() => Ok(values),
        Some(values) => Err(Error::Config(format!(
            "{name} has {} entries for {} joints",
            values.len(),
            stored.len()
        ))),
    }
}

/// Inference output for one image, plus its wall time in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePrediction {
    pub image: String,
    /// Per joint, hypotheses sorted by descending confidence.
    pub joints: Vec<Vec<Hypothesis>>,
    pub wall_ms: f64,
}

/// Maps [`infer`] over a dataset with concurrent workers. Output order matches
/// the manifest; each image runs with seed `config.seed XOR image_index`, so
/// batches are reproducible and per-image subsampling is independent.
pub fn infer_batch(
    dataset: &Dataset,
    forest: &Forest,
    config: &InferenceConfig,
) -> Result<Vec<ImagePrediction>> {
    let results = exec::map_range(dataset.len(), |i| -> Result<ImagePrediction> {
        let (image, sidecar) = dataset.load_entry(i)?;
        if sidecar.joints.len() != forest.joint_count() {
            return Err(Error::JointCountMismatch {
                forest: forest.joint_count(),
                data: sidecar.joints.len(),
            });
        }
        let started = Instant::now();
        let per_image = InferenceConfig { seed: config.seed ^ i as u64, ..config.clone() };
        let joints = infer(&image, &sidecar.intrinsics, forest, &per_image)?;
        Ok(ImagePrediction {
            image: dataset.image_id(i).to_string(),
            joints,
            wall_ms: started.elapsed().as_secs_f64() * 1000.0,
        })
    });
    results.into_iter().collect()
}

#[derive(Serialize, Deserialize)]
struct WireHypothesis {
    position: Vec3,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    image: String,
    joints: Vec<Vec<WireHypothesis>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wall_ms: Option<f64>,
}

/// Writes predictions as JSON lines: one record per image with the image id
/// and per-joint `{position, confidence}` arrays. Wall times are included only
/// when `include_timing` is set, keeping default outputs byte-reproducible.
pub fn write_predictions_jsonl(
    mut w: impl Write,
    predictions: &[ImagePrediction],
    include_timing: bool,
) -> io::Result<()> {
    for p in predictions {
        let record = WireRecord {
            image: p.image.clone(),
            joints: p
                .joints
                .iter()
                .map(|hs| {
                    hs.iter()
                        .map(|h| WireHypothesis { position: h.position, confidence: h.confidence })
                        .collect()
                })
                .collect(),
            wall_ms: include_timing.then_some(p.wall_ms),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions_jsonl(reader: impl BufRead) -> Result<Vec<ImagePrediction>> {
    let mut out = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::corrupt("predictions", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: WireRecord = serde_json::from_str(&line)
            .map_err(|e| Error::corrupt("predictions", format!("line {}: {e}", line_no + 1)))?;
        out.push(ImagePrediction {
            image: record.image,
            joints: record
                .joints
                .into_iter()
                .enumerate()
                .map(|(joint, hs)| {
                    hs.into_iter()
                        .map(|h| Hypothesis { joint, position: h.position, confidence: h.confidence })
                        .collect()
                })
                .collect(),
            wall_ms: record.wall_ms.unwrap_or(0.0),
        });
    }
    Ok(out)
}

pub fn save_predictions(
    path: impl AsRef<Path>,
    predictions: &[ImagePrediction],
    include_timing: bool,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_predictions_jsonl(&mut buf, predictions, include_timing)
        .map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<ImagePrediction>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_predictions_jsonl(io::BufReader::new(bytes.as_slice())).map_err(|e| e.at_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::DEFAULT_BACKGROUND_DEPTH_MM;
    use crate::forest::{LeafModel, RelativeVote, Tree, TreeNode};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 2.0, 2.0).unwrap()
    }

    fn single_pixel_image(depth: u16) -> DepthImage {
        let mut depths = vec![DEFAULT_BACKGROUND_DEPTH_MM; 25];
        depths[2 * 5 + 2] = depth; // the principal-point pixel
        DepthImage::new(5, 5, DEFAULT_BACKGROUND_DEPTH_MM, depths).unwrap()
    }

    fn single_leaf_forest(votes: Vec<Vec<RelativeVote>>, lambda: f64) -> Forest {
        let joints = votes.len();
        let model = LeafModel::new(votes, 4).unwrap();
        let tree = Tree::new(vec![TreeNode::Leaf(model)]).unwrap();
        Forest::new(vec![tree], joints, 4, vec![lambda; joints], vec![0.05; joints]).unwrap()
    }

    #[test]
    fn vote_weight_is_scaled_by_depth_squared() {
        // pixel at the principal point, depth 2000 mm: x_q = (0, 0, 2),
        // vote delta (0.1, 0, 0) within lambda 0.2: expect ((0.1, 0, 2), 4.0)
        let image = single_pixel_image(2000);
        let forest = single_leaf_forest(
            vec![vec![RelativeVote { delta: Vec3::new(0.1, 0.0, 0.0), weight: 1.0 }]],
            0.2,
        );
        let votes = collect_votes(&image, &cam(), &forest).unwrap();
        assert_eq!(votes.len(), 1);
        assert_eq!(votes[0].len(), 1);
        assert_eq!(votes[0][0].position, Vec3::new(0.1, 0.0, 2.0));
        assert_eq!(votes[0][0].weight, 4.0);
    }

    #[test]
    fn votes_longer_than_lambda_are_dropped() {
        let image = single_pixel_image(2000);
        let forest = single_leaf_forest(
            vec![vec![RelativeVote { delta: Vec3::new(0.3, 0.0, 0.0), weight: 1.0 }]],
            0.2,
        );
        let votes = collect_votes(&image, &cam(), &forest).unwrap();
        assert!(votes[0].is_empty());
        // boundary: a vote of length exactly lambda is kept
        let forest = single_leaf_forest(
            vec![vec![RelativeVote { delta: Vec3::new(0.2, 0.0, 0.0), weight: 1.0 }]],
            0.2,
        );
        let votes = collect_votes(&image, &cam(), &forest).unwrap();
        assert_eq!(votes[0].len(), 1);
    }

    #[test]
    fn zero_delta_votes_at_the_pixel_itself() {
        let image = single_pixel_image(1500);
        let forest = single_leaf_forest(vec![vec![RelativeVote { delta: Vec3::ZERO, weight: 0.5 }]], 0.2);
        let votes = collect_votes(&image, &cam(), &forest).unwrap();
        let x_q = back_project(Pixel::new(2, 2), &image, &cam()).unwrap();
        assert_eq!(votes[0][0].position, x_q);
        assert!(votes[0][0].weight > 0.0);
    }

    #[test]
    fn collect_matches_naive_quadruple_loop() {
        // one split, two leaves, two joints
        let l0 = LeafModel::new(
            vec![
                vec![RelativeVote { delta: Vec3::new(0.05, 0.0, 0.0), weight: 0.6 }],
                vec![RelativeVote { delta: Vec3::new(0.0, -0.3, 0.1), weight: 0.4 }],
            ],
            2,
        )
        .unwrap();
        let l1 = LeafModel::new(
            vec![
                vec![
                    RelativeVote { delta: Vec3::new(-0.02, 0.01, 0.0), weight: 0.9 },
                    RelativeVote { delta: Vec3::new(0.5, 0.0, 0.0), weight: 0.1 },
                ],
                vec![],
            ],
            2,
        )
        .unwrap();
        let test = crate::depth::SplitTest { offset_u: [2.0, 0.0], offset_v: [0.0, 0.0], threshold_mm: 100.0 };
        let tree = Tree::new(vec![
            TreeNode::Split { test, left: 1, right: 2 },
            TreeNode::Leaf(l0),
            TreeNode::Leaf(l1),
        ])
        .unwrap();
        let forest = Forest::new(vec![tree], 2, 2, vec![0.35, 0.35], vec![0.05, 0.05]).unwrap();

        let mut depths = vec![DEFAULT_BACKGROUND_DEPTH_MM; 36];
        for (i, d) in depths.iter_mut().enumerate() {
            if i % 3 != 2 {
                *d = 1200 + 140 * (i as u16 % 7);
            }
        }
        let image = DepthImage::new(6, 6, DEFAULT_BACKGROUND_DEPTH_MM, depths).unwrap();

        let fast = collect_votes(&image, &cam(), &forest).unwrap();

        // independent quadruple loop: pixels -> trees -> joints -> votes
        let mut naive: Vec<Vec<(Vec3, f64)>> = vec![Vec::new(); 2];
        for q in image.foreground_pixels() {
            let x_q = back_project(q, &image, &cam()).unwrap();
            for tree in forest.trees() {
                let leaf = tree.descend(&image, q).unwrap();
                for joint in 0..2 {
                    for v in leaf.votes_for(joint) {
                        if v.delta.norm_sq() <= forest.lambda_m()[joint] * forest.lambda_m()[joint] {
                            naive[joint].push((x_q + v.delta, v.weight * (x_q.z * x_q.z)));
                        }
                    }
                }
            }
        }
        for joint in 0..2 {
            let mut a: Vec<(Vec3, f64)> = fast[joint].iter().map(|v| (v.position, v.weight)).collect();
            let mut b = naive[joint].clone();
            a.sort_by(|x, y| x.0.lex_cmp(&y.0).then(x.1.total_cmp(&y.1)));
            b.sort_by(|x, y| x.0.lex_cmp(&y.0).then(x.1.total_cmp(&y.1)));
            assert_eq!(a, b, "joint {joint}");
        }
    }

    #[test]
    fn subsample_passthrough_and_reduction() {
        let votes: Vec<AbsoluteVote> = (0..50)
            .map(|i| WeightedPoint::new(Vec3::new(i as f64, 0.0, 0.0), 1.0))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(subsample(&votes, 50, &mut rng), votes);
        assert_eq!(subsample(&votes, 64, &mut rng), votes);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reduced = subsample(&votes, 20, &mut rng);
        assert_eq!(reduced.len(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(subsample(&votes, 20, &mut rng), reduced);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(subsample(&votes, 1, &mut rng).len(), 1);
    }

    #[test]
    fn infer_single_pixel_single_vote() {
        let image = single_pixel_image(2000);
        let delta = Vec3::new(0.1, -0.05, 0.0);
        let forest = single_leaf_forest(
            vec![
                vec![RelativeVote { delta, weight: 1.0 }],
                vec![RelativeVote { delta: Vec3::ZERO, weight: 0.25 }],
            ],
            0.2,
        );
        let hyps = infer(&image, &cam(), &forest, &InferenceConfig::default()).unwrap();
        let x_q = back_project(Pixel::new(2, 2), &image, &cam()).unwrap();
        assert_eq!(hyps.len(), 2);
        assert_eq!(hyps[0].len(), 1);
        assert!(hyps[0][0].position.dist(x_q + delta) <= 1e-5);
        assert!(hyps[0][0].confidence > 0.0);
        assert_eq!(hyps[0][0].joint, 0);
        assert!(hyps[1][0].position.dist(x_q) <= 1e-5);
    }

    #[test]
    fn all_background_image_yields_empty_hypotheses() {
        let image = DepthImage::background(4, 4, DEFAULT_BACKGROUND_DEPTH_MM).unwrap();
        let forest = single_leaf_forest(vec![vec![RelativeVote { delta: Vec3::ZERO, weight: 1.0 }]], 0.2);
        let hyps = infer(&image, &cam(), &forest, &InferenceConfig::default()).unwrap();
        assert_eq!(hyps.len(), 1);
        assert!(hyps[0].is_empty());
    }

    #[test]
    fn adapted_weights_are_positive_on_foreground() {
        let image = single_pixel_image(800);
        let forest = single_leaf_forest(vec![vec![RelativeVote { delta: Vec3::ZERO, weight: 1e-12 }]], 0.2);
        let votes = collect_votes(&image, &cam(), &forest).unwrap();
        assert!(votes[0].iter().all(|v| v.weight > 0.0));
    }

    #[test]
    fn infer_is_deterministic_for_a_seed() {
        let mut depths = vec![DEFAULT_BACKGROUND_DEPTH_MM; 64];
        for (i, d) in depths.iter_mut().enumerate() {
            if i % 2 == 0 {
                *d = 1000 + 53 * (i as u16 % 9);
            }
        }
        let image = DepthImage::new(8, 8, DEFAULT_BACKGROUND_DEPTH_MM, depths).unwrap();
        let forest = single_leaf_forest(
            vec![vec![
                RelativeVote { delta: Vec3::new(0.05, 0.0, 0.0), weight: 0.7 },
                RelativeVote { delta: Vec3::new(-0.04, 0.02, 0.0), weight: 0.3 },
            ]],
            0.3,
        );
        let cfg = InferenceConfig { vote_subsample: 10, ..Default::default() };
        let a = infer(&image, &cam(), &forest, &cfg).unwrap();
        let b = infer(&image, &cam(), &forest, &cfg).unwrap();
        assert_eq!(a, b);
        let other_seed = InferenceConfig { seed: 3, ..cfg };
        let _ = infer(&image, &cam(), &forest, &other_seed).unwrap();
    }

    #[test]
    fn jsonl_round_trip() {
        let preds = vec![ImagePrediction {
            image: "img_00000.dph".into(),
            joints: vec![
                vec![Hypothesis { joint: 0, position: Vec3::new(0.1, 0.2, 2.0), confidence: 3.5 }],
                vec![],
            ],
            wall_ms: 12.5,
        }];
        let mut buf = Vec::new();
        write_predictions_jsonl(&mut buf, &preds, false).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains("wall_ms"));
        let back = read_predictions_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back[0].image, preds[0].image);
        assert_eq!(back[0].joints, preds[0].joints);
        assert_eq!(back[0].wall_ms, 0.0);

        let mut timed = Vec::new();
        write_predictions_jsonl(&mut timed, &preds, true).unwrap();
        assert!(String::from_utf8(timed).unwrap().contains("wall_ms"));
    }

    #[test]
    fn bad_override_lengths_are_config_errors() {
        let image = single_pixel_image(1000);
        let forest = single_leaf_forest(vec![vec![]], 0.2);
        let cfg = InferenceConfig { lambda_override: Some(vec![0.1, 0.2]), ..Default::default() };
        assert!(matches!(infer(&image, &cam(), &forest, &cfg), Err(Error::Config(_))));
    }
}
