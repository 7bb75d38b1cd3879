//! Per-joint average precision and the mean across joints (mAP).
//!
//! Hypotheses for a joint are pooled across images, ranked globally by
//! descending confidence (ties broken by image index, then lexicographic
//! position), and greedily matched: a hypothesis is a true positive iff it
//! lies within the true-positive radius (closed ball) of its image's ground
//! truth for that joint and that ground truth is still unmatched. AP is the
//! interpolation-free sum of precision at each true-positive rank divided by
//! the number of ground truths.
//!
//! Ground truths can be excluded from scoring (for example occluded joints
//! when `count_occluded` is off): hypotheses landing on an excluded ground
//! truth are dropped from the ranking rather than counted as false positives.

use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::inference::ImagePrediction;

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    /// True-positive radius D in meters (closed ball).
    pub true_positive_radius: f64,
    /// When false, occluded ground truths are excluded from scoring.
    pub count_occluded: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { true_positive_radius: 0.1, count_occluded: true }
    }
}

/// Ground truth for one image, aligned with predictions by image id.
#[derive(Clone, Debug)]
pub struct EvalGroundTruth {
    pub image: String,
    pub joints: Vec<Vec3>,
    pub visibility: Vec<bool>,
}

pub fn ground_truth_from_dataset(dataset: &Dataset) -> Result<Vec<EvalGroundTruth>> {
    (0..dataset.len())
        .map(|i| {
            let sidecar = dataset.load_sidecar(i)?;
            Ok(EvalGroundTruth {
                image: dataset.image_id(i).to_string(),
                joints: sidecar.joints,
                visibility: sidecar.visibility,
            })
        })
        .collect()
}

/// One hypothesis for a joint, to be ranked across images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedHypothesis {
    pub image_index: usize,
    pub position: Vec3,
    pub confidence: f64,
}

/// A ranked hypothesis after matching; `matched` marks true positives.
#[derive(Clone, Copy, Debug)]
pub struct LabeledHypothesis {
    pub image_index: usize,
    pub position: Vec3,
    pub confidence: f64,
    pub matched: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct JointEval {
    pub joint: usize,
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
    pub ground_truths: usize,
    pub pr_curve: Vec<PrPoint>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_joint: Vec<JointEval>,
    pub map: f64,
    pub warnings: Vec<String>,
}

fn rank(hypotheses: &mut [RankedHypothesis]) {
    hypotheses.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.image_index.cmp(&b.image_index))
            .then(a.position.lex_cmp(&b.position))
    });
}

/// Sorts hypotheses into rank order and greedily labels them against one
/// ground truth per image (`None` = no ground truth there). Returns the
/// ranking and a true-positive flag per rank.
pub fn match_hypotheses(
    mut hypotheses: Vec<RankedHypothesis>,
    ground_truths: &[Option<Vec3>],
    radius: f64,
) -> (Vec<RankedHypothesis>, Vec<bool>) {
    rank(&mut hypotheses);
    let mut matched = vec![false; ground_truths.len()];
    let labels = hypotheses
        .iter()
        .map(|h| match ground_truths.get(h.image_index).copied().flatten() {
            Some(gt) if gt.dist(h.position) <= radius && !matched[h.image_index] => {
                matched[h.image_index] = true;
                true
            }
            _ => false,
        })
        .collect();
    (hypotheses, labels)
}

/// Area under the precision-recall curve by direct summation:
/// `sum over true-positive ranks of (precision at that rank) / total_ground_truths`.
/// Zero ground truths define AP as 0.
pub fn average_precision(labels: &[bool], total_ground_truths: usize) -> f64 {
    if total_ground_truths == 0 {
        return 0.0;
    }
    let mut true_positives = 0usize;
    let mut sum = 0.0;
    for (rank, &is_tp) in labels.iter().enumerate() {
        if is_tp {
            true_positives += 1;
            sum += true_positives as f64 / (rank + 1) as f64;
        }
    }
    sum / total_ground_truths as f64
}

/// Ranks and labels all hypotheses for `joint`. Ground truths of images where
/// `counted` is false get the ignore treatment. Returns the labeled ranking
/// and the number of counted ground truths.
pub fn match_joint_hypotheses(
    predictions: &[ImagePrediction],
    ground_truth: &[EvalGroundTruth],
    joint: usize,
    radius: f64,
    counted: impl Fn(usize) -> bool,
) -> (Vec<LabeledHypothesis>, usize) {
    let mut pool: Vec<RankedHypothesis> = Vec::new();
    for (image_index, prediction) in predictions.iter().enumerate() {
        for h in &prediction.joints[joint] {
            pool.push(RankedHypothesis { image_index, position: h.position, confidence: h.confidence });
        }
    }
    rank(&mut pool);

    let mut matched = vec![false; ground_truth.len()];
    let mut labeled = Vec::with_capacity(pool.len());
    for h in pool {
        let gt = ground_truth[h.image_index].joints[joint];
        let close = gt.dist(h.position) <= radius;
        if close && !counted(h.image_index) {
            continue; // ignored ground truth absorbs the hypothesis
        }
        let is_tp = close && !matched[h.image_index];
        if is_tp {
            matched[h.image_index] = true;
        }
        labeled.push(LabeledHypothesis {
            image_index: h.image_index,
            position: h.position,
            confidence: h.confidence,
            matched: is_tp,
        });
    }
    let total = (0..ground_truth.len()).filter(|&i| counted(i)).count();
    (labeled, total)
}

/// Scores predictions against ground truth: AP per joint and their mean.
pub fn evaluate(
    predictions: &[ImagePrediction],
    ground_truth: &[EvalGroundTruth],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::invalid(
            "evaluation input",
            format!("{} predictions vs {} ground-truth images", predictions.len(), ground_truth.len()),
        ));
    }
    let mut joint_count = None;
    for (p, gt) in predictions.iter().zip(ground_truth) {
        if p.image != gt.image {
            return Err(Error::invalid(
                "evaluation input",
                format!("image id mismatch: prediction '{}' vs ground truth '{}'", p.image, gt.image),
            ));
        }
        let jc = *joint_count.get_or_insert(gt.joints.len());
        if p.joints.len() != jc || gt.joints.len() != jc {
            return Err(Error::JointCountMismatch { forest: p.joints.len(), data: gt.joints.len() });
        }
    }
    let joint_count = joint_count.unwrap_or(0);

    let mut per_joint = Vec::with_capacity(joint_count);
    let mut warnings = Vec::new();
    for joint in 0..joint_count {
        let counted =
            |i: usize| config.count_occluded || ground_truth[i].visibility.get(joint).copied().unwrap_or(true);
        let (labeled, total) = match_joint_hypotheses(
            predictions,
            ground_truth,
            joint,
            config.true_positive_radius,
            counted,
        );
        if total == 0 {
            warnings.push(format!("joint {joint}: zero ground truths; AP defined as 0"));
        }
        let labels: Vec<bool> = labeled.iter().map(|l| l.matched).collect();
        let ap = average_precision(&labels, total);

        let mut tp = 0usize;
        let mut pr_curve = Vec::with_capacity(labeled.len());
        for (idx, l) in labeled.iter().enumerate() {
            if l.matched {
                tp += 1;
            }
            pr_curve.push(PrPoint {
                confidence: l.confidence,
                precision: tp as f64 / (idx + 1) as f64,
                recall: if total == 0 { 0.0 } else { tp as f64 / total as f64 },
            });
        }
        per_joint.push(JointEval {
            joint,
            ap,
            true_positives: tp,
            false_positives: labeled.len() - tp,
            missed: total - tp.min(total),
            ground_truths: total,
            pr_curve,
        });
    }
    let map = if per_joint.is_empty() {
        0.0
    } else {
        per_joint.iter().map(|j| j.ap).sum::<f64>() / per_joint.len() as f64
    };
    Ok(EvalReport { per_joint, map, warnings })
}

/// Plain-text summary table, one row per joint plus the mAP line.
pub fn format_report_table(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let named = report.per_joint.len() == crate::synthdata::JOINT_COUNT;
    writeln!(out, "{:<12} {:>7} {:>6} {:>6} {:>7} {:>7}", "joint", "AP", "TP", "FP", "missed", "GT").unwrap();
    for j in &report.per_joint {
        let name = if named {
            crate::synthdata::BodyModel::joint_name(j.joint).to_string()
        } else {
            format!("joint_{}", j.joint)
        };
        writeln!(
            out,
            "{:<12} {:>7.4} {:>6} {:>6} {:>7} {:>7}",
            name, j.ap, j.true_positives, j.false_positives, j.missed, j.ground_truths
        )
        .unwrap();
    }
    writeln!(out, "mAP = {:.4}", report.map).unwrap();
    out
}

/// PR curve of one joint as CSV (`rank,confidence,precision,recall`).
pub fn pr_curve_csv(joint: &JointEval) -> String {
    use std::fmt::Write;
    let mut out = String::from("rank,confidence,precision,recall\n");
    for (i, p) in joint.pr_curve.iter().enumerate() {
        writeln!(out, "{},{},{},{}", i + 1, p.confidence, p.precision, p.recall).unwrap();
    }
    out
}
