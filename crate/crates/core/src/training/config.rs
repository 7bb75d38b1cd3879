//! Training configuration, loadable from a flat key-value TOML file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node error function used by the greedy split objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Size-scaled Shannon entropy of surrogate part labels.
    Classification,
    /// Sum over joints of within-set offset variance, restricted to offsets
    /// no longer than `inclusion_radius` meters.
    Regression { inclusion_radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Classification,
    Regression,
}

/// All knobs of forest training. The file form is flat `key = value` TOML;
/// unknown keys are rejected so typos fail loudly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub tree_count: usize,
    pub max_depth: usize,
    /// Probe-offset pairs sampled per node.
    pub candidate_tests: usize,
    /// Thresholds evaluated per candidate test, spread over the response range.
    pub candidate_thresholds: usize,
    pub min_samples_per_leaf: usize,
    /// Foreground pixels sampled per training image per tree.
    pub pixels_per_image: usize,
    pub objective: ObjectiveKind,
    /// Offset inclusion threshold rho (meters) for the regression objective.
    pub inclusion_radius: f64,
    /// Reservoir capacity per (leaf, joint) when collecting relative offsets.
    pub reservoir_capacity: usize,
    /// Mean-shift bandwidth (meters) for clustering leaf offsets.
    pub cluster_bandwidth: f64,
    /// K: votes kept per (leaf, joint).
    pub votes_per_leaf: usize,
    /// Radius (pixel-meters) of the disc probe offsets are drawn from.
    pub candidate_offset_radius: f64,
    pub seed: u64,
    /// Per-joint vote length thresholds (meters); default is a per-joint-class
    /// schedule for the 16-joint body, uniform 0.3 otherwise.
    pub lambda: Option<Vec<f64>>,
    /// Per-joint test-time aggregation bandwidths (meters); default 0.05.
    pub aggregation_bandwidth: Option<Vec<f64>>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            tree_count: 3,
            max_depth: 12,
            candidate_tests: 500,
            candidate_thresholds: 20,
            min_samples_per_leaf: 25,
            pixels_per_image: 300,
            objective: ObjectiveKind::Classification,
            inclusion_radius: 0.3,
            reservoir_capacity: 400,
            cluster_bandwidth: 0.005,
            votes_per_leaf: 2,
            candidate_offset_radius: 0.6,
            seed: 1,
            lambda: None,
            aggregation_bandwidth: None,
        }
    }
}

impl TrainingConfig {
    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::Classification => Objective::Classification,
            ObjectiveKind::Regression => Objective::Regression { inclusion_radius: self.inclusion_radius },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("tree_count", self.tree_count),
            ("candidate_tests", self.candidate_tests),
            ("candidate_thresholds", self.candidate_thresholds),
            ("min_samples_per_leaf", self.min_samples_per_leaf),
            ("pixels_per_image", self.pixels_per_image),
            ("reservoir_capacity", self.reservoir_capacity),
            ("votes_per_leaf", self.votes_per_leaf),
        ];
        for (name, value) in positive_counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, value) in [
            ("inclusion_radius", self.inclusion_radius),
            ("cluster_bandwidth", self.cluster_bandwidth),
            ("candidate_offset_radius", self.candidate_offset_radius),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        for (name, list) in [("lambda", &self.lambda), ("aggregation_bandwidth", &self.aggregation_bandwidth)] {
            if let Some(values) = list {
                if values.is_empty() || values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::Config(format!("{name} entries must be positive")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainingConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Effective per-joint lambda vector for a `joint_count`-joint skeleton.
    pub fn resolve_lambda(&self, joint_count: usize) -> Result<Vec<f64>> {
        resolve_per_joint(&self.lambda, joint_count, "lambda", || default_lambda_m(joint_count))
    }

    /// Effective per-joint aggregation bandwidth vector.
    pub fn resolve_aggregation_bandwidth(&self, joint_count: usize) -> Result<Vec<f64>> {
        resolve_per_joint(&self.aggregation_bandwidth, joint_count, "aggregation_bandwidth", || {
            vec![DEFAULT_AGGREGATION_BANDWIDTH_M; joint_count]
        })
    }
}

pub const DEFAULT_AGGREGATION_BANDWIDTH_M: f64 = 0.05;

fn resolve_per_joint(
    configured: &Option<Vec<f64>>,
    joint_count: usize,
    name: &str,
    default: impl FnOnce() -> Vec<f64>,
) -> Result<Vec<f64>> {
    match configured {
        None => Ok(default()),
        Some(values) if values.len() == 1 => Ok(vec![values[0]; joint_count]),
        Some(values) if values.len() == joint_count => Ok(values.clone()),
        Some(values) => Err(Error::Config(format!(
            "{name} has {} entries, expected 1 or {joint_count}",
            values.len()
        ))),
    }
}

/// Default vote length thresholds: tight on extremities, loose on the torso,
/// matching the 16-joint body layout of `synthdata`. Other joint counts get a
/// uniform middle value.
pub fn default_lambda_m(joint_count: usize) -> Vec<f64> {
    if joint_count == crate::synthdata::JOINT_COUNT {
        crate::synthdata::BodyModel::default_lambda_m().to_vec()
    } else {
        vec![0.3; joint_count]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainingConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_flat_toml() {
        let cfg = TrainingConfig::from_toml_str(
            r#"
            # desk-scale run
            tree_count = 2
            max_depth = 6
            objective = "regression"
            inclusion_radius = 0.1
            lambda = [0.2]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.tree_count, 2);
        assert_eq!(cfg.max_depth, 6);
        assert_eq!(cfg.objective(), Objective::Regression { inclusion_radius: 0.1 });
        assert_eq!(cfg.resolve_lambda(4).unwrap(), vec![0.2; 4]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainingConfig::from_toml_str("tre_count = 3").is_err());
        assert!(TrainingConfig::from_toml_str("tree_count = 0").is_err());
        assert!(TrainingConfig::from_toml_str("cluster_bandwidth = -0.5").is_err());
        assert!(TrainingConfig::from_toml_str("objective = \"entropy\"").is_err());
    }

    #[test]
    fn lambda_length_mismatch_is_config_error() {
        let cfg = TrainingConfig { lambda: Some(vec![0.1, 0.2]), ..Default::default() };
        assert!(cfg.resolve_lambda(16).is_err());
    }
}
