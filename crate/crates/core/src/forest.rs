//! Decision trees with per-joint relative-vote leaves, and the PFR1 model file.
//!
//! Trees are flat arrays of nodes indexed from the root at 0, so traversal is a
//! tight loop over indices and serialization is a straight dump of the array.
//! A model file is self-contained: it carries the joint count, the vote cap K,
//! and the per-joint vote length thresholds and aggregation bandwidths.

use std::fs;
use std::path::Path;

use crate::depth::{branch_for_response, feature_response_at, Branch, ByteReader, DepthImage, SplitTest};
use crate::error::{Error, Result};
use crate::geom::{Pixel, Vec3};

const PFR1_MAGIC: &[u8; 4] = b"PFR1";
const PFR1_VERSION: u32 = 1;

/// A stored leaf vote: a 3D offset toward one joint and its confidence weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeVote {
    pub delta: Vec3,
    pub weight: f64,
}

/// Per-joint vote lists held by one leaf. Each list has at most K entries
/// sorted by descending weight; a list may be empty when the leaf collected no
/// reliable offsets for that joint.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LeafModel {
    votes: Vec<Vec<RelativeVote>>,
}

impl LeafModel {
    pub fn empty(joint_count: usize) -> Self {
        LeafModel { votes: vec![Vec::new(); joint_count] }
    }

    pub fn new(votes: Vec<Vec<RelativeVote>>, max_votes: usize) -> Result<Self> {
        for (joint, list) in votes.iter().enumerate() {
            if list.len() > max_votes {
                return Err(Error::invalid(
                    "leaf model",
                    format!("joint {joint} has {} votes, cap is {max_votes}", list.len()),
                ));
            }
            for pair in list.windows(2) {
                if pair[1].weight > pair[0].weight {
                    return Err(Error::invalid("leaf model", format!("joint {joint} votes not sorted by weight")));
                }
            }
            if let Some(v) = list.iter().find(|v| !(v.weight >= 0.0) || !v.delta.is_finite()) {
                return Err(Error::invalid(
                    "leaf model",
                    format!("joint {joint} vote ({:?}, {}) not finite/nonnegative", v.delta, v.weight),
                ));
            }
        }
        Ok(LeafModel { votes })
    }

    pub fn joint_count(&self) -> usize {
        self.votes.len()
    }

    pub fn votes_for(&self, joint: usize) -> &[RelativeVote] {
        &self.votes[joint]
    }

    pub fn max_votes_per_joint(&self) -> usize {
        self.votes.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Split { test: SplitTest, left: u32, right: u32 },
    Leaf(LeafModel),
}

/// A single-rooted full binary tree stored as a flat node array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    /// Validates that node 0 roots a full binary tree: every node reachable
    /// exactly once, no dangling child indices, no cycles, no orphans.
    pub fn new(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::MalformedTree("empty node array".into()));
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![0u32];
        let mut visited = 0usize;
        while let Some(i) = stack.pop() {
            let slot = seen
                .get_mut(i as usize)
                .ok_or_else(|| Error::MalformedTree(format!("child index {i} out of range")))?;
            if *slot {
                return Err(Error::MalformedTree(format!("node {i} reachable twice")));
            }
            *slot = true;
            visited += 1;
            if let TreeNode::Split { left, right, .. } = &nodes[i as usize] {
                stack.push(*left);
                stack.push(*right);
            }
        }
        if visited != nodes.len() {
            return Err(Error::MalformedTree(format!(
                "{} of {} nodes unreachable from the root",
                nodes.len() - visited,
                nodes.len()
            )));
        }
        Ok(Tree { nodes })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf(_))).count()
    }

    /// Number of split levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: u32) -> usize {
            match &nodes[i as usize] {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Walks from the root, branching on each split test, to the leaf for `q`.
    pub fn descend(&self, image: &DepthImage, q: Pixel) -> Result<&LeafModel> {
        let depth_mm = image.foreground_depth_mm(q)?;
        Ok(self.nodes[self.leaf_index(image, q, depth_mm)? as usize].as_leaf())
    }

    /// Index of the leaf reached by `q`, given its (foreground) depth.
    pub(crate) fn leaf_index(&self, image: &DepthImage, q: Pixel, depth_mm: u16) -> Result<u32> {
        let mut i = 0u32;
        loop {
            match self.nodes.get(i as usize) {
                Some(TreeNode::Leaf(_)) => return Ok(i),
                Some(TreeNode::Split { test, left, right }) => {
                    let response = feature_response_at(image, q, depth_mm, test);
                    i = match branch_for_response(response, test.threshold_mm) {
                        Branch::Left => *left,
                        Branch::Right => *right,
                    };
                }
                None => return Err(Error::MalformedTree(format!("dangling node index {i}"))),
            }
        }
    }
}

impl TreeNode {
    pub(crate) fn as_leaf(&self) -> &LeafModel {
        match self {
            TreeNode::Leaf(m) => m,
            TreeNode::Split { .. } => unreachable!("leaf_index returns leaf indices"),
        }
    }
}

/// An ensemble of trees plus the per-joint constants inference needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    joint_count: usize,
    votes_per_leaf: usize,
    lambda_m: Vec<f64>,
    bandwidth_m: Vec<f64>,
}

impl Forest {
    pub fn new(
        trees: Vec<Tree>,
        joint_count: usize,
        votes_per_leaf: usize,
        lambda_m: Vec<f64>,
        bandwidth_m: Vec<f64>,
    ) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::invalid("forest", "joint count must be positive"));
        }
        if lambda_m.len() != joint_count || bandwidth_m.len() != joint_count {
            return Err(Error::invalid(
                "forest",
                format!(
                    "lambda/bandwidth lengths ({}, {}) must equal joint count {joint_count}",
                    lambda_m.len(),
                    bandwidth_m.len()
                ),
            ));
        }
        if lambda_m.iter().chain(&bandwidth_m).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("forest", "lambda and bandwidth entries must be positive"));
        }
        for (t, tree) in trees.iter().enumerate() {
            for node in tree.nodes() {
                if let TreeNode::Leaf(model) = node {
                    if model.joint_count() != joint_count {
                        return Err(Error::invalid(
                            "forest",
                            format!("tree {t} leaf has {} joints, forest has {joint_count}", model.joint_count()),
                        ));
                    }
                    if model.max_votes_per_joint() > votes_per_leaf {
                        return Err(Error::invalid(
                            "forest",
                            format!("tree {t} leaf exceeds {votes_per_leaf} votes per joint"),
                        ));
                    }
                }
            }
        }
        Ok(Forest { trees, joint_count, votes_per_leaf, lambda_m, bandwidth_m })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn votes_per_leaf(&self) -> usize {
        self.votes_per_leaf
    }

    /// Per-joint vote length thresholds (meters): longer relative votes are
    /// discarded at test time.
    pub fn lambda_m(&self) -> &[f64] {
        &self.lambda_m
    }

    /// Per-joint aggregation bandwidths (meters) for the test-time vote density.
    pub fn bandwidth_m(&self) -> &[f64] {
        &self.bandwidth_m
    }

    /// Deterministic PFR1 bytes; the layout is documented in docs/FORMATS.md.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PFR1_MAGIC);
        out.extend_from_slice(&PFR1_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.joint_count as u32).to_le_bytes());
        out.extend_from_slice(&(self.votes_per_leaf as u32).to_le_bytes());
        for v in &self.lambda_m {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.bandwidth_m {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        for tree in &self.trees {
            out.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
            for node in &tree.nodes {
                match node {
                    TreeNode::Split { test, left, right } => {
                        out.push(0);
                        out.extend_from_slice(&test.offset_u[0].to_le_bytes());
                        out.extend_from_slice(&test.offset_u[1].to_le_bytes());
                        out.extend_from_slice(&test.offset_v[0].to_le_bytes());
                        out.extend_from_slice(&test.offset_v[1].to_le_bytes());
                        out.extend_from_slice(&test.threshold_mm.to_le_bytes());
                        out.extend_from_slice(&left.to_le_bytes());
                        out.extend_from_slice(&right.to_le_bytes());
                    }
                    TreeNode::Leaf(model) => {
                        out.push(1);
                        for joint in 0..self.joint_count {
                            let votes = model.votes_for(joint);
                            out.extend_from_slice(&(votes.len() as u16).to_le_bytes());
                            for v in votes {
                                out.extend_from_slice(&v.delta.x.to_le_bytes());
                                out.extend_from_slice(&v.delta.y.to_le_bytes());
                                out.extend_from_slice(&v.delta.z.to_le_bytes());
                                out.extend_from_slice(&v.weight.to_le_bytes());
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "PFR1");
        if r.take(4)? != PFR1_MAGIC {
            return Err(Error::corrupt("PFR1", "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != PFR1_VERSION {
            return Err(Error::corrupt("PFR1", format!("unsupported version {version}")));
        }
        let joint_count = r.u32()? as usize;
        let votes_per_leaf = r.u32()? as usize;
        if joint_count == 0 || joint_count > 4096 {
            return Err(Error::corrupt("PFR1", format!("implausible joint count {joint_count}")));
        }
        let mut lambda_m = Vec::with_capacity(joint_count);
        for _ in 0..joint_count {
            lambda_m.push(r.f64()?);
        }
        let mut bandwidth_m = Vec::with_capacity(joint_count);
        for _ in 0..joint_count {
            bandwidth_m.push(r.f64()?);
        }
        let tree_count = r.u32()? as usize;
        let mut trees = Vec::with_capacity(tree_count.min(1024));
        for _ in 0..tree_count {
            let node_count = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(node_count.min(1 << 20));
            for _ in 0..node_count {
                match r.u8()? {
                    0 => {
                        let test = SplitTest {
                            offset_u: [r.f32()?, r.f32()?],
                            offset_v: [r.f32()?, r.f32()?],
                            threshold_mm: r.f32()?,
                        };
                        let left = r.u32()?;
                        let right = r.u32()?;
                        nodes.push(TreeNode::Split { test, left, right });
                    }
                    1 => {
                        let mut votes = Vec::with_capacity(joint_count);
                        for _ in 0..joint_count {
                            let n = r.u16()? as usize;
                            let mut list = Vec::with_capacity(n);
                            for _ in 0..n {
                                let delta = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
                                let weight = r.f64()?;
                                list.push(RelativeVote { delta, weight });
                            }
                            votes.push(list);
                        }
                        let model = LeafModel::new(votes, votes_per_leaf)
                            .map_err(|e| Error::corrupt("PFR1", e.to_string()))?;
                        nodes.push(TreeNode::Leaf(model));
                    }
                    tag => return Err(Error::corrupt("PFR1", format!("unknown node tag {tag}"))),
                }
            }
            trees.push(Tree::new(nodes).map_err(|e| Error::corrupt("PFR1", e.to_string()))?);
        }
        r.expect_end()?;
        Forest::new(trees, joint_count, votes_per_leaf, lambda_m, bandwidth_m)
            .map_err(|e| Error::corrupt("PFR1", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::deserialize(&bytes)
    }
}
