//! Synthetic labeled depth images: an articulated 16-joint capsule body posed
//! by scenario-specific angle ranges, rendered through the pinhole model with
//! ground-truth joint positions and per-joint visibility flags.
//!
//! Camera space: x right, y down, z away from the camera; the body stands
//! "up" along -y and faces the camera. All randomness flows from explicit
//! seeds; a dataset is a pure function of (model, config, seed).

mod render;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use render::{apply_depth_noise, render_capsules, Capsule};

use crate::dataset::{write_manifest, ManifestEntry, Sidecar};
use crate::depth::{project, CameraIntrinsics, DepthImage};
use crate::error::{Error, Result};
use crate::exec;
use crate::geom::{Pixel, Vec3};

pub const JOINT_COUNT: usize = 16;

/// Joint indices of the fixed 16-joint skeleton.
pub mod joints {
    pub const HEAD: usize = 0;
    pub const NECK: usize = 1;
    pub const L_SHOULDER: usize = 2;
    pub const R_SHOULDER: usize = 3;
    pub const L_ELBOW: usize = 4;
    pub const R_ELBOW: usize = 5;
    pub const L_WRIST: usize = 6;
    pub const R_WRIST: usize = 7;
    pub const SPINE: usize = 8;
    pub const PELVIS: usize = 9;
    pub const L_HIP: usize = 10;
    pub const R_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const R_KNEE: usize = 13;
    pub const L_ANKLE: usize = 14;
    pub const R_ANKLE: usize = 15;
}

const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "head", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "spine", "pelvis", "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
];

/// Coarse joint grouping used for per-class defaults and occlusion analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JointClass {
    Head,
    Torso,
    Arm,
    Leg,
}

/// The capsule body: a tree-structured skeleton rooted at the pelvis with
/// per-bone capsule radii.
#[derive(Clone, Debug)]
pub struct BodyModel {
    parent: [Option<usize>; JOINT_COUNT],
    rest_offset: [Vec3; JOINT_COUNT],
    /// FK evaluation order: every parent precedes its children.
    order: [usize; JOINT_COUNT],
    bones: Vec<(usize, usize, f64)>,
    surface_radius: [f64; JOINT_COUNT],
}

impl BodyModel {
    pub fn default_adult() -> Self {
        use joints::*;
        let mut parent = [None; JOINT_COUNT];
        let mut rest = [Vec3::ZERO; JOINT_COUNT];
        let mut set = |j: usize, p: Option<usize>, x: f64, y: f64, z: f64| {
            parent[j] = p;
            rest[j] = Vec3::new(x, y, z);
        };
        set(PELVIS, None, 0.0, 0.0, 0.0);
        set(SPINE, Some(PELVIS), 0.0, -0.26, 0.0);
        set(NECK, Some(SPINE), 0.0, -0.24, 0.0);
        set(HEAD, Some(NECK), 0.0, -0.18, 0.0);
        set(L_SHOULDER, Some(NECK), 0.19, 0.02, 0.0);
        set(R_SHOULDER, Some(NECK), -0.19, 0.02, 0.0);
        set(L_ELBOW, Some(L_SHOULDER), 0.28, 0.0, 0.0);
        set(R_ELBOW, Some(R_SHOULDER), -0.28, 0.0, 0.0);
        set(L_WRIST, Some(L_ELBOW), 0.26, 0.0, 0.0);
        set(R_WRIST, Some(R_ELBOW), -0.26, 0.0, 0.0);
        set(L_HIP, Some(PELVIS), 0.11, 0.04, 0.0);
        set(R_HIP, Some(PELVIS), -0.11, 0.04, 0.0);
        set(L_KNEE, Some(L_HIP), 0.0, 0.42, 0.0);
        set(R_KNEE, Some(R_HIP), 0.0, 0.42, 0.0);
        set(L_ANKLE, Some(L_KNEE), 0.0, 0.40, 0.0);
        set(R_ANKLE, Some(R_KNEE), 0.0, 0.40, 0.0);

        let bones = vec![
            (PELVIS, SPINE, 0.105),
            (SPINE, NECK, 0.095),
            (NECK, HEAD, 0.045),
            (HEAD, HEAD, 0.10),
            (NECK, L_SHOULDER, 0.055),
            (NECK, R_SHOULDER, 0.055),
            (L_SHOULDER, L_ELBOW, 0.042),
            (R_SHOULDER, R_ELBOW, 0.042),
            (L_ELBOW, L_WRIST, 0.036),
            (R_ELBOW, R_WRIST, 0.036),
            (L_WRIST, L_WRIST, 0.042),
            (R_WRIST, R_WRIST, 0.042),
            (PELVIS, L_HIP, 0.075),
            (PELVIS, R_HIP, 0.075),
            (L_HIP, L_KNEE, 0.062),
            (R_HIP, R_KNEE, 0.062),
            (L_KNEE, L_ANKLE, 0.05),
            (R_KNEE, R_ANKLE, 0.05),
            (L_ANKLE, L_ANKLE, 0.048),
            (R_ANKLE, R_ANKLE, 0.048),
        ];
        let mut surface_radius = [0.0f64; JOINT_COUNT];
        for &(a, b, r) in &bones {
            surface_radius[a] = surface_radius[a].max(r);
            surface_radius[b] = surface_radius[b].max(r);
        }
        let order = [
            PELVIS, SPINE, NECK, HEAD, L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST, R_WRIST,
            L_HIP, R_HIP, L_KNEE, R_KNEE, L_ANKLE, R_ANKLE,
        ];
        BodyModel { parent, rest_offset: rest, order, bones, surface_radius }
    }

    pub fn joint_name(j: usize) -> &'static str {
        JOINT_NAMES[j]
    }

    pub fn joint_class(j: usize) -> JointClass {
        use joints::*;
        match j {
            HEAD | NECK => JointClass::Head,
            SPINE | PELVIS | L_HIP | R_HIP => JointClass::Torso,
            L_SHOULDER | R_SHOULDER | L_ELBOW | R_ELBOW | L_WRIST | R_WRIST => JointClass::Arm,
            _ => JointClass::Leg,
        }
    }

    /// Radius of the thickest capsule ending at each joint: the expected gap
    /// between a visible joint's depth and the rendered surface in front of it.
    pub fn surface_radius(&self, j: usize) -> f64 {
        self.surface_radius[j]
    }

    /// Default per-joint vote length thresholds: tight for extremities that
    /// only nearby pixels predict well, loose for torso joints.
    pub fn default_lambda_m() -> [f64; JOINT_COUNT] {
        use joints::*;
        let mut lambda = [0.3; JOINT_COUNT];
        lambda[HEAD] = 0.20;
        lambda[NECK] = 0.25;
        lambda[L_SHOULDER] = 0.25;
        lambda[R_SHOULDER] = 0.25;
        lambda[L_ELBOW] = 0.15;
        lambda[R_ELBOW] = 0.15;
        lambda[L_WRIST] = 0.10;
        lambda[R_WRIST] = 0.10;
        lambda[SPINE] = 0.30;
        lambda[PELVIS] = 0.40;
        lambda[L_HIP] = 0.30;
        lambda[R_HIP] = 0.30;
        lambda[L_KNEE] = 0.15;
        lambda[R_KNEE] = 0.15;
        lambda[L_ANKLE] = 0.10;
        lambda[R_ANKLE] = 0.10;
        lambda
    }

    /// World-space capsules for a posed skeleton.
    pub fn capsules(&self, joint_positions: &[Vec3]) -> Vec<Capsule> {
        self.bones
            .iter()
            .map(|&(a, b, radius)| Capsule { a: joint_positions[a], b: joint_positions[b], radius })
            .collect()
    }
}

/// Joint angles: a root pose plus per-joint XYZ Euler rotations (radians),
/// each applied in the parent's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseAngles {
    pub root_position: Vec3,
    pub root_rotation: [f64; 3],
    pub joint_rotation: Vec<[f64; 3]>,
}

/// A sampled pose with its forward-kinematics joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub angles: PoseAngles,
    pub joints: Vec<Vec3>,
}

/// Ground-truth joint positions plus per-joint visibility from the renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Vec3>,
    pub visible: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
struct Mat3 {
    m: [[f64; 3]; 3],
}

impl Mat3 {
    const IDENTITY: Mat3 = Mat3 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    fn rot_x(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3 { m: [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]] }
    }

    fn rot_y(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3 { m: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]] }
    }

    fn rot_z(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3 { m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Rz * Ry * Rx: the x rotation is applied first.
    fn from_euler(angles: [f64; 3]) -> Mat3 {
        if angles == [0.0; 3] {
            return Mat3::IDENTITY;
        }
        Mat3::rot_z(angles[2]).mul(&Mat3::rot_y(angles[1])).mul(&Mat3::rot_x(angles[0]))
    }

    fn mul(&self, o: &Mat3) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat3 { m }
    }

    fn apply(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }
}

/// Joint positions for a set of angles: each joint sits at its parent plus the
/// parent's accumulated rotation applied to the rest offset.
pub fn forward_kinematics(model: &BodyModel, angles: &PoseAngles) -> Vec<Vec3> {
    let mut positions = vec![Vec3::ZERO; JOINT_COUNT];
    let mut rotations = vec![Mat3::IDENTITY; JOINT_COUNT];
    for &j in &model.order {
        match model.parent[j] {
            None => {
                positions[j] = angles.root_position;
                rotations[j] = Mat3::from_euler(angles.root_rotation)
                    .mul(&Mat3::from_euler(angles.joint_rotation[j]));
            }
            Some(p) => {
                positions[j] = positions[p] + rotations[p].apply(model.rest_offset[j]);
                rotations[j] = rotations[p].mul(&Mat3::from_euler(angles.joint_rotation[j]));
            }
        }
    }
    positions
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Standing,
    ArmsRaised,
    /// Arms swung down and across the body in front of the hips, occluding
    /// torso joints from the camera.
    ArmsCrossed,
    SideView,
    Random,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::Standing, Scenario::ArmsRaised, Scenario::ArmsCrossed, Scenario::SideView, Scenario::Random];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Standing => "standing",
            Scenario::ArmsRaised => "arms-raised",
            Scenario::ArmsCrossed => "arms-crossed",
            Scenario::SideView => "side-view",
            Scenario::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{name}'")))
    }

    /// Angle ranges for this scenario; the center of `Standing` is the
    /// canonical T-pose.
    pub fn limits(self) -> PoseLimits {
        use joints::*;
        let mut l = PoseLimits::rest();
        match self {
            Scenario::Standing => {
                l.widen_common();
            }
            Scenario::ArmsRaised => {
                l.widen_common();
                l.joint_center[L_SHOULDER] = [0.0, 0.15, -1.1];
                l.joint_center[R_SHOULDER] = [0.0, -0.15, 1.1];
                l.joint_halfwidth[L_SHOULDER] = [0.1, 0.2, 0.25];
                l.joint_halfwidth[R_SHOULDER] = [0.1, 0.2, 0.25];
                l.joint_center[L_ELBOW] = [0.0, 0.0, -0.25];
                l.joint_center[R_ELBOW] = [0.0, 0.0, 0.25];
                l.joint_halfwidth[L_ELBOW] = [0.0, 0.2, 0.25];
                l.joint_halfwidth[R_ELBOW] = [0.0, 0.2, 0.25];
            }
            Scenario::ArmsCrossed => {
                // arms hang forward-and-across so the forearms pass in front
                // of the pelvis and hips
                l.joint_center[L_SHOULDER] = [0.0, 0.25, 1.95];
                l.joint_center[R_SHOULDER] = [0.0, -0.25, -1.95];
                l.joint_halfwidth[L_SHOULDER] = [0.05, 0.12, 0.15];
                l.joint_halfwidth[R_SHOULDER] = [0.05, 0.12, 0.15];
                l.joint_center[L_ELBOW] = [0.0, 0.3, 0.25];
                l.joint_center[R_ELBOW] = [0.0, -0.3, -0.25];
                l.joint_halfwidth[L_ELBOW] = [0.0, 0.25, 0.2];
                l.joint_halfwidth[R_ELBOW] = [0.0, 0.25, 0.2];
                l.root_rotation_halfwidth = [0.04, 0.15, 0.04];
                l.joint_halfwidth[SPINE] = [0.05, 0.08, 0.05];
                l.joint_halfwidth[NECK] = [0.1, 0.1, 0.1];
                l.joint_center[L_KNEE] = [0.1, 0.0, 0.0];
                l.joint_center[R_KNEE] = [0.1, 0.0, 0.0];
                l.joint_halfwidth[L_KNEE] = [0.1, 0.0, 0.0];
                l.joint_halfwidth[R_KNEE] = [0.1, 0.0, 0.0];
                l.joint_halfwidth[L_HIP] = [0.08, 0.0, 0.08];
                l.joint_halfwidth[R_HIP] = [0.08, 0.0, 0.08];
            }
            Scenario::SideView => {
                l.widen_common();
                l.root_rotation_center = [0.0, std::f64::consts::FRAC_PI_2, 0.0];
                l.root_rotation_halfwidth = [0.06, 0.3, 0.06];
            }
            Scenario::Random => {
                l.widen_common();
                l.root_rotation_halfwidth = [0.1, 1.2, 0.1];
                for j in [L_SHOULDER, R_SHOULDER] {
                    l.joint_halfwidth[j] = [0.3, 0.5, 0.9];
                }
                for j in [L_ELBOW, R_ELBOW] {
                    l.joint_halfwidth[j] = [0.2, 0.5, 0.5];
                }
                for j in [L_HIP, R_HIP] {
                    l.joint_halfwidth[j] = [0.25, 0.15, 0.2];
                }
                for j in [L_KNEE, R_KNEE] {
                    l.joint_center[j] = [0.25, 0.0, 0.0];
                    l.joint_halfwidth[j] = [0.25, 0.0, 0.0];
                }
            }
        }
        l
    }
}

/// Per-channel uniform ranges, `center +/- halfwidth`, for pose sampling.
#[derive(Clone, Debug)]
pub struct PoseLimits {
    pub root_position_center: Vec3,
    pub root_position_halfwidth: Vec3,
    pub root_rotation_center: [f64; 3],
    pub root_rotation_halfwidth: [f64; 3],
    pub joint_center: Vec<[f64; 3]>,
    pub joint_halfwidth: Vec<[f64; 3]>,
}

impl PoseLimits {
    /// The rest pose (T-pose) with the default standing placement and no
    /// variation at all.
    pub fn rest() -> Self {
        PoseLimits {
            root_position_center: Vec3::new(0.0, -0.065, 2.7),
            root_position_halfwidth: Vec3::new(0.22, 0.05, 0.3),
            root_rotation_center: [0.0; 3],
            root_rotation_halfwidth: [0.05, 0.3, 0.05],
            joint_center: vec![[0.0; 3]; JOINT_COUNT],
            joint_halfwidth: vec![[0.0; 3]; JOINT_COUNT],
        }
    }

    fn widen_common(&mut self) {
        use joints::*;
        self.joint_halfwidth[SPINE] = [0.08, 0.12, 0.08];
        self.joint_halfwidth[NECK] = [0.12, 0.15, 0.12];
        self.joint_halfwidth[L_SHOULDER] = [0.1, 0.2, 0.35];
        self.joint_halfwidth[R_SHOULDER] = [0.1, 0.2, 0.35];
        self.joint_halfwidth[L_ELBOW] = [0.0, 0.25, 0.3];
        self.joint_halfwidth[R_ELBOW] = [0.0, 0.25, 0.3];
        self.joint_halfwidth[L_HIP] = [0.12, 0.08, 0.1];
        self.joint_halfwidth[R_HIP] = [0.12, 0.08, 0.1];
        self.joint_center[L_KNEE] = [0.12, 0.0, 0.0];
        self.joint_center[R_KNEE] = [0.12, 0.0, 0.0];
        self.joint_halfwidth[L_KNEE] = [0.12, 0.0, 0.0];
        self.joint_halfwidth[R_KNEE] = [0.12, 0.0, 0.0];
    }

    /// All halfwidths zeroed: sampling returns the centers exactly.
    pub fn zeroed(mut self) -> Self {
        self.root_position_halfwidth = Vec3::ZERO;
        self.root_rotation_halfwidth = [0.0; 3];
        for w in &mut self.joint_halfwidth {
            *w = [0.0; 3];
        }
        self
    }
}

fn draw(rng: &mut impl Rng, center: f64, halfwidth: f64) -> f64 {
    center + (2.0 * rng.random::<f64>() - 1.0) * halfwidth
}

/// Draws every channel uniformly within the limits and runs forward
/// kinematics. Channel order is fixed, so a given RNG state yields one pose.
pub fn sample_pose_with_limits(
    model: &BodyModel,
    rng: &mut impl Rng,
    limits: &PoseLimits,
) -> PoseSample {
    let root_position = Vec3::new(
        draw(rng, limits.root_position_center.x, limits.root_position_halfwidth.x),
        draw(rng, limits.root_position_center.y, limits.root_position_halfwidth.y),
        draw(rng, limits.root_position_center.z, limits.root_position_halfwidth.z),
    );
    let mut root_rotation = [0.0; 3];
    for (axis, r) in root_rotation.iter_mut().enumerate() {
        *r = draw(rng, limits.root_rotation_center[axis], limits.root_rotation_halfwidth[axis]);
    }
    let mut joint_rotation = vec![[0.0; 3]; JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        for axis in 0..3 {
            joint_rotation[j][axis] =
                draw(rng, limits.joint_center[j][axis], limits.joint_halfwidth[j][axis]);
        }
    }
    let angles = PoseAngles { root_position, root_rotation, joint_rotation };
    let joints = forward_kinematics(model, &angles);
    PoseSample { angles, joints }
}

pub fn sample_pose(model: &BodyModel, rng: &mut impl Rng, scenario: Scenario) -> PoseSample {
    sample_pose_with_limits(model, rng, &scenario.limits())
}

/// How far (mm) a visible joint's rendered surface may sit from
/// `joint depth - surface radius` before the joint counts as occluded.
pub const VISIBILITY_TOLERANCE_MM: f64 = 5.0;

/// Renders a posed body and derives per-joint visibility by comparing the
/// rendered depth at each joint's projection against the depth of the joint's
/// own front surface.
pub fn render(
    model: &BodyModel,
    pose: &PoseSample,
    cam: &CameraIntrinsics,
    width: u32,
    height: u32,
    background_depth_mm: u16,
) -> Result<(DepthImage, Skeleton)> {
    let capsules = model.capsules(&pose.joints);
    let image = render_capsules(&capsules, cam, width, height, background_depth_mm)?;
    let visible = pose
        .joints
        .iter()
        .enumerate()
        .map(|(j, p)| {
            if p.z <= 0.0 {
                return false;
            }
            let (px, py) = project(*p, cam);
            let (px, py) = (px.round(), py.round());
            if px < 0.0 || py < 0.0 || px >= width as f64 || py >= height as f64 {
                return false;
            }
            let rendered = image.depth_mm(Pixel::new(px as u32, py as u32)).unwrap() as f64;
            let expected = (p.z - model.surface_radius(j)) * 1000.0;
            (rendered - expected).abs() <= VISIBILITY_TOLERANCE_MM
        })
        .collect();
    Ok((image, Skeleton { joints: pose.joints.clone(), visible }))
}

/// Configuration of the synthetic dataset writer.
#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub count: usize,
    pub scenario_mix: Vec<(Scenario, f64)>,
    pub width: u32,
    pub height: u32,
    pub camera: CameraIntrinsics,
    pub background_depth_mm: u16,
    /// Sigma of optional Gaussian depth jitter; 0 disables it.
    pub depth_noise_mm: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            count: 100,
            scenario_mix: default_scenario_mix(),
            width: 128,
            height: 96,
            camera: CameraIntrinsics { focal_x: 115.0, focal_y: 115.0, principal_x: 63.5, principal_y: 47.5 },
            background_depth_mm: crate::depth::DEFAULT_BACKGROUND_DEPTH_MM,
            depth_noise_mm: 0.0,
            seed: 0,
        }
    }
}

pub fn default_scenario_mix() -> Vec<(Scenario, f64)> {
    vec![
        (Scenario::Standing, 3.0),
        (Scenario::ArmsRaised, 2.0),
        (Scenario::ArmsCrossed, 2.0),
        (Scenario::SideView, 1.0),
        (Scenario::Random, 2.0),
    ]
}

/// Parses `"standing:3,arms-crossed:1"`; a bare name means weight 1.
pub fn parse_scenario_mix(text: &str) -> Result<Vec<(Scenario, f64)>> {
    let mut mix = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, weight) = match part.split_once(':') {
            Some((n, w)) => {
                let weight: f64 = w
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad scenario weight '{w}'")))?;
                (n.trim(), weight)
            }
            None => (part, 1.0),
        };
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::Config(format!("scenario weight must be positive: '{part}'")));
        }
        mix.push((Scenario::from_name(name)?, weight));
    }
    if mix.is_empty() {
        return Err(Error::Config("empty scenario mix".into()));
    }
    Ok(mix)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Per-image seed: decorrelates images while staying reproducible from the
/// master seed and the image index alone.
pub fn image_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(index.wrapping_add(1)))
}

fn pick_scenario(mix: &[(Scenario, f64)], rng: &mut impl Rng) -> Scenario {
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * total;
    for (scenario, w) in mix {
        x -= w;
        if x <= 0.0 {
            return *scenario;
        }
    }
    mix.last().expect("nonempty mix").0
}

const FRUSTUM_MARGIN_PX: f64 = 4.0;
const POSE_ATTEMPTS: usize = 200;

fn pose_in_frustum(joints: &[Vec3], cam: &CameraIntrinsics, width: u32, height: u32, bg_mm: u16) -> bool {
    joints.iter().all(|p| {
        if p.z < 1.0 || p.z * 1000.0 >= (bg_mm as f64) - 500.0 {
            return false;
        }
        let (px, py) = project(*p, cam);
        px >= FRUSTUM_MARGIN_PX
            && py >= FRUSTUM_MARGIN_PX
            && px <= width as f64 - 1.0 - FRUSTUM_MARGIN_PX
            && py <= height as f64 - 1.0 - FRUSTUM_MARGIN_PX
    })
}

/// One generated image before it is written to disk.
pub struct GeneratedImage {
    pub image: DepthImage,
    pub skeleton: Skeleton,
    pub scenario: Scenario,
    pub seed: u64,
}

/// Renders image `index` of the dataset defined by `config`: a pure function
/// of (model, config, index).
pub fn generate_image(model: &BodyModel, config: &GeneratorConfig, index: usize) -> Result<GeneratedImage> {
    let seed = image_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = pick_scenario(&config.scenario_mix, &mut rng);
    let limits = scenario.limits();
    let mut pose = None;
    for _ in 0..POSE_ATTEMPTS {
        let candidate = sample_pose_with_limits(model, &mut rng, &limits);
        if pose_in_frustum(&candidate.joints, &config.camera, config.width, config.height, config.background_depth_mm)
        {
            pose = Some(candidate);
            break;
        }
    }
    let pose = pose.ok_or_else(|| {
        Error::invalid("pose sampling", format!("no in-frustum {} pose in {POSE_ATTEMPTS} attempts", scenario.name()))
    })?;
    let (clean, skeleton) =
        render(model, &pose, &config.camera, config.width, config.height, config.background_depth_mm)?;
    let image = apply_depth_noise(&clean, config.depth_noise_mm, &mut rng)?;
    Ok(GeneratedImage { image, skeleton, scenario, seed })
}

/// Writes `count` DPH1 images with JSON sidecars plus `manifest.json` into
/// `out_dir`; returns the manifest path. Re-running with the same config
/// produces byte-identical files.
pub fn generate_dataset(
    model: &BodyModel,
    config: &GeneratorConfig,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    if config.count == 0 {
        return Err(Error::Config("dataset count must be positive".into()));
    }
    if config.scenario_mix.is_empty() {
        return Err(Error::Config("empty scenario mix".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let entries = exec::map_range(config.count, |i| -> Result<ManifestEntry> {
        let generated = generate_image(model, config, i)?;
        let image_name = format!("img_{i:05}.dph");
        let sidecar_name = format!("img_{i:05}.json");
        generated.image.save(out_dir.join(&image_name))?;
        let sidecar = Sidecar {
            intrinsics: config.camera,
            joints: generated.skeleton.joints.clone(),
            visibility: generated.skeleton.visible.clone(),
            scenario: Some(generated.scenario.name().to_string()),
            seed: generated.seed,
        };
        let sidecar_path = out_dir.join(&sidecar_name);
        let text = serde_json::to_string(&sidecar).expect("sidecar serializes");
        std::fs::write(&sidecar_path, text).map_err(|e| Error::io(&sidecar_path, e))?;
        Ok(ManifestEntry { image: image_name, sidecar: sidecar_name, seed: generated.seed })
    });
    let entries: Vec<ManifestEntry> = entries.into_iter().collect::<Result<_>>()?;
    write_manifest(out_dir, &entries)
}
