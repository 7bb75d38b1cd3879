//! Analytic ray-capsule depth rendering with a pinhole camera at the origin.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::depth::{CameraIntrinsics, DepthImage};
use crate::error::{Error, Result};
use crate::exec;
use crate::geom::Vec3;

/// A capsule: every point within `radius` of the segment `a`-`b`. A capsule
/// with `a == b` is a sphere.
#[derive(Clone, Copy, Debug)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

/// Depth (= z, in camera units) where the ray `t * d` with `d.z == 1` first
/// enters the sphere at `c`, if it does so in front of the camera.
fn ray_sphere_depth(d: Vec3, c: Vec3, r: f64) -> Option<f64> {
    let dd = d.norm_sq();
    let dc = d.dot(c);
    let disc = dc * dc - dd * (c.norm_sq() - r * r);
    if disc < 0.0 {
        return None;
    }
    let t = (dc - disc.sqrt()) / dd;
    (t > 0.0).then_some(t)
}

fn ray_capsule_depth(d: Vec3, capsule: &Capsule) -> Option<f64> {
    let axis = capsule.b - capsule.a;
    let len_sq = axis.norm_sq();
    let r = capsule.radius;
    if len_sq < 1e-12 {
        return ray_sphere_depth(d, capsule.a, r);
    }
    let len = len_sq.sqrt();
    let m = axis.scale(1.0 / len);

    let mut best: Option<f64> = None;
    let mut consider = |t: Option<f64>| {
        if let Some(t) = t {
            if best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    };

    // infinite cylinder body, accepted only where the hit projects inside the segment
    let d_perp = d - m.scale(d.dot(m));
    let a_perp = capsule.a - m.scale(capsule.a.dot(m));
    let qa = d_perp.norm_sq();
    if qa > 1e-18 {
        let qb = d_perp.dot(a_perp);
        let qc = a_perp.norm_sq() - r * r;
        let disc = qb * qb - qa * qc;
        if disc >= 0.0 {
            let sqrt_disc = disc.sqrt();
            for t in [(qb - sqrt_disc) / qa, (qb + sqrt_disc) / qa] {
                if t > 0.0 {
                    let s = (d.scale(t) - capsule.a).dot(m);
                    if (0.0..=len).contains(&s) {
                        consider(Some(t));
                    }
                }
            }
        }
    }
    consider(ray_sphere_depth(d, capsule.a, r));
    consider(ray_sphere_depth(d, capsule.b, r));
    best
}

/// Renders a depth map of the capsules: per pixel, the nearest intersection
/// depth quantized to millimeters, background elsewhere. Rows render in
/// parallel; the result is a pure function of the inputs.
pub fn render_capsules(
    capsules: &[Capsule],
    cam: &CameraIntrinsics,
    width: u32,
    height: u32,
    background_depth_mm: u16,
) -> Result<DepthImage> {
    if !(cam.focal_x > 0.0) || !(cam.focal_y > 0.0) {
        return Err(Error::invalid("camera intrinsics", "focal length must be positive"));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("render target", "zero width or height"));
    }
    let rows = exec::map_range(height as usize, |y| {
        let mut row = vec![background_depth_mm; width as usize];
        for (x, out) in row.iter_mut().enumerate() {
            let dir = Vec3::new(
                (x as f64 - cam.principal_x) / cam.focal_x,
                (y as f64 - cam.principal_y) / cam.focal_y,
                1.0,
            );
            let mut depth = f64::INFINITY;
            for capsule in capsules {
                if let Some(t) = ray_capsule_depth(dir, capsule) {
                    if t < depth {
                        depth = t;
                    }
                }
            }
            let mm = (depth * 1000.0).round();
            if mm.is_finite() && mm < background_depth_mm as f64 {
                *out = (mm as u32).max(1) as u16;
            }
        }
        row
    });
    let mut depths = Vec::with_capacity(width as usize * height as usize);
    for row in rows {
        depths.extend(row);
    }
    DepthImage::new(width, height, background_depth_mm, depths)
}

/// Adds zero-mean Gaussian jitter (sigma in millimeters) to foreground depths,
/// clamped to stay strictly between zero and the background value. Pixel order
/// is row-major, so the result is deterministic for a given RNG state.
pub fn apply_depth_noise(image: &DepthImage, sigma_mm: f64, rng: &mut impl Rng) -> Result<DepthImage> {
    if sigma_mm <= 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma_mm)
        .map_err(|e| Error::invalid("depth noise", e.to_string()))?;
    let bg = image.background_depth_mm();
    let mut depths = Vec::with_capacity(image.width() as usize * image.height() as usize);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let d = image.depth_mm(crate::geom::Pixel::new(x, y)).unwrap();
            if d == bg {
                depths.push(d);
            } else {
                let jittered = (d as f64 + normal.sample(rng)).round();
                depths.push(jittered.clamp(1.0, bg as f64 - 1.0) as u16);
            }
        }
    }
    DepthImage::new(image.width(), image.height(), bg, depths)
}
