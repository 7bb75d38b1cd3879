//! Depth images, the pinhole camera model, and the depth-comparison split test.
//!
//! Depths are stored as integer millimeters and converted to meters only at
//! back-projection, so images serialize bit-exactly. Pixels that belong to no
//! surface hold exactly `background_depth_mm`; everything else is foreground.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pixel, Vec3};

pub const DEFAULT_BACKGROUND_DEPTH_MM: u16 = 10_000;

const DPH1_MAGIC: &[u8; 4] = b"DPH1";
const DPH1_VERSION: u32 = 1;

/// Pinhole intrinsics in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_x: f64,
    pub principal_y: f64,
}

impl CameraIntrinsics {
    pub fn new(focal_x: f64, focal_y: f64, principal_x: f64, principal_y: f64) -> Result<Self> {
        if !(focal_x > 0.0) || !(focal_y > 0.0) {
            return Err(Error::invalid(
                "camera intrinsics",
                format!("focal lengths must be positive, got ({focal_x}, {focal_y})"),
            ));
        }
        if !principal_x.is_finite() || !principal_y.is_finite() {
            return Err(Error::invalid("camera intrinsics", "non-finite principal point"));
        }
        Ok(CameraIntrinsics { focal_x, focal_y, principal_x, principal_y })
    }
}

/// A rectangular grid of depth samples in millimeters, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    background_depth_mm: u16,
    depths: Vec<u16>,
}

impl DepthImage {
    /// Builds an image from raw row-major depths, checking that every value is
    /// in `(0, background_depth_mm]`.
    pub fn new(width: u32, height: u32, background_depth_mm: u16, depths: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("depth image", "zero width or height"));
        }
        if background_depth_mm == 0 {
            return Err(Error::invalid("depth image", "background depth must be positive"));
        }
        let expected = width as usize * height as usize;
        if depths.len() != expected {
            return Err(Error::invalid(
                "depth image",
                format!("{} depth values for {}x{} image", depths.len(), width, height),
            ));
        }
        if let Some(bad) = depths.iter().find(|&&d| d == 0 || d > background_depth_mm) {
            return Err(Error::invalid(
                "depth image",
                format!("depth {bad} outside (0, {background_depth_mm}]"),
            ));
        }
        Ok(DepthImage { width, height, background_depth_mm, depths })
    }

    /// An image with every pixel set to the background depth.
    pub fn background(width: u32, height: u32, background_depth_mm: u16) -> Result<Self> {
        let depths = vec![background_depth_mm; width as usize * height as usize];
        Self::new(width, height, background_depth_mm, depths)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn background_depth_mm(&self) -> u16 {
        self.background_depth_mm
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.x < self.width && p.y < self.height
    }

    /// Depth at `p` in millimeters, or `None` outside the image.
    pub fn depth_mm(&self, p: Pixel) -> Option<u16> {
        if self.contains(p) {
            Some(self.depths[p.y as usize * self.width as usize + p.x as usize])
        } else {
            None
        }
    }

    pub fn is_foreground(&self, p: Pixel) -> bool {
        matches!(self.depth_mm(p), Some(d) if d != self.background_depth_mm)
    }

    /// Depth at a foreground pixel; errors out of bounds or on background.
    pub fn foreground_depth_mm(&self, p: Pixel) -> Result<u16> {
        let d = self.depth_mm(p).ok_or(Error::OutOfBounds {
            x: p.x,
            y: p.y,
            width: self.width,
            height: self.height,
        })?;
        if d == self.background_depth_mm {
            return Err(Error::BackgroundPixel { x: p.x, y: p.y });
        }
        Ok(d)
    }

    /// Foreground pixels in row-major order.
    pub fn foreground_pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        let w = self.width;
        self.depths
            .iter()
            .enumerate()
            .filter(move |(_, &d)| d != self.background_depth_mm)
            .map(move |(i, _)| Pixel::new(i as u32 % w, i as u32 / w))
    }

    pub fn foreground_count(&self) -> usize {
        self.depths.iter().filter(|&&d| d != self.background_depth_mm).count()
    }

    /// Depth read by a split-test probe. `offset` is in pixel-meters and is
    /// divided by the reference depth in meters (`inv_depth_m` is its inverse),
    /// the nearest pixel is sampled, and probes that leave the image read the
    /// background depth.
    #[inline]
    pub(crate) fn probe_depth_mm(&self, q: Pixel, offset: [f32; 2], inv_depth_m: f64) -> u16 {
        let px = (q.x as f64 + offset[0] as f64 * inv_depth_m).round();
        let py = (q.y as f64 + offset[1] as f64 * inv_depth_m).round();
        if px < 0.0 || py < 0.0 || px >= self.width as f64 || py >= self.height as f64 {
            return self.background_depth_mm;
        }
        self.depths[py as usize * self.width as usize + px as usize]
    }

    pub fn to_dph1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.depths.len() * 2);
        out.extend_from_slice(DPH1_MAGIC);
        out.extend_from_slice(&DPH1_VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.background_depth_mm as u32).to_le_bytes());
        for d in &self.depths {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_dph1_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "DPH1");
        let magic = r.take(4)?;
        if magic != DPH1_MAGIC {
            return Err(Error::corrupt("DPH1", "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != DPH1_VERSION {
            return Err(Error::corrupt("DPH1", format!("unsupported version {version}")));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        let background = r.u32()?;
        if background > u16::MAX as u32 {
            return Err(Error::corrupt("DPH1", format!("background depth {background} exceeds 16-bit range")));
        }
        let count = (width as u64).checked_mul(height as u64).ok_or_else(|| {
            Error::corrupt("DPH1", "image dimensions overflow")
        })?;
        let mut depths = Vec::with_capacity(count as usize);
        for _ in 0..count {
            depths.push(r.u16()?);
        }
        r.expect_end()?;
        Self::new(width, height, background as u16, depths)
            .map_err(|e| Error::corrupt("DPH1", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_dph1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_dph1_bytes(&bytes).map_err(|e| e.at_path(path))
    }
}

/// Little-endian reader over a byte slice shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        ByteReader { bytes, pos: 0, format }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.format, "truncated data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::corrupt(self.format, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn depth_to_meters(depth_mm: u16) -> f64 {
    depth_mm as f64 / 1000.0
}

/// 3D camera-space position of the surface point seen at pixel `q`.
pub fn back_project(q: Pixel, image: &DepthImage, cam: &CameraIntrinsics) -> Result<Vec3> {
    let depth_mm = image.foreground_depth_mm(q)?;
    let z = depth_to_meters(depth_mm);
    Ok(Vec3::new(
        (q.x as f64 - cam.principal_x) * z / cam.focal_x,
        (q.y as f64 - cam.principal_y) * z / cam.focal_y,
        z,
    ))
}

/// Pixel coordinates (unrounded) of a camera-space point with z > 0.
/// Inverse of [`back_project`] up to millimeter depth quantization.
pub fn project(point: Vec3, cam: &CameraIntrinsics) -> (f64, f64) {
    (
        point.x / point.z * cam.focal_x + cam.principal_x,
        point.y / point.z * cam.focal_y + cam.principal_y,
    )
}

/// A split-node test: the signed difference of two probed depths against a
/// threshold. Probe offsets are in pixel-meters so the probed surface points
/// stay fixed as the subject moves along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitTest {
    pub offset_u: [f32; 2],
    pub offset_v: [f32; 2],
    pub threshold_mm: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Left,
    Right,
}

/// `depth(q + u/d(q)) - depth(q + v/d(q))` in millimeters, with out-of-image
/// and background probes reading the background depth.
pub fn feature_response(image: &DepthImage, q: Pixel, test: &SplitTest) -> Result<i32> {
    let depth_mm = image.foreground_depth_mm(q)?;
    Ok(feature_response_at(image, q, depth_mm, test))
}

#[inline]
pub(crate) fn feature_response_at(image: &DepthImage, q: Pixel, depth_mm: u16, test: &SplitTest) -> i32 {
    let inv_depth_m = 1000.0 / depth_mm as f64;
    let du = image.probe_depth_mm(q, test.offset_u, inv_depth_m);
    let dv = image.probe_depth_mm(q, test.offset_v, inv_depth_m);
    du as i32 - dv as i32
}

/// Branches left iff the feature response is strictly below the threshold.
pub fn evaluate_split(image: &DepthImage, q: Pixel, test: &SplitTest) -> Result<Branch> {
    let response = feature_response(image, q, test)?;
    Ok(branch_for_response(response, test.threshold_mm))
}

#[inline]
pub(crate) fn branch_for_response(response: i32, threshold_mm: f32) -> Branch {
    if (response as f64) < threshold_mm as f64 {
        Branch::Left
    } else {
        Branch::Right
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 4.0, 4.0).unwrap()
    }

    fn constant_image(width: u32, height: u32, depth: u16) -> DepthImage {
        DepthImage::new(width, height, DEFAULT_BACKGROUND_DEPTH_MM, vec![depth; (width * height) as usize])
            .unwrap()
    }

    #[test]
    fn back_project_principal_point() {
        let img = constant_image(9, 9, 2000);
        let p = back_project(Pixel::new(4, 4), &img, &cam()).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn back_project_one_focal_length_off_axis() {
        // pixel (principal_x + focal_x, principal_y) at 1000 mm lands at x = z.
        let c = CameraIntrinsics::new(3.0, 3.0, 1.0, 1.0).unwrap();
        let img = constant_image(8, 8, 1000);
        let p = back_project(Pixel::new(4, 1), &img, &c).unwrap();
        assert_eq!(p, Vec3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn back_project_rejects_background_and_out_of_bounds() {
        let img = DepthImage::background(4, 4, 5000).unwrap();
        assert!(matches!(
            back_project(Pixel::new(1, 1), &img, &cam()),
            Err(Error::BackgroundPixel { .. })
        ));
        assert!(matches!(
            back_project(Pixel::new(9, 0), &img, &cam()),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn project_inverts_back_project() {
        let c = CameraIntrinsics::new(115.0, 115.0, 63.5, 47.5).unwrap();
        let mut depths = vec![DEFAULT_BACKGROUND_DEPTH_MM; 128 * 96];
        for (i, d) in depths.iter_mut().enumerate() {
            if i % 3 == 0 {
                *d = 1500 + (i % 1000) as u16;
            }
        }
        let img = DepthImage::new(128, 96, DEFAULT_BACKGROUND_DEPTH_MM, depths).unwrap();
        for q in img.foreground_pixels().step_by(97) {
            let world = back_project(q, &img, &c).unwrap();
            let (px, py) = project(world, &c);
            assert!((px - q.x as f64).abs() < 1e-9);
            assert!((py - q.y as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_response_zero_on_constant_plane() {
        let img = constant_image(9, 9, 3000);
        let test = SplitTest { offset_u: [0.3, -0.2], offset_v: [-0.1, 0.4], threshold_mm: 0.0 };
        assert_eq!(feature_response(&img, Pixel::new(4, 4), &test).unwrap(), 0);
    }

    #[test]
    fn feature_response_zero_for_identical_probes() {
        let mut depths: Vec<u16> = (0..81u16).map(|i| 1000 + 13 * i).collect();
        depths[17] = DEFAULT_BACKGROUND_DEPTH_MM;
        let img = DepthImage::new(9, 9, DEFAULT_BACKGROUND_DEPTH_MM, depths).unwrap();
        let test = SplitTest { offset_u: [0.7, 0.7], offset_v: [0.7, 0.7], threshold_mm: 0.0 };
        assert_eq!(feature_response(&img, Pixel::new(4, 4), &test).unwrap(), 0);
    }

    #[test]
    fn feature_response_background_probe_reads_background_depth() {
        // 3x3 at 1500 mm; probe u one pixel right of the image edge reads the
        // 10000 mm background, probe v stays on the body.
        let img = constant_image(3, 3, 1500);
        // depth is 1.5 m, so an offset of 1.5 pixel-meters moves 1 pixel.
        let test = SplitTest { offset_u: [3.0, 0.0], offset_v: [0.0, 0.0], threshold_mm: 0.0 };
        let r = feature_response(&img, Pixel::new(2, 1), &test).unwrap();
        assert_eq!(r, 10_000 - 1500);

        let inside = SplitTest { offset_u: [-1.5, 0.0], offset_v: [0.0, 0.0], threshold_mm: 0.0 };
        assert_eq!(feature_response(&img, Pixel::new(2, 1), &inside).unwrap(), 0);
    }

    #[test]
    fn feature_response_invariant_to_axial_translation_of_plane() {
        // A fronto-parallel plane probed with depth-scaled offsets reads the
        // same surface points at any distance, so the response stays 0 even
        // near the silhouette: the probe in pixels shrinks as depth grows.
        let test = SplitTest { offset_u: [2.0, 1.0], offset_v: [-1.0, 0.5], threshold_mm: 0.0 };
        for depth in [1000u16, 2000, 4000] {
            let img = constant_image(21, 21, depth);
            let r = feature_response(&img, Pixel::new(10, 10), &test).unwrap();
            assert_eq!(r, 0, "depth {depth}");
        }
    }

    #[test]
    fn evaluate_split_strict_threshold_convention() {
        let img = constant_image(3, 3, 2000);
        let zero = SplitTest { offset_u: [0.0, 0.0], offset_v: [0.0, 0.0], threshold_mm: 1.0 };
        assert_eq!(evaluate_split(&img, Pixel::new(1, 1), &zero).unwrap(), Branch::Left);
        let boundary = SplitTest { threshold_mm: 0.0, ..zero };
        assert_eq!(evaluate_split(&img, Pixel::new(1, 1), &boundary).unwrap(), Branch::Right);
    }

    #[test]
    fn evaluate_split_matches_direct_probe_arithmetic() {
        let depths: Vec<u16> = (0..25u16).map(|i| 900 + 37 * i).collect();
        let img = DepthImage::new(5, 5, DEFAULT_BACKGROUND_DEPTH_MM, depths).unwrap();
        let q = Pixel::new(2, 2);
        let test = SplitTest { offset_u: [1.1, 0.0], offset_v: [0.0, -1.1], threshold_mm: 5.0 };

        // Recompute the two probes by hand.
        let d = img.foreground_depth_mm(q).unwrap() as f64;
        let probe = |off: [f32; 2]| {
            let px = (q.x as f64 + off[0] as f64 * 1000.0 / d).round() as u32;
            let py = (q.y as f64 + off[1] as f64 * 1000.0 / d).round() as u32;
            img.depth_mm(Pixel::new(px, py)).unwrap() as i32
        };
        let expected = probe(test.offset_u) - probe(test.offset_v);
        assert_eq!(feature_response(&img, q, &test).unwrap(), expected);
        let want = if (expected as f64) < 5.0 { Branch::Left } else { Branch::Right };
        assert_eq!(evaluate_split(&img, q, &test).unwrap(), want);
    }

    #[test]
    fn dph1_round_trip_and_corruption() {
        let depths: Vec<u16> = (0..12u16).map(|i| if i % 4 == 0 { 10_000 } else { 800 + i }).collect();
        let img = DepthImage::new(4, 3, 10_000, depths).unwrap();
        let bytes = img.to_dph1_bytes();
        let back = DepthImage::from_dph1_bytes(&bytes).unwrap();
        assert_eq!(back, img);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            DepthImage::from_dph1_bytes(&bad_magic),
            Err(Error::Corrupt { format: "DPH1", .. })
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(DepthImage::from_dph1_bytes(truncated).is_err());

        let mut bad_value = bytes.clone();
        // depth of 0 violates the foreground invariant
        bad_value[20] = 0;
        bad_value[21] = 0;
        assert!(DepthImage::from_dph1_bytes(&bad_value).is_err());
    }

    #[test]
    fn rejects_invalid_construction() {
        assert!(DepthImage::new(0, 3, 10_000, vec![]).is_err());
        assert!(DepthImage::new(2, 2, 10_000, vec![1, 2, 3]).is_err());
        assert!(DepthImage::new(2, 2, 10_000, vec![0, 1, 1, 1]).is_err());
        assert!(DepthImage::new(2, 2, 500, vec![501, 1, 1, 1]).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }
}
