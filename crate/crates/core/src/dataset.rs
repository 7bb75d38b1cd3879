//! Dataset manifests and per-image JSON sidecars.
//!
//! A dataset directory holds DPH1 depth images, one JSON sidecar per image
//! (camera intrinsics, ground-truth joints, per-joint visibility, generator
//! seed), and a `manifest.json` that is a JSON array of
//! `{image, sidecar, seed}` entries with paths relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::depth::{CameraIntrinsics, DepthImage};
use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub sidecar: String,
    pub seed: u64,
}

/// Ground truth and camera metadata stored next to each depth image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub intrinsics: CameraIntrinsics,
    /// Camera-space joint positions in meters.
    pub joints: Vec<Vec3>,
    /// Per joint: false when the joint is hidden behind other geometry.
    pub visibility: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    pub seed: u64,
}

impl Sidecar {
    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::invalid("sidecar", "no joints"));
        }
        if self.joints.len() != self.visibility.len() {
            return Err(Error::invalid(
                "sidecar",
                format!("{} joints but {} visibility flags", self.joints.len(), self.visibility.len()),
            ));
        }
        if self.joints.iter().any(|j| !j.is_finite()) {
            return Err(Error::invalid("sidecar", "non-finite joint position"));
        }
        Ok(())
    }
}

/// A loaded manifest; images and sidecars are read lazily per entry.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::file(manifest_path, format!("bad manifest: {e}")))?;
        let root = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(Dataset { root, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// The identifier predictions carry for entry `i`: its image path string.
    pub fn image_id(&self, i: usize) -> &str {
        &self.entries[i].image
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].image)
    }

    pub fn sidecar_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].sidecar)
    }

    pub fn load_image(&self, i: usize) -> Result<DepthImage> {
        DepthImage::load(self.image_path(i))
    }

    pub fn load_sidecar(&self, i: usize) -> Result<Sidecar> {
        let path = self.sidecar_path(i);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::file(&path, format!("bad sidecar: {e}")))?;
        sidecar.validate().map_err(|e| e.at_path(&path))?;
        Ok(sidecar)
    }

    pub fn load_entry(&self, i: usize) -> Result<(DepthImage, Sidecar)> {
        Ok((self.load_image(i)?, self.load_sidecar(i)?))
    }
}

/// Writes `manifest.json` into `dir` and returns its path.
pub fn write_manifest(dir: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<PathBuf> {
    let path = dir.as_ref().join("manifest.json");
    let text = serde_json::to_string_pretty(entries)
        .expect("manifest serialization cannot fail");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
