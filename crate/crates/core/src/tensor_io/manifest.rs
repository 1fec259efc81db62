//! Scene manifest: one JSON object describing cameras, target files and the
//! field parameterization.
//!
//! Camera `width`/`height`/intrinsics describe the render resolution (depth,
//! feature and semantic images). RGB targets are stored at twice that
//! resolution, matching the decoder's x2 upsampling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{read_tensor, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Contraction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CameraRole {
    #[default]
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualViewSpec {
    /// Translation in the source camera's frame, meters.
    pub offset: [f64; 3],
    pub rgb: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 world-from-camera transform (+x right, +y down, +z forward).
    pub world_from_camera: [f64; 16],
    #[serde(default)]
    pub role: CameraRole,
    pub rgb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_sparse: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_dense: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub virtual_views: Vec<VirtualViewSpec>,
}

impl CameraSpec {
    pub fn camera(&self) -> Result<Camera> {
        Camera::from_row_major(
            self.width,
            self.height,
            [self.fx, self.fy, self.cx, self.cy],
            &self.world_from_camera,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionSpec {
    #[serde(default = "default_p_inner")]
    pub p_inner: [f64; 3],
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for ContractionSpec {
    fn default() -> Self {
        ContractionSpec {
            p_inner: default_p_inner(),
            alpha: default_alpha(),
        }
    }
}

impl ContractionSpec {
    pub fn contraction(&self) -> Result<Contraction> {
        Contraction::new(self.p_inner, self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    #[serde(rename = "D", default = "default_d")]
    pub d: usize,
    #[serde(rename = "D_fine", default = "default_d_fine")]
    pub d_fine: usize,
    #[serde(default)]
    pub t_near: Option<f64>,
    #[serde(default)]
    pub t_far: Option<f64>,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            d: default_d(),
            d_fine: default_d_fine(),
            t_near: None,
            t_far: None,
        }
    }
}

impl BinSpec {
    /// `(t_near, t_far)`; only valid after manifest validation.
    pub fn range(&self) -> (f64, f64) {
        (self.t_near.unwrap_or(f64::NAN), self.t_far.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OctreeSpec {
    #[serde(default = "default_fine_level")]
    pub fine_level: u32,
    #[serde(default = "default_coarse_level")]
    pub coarse_level: u32,
}

impl Default for OctreeSpec {
    fn default() -> Self {
        OctreeSpec {
            fine_level: default_fine_level(),
            coarse_level: default_coarse_level(),
        }
    }
}

/// Occupancy evaluation region plus optional ground truth grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancySpec {
    pub roi_min: [f64; 3],
    pub roi_max: [f64; 3],
    pub voxel_size: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// u8 class grid `[nx, ny, nz]`, 0 = free.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<String>,
    /// u8 evaluation mask `[nx, ny, nz]`, 1 = observed by a camera.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible: Option<String>,
    #[serde(default)]
    pub classes: Vec<u8>,
    #[serde(default)]
    pub foreground: Vec<u8>,
}

fn default_p_inner() -> [f64; 3] {
    [50.0, 50.0, 6.4]
}
fn default_alpha() -> f64 {
    0.8
}
fn default_d() -> usize {
    64
}
fn default_d_fine() -> usize {
    16
}
fn default_fine_level() -> u32 {
    9
}
fn default_coarse_level() -> u32 {
    7
}
fn default_threshold() -> f64 {
    0.001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub contraction: ContractionSpec,
    #[serde(default)]
    pub bins: BinSpec,
    #[serde(default)]
    pub octree: OctreeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupancy: Option<OccupancySpec>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SceneManifest {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: SceneManifest = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("manifest json: {e}")))?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::validation("cameras", "at least one camera required"));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            c.camera().map_err(|e| match e {
                Error::Validation { field, reason } => {
                    Error::validation(format!("cameras[{i}].{field}"), reason)
                }
                other => other,
            })?;
        }
        let t_near = self
            .bins
            .t_near
            .ok_or_else(|| Error::validation("t_near", "missing"))?;
        let t_far = self
            .bins
            .t_far
            .ok_or_else(|| Error::validation("t_far", "missing"))?;
        if !(t_near > 0.0) {
            return Err(Error::validation("t_near", "must be > 0"));
        }
        if !(t_near < t_far) || !t_far.is_finite() {
            return Err(Error::validation("t_far", "must be finite and > t_near"));
        }
        if self.bins.d < 2 {
            return Err(Error::validation("D", "need at least 2 bins"));
        }
        if self.bins.d_fine < 2 {
            return Err(Error::validation("D_fine", "need at least 2 fine candidates"));
        }
        let a = self.contraction.alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::validation("alpha", "must lie in (0, 1)"));
        }
        if !self.contraction.p_inner.iter().all(|&p| p > 0.0 && p.is_finite()) {
            return Err(Error::validation("p_inner", "components must be positive"));
        }
        if self.octree.coarse_level < 1 {
            return Err(Error::validation("coarse_level", "must be >= 1"));
        }
        if self.octree.fine_level <= self.octree.coarse_level {
            return Err(Error::validation("fine_level", "must exceed coarse_level"));
        }
        if self.octree.fine_level > 21 {
            return Err(Error::validation("fine_level", "must be <= 21"));
        }
        if let Some(occ) = &self.occupancy {
            if !(occ.voxel_size > 0.0) {
                return Err(Error::validation("occupancy.voxel_size", "must be > 0"));
            }
            if !(0..3).all(|k| occ.roi_min[k] < occ.roi_max[k]) {
                return Err(Error::validation("occupancy.roi_max", "must exceed roi_min"));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn load_tensor(&self, rel: &str) -> Result<Tensor> {
        read_tensor(self.resolve(rel))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SceneManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    SceneManifest::from_json(&text, base)
}

pub fn save_manifest(path: impl AsRef<Path>, m: &SceneManifest) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_json()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra_bins: &str) -> String {
        format!(
            r#"{{
              "cameras": [{{
                "name": "c0", "width": 8, "height": 6,
                "fx": 5.0, "fy": 5.0, "cx": 4.0, "cy": 3.0,
                "world_from_camera": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1],
                "rgb": "c0_rgb.vxt"
              }}],
              "bins": {{ {extra_bins} }}
            }}"#
        )
    }

    #[test]
    fn defaults_are_applied() {
        let m = SceneManifest::from_json(&minimal(r#""t_near": 0.5, "t_far": 40.0"#), ".").unwrap();
        assert_eq!(m.contraction.alpha, 0.8);
        assert_eq!(m.contraction.p_inner, [50.0, 50.0, 6.4]);
        assert_eq!(m.bins.d, 64);
        assert_eq!(m.bins.d_fine, 16);
        assert_eq!(m.octree.fine_level, 9);
        assert_eq!(m.octree.coarse_level, 7);
    }

    #[test]
    fn inverted_depth_range_names_t_far() {
        let err = SceneManifest::from_json(&minimal(r#""t_near": 5.0, "t_far": 2.0"#), ".").unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "t_far"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn level_ordering_is_checked() {
        let text = minimal(r#""t_near": 0.5, "t_far": 40.0"#)
            .replace("\"bins\"", "\"octree\": {\"fine_level\": 5, \"coarse_level\": 5}, \"bins\"");
        let err = SceneManifest::from_json(&text, ".").unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "fine_level"));
    }

    #[test]
    fn bad_camera_field_is_named() {
        let text = minimal(r#""t_near": 0.5, "t_far": 40.0"#).replace("\"fx\": 5.0", "\"fx\": -1.0");
        let err = SceneManifest::from_json(&text, ".").unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "cameras[0].fx"));
    }

    #[test]
    fn serialize_reload_is_identity() {
        let m = SceneManifest::from_json(&minimal(r#""t_near": 0.5, "t_far": 40.0"#), ".").unwrap();
        let again = SceneManifest::from_json(&m.to_json(), ".").unwrap();
        assert_eq!(m, again);
        let third = SceneManifest::from_json(&again.to_json(), ".").unwrap();
        assert_eq!(again, third);
    }
}
