//! Synthetic box scenes with closed-form rendering, virtual camera poses and
//! the scene writer used by the CLI and the end-to-end tests.

use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frustum::LiftedPoint;
use crate::geometry::{Camera, Contraction, Ray, Vec3};
use crate::fit::FittedField;
use crate::objectives::{
    depth_metrics, extract_occupancy, iou_suite, psnr, semantic_occupancy, ssim, IouReport, MetricsReport,
    OccupancyGrid,
};
use crate::renderer::{render_ray, sample_uniform, RenderOutput, SamplePlan};
use crate::voxelgrid::{build, DualOctree, SparseGrid};
use crate::tensor_io::{
    save_manifest, write_tensor, BinSpec, CameraRole, CameraSpec, ContractionSpec, OccupancySpec, OctreeSpec,
    SceneManifest, Tensor, VirtualViewSpec,
};

/// Axis-aligned box of constant density, feature and class. Color is constant
/// unless `texture` gives a checker period in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrimitive {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub density: f64,
    pub color: [f64; 3],
    #[serde(default)]
    pub feature: Vec<f64>,
    #[serde(default)]
    pub class_id: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<f64>,
}

/// Brightness of the dark checker squares relative to `color`.
pub const CHECKER_DARK: f64 = 0.5;

impl BoxPrimitive {
    /// Color at `p`: checker squares of side `texture` alternate between
    /// `color` and `CHECKER_DARK * color`.
    pub fn color_at(&self, p: &Vec3) -> [f64; 3] {
        match self.texture {
            Some(period) if period > 0.0 => {
                let parity: i64 = (0..3).map(|k| (p[k] / period).floor() as i64).sum();
                let s = if parity.rem_euclid(2) == 0 { 1.0 } else { CHECKER_DARK };
                self.color.map(|c| c * s)
            }
            _ => self.color,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub boxes: Vec<BoxPrimitive>,
    #[serde(default)]
    pub feature_channels: usize,
}

/// Entry and exit distances of `ray` through a box (slab method), clipped to
/// `t >= 0`.
pub fn ray_box(ray: &Ray, min: &[f64; 3], max: &[f64; 3]) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        let (o, d) = (ray.origin[k], ray.direction[k]);
        if d == 0.0 {
            if o < min[k] || o > max[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((min[k] - o) / d, (max[k] - o) / d);
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    (lo < hi).then_some((lo, hi))
}

/// Piece of a ray with constant total density.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub density: f64,
    /// Density-weighted mean color and feature of the overlapping boxes.
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticRay {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    pub depth: f64,
    pub opacity: f64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            if !(0..3).all(|k| b.min[k] < b.max[k]) {
                return Err(Error::validation(format!("boxes[{i}].max"), "must exceed min on every axis"));
            }
            if !(b.density >= 0.0 && b.density.is_finite()) {
                return Err(Error::validation(format!("boxes[{i}].density"), "must be finite and >= 0"));
            }
            if b.feature.len() != self.feature_channels {
                return Err(Error::validation(
                    format!("boxes[{i}].feature"),
                    format!("expected {} channels", self.feature_channels),
                ));
            }
        }
        Ok(())
    }

    /// Constant-density pieces of `ray` over `[t0, t1]`, in order; vacuum
    /// gaps are omitted. Textured boxes take their color at the piece's entry.
    pub fn segments(&self, ray: &Ray, t0: f64, t1: f64) -> Vec<Segment> {
        let hits: Vec<(usize, f64, f64)> = self
            .boxes
            .iter()
            .enumerate()
            .filter_map(|(i, b)| ray_box(ray, &b.min, &b.max).map(|(a, e)| (i, a.max(t0), e.min(t1))))
            .filter(|(_, a, e)| a < e)
            .collect();
        let mut cuts: Vec<f64> = hits.iter().flat_map(|h| [h.1, h.2]).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut out = Vec::new();
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let inside: Vec<usize> = hits.iter().filter(|h| h.1 <= mid && mid < h.2).map(|h| h.0).collect();
            if inside.is_empty() {
                continue;
            }
            let density: f64 = inside.iter().map(|&i| self.boxes[i].density).sum();
            let mut color = [0.0; 3];
            let mut feature = vec![0.0; self.feature_channels];
            if density > 0.0 {
                let entry = ray.at(w[0]);
                for &i in &inside {
                    let b = &self.boxes[i];
                    let wt = b.density / density;
                    let c = b.color_at(&entry);
                    (0..3).for_each(|k| color[k] += wt * c[k]);
                    feature.iter_mut().zip(&b.feature).for_each(|(f, v)| *f += wt * v);
                }
            }
            out.push(Segment {
                start: w[0],
                end: w[1],
                density,
                color,
                feature,
            });
        }
        out
    }

    /// First box surface hit at or after `t0` (distance, box index); boxes
    /// with zero density are transparent.
    pub fn first_hit(&self, ray: &Ray, t0: f64, t1: f64) -> Option<(f64, usize)> {
        self.boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.density > 0.0)
            .filter_map(|(i, b)| ray_box(ray, &b.min, &b.max).map(|(a, e)| (a.max(t0), e, i)))
            .filter(|&(a, e, _)| a < e && a <= t1)
            .min_by(|x, y| x.0.total_cmp(&y.0).then(x.2.cmp(&y.2)))
            .map(|(a, _, i)| (a, i))
    }

    /// Exact emission integral of the scene along `ray` over `[t0, t1]`.
    pub fn integrate(&self, ray: &Ray, t0: f64, t1: f64) -> AnalyticRay {
        let mut out = AnalyticRay {
            color: [0.0; 3],
            feature: vec![0.0; self.feature_channels],
            depth: 0.0,
            opacity: 0.0,
        };
        let mut trans = 1.0;
        for s in self.segments(ray, t0, t1) {
            let len = s.end - s.start;
            let decay = (-s.density * len).exp();
            let mass = trans * -(-s.density * len).exp_m1();
            (0..3).for_each(|k| out.color[k] += mass * s.color[k]);
            out.feature.iter_mut().zip(&s.feature).for_each(|(f, v)| *f += mass * v);
            out.opacity += mass;
            if s.density > 0.0 {
                // integral of sigma e^{-sigma u} (start + u) over [0, len]
                out.depth += trans * (s.start * (1.0 - decay) + (1.0 - decay) / s.density - len * decay);
            }
            trans *= decay;
        }
        out
    }
}

/// `t -> T(t) = exp(-sum sigma_i * overlap_i(t))` along `ray` from its origin.
pub fn analytic_transmittance(ray: &Ray, scene: &SyntheticScene) -> impl Fn(f64) -> f64 {
    let spans: Vec<(f64, f64, f64)> = scene
        .boxes
        .iter()
        .filter_map(|b| ray_box(ray, &b.min, &b.max).map(|(a, e)| (a, e, b.density)))
        .collect();
    move |t: f64| {
        let tau: f64 = spans.iter().map(|&(a, e, s)| s * (t.min(e) - a).max(0.0)).sum();
        (-tau).exp()
    }
}

/// Three translated copies of `cam`: left (-x), right (+x) and up (-y) in
/// its own frame, `distance` meters away. Orientation is unchanged.
pub fn virtual_poses(cam: &Camera, distance: f64) -> Vec<Camera> {
    [
        Vec3::new(-distance, 0.0, 0.0),
        Vec3::new(distance, 0.0, 0.0),
        Vec3::new(0.0, -distance, 0.0),
    ]
    .iter()
    .map(|o| cam.translated_local(o))
    .collect()
}

/// Offsets used by [`virtual_poses`], in camera frame.
pub fn virtual_offsets(distance: f64) -> [[f64; 3]; 3] {
    [[-distance, 0.0, 0.0], [distance, 0.0, 0.0], [0.0, -distance, 0.0]]
}

/// Level camera at `position` looking along heading `yaw_deg` (0 = +x,
/// counter-clockwise about +z, which is up).
pub fn yaw_pose(position: [f64; 3], yaw_deg: f64) -> [f64; 16] {
    let (s, c) = yaw_deg.to_radians().sin_cos();
    let right = Vec3::new(s, -c, 0.0);
    let down = Vec3::new(0.0, 0.0, -1.0);
    let forward = Vec3::new(c, s, 0.0);
    let r = Matrix3::from_columns(&[right, down, forward]);
    [
        r[(0, 0)], r[(0, 1)], r[(0, 2)], position[0],
        r[(1, 0)], r[(1, 1)], r[(1, 2)], position[1],
        r[(2, 0)], r[(2, 1)], r[(2, 2)], position[2],
        0.0, 0.0, 0.0, 1.0,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigCamera {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_from_camera: [f64; 16],
    #[serde(default)]
    pub role: CameraRole,
}

impl RigCamera {
    pub fn camera(&self) -> Result<Camera> {
        Camera::from_row_major(self.width, self.height, [self.fx, self.fy, self.cx, self.cy], &self.world_from_camera)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRegion {
    pub roi_min: [f64; 3],
    pub roi_max: [f64; 3],
    pub voxel_size: f64,
    /// Slack behind the first surface within which a voxel still counts as
    /// observed.
    #[serde(default = "default_visibility_tol")]
    pub visibility_tol: f64,
    #[serde(default)]
    pub foreground: Vec<u8>,
}

fn default_visibility_tol() -> f64 {
    0.3
}

/// Everything `synth` needs to write a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scene: SyntheticScene,
    pub cameras: Vec<RigCamera>,
    #[serde(default)]
    pub contraction: ContractionSpec,
    pub bins: BinSpec,
    #[serde(default)]
    pub octree: OctreeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupancy: Option<OccupancyRegion>,
    /// Write left/right/up virtual targets this far from each train camera.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_distance: Option<f64>,
    /// Keep every n-th row of depth for the sparse (LiDAR-like) target.
    #[serde(default = "default_sparse_stride")]
    pub sparse_row_stride: usize,
    /// Sparse depth only within this elevation of the optical axis, degrees.
    #[serde(default = "default_sparse_elevation")]
    pub sparse_max_elevation_deg: f64,
}

fn default_sparse_stride() -> usize {
    4
}

fn default_sparse_elevation() -> f64 {
    15.0
}

/// Rendered targets of one camera.
pub struct ViewTargets {
    /// `[2H, 2W, 3]`.
    pub rgb: Tensor,
    /// `[H, W]` first-surface distance, 0 where nothing is hit.
    pub depth: Tensor,
    /// `[H, W, C_f]` feature of the first box hit.
    pub feature: Tensor,
    /// `[H, W]` class of the first box hit.
    pub semantic: Tensor,
}

/// Closed-form targets for `cam`: volumetric RGB at twice the resolution,
/// first-surface depth, features and classes at the render resolution.
pub fn render_targets(scene: &SyntheticScene, cam: &Camera, t_near: f64, t_far: f64) -> Result<ViewTargets> {
    let (h, w, cf) = (cam.height, cam.width, scene.feature_channels);
    let big = cam.scaled(2);
    let rgb: Vec<f64> = (0..big.pixel_count())
        .into_par_iter()
        .flat_map_iter(|i| {
            let ray = big.pixel_center_ray(i % big.width, i / big.width);
            scene.integrate(&ray, t_near, t_far).color
        })
        .collect();
    let hits: Vec<Option<(f64, usize)>> = (0..h * w)
        .into_par_iter()
        .map(|i| scene.first_hit(&cam.pixel_center_ray(i % w, i / w), t_near, t_far))
        .collect();
    let depth = hits.iter().map(|h| h.map_or(0.0, |h| h.0)).collect();
    let semantic = hits.iter().map(|h| h.map_or(0, |h| scene.boxes[h.1].class_id)).collect();
    let feature = hits
        .iter()
        .flat_map(|h| match h {
            Some((_, i)) => scene.boxes[*i].feature.clone(),
            None => vec![0.0; cf],
        })
        .collect();
    Ok(ViewTargets {
        rgb: Tensor::from_f64(vec![2 * h, 2 * w, 3], rgb)?,
        depth: Tensor::from_f64(vec![h, w], depth)?,
        feature: Tensor::from_f64(vec![h, w, cf], feature)?,
        semantic: Tensor::from_u8(vec![h, w], semantic)?,
    })
}

/// Keep every `stride`-th row (starting at `stride / 2`) within
/// `max_elevation_deg` of the optical axis; zero elsewhere.
pub fn sparsify_depth(depth: &Tensor, cam: &Camera, stride: usize, max_elevation_deg: f64) -> Result<Tensor> {
    let (h, w) = (cam.height, cam.width);
    depth.expect_shape("depth", &[Some(h), Some(w)])?;
    let limit = max_elevation_deg.to_radians().tan();
    let mut d = depth.to_f64_vec();
    for row in 0..h {
        let elev = ((row as f64 + 0.5 - cam.cy) / cam.fy).abs();
        if stride == 0 || row % stride != stride / 2 || elev > limit {
            d[row * w..(row + 1) * w].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Tensor::from_f64(vec![h, w], d)
}

/// Class of the box containing each voxel center (last listed box wins),
/// 0 for free space.
pub fn gt_occupancy(scene: &SyntheticScene, region: &OccupancyRegion) -> Result<OccupancyGrid> {
    let grid = OccupancyGrid::new(region.roi_min, region.roi_max, region.voxel_size)?;
    let data = (0..grid.len())
        .map(|i| {
            let p = grid.center_of(i);
            scene
                .boxes
                .iter()
                .rev()
                .find(|b| b.density > 0.0 && b.contains(&p))
                .map_or(0, |b| b.class_id.max(1))
        })
        .collect();
    grid.with_data(data)
}

/// 1 for voxels some camera observes: the center projects inside the image
/// and lies no more than `tol` behind that pixel's first surface (or the
/// pixel sees nothing).
pub fn visibility_mask(grid: &OccupancyGrid, cams: &[Camera], depths: &[Tensor], tol: f64) -> Result<Vec<u8>> {
    let dv: Vec<Vec<f64>> = depths.iter().map(Tensor::to_f64_vec).collect();
    Ok((0..grid.len())
        .map(|i| {
            let p = grid.center_of(i);
            cams.iter().zip(&dv).any(|(cam, d)| {
                let Some((u, v, _)) = cam.project(&p) else { return false };
                if !(u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64) {
                    return false;
                }
                let surface = d[v as usize * cam.width + u as usize];
                surface == 0.0 || (p - cam.origin()).norm() <= surface + tol
            }) as u8
        })
        .collect())
}

fn write(dir: &Path, name: &str, t: &Tensor) -> Result<String> {
    write_tensor(dir.join(name), t)?;
    Ok(name.to_string())
}

/// Write every target tensor and the manifest into `dir`.
pub fn synth_scene(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<SceneManifest> {
    let dir = dir.as_ref();
    cfg.scene.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t_near, t_far) = match (cfg.bins.t_near, cfg.bins.t_far) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::validation("t_near", "synth needs t_near and t_far")),
    };
    let mut specs = Vec::new();
    let mut train_cams = Vec::new();
    let mut train_depths = Vec::new();
    for rc in &cfg.cameras {
        let cam = rc.camera()?;
        let t = render_targets(&cfg.scene, &cam, t_near, t_far)?;
        let n = &rc.name;
        let sparse = sparsify_depth(&t.depth, &cam, cfg.sparse_row_stride, cfg.sparse_max_elevation_deg)?;
        let mut virtual_views = Vec::new();
        if let (Some(d), CameraRole::Train) = (cfg.virtual_distance, rc.role) {
            for (k, (vcam, off)) in virtual_poses(&cam, d).iter().zip(virtual_offsets(d)).enumerate() {
                let vt = render_targets(&cfg.scene, vcam, t_near, t_far)?;
                virtual_views.push(VirtualViewSpec {
                    offset: off,
                    rgb: write(dir, &format!("{n}_virtual{k}_rgb.vxt"), &vt.rgb)?,
                    depth: write(dir, &format!("{n}_virtual{k}_depth.vxt"), &vt.depth)?,
                });
            }
        }
        specs.push(CameraSpec {
            name: n.clone(),
            width: rc.width,
            height: rc.height,
            fx: rc.fx,
            fy: rc.fy,
            cx: rc.cx,
            cy: rc.cy,
            world_from_camera: rc.world_from_camera,
            role: rc.role,
            rgb: write(dir, &format!("{n}_rgb.vxt"), &t.rgb)?,
            depth_sparse: Some(write(dir, &format!("{n}_depth_sparse.vxt"), &sparse)?),
            depth_dense: Some(write(dir, &format!("{n}_depth_dense.vxt"), &t.depth)?),
            feature: (cfg.scene.feature_channels > 0)
                .then(|| write(dir, &format!("{n}_feature.vxt"), &t.feature))
                .transpose()?,
            semantic_mask: Some(write(dir, &format!("{n}_semantic.vxt"), &t.semantic)?),
            virtual_views,
        });
        if rc.role == CameraRole::Train {
            train_cams.push(cam);
            train_depths.push(t.depth);
        }
    }
    let occupancy = match &cfg.occupancy {
        Some(region) => {
            let gt = gt_occupancy(&cfg.scene, region)?;
            let vis = visibility_mask(&gt, &train_cams, &train_depths, region.visibility_tol)?;
            let mut classes: Vec<u8> = cfg.scene.boxes.iter().map(|b| b.class_id.max(1)).collect();
            classes.sort_unstable();
            classes.dedup();
            Some(OccupancySpec {
                roi_min: region.roi_min,
                roi_max: region.roi_max,
                voxel_size: region.voxel_size,
                threshold: crate::objectives::DEFAULT_OCCUPANCY_THRESHOLD,
                gt: Some(write(dir, "occupancy_gt.vxt", &gt.to_tensor()?)?),
                visible: Some(write(dir, "occupancy_visible.vxt", &gt.with_data(vis)?.to_tensor()?)?),
                classes,
                foreground: region.foreground.clone(),
            })
        }
        None => None,
    };
    let manifest = SceneManifest {
        cameras: specs,
        contraction: cfg.contraction.clone(),
        bins: cfg.bins.clone(),
        octree: cfg.octree.clone(),
        occupancy,
        base_dir: dir.to_path_buf(),
    };
    manifest.validate()?;
    save_manifest(dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub const CLASS_GROUND: u8 = 1;
pub const CLASS_BUILDING: u8 = 2;
pub const CLASS_CAR: u8 = 3;
pub const CLASS_POLE: u8 = 4;

/// Unit-scale feature prototype per class; 8 channels.
pub fn class_feature(class_id: u8) -> Vec<f64> {
    match class_id {
        CLASS_GROUND => vec![0.9, 0.1, 0.1, 0.2, 0.1, 0.3, 0.1, 0.2],
        CLASS_BUILDING => vec![0.1, 0.9, 0.2, 0.1, 0.3, 0.1, 0.2, 0.1],
        CLASS_CAR => vec![0.2, 0.1, 0.9, 0.1, 0.1, 0.2, 0.8, 0.1],
        CLASS_POLE => vec![0.1, 0.2, 0.1, 0.9, 0.8, 0.1, 0.1, 0.3],
        _ => vec![0.5; 8],
    }
}

fn solid(min: [f64; 3], max: [f64; 3], color: [f64; 3], class_id: u8) -> BoxPrimitive {
    BoxPrimitive {
        min,
        max,
        density: 30.0,
        color,
        feature: class_feature(class_id),
        class_id,
        texture: None,
    }
}

fn rig(name: &str, position: [f64; 3], yaw: f64, role: CameraRole) -> RigCamera {
    RigCamera {
        name: name.into(),
        width: 48,
        height: 32,
        fx: 40.0,
        fy: 40.0,
        cx: 24.0,
        cy: 16.0,
        world_from_camera: yaw_pose(position, yaw),
        role,
    }
}

/// A street between two building rows with parked cars, a pole and a far
/// facade, seen by three outward cameras (yaw 0 and +-50 degrees, about 10
/// degrees of overlap) plus one held-out camera between them.
///
/// Faces that bound the occupancy region sit on voxel centers so each
/// surface maps to one layer of ground-truth voxels.
pub fn street_canyon() -> SynthConfig {
    let boxes = vec![
        solid([-30.0, -30.0, -3.0], [40.0, 30.0, -1.5], [0.35, 0.35, 0.38], CLASS_GROUND),
        solid([-30.0, 6.0, -1.5], [40.0, 12.0, 8.5], [0.75, 0.55, 0.40], CLASS_BUILDING),
        solid([-30.0, -12.0, -1.5], [40.0, -6.0, 8.5], [0.45, 0.60, 0.75], CLASS_BUILDING),
        solid([30.0, -6.0, -1.5], [34.0, 6.0, 16.0], [0.85, 0.85, 0.70], CLASS_BUILDING),
        solid([4.0, -3.5, -1.5], [6.0, -1.5, -0.5], [0.80, 0.15, 0.15], CLASS_CAR),
        solid([2.5, 2.0, -1.5], [5.0, 4.0, -0.5], [0.15, 0.25, 0.80], CLASS_CAR),
        solid([7.0, 4.5, -1.5], [7.5, 5.0, 3.0], [0.95, 0.85, 0.10], CLASS_POLE),
        solid([1.5, -5.5, -1.5], [2.0, -5.0, 2.5], [0.10, 0.80, 0.30], CLASS_POLE),
    ];
    SynthConfig {
        scene: SyntheticScene {
            boxes,
            feature_channels: 8,
        },
        cameras: vec![
            rig("front", [0.0, 0.0, 0.0], 0.0, CameraRole::Train),
            rig("left", [0.0, 0.0, 0.0], 50.0, CameraRole::Train),
            rig("right", [0.0, 0.0, 0.0], -50.0, CameraRole::Train),
            rig("heldout", [0.4, 0.0, 0.25], 22.0, CameraRole::Heldout),
        ],
        contraction: ContractionSpec {
            p_inner: [12.0, 12.0, 8.0],
            alpha: 0.8,
        },
        bins: BinSpec {
            d: 32,
            d_fine: 16,
            t_near: Some(0.5),
            t_far: Some(40.0),
        },
        octree: OctreeSpec {
            fine_level: 7,
            coarse_level: 5,
        },
        occupancy: Some(OccupancyRegion {
            roi_min: [-8.25, -8.25, -1.75],
            roi_max: [8.25, 8.25, 3.25],
            voxel_size: 0.5,
            visibility_tol: 0.3,
            foreground: vec![CLASS_CAR, CLASS_POLE],
        }),
        virtual_distance: Some(1.0),
        sparse_row_stride: 4,
        sparse_max_elevation_deg: 20.0,
    }
}

/// Two boxes on a ground slab seen by two small cameras: a fast scene for
/// smoke tests and determinism checks.
pub fn toy_box() -> SynthConfig {
    let small = |name: &str, yaw: f64| RigCamera {
        width: 16,
        height: 12,
        fx: 14.0,
        fy: 14.0,
        cx: 8.0,
        cy: 6.0,
        ..rig(name, [0.0, 0.0, 0.0], yaw, CameraRole::Train)
    };
    SynthConfig {
        scene: SyntheticScene {
            boxes: vec![
                solid([-6.0, -6.0, -2.0], [10.0, 6.0, -1.0], [0.4, 0.4, 0.4], CLASS_GROUND),
                solid([3.0, -1.0, -1.0], [4.0, 1.0, 1.0], [0.8, 0.2, 0.2], CLASS_CAR),
                solid([5.0, 1.5, -1.0], [6.0, 3.0, 2.0], [0.2, 0.3, 0.8], CLASS_BUILDING),
            ],
            feature_channels: 8,
        },
        cameras: vec![small("a", 10.0), small("b", -10.0)],
        contraction: ContractionSpec {
            p_inner: [8.0, 8.0, 4.0],
            alpha: 0.8,
        },
        bins: BinSpec {
            d: 12,
            d_fine: 6,
            t_near: Some(0.5),
            t_far: Some(20.0),
        },
        octree: OctreeSpec {
            fine_level: 6,
            coarse_level: 4,
        },
        occupancy: Some(OccupancyRegion {
            roi_min: [0.25, -3.75, -1.25],
            roi_max: [7.75, 3.75, 2.25],
            voxel_size: 0.5,
            visibility_tol: 0.3,
            foreground: vec![CLASS_CAR],
        }),
        virtual_distance: Some(1.0),
        sparse_row_stride: 2,
        sparse_max_elevation_deg: 30.0,
    }
}

/// Fine-level octree of the boxes: one point per fine cell center inside a
/// box, carrying its color and density. Boxes must lie in the inner region
/// with faces on fine cell boundaries; the coarse grid is left empty so
/// vacuum stays empty.
pub fn voxelize_boxes(scene: &SyntheticScene, contraction: &Contraction, fine_level: u32) -> Result<DualOctree> {
    let cell = 2.0 / (1u64 << fine_level) as f64 / contraction.alpha;
    let mut points = Vec::new();
    for b in &scene.boxes {
        let steps: Vec<usize> = (0..3)
            .map(|k| ((b.max[k] - b.min[k]) / (cell * contraction.p_inner[k])).round() as usize)
            .collect();
        for i in 0..steps[0] {
            for j in 0..steps[1] {
                for l in 0..steps[2] {
                    let idx = [i, j, l];
                    let p = Vec3::from_fn(|k, _| b.min[k] + (idx[k] as f64 + 0.5) * cell * contraction.p_inner[k]);
                    points.push(LiftedPoint {
                        position: p,
                        feature: b.color.to_vec(),
                        density: b.density,
                    });
                }
            }
        }
    }
    let oct = build(&points, contraction, fine_level, fine_level - 1, 0.0)?;
    Ok(DualOctree {
        fine: oct.fine,
        coarse: SparseGrid::empty(fine_level - 1, 0)?,
    })
}

/// Largest color and depth error over a set of rays at one sample count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub samples: usize,
    pub color_error: f64,
    pub depth_error: f64,
}

/// Three semi-transparent boxes aligned to the fine grid, seen by a small
/// pinhole camera at the origin looking along +x.
pub fn convergence_scene() -> (SyntheticScene, Contraction, u32, Camera) {
    let slab = |min: [f64; 3], max: [f64; 3], density: f64, color: [f64; 3]| BoxPrimitive {
        min,
        max,
        density,
        color,
        feature: vec![],
        class_id: 1,
        texture: None,
    };
    let scene = SyntheticScene {
        boxes: vec![
            slab([1.0, -1.0, -1.0], [1.5, 1.0, 1.0], 0.8, [0.9, 0.2, 0.1]),
            slab([2.0, -0.5, -1.5], [2.75, 1.5, 0.5], 1.5, [0.1, 0.7, 0.3]),
            slab([3.0, -1.5, -1.5], [3.5, 1.5, 1.5], 0.4, [0.2, 0.3, 0.9]),
        ],
        feature_channels: 0,
    };
    let contraction = Contraction::new([4.0, 4.0, 4.0], 0.5).expect("valid contraction");
    let cam = Camera::from_row_major(12, 8, [6.0, 6.0, 6.0, 4.0], &yaw_pose([0.0, 0.0, 0.0], 0.0))
        .expect("valid camera");
    (scene, contraction, 7, cam)
}

/// Render every pixel center of `cam` at each sample count (uniform samples
/// only, no jitter) and compare with [`SyntheticScene::integrate`].
pub fn convergence_study(
    scene: &SyntheticScene,
    contraction: &Contraction,
    fine_level: u32,
    cam: &Camera,
    t_near: f64,
    t_far: f64,
    counts: &[usize],
) -> Result<Vec<ConvergenceRow>> {
    let oct = voxelize_boxes(scene, contraction, fine_level)?;
    let rays: Vec<Ray> = (0..cam.height)
        .flat_map(|v| (0..cam.width).map(move |u| (u, v)))
        .map(|(u, v)| cam.pixel_center_ray(u, v))
        .collect();
    let exact: Vec<AnalyticRay> = rays.iter().map(|r| scene.integrate(r, t_near, t_far)).collect();
    counts
        .iter()
        .map(|&n| {
            let plan = SamplePlan::new(t_near, t_far, n, 0);
            let mut row = ConvergenceRow {
                samples: n,
                color_error: 0.0,
                depth_error: 0.0,
            };
            for (ray, want) in rays.iter().zip(&exact) {
                let samples = sample_uniform::<rand_chacha::ChaCha8Rng>(ray, contraction, &plan, None)?;
                let got = render_ray(&oct, contraction, &samples);
                for k in 0..3 {
                    row.color_error = row.color_error.max((got.feature[k] - want.color[k]).abs());
                }
                row.depth_error = row.depth_error.max((got.depth - want.depth).abs());
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn along_x(origin: [f64; 3]) -> Ray {
        Ray {
            origin: Vec3::from(origin),
            direction: Vec3::new(1.0, 0.0, 0.0),
        }
    }

    fn slab(x0: f64, x1: f64, density: f64) -> BoxPrimitive {
        BoxPrimitive {
            min: [x0, -1.0, -1.0],
            max: [x1, 1.0, 1.0],
            density,
            color: [1.0, 0.5, 0.0],
            feature: vec![],
            class_id: 1,
            texture: None,
        }
    }

    #[test]
    fn transmittance_examples() {
        let ray = along_x([0.0; 3]);
        let vacuum = SyntheticScene::default();
        assert_eq!(analytic_transmittance(&ray, &vacuum)(10.0), 1.0);
        let one = SyntheticScene {
            boxes: vec![slab(2.0, 4.0, 1.0)],
            feature_channels: 0,
        };
        assert!((analytic_transmittance(&ray, &one)(5.0) - (-2.0f64).exp()).abs() < 1e-15);
        let two = SyntheticScene {
            boxes: vec![slab(2.0, 3.0, 1.0), slab(3.0, 4.0, 3.0)],
            feature_channels: 0,
        };
        assert!((analytic_transmittance(&ray, &two)(9.0) - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn integral_matches_transmittance() {
        let ray = along_x([0.0; 3]);
        let s = SyntheticScene {
            boxes: vec![slab(2.0, 3.0, 0.7), slab(2.5, 5.0, 1.3)],
            feature_channels: 0,
        };
        let r = s.integrate(&ray, 0.0, 10.0);
        let t = analytic_transmittance(&ray, &s);
        assert!((r.opacity - (1.0 - t(10.0))).abs() < 1e-14);
        // depth by midpoint quadrature of -dT/dt * t
        let n = 200_000;
        let dt = 10.0 / n as f64;
        let mut depth = 0.0;
        for i in 0..n {
            let (a, b) = (i as f64 * dt, (i + 1) as f64 * dt);
            depth += (t(a) - t(b)) * 0.5 * (a + b);
        }
        assert!((r.depth - depth).abs() < 1e-6, "{} {}", r.depth, depth);
    }

    #[test]
    fn nearer_box_wins() {
        let s = SyntheticScene {
            boxes: vec![slab(5.0, 9.0, 2.0), slab(3.0, 4.0, 2.0)],
            feature_channels: 0,
        };
        assert_eq!(s.first_hit(&along_x([0.0; 3]), 0.1, 40.0), Some((3.0, 1)));
        assert_eq!(s.first_hit(&along_x([0.0, 5.0, 0.0]), 0.1, 40.0), None);
    }

    #[test]
    fn virtual_pose_offsets() {
        let cam = Camera::new(4, 4, [2.0, 2.0, 2.0, 2.0], Matrix3::identity(), Vec3::zeros()).unwrap();
        let v = virtual_poses(&cam, 1.0);
        let origins: Vec<Vec3> = v.iter().map(Camera::origin).collect();
        assert_eq!(origins, vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0)]);
        assert!(v.iter().all(|c| c.rotation() == cam.rotation()));
        assert!(virtual_poses(&cam, 0.0).iter().all(|c| *c == cam));
    }

    #[test]
    fn street_canyon_is_valid() {
        let cfg = street_canyon();
        cfg.scene.validate().unwrap();
        for c in &cfg.cameras {
            c.camera().unwrap();
        }
    }
}

/// Which depth target `eval` scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthGt {
    Sparse,
    Dense,
}

impl std::str::FromStr for DepthGt {
    type Err = Error;

    fn from_str(s: &str) -> Result<DepthGt> {
        match s {
            "sparse" => Ok(DepthGt::Sparse),
            "dense" => Ok(DepthGt::Dense),
            _ => Err(Error::validation("depth-gt", format!("expected sparse or dense, got {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEval {
    pub camera: String,
    pub role: CameraRole,
    pub metrics: MetricsReport,
}

/// PSNR, SSIM and depth metrics of one rendered view against its targets.
pub fn evaluate_render(
    out: &RenderOutput,
    m: &SceneManifest,
    spec: &CameraSpec,
    depth_gt: DepthGt,
) -> Result<MetricsReport> {
    let gt = m.load_tensor(&spec.rgb)?;
    let mut r = MetricsReport {
        psnr: Some(psnr(&out.rgb_image, &gt, 1.0)?),
        ssim: Some(ssim(&out.rgb_image, &gt)?),
        ..MetricsReport::default()
    };
    let rel = match depth_gt {
        DepthGt::Sparse => &spec.depth_sparse,
        DepthGt::Dense => &spec.depth_dense,
    };
    if let Some(rel) = rel {
        let d = m.load_tensor(rel)?;
        r.depth = Some(depth_metrics(&out.depth_image, &d, None, m.bins.range().1)?);
    }
    Ok(r)
}

/// Render every camera of the manifest from `field` and score it.
pub fn evaluate_views(field: &FittedField, m: &SceneManifest, depth_gt: DepthGt) -> Result<Vec<ViewEval>> {
    m.cameras
        .iter()
        .map(|spec| {
            let out = field.render(&spec.camera()?)?;
            Ok(ViewEval {
                camera: spec.name.clone(),
                role: spec.role,
                metrics: evaluate_render(&out, m, spec, depth_gt)?,
            })
        })
        .collect()
}

/// Mean of `metric` over the views with `role`.
pub fn mean_metric(views: &[ViewEval], role: CameraRole, metric: impl Fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = views.iter().filter(|e| e.role == role).filter_map(|e| metric(&e.metrics)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Occupancy of the fitted field over the manifest's region, labelled from
/// the training cameras' semantic masks, and its IoU against the stored
/// ground truth (restricted to the visible mask when present).
pub fn evaluate_occupancy(field: &FittedField, m: &SceneManifest) -> Result<(OccupancyGrid, Option<IouReport>)> {
    let spec = m
        .occupancy
        .as_ref()
        .ok_or_else(|| Error::validation("occupancy", "manifest has no occupancy region"))?;
    let occ = extract_occupancy(
        &field.octree,
        &field.contraction,
        spec.roi_min,
        spec.roi_max,
        spec.voxel_size,
        spec.threshold,
    )?;
    let train: Vec<&CameraSpec> = m.cameras.iter().filter(|c| c.role == CameraRole::Train).collect();
    let labelled = if train.iter().all(|c| c.semantic_mask.is_some() && c.depth_dense.is_some()) {
        let cams = train.iter().map(|c| c.camera()).collect::<Result<Vec<_>>>()?;
        let masks = train
            .iter()
            .map(|c| m.load_tensor(c.semantic_mask.as_deref().unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        let depths = train
            .iter()
            .map(|c| m.load_tensor(c.depth_dense.as_deref().unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        semantic_occupancy(&occ, &cams, &masks, Some(&depths), spec.voxel_size)?
    } else {
        occ.clone()
    };
    let Some(gt_rel) = &spec.gt else { return Ok((labelled, None)) };
    let gt = m.load_tensor(gt_rel)?;
    gt.expect_shape("occupancy ground truth", &[Some(occ.dims[0]), Some(occ.dims[1]), Some(occ.dims[2])])?;
    let visible = spec.visible.as_ref().map(|v| m.load_tensor(v)).transpose()?;
    let as_u8 = |t: &Tensor| -> Result<Vec<u8>> { Ok(t.to_f64_vec().iter().map(|&v| v as u8).collect()) };
    let vis = visible.as_ref().map(as_u8).transpose()?;
    let report = iou_suite(&labelled.data, &as_u8(&gt)?, &spec.foreground, vis.as_deref())?;
    Ok((labelled, Some(report)))
}
