//! Per-scene fitting of the lifted field against a scene manifest.
//!
//! Depth parameters live on every `depth_row_stride`-th image row of each
//! training camera (the rows a LiDAR-like sensor covers). Rows in between
//! take their coarse depth by interpolating inverse z-depth between the
//! neighbouring control rows, and their fine-stage logits by blending the
//! control rows' logits, so every pixel has a window and a fine distribution.
//!
//! Each step: depth frustums, lift pixel features, average into the fixed
//! cell pattern, gate the densities, convolve, pool, render every training
//! camera (plus one virtual view each when enabled), decode, score, step Adam.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::*;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::frustum::{fine_candidates, forward_gaps, pixel_bins, DepthBins, DEFAULT_BETA};
use crate::geometry::{grid_coords, morton_encode, Camera, Contraction, Ray, Vec3};
use crate::objectives::{total_loss, LossComponents, LossReport, LossWeights};
use crate::optim::{adam_step, AdamConfig, OptimizerState, ParamRole, Parameter};
use crate::renderer::{camera_rays, render_image, DensityView, Decoder, RayBatch, RenderOutput, SamplePlan};
use crate::tensor_io::{CameraRole, SceneManifest, Tensor};
use crate::voxelgrid::{parent_key, CellIndex, ConvKernel, DualOctree, PoolMap, SparseGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub enable_nerf_distill: bool,
    pub enable_virtual: bool,
    pub enable_feature_distill: bool,
    pub adam: AdamConfig,
    pub samples_uniform: usize,
    pub samples_importance: usize,
    /// Half-width of the fine window in coarse bins.
    pub beta: f64,
    pub depth_row_stride: usize,
    /// Re-derive the cell pattern from the current lift every this many steps.
    pub rebuild_every: usize,
    /// Stop re-deriving after this fraction of the steps.
    pub rebuild_until: f64,
    /// Initial value of the per-cell additive density logit.
    pub floor_logit: f64,
    /// Learning-rate multiplier for the convolution, decoder and feature head.
    pub dense_lr_scale: f64,
    /// Learning-rate multiplier for the per-cell density gates and floors.
    pub density_lr_scale: f64,
    /// Learning-rate multiplier for the per-view depth logits.
    pub lifter_lr_scale: f64,
    /// Give every occupied coarse cell all of its fine children.
    pub complete_children: bool,
    /// Fine cells that receive no lifted point take the mean lifted density
    /// of their neighbours.
    pub fill_empty: bool,
    pub snap_tol: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 2000,
            seed: 0,
            weights: LossWeights::default(),
            enable_nerf_distill: false,
            enable_virtual: false,
            enable_feature_distill: false,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            samples_uniform: 32,
            samples_importance: 16,
            beta: DEFAULT_BETA,
            depth_row_stride: 4,
            rebuild_every: 100,
            rebuild_until: 0.6,
            floor_logit: -12.0,
            dense_lr_scale: 0.1,
            density_lr_scale: 1.0,
            lifter_lr_scale: 5.0,
            complete_children: true,
            fill_empty: false,
            snap_tol: Some(1e-4),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.samples_uniform < 2 {
            return Err(Error::validation("samples_uniform", "need at least 2"));
        }
        if self.depth_row_stride == 0 {
            return Err(Error::validation("depth_row_stride", "must be >= 1"));
        }
        if !(self.adam.lr > 0.0) || !(self.adam.clip_norm > 0.0) {
            return Err(Error::validation("adam", "lr and clip_norm must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::validation("beta", "must be positive"));
        }
        for (name, v) in [
            ("dense_lr_scale", self.dense_lr_scale),
            ("density_lr_scale", self.density_lr_scale),
            ("lifter_lr_scale", self.lifter_lr_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn plan(&self, t_near: f64, t_far: f64) -> SamplePlan {
        SamplePlan::new(t_near, t_far, self.samples_uniform, self.samples_importance).with_snap(self.snap_tol)
    }
}

/// Masked depth target.
struct DepthTarget {
    values: Arc<Vec<f64>>,
    mask: Arc<Vec<bool>>,
}

impl DepthTarget {
    fn new(values: Vec<f64>) -> Option<DepthTarget> {
        let mask: Vec<bool> = values.iter().map(|&v| v > 0.0).collect();
        mask.iter().any(|&m| m).then(|| DepthTarget {
            values: Arc::new(values),
            mask: Arc::new(mask),
        })
    }

    fn pick(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.values[i]).collect()
    }
}

/// Index of the entry of `t` nearest to `depth`.
fn nearest(t: &[f64], depth: f64) -> u32 {
    let i = t.partition_point(|&x| x < depth);
    let below = i.saturating_sub(1);
    if i < t.len() && (t[i] - depth).abs() < (depth - t[below]).abs() {
        i as u32
    } else {
        below as u32
    }
}

/// Per-ray target bins for rays with a positive depth.
fn target_bins(t: &[f64], bins: usize, depth: &[f64]) -> Arc<Vec<u32>> {
    Arc::new(
        depth
            .iter()
            .zip(t.chunks(bins))
            .map(|(&d, t)| if d > 0.0 { nearest(t, d) } else { NO_BIN })
            .collect(),
    )
}

struct VirtualTarget {
    cam: Camera,
    rays: Vec<Ray>,
    rgb: Arc<Vec<f64>>,
    depth: Option<DepthTarget>,
}

struct View {
    cam: Camera,
    rays: Vec<Ray>,
    /// Image rows carrying depth parameters.
    control_rows: Vec<usize>,
    /// Pixel index of every control pixel, row-major over control rows.
    control_pixels: Vec<usize>,
    control_t: Arc<Vec<f64>>,
    control_delta: Arc<Vec<f64>>,
    /// Per image row: (control row a, control row b, weight of b), weight
    /// clamped to [0, 1]. Used for the fine logits.
    row_blend: Arc<Vec<(u32, u32, f64)>>,
    /// Same rows without clamping, for extrapolating inverse depth.
    row_extrapolate: Vec<(usize, usize, f64)>,
    /// `|ray direction in camera frame|` over its z component, per pixel.
    ray_stretch: Vec<f64>,
    bins: Vec<DepthBins>,
    phi: Arc<Vec<f64>>,
    rgb: Arc<Vec<f64>>,
    sparse: Option<DepthTarget>,
    sparse_control: Option<Arc<Vec<u32>>>,
    dense: Option<DepthTarget>,
    dense_control: Option<Arc<Vec<u32>>>,
    feature: Option<Arc<Vec<f64>>>,
    virtuals: Vec<VirtualTarget>,
}

fn downsample2(rgb: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                let at = |rr: usize, cc: usize| rgb[(rr * 2 * w + cc) * 3 + k];
                out[(r * w + c) * 3 + k] =
                    0.25 * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1));
            }
        }
    }
    out
}

fn blend_tables(h: usize, stride: usize) -> (Vec<usize>, Vec<(u32, u32, f64)>, Vec<(usize, usize, f64)>) {
    let rows: Vec<usize> = (stride / 2..h).step_by(stride).collect();
    let n = rows.len();
    let mut clamped = Vec::with_capacity(h);
    let mut free = Vec::with_capacity(h);
    for v in 0..h {
        if n == 1 {
            clamped.push((0, 0, 0.0));
            free.push((0, 0, 0.0));
            continue;
        }
        let b = rows.partition_point(|&r| r < v).clamp(1, n - 1);
        let a = b - 1;
        let l = (v as f64 - rows[a] as f64) / (rows[b] - rows[a]) as f64;
        free.push((a, b, l));
        clamped.push(if l <= 0.0 {
            (a as u32, a as u32, 0.0)
        } else if l >= 1.0 {
            (b as u32, b as u32, 0.0)
        } else {
            (a as u32, b as u32, l)
        });
    }
    (rows, clamped, free)
}

fn load_depth(m: &SceneManifest, rel: &Option<String>, cam: &Camera) -> Result<Option<DepthTarget>> {
    match rel {
        None => Ok(None),
        Some(r) => {
            let t = m.load_tensor(r)?;
            t.expect_shape(r, &[Some(cam.height), Some(cam.width)])?;
            Ok(DepthTarget::new(t.to_f64_vec()))
        }
    }
}

fn load_rgb(m: &SceneManifest, rel: &str, cam: &Camera) -> Result<Vec<f64>> {
    let t = m.load_tensor(rel)?;
    t.expect_shape(rel, &[Some(2 * cam.height), Some(2 * cam.width), Some(3)])?;
    Ok(t.to_f64_vec())
}

fn missing(what: &str, cam: &str) -> Error {
    Error::Config(format!("camera {cam}: {what} target required by an enabled loss is missing"))
}

impl View {
    fn load(m: &SceneManifest, spec_idx: usize, cfg: &FitConfig, contraction: &Contraction) -> Result<View> {
        let spec = &m.cameras[spec_idx];
        let cam = spec.camera()?;
        let (h, w) = (cam.height, cam.width);
        let (t_near, t_far) = m.bins.range();
        let rgb = load_rgb(m, &spec.rgb, &cam)?;
        let mut phi = Vec::new();
        let small = downsample2(&rgb, h, w);
        let feature = if cfg.enable_feature_distill {
            let rel = spec.feature.as_ref().ok_or_else(|| missing("feature", &spec.name))?;
            let t = m.load_tensor(rel)?;
            t.expect_shape(rel, &[Some(h), Some(w), None])?;
            Some(t.to_f64_vec())
        } else {
            None
        };
        let cf = feature.as_ref().map_or(0, |f| f.len() / (h * w));
        for p in 0..h * w {
            phi.extend_from_slice(&small[p * 3..p * 3 + 3]);
            if let Some(f) = &feature {
                phi.extend_from_slice(&f[p * cf..(p + 1) * cf]);
            }
            phi.push(1.0);
        }
        let sparse = load_depth(m, &spec.depth_sparse, &cam)?;
        if cfg.weights.w_depth > 0.0 && sparse.is_none() {
            return Err(missing("sparse depth", &spec.name));
        }
        let dense = if cfg.enable_nerf_distill && cfg.weights.w_nerf > 0.0 {
            Some(load_depth(m, &spec.depth_dense, &cam)?.ok_or_else(|| missing("dense depth", &spec.name))?)
        } else {
            None
        };
        let mut virtuals = Vec::new();
        if cfg.enable_nerf_distill && cfg.enable_virtual && cfg.weights.w_nerf > 0.0 {
            if spec.virtual_views.is_empty() {
                return Err(missing("virtual view", &spec.name));
            }
            for vv in &spec.virtual_views {
                let vcam = cam.translated_local(&Vec3::from(vv.offset));
                let rays = camera_rays(&vcam);
                virtuals.push(VirtualTarget {
                    rgb: Arc::new(load_rgb(m, &vv.rgb, &vcam)?),
                    depth: load_depth(m, &Some(vv.depth.clone()), &vcam)?,
                    cam: vcam,
                    rays,
                });
            }
        }
        let (control_rows, row_blend, row_extrapolate) = blend_tables(h, cfg.depth_row_stride);
        let control_pixels: Vec<usize> = control_rows.iter().flat_map(|&r| (0..w).map(move |c| r * w + c)).collect();
        let bins = pixel_bins(&cam, contraction, t_near, t_far, m.bins.d)?;
        let control_t: Vec<f64> = control_pixels.iter().flat_map(|&p| bins[p].t().to_vec()).collect();
        let control_delta = control_pixels.iter().flat_map(|&p| bins[p].delta().to_vec()).collect();
        let ray_stretch = (0..h * w)
            .map(|p| {
                let x = ((p % w) as f64 + 0.5 - cam.cx) / cam.fx;
                let y = ((p / w) as f64 + 0.5 - cam.cy) / cam.fy;
                (x * x + y * y + 1.0).sqrt()
            })
            .collect();
        Ok(View {
            rays: camera_rays(&cam),
            sparse_control: sparse.as_ref().map(|s| target_bins(&control_t, m.bins.d, &s.pick(&control_pixels))),
            dense_control: dense.as_ref().map(|s| target_bins(&control_t, m.bins.d, &s.pick(&control_pixels))),
            sparse,
            dense,
            cam,
            control_rows,
            control_pixels,
            control_t: Arc::new(control_t.clone()),
            control_delta: Arc::new(control_delta),
            row_blend: Arc::new(row_blend),
            row_extrapolate,
            ray_stretch,
            bins,
            phi: Arc::new(phi),
            rgb: Arc::new(rgb),
            feature: feature.map(Arc::new),
            virtuals,
        })
    }

    fn pixels(&self) -> usize {
        self.cam.width * self.cam.height
    }

    /// Coarse depth of every pixel from the control pixels' expected depths,
    /// interpolated linearly in inverse z-depth along each column.
    fn pixel_depths(&self, control: &[f64], t_near: f64, t_far: f64) -> Vec<f64> {
        let w = self.cam.width;
        (0..self.pixels())
            .map(|p| {
                let (row, col) = (p / w, p % w);
                let (a, b, l) = self.row_extrapolate[row];
                let inv = |r: usize| {
                    let t = control[r * w + col].max(t_near);
                    self.ray_stretch[self.control_rows[r] * w + col] / t
                };
                let q = (1.0 - l) * inv(a) + l * inv(b);
                if q > 0.0 {
                    (self.ray_stretch[p] / q).clamp(t_near, t_far)
                } else {
                    t_far
                }
            })
            .collect()
    }
}

/// Cells of the current pattern with precomputed neighbourhoods.
struct Pattern {
    fine: Arc<CellIndex>,
    coarse: Arc<CellIndex>,
    neighbors: Arc<Vec<[u32; 27]>>,
    pool: Arc<PoolMap>,
}

impl Pattern {
    fn from_keys(fine_keys: Vec<u64>, fine_level: u32, coarse_level: u32) -> Result<Pattern> {
        let shift = fine_level - coarse_level;
        let coarse_keys = fine_keys.iter().map(|&k| parent_key(k, shift)).collect();
        let fine = Arc::new(CellIndex::new(fine_level, fine_keys)?);
        let coarse = Arc::new(CellIndex::new(coarse_level, coarse_keys)?);
        let neighbors = Arc::new(fine.neighbor_table());
        let pool = Arc::new(PoolMap::new(&fine, &coarse)?);
        Ok(Pattern {
            fine,
            coarse,
            neighbors,
            pool,
        })
    }
}

/// Everything needed to render a fitted field.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedField {
    pub octree: DualOctree,
    pub contraction: Contraction,
    pub plan: SamplePlan,
    pub decoder: Decoder,
    /// `(weights [C, F], bias [F])` mapping rendered features to distilled ones.
    pub feature_head: Option<(Vec<f64>, Vec<f64>)>,
}

impl FittedField {
    pub fn render(&self, cam: &Camera) -> Result<RenderOutput> {
        render_image(&self.octree, &self.contraction, cam, &self.plan, &self.decoder)
    }

    /// Distilled feature image `[H, W, F]` from a rendered feature image.
    pub fn predict_features(&self, rendered: &Tensor) -> Result<Option<Tensor>> {
        let Some((w, b)) = &self.feature_head else { return Ok(None) };
        let s = rendered.shape();
        let (h, wd, c) = (s[0], s[1], s[2]);
        let f = b.len();
        let op = LinearHead { c_in: c, c_out: f };
        let x = rendered.to_f64_vec();
        let (out, _) = crate::autodiff::tape::Op::forward(&op, &[&x, w, b])?;
        Ok(Some(Tensor::from_f64(vec![h, wd, f], out)?))
    }
}

pub struct FitResult {
    pub config: FitConfig,
    pub field: FittedField,
    pub params: Vec<Parameter>,
    pub optimizer: OptimizerState,
    pub history: Vec<LossReport>,
}

/// Indices into the parameter list.
struct Slots {
    views: usize,
    fine_residual: usize,
    fine_gate: usize,
    fine_floor: usize,
    coarse_residual: usize,
    coarse_gate: usize,
    coarse_floor: usize,
    conv_w: usize,
    conv_b: usize,
    dec_w: usize,
    dec_b: usize,
    head: Option<(usize, usize)>,
}

impl Slots {
    fn voxel(&self) -> [(usize, bool, usize); 6] {
        // (slot, fine grid?, values per cell; 0 = feature width)
        [
            (self.fine_residual, true, 0),
            (self.fine_gate, true, 1),
            (self.fine_floor, true, 1),
            (self.coarse_residual, false, 0),
            (self.coarse_gate, false, 1),
            (self.coarse_floor, false, 1),
        ]
    }
}

struct Fitter {
    cfg: FitConfig,
    contraction: Contraction,
    t_near: f64,
    t_far: f64,
    d: usize,
    d_fine: usize,
    fine_level: u32,
    coarse_level: u32,
    views: Vec<View>,
    channels: usize,
    feature_channels: usize,
    params: Vec<Parameter>,
    slots: Slots,
    optimizer: OptimizerState,
    pattern: Option<Pattern>,
    rng: ChaCha8Rng,
}

/// Initial logits for a flat occupancy over `delta.len()` bins: each bin
/// takes the same share of the mass with an equal share left over.
fn flat_logits(delta: &[f64]) -> Vec<f64> {
    let n = delta.len();
    delta
        .iter()
        .enumerate()
        .map(|(d, &dl)| {
            let x = -(1.0 - 1.0 / (n + 1 - d) as f64).ln();
            softplus_inverse((x / dl).max(1e-9))
        })
        .collect()
}

/// Tape values of the lift and voxel stage.
struct FieldVars {
    fine_features: Var,
    coarse_features: Var,
    fine_density: Var,
    coarse_density: Var,
    control_occupancy: Vec<Var>,
    fine_occupancy: Vec<Var>,
    fine_t: Vec<Arc<Vec<f64>>>,
    params: Vec<Var>,
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(vec![0.0]));
    }
    let w = 1.0 / terms.len() as f64;
    tape.apply(WeightedSum(vec![w; terms.len()]), terms)
}

fn sum_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(vec![0.0]));
    }
    tape.apply(WeightedSum(vec![1.0; terms.len()]), terms)
}

fn bin_loss(tape: &mut Tape, occupancy: Var, target: Arc<Vec<u32>>, bins: usize) -> Result<Var> {
    tape.apply(BinCrossEntropy { target, bins, eps: 1e-6 }, &[occupancy])
}

fn depth_loss(tape: &mut Tape, pred: Var, t: &DepthTarget) -> Result<Var> {
    tape.apply(
        LossDepthOp {
            target: t.values.clone(),
            mask: t.mask.clone(),
        },
        &[pred],
    )
}

impl Fitter {
    fn new(m: &SceneManifest, cfg: &FitConfig) -> Result<Fitter> {
        cfg.validate()?;
        m.validate()?;
        let contraction = m.contraction.contraction()?;
        let (t_near, t_far) = m.bins.range();
        let views = m
            .cameras
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == CameraRole::Train)
            .map(|(i, _)| View::load(m, i, cfg, &contraction))
            .collect::<Result<Vec<_>>>()?;
        if views.is_empty() {
            return Err(Error::validation("cameras", "no training camera"));
        }
        let channels = views[0].phi.len() / views[0].pixels();
        if views.iter().any(|v| v.phi.len() != v.pixels() * channels) {
            return Err(Error::Shape("feature targets differ in width across cameras".into()));
        }
        let feature_channels = channels - 4;
        let d_fine = m.bins.d_fine;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();
        for (i, v) in views.iter().enumerate() {
            let l1: Vec<f64> = v.control_delta.chunks(m.bins.d).flat_map(flat_logits).collect();
            let l2 = flat_logits(&vec![1.0 / (d_fine as f64); d_fine]);
            let l2 = l2.iter().copied().cycle().take(v.control_pixels.len() * d_fine).collect();
            params.push(Parameter::new(format!("camera{i}.depth_logits"), ParamRole::DepthLogitStage1, l1));
            params.push(Parameter::new(format!("camera{i}.fine_depth_logits"), ParamRole::DepthLogitStage2, l2));
        }
        let base = params.len();
        for (name, role) in [
            ("fine.feature", ParamRole::VoxelFeature),
            ("fine.gate", ParamRole::VoxelDensityLogit),
            ("fine.floor", ParamRole::VoxelDensityLogit),
            ("coarse.feature", ParamRole::VoxelFeature),
            ("coarse.gate", ParamRole::VoxelDensityLogit),
            ("coarse.floor", ParamRole::VoxelDensityLogit),
        ] {
            params.push(Parameter::new(name, role, vec![]));
        }
        let mut kernel = ConvKernel::identity(channels).weights;
        kernel.iter_mut().for_each(|k| *k += rng.gen_range(-1e-2..1e-2));
        params.push(Parameter::new("conv.weights", ParamRole::ConvKernel, kernel));
        params.push(Parameter::new("conv.bias", ParamRole::ConvBias, vec![0.0; channels]));
        let width = 3 * channels;
        params.push(Parameter::new("decoder.weights", ParamRole::Decoder, vec![0.0; 12 * width * 9]));
        params.push(Parameter::new("decoder.bias", ParamRole::Decoder, vec![0.0; 12]));
        let head = if cfg.enable_feature_distill {
            let n = params.len();
            params.push(Parameter::new("head.weights", ParamRole::Decoder, vec![0.0; width * feature_channels]));
            params.push(Parameter::new("head.bias", ParamRole::Decoder, vec![0.0; feature_channels]));
            Some((n, n + 1))
        } else {
            None
        };
        let slots = Slots {
            views: views.len(),
            fine_residual: base,
            fine_gate: base + 1,
            fine_floor: base + 2,
            coarse_residual: base + 3,
            coarse_gate: base + 4,
            coarse_floor: base + 5,
            conv_w: base + 6,
            conv_b: base + 7,
            dec_w: base + 8,
            dec_b: base + 9,
            head,
        };
        for p in params.iter_mut().take(base) {
            p.lr_scale = cfg.lifter_lr_scale;
        }
        for k in [1, 2, 4, 5] {
            params[base + k].lr_scale = cfg.density_lr_scale;
        }
        for p in params.iter_mut().skip(base + 6) {
            p.lr_scale = cfg.dense_lr_scale;
        }
        let optimizer = OptimizerState::new(cfg.adam, &params);
        Ok(Fitter {
            cfg: cfg.clone(),
            contraction,
            t_near,
            t_far,
            d: m.bins.d,
            d_fine,
            fine_level: m.octree.fine_level,
            coarse_level: m.octree.coarse_level,
            views,
            channels,
            feature_channels,
            params,
            slots,
            optimizer,
            pattern: None,
            rng,
        })
    }

    fn rebuild_due(&self, step: usize) -> bool {
        self.pattern.is_none()
            || (self.cfg.rebuild_every > 0
                && step % self.cfg.rebuild_every == 0
                && (step as f64) < self.cfg.rebuild_until * self.cfg.steps as f64)
    }

    /// Swap in a new cell pattern, carrying voxel parameters and their
    /// optimizer moments over by cell key.
    fn install_pattern(&mut self, pattern: Pattern) {
        let c = self.channels;
        let old = self.pattern.take();
        for (slot, fine, per) in self.slots.voxel() {
            let per = if per == 0 { c } else { per };
            let new_cells = if fine { &pattern.fine } else { &pattern.coarse };
            let default = if slot == self.slots.fine_floor || slot == self.slots.coarse_floor {
                self.cfg.floor_logit
            } else {
                0.0
            };
            let old_cells = old.as_ref().map(|p| if fine { p.fine.clone() } else { p.coarse.clone() });
            let remap = |vals: &[f64], fill: f64| -> Vec<f64> {
                let mut out = vec![fill; new_cells.len() * per];
                if let Some(oc) = &old_cells {
                    let lookup: FxHashMap<u64, usize> = oc.keys().iter().enumerate().map(|(i, &k)| (k, i)).collect();
                    for (j, k) in new_cells.keys().iter().enumerate() {
                        if let Some(&i) = lookup.get(k) {
                            out[j * per..(j + 1) * per].copy_from_slice(&vals[i * per..(i + 1) * per]);
                        }
                    }
                }
                out
            };
            let p = &mut self.params[slot];
            p.values = remap(&p.values, default);
            p.grad = vec![0.0; p.values.len()];
            self.optimizer.first_moment[slot] = remap(&self.optimizer.first_moment[slot], 0.0);
            self.optimizer.second_moment[slot] = remap(&self.optimizer.second_moment[slot], 0.0);
        }
        self.pattern = Some(pattern);
    }

    /// Depth frustums, lift, cell averages, gates, convolution and pooling.
    fn field(&mut self, tape: &mut Tape, step: usize) -> Result<FieldVars> {
        let (d, df, c) = (self.d, self.d_fine, self.channels);
        let mut params: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut control_occupancy = Vec::new();
        let mut fine_occupancy = Vec::new();
        let mut fine_t = Vec::new();
        let mut sig = Vec::new();
        let mut lifted = Vec::new();
        let mut keys: Vec<u64> = Vec::new();
        for (i, v) in self.views.iter().enumerate() {
            let l1 = tape.param(self.params[2 * i].values.clone());
            let l2 = tape.param(self.params[2 * i + 1].values.clone());
            params[2 * i] = Some(l1);
            params[2 * i + 1] = Some(l2);
            let s1 = tape.apply(Softplus, &[l1])?;
            let o1 = tape.apply(
                BatchedOccupancy {
                    delta: v.control_delta.clone(),
                    bins: d,
                },
                &[s1],
            )?;
            let dc = tape.apply(
                BatchedExpectedDepth {
                    t: v.control_t.clone(),
                    bins: d,
                },
                &[o1],
            )?;
            control_occupancy.push(o1);
            let depths = v.pixel_depths(tape.value(dc), self.t_near, self.t_far);
            let mut ft = Vec::with_capacity(v.pixels() * df);
            let mut fd = Vec::with_capacity(v.pixels() * df);
            for (p, &dp) in depths.iter().enumerate() {
                let cand = fine_candidates(dp, &v.bins[p], df, self.cfg.beta);
                fd.extend(forward_gaps(&cand));
                ft.extend(cand);
            }
            let blended = tape.apply(
                RowBlend {
                    blend: v.row_blend.clone(),
                    row_len: v.cam.width * df,
                },
                &[l2],
            )?;
            let s2 = tape.apply(Softplus, &[blended])?;
            let o2 = tape.apply(
                BatchedOccupancy {
                    delta: Arc::new(fd),
                    bins: df,
                },
                &[s2],
            )?;
            let ft = Arc::new(ft);
            fine_occupancy.push(o2);
            fine_t.push(ft.clone());
            let phi = tape.constant(v.phi.to_vec());
            lifted.push(tape.apply(LiftFeatures { bins: df, channels: c }, &[o2, phi])?);
            sig.push(s2);
            for (k, &t) in ft.iter().enumerate() {
                let s = self.contraction.contract(&v.rays[k / df].at(t));
                keys.push(morton_encode(grid_coords(&s, self.fine_level)));
            }
        }
        if self.rebuild_due(step) {
            let mut fine_keys = keys.clone();
            if self.cfg.complete_children {
                let shift = self.fine_level - self.coarse_level;
                let mut parents: Vec<u64> = keys.iter().map(|&k| parent_key(k, shift)).collect();
                parents.sort_unstable();
                parents.dedup();
                fine_keys = parents
                    .iter()
                    .flat_map(|&p| (0..1u64 << (3 * shift)).map(move |i| (p << (3 * shift)) | i))
                    .collect();
            }
            let pattern = Pattern::from_keys(fine_keys, self.fine_level, self.coarse_level)?;
            self.install_pattern(pattern);
        }
        let pattern = self.pattern.as_ref().expect("pattern installed");
        let shift = self.fine_level - self.coarse_level;
        let assign_fine: Vec<u32> = keys.iter().map(|&k| pattern.fine.find(k).map_or(UNASSIGNED, |i| i as u32)).collect();
        let assign_coarse: Vec<u32> = keys
            .iter()
            .map(|&k| pattern.coarse.find(parent_key(k, shift)).map_or(UNASSIGNED, |i| i as u32))
            .collect();
        let (assign_fine, assign_coarse) = (Arc::new(assign_fine), Arc::new(assign_coarse));
        let (nf, nc) = (pattern.fine.len(), pattern.coarse.len());
        let neighbors = pattern.neighbors.clone();
        let pool = pattern.pool.clone();
        for (j, slot) in params.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(tape.param(self.params[j].values.clone()));
            }
        }
        let pv: Vec<Var> = params.into_iter().map(|v| v.expect("all parameters on tape")).collect();
        let s = &self.slots;
        let sig_all = tape.apply(Concat, &sig)?;
        let lift_all = tape.apply(Concat, &lifted)?;
        let fill = self.cfg.fill_empty.then(|| {
            let mut empty = vec![true; nf];
            for &a in assign_fine.iter().filter(|&&a| a != UNASSIGNED) {
                empty[a as usize] = false;
            }
            FillEmpty {
                neighbors: neighbors.clone(),
                empty: Arc::new(empty),
            }
        });
        let density = |tape: &mut Tape, assign: &Arc<Vec<u32>>, cells: usize, gate: usize, floor: usize, fill: Option<FillEmpty>| -> Result<Var> {
            let mut mean = tape.apply(
                CellMean {
                    assign: assign.clone(),
                    cells,
                    channels: 1,
                },
                &[sig_all],
            )?;
            if let Some(op) = fill {
                mean = tape.apply(op, &[mean])?;
            }
            let g = tape.apply(Exp, &[pv[gate]])?;
            let gated = tape.apply(Mul, &[mean, g])?;
            let fl = tape.apply(Softplus, &[pv[floor]])?;
            tape.apply(Add, &[gated, fl])
        };
        let fine_density = density(tape, &assign_fine, nf, s.fine_gate, s.fine_floor, fill)?;
        let coarse_density = density(tape, &assign_coarse, nc, s.coarse_gate, s.coarse_floor, None)?;
        let ff = tape.apply(
            CellMean {
                assign: assign_fine,
                cells: nf,
                channels: c,
            },
            &[lift_all],
        )?;
        let ff = tape.apply(Add, &[ff, pv[s.fine_residual]])?;
        let fine_features = tape.apply(
            SparseConvOp {
                neighbors,
                c_in: c,
                c_out: c,
            },
            &[ff, pv[s.conv_w], pv[s.conv_b]],
        )?;
        let cf = tape.apply(
            CellMean {
                assign: assign_coarse,
                cells: nc,
                channels: c,
            },
            &[lift_all],
        )?;
        let cf = tape.apply(Add, &[cf, pv[s.coarse_residual]])?;
        let coarse_features = tape.apply(
            PoolConcatOp {
                map: pool,
                coarse_channels: c,
                fine_channels: c,
            },
            &[cf, fine_features],
        )?;
        Ok(FieldVars {
            fine_features,
            coarse_features,
            fine_density,
            coarse_density,
            control_occupancy,
            fine_occupancy,
            fine_t,
            params: pv,
        })
    }

    /// Render `rays` from the field on the tape: `(features, depth, opacity, rgb)`.
    fn render(
        &self,
        tape: &mut Tape,
        f: &FieldVars,
        cam: &Camera,
        rays: &[Ray],
        jitter: u64,
    ) -> Result<(Var, Var, Var, Var)> {
        let pattern = self.pattern.as_ref().expect("pattern installed");
        let plan = self.cfg.plan(self.t_near, self.t_far);
        let view = DensityView {
            fine: &pattern.fine,
            coarse: &pattern.coarse,
            fine_density: tape.value(f.fine_density),
            coarse_density: tape.value(f.coarse_density),
        };
        let batch = RayBatch::build(rays, &self.contraction, &plan, &view, Some(jitter))?;
        let c = self.channels;
        let out = tape.apply(
            RenderOp {
                batch: Arc::new(batch),
                fine_channels: c,
                coarse_channels: 2 * c,
            },
            &[f.fine_features, f.coarse_features, f.fine_density, f.coarse_density],
        )?;
        let (r, width) = (rays.len(), 3 * c);
        let feat = tape.apply(Slice { start: 0, len: r * width }, &[out])?;
        let depth = tape.apply(Slice { start: r * width, len: r }, &[out])?;
        let opacity = tape.apply(Slice { start: r * width + r, len: r }, &[out])?;
        let rgb = tape.apply(
            DecodeOp {
                height: cam.height,
                width: cam.width,
                channels: width,
            },
            &[feat, f.params[self.slots.dec_w], f.params[self.slots.dec_b]],
        )?;
        Ok((feat, depth, opacity, rgb))
    }

    fn rgb_loss(&self, tape: &mut Tape, rgb: Var, target: &Arc<Vec<f64>>, cam: &Camera) -> Result<Var> {
        tape.apply(
            LossRgbOp {
                target: target.clone(),
                height: 2 * cam.height,
                width: 2 * cam.width,
                channels: 3,
                w_ssim: self.cfg.weights.w_ssim,
            },
            &[rgb],
        )
    }

    fn step(&mut self, step: usize) -> Result<LossReport> {
        let mut tape = Tape::new();
        let f = self.field(&mut tape, step)?;
        let w = self.cfg.weights;
        let nerf = self.cfg.enable_nerf_distill && w.w_nerf > 0.0;
        let mut l_rgb = Vec::new();
        let mut l_depth = Vec::new();
        let mut l_density = Vec::new();
        let mut l_dense = Vec::new();
        let mut l_virtual = Vec::new();
        let mut l_found = Vec::new();
        for (i, v) in self.views.iter().enumerate() {
            let jitter = self.rng.gen::<u64>();
            let (feat, depth, opacity, rgb) = self.render(&mut tape, &f, &v.cam, &v.rays, jitter)?;
            l_rgb.push(self.rgb_loss(&mut tape, rgb, &v.rgb, &v.cam)?);
            l_density.push(tape.apply(EntropyOp, &[opacity])?);
            if w.w_depth > 0.0 {
                let mut terms = Vec::new();
                if let Some(t) = &v.sparse {
                    terms.push(depth_loss(&mut tape, depth, t)?);
                    terms.push(bin_loss(&mut tape, f.fine_occupancy[i], target_bins(&f.fine_t[i], self.d_fine, &t.values), self.d_fine)?);
                }
                if let Some(b) = &v.sparse_control {
                    terms.push(bin_loss(&mut tape, f.control_occupancy[i], b.clone(), self.d)?);
                }
                l_depth.push(sum_of(&mut tape, &terms)?);
            }
            if nerf {
                let mut terms = Vec::new();
                if let Some(t) = &v.dense {
                    terms.push(depth_loss(&mut tape, depth, t)?);
                    terms.push(bin_loss(&mut tape, f.fine_occupancy[i], target_bins(&f.fine_t[i], self.d_fine, &t.values), self.d_fine)?);
                }
                if let Some(b) = &v.dense_control {
                    terms.push(bin_loss(&mut tape, f.control_occupancy[i], b.clone(), self.d)?);
                }
                l_dense.push(sum_of(&mut tape, &terms)?);
                if !v.virtuals.is_empty() {
                    let k = self.rng.gen_range(0..v.virtuals.len());
                    let jitter = self.rng.gen::<u64>();
                    let vt = &v.virtuals[k];
                    let (_, vd, _, vrgb) = self.render(&mut tape, &f, &vt.cam, &vt.rays, jitter)?;
                    let mut terms = vec![self.rgb_loss(&mut tape, vrgb, &vt.rgb, &vt.cam)?];
                    if let Some(t) = &vt.depth {
                        terms.push(depth_loss(&mut tape, vd, t)?);
                    }
                    l_virtual.push(sum_of(&mut tape, &terms)?);
                }
            }
            if let (Some((hw, hb)), Some(target)) = (self.slots.head, &v.feature) {
                let head = tape.apply(
                    LinearHead {
                        c_in: 3 * self.channels,
                        c_out: self.feature_channels,
                    },
                    &[feat, f.params[hw], f.params[hb]],
                )?;
                l_found.push(tape.apply(LossFeatureOp { target: target.clone() }, &[head])?);
            }
        }
        let dense = mean_of(&mut tape, &l_dense)?;
        let virt = mean_of(&mut tape, &l_virtual)?;
        let terms = [
            mean_of(&mut tape, &l_rgb)?,
            mean_of(&mut tape, &l_depth)?,
            mean_of(&mut tape, &l_density)?,
            sum_of(&mut tape, &[dense, virt])?,
            mean_of(&mut tape, &l_found)?,
        ];
        let total = tape.apply(WeightedSum(w.term_weights().to_vec()), &terms)?;
        let comps = LossComponents {
            l_rgb: tape.scalar(terms[0]),
            l_depth: tape.scalar(terms[1]),
            l_density: tape.scalar(terms[2]),
            l_nerf: tape.scalar(terms[3]),
            l_found: tape.scalar(terms[4]),
        };
        let report = total_loss(&comps, &w)?;
        let grads = tape.backward(total)?;
        for (p, &v) in self.params.iter_mut().zip(&f.params) {
            let g = grads.get_or_zeros(v, p.len());
            p.set_grad(g)?;
        }
        adam_step(&mut self.optimizer, &mut self.params)?;
        Ok(report)
    }

    /// The field at the current parameters.
    fn fitted(&mut self, step: usize) -> Result<FittedField> {
        let mut tape = Tape::new();
        let f = self.field(&mut tape, step)?;
        let pattern = self.pattern.as_ref().expect("pattern installed");
        let c = self.channels;
        let counts = |assign_cells: &CellIndex| vec![1u32; assign_cells.len()];
        let fine = SparseGrid::from_parts(
            pattern.fine.clone(),
            c,
            tape.value(f.fine_features).to_vec(),
            tape.value(f.fine_density).to_vec(),
            counts(&pattern.fine),
        )?;
        let coarse = SparseGrid::from_parts(
            pattern.pool.out.clone(),
            2 * c,
            tape.value(f.coarse_features).to_vec(),
            tape.value(f.coarse_density).to_vec(),
            counts(&pattern.pool.out),
        )?;
        let s = &self.slots;
        Ok(FittedField {
            octree: DualOctree { fine, coarse },
            contraction: self.contraction,
            plan: self.cfg.plan(self.t_near, self.t_far),
            decoder: Decoder::Learnable {
                channels: 3 * c,
                weights: self.params[s.dec_w].values.clone(),
                bias: self.params[s.dec_b].values.clone(),
            },
            feature_head: s.head.map(|(w, b)| (self.params[w].values.clone(), self.params[b].values.clone())),
        })
    }
}

/// Fit a field to the training cameras of `manifest`. With `progress`,
/// called after every step with the step index and its report.
pub fn fit_with(
    manifest: &SceneManifest,
    cfg: &FitConfig,
    mut progress: impl FnMut(usize, &LossReport),
) -> Result<FitResult> {
    let mut fitter = Fitter::new(manifest, cfg)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let r = fitter.step(k)?;
        progress(k, &r);
        history.push(r);
    }
    let field = fitter.fitted(cfg.steps)?;
    debug_assert_eq!(fitter.slots.views, fitter.views.len());
    Ok(FitResult {
        config: cfg.clone(),
        field,
        params: fitter.params,
        optimizer: fitter.optimizer,
        history,
    })
}

pub fn fit(manifest: &SceneManifest, cfg: &FitConfig) -> Result<FitResult> {
    fit_with(manifest, cfg, |_, _| {})
}

pub const HISTORY_HEADER: &str = "step,l_rgb,l_depth,l_density,l_nerf,l_found,total";

/// One CSV row per step, shortest round-trip float formatting.
pub fn history_csv(history: &[LossReport]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for (i, r) in history.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            r.l_rgb, r.l_depth, r.l_density, r.l_nerf, r.l_found, r.total
        ));
    }
    s
}
