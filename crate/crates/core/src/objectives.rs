//! Losses (with their reverse-mode rules), image and depth metrics,
//! occupancy extraction and scoring, PCA compression and text similarity.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Contraction, Vec3};
use crate::tensor_io::Tensor;
use crate::voxelgrid::{query_density, DualOctree};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const OPACITY_EPS: f64 = 1e-6;
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_OCCUPANCY_THRESHOLD: f64 = 0.001;
/// Class assigned to occupied voxels no camera can label.
pub const CLASS_OTHERS: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rgb: f64,
    pub w_ssim: f64,
    pub w_depth: f64,
    pub w_density: f64,
    pub w_nerf: f64,
    pub w_found: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_rgb: 1.0,
            w_ssim: 0.1,
            w_depth: 1.0,
            w_density: 0.01,
            w_nerf: 1.0,
            w_found: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("w_rgb", self.w_rgb),
            ("w_ssim", self.w_ssim),
            ("w_depth", self.w_depth),
            ("w_density", self.w_density),
            ("w_nerf", self.w_nerf),
            ("w_found", self.w_found),
        ];
        for (name, w) in named {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::validation(name, "loss weights must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// The five weights applied to [`LossComponents`], in field order.
    pub fn term_weights(&self) -> [f64; 5] {
        [self.w_rgb, self.w_depth, self.w_density, self.w_nerf, self.w_found]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_rgb: f64,
    pub l_depth: f64,
    pub l_density: f64,
    pub l_nerf: f64,
    pub l_found: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 5] {
        [self.l_rgb, self.l_depth, self.l_density, self.l_nerf, self.l_found]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_depth: f64,
    pub l_density: f64,
    pub l_nerf: f64,
    pub l_found: f64,
    pub total: f64,
}

/// Weighted sum of the loss terms.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    let names = ["l_rgb", "l_depth", "l_density", "l_nerf", "l_found"];
    let vals = c.as_array();
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical("total_loss", format!("{} is {}", names[i], vals[i])));
    }
    let total = vals.iter().zip(w.term_weights()).map(|(v, w)| v * w).sum();
    Ok(LossReport {
        l_rgb: c.l_rgb,
        l_depth: c.l_depth,
        l_density: c.l_density,
        l_nerf: c.l_nerf,
        l_found: c.l_found,
        total,
    })
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(height, width, channels)` of a rank-2 or rank-3 image.
fn image_dims(op: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w, 1)),
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Shape(format!("{op}: expected an image, got shape {s:?}"))),
    }
}

pub fn mean_abs_diff(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len().max(1) as f64
}

fn mean_abs_diff_grad(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

// ---------------------------------------------------------------- SSIM

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of an `h x w` map.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Transpose of [`filter_valid`]: spreads an `oh x ow` map back to `h x w`.
fn filter_valid_t(map: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for k in 0..SSIM_WINDOW {
                rows[(y + k) * ow + x] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += g[k] * v;
            }
        }
    }
    out
}

fn to_gray(img: &[f64], c: usize) -> Vec<f64> {
    img.chunks_exact(c).map(|p| p.iter().sum::<f64>() / c as f64).collect()
}

/// Mean SSIM of two gray images and, optionally, its gradient in `x`.
pub fn ssim_gray(x: &[f64], y: &[f64], h: usize, w: usize, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let mxx = filter_valid(&xx, h, w, &g);
    let myy = filter_valid(&yy, h, w, &g);
    let mxy = filter_valid(&xy, h, w, &g);
    let n = mx.len() as f64;
    let mut total = 0.0;
    let mut gm1 = if want_grad { vec![0.0; mx.len()] } else { Vec::new() };
    let mut gm2 = gm1.clone();
    let mut gm3 = gm1.clone();
    for i in 0..mx.len() {
        let (m1, m2) = (mx[i], my[i]);
        let a1 = 2.0 * m1 * m2 + SSIM_C1;
        let a2 = 2.0 * (mxy[i] - m1 * m2) + SSIM_C2;
        let b1 = m1 * m1 + m2 * m2 + SSIM_C1;
        let b2 = (mxx[i] - m1 * m1) + (myy[i] - m2 * m2) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            gm1[i] = s * (2.0 * m2 / a1 - 2.0 * m2 / a2 - 2.0 * m1 / b1 + 2.0 * m1 / b2) / n;
            gm2[i] = -s / b2 / n;
            gm3[i] = 2.0 * s / a2 / n;
        }
    }
    let grad = want_grad.then(|| {
        let d1 = filter_valid_t(&gm1, h, w, &g);
        let d2 = filter_valid_t(&gm2, h, w, &g);
        let d3 = filter_valid_t(&gm3, h, w, &g);
        (0..h * w).map(|p| d1[p] + 2.0 * x[p] * d2[p] + y[p] * d3[p]).collect()
    });
    Ok((total / n, grad))
}

/// Mean local SSIM on the channel-mean gray images.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("ssim", pred, gt)?;
    let (h, w, c) = image_dims("ssim", pred)?;
    let x = to_gray(&pred.to_f64_vec(), c);
    let y = to_gray(&gt.to_f64_vec(), c);
    Ok(ssim_gray(&x, &y, h, w, false)?.0)
}

/// `L1 + w_ssim * (1 - SSIM)` on flat `[H,W,C]` images, with gradient.
pub fn loss_rgb_grad(pred: &[f64], gt: &[f64], h: usize, w: usize, c: usize, w_ssim: f64) -> Result<(f64, Vec<f64>)> {
    let mut value = mean_abs_diff(pred, gt);
    let mut grad = mean_abs_diff_grad(pred, gt);
    if w_ssim != 0.0 {
        let (s, gs) = ssim_gray(&to_gray(pred, c), &to_gray(gt, c), h, w, true)?;
        value += w_ssim * (1.0 - s);
        let gs = gs.expect("gradient requested");
        for (p, g) in grad.chunks_exact_mut(c).zip(gs) {
            p.iter_mut().for_each(|v| *v -= w_ssim * g / c as f64);
        }
    }
    Ok((value, grad))
}

pub fn loss_rgb(pred: &Tensor, gt: &Tensor, w_ssim: f64) -> Result<f64> {
    same_shape("loss_rgb", pred, gt)?;
    let (h, w, c) = image_dims("loss_rgb", pred)?;
    let pred = pred.to_f64_vec();
    let gt = gt.to_f64_vec();
    let mut v = mean_abs_diff(&pred, &gt);
    if w_ssim != 0.0 {
        v += w_ssim * (1.0 - ssim_gray(&to_gray(&pred, c), &to_gray(&gt, c), h, w, false)?.0);
    }
    Ok(v)
}

// ---------------------------------------------------------------- depth

/// Masked mean of `(|e| + e^2) / max_gt` with its gradient in `pred`.
/// An empty mask (or a non-positive normalizer) is an error.
pub fn loss_depth_grad(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = mask.iter().filter(|&&m| m).count();
    let max_gt = gt.iter().zip(mask).filter(|(_, &m)| m).map(|(g, _)| *g).fold(0.0, f64::max);
    if n == 0 || !(max_gt > 0.0) {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / (max_gt * n as f64);
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let e = pred[i] - gt[i];
        value += e.abs() + e * e;
        grad[i] = (e.signum() * (e != 0.0) as u8 as f64 + 2.0 * e) * scale;
    }
    Ok((value * scale, grad))
}

pub fn loss_depth(pred: &Tensor, gt: &Tensor, valid_mask: Option<&[bool]>) -> Result<f64> {
    same_shape("loss_depth", pred, gt)?;
    let gt_v = gt.to_f64_vec();
    let mask: Vec<bool> = match valid_mask {
        Some(m) if m.len() == gt_v.len() => m.to_vec(),
        Some(m) => return Err(Error::Shape(format!("mask has {} entries for {} pixels", m.len(), gt_v.len()))),
        None => vec![true; gt_v.len()],
    };
    Ok(loss_depth_grad(&pred.to_f64_vec(), &gt_v, &mask)?.0)
}

/// Mean of `-ln(clamp(opacity, eps, 1 - eps))` with its gradient.
pub fn loss_density_entropy_grad(opacity: &[f64]) -> (f64, Vec<f64>) {
    let n = opacity.len().max(1) as f64;
    let mut value = 0.0;
    let grad = opacity
        .iter()
        .map(|&o| {
            let c = o.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
            value -= c.ln();
            if o > OPACITY_EPS && o < 1.0 - OPACITY_EPS {
                -1.0 / (o * n)
            } else {
                0.0
            }
        })
        .collect();
    (value / n, grad)
}

pub fn loss_density_entropy(opacity: &Tensor) -> f64 {
    loss_density_entropy_grad(&opacity.to_f64_vec()).0
}

pub fn loss_feature(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("loss_feature", pred, gt)?;
    Ok(mean_abs_diff(&pred.to_f64_vec(), &gt.to_f64_vec()))
}

pub fn loss_feature_grad(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    (mean_abs_diff(pred, gt), mean_abs_diff_grad(pred, gt))
}

/// One rendered virtual view with its targets.
pub struct VirtualTerm<'a> {
    pub pred_rgb: &'a Tensor,
    pub gt_rgb: &'a Tensor,
    pub pred_depth: &'a Tensor,
    pub gt_depth: &'a Tensor,
}

/// Dense depth loss on the real view plus the mean over virtual views of
/// their RGB and depth losses.
pub fn loss_nerf_distill(pred_depth: &Tensor, nerf_depth: &Tensor, virtual_views: &[VirtualTerm], w_ssim: f64) -> Result<f64> {
    let mut v = loss_depth(pred_depth, nerf_depth, None)?;
    if !virtual_views.is_empty() {
        let mut acc = 0.0;
        for t in virtual_views {
            acc += loss_rgb(t.pred_rgb, t.gt_rgb, w_ssim)? + loss_depth(t.pred_depth, t.gt_depth, None)?;
        }
        v += acc / virtual_views.len() as f64;
    }
    Ok(v)
}

// ---------------------------------------------------------------- metrics

pub fn psnr_raw(pred: &[f64], gt: &[f64], peak: f64) -> f64 {
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len().max(1) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(pred: &Tensor, gt: &Tensor, peak: f64) -> Result<f64> {
    same_shape("psnr", pred, gt)?;
    Ok(psnr_raw(&pred.to_f64_vec(), &gt.to_f64_vec(), peak))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Standard monocular depth metrics over pixels that are in the mask and
/// have `0 < gt <= max_depth`. Predictions are clamped to `[1e-3, max_depth]`.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, valid_mask: Option<&[bool]>, max_depth: f64) -> Result<DepthMetrics> {
    same_shape("depth_metrics", pred, gt)?;
    let (p, g) = (pred.to_f64_vec(), gt.to_f64_vec());
    if let Some(m) = valid_mask {
        if m.len() != g.len() {
            return Err(Error::Shape(format!("mask has {} entries for {} pixels", m.len(), g.len())));
        }
    }
    let mut n = 0usize;
    let mut acc = [0.0f64; 4];
    let mut hits = [0usize; 3];
    for i in 0..g.len() {
        if valid_mask.is_some_and(|m| !m[i]) || !(g[i] > 0.0 && g[i] <= max_depth) {
            continue;
        }
        let pi = p[i].clamp(1e-3, max_depth);
        let e = pi - g[i];
        acc[0] += e.abs() / g[i];
        acc[1] += e * e / g[i];
        acc[2] += e * e;
        acc[3] += (pi.ln() - g[i].ln()).powi(2);
        let ratio = (pi / g[i]).max(g[i] / pi);
        for (k, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *h += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: acc[0] / nf,
        sq_rel: acc[1] / nf,
        rmse: (acc[2] / nf).sqrt(),
        rmse_log: (acc[3] / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_binary: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_miou: Option<f64>,
}

// ---------------------------------------------------------------- occupancy

/// Voxel grid over an axis-aligned region; `data` is `[nx, ny, nz]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub roi_min: [f64; 3],
    pub voxel_size: f64,
    pub data: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(roi_min: [f64; 3], roi_max: [f64; 3], voxel_size: f64) -> Result<OccupancyGrid> {
        if !(voxel_size > 0.0) {
            return Err(Error::validation("voxel_size", "must be > 0"));
        }
        let mut dims = [0usize; 3];
        for k in 0..3 {
            let n = ((roi_max[k] - roi_min[k]) / voxel_size).round();
            if !(n >= 1.0) {
                return Err(Error::validation("roi_max", "region must span at least one voxel per axis"));
            }
            dims[k] = n as usize;
        }
        Ok(OccupancyGrid {
            dims,
            roi_min,
            voxel_size,
            data: vec![0; dims[0] * dims[1] * dims[2]],
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.roi_min[0] + (i as f64 + 0.5) * self.voxel_size,
            self.roi_min[1] + (j as f64 + 0.5) * self.voxel_size,
            self.roi_min[2] + (k as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Center of flat voxel index `idx`.
    pub fn center_of(&self, idx: usize) -> Vec3 {
        let k = idx % self.dims[2];
        let j = idx / self.dims[2] % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        self.center(i, j, k)
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_u8(self.dims.to_vec(), self.data.clone())
    }

    pub fn with_data(&self, data: Vec<u8>) -> Result<OccupancyGrid> {
        if data.len() != self.data.len() {
            return Err(Error::Shape(format!("grid has {} voxels, got {}", self.data.len(), data.len())));
        }
        Ok(OccupancyGrid { data, ..self.clone() })
    }
}

/// 1 where the density queried at the voxel center is at least `threshold`.
pub fn extract_occupancy(
    oct: &DualOctree,
    contraction: &Contraction,
    roi_min: [f64; 3],
    roi_max: [f64; 3],
    voxel_size: f64,
    threshold: f64,
) -> Result<OccupancyGrid> {
    let mut grid = OccupancyGrid::new(roi_min, roi_max, voxel_size)?;
    for idx in 0..grid.len() {
        let s = contraction.contract(&grid.center_of(idx));
        grid.data[idx] = (query_density(oct, &s) >= threshold) as u8;
    }
    Ok(grid)
}

/// Label occupied voxels by projecting their centers into class masks.
///
/// The first camera that sees the center in bounds, and (when depth maps are
/// given) not more than `depth_tol` behind its surface, assigns the class.
pub fn semantic_occupancy(
    occ: &OccupancyGrid,
    cams: &[Camera],
    masks: &[Tensor],
    depths: Option<&[Tensor]>,
    depth_tol: f64,
) -> Result<OccupancyGrid> {
    if masks.len() != cams.len() || depths.is_some_and(|d| d.len() != cams.len()) {
        return Err(Error::Shape("one mask (and depth map) per camera required".into()));
    }
    let mask_vals: Vec<Vec<f64>> = masks.iter().map(Tensor::to_f64_vec).collect();
    let depth_vals: Option<Vec<Vec<f64>>> = depths.map(|d| d.iter().map(Tensor::to_f64_vec).collect());
    for (cam, m) in cams.iter().zip(masks) {
        m.expect_shape("semantic mask", &[Some(cam.height), Some(cam.width)])?;
    }
    let mut out = vec![0u8; occ.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        if occ.data[idx] == 0 {
            continue;
        }
        let p = occ.center_of(idx);
        *o = CLASS_OTHERS;
        for (ci, cam) in cams.iter().enumerate() {
            let Some((u, v, _)) = cam.project(&p) else { continue };
            if !(u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64) {
                continue;
            }
            let pix = v as usize * cam.width + u as usize;
            if let Some(dv) = &depth_vals {
                if (p - cam.origin()).norm() > dv[ci][pix] + depth_tol {
                    continue;
                }
            }
            *o = mask_vals[ci][pix].round().clamp(0.0, 255.0) as u8;
            break;
        }
    }
    occ.with_data(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub iou_binary: f64,
    pub per_class: Vec<(u8, f64)>,
    pub miou: f64,
    pub f_miou: f64,
}

/// Occupancy IoU ignoring class, per-class IoU, their mean, and the mean over
/// `foreground` classes. Class 0 is free space. Voxels outside `mask` (when
/// given) are ignored; classes absent from both grids are skipped.
pub fn iou_suite(pred: &[u8], gt: &[u8], foreground: &[u8], mask: Option<&[u8]>) -> Result<IouReport> {
    if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::Shape("iou_suite grids differ in size".into()));
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i] != 0);
    let (mut inter, mut union) = (0usize, 0usize);
    let mut ci = [0usize; 256];
    let mut cu = [0usize; 256];
    for i in (0..gt.len()).filter(|&i| keep(i)) {
        let (p, g) = (pred[i], gt[i]);
        if p != 0 && g != 0 {
            inter += 1;
        }
        if p != 0 || g != 0 {
            union += 1;
        }
        if p == g && p != 0 {
            ci[p as usize] += 1;
            cu[p as usize] += 1;
        } else {
            if p != 0 {
                cu[p as usize] += 1;
            }
            if g != 0 {
                cu[g as usize] += 1;
            }
        }
    }
    let iou_binary = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let per_class: Vec<(u8, f64)> = (1..256)
        .filter(|&c| cu[c] > 0)
        .map(|c| (c as u8, ci[c] as f64 / cu[c] as f64))
        .collect();
    let mean = |it: Vec<f64>| if it.is_empty() { 1.0 } else { it.iter().sum::<f64>() / it.len() as f64 };
    let miou = mean(per_class.iter().map(|p| p.1).collect());
    let f_miou = mean(per_class.iter().filter(|p| foreground.contains(&p.0)).map(|p| p.1).collect());
    Ok(IouReport {
        iou_binary,
        per_class,
        miou,
        f_miou,
    })
}

// ---------------------------------------------------------------- PCA

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `C`.
    pub basis: Vec<Vec<f64>>,
    /// Variance captured by each row, non-increasing.
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|b| b.iter().zip(x).zip(&self.mean).map(|((b, x), m)| b * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (b, zi) in self.basis.iter().zip(z) {
            out.iter_mut().zip(b).for_each(|(o, b)| *o += zi * b);
        }
        out
    }
}

/// Top-`k` principal directions of the rows of `samples` (`[N, C]`).
pub fn pca_fit(samples: &Tensor, k: usize) -> Result<Pca> {
    samples.expect_shape("pca samples", &[None, None])?;
    let (n, c) = (samples.shape()[0], samples.shape()[1]);
    if n <= k {
        return Err(Error::Rank(format!("pca needs more than {k} samples, got {n}")));
    }
    if k == 0 || k > c {
        return Err(Error::Rank(format!("cannot keep {k} of {c} components")));
    }
    let x = samples.to_f64_vec();
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, c, |i, j| x[i * c + j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = order[..k]
        .iter()
        .map(|&j| eig.eigenvectors.column(j).iter().copied().collect())
        .collect();
    let variances = order[..k].iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();
    Ok(Pca { mean, basis, variances })
}

// ---------------------------------------------------------------- text query

/// Per-pixel cosine similarity to `embedding`, min-max normalized over the
/// image. A constant similarity map becomes all 0.5.
pub fn text_query(feature_image: &Tensor, embedding: &[f64]) -> Result<Tensor> {
    feature_image.expect_shape("feature image", &[None, None, Some(embedding.len())])?;
    let en = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(en > 0.0) {
        return Err(Error::Domain("text embedding has zero norm".into()));
    }
    let c = embedding.len();
    let sims: Vec<f64> = feature_image
        .to_f64_vec()
        .chunks_exact(c)
        .map(|f| {
            let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if fnorm == 0.0 {
                0.0
            } else {
                f.iter().zip(embedding).map(|(a, b)| a * b).sum::<f64>() / (fnorm * en)
            }
        })
        .collect();
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = sims
        .iter()
        .map(|s| if hi > lo { (s - lo) / (hi - lo) } else { 0.5 })
        .collect();
    Tensor::from_f64(feature_image.shape()[..2].to_vec(), norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_f64(vec![h, w, c], (0..h * w * c).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn rgb_loss_examples() {
        let a = img(12, 12, 3, 1);
        assert_eq!(loss_rgb(&a, &a, 0.1).unwrap(), 0.0);
        let base = Tensor::from_f64(vec![12, 12, 3], vec![0.3; 432]).unwrap();
        let shifted = Tensor::from_f64(vec![12, 12, 3], vec![0.4; 432]).unwrap();
        assert!((loss_rgb(&shifted, &base, 0.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(loss_rgb(&a, &img(12, 11, 3, 1), 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn depth_loss_examples() {
        let p = Tensor::from_f64(vec![1, 1], vec![8.0]).unwrap();
        let g = Tensor::from_f64(vec![1, 1], vec![10.0]).unwrap();
        assert!((loss_depth(&p, &g, None).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(loss_depth(&g, &g, None).unwrap(), 0.0);
        assert!(matches!(loss_depth(&p, &g, Some(&[false])), Err(Error::EmptyMask)));
        let p2 = Tensor::from_f64(vec![1, 2], vec![10.0, 3.0]).unwrap();
        let g2 = Tensor::from_f64(vec![1, 2], vec![10.0, 5.0]).unwrap();
        assert_eq!(loss_depth(&p2, &g2, Some(&[true, false])).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        let t = |v: f64| Tensor::from_f64(vec![1], vec![v]).unwrap();
        assert!((loss_density_entropy(&t(1.0)) - 1e-6).abs() < 1e-9);
        assert!((loss_density_entropy(&t(0.5)) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss_density_entropy(&t(0.0)) - 13.815510557964274).abs() < 1e-9);
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, 3, 2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let z = Tensor::from_f64(vec![4], vec![0.0; 4]).unwrap();
        let o = Tensor::from_f64(vec![4], vec![0.1; 4]).unwrap();
        assert!((psnr(&z, &o, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = img(16, 16, 3, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let bin: Vec<f64> = (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
        let inv: Vec<f64> = bin.iter().map(|v| 1.0 - v).collect();
        let b = Tensor::from_f64(vec![16, 16], bin).unwrap();
        let bi = Tensor::from_f64(vec![16, 16], inv).unwrap();
        assert!(ssim(&b, &bi).unwrap() < 0.0);
        assert!(matches!(ssim(&img(8, 16, 1, 0), &img(8, 16, 1, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_gradient_matches_differences() {
        let (h, w) = (13, 14);
        let x: Vec<f64> = img(h, w, 1, 5).to_f64_vec();
        let y: Vec<f64> = img(h, w, 1, 6).to_f64_vec();
        let (_, g) = ssim_gray(&x, &y, h, w, true).unwrap();
        let g = g.unwrap();
        for &i in &[0usize, 17, 50, 91, 181] {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let num = (ssim_gray(&p, &y, h, w, false).unwrap().0 - ssim_gray(&m, &y, h, w, false).unwrap().0) / 2e-5;
            assert!((num - g[i]).abs() < 1e-7, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn delta_thresholds() {
        let g = Tensor::from_f64(vec![2, 2], vec![1.0, 2.0, 5.0, 10.0]).unwrap();
        let p = Tensor::from_f64(vec![2, 2], vec![1.3, 2.6, 6.5, 13.0]).unwrap();
        let m = depth_metrics(&p, &g, None, 80.0).unwrap();
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 1.0, 1.0));
        assert!((m.abs_rel - 0.3).abs() < 1e-12);
        let same = depth_metrics(&g, &g, None, 80.0).unwrap();
        assert_eq!((same.abs_rel, same.rmse, same.delta1, same.delta3), (0.0, 0.0, 1.0, 1.0));
        assert!(matches!(depth_metrics(&p, &g, Some(&[false; 4]), 80.0), Err(Error::EmptyMask)));
    }

    #[test]
    fn iou_examples() {
        let a = [0u8, 1, 1, 2, 2, 3];
        let r = iou_suite(&a, &a, &[2], None).unwrap();
        assert_eq!((r.iou_binary, r.miou, r.f_miou), (1.0, 1.0, 1.0));
        let r = iou_suite(&[1, 1, 0, 0], &[0, 0, 1, 1], &[1], None).unwrap();
        assert_eq!((r.iou_binary, r.miou), (0.0, 0.0));
        let pred = [1u8, 1, 2, 2, 0, 3, 3];
        let gt = [1u8, 2, 2, 2, 3, 3, 0];
        let r = iou_suite(&pred, &gt, &[2, 3], None).unwrap();
        // class 1: inter 1 / union 2; class 2: 2 / 3; class 3: 1 / 3
        assert_eq!(r.per_class, vec![(1, 0.5), (2, 2.0 / 3.0), (3, 1.0 / 3.0)]);
        assert!((r.f_miou - 0.5).abs() < 1e-15);
        assert!((r.iou_binary - 5.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn pca_exact_subspace() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let (u, v) = ([1.0, 2.0, 0.0, -1.0, 0.5], [0.0, 1.0, 1.0, 1.0, -2.0]);
        let mut data = Vec::new();
        for _ in 0..40 {
            let (a, b): (f64, f64) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
            for j in 0..5 {
                data.push(10.0 + a * u[j] + b * v[j]);
            }
        }
        let t = Tensor::from_f64(vec![40, 5], data.clone()).unwrap();
        let p = pca_fit(&t, 2).unwrap();
        for row in data.chunks_exact(5) {
            let rec = p.reconstruct(&p.project(row));
            assert!(rec.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-9));
        }
        assert!(matches!(pca_fit(&t, 40), Err(Error::Rank(_))));
    }

    #[test]
    fn text_query_examples() {
        let f = Tensor::from_f64(vec![1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.7, 0.7]).unwrap();
        let q = text_query(&f, &[1.0, 0.0]).unwrap().to_f64_vec();
        assert_eq!(q[0], 1.0);
        assert_eq!(q[1], 0.0);
        let flat = Tensor::from_f64(vec![1, 2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(text_query(&flat, &[1.0, 0.0]).unwrap().to_f64_vec(), vec![0.5, 0.5]);
        assert!(matches!(text_query(&f, &[0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn total_loss_rules() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap().total, 0.0);
        let c = LossComponents {
            l_rgb: 1.0,
            l_depth: 2.0,
            l_density: 3.0,
            l_nerf: 4.0,
            l_found: 5.0,
        };
        let unit = LossWeights {
            w_rgb: 1.0,
            w_ssim: 0.0,
            w_depth: 1.0,
            w_density: 1.0,
            w_nerf: 1.0,
            w_found: 1.0,
        };
        assert_eq!(total_loss(&c, &unit).unwrap().total, 15.0);
        let bad = LossComponents { l_nerf: f64::NAN, ..c };
        assert!(matches!(total_loss(&bad, &w), Err(Error::Numerical { .. })));
    }
}
