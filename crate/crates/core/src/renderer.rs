//! Two-phase ray sampling and volume rendering from a [`DualOctree`].
//!
//! Samples are laid out in contracted distance (the same warp the depth bins
//! use). Each sample owns the slice of the ray between the contracted
//! midpoints to its neighbours, with the first slice starting at `t_near` and
//! the last ending at `t_far`; those widths are the `delta` fed to the
//! occupancy weights, so a piecewise-constant field is integrated over an
//! exact partition of `[t_near, t_far]`.
//!
//! Before compositing, a slice boundary that falls between two samples in
//! different cells is moved onto the cell face itself (found by bisection),
//! so each slice lies inside the cell its sample queries.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frustum::{occupancy_unchecked, occupancy_vjp_x};
use crate::geometry::{Camera, Contraction, DepthWarp, Ray, Vec3};
use crate::tensor_io::Tensor;
use crate::voxelgrid::{CellIndex, DualOctree};

pub const DEFAULT_UNIFORM_SAMPLES: usize = 64;
pub const DEFAULT_IMPORTANCE_SAMPLES: usize = 32;
pub const EPS_FLOOR: f64 = 1e-5;
/// Bisection tolerance, in metres, for snapping slice bounds to cell faces.
pub const SNAP_TOL: f64 = 1e-9;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Contracted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePlan {
    pub t_near: f64,
    pub t_far: f64,
    pub n_uniform: usize,
    pub n_importance: usize,
    pub spacing: Spacing,
    pub eps_floor: f64,
    /// `None` keeps the contracted midpoints as slice bounds.
    pub snap_tol: Option<f64>,
}

impl SamplePlan {
    pub fn new(t_near: f64, t_far: f64, n_uniform: usize, n_importance: usize) -> SamplePlan {
        SamplePlan {
            t_near,
            t_far,
            n_uniform,
            n_importance,
            spacing: Spacing::Contracted,
            eps_floor: EPS_FLOOR,
            snap_tol: Some(SNAP_TOL),
        }
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> SamplePlan {
        self.spacing = spacing;
        self
    }

    pub fn with_snap(mut self, tol: Option<f64>) -> SamplePlan {
        self.snap_tol = tol;
        self
    }
    fn warp(&self, contraction: &Contraction, ray: &Ray) -> DepthWarp {
        match self.spacing {
            Spacing::Linear => DepthWarp::linear(),
            Spacing::Contracted => contraction.depth_warp(&ray.direction),
        }
    }

    fn strata(&self, warp: &DepthWarp) -> Vec<f64> {
        let (s0, s1) = (warp.forward(self.t_near), warp.forward(self.t_far));
        let n = self.n_uniform;
        (0..=n).map(|i| s0 + (s1 - s0) * i as f64 / n as f64).collect()
    }
}

/// Sorted sample distances with contracted positions and partition widths.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub ray: Ray,
    pub t: Vec<f64>,
    pub positions: Vec<Vec3>,
    /// `len + 1` slice bounds from `t_near` to `t_far`.
    pub bounds: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    fn assemble(ray: &Ray, contraction: &Contraction, warp: &DepthWarp, plan: &SamplePlan, mut t: Vec<f64>) -> RaySamples {
        t.sort_by(f64::total_cmp);
        t.dedup();
        let bounds = partition_bounds(&t, warp, plan.t_near, plan.t_far);
        let deltas = widths(&bounds);
        let positions = t.iter().map(|&ti| contraction.contract(&ray.at(ti))).collect();
        RaySamples {
            ray: *ray,
            t,
            positions,
            bounds,
            deltas,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Bounds of the slices of `[t_near, t_far]` owned by each sorted sample.
pub fn partition_bounds(t: &[f64], warp: &DepthWarp, t_near: f64, t_far: f64) -> Vec<f64> {
    let mut bounds = Vec::with_capacity(t.len() + 1);
    bounds.push(t_near);
    for w in t.windows(2) {
        let mid = 0.5 * (warp.forward(w[0]) + warp.forward(w[1]));
        bounds.push(warp.inverse(mid).clamp(t_near, t_far));
    }
    bounds.push(t_far);
    bounds
}

fn widths(bounds: &[f64]) -> Vec<f64> {
    bounds.windows(2).map(|b| (b[1] - b[0]).max(0.0)).collect()
}

/// Widths of the slices of `[t_near, t_far]` owned by each sorted sample.
pub fn partition_widths(t: &[f64], warp: &DepthWarp, t_near: f64, t_far: f64) -> Vec<f64> {
    widths(&partition_bounds(t, warp, t_near, t_far))
}

/// Move the bound between consecutive samples whose cell lookups differ onto
/// the first point after the earlier sample where the lookup changes.
fn snap_bounds(
    ray: &Ray,
    contraction: &Contraction,
    view: &DensityView,
    t: &[f64],
    lookups: &[(u32, u32)],
    bounds: &mut [f64],
    tol: f64,
) {
    for i in 0..t.len().saturating_sub(1) {
        if lookups[i] == lookups[i + 1] {
            continue;
        }
        let (mut lo, mut hi) = (t[i], t[i + 1]);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if view.lookup(&contraction.contract(&ray.at(mid))) == lookups[i] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        bounds[i + 1] = hi;
    }
}

fn stratified<R: Rng>(strata: &[f64], warp: &DepthWarp, rng: Option<&mut R>) -> Vec<f64> {
    let n = strata.len() - 1;
    match rng {
        None => (0..n).map(|i| warp.inverse(0.5 * (strata[i] + strata[i + 1]))).collect(),
        Some(rng) => (0..n)
            .map(|i| warp.inverse(strata[i] + rng.gen::<f64>() * (strata[i + 1] - strata[i])))
            .collect(),
    }
}

/// One sample per equal stratum of contracted distance: midpoints without
/// `rng`, uniform within each stratum with it.
pub fn sample_uniform<R: Rng>(
    ray: &Ray,
    contraction: &Contraction,
    plan: &SamplePlan,
    rng: Option<&mut R>,
) -> Result<RaySamples> {
    if plan.n_uniform < 2 {
        return Err(Error::validation("N1", "need at least 2 uniform samples"));
    }
    let warp = plan.warp(contraction, ray);
    let t = stratified(&plan.strata(&warp), &warp, rng);
    Ok(RaySamples::assemble(ray, contraction, &warp, plan, t))
}

/// Inverse-CDF draws over the uniform strata with mass `weights + eps_floor`.
/// Without `rng` the draws sit at the stratified quantiles `(k + 0.5) / n`.
pub fn importance_draws<R: Rng>(strata: &[f64], weights: &[f64], eps: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    let mut acc = 0.0;
    cdf.push(0.0);
    for w in weights {
        acc += w.max(0.0) + eps;
        cdf.push(acc);
    }
    let us: Vec<f64> = match rng {
        None => (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect(),
        Some(rng) => (0..n).map(|_| rng.gen::<f64>()).collect(),
    };
    us.into_iter()
        .map(|u| {
            let target = u * acc;
            let i = (cdf.partition_point(|&c| c <= target).max(1) - 1).min(weights.len() - 1);
            let span = cdf[i + 1] - cdf[i];
            let frac = if span > 0.0 { ((target - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.5 };
            strata[i] + frac * (strata[i + 1] - strata[i])
        })
        .collect()
}

/// Add `n_importance` samples drawn from the phase-one weights and merge.
pub fn sample_importance<R: Rng>(
    ray: &Ray,
    contraction: &Contraction,
    plan: &SamplePlan,
    phase1: &RaySamples,
    weights: &[f64],
    rng: Option<&mut R>,
) -> Result<RaySamples> {
    if weights.len() != plan.n_uniform || phase1.len() != plan.n_uniform {
        return Err(Error::Shape(format!(
            "{} weights and {} samples for {} strata",
            weights.len(),
            phase1.len(),
            plan.n_uniform
        )));
    }
    let warp = plan.warp(contraction, ray);
    let strata = plan.strata(&warp);
    let mut t = phase1.t.clone();
    t.extend(
        importance_draws(&strata, weights, plan.eps_floor, plan.n_importance, rng)
            .into_iter()
            .map(|s| warp.inverse(s).clamp(plan.t_near, plan.t_far)),
    );
    Ok(RaySamples::assemble(ray, contraction, &warp, plan, t))
}

/// Cell sets plus densities: enough to place importance samples.
#[derive(Clone, Copy)]
pub struct DensityView<'a> {
    pub fine: &'a CellIndex,
    pub coarse: &'a CellIndex,
    pub fine_density: &'a [f64],
    pub coarse_density: &'a [f64],
}

impl<'a> DensityView<'a> {
    pub fn of(oct: &'a DualOctree) -> DensityView<'a> {
        DensityView {
            fine: oct.fine.cells(),
            coarse: oct.coarse.cells(),
            fine_density: oct.fine.density(),
            coarse_density: oct.coarse.density(),
        }
    }

    fn lookup(&self, s: &Vec3) -> (u32, u32) {
        (
            self.fine.locate(s).map_or(NONE, |i| i as u32),
            self.coarse.locate(s).map_or(NONE, |i| i as u32),
        )
    }

    fn density(&self, f: u32, c: u32) -> f64 {
        if f != NONE {
            self.fine_density[f as usize]
        } else if c != NONE {
            self.coarse_density[c as usize]
        } else {
            0.0
        }
    }
}

/// Samples of many rays with their cell lookups, ready for batched rendering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RayBatch {
    pub offsets: Vec<usize>,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub fine: Vec<u32>,
    pub coarse: Vec<u32>,
}

struct RayLookup {
    t: Vec<f64>,
    delta: Vec<f64>,
    fine: Vec<u32>,
    coarse: Vec<u32>,
}

fn plan_ray(
    ray: &Ray,
    contraction: &Contraction,
    plan: &SamplePlan,
    view: &DensityView,
    mut rng: Option<ChaCha8Rng>,
) -> Result<RayLookup> {
    let phase1 = sample_uniform(ray, contraction, plan, rng.as_mut())?;
    let samples = if plan.n_importance > 0 {
        let idx: Vec<(u32, u32)> = phase1.positions.iter().map(|s| view.lookup(s)).collect();
        let sigma: Vec<f64> = idx.iter().map(|&(f, c)| view.density(f, c)).collect();
        let w = occupancy_unchecked(&sigma, &phase1.deltas);
        sample_importance(ray, contraction, plan, &phase1, &w, rng.as_mut())?
    } else {
        phase1
    };
    let lookups: Vec<(u32, u32)> = samples.positions.iter().map(|s| view.lookup(s)).collect();
    let mut bounds = samples.bounds;
    if let Some(tol) = plan.snap_tol {
        snap_bounds(ray, contraction, view, &samples.t, &lookups, &mut bounds, tol);
    }
    let (fine, coarse) = lookups.into_iter().unzip();
    Ok(RayLookup {
        t: samples.t,
        delta: widths(&bounds),
        fine,
        coarse,
    })
}

impl RayBatch {
    /// Sample every ray. With `jitter_seed`, ray `i` draws from its own
    /// stream seeded by `(seed, i)` so results do not depend on scheduling.
    pub fn build(
        rays: &[Ray],
        contraction: &Contraction,
        plan: &SamplePlan,
        view: &DensityView,
        jitter_seed: Option<u64>,
    ) -> Result<RayBatch> {
        let per_ray: Vec<RayLookup> = rays
            .par_iter()
            .enumerate()
            .map(|(i, ray)| {
                let rng = jitter_seed.map(|s| {
                    let mut r = ChaCha8Rng::seed_from_u64(s);
                    r.set_stream(i as u64);
                    r
                });
                plan_ray(ray, contraction, plan, view, rng)
            })
            .collect::<Result<_>>()?;
        let total: usize = per_ray.iter().map(|r| r.t.len()).sum();
        let mut b = RayBatch {
            offsets: Vec::with_capacity(rays.len() + 1),
            t: Vec::with_capacity(total),
            delta: Vec::with_capacity(total),
            fine: Vec::with_capacity(total),
            coarse: Vec::with_capacity(total),
        };
        b.offsets.push(0);
        for r in per_ray {
            b.t.extend(r.t);
            b.delta.extend(r.delta);
            b.fine.extend(r.fine);
            b.coarse.extend(r.coarse);
            b.offsets.push(b.t.len());
        }
        Ok(b)
    }

    pub fn rays(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn samples(&self) -> usize {
        self.t.len()
    }
}

/// Feature, density and width of the grids being rendered.
#[derive(Clone, Copy)]
pub struct GridPayload<'a> {
    pub fine_features: &'a [f64],
    pub fine_channels: usize,
    pub coarse_features: &'a [f64],
    pub coarse_channels: usize,
    pub fine_density: &'a [f64],
    pub coarse_density: &'a [f64],
}

impl<'a> GridPayload<'a> {
    pub fn of(oct: &'a DualOctree) -> GridPayload<'a> {
        GridPayload {
            fine_features: oct.fine.features(),
            fine_channels: oct.fine.channels(),
            coarse_features: oct.coarse.features(),
            coarse_channels: oct.coarse.channels(),
            fine_density: oct.fine.density(),
            coarse_density: oct.coarse.density(),
        }
    }

    pub fn width(&self) -> usize {
        self.fine_channels + self.coarse_channels
    }

    fn sigma(&self, f: u32, c: u32) -> f64 {
        if f != NONE {
            self.fine_density[f as usize]
        } else if c != NONE {
            self.coarse_density[c as usize]
        } else {
            0.0
        }
    }

    fn add_feature(&self, out: &mut [f64], w: f64, f: u32, c: u32) {
        let (cf, cc) = (self.fine_channels, self.coarse_channels);
        if f != NONE {
            let src = &self.fine_features[f as usize * cf..(f as usize + 1) * cf];
            out[..cf].iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
        }
        if c != NONE {
            let src = &self.coarse_features[c as usize * cc..(c as usize + 1) * cc];
            out[cf..].iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
        }
    }

    fn dot_feature(&self, g: &[f64], f: u32, c: u32) -> f64 {
        let (cf, cc) = (self.fine_channels, self.coarse_channels);
        let mut acc = 0.0;
        if f != NONE {
            let src = &self.fine_features[f as usize * cf..(f as usize + 1) * cf];
            acc += g[..cf].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
        }
        if c != NONE {
            let src = &self.coarse_features[c as usize * cc..(c as usize + 1) * cc];
            acc += g[cf..].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }
}

const CHUNK: usize = 64;

/// Render all rays: output is `[R*F features | R depths | R opacities]`.
pub fn render_batch(batch: &RayBatch, grid: &GridPayload) -> Vec<f64> {
    let (r, width) = (batch.rays(), grid.width());
    let mut feat = vec![0.0; r * width];
    let mut depth = vec![0.0; r];
    let mut opacity = vec![0.0; r];
    feat.par_chunks_mut(CHUNK * width.max(1))
        .zip(depth.par_chunks_mut(CHUNK))
        .zip(opacity.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(chunk, ((fo, dp), op))| {
            for (k, (d, o)) in dp.iter_mut().zip(op.iter_mut()).enumerate() {
                let ray = chunk * CHUNK + k;
                let range = batch.offsets[ray]..batch.offsets[ray + 1];
                let sigma: Vec<f64> = range.clone().map(|i| grid.sigma(batch.fine[i], batch.coarse[i])).collect();
                let w = occupancy_unchecked(&sigma, &batch.delta[range.clone()]);
                let out = &mut fo[k * width..(k + 1) * width];
                for (j, i) in range.enumerate() {
                    *d += w[j] * batch.t[i];
                    *o += w[j];
                    grid.add_feature(out, w[j], batch.fine[i], batch.coarse[i]);
                }
            }
        });
    feat.extend(depth);
    feat.extend(opacity);
    feat
}

/// Gradients of [`render_batch`] for the four payload arrays:
/// `(fine features, coarse features, fine density, coarse density)`.
pub fn render_batch_vjp(batch: &RayBatch, grid: &GridPayload, grad: &[f64]) -> [Vec<f64>; 4] {
    let (r, width) = (batch.rays(), grid.width());
    let (g_feat, rest) = grad.split_at(r * width);
    let (g_depth, g_op) = rest.split_at(r);
    // Per-sample (d sigma, weight) in parallel, then a fixed-order scatter.
    let mut per_sample = vec![(0.0, 0.0); batch.samples()];
    let starts: Vec<usize> = (0..r).step_by(CHUNK).collect();
    let chunks: Vec<Vec<(f64, f64)>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(r);
            let mut out = Vec::with_capacity(batch.offsets[end] - batch.offsets[start]);
            for ray in start..end {
                let range = batch.offsets[ray]..batch.offsets[ray + 1];
                let sigma: Vec<f64> = range.clone().map(|i| grid.sigma(batch.fine[i], batch.coarse[i])).collect();
                let delta = &batch.delta[range.clone()];
                let w = occupancy_unchecked(&sigma, delta);
                let gf = &g_feat[ray * width..(ray + 1) * width];
                let g_w: Vec<f64> = range
                    .clone()
                    .map(|i| grid.dot_feature(gf, batch.fine[i], batch.coarse[i]) + g_depth[ray] * batch.t[i] + g_op[ray])
                    .collect();
                let gx = occupancy_vjp_x(&sigma, delta, &g_w);
                out.extend(gx.iter().zip(delta).zip(&w).map(|((g, d), w)| (g * d, *w)));
            }
            out
        })
        .collect();
    let mut pos = 0;
    for c in chunks {
        per_sample[pos..pos + c.len()].copy_from_slice(&c);
        pos += c.len();
    }
    let (cf, cc) = (grid.fine_channels, grid.coarse_channels);
    let mut gff = vec![0.0; grid.fine_features.len()];
    let mut gcf = vec![0.0; grid.coarse_features.len()];
    let mut gfd = vec![0.0; grid.fine_density.len()];
    let mut gcd = vec![0.0; grid.coarse_density.len()];
    for ray in 0..r {
        let gf = &g_feat[ray * width..(ray + 1) * width];
        for i in batch.offsets[ray]..batch.offsets[ray + 1] {
            let (gs, w) = per_sample[i];
            let (f, c) = (batch.fine[i], batch.coarse[i]);
            if f != NONE {
                gfd[f as usize] += gs;
                let dst = &mut gff[f as usize * cf..(f as usize + 1) * cf];
                dst.iter_mut().zip(&gf[..cf]).for_each(|(d, g)| *d += w * g);
            } else if c != NONE {
                gcd[c as usize] += gs;
            }
            if c != NONE {
                let dst = &mut gcf[c as usize * cc..(c as usize + 1) * cc];
                dst.iter_mut().zip(&gf[cf..]).for_each(|(d, g)| *d += w * g);
            }
        }
    }
    [gff, gcf, gfd, gcd]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub feature: Vec<f64>,
    pub depth: f64,
    pub opacity: f64,
}

/// Composite one ray through the octree at the given samples, with slice
/// bounds snapped to cell faces.
pub fn render_ray(oct: &DualOctree, contraction: &Contraction, samples: &RaySamples) -> RayRender {
    let view = DensityView::of(oct);
    let lookups: Vec<(u32, u32)> = samples.positions.iter().map(|s| view.lookup(s)).collect();
    let mut bounds = samples.bounds.clone();
    snap_bounds(&samples.ray, contraction, &view, &samples.t, &lookups, &mut bounds, SNAP_TOL);
    let (fine, coarse) = lookups.into_iter().unzip();
    let batch = RayBatch {
        offsets: vec![0, samples.len()],
        t: samples.t.clone(),
        delta: widths(&bounds),
        fine,
        coarse,
    };
    let grid = GridPayload::of(oct);
    let out = render_batch(&batch, &grid);
    let w = grid.width();
    RayRender {
        feature: out[..w].to_vec(),
        depth: out[w],
        opacity: out[w + 1],
    }
}

/// Image-space decoder from rendered features to RGB at twice the resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    /// First three channels, clamped, nearest-neighbour x2.
    Identity,
    /// 3x3 convolution to 12 channels, pixel shuffle x2, sigmoid.
    /// Weights are `[12][C][3][3]`; output channel `rgb * 4 + dy * 2 + dx`.
    Learnable { channels: usize, weights: Vec<f64>, bias: Vec<f64> },
}

impl Decoder {
    pub fn zeros(channels: usize) -> Decoder {
        Decoder::Learnable {
            channels,
            weights: vec![0.0; 12 * channels * 9],
            bias: vec![0.0; 12],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 3x3 zero-padded convolution `[H,W,C] -> [H,W,12]`, before the shuffle.
pub fn decoder_conv(feat: &[f64], h: usize, w: usize, c: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 12];
    out.par_chunks_mut(w * 12).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let o = &mut row[x * 12..(x + 1) * 12];
            o.copy_from_slice(bias);
            for ky in 0..3 {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let f = &feat[(yy as usize * w + xx as usize) * c..(yy as usize * w + xx as usize + 1) * c];
                    for (oc, ov) in o.iter_mut().enumerate() {
                        let base = oc * c * 9 + ky * 3 + kx;
                        let mut acc = 0.0;
                        for (ci, fv) in f.iter().enumerate() {
                            acc += weights[base + ci * 9] * fv;
                        }
                        *ov += acc;
                    }
                }
            }
        }
    });
    out
}

/// Decode a flat `[H,W,C]` feature image into flat `[2H,2W,3]` RGB.
pub fn decode_raw(feat: &[f64], h: usize, w: usize, c: usize, decoder: &Decoder) -> Result<Vec<f64>> {
    if c < 3 {
        return Err(Error::Shape(format!("decoder needs at least 3 channels, got {c}")));
    }
    if feat.len() != h * w * c {
        return Err(Error::Shape(format!("feature image is {} values, expected {}", feat.len(), h * w * c)));
    }
    let mut rgb = vec![0.0; 4 * h * w * 3];
    match decoder {
        Decoder::Identity => {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let src = &feat[((y / 2) * w + x / 2) * c..][..3];
                    for k in 0..3 {
                        rgb[(y * 2 * w + x) * 3 + k] = src[k].clamp(0.0, 1.0);
                    }
                }
            }
        }
        Decoder::Learnable { channels, weights, bias } => {
            if *channels != c || weights.len() != 12 * c * 9 || bias.len() != 12 {
                return Err(Error::Shape(format!("decoder built for {channels} channels, image has {c}")));
            }
            let pre = decoder_conv(feat, h, w, c, weights, bias);
            for y in 0..h {
                for x in 0..w {
                    for (oc, v) in pre[(y * w + x) * 12..][..12].iter().enumerate() {
                        let (k, dy, dx) = (oc / 4, oc / 2 % 2, oc % 2);
                        rgb[((2 * y + dy) * 2 * w + 2 * x + dx) * 3 + k] = sigmoid(*v);
                    }
                }
            }
        }
    }
    Ok(rgb)
}

/// Reverse rule of [`decode_raw`] for the learnable path given its output.
/// Returns `(d features, d weights, d bias)`.
pub fn decode_learnable_vjp(
    feat: &[f64],
    h: usize,
    w: usize,
    c: usize,
    weights: &[f64],
    rgb: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gpre = vec![0.0; h * w * 12];
    for y in 0..h {
        for x in 0..w {
            for oc in 0..12 {
                let (k, dy, dx) = (oc / 4, oc / 2 % 2, oc % 2);
                let i = ((2 * y + dy) * 2 * w + 2 * x + dx) * 3 + k;
                gpre[(y * w + x) * 12 + oc] = grad[i] * rgb[i] * (1.0 - rgb[i]);
            }
        }
    }
    let mut gb = vec![0.0; 12];
    for p in 0..h * w {
        for oc in 0..12 {
            gb[oc] += gpre[p * 12 + oc];
        }
    }
    let mut gw = vec![0.0; weights.len()];
    let mut gf = vec![0.0; feat.len()];
    for y in 0..h {
        for x in 0..w {
            let g = &gpre[(y * w + x) * 12..][..12];
            for ky in 0..3 {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let p = yy as usize * w + xx as usize;
                    for ci in 0..c {
                        let fv = feat[p * c + ci];
                        let mut acc = 0.0;
                        for (oc, gv) in g.iter().enumerate() {
                            let wi = oc * c * 9 + ci * 9 + ky * 3 + kx;
                            gw[wi] += gv * fv;
                            acc += gv * weights[wi];
                        }
                        gf[p * c + ci] += acc;
                    }
                }
            }
        }
    }
    (gf, gw, gb)
}

/// Reverse rule of the identity path.
pub fn decode_identity_vjp(feat: &[f64], h: usize, w: usize, c: usize, grad: &[f64]) -> Vec<f64> {
    let mut gf = vec![0.0; feat.len()];
    for y in 0..2 * h {
        for x in 0..2 * w {
            let p = (y / 2) * w + x / 2;
            for k in 0..3 {
                let v = feat[p * c + k];
                if v > 0.0 && v < 1.0 {
                    gf[p * c + k] += grad[(y * 2 * w + x) * 3 + k];
                }
            }
        }
    }
    gf
}

/// Tensor front end of [`decode_raw`].
pub fn decode(feature_image: &Tensor, decoder: &Decoder) -> Result<Tensor> {
    feature_image.expect_shape("feature image", &[None, None, None])?;
    let s = feature_image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let rgb = decode_raw(&feature_image.to_f64_vec(), h, w, c, decoder)?;
    Tensor::from_f64(vec![2 * h, 2 * w, 3], rgb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub feature_image: Tensor,
    pub depth_image: Tensor,
    pub opacity_image: Tensor,
    pub rgb_image: Tensor,
}

pub fn camera_rays(cam: &Camera) -> Vec<Ray> {
    (0..cam.height)
        .flat_map(|row| (0..cam.width).map(move |col| (col, row)))
        .map(|(col, row)| cam.pixel_center_ray(col, row))
        .collect()
}

/// Render every pixel of `cam` (row-major, no jitter) and decode to RGB.
pub fn render_image(
    oct: &DualOctree,
    contraction: &Contraction,
    cam: &Camera,
    plan: &SamplePlan,
    decoder: &Decoder,
) -> Result<RenderOutput> {
    let rays = camera_rays(cam);
    let batch = RayBatch::build(&rays, contraction, plan, &DensityView::of(oct), None)?;
    let grid = GridPayload::of(oct);
    let mut out = render_batch(&batch, &grid);
    let (h, w, c) = (cam.height, cam.width, grid.width());
    let opacity = out.split_off(h * w * c + h * w);
    let depth = out.split_off(h * w * c);
    let rgb = if c >= 3 {
        decode_raw(&out, h, w, c, decoder)?
    } else {
        vec![0.0; 4 * h * w * 3]
    };
    Ok(RenderOutput {
        feature_image: Tensor::from_f64(vec![h, w, c.max(1)], if c == 0 { vec![0.0; h * w] } else { out })?,
        depth_image: Tensor::from_f64(vec![h, w], depth)?,
        opacity_image: Tensor::from_f64(vec![h, w], opacity)?,
        rgb_image: Tensor::from_f64(vec![2 * h, 2 * w, 3], rgb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frustum::LiftedPoint;
    use crate::voxelgrid::build;

    type NoRng = ChaCha8Rng;

    fn unit_ray() -> Ray {
        Ray {
            origin: Vec3::zeros(),
            direction: Vec3::x(),
        }
    }

    #[test]
    fn two_linear_midpoints() {
        let c = Contraction::new([10.0, 10.0, 10.0], 0.8).unwrap();
        let plan = SamplePlan::new(1.0, 3.0, 2, 0).with_spacing(Spacing::Linear);
        let s = sample_uniform::<NoRng>(&unit_ray(), &c, &plan, None).unwrap();
        assert_eq!(s.t, vec![1.5, 2.5]);
        assert_eq!(s.deltas, vec![1.0, 1.0]);
    }

    #[test]
    fn jitter_is_reproducible_and_stratified() {
        let c = Contraction::new([10.0, 10.0, 10.0], 0.8).unwrap();
        let plan = SamplePlan::new(0.5, 40.0, 64, 0);
        let a = sample_uniform(&unit_ray(), &c, &plan, Some(&mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        let b = sample_uniform(&unit_ray(), &c, &plan, Some(&mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        assert_eq!(a, b);
        let warp = c.depth_warp(&Vec3::x());
        let strata = plan.strata(&warp);
        for (i, t) in a.t.iter().enumerate() {
            let s = warp.forward(*t);
            assert!(s >= strata[i] - 1e-12 && s <= strata[i + 1] + 1e-12);
        }
        assert!((a.deltas.iter().sum::<f64>() - 39.5).abs() < 1e-9);
    }

    #[test]
    fn one_hot_weights_stay_in_bin() {
        let strata: Vec<f64> = (0..=8).map(|i| i as f64).collect();
        let mut w = vec![0.0; 8];
        w[5] = 1.0;
        let d = importance_draws::<NoRng>(&strata, &w, 0.0, 16, None);
        assert!(d.iter().all(|&s| (5.0..=6.0).contains(&s)));
        let zero = importance_draws::<NoRng>(&strata, &[0.0; 8], EPS_FLOOR, 8, None);
        assert_eq!(zero, (0..8).map(|i| i as f64 + 0.5).collect::<Vec<_>>());
    }

    #[test]
    fn empty_octree_renders_nothing() {
        let oct = DualOctree::empty(6, 3, 3, 3).unwrap();
        let c = Contraction::new([10.0, 10.0, 10.0], 0.8).unwrap();
        let s = sample_uniform::<NoRng>(&unit_ray(), &c, &SamplePlan::new(0.5, 20.0, 16, 0), None).unwrap();
        let r = render_ray(&oct, &c, &s);
        assert_eq!((r.depth, r.opacity), (0.0, 0.0));
        assert!(r.feature.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_decoder_is_gray() {
        let feat = Tensor::from_f64(vec![2, 3, 4], vec![0.7; 24]).unwrap();
        let rgb = decode(&feat, &Decoder::zeros(4)).unwrap();
        assert_eq!(rgb.shape(), &[4, 6, 3]);
        assert!(rgb.to_f64_vec().iter().all(|&v| v == 0.5));
        let ident = decode(&feat, &Decoder::Identity).unwrap();
        assert!(ident.to_f64_vec().iter().all(|&v| v == 0.7));
        let narrow = Tensor::from_f64(vec![2, 2, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(decode(&narrow, &Decoder::Identity), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_slab_stops_ray() {
        // The slab starts on a coarse cell boundary so the complement rule
        // cannot pull the surface forward.
        let c = Contraction::new([10.0, 10.0, 10.0], 0.8).unwrap();
        let pts: Vec<LiftedPoint> = (0..400)
            .map(|i| LiftedPoint {
                position: Vec3::new(4.6875 + i as f64 * 0.005, 0.0, 0.0),
                feature: vec![1.0, 0.5, 0.25],
                density: 1e6,
            })
            .collect();
        let oct = build(&pts, &c, 9, 6, 0.0).unwrap();
        let plan = SamplePlan::new(0.5, 20.0, 256, 0).with_spacing(Spacing::Linear);
        let s = sample_uniform::<NoRng>(&unit_ray(), &c, &plan, None).unwrap();
        let r = render_ray(&oct, &c, &s);
        assert!((r.opacity - 1.0).abs() < 1e-9);
        let spacing = 19.5 / 256.0;
        assert!((r.depth - 4.6875).abs() < spacing, "{}", r.depth);
    }
}
