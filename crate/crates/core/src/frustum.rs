//! Per-pixel categorical depth: occupancy weights over depth bins, expected
//! depth, second-stage candidate refinement and lifting to world points.
//!
//! For densities `sigma` and bin widths `delta`, with `x_d = delta_d * sigma_d`:
//!
//! ```text
//! O_d = exp(-sum_{j<d} x_j) * (1 - exp(-x_d))
//! ```
//!
//! `sum_d O_d + exp(-sum_d x_d) = 1`, so the weights form a sub-probability
//! distribution whose missing mass is the final transmittance.

use crate::error::{Error, Result};
use crate::geometry::{Camera, Contraction, Vec3};

/// Default half-width of the refinement window, in coarse bins.
pub const DEFAULT_BETA: f64 = 1.5;

/// Monotone depth values with their bin widths.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins {
    t: Vec<f64>,
    delta: Vec<f64>,
}

impl DepthBins {
    /// Widths are forward gaps; the last bin reuses the previous gap.
    pub fn new(t: Vec<f64>) -> Result<DepthBins> {
        if t.len() < 2 {
            return Err(Error::validation("D", "need at least 2 depth bins"));
        }
        if !t.iter().all(|v| v.is_finite()) || t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("depth bins must be finite and strictly increasing".into()));
        }
        let delta = forward_gaps(&t);
        Ok(DepthBins { t, delta })
    }

    /// `d` bins evenly spaced in contracted distance along `direction`,
    /// first at `t_near` and last at `t_far`.
    pub fn warped(
        contraction: &Contraction,
        direction: &Vec3,
        t_near: f64,
        t_far: f64,
        d: usize,
    ) -> Result<DepthBins> {
        let warp = contraction.depth_warp(direction);
        let (s0, s1) = (warp.forward(t_near), warp.forward(t_far));
        let mut t: Vec<f64> = (0..d)
            .map(|i| warp.inverse(s0 + (s1 - s0) * i as f64 / (d - 1).max(1) as f64))
            .collect();
        if let Some(first) = t.first_mut() {
            *first = t_near;
        }
        if let Some(last) = t.last_mut() {
            *last = t_far;
        }
        DepthBins::new(t)
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.t[0]
    }

    pub fn last(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    /// Width of the bin `[t_j, t_{j+1})` containing `c`.
    pub fn width_at(&self, c: f64) -> f64 {
        let j = self.t.partition_point(|&v| v <= c);
        if j == 0 {
            self.delta[0]
        } else {
            self.delta[(j - 1).min(self.delta.len() - 1)]
        }
    }
}

/// `t_{d+1} - t_d`, with the final entry repeating the last gap.
pub fn forward_gaps(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if n >= 2 {
        delta.push(delta[n - 2]);
    } else if n == 1 {
        delta.push(0.0);
    }
    delta
}

fn check_densities(op: &str, sigma: &[f64], delta: &[f64]) -> Result<()> {
    if sigma.len() != delta.len() {
        return Err(Error::Shape(format!(
            "{op}: {} densities but {} widths",
            sigma.len(),
            delta.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("{op}: density {s} is negative or NaN")));
    }
    Ok(())
}

/// Occupancy weights for one ray (see module docs).
pub fn occupancy_weights(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    check_densities("occupancy_weights", sigma, delta)?;
    Ok(occupancy_unchecked(sigma, delta))
}

pub(crate) fn occupancy_unchecked(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigma.len());
    let mut acc = 0.0f64;
    for (s, d) in sigma.iter().zip(delta) {
        let x = s * d;
        out.push((-acc).exp() * -(-x).exp_m1());
        acc += x;
    }
    out
}

/// `exp(-sum delta * sigma)`: the mass the weights leave unassigned.
pub fn final_transmittance(sigma: &[f64], delta: &[f64]) -> f64 {
    let acc: f64 = sigma.iter().zip(delta).map(|(s, d)| s * d).sum();
    (-acc).exp()
}

/// Reverse-mode rule for [`occupancy_weights`]; returns `(d/dsigma, d/ddelta)`.
pub fn occupancy_vjp(sigma: &[f64], delta: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gx = occupancy_vjp_x(sigma, delta, grad);
    let gs = gx.iter().zip(delta).map(|(g, d)| g * d).collect();
    let gd = gx.iter().zip(sigma).map(|(g, s)| g * s).collect();
    (gs, gd)
}

/// Gradient with respect to the optical thicknesses `x_d = delta_d * sigma_d`:
/// `g_j T_{j+1} - sum_{d>j} g_d O_d`.
pub(crate) fn occupancy_vjp_x(sigma: &[f64], delta: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = sigma.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0f64;
    let mut t_next = Vec::with_capacity(n);
    let mut occ = Vec::with_capacity(n);
    for d in 0..n {
        let x = sigma[d] * delta[d];
        let t = (-acc).exp();
        occ.push(t * -(-x).exp_m1());
        acc += x;
        t_next.push((-acc).exp());
    }
    let mut tail = 0.0;
    for j in (0..n).rev() {
        out[j] = grad[j] * t_next[j] - tail;
        tail += grad[j] * occ[j];
    }
    out
}

/// `(sum O_d t_d, sum O_d)`. A ray with no mass reports depth 0.
pub fn expected_depth(occupancy: &[f64], t: &[f64]) -> (f64, f64) {
    let depth = occupancy.iter().zip(t).map(|(o, t)| o * t).sum();
    let opacity = occupancy.iter().sum();
    (depth, opacity)
}

/// `d_fine` evenly spaced candidates on `c +- beta * width(c)`, clipped to the
/// bin range. `c` itself is first clamped into the range.
pub fn fine_candidates(coarse: f64, bins: &DepthBins, d_fine: usize, beta: f64) -> Vec<f64> {
    let (t1, td) = (bins.first(), bins.last());
    let c = coarse.clamp(t1, td);
    let half = beta * bins.width_at(c);
    let lo = (c - half).max(t1);
    let hi = (c + half).min(td);
    linspace(lo, hi, d_fine)
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let mut v: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    v[n - 1] = hi;
    v
}

/// Same rule as [`occupancy_weights`] with widths from the candidate gaps.
pub fn fine_occupancy(fine_sigma: &[f64], fine_t: &[f64]) -> Result<Vec<f64>> {
    occupancy_weights(fine_sigma, &forward_gaps(fine_t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPoint {
    pub position: Vec3,
    pub feature: Vec<f64>,
    pub density: f64,
}

/// Points along the ray through `(u, v)`, each carrying `O'_d * feature`
/// and density `sigma'_d`.
pub fn lift_pixel(
    cam: &Camera,
    u: f64,
    v: f64,
    fine_t: &[f64],
    fine_occupancy: &[f64],
    fine_sigma: &[f64],
    feature: &[f64],
) -> Vec<LiftedPoint> {
    let ray = cam.pixel_ray(u, v);
    fine_t
        .iter()
        .zip(fine_occupancy)
        .zip(fine_sigma)
        .map(|((&t, &o), &s)| LiftedPoint {
            position: ray.at(t),
            feature: feature.iter().map(|f| o * f).collect(),
            density: s,
        })
        .collect()
}

/// Both depth stages for every pixel of one camera, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrustum {
    pub height: usize,
    pub width: usize,
    /// Coarse bins per pixel.
    pub bins: usize,
    pub fine_bins: usize,
    pub channels: usize,
    pub sigma: Vec<f64>,
    pub occupancy: Vec<f64>,
    pub coarse_depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub fine_t: Vec<f64>,
    pub fine_sigma: Vec<f64>,
    pub fine_occupancy: Vec<f64>,
    pub features: Vec<f64>,
}

/// Per-pixel depth bins for a camera, evenly spaced in contracted distance.
pub fn pixel_bins(
    cam: &Camera,
    contraction: &Contraction,
    t_near: f64,
    t_far: f64,
    d: usize,
) -> Result<Vec<DepthBins>> {
    let mut out = Vec::with_capacity(cam.pixel_count());
    for row in 0..cam.height {
        for col in 0..cam.width {
            let ray = cam.pixel_center_ray(col, row);
            out.push(DepthBins::warped(contraction, &ray.direction, t_near, t_far, d)?);
        }
    }
    Ok(out)
}

impl DepthFrustum {
    /// Run both stages from per-pixel densities.
    ///
    /// `sigma` is `[P, D]`, `fine_sigma` is `[P, D']` and `features` is
    /// `[P, C]` with `P = height * width` and one [`DepthBins`] per pixel.
    pub fn evaluate(
        height: usize,
        width: usize,
        bins: &[DepthBins],
        sigma: Vec<f64>,
        fine_sigma: Vec<f64>,
        features: Vec<f64>,
        beta: f64,
    ) -> Result<DepthFrustum> {
        let p = height * width;
        if bins.len() != p || p == 0 {
            return Err(Error::Shape(format!("{} bin sets for {p} pixels", bins.len())));
        }
        let d = bins[0].len();
        if sigma.len() != p * d || fine_sigma.len() % p != 0 || features.len() % p != 0 {
            return Err(Error::Shape("frustum inputs do not match pixel count".into()));
        }
        let d_fine = fine_sigma.len() / p;
        let channels = features.len() / p;
        let mut occupancy = Vec::with_capacity(p * d);
        let mut coarse_depth = Vec::with_capacity(p);
        let mut opacity = Vec::with_capacity(p);
        let mut fine_t = Vec::with_capacity(p * d_fine);
        let mut fine_occupancy = Vec::with_capacity(p * d_fine);
        for (i, b) in bins.iter().enumerate() {
            let o = occupancy_weights(&sigma[i * d..(i + 1) * d], b.delta())?;
            let (depth, op) = expected_depth(&o, b.t());
            let ft = fine_candidates(depth, b, d_fine, beta);
            let fo = self::fine_occupancy(&fine_sigma[i * d_fine..(i + 1) * d_fine], &ft)?;
            occupancy.extend(o);
            coarse_depth.push(depth);
            opacity.push(op);
            fine_t.extend(ft);
            fine_occupancy.extend(fo);
        }
        Ok(DepthFrustum {
            height,
            width,
            bins: d,
            fine_bins: d_fine,
            channels,
            sigma,
            occupancy,
            coarse_depth,
            opacity,
            fine_t,
            fine_sigma,
            fine_occupancy,
            features,
        })
    }
}

/// Lift every pixel in row-major order; `H * W * D'` points.
pub fn lift_image(cam: &Camera, frustum: &DepthFrustum) -> Result<Vec<LiftedPoint>> {
    if cam.width != frustum.width || cam.height != frustum.height {
        return Err(Error::Shape(format!(
            "camera is {}x{} but frustum is {}x{}",
            cam.width, cam.height, frustum.width, frustum.height
        )));
    }
    let (df, c) = (frustum.fine_bins, frustum.channels);
    let mut out = Vec::with_capacity(frustum.height * frustum.width * df);
    for row in 0..frustum.height {
        for col in 0..frustum.width {
            let i = row * frustum.width + col;
            let r = i * df..(i + 1) * df;
            out.extend(lift_pixel(
                cam,
                col as f64 + 0.5,
                row as f64 + 0.5,
                &frustum.fine_t[r.clone()],
                &frustum.fine_occupancy[r.clone()],
                &frustum.fine_sigma[r],
                &frustum.features[i * c..(i + 1) * c],
            ));
        }
    }
    Ok(out)
}
