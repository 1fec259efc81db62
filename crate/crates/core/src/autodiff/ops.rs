//! Differentiable operations recorded on the [`Tape`].

use std::sync::Arc;

use super::tape::{no_saved, Op, Saved, Tape, Var};
use crate::error::{Error, Result};
use crate::frustum::{occupancy_unchecked, occupancy_vjp};
use crate::objectives::{loss_density_entropy_grad, loss_depth_grad, loss_feature_grad, loss_rgb_grad};
use crate::renderer::{decode_learnable_vjp, decode_raw, render_batch, render_batch_vjp, Decoder, GridPayload, RayBatch};
use crate::voxelgrid::{conv_features, conv_vjp, ConvKernel, PoolMap};

fn expect_len(op: &str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{op}: {what} has {got} values, expected {want}")));
    }
    Ok(())
}

fn expect_arity(op: &str, inputs: &[&[f64]], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Shape(format!("{op}: {} inputs, expected {n}", inputs.len())));
    }
    Ok(())
}

fn saved<T: Send + Sync + 'static>(s: &Saved) -> &T {
    s.downcast_ref::<T>().expect("saved state written by this op's forward")
}

// ---------------------------------------------------------------- elementwise

pub struct Softplus;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Op for Softplus {
    fn name(&self) -> &str {
        "softplus"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        Ok((inputs[0].iter().map(|&x| softplus(x)).collect(), no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].iter().zip(grad).map(|(&x, g)| g * sigmoid(x)).collect()]
    }
}

pub struct Exp;

impl Op for Exp {
    fn name(&self) -> &str {
        "exp"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        Ok((inputs[0].iter().map(|x| x.exp()).collect(), no_saved()))
    }

    fn backward(&self, _: &[&[f64]], output: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![output.iter().zip(grad).map(|(y, g)| y * g).collect()]
    }
}

pub struct Add;

impl Op for Add {
    fn name(&self) -> &str {
        "add"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 2)?;
        expect_len(self.name(), "rhs", inputs[1].len(), inputs[0].len())?;
        Ok((inputs[0].iter().zip(inputs[1]).map(|(a, b)| a + b).collect(), no_saved()))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![grad.to_vec(), grad.to_vec()]
    }
}

/// Elementwise product.
pub struct Mul;

impl Op for Mul {
    fn name(&self) -> &str {
        "mul"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 2)?;
        expect_len(self.name(), "rhs", inputs[1].len(), inputs[0].len())?;
        Ok((inputs[0].iter().zip(inputs[1]).map(|(a, b)| a * b).collect(), no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![
            grad.iter().zip(inputs[1]).map(|(g, b)| g * b).collect(),
            grad.iter().zip(inputs[0]).map(|(g, a)| g * a).collect(),
        ]
    }
}

pub struct Scale(pub f64);

impl Op for Scale {
    fn name(&self) -> &str {
        "scale"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        Ok((inputs[0].iter().map(|x| x * self.0).collect(), no_saved()))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![grad.iter().map(|g| g * self.0).collect()]
    }
}

/// `len` values starting at `start`.
pub struct Slice {
    pub start: usize,
    pub len: usize,
}

impl Op for Slice {
    fn name(&self) -> &str {
        "slice"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        if self.start + self.len > inputs[0].len() {
            return Err(Error::Shape(format!(
                "slice {}..{} of {} values",
                self.start,
                self.start + self.len,
                inputs[0].len()
            )));
        }
        Ok((inputs[0][self.start..self.start + self.len].to_vec(), no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let mut g = vec![0.0; inputs[0].len()];
        g[self.start..self.start + self.len].copy_from_slice(grad);
        vec![g]
    }
}

/// All inputs laid end to end.
pub struct Concat;

impl Op for Concat {
    fn name(&self) -> &str {
        "concat"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        Ok((inputs.concat(), no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let mut at = 0;
        inputs
            .iter()
            .map(|x| {
                at += x.len();
                grad[at - x.len()..at].to_vec()
            })
            .collect()
    }
}

/// `sum_i w_i * x_i` over scalar inputs.
pub struct WeightedSum(pub Vec<f64>);

impl Op for WeightedSum {
    fn name(&self) -> &str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, self.0.len())?;
        let mut acc = 0.0;
        for (x, w) in inputs.iter().zip(&self.0) {
            expect_len(self.name(), "term", x.len(), 1)?;
            acc += w * x[0];
        }
        Ok((vec![acc], no_saved()))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        self.0.iter().map(|w| vec![w * grad[0]]).collect()
    }
}

// ---------------------------------------------------------------- frustum

/// Occupancy weights of many rays at once; input `[R, D]` densities with
/// fixed widths `delta` of the same layout.
pub struct BatchedOccupancy {
    pub delta: Arc<Vec<f64>>,
    pub bins: usize,
}

impl Op for BatchedOccupancy {
    fn name(&self) -> &str {
        "occupancy_weights"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        expect_len(self.name(), "densities", inputs[0].len(), self.delta.len())?;
        if let Some(s) = inputs[0].iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::Domain(format!("occupancy_weights: density {s} is negative or NaN")));
        }
        let mut out = Vec::with_capacity(self.delta.len());
        for (s, d) in inputs[0].chunks(self.bins).zip(self.delta.chunks(self.bins)) {
            out.extend(occupancy_unchecked(s, d));
        }
        Ok((out, no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(grad.len());
        for ((s, d), g) in inputs[0]
            .chunks(self.bins)
            .zip(self.delta.chunks(self.bins))
            .zip(grad.chunks(self.bins))
        {
            out.extend(occupancy_vjp(s, d, g).0);
        }
        vec![out]
    }
}

/// `sum_d O_d t_d` per ray; input `[R, D]` weights, fixed depths `t`.
pub struct BatchedExpectedDepth {
    pub t: Arc<Vec<f64>>,
    pub bins: usize,
}

impl Op for BatchedExpectedDepth {
    fn name(&self) -> &str {
        "expected_depth"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        expect_len(self.name(), "weights", inputs[0].len(), self.t.len())?;
        let out = inputs[0]
            .chunks(self.bins)
            .zip(self.t.chunks(self.bins))
            .map(|(o, t)| o.iter().zip(t).map(|(a, b)| a * b).sum())
            .collect();
        Ok((out, no_saved()))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.t.len());
        for (t, g) in self.t.chunks(self.bins).zip(grad) {
            out.extend(t.iter().map(|t| t * g));
        }
        vec![out]
    }
}

/// Lifted point features `O'_{p,d} * feature_p`: inputs `[P, D']` weights
/// and `[P, C]` pixel features, output `[P, D', C]`.
pub struct LiftFeatures {
    pub bins: usize,
    pub channels: usize,
}

impl Op for LiftFeatures {
    fn name(&self) -> &str {
        "lift_features"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 2)?;
        let p = inputs[0].len() / self.bins.max(1);
        expect_len(self.name(), "weights", inputs[0].len(), p * self.bins)?;
        expect_len(self.name(), "features", inputs[1].len(), p * self.channels)?;
        let mut out = Vec::with_capacity(p * self.bins * self.channels);
        for (o, f) in inputs[0].chunks(self.bins).zip(inputs[1].chunks(self.channels.max(1))) {
            for w in o {
                out.extend(f.iter().map(|v| w * v));
            }
        }
        Ok((out, no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let (b, c) = (self.bins, self.channels);
        let mut go = vec![0.0; inputs[0].len()];
        let mut gf = vec![0.0; inputs[1].len()];
        for (i, g) in grad.chunks(c.max(1)).enumerate() {
            let p = i / b;
            let f = &inputs[1][p * c..(p + 1) * c];
            go[i] = g.iter().zip(f).map(|(a, b)| a * b).sum();
            let w = inputs[0][i];
            gf[p * c..(p + 1) * c].iter_mut().zip(g).for_each(|(d, g)| *d += w * g);
        }
        vec![go, gf]
    }
}

/// Image rows blended from a few control rows: input `[rows_in, W, K]`,
/// output row `v` is `(1 - l) * in[a] + l * in[b]` for `blend[v] = (a, b, l)`.
pub struct RowBlend {
    pub blend: Arc<Vec<(u32, u32, f64)>>,
    pub row_len: usize,
}

impl Op for RowBlend {
    fn name(&self) -> &str {
        "row_blend"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        let n = self.row_len;
        let rows_in = inputs[0].len() / n.max(1);
        if rows_in * n != inputs[0].len() || self.blend.iter().any(|&(a, b, _)| a as usize >= rows_in || b as usize >= rows_in) {
            return Err(Error::Shape("row_blend: control rows do not match the blend table".into()));
        }
        let mut out = Vec::with_capacity(self.blend.len() * n);
        for &(a, b, l) in self.blend.iter() {
            let (ra, rb) = (&inputs[0][a as usize * n..][..n], &inputs[0][b as usize * n..][..n]);
            out.extend(ra.iter().zip(rb).map(|(x, y)| (1.0 - l) * x + l * y));
        }
        Ok((out, no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let n = self.row_len;
        let mut g = vec![0.0; inputs[0].len()];
        for (&(a, b, l), gr) in self.blend.iter().zip(grad.chunks(n)) {
            g[a as usize * n..][..n].iter_mut().zip(gr).for_each(|(d, v)| *d += (1.0 - l) * v);
            g[b as usize * n..][..n].iter_mut().zip(gr).for_each(|(d, v)| *d += l * v);
        }
        vec![g]
    }
}

/// Sentinel for a point that lands in no cell.
pub const UNASSIGNED: u32 = u32::MAX;

/// Mean of point rows per cell under a fixed assignment; cells without
/// points get zeros.
pub struct CellMean {
    pub assign: Arc<Vec<u32>>,
    pub cells: usize,
    pub channels: usize,
}

impl CellMean {
    fn inverse_counts(&self) -> Vec<f64> {
        let mut n = vec![0u32; self.cells];
        for &a in self.assign.iter().filter(|&&a| a != UNASSIGNED) {
            n[a as usize] += 1;
        }
        n.into_iter().map(|k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect()
    }
}

impl Op for CellMean {
    fn name(&self) -> &str {
        "cell_mean"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        let c = self.channels;
        expect_len(self.name(), "points", inputs[0].len(), self.assign.len() * c)?;
        let inv = self.inverse_counts();
        let mut out = vec![0.0; self.cells * c];
        for (row, &a) in inputs[0].chunks(c).zip(self.assign.iter()) {
            if a == UNASSIGNED {
                continue;
            }
            let a = a as usize;
            out[a * c..(a + 1) * c].iter_mut().zip(row).for_each(|(o, v)| *o += v * inv[a]);
        }
        Ok((out, Box::new(inv)))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], s: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let inv: &Vec<f64> = saved(s);
        let c = self.channels;
        let mut g = vec![0.0; self.assign.len() * c];
        for (row, &a) in g.chunks_mut(c).zip(self.assign.iter()) {
            if a == UNASSIGNED {
                continue;
            }
            let a = a as usize;
            row.iter_mut().zip(&grad[a * c..(a + 1) * c]).for_each(|(r, g)| *r = g * inv[a]);
        }
        vec![g]
    }
}

// ---------------------------------------------------------------- voxel grid

/// Submanifold convolution: inputs `(features, weights, bias)`.
pub struct SparseConvOp {
    pub neighbors: Arc<Vec<[u32; 27]>>,
    pub c_in: usize,
    pub c_out: usize,
}

impl SparseConvOp {
    fn kernel(&self, w: &[f64], b: &[f64]) -> Result<ConvKernel> {
        ConvKernel::new(self.c_in, self.c_out, w.to_vec(), b.to_vec())
    }
}

impl Op for SparseConvOp {
    fn name(&self) -> &str {
        "sparse_conv"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 3)?;
        expect_len(self.name(), "features", inputs[0].len(), self.neighbors.len() * self.c_in)?;
        let k = self.kernel(inputs[1], inputs[2])?;
        Ok((conv_features(inputs[0], &self.neighbors, &k), no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let k = self.kernel(inputs[1], inputs[2]).expect("validated in forward");
        let (gf, gw, gb) = conv_vjp(inputs[0], &self.neighbors, &k, grad);
        vec![gf, gw, gb]
    }
}

/// Fine-to-coarse pooling with concatenation: inputs `(coarse, fine)` features.
pub struct PoolConcatOp {
    pub map: Arc<PoolMap>,
    pub coarse_channels: usize,
    pub fine_channels: usize,
}

impl Op for PoolConcatOp {
    fn name(&self) -> &str {
        "pool_concat"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 2)?;
        let (cc, cf) = (self.coarse_channels, self.fine_channels);
        if inputs[0].len() % cc.max(1) != 0 || inputs[1].len() != self.map.children.len() * cf {
            return Err(Error::Shape("pool_concat inputs do not match the pooling map".into()));
        }
        Ok((self.map.concat_features(inputs[0], cc, inputs[1], cf), no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let (cc, cf) = (self.coarse_channels, self.fine_channels);
        let (gc, gf) = self.map.concat_vjp(grad, cc, cf, inputs[0].len() / cc.max(1), inputs[1].len() / cf.max(1));
        vec![gc, gf]
    }
}

// ---------------------------------------------------------------- renderer

/// Batched volume rendering over fixed samples. Inputs are
/// `(fine features, coarse features, fine density, coarse density)`; output
/// `[R*F features | R depths | R opacities]`.
pub struct RenderOp {
    pub batch: Arc<RayBatch>,
    pub fine_channels: usize,
    pub coarse_channels: usize,
}

impl RenderOp {
    fn payload<'a>(&self, inputs: &[&'a [f64]]) -> GridPayload<'a> {
        GridPayload {
            fine_features: inputs[0],
            fine_channels: self.fine_channels,
            coarse_features: inputs[1],
            coarse_channels: self.coarse_channels,
            fine_density: inputs[2],
            coarse_density: inputs[3],
        }
    }
}

impl Op for RenderOp {
    fn name(&self) -> &str {
        "render"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 4)?;
        let (nf, nc) = (inputs[2].len(), inputs[3].len());
        expect_len(self.name(), "fine features", inputs[0].len(), nf * self.fine_channels)?;
        expect_len(self.name(), "coarse features", inputs[1].len(), nc * self.coarse_channels)?;
        let b = &self.batch;
        if b.fine.iter().any(|&f| f != UNASSIGNED && f as usize >= nf)
            || b.coarse.iter().any(|&c| c != UNASSIGNED && c as usize >= nc)
        {
            return Err(Error::Shape("render: batch refers to cells beyond the grid".into()));
        }
        if let Some(s) = inputs[2].iter().chain(inputs[3]).find(|s| !(**s >= 0.0)) {
            return Err(Error::Domain(format!("render: density {s} is negative or NaN")));
        }
        Ok((render_batch(b, &self.payload(inputs)), no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        render_batch_vjp(&self.batch, &self.payload(inputs), grad).into()
    }
}

/// Learnable decoder: inputs `(feature image [H,W,C], weights, bias)`,
/// output RGB `[2H,2W,3]`.
pub struct DecodeOp {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Op for DecodeOp {
    fn name(&self) -> &str {
        "decode"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 3)?;
        let dec = Decoder::Learnable {
            channels: self.channels,
            weights: inputs[1].to_vec(),
            bias: inputs[2].to_vec(),
        };
        Ok((decode_raw(inputs[0], self.height, self.width, self.channels, &dec)?, no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], output: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let (gf, gw, gb) =
            decode_learnable_vjp(inputs[0], self.height, self.width, self.channels, inputs[1], output, grad);
        vec![gf, gw, gb]
    }
}

/// Per-row affine map: inputs `(x [N, c_in], weights [c_in, c_out], bias [c_out])`.
pub struct LinearHead {
    pub c_in: usize,
    pub c_out: usize,
}

impl Op for LinearHead {
    fn name(&self) -> &str {
        "linear_head"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 3)?;
        let (ci, co) = (self.c_in, self.c_out);
        expect_len(self.name(), "weights", inputs[1].len(), ci * co)?;
        expect_len(self.name(), "bias", inputs[2].len(), co)?;
        if inputs[0].len() % ci != 0 {
            return Err(Error::Shape(format!("linear_head: {} values is not a multiple of {ci}", inputs[0].len())));
        }
        let mut out = Vec::with_capacity(inputs[0].len() / ci * co);
        for x in inputs[0].chunks(ci) {
            let base = out.len();
            out.extend_from_slice(inputs[2]);
            for (a, xa) in x.iter().enumerate() {
                for (o, w) in out[base..].iter_mut().zip(&inputs[1][a * co..(a + 1) * co]) {
                    *o += xa * w;
                }
            }
        }
        Ok((out, no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let (ci, co) = (self.c_in, self.c_out);
        let mut gx = vec![0.0; inputs[0].len()];
        let mut gw = vec![0.0; ci * co];
        let mut gb = vec![0.0; co];
        for ((x, g), gxr) in inputs[0].chunks(ci).zip(grad.chunks(co)).zip(gx.chunks_mut(ci)) {
            gb.iter_mut().zip(g).for_each(|(b, g)| *b += g);
            for a in 0..ci {
                let w = &inputs[1][a * co..(a + 1) * co];
                gxr[a] = w.iter().zip(g).map(|(w, g)| w * g).sum();
                gw[a * co..(a + 1) * co].iter_mut().zip(g).for_each(|(d, g)| *d += x[a] * g);
            }
        }
        vec![gx, gw, gb]
    }
}

// ---------------------------------------------------------------- losses

fn scaled(g: &[f64], s: f64) -> Vec<f64> {
    g.iter().map(|v| v * s).collect()
}

/// RGB reconstruction loss against a fixed `[H,W,C]` target.
pub struct LossRgbOp {
    pub target: Arc<Vec<f64>>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub w_ssim: f64,
}

impl Op for LossRgbOp {
    fn name(&self) -> &str {
        "loss_rgb"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        expect_len(self.name(), "prediction", inputs[0].len(), self.target.len())?;
        let (v, g) = loss_rgb_grad(inputs[0], &self.target, self.height, self.width, self.channels, self.w_ssim)?;
        Ok((vec![v], Box::new(g)))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], s: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![scaled(saved::<Vec<f64>>(s), grad[0])]
    }
}

/// Masked depth loss against a fixed target.
pub struct LossDepthOp {
    pub target: Arc<Vec<f64>>,
    pub mask: Arc<Vec<bool>>,
}

impl Op for LossDepthOp {
    fn name(&self) -> &str {
        "loss_depth"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        expect_len(self.name(), "prediction", inputs[0].len(), self.target.len())?;
        let (v, g) = loss_depth_grad(inputs[0], &self.target, &self.mask)?;
        Ok((vec![v], Box::new(g)))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], s: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![scaled(saved::<Vec<f64>>(s), grad[0])]
    }
}

/// Ray index into `bins` marking rays without a target bin.
pub const NO_BIN: u32 = u32::MAX;

/// Cells flagged empty take the mean of their non-empty neighbours (zero if
/// none); other cells pass through. One channel.
pub struct FillEmpty {
    pub neighbors: Arc<Vec<[u32; 27]>>,
    pub empty: Arc<Vec<bool>>,
}

impl FillEmpty {
    fn sources(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[i]
            .iter()
            .filter(|&&j| j != u32::MAX && !self.empty[j as usize])
            .map(|&j| j as usize)
    }
}

impl Op for FillEmpty {
    fn name(&self) -> &str {
        "fill_empty"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        expect_len(self.name(), "cells", inputs[0].len(), self.empty.len())?;
        expect_len(self.name(), "neighbours", self.neighbors.len(), self.empty.len())?;
        let x = inputs[0];
        let out = (0..x.len())
            .map(|i| {
                if !self.empty[i] {
                    return x[i];
                }
                let (sum, n) = self.sources(i).fold((0.0, 0usize), |(s, n), j| (s + x[j], n + 1));
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            })
            .collect();
        Ok((out, Box::new(())))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let mut g = vec![0.0; inputs[0].len()];
        for (i, gi) in grad.iter().enumerate() {
            if !self.empty[i] {
                g[i] += gi;
                continue;
            }
            let n = self.sources(i).count();
            for j in self.sources(i) {
                g[j] += gi / n as f64;
            }
        }
        vec![g]
    }
}

/// Mean of `-ln(O_target + eps)` over rays with a target bin, from `[R, bins]`
/// occupancy weights. Zero when no ray has a target.
pub struct BinCrossEntropy {
    pub target: Arc<Vec<u32>>,
    pub bins: usize,
    pub eps: f64,
}

impl Op for BinCrossEntropy {
    fn name(&self) -> &str {
        "bin_cross_entropy"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        expect_len(self.name(), "weights", inputs[0].len(), self.target.len() * self.bins)?;
        let valid = self.target.iter().filter(|&&b| b != NO_BIN).count();
        let mut sum = 0.0;
        for (r, &b) in self.target.iter().enumerate() {
            if b != NO_BIN {
                sum -= (inputs[0][r * self.bins + b as usize] + self.eps).ln();
            }
        }
        Ok((vec![if valid == 0 { 0.0 } else { sum / valid as f64 }], Box::new(valid)))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], s: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let valid = *saved::<usize>(s);
        let mut out = vec![0.0; inputs[0].len()];
        if valid == 0 {
            return vec![out];
        }
        for (r, &b) in self.target.iter().enumerate() {
            if b != NO_BIN {
                let i = r * self.bins + b as usize;
                out[i] = -grad[0] / ((inputs[0][i] + self.eps) * valid as f64);
            }
        }
        vec![out]
    }
}

/// Opacity entropy loss.
pub struct EntropyOp;

impl Op for EntropyOp {
    fn name(&self) -> &str {
        "loss_density_entropy"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        let (v, g) = loss_density_entropy_grad(inputs[0]);
        Ok((vec![v], Box::new(g)))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], s: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![scaled(saved::<Vec<f64>>(s), grad[0])]
    }
}

/// L1 feature loss against a fixed target.
pub struct LossFeatureOp {
    pub target: Arc<Vec<f64>>,
}

impl Op for LossFeatureOp {
    fn name(&self) -> &str {
        "loss_feature"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        expect_arity(self.name(), inputs, 1)?;
        expect_len(self.name(), "prediction", inputs[0].len(), self.target.len())?;
        let (v, g) = loss_feature_grad(inputs[0], &self.target);
        Ok((vec![v], Box::new(g)))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], s: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        vec![scaled(saved::<Vec<f64>>(s), grad[0])]
    }
}

// ---------------------------------------------------------------- composites

type Builder = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync;

/// A sub-pipeline recorded on its own tape, usable as one op. Lets whole
/// chains go through [`super::fd_check`].
pub struct Composite {
    pub name: String,
    pub build: Box<Builder>,
}

impl Composite {
    pub fn new(name: impl Into<String>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static) -> Self {
        Composite {
            name: name.into(),
            build: Box::new(build),
        }
    }

    fn record(&self, inputs: &[&[f64]]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.to_vec())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }
}

impl Op for Composite {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        let (tape, _, out) = self.record(inputs)?;
        Ok((tape.value(out).to_vec(), no_saved()))
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], _: &Saved, grad: &[f64]) -> Vec<Vec<f64>> {
        let (tape, vars, out) = self.record(inputs).expect("forward succeeded on the same inputs");
        let g = tape.backward_seeded(out, grad.to_vec()).expect("finite gradients");
        vars.iter().zip(inputs).map(|(&v, x)| g.get_or_zeros(v, x.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let p = t.param(vec![1.0, 2.0]);
        let sq = t.apply(Mul, &[p, p]).unwrap();
        let a = t.apply(Slice { start: 0, len: 1 }, &[sq]).unwrap();
        let b = t.apply(Slice { start: 1, len: 1 }, &[sq]).unwrap();
        let loss = t.apply(WeightedSum(vec![1.0, 1.0]), &[a, b]).unwrap();
        assert_eq!(t.scalar(loss), 5.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_and_detached_get_nothing() {
        let mut t = Tape::new();
        let p = t.param(vec![3.0]);
        let c = t.constant(vec![2.0]);
        let d = t.detach(p);
        let x = t.apply(Mul, &[p, c]).unwrap();
        let y = t.apply(Mul, &[x, d]).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(p).unwrap(), &[6.0]);
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
    }

    #[test]
    fn non_finite_forward_names_op() {
        let mut t = Tape::new();
        let p = t.param(vec![1000.0]);
        match t.apply(Exp, &[p]) {
            Err(Error::Numerical { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("{:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus_inverse(softplus(0.3)) - 0.3).abs() < 1e-12);
    }
}
