//! Registry of every differentiable op with random fixtures, plus the
//! composed ray-to-loss pipeline, for finite-difference verification.

use std::sync::Arc;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{fd_check, FdReport, DEFAULT_STEP};
use super::ops::*;
use super::tape::{Op, Tape, Var};
use crate::error::Result;
use crate::frustum::LiftedPoint;
use crate::geometry::{morton_encode, Camera, Contraction, Vec3};
use crate::renderer::{camera_rays, DensityView, RayBatch, SamplePlan};
use crate::voxelgrid::{build, CellIndex, PoolMap};

pub type Fixture = (Box<dyn Op>, Vec<Vec<f64>>);

pub struct GradCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Result<Fixture>,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub seed: u64,
    pub report: FdReport,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn boxed(op: impl Op + 'static, inputs: Vec<Vec<f64>>) -> Result<Fixture> {
    Ok((Box::new(op), inputs))
}

fn random_cells(rng: &mut ChaCha8Rng, level: u32, extent: u32, n: usize) -> Result<CellIndex> {
    let keys = (0..n)
        .map(|_| morton_encode([rng.gen_range(0..extent), rng.gen_range(0..extent), rng.gen_range(0..extent)]))
        .collect();
    CellIndex::new(level, keys)
}

/// A 6x6 camera looking down +x at a random cloud of cells, with its rays
/// already sampled against random densities.
pub struct RenderFixture {
    pub camera: Camera,
    pub batch: Arc<RayBatch>,
    pub fine_cells: usize,
    pub coarse_cells: usize,
    pub channels: usize,
}

pub fn render_fixture(rng: &mut ChaCha8Rng, channels: usize) -> Result<RenderFixture> {
    let contraction = Contraction::new([4.0, 4.0, 4.0], 0.5)?;
    let rot = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let camera = Camera::new(6, 6, [5.0, 5.0, 3.0, 3.0], rot, Vec3::zeros())?;
    let points: Vec<LiftedPoint> = (0..120)
        .map(|_| LiftedPoint {
            position: Vec3::new(rng.gen_range(1.5..3.5), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)),
            feature: vec![0.0; channels],
            density: rng.gen_range(0.2..2.0),
        })
        .collect();
    let oct = build(&points, &contraction, 5, 3, 1e-8)?;
    let plan = SamplePlan::new(0.5, 6.0, 12, 6);
    let batch = RayBatch::build(&camera_rays(&camera), &contraction, &plan, &DensityView::of(&oct), Some(rng.gen()))?;
    Ok(RenderFixture {
        camera,
        batch: Arc::new(batch),
        fine_cells: oct.fine.len(),
        coarse_cells: oct.coarse.len(),
        channels,
    })
}

fn render_inputs(rng: &mut ChaCha8Rng, f: &RenderFixture) -> Vec<Vec<f64>> {
    vec![
        uniform(rng, f.fine_cells * f.channels, -1.0, 1.0),
        uniform(rng, f.coarse_cells * f.channels, -1.0, 1.0),
        uniform(rng, f.fine_cells, 0.2, 2.0),
        uniform(rng, f.coarse_cells, 0.2, 2.0),
    ]
}

/// Softplus densities, render, decode, and RGB + depth + entropy losses for
/// one small camera. Inputs: fine features, coarse features, fine density
/// logits, coarse density logits, decoder weights, decoder bias.
pub fn pipeline_case(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let c = 3;
    let f = render_fixture(rng, c)?;
    let (h, w) = (f.camera.height, f.camera.width);
    let rays = h * w;
    let width = 2 * c;
    let rgb_target = Arc::new(uniform(rng, 4 * rays * 3, 0.0, 1.0));
    let depth_target = Arc::new(uniform(rng, rays, 1.0, 5.0));
    let mask = Arc::new((0..rays).map(|i| i % 3 != 0).collect::<Vec<bool>>());
    let batch = f.batch.clone();
    let op = Composite::new("ray_to_loss", move |t: &mut Tape, v: &[Var]| {
        let fd = t.apply(Softplus, &[v[2]])?;
        let cd = t.apply(Softplus, &[v[3]])?;
        let r = t.apply(
            RenderOp {
                batch: batch.clone(),
                fine_channels: c,
                coarse_channels: c,
            },
            &[v[0], v[1], fd, cd],
        )?;
        let feat = t.apply(Slice { start: 0, len: rays * width }, &[r])?;
        let depth = t.apply(Slice { start: rays * width, len: rays }, &[r])?;
        let opacity = t.apply(Slice { start: rays * (width + 1), len: rays }, &[r])?;
        let rgb = t.apply(
            DecodeOp {
                height: h,
                width: w,
                channels: width,
            },
            &[feat, v[4], v[5]],
        )?;
        let l_rgb = t.apply(
            LossRgbOp {
                target: rgb_target.clone(),
                height: 2 * h,
                width: 2 * w,
                channels: 3,
                w_ssim: 0.1,
            },
            &[rgb],
        )?;
        let l_depth = t.apply(
            LossDepthOp {
                target: depth_target.clone(),
                mask: mask.clone(),
            },
            &[depth],
        )?;
        let l_ent = t.apply(EntropyOp, &[opacity])?;
        t.apply(WeightedSum(vec![1.0, 1.0, 0.01]), &[l_rgb, l_depth, l_ent])
    });
    let mut inputs = vec![
        uniform(rng, f.fine_cells * c, -1.0, 1.0),
        uniform(rng, f.coarse_cells * c, -1.0, 1.0),
        uniform(rng, f.fine_cells, -1.0, 1.5),
        uniform(rng, f.coarse_cells, -1.0, 1.5),
    ];
    inputs.push(uniform(rng, 12 * width * 9, -0.3, 0.3));
    inputs.push(uniform(rng, 12, -0.3, 0.3));
    boxed(op, inputs)
}

/// Every registered op.
pub fn registry() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "softplus",
            build: |r| boxed(Softplus, vec![uniform(r, 12, -4.0, 4.0)]),
        },
        GradCase {
            name: "exp",
            build: |r| boxed(Exp, vec![uniform(r, 12, -3.0, 3.0)]),
        },
        GradCase {
            name: "add",
            build: |r| boxed(Add, vec![uniform(r, 7, -1.0, 1.0), uniform(r, 7, -1.0, 1.0)]),
        },
        GradCase {
            name: "mul",
            build: |r| boxed(Mul, vec![uniform(r, 7, -1.0, 1.0), uniform(r, 7, -1.0, 1.0)]),
        },
        GradCase {
            name: "scale",
            build: |r| {
                let s = r.gen_range(-2.0..2.0);
                boxed(Scale(s), vec![uniform(r, 5, -1.0, 1.0)])
            },
        },
        GradCase {
            name: "slice",
            build: |r| boxed(Slice { start: 2, len: 4 }, vec![uniform(r, 9, -1.0, 1.0)]),
        },
        GradCase {
            name: "concat",
            build: |r| boxed(Concat, vec![uniform(r, 3, -1.0, 1.0), uniform(r, 5, -1.0, 1.0)]),
        },
        GradCase {
            name: "row_blend",
            build: |r| {
                let blend = Arc::new(vec![(0, 0, 0.0), (0, 1, 0.25), (0, 1, 0.75), (1, 2, 0.5), (2, 2, 0.0)]);
                boxed(RowBlend { blend, row_len: 4 }, vec![uniform(r, 12, -1.0, 1.0)])
            },
        },
        GradCase {
            name: "weighted_sum",
            build: |r| {
                let w = uniform(r, 3, 0.0, 2.0);
                boxed(WeightedSum(w), (0..3).map(|_| uniform(r, 1, -1.0, 1.0)).collect())
            },
        },
        GradCase {
            name: "occupancy_weights",
            build: |r| {
                let delta = Arc::new(uniform(r, 4 * 8, 0.05, 0.6));
                boxed(BatchedOccupancy { delta, bins: 8 }, vec![uniform(r, 32, 0.0, 3.0)])
            },
        },
        GradCase {
            name: "expected_depth",
            build: |r| {
                let t = Arc::new(uniform(r, 3 * 5, 0.5, 20.0));
                boxed(BatchedExpectedDepth { t, bins: 5 }, vec![uniform(r, 15, 0.0, 0.3)])
            },
        },
        GradCase {
            name: "lift_features",
            build: |r| {
                boxed(
                    LiftFeatures { bins: 4, channels: 3 },
                    vec![uniform(r, 5 * 4, 0.0, 1.0), uniform(r, 5 * 3, -1.0, 1.0)],
                )
            },
        },
        GradCase {
            name: "cell_mean",
            build: |r| {
                let assign: Vec<u32> = (0..14)
                    .map(|_| if r.gen_bool(0.2) { UNASSIGNED } else { r.gen_range(0..5) })
                    .collect();
                let op = CellMean {
                    assign: Arc::new(assign),
                    cells: 5,
                    channels: 2,
                };
                boxed(op, vec![uniform(r, 28, -1.0, 1.0)])
            },
        },
        GradCase {
            name: "sparse_conv",
            build: |r| {
                let cells = random_cells(r, 3, 4, 24)?;
                let (ci, co) = (2, 3);
                let op = SparseConvOp {
                    neighbors: Arc::new(cells.neighbor_table()),
                    c_in: ci,
                    c_out: co,
                };
                let n = cells.len();
                boxed(
                    op,
                    vec![uniform(r, n * ci, -1.0, 1.0), uniform(r, 27 * ci * co, -0.5, 0.5), uniform(r, co, -0.5, 0.5)],
                )
            },
        },
        GradCase {
            name: "pool_concat",
            build: |r| {
                let fine = random_cells(r, 3, 6, 30)?;
                let coarse = random_cells(r, 2, 3, 6)?;
                let map = Arc::new(PoolMap::new(&fine, &coarse)?);
                let op = PoolConcatOp {
                    map,
                    coarse_channels: 2,
                    fine_channels: 3,
                };
                boxed(op, vec![uniform(r, coarse.len() * 2, -1.0, 1.0), uniform(r, fine.len() * 3, -1.0, 1.0)])
            },
        },
        GradCase {
            name: "render",
            build: |r| {
                let f = render_fixture(r, 2)?;
                let inputs = render_inputs(r, &f);
                let op = RenderOp {
                    batch: f.batch,
                    fine_channels: 2,
                    coarse_channels: 2,
                };
                boxed(op, inputs)
            },
        },
        GradCase {
            name: "decode",
            build: |r| {
                let (h, w, c) = (3, 4, 4);
                boxed(
                    DecodeOp {
                        height: h,
                        width: w,
                        channels: c,
                    },
                    vec![uniform(r, h * w * c, -1.0, 1.0), uniform(r, 12 * c * 9, -0.5, 0.5), uniform(r, 12, -0.5, 0.5)],
                )
            },
        },
        GradCase {
            name: "linear_head",
            build: |r| {
                boxed(
                    LinearHead { c_in: 4, c_out: 3 },
                    vec![uniform(r, 5 * 4, -1.0, 1.0), uniform(r, 12, -1.0, 1.0), uniform(r, 3, -1.0, 1.0)],
                )
            },
        },
        GradCase {
            name: "loss_rgb",
            build: |r| {
                let (h, w) = (12, 13);
                let op = LossRgbOp {
                    target: Arc::new(uniform(r, h * w * 3, 0.0, 1.0)),
                    height: h,
                    width: w,
                    channels: 3,
                    w_ssim: 0.1,
                };
                boxed(op, vec![uniform(r, h * w * 3, 0.0, 1.0)])
            },
        },
        GradCase {
            name: "loss_depth",
            build: |r| {
                let mask = (0..20).map(|_| r.gen_bool(0.7)).chain([true]).collect();
                let op = LossDepthOp {
                    target: Arc::new(uniform(r, 21, 1.0, 30.0)),
                    mask: Arc::new(mask),
                };
                boxed(op, vec![uniform(r, 21, 1.0, 30.0)])
            },
        },
        GradCase {
            name: "bin_cross_entropy",
            build: |r| {
                let target = (0..6).map(|i| if i == 2 { NO_BIN } else { r.gen_range(0..4) }).collect();
                let op = BinCrossEntropy {
                    target: Arc::new(target),
                    bins: 4,
                    eps: 1e-6,
                };
                boxed(op, vec![uniform(r, 24, 0.05, 0.9)])
            },
        },
        GradCase {
            name: "fill_empty",
            build: |r| {
                let cells = CellIndex::new(2, (0..20).map(|_| morton_encode([r.gen_range(0..4), r.gen_range(0..4), r.gen_range(0..4)])).collect())?;
                let empty: Vec<bool> = (0..cells.len()).map(|_| r.gen_bool(0.4)).collect();
                let op = FillEmpty {
                    neighbors: Arc::new(cells.neighbor_table()),
                    empty: Arc::new(empty),
                };
                let x = uniform(r, cells.len(), 0.0, 2.0);
                boxed(op, vec![x])
            },
        },
        GradCase {
            name: "loss_density_entropy",
            build: |r| boxed(EntropyOp, vec![uniform(r, 10, 0.01, 0.99)]),
        },
        GradCase {
            name: "loss_feature",
            build: |r| {
                let op = LossFeatureOp {
                    target: Arc::new(uniform(r, 16, -1.0, 1.0)),
                };
                boxed(op, vec![uniform(r, 16, -1.0, 1.0)])
            },
        },
        GradCase {
            name: "ray_to_loss",
            build: pipeline_case,
        },
    ]
}

/// Run every case once per seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for case in registry() {
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (op, inputs) = (case.build)(&mut rng)?;
            let report = fd_check(op.as_ref(), &inputs, DEFAULT_STEP, &mut rng)?;
            out.push(CaseReport {
                name: case.name,
                seed,
                report,
            });
        }
    }
    Ok(out)
}
