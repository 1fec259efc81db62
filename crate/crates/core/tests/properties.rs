use nalgebra::{Matrix3, Rotation3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfield::frustum::LiftedPoint;
use voxfield::geometry::{grid_coords, morton_decode, Camera, Contraction, Vec3};
use voxfield::harness::{street_canyon, virtual_poses};
use voxfield::objectives::{
    depth_metrics, loss_density_entropy, loss_depth, loss_feature, loss_rgb, pca_fit, psnr_raw, ssim,
};
use voxfield::optim::{clip_gradients, global_norm, ParamRole, Parameter};
use voxfield::renderer::{render_image, Decoder, SamplePlan};
use voxfield::tensor_io::{export_ppm, import_ppm, read_tensor, write_tensor, Tensor};
use voxfield::voxelgrid::{build, query_density, query_feature, sparse_conv, ConvKernel};

fn contraction() -> Contraction {
    Contraction::new([4.0, 4.0, 2.0], 0.8).unwrap()
}

fn random_points(seed: u64, n: usize, channels: usize, extent: f64) -> Vec<LiftedPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| LiftedPoint {
            position: Vec3::new(
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent / 2.0..extent / 2.0),
            ),
            feature: (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            density: rng.gen_range(0.0..3.0),
        })
        .collect()
}

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_f64(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_file_round_trip_is_bitwise(seed in any::<u64>(), rank in 1usize..=5, kind in 0u8..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
        let n: usize = shape.iter().product();
        let t = match kind {
            0 => Tensor::from_f64(shape, (0..n).map(|_| f64::from_bits(rng.gen::<u64>() >> 2)).collect()),
            1 => Tensor::from_f32(shape, (0..n).map(|_| rng.gen::<f32>() * 1e3 - 5e2).collect()),
            _ => Tensor::from_u8(shape, (0..n).map(|_| rng.gen()).collect()),
        }.unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vxt");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        prop_assert_eq!(back.to_bytes(), t.to_bytes());
    }

    #[test]
    fn ppm_round_trip_within_one_level(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let img = image(seed, h, w);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        export_ppm(&img, &path).unwrap();
        let back = import_ppm(&path).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        for (a, b) in back.to_f64_vec().iter().zip(img.to_f64_vec()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn contraction_inverts_and_separates(
        a in prop::array::uniform3(-1e4f64..1e4),
        b in prop::array::uniform3(-1e4f64..1e4),
    ) {
        let c = contraction();
        let (p, q) = (Vec3::from(a), Vec3::from(b));
        let s = c.contract(&p);
        let back = c.uncontract(&s).unwrap();
        prop_assert!((back - p).norm() <= 1e-9 * p.norm().max(1.0) * 1e3);
        let again = c.contract(&back);
        prop_assert!((again - s).norm() <= 1e-9 * s.norm().max(1.0));
        if p != q {
            prop_assert!(c.contract(&q) != s);
        }
    }

    #[test]
    fn contraction_is_continuous_at_boundary(dir in prop::array::uniform3(-1.0f64..1.0), axis in 0usize..3) {
        let c = contraction();
        let mut u = Vec3::from(dir);
        u[axis] = if u[axis] >= 0.0 { 1.0 } else { -1.0 };
        let inner = Vec3::new(4.0, 4.0, 2.0);
        let at = |n: f64| c.contract(&u.component_mul(&inner).scale(n));
        prop_assert!((at(1.0 - 1e-9) - at(1.0 + 1e-9)).amax() < 1e-6);
    }

    #[test]
    fn build_ignores_point_order(seed in any::<u64>()) {
        let c = contraction();
        let pts = random_points(seed, 200, 3, 6.0);
        let mut shuffled = pts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let a = build(&pts, &c, 5, 3, 1e-8).unwrap();
        let b = build(&shuffled, &c, 5, 3, 1e-8).unwrap();
        prop_assert_eq!(a.fine.cells().keys(), b.fine.cells().keys());
        for (x, y) in a.fine.features().iter().zip(b.fine.features()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.coarse.density().iter().zip(b.coarse.density()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        prop_assert!(a.fine.len() <= pts.len() && a.coarse.len() <= pts.len());
    }

    #[test]
    fn sparse_conv_keeps_cells(seed in any::<u64>()) {
        let c = contraction();
        let oct = build(&random_points(seed, 150, 2, 5.0), &c, 6, 4, 1e-8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = ConvKernel::new(
            2,
            3,
            (0..27 * 2 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            vec![0.1, 0.0, -0.1],
        ).unwrap();
        let out = sparse_conv(&oct.fine, &kernel).unwrap();
        prop_assert_eq!(out.cells().keys(), oct.fine.cells().keys());
        prop_assert_eq!(out.channels(), 3);
    }

    #[test]
    fn queries_match_dense_reference(seed in any::<u64>(), fine in 3u32..6) {
        let c = contraction();
        let coarse = fine - 2;
        let oct = build(&random_points(seed, 120, 2, 8.0), &c, fine, coarse, 1e-8).unwrap();
        let dense = |level: u32, grid: &voxfield::voxelgrid::SparseGrid| {
            let side = 1usize << level;
            let mut d = vec![None; side * side * side];
            for (i, &k) in grid.cells().keys().iter().enumerate() {
                let [x, y, z] = morton_decode(k);
                d[(x as usize * side + y as usize) * side + z as usize] = Some(i);
            }
            d
        };
        let (df, dc) = (dense(fine, &oct.fine), dense(coarse, &oct.coarse));
        let at = |d: &[Option<usize>], level: u32, s: &Vec3| {
            let [x, y, z] = grid_coords(s, level);
            let side = 1usize << level;
            d[(x as usize * side + y as usize) * side + z as usize]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(!seed);
        for _ in 0..2000 {
            let s = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (f, k) = (at(&df, fine, &s), at(&dc, coarse, &s));
            let density = match (f, k) {
                (Some(f), _) => oct.fine.density()[f],
                (None, Some(k)) => oct.coarse.density()[k],
                _ => 0.0,
            };
            prop_assert_eq!(query_density(&oct, &s), density);
            let mut feature = vec![0.0; 4];
            if let Some(f) = f {
                feature[..2].copy_from_slice(oct.fine.feature(f));
            }
            if let Some(k) = k {
                feature[2..].copy_from_slice(oct.coarse.feature(k));
            }
            prop_assert_eq!(query_feature(&oct, &s), feature);
        }
    }

    #[test]
    fn rendered_opacity_and_depth_stay_in_range(seed in any::<u64>()) {
        let c = contraction();
        let oct = build(&random_points(seed, 400, 3, 5.0), &c, 6, 4, 1e-8).unwrap();
        let cam = Camera::new(8, 6, [6.0, 6.0, 4.0, 3.0], Matrix3::identity(), Vec3::zeros()).unwrap();
        let plan = SamplePlan::new(0.3, 20.0, 16, 8);
        let out = render_image(&oct, &c, &cam, &plan, &Decoder::Identity).unwrap();
        for o in out.opacity_image.to_f64_vec() {
            prop_assert!((0.0..=1.0).contains(&o));
        }
        for d in out.depth_image.to_f64_vec() {
            prop_assert!((0.0..=20.0).contains(&d));
        }
    }

    #[test]
    fn psnr_falls_as_error_grows(seed in any::<u64>(), a in 0.01f64..0.4, b in 0.01f64..0.4) {
        prop_assume!((a - b).abs() > 1e-6);
        let gt = image(seed, 4, 4).to_f64_vec();
        let shifted = |e: f64| gt.iter().map(|v| v + e).collect::<Vec<_>>();
        let (pa, pb) = (psnr_raw(&shifted(a), &gt, 1.0), psnr_raw(&shifted(b), &gt, 1.0));
        prop_assert_eq!(a < b, pa > pb);
    }

    #[test]
    fn ssim_is_reflexive_and_symmetric(seed in any::<u64>()) {
        let (x, y) = (image(seed, 12, 13), image(seed.wrapping_add(1), 12, 13));
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn depth_deltas_are_nested(pred in prop::collection::vec(0.1f64..90.0, 16), gt in prop::collection::vec(0.5f64..80.0, 16)) {
        let p = Tensor::from_f64(vec![4, 4], pred).unwrap();
        let g = Tensor::from_f64(vec![4, 4], gt).unwrap();
        let m = depth_metrics(&p, &g, None, 80.0).unwrap();
        prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
    }

    #[test]
    fn pca_basis_is_orthonormal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..40 * 6).map(|i| rng.gen_range(-1.0..1.0) * (1.0 + (i % 6) as f64)).collect();
        let pca = pca_fit(&Tensor::from_f64(vec![40, 6], data).unwrap(), 4).unwrap();
        for (i, a) in pca.basis.iter().enumerate() {
            for (j, b) in pca.basis.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-9);
            }
        }
        for w in pca.variances.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_at_target(seed in any::<u64>()) {
        let (x, y) = (image(seed, 12, 12), image(seed.wrapping_add(7), 12, 12));
        prop_assert!(loss_rgb(&x, &y, 0.5).unwrap() >= 0.0);
        prop_assert!(loss_rgb(&x, &x, 0.5).unwrap().abs() < 1e-12);
        let d = Tensor::from_f64(vec![12, 12], x.to_f64_vec()[..144].iter().map(|v| v + 0.5).collect()).unwrap();
        let e = Tensor::from_f64(vec![12, 12], y.to_f64_vec()[..144].iter().map(|v| v + 0.5).collect()).unwrap();
        prop_assert!(loss_depth(&d, &e, None).unwrap() >= 0.0);
        prop_assert!(loss_depth(&d, &d, None).unwrap().abs() < 1e-12);
        prop_assert!(loss_feature(&x, &y).unwrap() >= 0.0);
        prop_assert_eq!(loss_feature(&x, &x).unwrap(), 0.0);
        let ones = Tensor::from_f64(vec![3, 3], vec![1.0; 9]).unwrap();
        prop_assert!(loss_density_entropy(&ones) < 1e-5);
        prop_assert!(loss_density_entropy(&d) >= 0.0);
    }

    #[test]
    fn clipping_shrinks_and_keeps_direction(g in prop::collection::vec(-50.0f64..50.0, 1..12), clip in 0.1f64..40.0) {
        let mut params = vec![Parameter::new("p", ParamRole::Decoder, vec![0.0; g.len()])];
        params[0].set_grad(g.clone()).unwrap();
        let before = global_norm(&params);
        clip_gradients(&mut params, clip);
        let after = global_norm(&params);
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= clip.max(before).min(before.max(clip)) + 1e-9);
        if before > 0.0 {
            let s = after / before;
            for (a, b) in params[0].grad.iter().zip(&g) {
                prop_assert!((a - s * b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn virtual_poses_keep_orientation(ax in -3.0f64..3.0, ay in -1.0f64..1.0, az in -3.0f64..3.0, d in 0.0f64..3.0) {
        let r = Rotation3::from_euler_angles(ax, ay, az).into_inner();
        let cam = Camera::new(8, 6, [5.0, 5.0, 4.0, 3.0], r, Vec3::new(1.0, -2.0, 0.5)).unwrap();
        for v in virtual_poses(&cam, d) {
            prop_assert_eq!(v.rotation(), cam.rotation());
            prop_assert!(((v.origin() - cam.origin()).norm() - d).abs() < 1e-9);
        }
    }
}

#[test]
fn synthetic_depth_matches_independent_intersections() {
    let cfg = street_canyon();
    let cam = cfg.cameras[0].camera().unwrap();
    let (t_near, t_far) = cfg.bins.range();
    let targets = voxfield::harness::render_targets(&cfg.scene, &cam, t_near, t_far).unwrap();
    let depth = targets.depth.to_f64_vec();
    for row in 0..cam.height {
        for col in 0..cam.width {
            let ray = cam.pixel_center_ray(col, row);
            let mut best = f64::INFINITY;
            for b in &cfg.scene.boxes {
                let (mut lo, mut hi) = (t_near, t_far);
                for a in 0..3 {
                    let inv = 1.0 / ray.direction[a];
                    let (mut t0, mut t1) = ((b.min[a] - ray.origin[a]) * inv, (b.max[a] - ray.origin[a]) * inv);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    lo = lo.max(t0);
                    hi = hi.min(t1);
                }
                if lo <= hi {
                    best = best.min(lo);
                }
            }
            let expected = if best.is_finite() { best } else { 0.0 };
            let got = depth[row * cam.width + col];
            assert!((got - expected).abs() <= 1e-9 * expected.max(1.0), "pixel ({col}, {row}): {got} vs {expected}");
        }
    }
}

#[test]
fn extreme_points_stay_inside_open_cube() {
    let c = contraction();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100_000 {
        let scale = 10f64.powi(i % 9);
        let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale;
        assert!(c.contract(&p).amax() < 1.0, "{p:?}");
    }
}
