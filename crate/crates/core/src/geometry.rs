//! Pinhole cameras, rays, and the contraction of unbounded space into the
//! signed unit cube.
//!
//! The contraction works on per-axis normalized coordinates `q = p / p_inner`
//! with the box norm `n = |q|_inf`:
//!
//! ```text
//! f(p) = alpha * q                          if n <= 1
//! f(p) = (1 - (1 - alpha) / n) * q / n      otherwise
//! ```
//!
//! Both branches give `|f(p)|_inf = alpha` at `n = 1`, and the image is the
//! open cube `(-1, 1)^3`. Grid cells index the contracted cube after mapping
//! it to `[0, 1)^3`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole camera with a world-from-camera rigid pose.
///
/// Camera frame: +x right, +y down, +z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        [fx, fy, cx, cy]: [f64; 4],
        rotation: Matrix3<f64>,
        translation: Vec3,
    ) -> Result<Camera> {
        if width == 0 || height == 0 {
            return Err(Error::validation("width", "image must be non-empty"));
        }
        if !(fx > 0.0 && fx.is_finite()) {
            return Err(Error::validation("fx", "must be > 0"));
        }
        if !(fy > 0.0 && fy.is_finite()) {
            return Err(Error::validation("fy", "must be > 0"));
        }
        if !(cx > 0.0 && cx < width as f64) {
            return Err(Error::validation("cx", "must lie inside (0, width)"));
        }
        if !(cy > 0.0 && cy < height as f64) {
            return Err(Error::validation("cy", "must lie inside (0, height)"));
        }
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if !(ortho_err <= 1e-6) || !((rotation.determinant() - 1.0).abs() <= 1e-6) {
            return Err(Error::validation(
                "world_from_camera",
                "rotation block must be orthonormal with determinant 1",
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("world_from_camera", "translation must be finite"));
        }
        Ok(Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Build from a row-major 4x4 world-from-camera matrix.
    pub fn from_row_major(
        width: usize,
        height: usize,
        intrinsics: [f64; 4],
        m: &[f64; 16],
    ) -> Result<Camera> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::validation(
                "world_from_camera",
                "last row must be (0, 0, 0, 1)",
            ));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Camera::new(width, height, intrinsics, rotation, translation)
    }

    pub fn world_from_camera(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn origin(&self) -> Vec3 {
        self.translation
    }

    pub fn intrinsics(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through image coordinates `(u, v)`; pixel `(col, row)` has its
    /// center at `(col + 0.5, row + 0.5)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Ray {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray {
            origin: self.translation,
            direction: (self.rotation * d_cam).normalize(),
        }
    }

    /// Ray through the center of pixel `(col, row)`.
    pub fn pixel_center_ray(&self, col: usize, row: usize) -> Ray {
        self.pixel_ray(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Project a world point to `(u, v, z_cam)`; `None` when behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let pc = self.rotation.transpose() * (p - self.translation);
        if pc.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
            pc.z,
        ))
    }

    /// Same pose and field of view at `factor` times the resolution.
    pub fn scaled(&self, factor: usize) -> Camera {
        let f = factor as f64;
        Camera {
            width: self.width * factor,
            height: self.height * factor,
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f,
            cy: self.cy * f,
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    /// Copy translated by `offset` expressed in this camera's frame; the
    /// orientation is kept bit for bit.
    pub fn translated_local(&self, offset: &Vec3) -> Camera {
        let mut c = self.clone();
        c.translation = self.translation + self.rotation * offset;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contraction {
    pub p_inner: Vec3,
    pub alpha: f64,
}

impl Contraction {
    pub fn new(p_inner: [f64; 3], alpha: f64) -> Result<Contraction> {
        if !p_inner.iter().all(|&p| p > 0.0 && p.is_finite()) {
            return Err(Error::validation("p_inner", "components must be positive"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::validation("alpha", "must lie in (0, 1)"));
        }
        Ok(Contraction {
            p_inner: Vec3::from(p_inner),
            alpha,
        })
    }

    pub fn contract(&self, p: &Vec3) -> Vec3 {
        let q = p.component_div(&self.p_inner);
        let n = q.amax();
        if n <= 1.0 {
            q * self.alpha
        } else {
            q * ((1.0 - (1.0 - self.alpha) / n) / n)
        }
    }

    pub fn uncontract(&self, s: &Vec3) -> Result<Vec3> {
        let ns = s.amax();
        if !(ns < 1.0) {
            return Err(Error::Domain(format!(
                "contracted point {s:?} outside the open unit cube"
            )));
        }
        let q = if ns <= self.alpha {
            s / self.alpha
        } else {
            let n = (1.0 - self.alpha) / (1.0 - ns);
            s * (n / ns)
        };
        Ok(q.component_mul(&self.p_inner))
    }

    /// One-dimensional warp of metric ray distance used to lay out depth bins
    /// and ray samples along `direction`.
    pub fn depth_warp(&self, direction: &Vec3) -> DepthWarp {
        DepthWarp {
            scale: direction.component_div(&self.p_inner).amax(),
            alpha: self.alpha,
        }
    }
}

/// The contraction restricted to a ray through the origin:
/// `s(t) = g(scale * t)` where `g` is the scalar profile of the contraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthWarp {
    pub scale: f64,
    pub alpha: f64,
}

impl DepthWarp {
    /// Identity-shaped warp (`s = t`), used for linear sample spacing.
    pub fn linear() -> DepthWarp {
        DepthWarp {
            scale: 1.0,
            alpha: 1.0,
        }
    }

    pub fn forward(&self, t: f64) -> f64 {
        let n = self.scale * t;
        if n <= 1.0 || self.alpha >= 1.0 {
            self.alpha * n
        } else {
            1.0 - (1.0 - self.alpha) / n
        }
    }

    pub fn inverse(&self, s: f64) -> f64 {
        let n = if s <= self.alpha || self.alpha >= 1.0 {
            s / self.alpha
        } else {
            (1.0 - self.alpha) / (1.0 - s)
        };
        n / self.scale
    }
}

/// Integer cell of contracted point `s` on a `2^level` grid per axis.
pub fn grid_coords(s: &Vec3, level: u32) -> [u32; 3] {
    let cells = (1u64 << level) as f64;
    let max = (1u32 << level) - 1;
    let mut out = [0u32; 3];
    for k in 0..3 {
        let c = ((s[k] + 1.0) / 2.0 * cells).floor();
        out[k] = if c < 0.0 {
            0
        } else if c >= max as f64 {
            max
        } else {
            c as u32
        };
    }
    out
}

/// Contracted-space center of a grid cell.
pub fn cell_center(coords: [u32; 3], level: u32) -> Vec3 {
    let cells = (1u64 << level) as f64;
    Vec3::new(
        (coords[0] as f64 + 0.5) / cells * 2.0 - 1.0,
        (coords[1] as f64 + 0.5) / cells * 2.0 - 1.0,
        (coords[2] as f64 + 0.5) / cells * 2.0 - 1.0,
    )
}

fn spread_bits(v: u32) -> u64 {
    let mut x = (v as u64) & 0x1f_ffff;
    x = (x | x << 32) & 0x1f00000000ffff;
    x = (x | x << 16) & 0x1f0000ff0000ff;
    x = (x | x << 8) & 0x100f00f00f00f00f;
    x = (x | x << 4) & 0x10c30c30c30c30c3;
    x = (x | x << 2) & 0x1249249249249249;
    x
}

fn compact_bits(v: u64) -> u32 {
    let mut x = v & 0x1249249249249249;
    x = (x | x >> 2) & 0x10c30c30c30c30c3;
    x = (x | x >> 4) & 0x100f00f00f00f00f;
    x = (x | x >> 8) & 0x1f0000ff0000ff;
    x = (x | x >> 16) & 0x1f00000000ffff;
    x = (x | x >> 32) & 0x1f_ffff;
    x as u32
}

/// Interleave three 21-bit coordinates (x in the lowest bit).
pub fn morton_encode(c: [u32; 3]) -> u64 {
    spread_bits(c[0]) | spread_bits(c[1]) << 1 | spread_bits(c[2]) << 2
}

pub fn morton_decode(key: u64) -> [u32; 3] {
    [compact_bits(key), compact_bits(key >> 1), compact_bits(key >> 2)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_cam() -> Camera {
        Camera::new(64, 48, [50.0, 50.0, 32.0, 24.0], Matrix3::identity(), Vec3::zeros()).unwrap()
    }

    #[test]
    fn principal_ray() {
        let r = identity_cam().pixel_ray(32.0, 24.0);
        assert_eq!(r.origin, Vec3::zeros());
        assert!((r.direction - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn unit_offset_ray() {
        let r = identity_cam().pixel_ray(32.0 + 50.0, 24.0);
        let expect = Vec3::new(1.0, 0.0, 1.0).normalize();
        assert!((r.direction - expect).norm() < 1e-15);
    }

    #[test]
    fn rotated_camera_ray() {
        // 90 degrees about +y maps camera +z onto world +x.
        let rot = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        let cam = Camera::new(64, 48, [50.0, 50.0, 32.0, 24.0], rot, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let r = cam.pixel_ray(32.0, 24.0);
        assert!((r.direction - Vec3::x()).norm() < 1e-15);
        assert_eq!(r.origin, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn camera_validation() {
        let bad_rot = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(8, 8, [5.0, 5.0, 4.0, 4.0], bad_rot, Vec3::zeros()).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(8, 8, [5.0, 5.0, 4.0, 4.0], reflect, Vec3::zeros()).is_err());
        assert!(Camera::new(8, 8, [5.0, 5.0, 8.0, 4.0], Matrix3::identity(), Vec3::zeros()).is_err());
        assert!(Camera::new(8, 8, [0.0, 5.0, 4.0, 4.0], Matrix3::identity(), Vec3::zeros()).is_err());
    }

    #[test]
    fn project_inverts_pixel_ray() {
        let cam = identity_cam();
        let r = cam.pixel_ray(10.25, 40.5);
        let (u, v, _) = cam.project(&r.at(7.0)).unwrap();
        assert!((u - 10.25).abs() < 1e-12 && (v - 40.5).abs() < 1e-12);
        assert!(cam.project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn contract_fixed_points() {
        let c = Contraction::new([50.0, 50.0, 6.4], 0.8).unwrap();
        assert_eq!(c.contract(&Vec3::zeros()), Vec3::zeros());
        let s = c.contract(&Vec3::new(50.0, 50.0, 6.4));
        assert!((s - Vec3::new(0.8, 0.8, 0.8)).norm() < 1e-15);
        let far = c.contract(&Vec3::new(50.0 * 1e4, 0.0, 0.0));
        assert!(far.x > 0.999 && far.x < 1.0);
    }

    #[test]
    fn uncontract_inner_branch_and_domain() {
        let c = Contraction::new([10.0, 20.0, 4.0], 0.8).unwrap();
        let s = Vec3::new(0.4, -0.1, 0.2);
        let p = c.uncontract(&s).unwrap();
        assert!((p - Vec3::new(0.4 * 10.0 / 0.8, -0.1 * 20.0 / 0.8, 0.2 * 4.0 / 0.8)).norm() < 1e-12);
        assert_eq!(c.uncontract(&Vec3::zeros()).unwrap(), Vec3::zeros());
        assert!(matches!(c.uncontract(&Vec3::new(1.0, 0.0, 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn grid_coord_examples() {
        let e = 1e-12;
        assert_eq!(grid_coords(&Vec3::new(-1.0 + e, -1.0 + e, -1.0 + e), 7), [0, 0, 0]);
        assert_eq!(grid_coords(&Vec3::zeros(), 1), [1, 1, 1]);
        assert_eq!(grid_coords(&Vec3::new(0.9999999999, -2.0, 3.0), 3), [7, 0, 7]);
    }

    #[test]
    fn depth_warp_matches_contraction_on_axis() {
        let c = Contraction::new([12.0, 12.0, 4.0], 0.8).unwrap();
        let d = Vec3::new(0.3, 0.9, 0.1).normalize();
        let w = c.depth_warp(&d);
        for t in [0.1, 3.0, 12.0, 40.0, 500.0] {
            let s = c.contract(&(d * t)).amax();
            assert!((w.forward(t) - s).abs() < 1e-12, "t={t}");
            assert!((w.inverse(w.forward(t)) - t).abs() < 1e-9 * t.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn morton_round_trip(x in 0u32..(1 << 21), y in 0u32..(1 << 21), z in 0u32..(1 << 21)) {
            prop_assert_eq!(morton_decode(morton_encode([x, y, z])), [x, y, z]);
        }

        #[test]
        fn contraction_stays_in_open_cube(
            x in -1e8f64..1e8, y in -1e8f64..1e8, z in -1e8f64..1e8,
        ) {
            let c = Contraction::new([50.0, 50.0, 6.4], 0.8).unwrap();
            prop_assert!(c.contract(&Vec3::new(x, y, z)).amax() < 1.0);
        }

        #[test]
        fn pixel_rays_are_unit(u in 0.0f64..64.0, v in 0.0f64..48.0, yaw in -3.0f64..3.0) {
            let rot = *nalgebra::Rotation3::from_euler_angles(0.2, yaw, -0.4).matrix();
            let cam = Camera::new(64, 48, [50.0, 40.0, 32.0, 24.0], rot, Vec3::zeros()).unwrap();
            prop_assert!((cam.pixel_ray(u, v).direction.norm() - 1.0).abs() < 1e-9);
        }
    }
}
