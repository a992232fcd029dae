//! Pinhole cameras, rigid poses, rays, and pixel reprojection.
//!
//! Conventions: camera frame is x right, y down, z forward. Poses map camera
//! coordinates to world coordinates. Integer pixel coordinates address pixel
//! centers, so an image of width `w` spans `[-0.5, w - 0.5)` horizontally.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Orthonormality tolerance for in-memory poses.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Centered principal point with equal focal lengths.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Domain(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("image size must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::Domain(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.is_finite()
            && px.u >= -0.5
            && px.u < self.width as f64 - 0.5
            && px.v >= -0.5
            && px.v < self.height as f64 - 0.5
    }

    pub fn check(&self, px: Pixel) -> Result<()> {
        if self.contains(px) {
            Ok(())
        } else {
            Err(Error::InvalidPixel {
                u: px.u,
                v: px.v,
                width: self.width,
                height: self.height,
            })
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unit viewing direction of a pixel in the camera frame.
    pub fn bearing(&self, px: Pixel) -> Vec3 {
        self.unproject_unit_depth(px).normalize()
    }

    /// Camera-frame point at z = 1 on the ray through `px`, i.e. K⁻¹ [u, v, 1].
    pub fn unproject_unit_depth(&self, px: Pixel) -> Vec3 {
        Vec3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection of a camera-frame point; `None` when the point
    /// is not strictly in front of the camera.
    pub fn project_camera(&self, p: &Vec3) -> Option<Pixel> {
        if p.z <= 0.0 || !p.z.is_finite() {
            return None;
        }
        Some(Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = rotation_error(&rotation);
        if !(err <= ROTATION_TOLERANCE) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!(
                "rotation is not orthonormal with det +1 (deviation {err:.3e})"
            )));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Builds a pose from a rotation that is only approximately orthonormal
    /// (deviation up to `tolerance`), projecting it onto SO(3).
    pub fn from_approximate(
        rotation: Matrix3<f64>,
        translation: Vec3,
        tolerance: f64,
    ) -> Result<Self> {
        let err = rotation_error(&rotation);
        if !(err <= tolerance) {
            return Err(Error::Domain(format!(
                "rotation is not orthonormal with det +1 (deviation {err:.3e})"
            )));
        }
        if err <= ROTATION_TOLERANCE {
            return Pose::new(rotation, translation);
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        Pose::new(u * v_t, translation)
    }

    /// Camera at `eye` looking at `target`. `up` is the approximate world up
    /// direction; the camera's y axis points opposite to it.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::Domain("look_at eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = (-up).cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::Domain("look_at up vector is parallel to view".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Pose::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 camera-to-world matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64; 16], tolerance: f64) -> Result<Self> {
        let bottom = [values[12], values[13], values[14], values[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Domain(format!(
                "pose bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], //
            values[4], values[5], values[6], //
            values[8], values[9], values[10],
        );
        let translation = Vec3::new(values[3], values[7], values[11]);
        Pose::from_approximate(rotation, translation, tolerance)
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        (self.rotation - other.rotation).amax() <= tol
            && (self.translation - other.translation).amax() <= tol
    }
}

/// Largest deviation of `R` from orthonormality, or infinity for reflections.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    if !r.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    let det = r.determinant();
    if det <= 0.0 {
        return f64::INFINITY;
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ortho.max((det - 1.0).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    /// Integer pixel (column, row) containing this coordinate.
    pub fn rounded(&self) -> (i64, i64) {
        ((self.u + 0.5).floor() as i64, (self.v + 0.5).floor() as i64)
    }

    /// Row-major index of the containing pixel, if it lies inside `intr`.
    pub fn index_in(&self, intr: &CameraIntrinsics) -> Option<usize> {
        if !intr.contains(*self) {
            return None;
        }
        let (c, r) = self.rounded();
        Some(r as usize * intr.width as usize + c as usize)
    }

    pub fn from_index(index: usize, width: u32) -> Pixel {
        let w = width as usize;
        Pixel::new((index % w) as f64, (index / w) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if ((direction.norm() - 1.0).abs() > 1e-9) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!(
                "ray direction must have unit norm, got {}",
                direction.norm()
            )));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::Domain(format!(
                "ray bounds must satisfy 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_bounds(&self, t_near: f64, t_far: f64) -> Result<Ray> {
        Ray::new(self.origin, self.direction, t_near, t_far)
    }
}

/// Casts the ray through `px`. The ray starts at the camera center and is
/// unbounded; renderers clip it against the volume they march.
pub fn generate_ray(intr: &CameraIntrinsics, pose: &Pose, px: Pixel) -> Result<Ray> {
    intr.check(px)?;
    let dir = pose.transform_vector(&intr.bearing(px)).normalize();
    Ok(Ray {
        origin: pose.center(),
        direction: dir,
        t_near: 0.0,
        t_far: f64::INFINITY,
    })
}

/// Distance along the pixel's unit ray corresponding to camera depth `z`.
pub fn z_to_distance(intr: &CameraIntrinsics, px: Pixel, z: f64) -> f64 {
    z / intr.bearing(px).z
}

/// Camera depth corresponding to distance `t` along the pixel's unit ray.
pub fn distance_to_z(intr: &CameraIntrinsics, px: Pixel, t: f64) -> f64 {
    t * intr.bearing(px).z
}

/// World point imaged at `px` with camera depth `z`.
pub fn unproject(intr: &CameraIntrinsics, pose: &Pose, px: Pixel, z: f64) -> Vec3 {
    pose.transform_point(&(intr.unproject_unit_depth(px) * z))
}

/// Projects a world point; returns the pixel (possibly out of bounds) and
/// its camera depth, or `None` when the point is not in front of the camera.
pub fn project(intr: &CameraIntrinsics, pose: &Pose, point: &Vec3) -> Option<(Pixel, f64)> {
    let pc = pose.inverse().transform_point(point);
    intr.project_camera(&pc).map(|px| (px, pc.z))
}

/// Camera-frame depth of a world point.
pub fn camera_depth(pose: &Pose, point: &Vec3) -> f64 {
    pose.inverse().transform_point(point).z
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reprojection {
    Valid { pixel: Pixel, depth: f64 },
    OutOfBounds { pixel: Pixel, depth: f64 },
    BehindCamera,
}

impl Reprojection {
    pub fn valid(&self) -> Option<(Pixel, f64)> {
        match *self {
            Reprojection::Valid { pixel, depth } => Some((pixel, depth)),
            _ => None,
        }
    }

    pub fn pixel(&self) -> Option<Pixel> {
        match *self {
            Reprojection::Valid { pixel, .. } | Reprojection::OutOfBounds { pixel, .. } => {
                Some(pixel)
            }
            Reprojection::BehindCamera => None,
        }
    }
}

/// Maps `u_s` observed at camera depth `depth` in the source view into the
/// target view: π(K G_t⁻¹ G_s K⁻¹ depth·ũ_s). Sub-pixel results are kept.
pub fn reproject(
    u_s: Pixel,
    depth: f64,
    intr: &CameraIntrinsics,
    g_s: &Pose,
    g_t: &Pose,
) -> Result<Reprojection> {
    reproject_between(u_s, depth, intr, g_s, intr, g_t)
}

/// [`reproject`] for views with different intrinsics.
pub fn reproject_between(
    u_s: Pixel,
    depth: f64,
    intr_s: &CameraIntrinsics,
    g_s: &Pose,
    intr_t: &CameraIntrinsics,
    g_t: &Pose,
) -> Result<Reprojection> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::Domain(format!("depth must be positive, got {depth}")));
    }
    if !u_s.is_finite() {
        return Err(Error::Domain("source pixel is not finite".into()));
    }
    let cam_s = intr_s.unproject_unit_depth(u_s) * depth;
    let relative = g_t.inverse().compose(g_s);
    let cam_t = relative.transform_point(&cam_s);
    Ok(match intr_t.project_camera(&cam_t) {
        None => Reprojection::BehindCamera,
        Some(pixel) if intr_t.contains(pixel) => Reprojection::Valid {
            pixel,
            depth: cam_t.z,
        },
        Some(pixel) => Reprojection::OutOfBounds {
            pixel,
            depth: cam_t.z,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap()
    }

    fn rotation_from(axis: Vec3, angle: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner()
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.0f64..3.0,
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_filter("axis", |(a, _, _)| Vec3::from(*a).norm() > 0.1)
            .prop_map(|(a, ang, t)| {
                Pose::new(rotation_from(Vec3::from(a), ang), Vec3::from(t)).unwrap()
            })
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn principal_ray_is_forward() {
        let i = intr();
        let ray = generate_ray(&i, &Pose::identity(), Pixel::new(i.cx, i.cy)).unwrap();
        assert!((ray.direction - Vec3::z()).norm() < 1e-15);
        assert_eq!(ray.origin, Vec3::zeros());
    }

    #[test]
    fn off_axis_ray_matches_unprojection() {
        let i = intr();
        let px = Pixel::new(i.cx + 100.0, i.cy);
        // Out of bounds for this sensor, so widen it.
        let wide = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 200, 48).unwrap();
        let ray = generate_ray(&wide, &Pose::identity(), px).unwrap();
        let expected = Vec3::new(1.0, 0.0, 1.0).normalize();
        assert!((ray.direction - expected).norm() < 1e-15);
        // Oracle: the ray passes through the unprojected point at z = 3.
        let p = unproject(&wide, &Pose::identity(), px, 3.0);
        let t = p.norm();
        assert!((ray.at(t) - p).norm() < 1e-12);
        assert!(generate_ray(&i, &Pose::identity(), px).is_err());
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let i = intr();
        assert!(matches!(
            generate_ray(&i, &Pose::identity(), Pixel::new(-0.6, 0.0)),
            Err(Error::InvalidPixel { .. })
        ));
        assert!(generate_ray(&i, &Pose::identity(), Pixel::new(-0.5, -0.5)).is_ok());
        assert!(generate_ray(&i, &Pose::identity(), Pixel::new(63.5, 0.0)).is_err());
    }

    #[test]
    fn stereo_disparity() {
        let i = CameraIntrinsics::new(100.0, 100.0, 100.0, 50.0, 200, 100).unwrap();
        let g_s = Pose::identity();
        let b = 0.3;
        let g_t = Pose::from_translation(Vec3::new(b, 0.0, 0.0));
        let z = 2.5;
        let u_s = Pixel::new(120.0, 40.0);
        let (u_t, d_t) = reproject(u_s, z, &i, &g_s, &g_t).unwrap().valid().unwrap();
        assert!((u_s.u - u_t.u - i.fx * b / z).abs() < 1e-12);
        assert!((u_t.v - u_s.v).abs() < 1e-12);
        assert!((d_t - z).abs() < 1e-12);
        // Explicit unproject / transform / project oracle.
        let world = unproject(&i, &g_s, u_s, z);
        let (oracle, _) = project(&i, &g_t, &world).unwrap();
        assert!(oracle.distance(&u_t) < 1e-12);
    }

    #[test]
    fn identical_poses_reproject_to_self() {
        let i = intr();
        let g = Pose::look_at(Vec3::new(1.0, 2.0, -3.0), Vec3::zeros(), Vec3::y()).unwrap();
        for depth in [0.1, 1.0, 7.5] {
            let u = Pixel::new(10.25, 33.75);
            let (u_t, d) = reproject(u, depth, &i, &g, &g).unwrap().valid().unwrap();
            assert!(u_t.distance(&u) < 1e-9);
            assert!((d - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_target_camera_is_flagged() {
        let i = intr();
        let g_s = Pose::identity();
        // Target sits beyond the point, looking the same way.
        let g_t = Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        let r = reproject(Pixel::new(i.cx, i.cy), 2.0, &i, &g_s, &g_t).unwrap();
        assert_eq!(r, Reprojection::BehindCamera);
        assert!(reproject(Pixel::new(1.0, 1.0), 0.0, &i, &g_s, &g_t).is_err());
        assert!(reproject(Pixel::new(1.0, 1.0), -1.0, &i, &g_s, &g_t).is_err());
    }

    #[test]
    fn out_of_bounds_is_flagged() {
        let i = intr();
        let g_t = Pose::from_translation(Vec3::new(-5.0, 0.0, 0.0));
        let r = reproject(Pixel::new(i.cx, i.cy), 2.0, &i, &Pose::identity(), &g_t).unwrap();
        assert!(matches!(r, Reprojection::OutOfBounds { .. }));
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let eye = Vec3::new(3.0, -1.0, -4.0);
        let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::y()).unwrap();
        let fwd = pose.transform_vector(&Vec3::z());
        assert!((fwd - (-eye).normalize()).norm() < 1e-12);
        // Image "down" points away from world up.
        assert!(pose.transform_vector(&Vec3::y()).dot(&Vec3::y()) < 0.0);
    }

    #[test]
    fn row_major_round_trip() {
        let pose = Pose::look_at(Vec3::new(0.5, 2.0, -3.0), Vec3::zeros(), Vec3::y()).unwrap();
        let back = Pose::from_row_major(&pose.to_row_major(), 1e-6).unwrap();
        assert_eq!(back, pose);
        let mut bad = pose.to_row_major();
        bad[0] *= 1.1;
        assert!(Pose::from_row_major(&bad, 1e-6).is_err());
        let mut reflect = pose.to_row_major();
        for c in 0..3 {
            reflect[c] = -reflect[c];
        }
        assert!(Pose::from_row_major(&reflect, 1e-6).is_err());
    }

    #[test]
    fn slightly_off_rotation_is_projected() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-8;
        assert!(Pose::new(m, Vec3::zeros()).is_err());
        let pose = Pose::from_approximate(m, Vec3::zeros(), 1e-6).unwrap();
        assert!(rotation_error(pose.rotation()) < 1e-12);
    }

    proptest! {
        #[test]
        fn unproject_project_round_trip(pose in arb_pose(), u in -0.5f64..63.0, v in -0.5f64..47.0, z in 0.05f64..20.0) {
            let i = intr();
            let px = Pixel::new(u, v);
            let world = unproject(&i, &pose, px, z);
            let (back, depth) = project(&i, &pose, &world).unwrap();
            prop_assert!(back.distance(&px) < 1e-6);
            prop_assert!((depth - z).abs() < 1e-9 * z.max(1.0));
        }

        #[test]
        fn reproject_there_and_back(g_s in arb_pose(), g_t in arb_pose(), u in -0.5f64..63.0, v in -0.5f64..47.0, z in 0.1f64..10.0) {
            let i = intr();
            let u_s = Pixel::new(u, v);
            if let Some(px) = reproject(u_s, z, &i, &g_s, &g_t).unwrap().pixel() {
                let depth_t = match reproject(u_s, z, &i, &g_s, &g_t).unwrap() {
                    Reprojection::Valid { depth, .. } | Reprojection::OutOfBounds { depth, .. } => depth,
                    Reprojection::BehindCamera => unreachable!(),
                };
                // Pure geometry: the back map ignores image bounds.
                let back = reproject_between(px, depth_t, &i, &g_t, &i, &g_s).unwrap();
                let back = back.pixel().unwrap();
                prop_assert!(back.distance(&u_s) < 1e-6, "{:?} vs {:?}", back, u_s);
            }
        }

        #[test]
        fn pose_group_laws(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.approx_eq(&right, 1e-9));
            prop_assert!(a.inverse().compose(&a).approx_eq(&Pose::identity(), 1e-9));
            prop_assert!(a.compose(&a.inverse()).approx_eq(&Pose::identity(), 1e-9));
        }

        #[test]
        fn rays_have_unit_direction(pose in arb_pose(), u in -0.5f64..63.4, v in -0.5f64..47.4) {
            let ray = generate_ray(&intr(), &pose, Pixel::new(u, v)).unwrap();
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            prop_assert!((ray.origin - pose.center()).norm() < 1e-15);
        }
    }
}
