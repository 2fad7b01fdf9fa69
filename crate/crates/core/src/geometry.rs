//! Camera and hull geometry.
//!
//! Conventions used throughout the crate:
//! - Rotations are extrinsic Z-Y-X about fixed world axes: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
//! - The camera looks along its local `+x`, with `+y` to the left and `+z` up.
//!   Image `u` grows to the right and `v` grows downward.
//! - All angles are radians.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Point3, Vector3};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("object and camera share the same ground-plane position")]
    DegenerateGeometry,
    #[error("euler angles out of range: yaw {yaw}, pitch {pitch}, roll {roll}")]
    InvalidAngles { yaw: f64, pitch: f64, roll: f64 },
    #[error("hull dimensions must be positive: {length} x {width} x {height}")]
    InvalidHull { length: f64, width: f64, height: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
}

/// Wraps an angle into `[-π, π)`.
#[inline]
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta - TAU * ((theta + PI) / TAU).floor();
    // floor() can land exactly on +π after rounding
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Orientation as extrinsic Z-Y-X Euler angles.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    yaw: f64,
    pitch: f64,
    roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Result<Self, GeometryError> {
        let yaw_ok = (-PI..PI).contains(&yaw);
        let roll_ok = (-PI..PI).contains(&roll);
        let pitch_ok = (-FRAC_PI_2..=FRAC_PI_2).contains(&pitch);
        if yaw_ok && roll_ok && pitch_ok {
            Ok(Self { yaw, pitch, roll })
        } else {
            Err(GeometryError::InvalidAngles { yaw, pitch, roll })
        }
    }

    /// Yaw-only orientation; the yaw is wrapped so any finite input is accepted.
    pub fn from_yaw(yaw: f64) -> Self {
        Self { yaw: wrap_angle(yaw), pitch: 0.0, roll: 0.0 }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn roll(&self) -> f64 {
        self.roll
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_rotation(self)
    }
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn euler_to_rotation(angles: &EulerAngles) -> Matrix3<f64> {
    let (sy, cy) = angles.yaw.sin_cos();
    let (sp, cp) = angles.pitch.sin_cos();
    let (sr, cr) = angles.roll.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

/// World-frame position (meters) plus orientation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose3 {
    pub position: Point3<f64>,
    pub orientation: EulerAngles,
}

impl Pose3 {
    pub fn new(position: Point3<f64>, orientation: EulerAngles) -> Self {
        Self { position, orientation }
    }

    /// Maps a point from this pose's local frame into the world frame.
    pub fn transform_point(&self, local: &Point3<f64>) -> Point3<f64> {
        self.position + self.orientation.rotation() * local.coords
    }
}

/// Axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box from two corners in any order.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x_min: x0.min(x1),
            y_min: y0.min(y1),
            x_max: x0.max(x1),
            y_max: y0.max(y1),
        }
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self::from_corners(cx - width / 2.0, cy - height / 2.0, cx + width / 2.0, cy + height / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// True when the two boxes share any area or boundary.
    pub fn intersects(&self, other: &BBox) -> bool {
        self.x_min <= other.x_max
            && other.x_min <= self.x_max
            && self.y_min <= other.y_max
            && other.y_min <= self.y_max
    }
}

/// Solid box centered on `pose.position`, with length along local `x`,
/// width along local `y` and height along local `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuboidHull {
    length: f64,
    width: f64,
    height: f64,
    pub pose: Pose3,
}

/// Local-frame corner sign pattern over (length/2, width/2, height/2).
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

impl CuboidHull {
    pub fn new(length: f64, width: f64, height: f64, pose: Pose3) -> Result<Self, GeometryError> {
        if length > 0.0 && width > 0.0 && height > 0.0 {
            Ok(Self { length, width, height, pose })
        } else {
            Err(GeometryError::InvalidHull { length, width, height })
        }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn with_pose(&self, pose: Pose3) -> Self {
        Self { pose, ..*self }
    }

    /// The 8 corners in world coordinates, ordered as [`CORNER_SIGNS`].
    pub fn corners(&self) -> [Point3<f64>; 8] {
        let half = Vector3::new(self.length / 2.0, self.width / 2.0, self.height / 2.0);
        CORNER_SIGNS.map(|s| {
            let local = Point3::new(s[0] * half.x, s[1] * half.y, s[2] * half.z);
            self.pose.transform_point(&local)
        })
    }
}

/// Ideal pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub pose: Pose3,
    focal_length: f64,
    principal_point: (f64, f64),
    image_size: (u32, u32),
}

impl CameraModel {
    pub fn new(
        pose: Pose3,
        focal_length: f64,
        principal_point: (f64, f64),
        image_size: (u32, u32),
    ) -> Result<Self, GeometryError> {
        if !(focal_length > 0.0 && focal_length.is_finite()) {
            return Err(GeometryError::InvalidCamera("focal_length must be > 0"));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(GeometryError::InvalidCamera("image_size components must be > 0"));
        }
        Ok(Self { pose, focal_length, principal_point, image_size })
    }

    pub fn focal_length(&self) -> f64 {
        self.focal_length
    }

    pub fn principal_point(&self) -> (f64, f64) {
        self.principal_point
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn image_bounds(&self) -> BBox {
        BBox::from_corners(0.0, 0.0, self.image_size.0 as f64, self.image_size.1 as f64)
    }

    /// World point expressed in the camera's local frame.
    pub fn to_camera_frame(&self, point: &Point3<f64>) -> Vector3<f64> {
        self.pose.orientation.rotation().transpose() * (point - self.pose.position)
    }
}

/// Projects a world point to pixel coordinates.
pub fn project_point(camera: &CameraModel, point: &Point3<f64>) -> Result<(f64, f64), GeometryError> {
    let p = camera.to_camera_frame(point);
    project_camera_point(camera, &p)
}

fn project_camera_point(camera: &CameraModel, p: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
    if !(p.x > 0.0) {
        return Err(GeometryError::BehindCamera { depth: p.x });
    }
    let (cu, cv) = camera.principal_point;
    let f = camera.focal_length;
    Ok((cu - f * (p.y / p.x), cv - f * (p.z / p.x)))
}

/// Projected hull: the 8 corner pixels and their tight enclosing box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuboidProjection {
    pub corners: [(f64, f64); 8],
    pub bbox: BBox,
}

pub fn project_cuboid(camera: &CameraModel, hull: &CuboidHull) -> Result<CuboidProjection, GeometryError> {
    let rot_t = camera.pose.orientation.rotation().transpose();
    let world = hull.corners();
    let mut corners = [(0.0, 0.0); 8];
    for (out, corner) in corners.iter_mut().zip(world.iter()) {
        let p = rot_t * (corner - camera.pose.position);
        *out = project_camera_point(camera, &p)?;
    }
    let mut bbox = BBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for &(u, v) in &corners {
        bbox.x_min = bbox.x_min.min(u);
        bbox.x_max = bbox.x_max.max(u);
        bbox.y_min = bbox.y_min.min(v);
        bbox.y_max = bbox.y_max.max(v);
    }
    Ok(CuboidProjection { corners, bbox })
}

/// Object heading relative to the camera-to-object bearing in the ground plane.
pub fn observation_yaw(camera: &CameraModel, pose: &Pose3) -> Result<f64, GeometryError> {
    let dx = pose.position.x - camera.pose.position.x;
    let dy = pose.position.y - camera.pose.position.y;
    if dx == 0.0 && dy == 0.0 {
        return Err(GeometryError::DegenerateGeometry);
    }
    Ok(wrap_angle(pose.orientation.yaw() - dy.atan2(dx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn test_camera() -> CameraModel {
        CameraModel::new(Pose3::default(), 1000.0, (640.0, 360.0), (1280, 720)).unwrap()
    }

    fn axis_rot(axis: usize, a: f64) -> [[f64; 3]; 3] {
        let (s, c) = a.sin_cos();
        match axis {
            0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
            1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!(close(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-15));
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn identity_rotation() {
        let r = euler_to_rotation(&EulerAngles::new(0.0, 0.0, 0.0).unwrap());
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_yaw_maps_x_to_y() {
        let r = euler_to_rotation(&EulerAngles::new(FRAC_PI_2, 0.0, 0.0).unwrap());
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn rotation_matches_explicit_product() {
        let a = EulerAngles::new(0.3, -0.2, 0.1).unwrap();
        let expected = matmul(matmul(axis_rot(2, 0.3), axis_rot(1, -0.2)), axis_rot(0, 0.1));
        let r = euler_to_rotation(&a);
        for i in 0..3 {
            for j in 0..3 {
                assert!(close(r[(i, j)], expected[i][j], 1e-15), "({i},{j})");
            }
        }
    }

    #[test]
    fn rejects_out_of_range_angles() {
        assert!(EulerAngles::new(PI, 0.0, 0.0).is_err());
        assert!(EulerAngles::new(0.0, 1.6, 0.0).is_err());
        assert!(EulerAngles::new(0.0, FRAC_PI_2, -PI).is_ok());
    }

    #[test]
    fn project_point_examples() {
        let cam = test_camera();
        assert_eq!(project_point(&cam, &Point3::new(10.0, 0.0, 0.0)).unwrap(), (640.0, 360.0));
        // u = 640 - 1000 * (-1 / 10)
        assert_eq!(project_point(&cam, &Point3::new(10.0, -1.0, 0.0)).unwrap(), (740.0, 360.0));
        assert!(matches!(
            project_point(&cam, &Point3::new(-5.0, 0.0, 0.0)),
            Err(GeometryError::BehindCamera { .. })
        ));
        assert!(project_point(&cam, &Point3::new(0.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn unit_cube_on_axis_is_symmetric() {
        let cam = test_camera();
        let hull = CuboidHull::new(1.0, 1.0, 1.0, Pose3::new(Point3::new(10.0, 0.0, 0.0), EulerAngles::default()))
            .unwrap();
        let bb = project_cuboid(&cam, &hull).unwrap().bbox;
        assert!(close(640.0 - bb.x_min, bb.x_max - 640.0, 1e-9));
        assert!(close(360.0 - bb.y_min, bb.y_max - 360.0, 1e-9));
    }

    #[test]
    fn cuboid_matches_per_corner_projection() {
        let cam = test_camera();
        let pose = Pose3::new(Point3::new(20.0, 3.0, 0.0), EulerAngles::from_yaw(0.4));
        let hull = CuboidHull::new(4.5, 1.8, 1.2, pose).unwrap();
        let proj = project_cuboid(&cam, &hull).unwrap();
        let (c, s) = (0.4f64.cos(), 0.4f64.sin());
        let mut bb = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
        for (i, sg) in CORNER_SIGNS.iter().enumerate() {
            let (lx, ly, lz) = (sg[0] * 2.25, sg[1] * 0.9, sg[2] * 0.6);
            let (x, y, z) = (20.0 + c * lx - s * ly, 3.0 + s * lx + c * ly, lz);
            let (u, v) = (640.0 - 1000.0 * y / x, 360.0 - 1000.0 * z / x);
            assert!(close(proj.corners[i].0, u, 1e-9) && close(proj.corners[i].1, v, 1e-9));
            bb = [bb[0].min(u), bb[1].min(v), bb[2].max(u), bb[3].max(v)];
        }
        assert!(close(proj.bbox.x_min, bb[0], 1e-9));
        assert!(close(proj.bbox.y_min, bb[1], 1e-9));
        assert!(close(proj.bbox.x_max, bb[2], 1e-9));
        assert!(close(proj.bbox.y_max, bb[3], 1e-9));
    }

    #[test]
    fn straddling_hull_is_rejected() {
        let cam = test_camera();
        let hull = CuboidHull::new(4.0, 1.0, 1.0, Pose3::new(Point3::new(1.0, 0.0, 0.0), EulerAngles::default()))
            .unwrap();
        assert!(matches!(project_cuboid(&cam, &hull), Err(GeometryError::BehindCamera { .. })));
    }

    #[test]
    fn observation_yaw_examples() {
        let cam = test_camera();
        let at = |x, y| Pose3::new(Point3::new(x, y, 0.0), EulerAngles::from_yaw(0.0));
        assert_eq!(observation_yaw(&cam, &at(10.0, 0.0)).unwrap(), 0.0);
        assert!(close(observation_yaw(&cam, &at(0.0, 10.0)).unwrap(), -FRAC_PI_2, 1e-15));
        assert_eq!(observation_yaw(&cam, &at(0.0, 0.0)), Err(GeometryError::DegenerateGeometry));
    }

    fn euler_strategy() -> impl Strategy<Value = EulerAngles> {
        (-PI..PI, -FRAC_PI_2..=FRAC_PI_2, -PI..PI).prop_map(|(y, p, r)| EulerAngles::new(y, p, r).unwrap())
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(a in euler_strategy()) {
            let r = euler_to_rotation(&a);
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            prop_assert!(err <= 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn projection_is_scale_consistent(
            a in euler_strategy(),
            dir in (0.2f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            depth in 1.0f64..200.0,
        ) {
            let cam = CameraModel::new(
                Pose3::new(Point3::new(3.0, -2.0, 5.0), a), 800.0, (640.0, 360.0), (1280, 720),
            ).unwrap();
            let local = Vector3::new(dir.0, dir.1, dir.2) * depth;
            let near = cam.pose.position + cam.pose.orientation.rotation() * local;
            let far = cam.pose.position + cam.pose.orientation.rotation() * (local * 2.0);
            let (u1, v1) = project_point(&cam, &near).unwrap();
            let (u2, v2) = project_point(&cam, &far).unwrap();
            prop_assert!((u1 - u2).abs() <= 1e-9 && (v1 - v2).abs() <= 1e-9);
        }

        #[test]
        fn cuboid_bbox_is_tight_over_corners(
            yaw in -PI..PI, x in 10.0f64..100.0, y in -20.0f64..20.0,
            l in 0.5f64..6.0, w in 0.5f64..3.0, h in 0.5f64..2.0,
        ) {
            let cam = test_camera();
            let hull = CuboidHull::new(l, w, h, Pose3::new(Point3::new(x, y, 0.0), EulerAngles::from_yaw(yaw))).unwrap();
            let p = project_cuboid(&cam, &hull).unwrap();
            let us = p.corners.iter().map(|c| c.0);
            let vs = p.corners.iter().map(|c| c.1);
            prop_assert_eq!(p.bbox.x_min, us.clone().fold(f64::INFINITY, f64::min));
            prop_assert_eq!(p.bbox.x_max, us.fold(f64::NEG_INFINITY, f64::max));
            prop_assert_eq!(p.bbox.y_min, vs.clone().fold(f64::INFINITY, f64::min));
            prop_assert_eq!(p.bbox.y_max, vs.fold(f64::NEG_INFINITY, f64::max));
        }

        #[test]
        fn observation_yaw_in_range(yaw in -PI..PI, x in -50.0f64..50.0, y in -50.0f64..50.0) {
            prop_assume!(x != 0.0 || y != 0.0);
            let pose = Pose3::new(Point3::new(x, y, 0.0), EulerAngles::from_yaw(yaw));
            let o = observation_yaw(&test_camera(), &pose).unwrap();
            prop_assert!((-PI..PI).contains(&o));
        }
    }
}
