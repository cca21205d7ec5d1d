//! 3D primitives and the pinhole camera model.
//!
//! Lengths are millimeters. Pixel coordinates have their origin at the
//! top-left corner with +u to the right and +v down.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
/// Proper rotation, stored as a unit quaternion.
pub type Rot3 = UnitQuaternion<f64>;

/// Cross-product norm below which two directions count as parallel.
pub const EPS_PARALLEL: f64 = 1e-8;

/// Image coordinates in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn dist(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Renormalizes a rotation. Long composition chains drift by a few ulps.
pub fn renormalize(r: &Rot3) -> Rot3 {
    Rot3::new_normalize(*r.quaternion())
}

/// Rotation of `angle_rad` about a unit `axis`.
pub fn rotation_about(axis: &Vec3, angle_rad: f64) -> Rot3 {
    Rot3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle_rad)
}

/// Angle between two directions in radians, robust near 0 and pi.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Rigid transform `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Rot3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Rot3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_dir(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -(inv * self.translation) }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }
}

/// Half-line `origin + s * dir`, `s >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray3 {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray3 {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self { origin, dir: dir.normalize() }
    }

    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.dir * s
    }
}

/// Infinite line through `point` with unit direction `dir`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line3 {
    pub point: Vec3,
    pub dir: Vec3,
}

impl Line3 {
    pub fn new(point: Vec3, dir: Vec3) -> Self {
        Self { point, dir: dir.normalize() }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.point + self.dir * t
    }

    pub fn transformed(&self, tf: &RigidTransform) -> Self {
        Self { point: tf.apply(&self.point), dir: tf.apply_dir(&self.dir) }
    }
}

/// Plane `{x : normal · x = offset}` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane3 {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane3 {
    /// Plane through `point` with the given (not necessarily unit) normal.
    pub fn through(point: &Vec3, normal: &Vec3) -> Self {
        let n = normal.normalize();
        Self { normal: n, offset: n.dot(point) }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Same plane with the normal's largest-magnitude component made positive.
    pub fn canonical(&self) -> Self {
        let i = self.normal.iamax();
        if self.normal[i] < 0.0 {
            Self { normal: -self.normal, offset: -self.offset }
        } else {
            *self
        }
    }
}

pub fn intersect_planes(a: &Plane3, b: &Plane3) -> Result<Line3> {
    let u = a.normal.cross(&b.normal);
    let cross_norm = u.norm();
    if cross_norm < EPS_PARALLEL {
        return Err(Error::ParallelPlanes { cross_norm });
    }
    // Point of the line closest to the origin.
    let point = (b.normal.cross(&u) * a.offset + u.cross(&a.normal) * b.offset) / (cross_norm * cross_norm);
    Ok(Line3 { point, dir: u / cross_norm })
}

/// Euclidean distance from `p` to the line, `|(p - M) x dir|`.
pub fn point_line_distance(p: &Vec3, l: &Line3) -> f64 {
    (p - l.point).cross(&l.dir).norm()
}

/// Point of `ray` closest to `line` and the remaining gap.
///
/// The ray parameter is clamped to `s >= 0`.
pub fn closest_point_on_ray_to_line(ray: &Ray3, line: &Line3) -> Result<(Vec3, f64)> {
    let b = ray.dir.dot(&line.dir);
    let cross_norm = ray.dir.cross(&line.dir).norm();
    if cross_norm < EPS_PARALLEL {
        return Err(Error::ParallelLines { cross_norm });
    }
    let w0 = ray.origin - line.point;
    let d = ray.dir.dot(&w0);
    let e = line.dir.dot(&w0);
    let s = ((b * e - d) / (1.0 - b * b)).max(0.0);
    let p = ray.at(s);
    Ok((p, point_line_distance(&p, line)))
}

/// Pinhole camera without distortion. `pose` maps world points into the
/// camera frame, whose +z is the viewing direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: RigidTransform,
}

impl PinholeCamera {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!("{path}.fx"), "focal lengths must be > 0"));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) {
            return Err(Error::invalid(format!("{path}.cx"), "principal point outside the sensor"));
        }
        if !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(format!("{path}.cy"), "principal point outside the sensor"));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.pose.inverse().translation
    }

    /// Viewing direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.pose.rotation.inverse() * Vec3::z()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy }
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u <= self.width as f64 && px.v <= self.height as f64
    }

    /// Camera placed at `center` looking at `target`, with image +v roughly
    /// along world `down`.
    pub fn looking_at(intr: Intrinsics, width: u32, height: u32, center: Vec3, target: Vec3, down: Vec3) -> Self {
        let z = (target - center).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        // Rows of the world->camera rotation are the camera axes.
        let m = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = Rot3::from_matrix(&m);
        let translation = -(rotation * center);
        Self {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width,
            height,
            pose: RigidTransform { rotation, translation },
        }
    }
}

/// Pinhole intrinsics `(fx, fy, cx, cy)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Perspective divide of a camera-frame vector.
    pub fn project_cam(&self, p: &Vec3) -> Result<Pixel> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { depth: p.z });
        }
        Ok(Pixel::new(self.fx * (p.x / p.z) + self.cx, self.fy * (p.y / p.z) + self.cy))
    }

    /// Unit camera-frame direction of a pixel.
    pub fn ray_cam(&self, px: &Pixel) -> Vec3 {
        Vec3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0).normalize()
    }
}

pub fn project(cam: &PinholeCamera, p_world: &Vec3) -> Result<Pixel> {
    cam.intrinsics().project_cam(&cam.pose.apply(p_world))
}

pub fn backproject(cam: &PinholeCamera, px: &Pixel) -> Ray3 {
    let d_cam = cam.intrinsics().ray_cam(px);
    Ray3 { origin: cam.center(), dir: cam.pose.rotation.inverse() * d_cam }
}
