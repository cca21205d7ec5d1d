//! Aspheric eye model and forward optics.
//!
//! Eye-local frame: origin at the cornea ellipsoid center C, +z along the
//! optical axis pointing out of the eye. The anterior cornea is the part of
//! `x² + y² + p z² = r²` with `z > 0`, `p = Q + 1`. The rotation center E sits
//! at local `(0, 0, -t)` and the pupil center at `(0, 0, d_pupil)`.
//!
//! Kappa is applied as a fixed rotation of the optical-axis direction in the
//! head frame, so `visual = K · optical` for every gaze direction. The cornea
//! is a surface of revolution and the pupil center lies on its axis, so eye
//! torsion has no optical effect and poses carry none.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, angle_between, Line3, PinholeCamera, Pixel, Rot3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeParams {
    /// Cornea ellipsoid equatorial radius, mm.
    pub r: f64,
    /// Corneal asphericity.
    pub q: f64,
    /// Distance from the cornea center C back to the rotation center E, mm.
    pub t: f64,
    /// Distance from C forward to the pupil center, mm.
    pub d_pupil: f64,
    /// Effective corneal refractive index.
    pub n_refr: f64,
    /// Horizontal kappa, degrees. Positive turns the visual axis toward head +x.
    pub kappa_h_deg: f64,
    /// Vertical kappa, degrees. Positive turns the visual axis up (head -y).
    pub kappa_v_deg: f64,
}

impl Default for EyeParams {
    fn default() -> Self {
        Self { r: 7.8, q: -0.3, t: 4.18, d_pupil: 5.7, n_refr: 1.3375, kappa_h_deg: 5.0, kappa_v_deg: 1.5 }
    }
}

impl EyeParams {
    pub fn p(&self) -> f64 {
        self.q + 1.0
    }

    /// Height of the corneal apex above C.
    pub fn apex_height(&self) -> f64 {
        self.r / self.p().sqrt()
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::invalid(format!("{path}.{field}"), msg));
        if !(self.r > 0.0) {
            return fail("r", "must be > 0");
        }
        if !(self.p() > 0.0) {
            return fail("q", "q + 1 must be > 0");
        }
        if !(self.t > 0.0) {
            return fail("t", "must be > 0");
        }
        if !(self.d_pupil > 0.0 && self.d_pupil < self.apex_height()) {
            return fail("d_pupil", "pupil must lie between C and the corneal apex");
        }
        if !(self.n_refr >= 1.0) {
            return fail("n_refr", "must be >= 1");
        }
        if !(self.kappa_h_deg.is_finite() && self.kappa_v_deg.is_finite()) {
            return fail("kappa_h_deg", "kappa angles must be finite");
        }
        Ok(())
    }

    /// Head-frame rotation taking the optical-axis direction to the visual axis.
    pub fn kappa_rotation(&self) -> Rot3 {
        let h = geom::rotation_about(&Vec3::y(), self.kappa_h_deg.to_radians());
        let v = geom::rotation_about(&Vec3::x(), self.kappa_v_deg.to_radians());
        h * v
    }

    /// Angle between the axes at primary position, degrees.
    pub fn kappa_angle_deg(&self) -> f64 {
        (self.kappa_h_deg.to_radians().cos() * self.kappa_v_deg.to_radians().cos()).acos().to_degrees()
    }

    /// Exact distance from E to the point where a surface normal at polar
    /// angle `theta` (normal vs axis) meets the optical axis.
    pub fn center_distance(&self, theta_rad: f64) -> f64 {
        let p = self.p();
        let tan2 = theta_rad.tan().powi(2);
        self.t + (1.0 - p) * self.r / p.sqrt() / (p * tan2 + 1.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyePose {
    /// Rotation center E in the head frame.
    pub rotation_center: Vec3,
    /// Eye-local to head rotation; local +z is the optical axis.
    pub orientation: Rot3,
}

impl EyePose {
    pub fn new(rotation_center: Vec3, orientation: Rot3) -> Self {
        Self { rotation_center, orientation }
    }

    pub fn axis_dir(&self) -> Vec3 {
        self.orientation * Vec3::z()
    }

    /// Cornea center C in the head frame.
    pub fn cornea_center(&self, params: &EyeParams) -> Vec3 {
        self.rotation_center + self.axis_dir() * params.t
    }

    pub fn pupil_center(&self, params: &EyeParams) -> Vec3 {
        self.to_head(params, &Vec3::new(0.0, 0.0, params.d_pupil))
    }

    pub fn apex(&self, params: &EyeParams) -> Vec3 {
        self.to_head(params, &Vec3::new(0.0, 0.0, params.apex_height()))
    }

    pub fn to_local(&self, params: &EyeParams, p: &Vec3) -> Vec3 {
        self.orientation.inverse() * (p - self.cornea_center(params))
    }

    pub fn to_head(&self, params: &EyeParams, p_local: &Vec3) -> Vec3 {
        self.cornea_center(params) + self.orientation * p_local
    }

    pub fn dir_to_head(&self, d_local: &Vec3) -> Vec3 {
        self.orientation * d_local
    }
}

/// A point on the anterior cornea with its outward unit normal, head frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub normal: Vec3,
}

fn local_residual(params: &EyeParams, l: &Vec3) -> f64 {
    l.x * l.x + l.y * l.y + params.p() * l.z * l.z - params.r * params.r
}

pub fn surface_residual(params: &EyeParams, pose: &EyePose, p_world: &Vec3) -> f64 {
    local_residual(params, &pose.to_local(params, p_world))
}

fn local_normal(params: &EyeParams, l: &Vec3) -> Vec3 {
    Vec3::new(l.x, l.y, params.p() * l.z).normalize()
}

pub fn surface_normal(params: &EyeParams, pose: &EyePose, p_on_surface: &Vec3) -> Result<Vec3> {
    let l = pose.to_local(params, p_on_surface);
    let residual = local_residual(params, &l);
    if residual.abs() >= 1e-6 {
        return Err(Error::OffSurface { residual });
    }
    Ok(pose.dir_to_head(&local_normal(params, &l)))
}

pub fn optical_axis(params: &EyeParams, pose: &EyePose) -> Line3 {
    Line3 { point: pose.cornea_center(params), dir: pose.axis_dir() }
}

/// Visual axis as a line through C; the display side is the +dir half.
pub fn visual_axis(params: &EyeParams, pose: &EyePose) -> Line3 {
    Line3 { point: pose.cornea_center(params), dir: params.kappa_rotation() * pose.axis_dir() }
}

/// Torsion-free rotation taking local +z onto `dir`.
pub fn orientation_for_axis(dir: &Vec3) -> Rot3 {
    let d = dir.normalize();
    Rot3::rotation_between(&Vec3::z(), &d)
        .unwrap_or_else(|| geom::rotation_about(&Vec3::x(), std::f64::consts::PI))
}

/// Pose whose visual axis passes through `target`.
pub fn pose_fixating(params: &EyeParams, rotation_center: Vec3, target: Vec3) -> Result<EyePose> {
    let to_target = target - rotation_center;
    if to_target.norm() <= params.t {
        return Err(Error::DegenerateTarget);
    }
    let k_inv = params.kappa_rotation().inverse();
    // to_target = t·a + s·K·a; fixed point on a, contraction ~ t / |to_target|.
    let mut axis = k_inv * to_target.normalize();
    for _ in 0..100 {
        let next = k_inv * (to_target - axis * params.t).normalize();
        let step = (next - axis).norm();
        axis = next;
        if step < 1e-15 {
            return Ok(EyePose::new(rotation_center, orientation_for_axis(&axis)));
        }
    }
    Err(Error::NoConvergence("fixation pose".into()))
}

/// Unit direction of a specular reflection of `d` about `n`.
pub fn reflect(d: &Vec3, n: &Vec3) -> Vec3 {
    d - n * (2.0 * d.dot(n))
}

/// `|reflect(dir(led -> G), n) - dir(G -> cam)|`.
pub fn reflection_residual(sp: &SurfacePoint, led: &Vec3, cam_center: &Vec3) -> f64 {
    let incoming = (sp.position - led).normalize();
    let outgoing = (cam_center - sp.position).normalize();
    (reflect(&incoming, &sp.normal) - outgoing).norm()
}

struct CapChart<'a> {
    params: &'a EyeParams,
}

impl CapChart<'_> {
    fn height(&self, x: f64, y: f64) -> Option<f64> {
        let rr = self.params.r * self.params.r - x * x - y * y;
        (rr > 0.0).then(|| (rr / self.params.p()).sqrt())
    }

    fn point(&self, x: f64, y: f64) -> Option<Vec3> {
        self.height(x, y).map(|z| Vec3::new(x, y, z))
    }
}

struct FermatEval {
    value: f64,
    grad: [f64; 2],
    /// (xx, xy, yy)
    hess: [f64; 3],
}

/// Path length `|a - S| + |S - b|` with its chart gradient and Hessian.
fn fermat_terms(chart: &CapChart, a: &Vec3, b: &Vec3, x: f64, y: f64) -> Option<FermatEval> {
    let p = chart.params.p();
    let z = chart.height(x, y)?;
    let s = Vec3::new(x, y, z);
    let zx = -x / (p * z);
    let zy = -y / (p * z);
    let z3 = p * p * z * z * z;
    let zxx = -1.0 / (p * z) - x * x / z3;
    let zyy = -1.0 / (p * z) - y * y / z3;
    let zxy = -x * y / z3;
    let sx = Vec3::new(1.0, 0.0, zx);
    let sy = Vec3::new(0.0, 1.0, zy);

    let mut value = 0.0;
    let mut g = [0.0; 2];
    let (mut hxx, mut hxy, mut hyy) = (0.0, 0.0, 0.0);
    for end in [a, b] {
        let w = s - end;
        let len = w.norm();
        let u = w / len;
        value += len;
        g[0] += u.dot(&sx);
        g[1] += u.dot(&sy);
        // d u / d x_j = (I - u uᵀ) S_j / len
        let proj = |v: &Vec3| (v - u * u.dot(v)) / len;
        let dux = proj(&sx);
        let duy = proj(&sy);
        hxx += dux.dot(&sx) + u.z * zxx;
        hxy += dux.dot(&sy) + u.z * zxy;
        hyy += duy.dot(&sy) + u.z * zyy;
    }
    Some(FermatEval { value, grad: g, hess: [hxx, hxy, hyy] })
}

/// Specular reflection point of `led` seen from `cam_center`.
///
/// Minimizes the Fermat path length over the anterior cap with damped
/// Newton steps on the `(x, y)` chart, starting at the apex.
pub fn glint_point(params: &EyeParams, pose: &EyePose, led: &Vec3, cam_center: &Vec3) -> Result<SurfacePoint> {
    let a = pose.to_local(params, led);
    let b = pose.to_local(params, cam_center);
    if local_residual(params, &a) <= 0.0 || local_residual(params, &b) <= 0.0 {
        return Err(Error::NoVisibleReflection("light or camera inside the cornea".into()));
    }
    let chart = CapChart { params };
    let (mut x, mut y) = (0.0, 0.0);
    let mut converged = false;
    for _ in 0..100 {
        let FermatEval { value: f, grad: g, hess: [hxx, hxy, hyy] } = fermat_terms(&chart, &a, &b, x, y)
            .ok_or_else(|| Error::NoVisibleReflection("left the corneal cap".into()))?;
        let gnorm = g[0].hypot(g[1]);
        if gnorm < 1e-10 {
            converged = true;
            break;
        }
        let det = hxx * hyy - hxy * hxy;
        let (mut dx, mut dy) = if hxx > 0.0 && det > 0.0 {
            (-(hyy * g[0] - hxy * g[1]) / det, -(hxx * g[1] - hxy * g[0]) / det)
        } else {
            (-g[0], -g[1])
        };
        let newton = hxx > 0.0 && det > 0.0;
        // Near the minimum the path length is flat below rounding, so trust
        // the Newton step; elsewhere backtrack until the length decreases.
        if newton && gnorm < 1e-6 && fermat_terms(&chart, &a, &b, x + dx, y + dy).is_some() {
            x += dx;
            y += dy;
            continue;
        }
        let mut accepted = false;
        for _ in 0..60 {
            if let Some(eval) = fermat_terms(&chart, &a, &b, x + dx, y + dy) {
                if eval.value <= f + 1e-15 {
                    accepted = true;
                    break;
                }
            }
            dx *= 0.5;
            dy *= 0.5;
        }
        if !accepted {
            // No representable decrease left: already at machine precision.
            converged = gnorm < 1e-7;
            break;
        }
        x += dx;
        y += dy;
    }
    if !converged {
        return Err(Error::NoConvergence("glint Fermat solve".into()));
    }
    let local = chart.point(x, y).ok_or_else(|| Error::NoVisibleReflection("left the corneal cap".into()))?;
    if local.z <= 0.0 {
        return Err(Error::NoVisibleReflection("reflection on the posterior half".into()));
    }
    let n_local = local_normal(params, &local);
    if n_local.dot(&(b - local)) <= 0.0 || n_local.dot(&(a - local)) <= 0.0 {
        return Err(Error::NoVisibleReflection("reflection faces away".into()));
    }
    Ok(SurfacePoint { position: pose.to_head(params, &local), normal: pose.dir_to_head(&n_local) })
}

/// Meridional-plane description of a point: radial distance from the axis,
/// height along it, and the azimuth of its half-plane.
fn meridional(l: &Vec3) -> (f64, f64, f64) {
    (l.x.hypot(l.y), l.z, l.y.atan2(l.x))
}

/// Ellipse point and unit outward normal at parameter `phi` in the meridional
/// half-plane, as (radial, height).
fn profile(params: &EyeParams, phi: f64) -> ((f64, f64), (f64, f64)) {
    let sp = params.p().sqrt();
    let pt = (params.r * phi.sin(), params.r / sp * phi.cos());
    let (nr, nz) = (phi.sin(), sp * phi.cos());
    let len = nr.hypot(nz);
    (pt, (nr / len, nz / len))
}

fn from_meridional(rho: f64, z: f64, azimuth: f64) -> Vec3 {
    Vec3::new(rho * azimuth.cos(), rho * azimuth.sin(), z)
}

/// Root of `f` on `[lo, hi]` given a sign change, by Illinois false position.
fn bracketed_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, max_iter: usize) -> (f64, f64) {
    let mut flo = f(lo);
    let mut fhi = f(hi);
    let mut side = 0i32;
    let mut x = lo;
    let mut fx = flo;
    for _ in 0..max_iter {
        x = (lo * fhi - hi * flo) / (fhi - flo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        fx = f(x);
        if fx == 0.0 || (hi - lo) < 1e-16 {
            break;
        }
        if (fx > 0.0) == (fhi > 0.0) {
            hi = x;
            fhi = fx;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        } else {
            lo = x;
            flo = fx;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        }
    }
    (x, fx)
}

/// Surface point whose normal line passes through `cam_center`: the glint a
/// light source at the camera center would produce.
pub fn camera_coincident_glint(params: &EyeParams, pose: &EyePose, cam_center: &Vec3) -> Result<SurfacePoint> {
    let c = pose.to_local(params, cam_center);
    if local_residual(params, &c) <= 0.0 {
        return Err(Error::NoSolution("camera inside the cornea".into()));
    }
    let (rho_c, z_c, azimuth) = meridional(&c);
    let apex = Vec3::new(0.0, 0.0, params.apex_height());
    if rho_c < 1e-12 {
        if z_c > apex.z {
            return Ok(SurfacePoint { position: pose.to_head(params, &apex), normal: pose.dir_to_head(&Vec3::z()) });
        }
        return Err(Error::NoSolution("camera on the axis behind the apex".into()));
    }
    let g = |phi: f64| {
        let ((rho, z), (nr, nz)) = profile(params, phi);
        (rho_c - rho) * nz - (z_c - z) * nr
    };
    let steps = 512;
    let phi_max = std::f64::consts::FRAC_PI_2;
    let mut prev = 0.0;
    let mut g_prev = g(prev);
    for i in 1..=steps {
        let phi = phi_max * i as f64 / steps as f64;
        let g_phi = g(phi);
        if (g_phi > 0.0) != (g_prev > 0.0) {
            let (root, _) = bracketed_root(g, prev, phi, 200);
            let ((rho, z), (nr, nz)) = profile(params, root);
            if nr * (rho_c - rho) + nz * (z_c - z) <= 0.0 {
                break;
            }
            let local = from_meridional(rho, z, azimuth);
            let normal = from_meridional(nr, nz, azimuth);
            return Ok(SurfacePoint { position: pose.to_head(params, &local), normal: pose.dir_to_head(&normal) });
        }
        prev = phi;
        g_prev = g_phi;
    }
    Err(Error::NoSolution("no normal line through the camera on the anterior cap".into()))
}

/// Chief ray from the pupil center refracted once at the cornea, head frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefractedPath {
    pub point: Vec3,
    pub normal: Vec3,
    /// Unit direction inside the eye (pupil -> surface).
    pub dir_in: Vec3,
    /// Unit direction outside (surface -> camera).
    pub dir_out: Vec3,
}

impl RefractedPath {
    /// `n_in · sin(θ_in) - sin(θ_out)`.
    pub fn snell_residual(&self, n_refr: f64) -> f64 {
        n_refr * self.dir_in.cross(&self.normal).norm() - self.dir_out.cross(&self.normal).norm()
    }
}

/// Vector Snell refraction of unit `d` leaving through unit outward `n`,
/// index ratio `eta = n_in / n_out`. `None` on total internal reflection.
pub fn refract(d: &Vec3, n: &Vec3, eta: f64) -> Option<Vec3> {
    let cos_i = d.dot(n);
    let sin2_t = eta * eta * (1.0 - cos_i * cos_i);
    if sin2_t > 1.0 {
        return None;
    }
    let cos_t = (1.0 - sin2_t).sqrt();
    Some((d * eta + n * (cos_t - eta * cos_i)).normalize())
}

/// 2D version in the meridional half-plane (radial, height).
fn refract2(d: (f64, f64), n: (f64, f64), eta: f64) -> Option<(f64, f64)> {
    let cos_i = d.0 * n.0 + d.1 * n.1;
    let sin2_t = eta * eta * (1.0 - cos_i * cos_i);
    if sin2_t > 1.0 {
        return None;
    }
    let k = (1.0 - sin2_t).sqrt() - eta * cos_i;
    let (x, y) = (eta * d.0 + k * n.0, eta * d.1 + k * n.1);
    let len = x.hypot(y);
    Some((x / len, y / len))
}

enum Shot {
    Residual(f64),
    Tir,
}

/// Solves the refracted chief ray by 1-parameter shooting in the meridional
/// plane through the optical axis and the camera center.
pub fn pupil_refraction_path(params: &EyeParams, pose: &EyePose, cam_center: &Vec3) -> Result<RefractedPath> {
    let c = pose.to_local(params, cam_center);
    let (rho_c, z_c, azimuth) = meridional(&c);
    let apex_h = params.apex_height();
    if rho_c < 1e-12 {
        if z_c <= apex_h {
            return Err(Error::NoConvergence("camera behind the apex on the axis".into()));
        }
        let point = pose.apex(params);
        let n = pose.axis_dir();
        return Ok(RefractedPath { point, normal: n, dir_in: n, dir_out: n });
    }
    let eta = params.n_refr;
    let pupil = (0.0, params.d_pupil);
    let shoot = |phi: f64| -> Shot {
        let ((rho, z), n) = profile(params, phi);
        let din = (rho - pupil.0, z - pupil.1);
        let len = din.0.hypot(din.1);
        let din = (din.0 / len, din.1 / len);
        match refract2(din, n, eta) {
            None => Shot::Tir,
            Some(dout) => {
                let w = (rho_c - rho, z_c - z);
                let wl = w.0.hypot(w.1);
                Shot::Residual(dout.0 * w.1 / wl - dout.1 * w.0 / wl)
            }
        }
    };
    let h = |phi: f64| match shoot(phi) {
        Shot::Residual(v) => v,
        Shot::Tir => f64::NAN,
    };

    let steps = 512;
    let phi_max = std::f64::consts::FRAC_PI_2;
    let mut prev = 0.0;
    let mut h_prev = h(prev);
    let mut hit_tir = false;
    let mut bracket = None;
    for i in 1..=steps {
        let phi = phi_max * i as f64 / steps as f64;
        match shoot(phi) {
            Shot::Tir => {
                hit_tir = true;
                break;
            }
            Shot::Residual(v) => {
                if (v > 0.0) != (h_prev > 0.0) {
                    bracket = Some((prev, phi));
                    break;
                }
                prev = phi;
                h_prev = v;
            }
        }
    }
    let (lo, hi) = match bracket {
        Some(b) => b,
        None if hit_tir => return Err(Error::TotalInternalReflection),
        None => return Err(Error::NoConvergence("no refracted path reaches the camera".into())),
    };
    let (phi, residual) = bracketed_root(h, lo, hi, 200);
    if !(residual.abs() <= 1e-7) {
        return Err(Error::NoConvergence(format!("pupil shooting residual {residual:e}")));
    }
    let ((rho, z), (nr, nz)) = profile(params, phi);
    let local = from_meridional(rho, z, azimuth);
    let normal_l = from_meridional(nr, nz, azimuth);
    let dir_in_l = (local - Vec3::new(0.0, 0.0, params.d_pupil)).normalize();
    let dir_out_l = refract(&dir_in_l, &normal_l, eta).ok_or(Error::TotalInternalReflection)?;
    Ok(RefractedPath {
        point: pose.to_head(params, &local),
        normal: pose.dir_to_head(&normal_l),
        dir_in: pose.dir_to_head(&dir_in_l),
        dir_out: pose.dir_to_head(&dir_out_l),
    })
}

/// Pixel of the refracted (virtual) pupil center.
pub fn virtual_pupil_image(params: &EyeParams, pose: &EyePose, cam: &PinholeCamera) -> Result<Pixel> {
    let path = pupil_refraction_path(params, pose, &cam.center())?;
    geom::project(cam, &path.point)
}

/// Angle of the optical axis from the visual axis at this pose, degrees.
pub fn axes_angle_deg(params: &EyeParams, pose: &EyePose) -> f64 {
    angle_between(&optical_axis(params, pose).dir, &visual_axis(params, pose).dir).to_degrees()
}
