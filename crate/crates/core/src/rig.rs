//! Device geometry: two eye cameras with LED rings per eye and one monocular
//! display per eye modeled as a virtual scene camera.
//!
//! Everything in [`RigConfig`] is expressed in the device frame (x right,
//! y down, z forward, origin midway between the nominal eye rotation
//! centers). `device_pose` carries the device into the head frame, and
//! slippage only ever changes that pose.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Intrinsics, PinholeCamera, Pixel, RigidTransform, Rot3, Vec3};

pub const CAMERAS_PER_EYE: usize = 2;
pub const LEDS_PER_CAMERA: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub const BOTH: [Eye; 2] = [Eye::Left, Eye::Right];

    pub fn index(self) -> usize {
        match self {
            Eye::Left => 0,
            Eye::Right => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Eye::Left => "left",
            Eye::Right => "right",
        }
    }

    /// Device +x component pointing toward the nose.
    pub fn nasal_sign(self) -> f64 {
        match self {
            Eye::Left => 1.0,
            Eye::Right => -1.0,
        }
    }
}

/// `(fx, fy, cx, cy)` of a display with horizontal field of view `fov_deg`.
pub fn virtual_intrinsics(fov_deg: f64, width_px: u32, height_px: u32) -> Result<Intrinsics> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::InvalidFov { fov_deg });
    }
    let f = (width_px as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    Ok(Intrinsics { fx: f, fy: f, cx: width_px as f64 / 2.0, cy: height_px as f64 / 2.0 })
}

/// One monocular display as a virtual scene camera whose center is the
/// nominal eye rotation center. Its image plane sits at depth `d_e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplayModel {
    pub virtual_cam: PinholeCamera,
    pub fov_deg: f64,
    pub d_e: f64,
}

impl DisplayModel {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::invalid(format!("{path}.fov_deg"), format!("{} outside (0, 180)", self.fov_deg)));
        }
        if !(self.d_e > 0.0) {
            return Err(Error::invalid(format!("{path}.d_e"), "must be > 0"));
        }
        self.virtual_cam.validate(&format!("{path}.virtual_cam"))
    }

    /// Rotation from the device frame into the virtual camera frame.
    pub fn rotation(&self) -> Rot3 {
        self.virtual_cam.pose.rotation
    }
}

/// Fixation target for a display pixel, device frame.
pub fn marker_world_position(display: &DisplayModel, px: &Pixel) -> Result<Vec3> {
    if !display.virtual_cam.contains(px) {
        return Err(Error::OutOfBounds { u: px.u, v: px.v });
    }
    let cam = &display.virtual_cam;
    let d_cam = cam.intrinsics().ray_cam(px);
    let ray = geom::backproject(cam, px);
    Ok(ray.at(display.d_e / d_cam.z))
}

/// Cameras, LEDs and display for one eye, device frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeRig {
    /// Designed eye rotation center.
    pub nominal_center: Vec3,
    pub cameras: [PinholeCamera; CAMERAS_PER_EYE],
    pub leds: [[Vec3; LEDS_PER_CAMERA]; CAMERAS_PER_EYE],
    pub display: DisplayModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    /// Display separation the device was adjusted to.
    pub ipd_mm: f64,
    pub left: EyeRig,
    pub right: EyeRig,
    /// Device frame to head frame.
    pub device_pose: RigidTransform,
    /// Metadata only; LEDs are not modeled spectrally.
    pub led_wavelength_nm: f64,
}

impl RigConfig {
    pub fn eye(&self, eye: Eye) -> &EyeRig {
        match eye {
            Eye::Left => &self.left,
            Eye::Right => &self.right,
        }
    }

    /// Camera with its pose taken from the head frame.
    pub fn camera_world(&self, eye: Eye, cam: usize) -> PinholeCamera {
        let c = self.eye(eye).cameras[cam];
        PinholeCamera { pose: c.pose.compose(&self.device_pose.inverse()), ..c }
    }

    pub fn led_world(&self, eye: Eye, cam: usize, led: usize) -> Vec3 {
        self.device_pose.apply(&self.eye(eye).leds[cam][led])
    }

    pub fn marker_world(&self, eye: Eye, px: &Pixel) -> Result<Vec3> {
        Ok(self.device_pose.apply(&marker_world_position(&self.eye(eye).display, px)?))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ipd_mm > 0.0) {
            return Err(Error::invalid("rig.ipd_mm", "must be > 0"));
        }
        for eye in Eye::BOTH {
            let path = format!("rig.{}", eye.name());
            let er = self.eye(eye);
            er.display.validate(&format!("{path}.display"))?;
            for (i, cam) in er.cameras.iter().enumerate() {
                cam.validate(&format!("{path}.cameras[{i}]"))?;
                let centroid = er.leds[i].iter().sum::<Vec3>() / LEDS_PER_CAMERA as f64;
                if (centroid - cam.center()).norm() > 2.0 {
                    return Err(Error::invalid(format!("{path}.leds[{i}]"), "LED ring centroid more than 2 mm from the camera center"));
                }
            }
            if (er.cameras[0].center() - er.cameras[1].center()).norm() <= 5.0 {
                return Err(Error::invalid(format!("{path}.cameras"), "camera baseline must exceed 5 mm"));
            }
        }
        Ok(())
    }
}

fn default_camera_offsets() -> [[f64; 3]; 2] {
    [[9.0, 20.0, 40.0], [-9.0, 20.0, 40.0]]
}

/// Parametric rig description used in run configs. Camera offsets are
/// `(nasal, down, forward)` mm from the nominal eye rotation center and are
/// mirrored between the eyes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigLayout {
    pub eye_camera_width: u32,
    pub eye_camera_height: u32,
    pub eye_camera_focal_px: f64,
    pub camera_offsets_mm: [[f64; 3]; 2],
    /// Cameras aim at this point on the forward axis of the nominal eye.
    pub camera_aim_forward_mm: f64,
    pub led_ring_radius_mm: f64,
    pub led_phase_deg: f64,
    pub led_wavelength_nm: f64,
    pub display_width: u32,
    pub display_height: u32,
    pub fov_deg: f64,
    pub d_e_mm: f64,
}

impl Default for RigLayout {
    fn default() -> Self {
        Self {
            eye_camera_width: 640,
            eye_camera_height: 480,
            eye_camera_focal_px: 720.0,
            camera_offsets_mm: default_camera_offsets(),
            camera_aim_forward_mm: 4.18,
            led_ring_radius_mm: 4.0,
            led_phase_deg: 0.0,
            led_wavelength_nm: 850.0,
            display_width: 1920,
            display_height: 1080,
            fov_deg: 44.0,
            d_e_mm: 1000.0,
        }
    }
}

impl RigLayout {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::invalid("rig.fov_deg", format!("{} outside (0, 180)", self.fov_deg)));
        }
        if !(self.d_e_mm > 0.0) {
            return Err(Error::invalid("rig.d_e_mm", "must be > 0"));
        }
        if !(self.eye_camera_focal_px > 0.0) {
            return Err(Error::invalid("rig.eye_camera_focal_px", "must be > 0"));
        }
        if self.eye_camera_width == 0 || self.eye_camera_height == 0 || self.display_width == 0 || self.display_height == 0 {
            return Err(Error::invalid("rig", "resolutions must be nonzero"));
        }
        if !(self.led_ring_radius_mm >= 0.0) {
            return Err(Error::invalid("rig.led_ring_radius_mm", "must be >= 0"));
        }
        Ok(())
    }

    /// Concrete rig with the eye modules `ipd_mm` apart.
    pub fn build(&self, ipd_mm: f64) -> Result<RigConfig> {
        self.validate()?;
        let intr = Intrinsics {
            fx: self.eye_camera_focal_px,
            fy: self.eye_camera_focal_px,
            cx: self.eye_camera_width as f64 / 2.0,
            cy: self.eye_camera_height as f64 / 2.0,
        };
        let vintr = virtual_intrinsics(self.fov_deg, self.display_width, self.display_height)?;
        let eye_rig = |eye: Eye| {
            let s = eye.nasal_sign();
            // Left eye sits at -x, so nasal is +x for it.
            let center = Vec3::new(-s * ipd_mm / 2.0, 0.0, 0.0);
            let aim = center + Vec3::new(0.0, 0.0, self.camera_aim_forward_mm);
            let cameras = self.camera_offsets_mm.map(|[nasal, down, fwd]| {
                let c = center + Vec3::new(s * nasal, down, fwd);
                PinholeCamera::looking_at(intr, self.eye_camera_width, self.eye_camera_height, c, aim, Vec3::y())
            });
            let leds = cameras.map(|cam| {
                let rot_inv = cam.pose.rotation.inverse();
                let (ax, ay) = (rot_inv * Vec3::x(), rot_inv * Vec3::y());
                std::array::from_fn(|j| {
                    let phi = (self.led_phase_deg + 60.0 * j as f64).to_radians();
                    cam.center() + (ax * phi.cos() + ay * phi.sin()) * self.led_ring_radius_mm
                })
            });
            let virtual_cam = PinholeCamera {
                fx: vintr.fx,
                fy: vintr.fy,
                cx: vintr.cx,
                cy: vintr.cy,
                width: self.display_width,
                height: self.display_height,
                pose: RigidTransform::new(Rot3::identity(), -center),
            };
            EyeRig { nominal_center: center, cameras, leds, display: DisplayModel { virtual_cam, fov_deg: self.fov_deg, d_e: self.d_e_mm } }
        };
        let rig = RigConfig {
            ipd_mm,
            left: eye_rig(Eye::Left),
            right: eye_rig(Eye::Right),
            device_pose: RigidTransform::identity(),
            led_wavelength_nm: self.led_wavelength_nm,
        };
        rig.validate()?;
        Ok(rig)
    }
}

/// Rigid motion of the device relative to the head, head frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlippageTransform {
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl Default for SlippageTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SlippageTransform {
    pub fn identity() -> Self {
        Self { rotation: Rot3::identity(), translation: Vec3::zeros() }
    }

    pub fn translation(t: Vec3) -> Self {
        Self { rotation: Rot3::identity(), translation: t }
    }

    pub fn as_transform(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation)
    }

    /// `self ∘ first`.
    pub fn then_after(&self, first: &SlippageTransform) -> Self {
        let t = self.as_transform().compose(&first.as_transform());
        Self { rotation: t.rotation, translation: t.translation }
    }

    pub fn rotation_deg(&self) -> f64 {
        self.rotation.angle().to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlipCaps {
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
}

impl Default for SlipCaps {
    fn default() -> Self {
        Self { max_translation_mm: 5.0, max_rotation_deg: 3.0 }
    }
}

impl SlipCaps {
    pub fn admits(&self, slip: &SlippageTransform) -> bool {
        slip.translation.norm() <= self.max_translation_mm && slip.rotation_deg() <= self.max_rotation_deg
    }
}

pub fn apply_slippage(rig: &RigConfig, slip: &SlippageTransform, caps: &SlipCaps) -> Result<RigConfig> {
    if !caps.admits(slip) {
        return Err(Error::SlipTooLarge(format!(
            "|t| = {:.3} mm, angle = {:.3} deg",
            slip.translation.norm(),
            slip.rotation_deg()
        )));
    }
    Ok(RigConfig { device_pose: slip.as_transform().compose(&rig.device_pose), ..rig.clone() })
}
