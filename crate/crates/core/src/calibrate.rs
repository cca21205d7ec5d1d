//! Per-subject calibration from the no-slip recording: rotation center,
//! distance-model coefficients and the kappa rotation.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{self, AxisObservation, CenterMode};
use crate::geom::{Intrinsics, Pixel, Rot3, Vec3};
use crate::rig::{Eye, EyeRig, RigConfig};
use crate::sim::{Dataset, FeatureFrame};

pub const PROFILE_SCHEMA_VERSION: u32 = 1;
pub const MIN_CALIBRATION_FRAMES: usize = 6;
pub const MIN_TAN2_SPREAD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KFit {
    pub k1: f64,
    pub k2: f64,
    pub rms_mm: f64,
    /// Range of tan^2(theta) covered by the samples.
    pub spread: f64,
}

/// Ordinary least squares of L on tan^2(theta).
pub fn fit_k(samples: &[(f64, f64)]) -> Result<KFit> {
    let xs: Vec<f64> = samples.iter().map(|(th, _)| th.tan().powi(2)).collect();
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = if xs.is_empty() { 0.0 } else { hi - lo };
    if samples.len() < 3 || !(spread >= MIN_TAN2_SPREAD) {
        return Err(Error::InsufficientSpread { spread });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, (_, y)) in xs.iter().zip(samples) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let k2 = sxy / sxx;
    let k1 = my - k2 * mx;
    let ss: f64 = xs.iter().zip(samples).map(|(x, (_, y))| (y - k1 - k2 * x).powi(2)).sum();
    if !(k1 > 0.0) {
        return Err(Error::InvalidK1(k1));
    }
    Ok(KFit { k1, k2, rms_mm: (ss / n).sqrt(), spread })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaFit {
    pub rotation: Rot3,
    pub rms_deg: f64,
    pub iterations: usize,
}

/// Unit device-frame direction of a display pixel seen from the virtual camera.
pub fn target_direction(px: &Pixel, r: &Rot3, k: &Intrinsics) -> Vec3 {
    r.inverse() * k.ray_cam(px)
}

/// Gnomonic angular residuals of `x` about `t` with tangent basis `e`.
fn angular_residual(x: &Vec3, t: &Vec3, e: &[Vec3; 2]) -> ([f64; 2], [Vec3; 2]) {
    let c = x.dot(t);
    let mut res = [0.0; 2];
    let mut rows = [Vec3::zeros(); 2];
    for k in 0..2 {
        let s = x.dot(&e[k]);
        res[k] = s.atan2(c);
        let g = (e[k] * c - t * s) / (s * s + c * c);
        // Left perturbation x -> x + w x x, so d res = w . (x x g).
        rows[k] = x.cross(&g);
    }
    (res, rows)
}

fn tangent_basis(t: &Vec3) -> [Vec3; 2] {
    let helper = if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = t.cross(&helper).normalize();
    [e1, t.cross(&e1)]
}

/// Rotation taking optical-axis directions onto the observed target
/// directions, by Levenberg-Marquardt on angular residuals.
pub fn fit_kappa(oa_dirs: &[Vec3], targets_px: &[Pixel], r: &Rot3, k: &Intrinsics) -> Result<KappaFit> {
    if oa_dirs.len() != targets_px.len() {
        return Err(Error::invalid("targets_px", format!("{} targets for {} axes", targets_px.len(), oa_dirs.len())));
    }
    if oa_dirs.len() < 3 {
        return Err(Error::DegenerateAxes);
    }
    let a: Vec<Vec3> = oa_dirs.iter().map(|d| d.normalize()).collect();
    let scatter: Matrix3<f64> = a.iter().map(|d| d * d.transpose()).sum::<Matrix3<f64>>() / a.len() as f64;
    let mean = a.iter().sum::<Vec3>() / a.len() as f64;
    let centered = scatter - mean * mean.transpose();
    let eig = centered.symmetric_eigen().eigenvalues;
    if eig.max() < 1e-12 {
        return Err(Error::DegenerateAxes);
    }
    let t: Vec<Vec3> = targets_px.iter().map(|px| target_direction(px, r, k)).collect();
    let bases: Vec<[Vec3; 2]> = t.iter().map(tangent_basis).collect();
    let n = a.len();
    let eval = |rot: &Rot3| -> (DVector<f64>, DMatrix<f64>) {
        let mut res = DVector::zeros(2 * n);
        let mut jac = DMatrix::zeros(2 * n, 3);
        for i in 0..n {
            let (r2, rows) = angular_residual(&(rot * a[i]), &t[i], &bases[i]);
            for k in 0..2 {
                res[2 * i + k] = r2[k];
                for c in 0..3 {
                    jac[(2 * i + k, c)] = rows[k][c];
                }
            }
        }
        (res, jac)
    };
    let mut rot = Rot3::identity();
    let (mut res, mut jac) = eval(&rot);
    let mut cost = res.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < 200 {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &res;
        let mut damped = jtj.clone();
        for d in 0..3 {
            damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
        }
        let Some(step) = damped.cholesky().map(|c| -c.solve(&g)) else {
            lambda *= 10.0;
            continue;
        };
        let delta = Vec3::new(step[0], step[1], step[2]);
        let trial = Rot3::from_scaled_axis(delta) * rot;
        let (tres, tjac) = eval(&trial);
        let tcost = tres.norm_squared();
        if tcost <= cost {
            rot = trial;
            res = tres;
            jac = tjac;
            cost = tcost;
            lambda = (lambda / 10.0).max(1e-12);
            if delta.norm() < 1e-10 {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if delta.norm() < 1e-10 {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!("kappa fit after {iterations} iterations")));
    }
    let rms_deg = (2.0 * cost / n as f64).sqrt().to_degrees();
    Ok(KappaFit { rotation: rot, rms_deg, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeDiagnostics {
    pub frames_used: usize,
    pub frames_skipped: usize,
    /// First few skip reasons, with frame ids.
    pub skip_reasons: Vec<String>,
    pub center_rms_mm: f64,
    pub k_rms_mm: f64,
    pub tan2_spread: f64,
    pub kappa_rms_deg: f64,
    pub kappa_iterations: usize,
    /// Worst plane condition number among the used frames.
    pub max_plane_condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeCalibration {
    /// Rotation center during calibration, device frame.
    pub e_calib: Vec3,
    pub k1: f64,
    pub k2: f64,
    pub r_kappa: Rot3,
    /// Device frame to virtual display camera, taken from the rig.
    pub r: Rot3,
    pub diagnostics: EyeDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub schema_version: u32,
    pub subject_id: usize,
    pub center_mode: CenterMode,
    pub left: EyeCalibration,
    pub right: EyeCalibration,
    pub k_virtual: Intrinsics,
    pub d_e: f64,
}

impl CalibrationProfile {
    pub fn eye(&self, eye: Eye) -> &EyeCalibration {
        match eye {
            Eye::Left => &self.left,
            Eye::Right => &self.right,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("profile serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: CalibrationProfile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if p.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported profile schema {}", p.schema_version)));
        }
        Ok(p)
    }
}

/// Axis observations for one eye; failed frames come back as errors tagged
/// with their frame id.
pub fn frame_axes<'a>(
    frames: impl IntoIterator<Item = &'a FeatureFrame>,
    eye: Eye,
    rig: &EyeRig,
) -> Vec<std::result::Result<(&'a FeatureFrame, AxisObservation), Error>> {
    frames
        .into_iter()
        .map(|f| estimate::optical_axis_frame(f.eye(eye), rig).map(|o| (f, o)).map_err(|e| e.in_frame(f.frame_id)))
        .collect()
}

/// Calibrates one eye from its recording-0 frames.
pub fn calibrate_eye(frames: &[&FeatureFrame], eye: Eye, rig: &EyeRig, mode: CenterMode) -> Result<EyeCalibration> {
    let mut used = Vec::new();
    let mut reasons = Vec::new();
    let mut skipped = 0;
    for r in frame_axes(frames.iter().copied(), eye, rig) {
        match r {
            Ok(pair) => used.push(pair),
            Err(e) => {
                skipped += 1;
                if reasons.len() < 8 {
                    reasons.push(e.to_string());
                }
            }
        }
    }
    if used.len() < MIN_CALIBRATION_FRAMES {
        return Err(Error::TooFewFrames { eye: eye.name(), got: used.len(), needed: MIN_CALIBRATION_FRAMES });
    }
    let axes: Vec<_> = used.iter().map(|(_, o)| o.axis).collect();
    let center = estimate::batch_center(&axes, mode)?;
    let e_calib = center.center;
    let samples: Vec<(f64, f64)> = used.iter().map(|(_, o)| (o.theta_rad, (e_calib - o.g2).norm())).collect();
    let k = fit_k(&samples)?;
    let r = rig.display.rotation();
    let kv = rig.display.virtual_cam.intrinsics();
    let dirs: Vec<Vec3> = used.iter().map(|(_, o)| o.axis.dir).collect();
    let targets: Vec<Pixel> = used.iter().map(|(f, _)| f.marker_px).collect();
    let kappa = fit_kappa(&dirs, &targets, &r, &kv)?;
    Ok(EyeCalibration {
        e_calib,
        k1: k.k1,
        k2: k.k2,
        r_kappa: kappa.rotation,
        r,
        diagnostics: EyeDiagnostics {
            frames_used: used.len(),
            frames_skipped: skipped,
            skip_reasons: reasons,
            center_rms_mm: center.rms_distance_mm,
            k_rms_mm: k.rms_mm,
            tan2_spread: k.spread,
            kappa_rms_deg: kappa.rms_deg,
            kappa_iterations: kappa.iterations,
            max_plane_condition: used.iter().map(|(_, o)| o.plane_condition).fold(0.0, f64::max),
        },
    })
}

/// Calibrates both eyes from the recording-0 frames in `frames`.
pub fn calibrate_session(frames: &[FeatureFrame], rig: &RigConfig, subject_id: usize, mode: CenterMode) -> Result<CalibrationProfile> {
    let rec0: Vec<&FeatureFrame> = frames.iter().filter(|f| f.recording_id == 0).collect();
    if rec0.is_empty() {
        return Err(Error::MissingRecording(0));
    }
    let left = calibrate_eye(&rec0, Eye::Left, &rig.left, mode)?;
    let right = calibrate_eye(&rec0, Eye::Right, &rig.right, mode)?;
    Ok(CalibrationProfile {
        schema_version: PROFILE_SCHEMA_VERSION,
        subject_id,
        center_mode: mode,
        left,
        right,
        k_virtual: rig.left.display.virtual_cam.intrinsics(),
        d_e: rig.left.display.d_e,
    })
}

pub fn calibrate_dataset(ds: &Dataset, mode: CenterMode) -> Result<CalibrationProfile> {
    calibrate_session(&ds.frames, &ds.header.rig, ds.header.subject_id, mode)
}
