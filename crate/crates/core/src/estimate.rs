//! Inverse pipeline: camera planes from pupil and glint features, stereo
//! optical-axis recovery, and eyeball rotation-center estimation.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Line3, PinholeCamera, Pixel, Plane3, Ray3, Vec3, EPS_PARALLEL};
use crate::rig::{EyeRig, CAMERAS_PER_EYE};
use crate::sim::{CameraFeatures, EyeFeatures, MIN_GLINTS};

/// Minimum pupil to glint-centroid separation, pixels.
pub const EPS_PX: f64 = 0.5;
/// Upper bound on theta for the distance model.
pub const MAX_THETA_DEG: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisObservation {
    pub planes: [Plane3; CAMERAS_PER_EYE],
    /// Optical axis, directed out of the eye toward the display.
    pub axis: Line3,
    /// Point on the primary camera's glint ray closest to the axis.
    pub g2: Vec3,
    pub theta_rad: f64,
    /// Distance between the glint ray and the axis at `g2`, mm.
    pub skew_gap_mm: f64,
    /// 1 / sin of the dihedral angle between the two planes.
    pub plane_condition: f64,
}

/// Plane through the camera center containing the pupil and glint rays.
pub fn camera_plane(pupil_px: &Pixel, glint_centroid_px: &Pixel, cam: &PinholeCamera) -> Result<Plane3> {
    let sep = pupil_px.dist(glint_centroid_px);
    if !(sep > EPS_PX) {
        return Err(Error::DegenerateFeatures(format!("pupil and glint centroid {sep:.3} px apart")));
    }
    let dp = geom::backproject(cam, pupil_px).dir;
    let dg = geom::backproject(cam, glint_centroid_px).dir;
    let n = dp.cross(&dg);
    if n.norm() < EPS_PARALLEL {
        return Err(Error::DegenerateFeatures("pupil and glint rays are collinear".into()));
    }
    Ok(Plane3::through(&cam.center(), &n).canonical())
}

pub fn glint_centroid(glints_px: &[Pixel]) -> Result<Pixel> {
    if glints_px.len() < MIN_GLINTS {
        return Err(Error::TooFewGlints(glints_px.len()));
    }
    let n = glints_px.len() as f64;
    let (su, sv) = glints_px.iter().fold((0.0, 0.0), |(a, b), p| (a + p.u, b + p.v));
    Ok(Pixel::new(su / n, sv / n))
}

fn camera_features(cam: &CameraFeatures, index: usize) -> Result<(Pixel, Pixel)> {
    let glints: Vec<Pixel> = cam.glints_px.iter().flatten().copied().collect();
    let centroid = glint_centroid(&glints)?;
    let pupil = cam
        .pupil_px
        .ok_or_else(|| Error::DegenerateFeatures(format!("camera {index} has no pupil")))?;
    Ok((pupil, centroid))
}

/// Recovers the optical axis of one eye from both cameras of a frame.
pub fn optical_axis_frame(features: &EyeFeatures, rig: &EyeRig) -> Result<AxisObservation> {
    let mut planes = [Plane3::through(&Vec3::zeros(), &Vec3::z()); CAMERAS_PER_EYE];
    let mut centroids = [Pixel::new(0.0, 0.0); CAMERAS_PER_EYE];
    for c in 0..CAMERAS_PER_EYE {
        let (pupil, centroid) = camera_features(&features.cameras[c], c)?;
        planes[c] = camera_plane(&pupil, &centroid, &rig.cameras[c])?;
        centroids[c] = centroid;
    }
    let cross = planes[0].normal.cross(&planes[1].normal).norm();
    let mut axis = geom::intersect_planes(&planes[0], &planes[1])?;
    let toward_display = rig.display.virtual_cam.forward();
    if axis.dir.dot(&toward_display) < 0.0 {
        axis.dir = -axis.dir;
    }
    let cam = &rig.cameras[0];
    let glint_ray: Ray3 = geom::backproject(cam, &centroids[0]);
    let (g2, gap) = geom::closest_point_on_ray_to_line(&glint_ray, &axis)?;
    let theta_rad = axis.dir.dot(&glint_ray.dir).abs().min(1.0).acos();
    // Re-anchor the axis at the foot of g2 so downstream points are local.
    axis.point += axis.dir * axis.dir.dot(&(g2 - axis.point));
    Ok(AxisObservation { planes, axis, g2, theta_rad, skew_gap_mm: gap, plane_condition: 1.0 / cross })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Sum of squared point-to-line distances, closed form.
    #[default]
    #[serde(alias = "l2")]
    LeastSquares,
    /// Sum of distances by iteratively reweighted least squares.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterFit {
    pub center: Vec3,
    pub rms_distance_mm: f64,
    pub iterations: usize,
    pub axis_count: usize,
    /// Set when fewer than five axes were available.
    pub warning: Option<String>,
}

fn weighted_closest_point(axes: &[Line3], weights: &[f64]) -> Option<Vec3> {
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for (l, &w) in axes.iter().zip(weights) {
        let proj = Matrix3::identity() - l.dir * l.dir.transpose();
        a += w * proj;
        b += w * (proj * l.point);
    }
    a.cholesky().map(|c| c.solve(&b))
}

/// Point closest to a bundle of optical axes.
pub fn batch_center(axes: &[Line3], mode: CenterMode) -> Result<CenterFit> {
    if axes.len() < 2 {
        return Err(Error::NotEnoughAxes { needed: 2, got: axes.len() });
    }
    let axes: Vec<Line3> = axes.iter().map(|l| Line3::new(l.point, l.dir)).collect();
    let spread = axes.iter().map(|l| axes[0].dir.cross(&l.dir).norm()).fold(0.0, f64::max);
    if spread < EPS_PARALLEL {
        return Err(Error::DegenerateBundle);
    }
    let mut center = weighted_closest_point(&axes, &vec![1.0; axes.len()]).ok_or(Error::DegenerateBundle)?;
    let mut iterations = 0;
    if mode == CenterMode::L1 {
        for _ in 0..100 {
            iterations += 1;
            let w: Vec<f64> = axes.iter().map(|l| 1.0 / geom::point_line_distance(&center, l).max(1e-9)).collect();
            let next = weighted_closest_point(&axes, &w).ok_or(Error::DegenerateBundle)?;
            let step = (next - center).norm();
            center = next;
            if step < 1e-9 {
                break;
            }
        }
    }
    let ss: f64 = axes.iter().map(|l| geom::point_line_distance(&center, l).powi(2)).sum();
    let warning = (axes.len() < 5).then(|| format!("only {} axes; center is poorly constrained", axes.len()));
    Ok(CenterFit { center, rms_distance_mm: (ss / axes.len() as f64).sqrt(), iterations, axis_count: axes.len(), warning })
}

/// Linear distance model L = k1 + k2 tan^2(theta).
pub fn distance_model(k1: f64, k2: f64, theta_rad: f64) -> f64 {
    k1 + k2 * theta_rad.tan().powi(2)
}

/// Single-frame rotation center: walk L from G'' into the eye along the axis.
pub fn frame_center(obs: &AxisObservation, k1: f64, k2: f64) -> Result<Vec3> {
    if !(obs.theta_rad >= 0.0 && obs.theta_rad < MAX_THETA_DEG.to_radians()) {
        return Err(Error::ThetaOutOfRange { theta_deg: obs.theta_rad.to_degrees() });
    }
    if !(k1 > 0.0) {
        return Err(Error::InvalidK1(k1));
    }
    Ok(obs.g2 - distance_model(k1, k2, obs.theta_rad) * obs.axis.dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eyemodel::{self, EyeParams};
    use crate::geom::{Intrinsics, RigidTransform};
    use crate::rig::{Eye, RigLayout};
    use crate::sim::{self, child_rng, render_frame, NoiseModel, Scenario};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cam() -> PinholeCamera {
        PinholeCamera::looking_at(
            Intrinsics { fx: 720.0, fy: 720.0, cx: 320.0, cy: 240.0 },
            640,
            480,
            Vec3::zeros(),
            Vec3::z(),
            Vec3::y(),
        )
    }

    #[test]
    fn plane_degenerate_and_homogeneous() {
        let c = cam();
        let p = Pixel::new(300.0, 200.0);
        assert!(matches!(camera_plane(&p, &p, &c), Err(Error::DegenerateFeatures(_))));
        let g = Pixel::new(350.0, 260.0);
        let plane = camera_plane(&p, &g, &c).unwrap();
        let dp = geom::backproject(&c, &p).dir;
        let dg = geom::backproject(&c, &g).dir;
        for s in [0.1, 1.0, 37.0] {
            let scaled = Plane3::through(&c.center(), &(dp * s).cross(&(dg * 2.5))).canonical();
            assert_abs_diff_eq!((scaled.normal - plane.normal).norm(), 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(plane.signed_distance(&c.center()), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn centroid_examples() {
        let p = Pixel::new(3.5, -2.0);
        assert_eq!(glint_centroid(&[p; 6]).unwrap(), p);
        let c = glint_centroid(&[Pixel::new(0.0, 0.0), Pixel::new(2.0, 0.0), Pixel::new(1.0, 3.0)]).unwrap();
        assert_abs_diff_eq!(c.u, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.v, 1.0, epsilon = 1e-15);
        assert_eq!(glint_centroid(&[p, p]), Err(Error::TooFewGlints(2)));
    }

    #[test]
    fn orthogonal_planes_give_z_axis() {
        let a = Plane3::through(&Vec3::zeros(), &Vec3::x());
        let b = Plane3::through(&Vec3::zeros(), &Vec3::y());
        let l = geom::intersect_planes(&a, &b).unwrap();
        assert_abs_diff_eq!(l.dir.x.abs() + l.dir.y.abs(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.dir.z.abs(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn concurrent_and_parallel_bundles() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        let axes = [Line3::new(p, Vec3::x()), Line3::new(p, Vec3::y()), Line3::new(p, Vec3::z())];
        for mode in [CenterMode::LeastSquares, CenterMode::L1] {
            let fit = batch_center(&axes, mode).unwrap();
            assert_abs_diff_eq!((fit.center - p).norm(), 0.0, epsilon = 1e-12);
            assert!(fit.warning.is_some());
        }
        let parallel: Vec<Line3> = (0..5).map(|i| Line3::new(Vec3::new(i as f64, 0.0, 0.0), Vec3::z())).collect();
        assert_eq!(batch_center(&parallel, CenterMode::LeastSquares), Err(Error::DegenerateBundle));
        assert_eq!(batch_center(&axes[..1], CenterMode::LeastSquares), Err(Error::NotEnoughAxes { needed: 2, got: 1 }));
    }

    proptest! {
        #[test]
        fn least_squares_is_stationary(seed in 0u64..500) {
            use rand::Rng;
            let mut rng = child_rng(seed, "bundle", 0);
            let axes: Vec<Line3> = (0..7).map(|_| {
                let p = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
                let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0));
                Line3::new(p, d)
            }).collect();
            let fit = batch_center(&axes, CenterMode::LeastSquares).unwrap();
            let cost = |c: &Vec3| axes.iter().map(|l| geom::point_line_distance(c, l).powi(2)).sum::<f64>();
            let base = cost(&fit.center);
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = 1e-3;
                prop_assert!(cost(&(fit.center + e)) >= base - 1e-12);
                prop_assert!(cost(&(fit.center - e)) >= base - 1e-12);
            }
            let l1 = batch_center(&axes, CenterMode::L1).unwrap();
            let cost1 = |c: &Vec3| axes.iter().map(|l| geom::point_line_distance(c, l)).sum::<f64>();
            prop_assert!(cost1(&l1.center) <= cost1(&fit.center) + 1e-9);
        }
    }

    fn obs(theta_deg: f64) -> AxisObservation {
        let p = Plane3::through(&Vec3::zeros(), &Vec3::x());
        AxisObservation {
            planes: [p, p],
            axis: Line3::new(Vec3::new(0.0, 0.0, 30.0), -Vec3::z()),
            g2: Vec3::new(0.0, 0.0, 30.0),
            theta_rad: theta_deg.to_radians(),
            skew_gap_mm: 0.0,
            plane_condition: 1.0,
        }
    }

    #[test]
    fn frame_center_cases() {
        let o = obs(0.0);
        let e = frame_center(&o, 12.0, -0.9).unwrap();
        assert_abs_diff_eq!((e - (o.g2 + 12.0 * Vec3::z())).norm(), 0.0, epsilon = 1e-12);
        for th in [5.0, 20.0, 60.0] {
            let e = frame_center(&obs(th), 12.0, 0.0).unwrap();
            assert_abs_diff_eq!((e - o.g2).norm(), 12.0, epsilon = 1e-12);
        }
        assert!(matches!(frame_center(&obs(80.0), 12.0, 0.0), Err(Error::ThetaOutOfRange { .. })));
        assert!(matches!(frame_center(&o, 0.0, 0.0), Err(Error::InvalidK1(_))));
    }

    struct Clean {
        rig: crate::rig::RigConfig,
        subject: sim::Subject,
        centers: [Vec3; 2],
    }

    fn clean_setup(index: usize) -> Clean {
        let subject = sim::scenario_subject(&Scenario::default(), index);
        let rig = RigLayout::default().build(subject.ipd_mm).unwrap();
        let centers = [rig.left.nominal_center, rig.right.nominal_center];
        Clean { rig, subject, centers }
    }

    #[test]
    fn noise_free_axes_match_truth() {
        let s = clean_setup(0);
        let (_, test) = sim::marker_protocol();
        let mut worst = (0.0f64, 0.0f64, 0.0f64);
        for px in &test {
            let (frame, truth) = render_frame(&s.subject, &s.centers, &s.rig, px, &NoiseModel::none(), &mut child_rng(0, "t", 0)).unwrap();
            for eye in Eye::BOTH {
                let o = optical_axis_frame(frame.eye(eye), s.rig.eye(eye)).unwrap();
                let t = truth.eye(eye).optical_axis;
                worst.0 = worst.0.max(geom::angle_between(&o.axis.dir, &t.dir).to_degrees());
                for p in &o.planes {
                    worst.1 = worst.1.max(p.signed_distance(&t.point).abs()).max(p.signed_distance(&t.at(20.0)).abs());
                }
                worst.2 = worst.2.max(o.skew_gap_mm);
                assert!(o.theta_rad >= 0.0);
            }
        }
        assert!(worst.0 < 0.05, "axis angle {}", worst.0);
        assert!(worst.1 < 0.05, "plane residual {}", worst.1);
        assert!(worst.2 < 0.05, "skew gap {}", worst.2);
    }

    #[test]
    fn centroid_tracks_camera_coincident_glint() {
        let s = clean_setup(0);
        let (_, test) = sim::marker_protocol();
        let mut worst: f64 = 0.0;
        for px in &test {
            for eye in Eye::BOTH {
                let params = s.subject.eye(eye);
                let clean = sim::render_eye_clean(params, &s.centers[eye.index()], &s.rig, eye, px).unwrap();
                let pose = eyemodel::pose_fixating(params, s.centers[eye.index()], s.rig.marker_world(eye, px).unwrap()).unwrap();
                for c in 0..2 {
                    let cam = s.rig.camera_world(eye, c);
                    let glints: Vec<Pixel> = clean.glints_px[c].iter().flatten().copied().collect();
                    let centroid = glint_centroid(&glints).unwrap();
                    let g = eyemodel::camera_coincident_glint(params, &pose, &cam.center()).unwrap();
                    worst = worst.max(geom::project(&cam, &g.position).unwrap().dist(&centroid));
                }
            }
        }
        assert!(worst < 1.5, "centroid discrepancy {worst} px");
    }

    #[test]
    fn batch_center_noise_free_and_modes_agree() {
        let s = clean_setup(2);
        let (_, test) = sim::marker_protocol();
        let collect = |noise: &NoiseModel| -> Vec<Line3> {
            let mut rng = child_rng(3, "frames", 0);
            test.iter()
                .map(|px| {
                    let (f, _) = render_frame(&s.subject, &s.centers, &s.rig, px, noise, &mut rng).unwrap();
                    optical_axis_frame(&f.left, &s.rig.left).unwrap().axis
                })
                .collect()
        };
        let exact = collect(&NoiseModel::none());
        let fit = batch_center(&exact, CenterMode::LeastSquares).unwrap();
        assert!((fit.center - s.centers[0]).norm() < 0.05, "center error {}", (fit.center - s.centers[0]).norm());
        let noisy = collect(&NoiseModel { pupil_sigma_px: 0.0, glint_sigma_px: 0.5, dropout_p: 0.0 });
        let a = batch_center(&noisy, CenterMode::LeastSquares).unwrap().center;
        let b = batch_center(&noisy, CenterMode::L1).unwrap().center;
        assert!((a - b).norm() < 0.1, "mode gap {}", (a - b).norm());
    }

    #[test]
    fn distance_is_linear_in_tan_squared() {
        let params = EyeParams::default();
        let xs: Vec<(f64, f64)> = (0..=50)
            .map(|i| {
                let th = (25.0 * i as f64 / 50.0).to_radians();
                (th.tan().powi(2), params.center_distance(th))
            })
            .collect();
        let n = xs.len() as f64;
        let mx = xs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = xs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = xs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = xs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let syy: f64 = xs.iter().map(|p| (p.1 - my).powi(2)).sum();
        let r2 = sxy * sxy / (sxx * syy);
        assert!(r2 > 0.999, "r2 {r2}");
    }

    #[test]
    fn frame_transform_consistency() {
        // A rigid motion of the whole rig moves planes and axes with it.
        let s = clean_setup(1);
        let px = Pixel::new(960.0, 540.0);
        let (f, _) = render_frame(&s.subject, &s.centers, &s.rig, &px, &NoiseModel::none(), &mut child_rng(0, "x", 0)).unwrap();
        let o = optical_axis_frame(&f.left, &s.rig.left).unwrap();
        let tf = RigidTransform::new(geom::rotation_about(&Vec3::new(0.3, 1.0, 0.2), 0.2), Vec3::new(4.0, -2.0, 1.0));
        let mut moved = s.rig.left.clone();
        for c in &mut moved.cameras {
            c.pose = c.pose.compose(&tf.inverse());
        }
        moved.display.virtual_cam.pose = moved.display.virtual_cam.pose.compose(&tf.inverse());
        let m = optical_axis_frame(&f.left, &moved).unwrap();
        assert!(geom::angle_between(&m.axis.dir, &tf.apply_dir(&o.axis.dir)) < 1e-9);
        assert!((m.g2 - tf.apply(&o.g2)).norm() < 1e-9);
        assert_abs_diff_eq!(m.theta_rad, o.theta_rad, epsilon = 1e-12);
    }

    /// Batch-center errors (eye camera 0 frame) for `n` random fixations.
    fn batch_errors(s: &Clean, n: usize, seed: u64) -> Vec3 {
        use rand::Rng;
        let noise = NoiseModel { dropout_p: 0.0, ..NoiseModel::default() };
        let mut rng = child_rng(seed, "mc", n as u64);
        let mut axes = Vec::with_capacity(n);
        while axes.len() < n {
            let px = Pixel::new(rng.random_range(320.0..1600.0), rng.random_range(180.0..900.0));
            let (f, _) = render_frame(&s.subject, &s.centers, &s.rig, &px, &noise, &mut rng).unwrap();
            if let Ok(o) = optical_axis_frame(&f.left, &s.rig.left) {
                axes.push(o.axis);
            }
        }
        let c = batch_center(&axes, CenterMode::LeastSquares).unwrap().center;
        s.rig.left.cameras[0].pose.rotation * (c - s.centers[0])
    }

    fn median(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
    }

    #[test]
    fn batch_center_improves_with_more_axes() {
        let s = clean_setup(4);
        let medians: Vec<f64> = [5, 25, 100]
            .iter()
            .map(|&n| median((0..50).map(|seed| batch_errors(&s, n, seed).norm()).collect()))
            .collect();
        assert!(medians[0] >= medians[1] && medians[1] >= medians[2], "{medians:?}");
    }

    #[test]
    fn depth_dominates_center_error() {
        let s = clean_setup(4);
        let errs: Vec<Vec3> = (0..50).map(|seed| batch_errors(&s, 25, seed)).collect();
        let m = |k: usize| median(errs.iter().map(|e| e[k].abs()).collect());
        let (x, y, z) = (m(0), m(1), m(2));
        assert!(z >= x && z >= y, "x {x} y {y} z {z}");
    }
}
