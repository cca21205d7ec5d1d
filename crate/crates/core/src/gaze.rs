//! Slippage-corrected gaze mapping, binocular fusion, the angular-offset
//! metric, and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationProfile;
use crate::error::{Error, Result};
use crate::estimate::{self, AxisObservation, CenterMode};
use crate::eyemodel;
use crate::geom::{self, Intrinsics, Pixel, Vec3};
use crate::rig::{apply_slippage, Eye, RigConfig};
use crate::sim::{Dataset, FeatureFrame, MarkerProtocol, TEST_MARKERS};

/// Where the per-frame rotation center for the slippage term comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    /// Linear distance model on each frame.
    #[default]
    Frame,
    /// One batch estimate per recording.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineOptions {
    pub correct_slippage: bool,
    pub center_source: CenterSource,
    pub center_mode: CenterMode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { correct_slippage: true, center_source: CenterSource::Frame, center_mode: CenterMode::LeastSquares }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeEstimate {
    pub frame_id: u64,
    pub recording_id: u32,
    pub marker_index: usize,
    pub marker_px: Pixel,
    pub left_px: Option<Pixel>,
    pub right_px: Option<Pixel>,
    pub bino_px: Option<Pixel>,
    pub correction_applied: bool,
    pub e_now_left: Option<Vec3>,
    pub e_now_right: Option<Vec3>,
}

impl GazeEstimate {
    pub fn eye_px(&self, eye: Eye) -> Option<Pixel> {
        match eye {
            Eye::Left => self.left_px,
            Eye::Right => self.right_px,
        }
    }
}

/// Maps an optical-axis direction to a display pixel.
pub fn gaze_point_mono(oa_dir: &Vec3, e_now: &Vec3, profile: &CalibrationProfile, eye: Eye, correct: bool) -> Result<Pixel> {
    let cal = profile.eye(eye);
    let mut v = cal.r_kappa * oa_dir.normalize();
    if correct {
        v += (e_now - cal.e_calib) / profile.d_e;
    }
    let v = cal.r * v;
    if !(v.z > 0.0) {
        return Err(Error::BehindVirtualCamera);
    }
    profile.k_virtual.project_cam(&v)
}

pub fn gaze_point_bino(left: Option<Pixel>, right: Option<Pixel>) -> Result<Pixel> {
    let l = left.ok_or(Error::MissingEye("left"))?;
    let r = right.ok_or(Error::MissingEye("right"))?;
    Ok(Pixel::new(0.5 * (l.u + r.u), 0.5 * (l.v + r.v)))
}

/// Angle between the virtual-camera rays of two pixels, degrees.
pub fn angular_offset(est: &Pixel, truth: &Pixel, k: &Intrinsics) -> f64 {
    geom::angle_between(&k.ray_cam(est), &k.ray_cam(truth)).to_degrees()
}

/// Gaze for one frame. `batch_centers` supplies per-eye centers when the
/// center source is `Batch`.
pub fn estimate_gaze(
    frame: &FeatureFrame,
    rig: &RigConfig,
    profile: &CalibrationProfile,
    opts: &PipelineOptions,
    batch_centers: [Option<Vec3>; 2],
) -> (GazeEstimate, [Option<AxisObservation>; 2]) {
    let mut px = [None; 2];
    let mut centers = [None; 2];
    let mut obs_out = [None; 2];
    for eye in Eye::BOTH {
        let i = eye.index();
        let Ok(obs) = estimate::optical_axis_frame(frame.eye(eye), rig.eye(eye)) else { continue };
        obs_out[i] = Some(obs);
        let cal = profile.eye(eye);
        let e_now = match opts.center_source {
            CenterSource::Frame => estimate::frame_center(&obs, cal.k1, cal.k2).ok(),
            CenterSource::Batch => batch_centers[i],
        };
        let Some(e_now) = e_now else { continue };
        centers[i] = Some(e_now);
        px[i] = gaze_point_mono(&obs.axis.dir, &e_now, profile, eye, opts.correct_slippage).ok();
    }
    let bino = gaze_point_bino(px[0], px[1]).ok();
    let est = GazeEstimate {
        frame_id: frame.frame_id,
        recording_id: frame.recording_id,
        marker_index: frame.marker_index,
        marker_px: frame.marker_px,
        left_px: px[0],
        right_px: px[1],
        bino_px: bino,
        correction_applied: opts.correct_slippage,
        e_now_left: centers[0],
        e_now_right: centers[1],
    };
    (est, obs_out)
}

/// Per-frame metrics against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEvaluation {
    pub estimate: GazeEstimate,
    pub left_deg: Option<f64>,
    pub right_deg: Option<f64>,
    pub bino_deg: Option<f64>,
    /// Per-frame center minus the recording's batch center, in eye camera 0
    /// coordinates, mm.
    pub center_error_left: Option<Vec3>,
    pub center_error_right: Option<Vec3>,
    /// Estimated vs true optical-axis angle, degrees.
    pub axis_error_left_deg: Option<f64>,
    pub axis_error_right_deg: Option<f64>,
}

/// One line of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject_id: String,
    pub recording: String,
    pub frames: usize,
    pub left_mean_deg: f64,
    pub left_sd_deg: f64,
    pub right_mean_deg: f64,
    pub right_sd_deg: f64,
    pub bino_mean_deg: f64,
    pub bino_sd_deg: f64,
    pub center_x_mean_mm: f64,
    pub center_x_sd_mm: f64,
    pub center_y_mean_mm: f64,
    pub center_y_sd_mm: f64,
    pub center_z_mean_mm: f64,
    pub center_z_sd_mm: f64,
}

pub const REPORT_COLUMNS: [&str; 15] = [
    "subject_id",
    "recording",
    "frames",
    "left_mean_deg",
    "left_sd_deg",
    "right_mean_deg",
    "right_sd_deg",
    "bino_mean_deg",
    "bino_sd_deg",
    "center_x_mean_mm",
    "center_x_sd_mm",
    "center_y_mean_mm",
    "center_y_sd_mm",
    "center_z_mean_mm",
    "center_z_sd_mm",
];

/// Mean and sample standard deviation; NaN for an empty slice.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates frame metrics; center errors are absolute per axis over both eyes.
pub fn summarize(subject_id: &str, recording: &str, frames: &[&FrameEvaluation]) -> ReportRow {
    let collect = |f: fn(&FrameEvaluation) -> Option<f64>| -> Vec<f64> { frames.iter().filter_map(|e| f(e)).collect() };
    let (lm, ls) = mean_sd(&collect(|e| e.left_deg));
    let (rm, rs) = mean_sd(&collect(|e| e.right_deg));
    let (bm, bs) = mean_sd(&collect(|e| e.bino_deg));
    let axis = |k: usize| -> (f64, f64) {
        let xs: Vec<f64> = frames
            .iter()
            .flat_map(|e| [e.center_error_left, e.center_error_right])
            .flatten()
            .map(|v| v[k].abs())
            .collect();
        mean_sd(&xs)
    };
    let (xm, xs) = axis(0);
    let (ym, ys) = axis(1);
    let (zm, zs) = axis(2);
    ReportRow {
        subject_id: subject_id.to_string(),
        recording: recording.to_string(),
        frames: frames.len(),
        left_mean_deg: lm,
        left_sd_deg: ls,
        right_mean_deg: rm,
        right_sd_deg: rs,
        bino_mean_deg: bm,
        bino_sd_deg: bs,
        center_x_mean_mm: xm,
        center_x_sd_mm: xs,
        center_y_mean_mm: ym,
        center_y_sd_mm: ys,
        center_z_mean_mm: zm,
        center_z_sd_mm: zs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSummary {
    pub marker_index: usize,
    pub marker_px: Pixel,
    pub calibration: bool,
    pub frames: usize,
    pub left_mean_deg: f64,
    pub right_mean_deg: f64,
    pub bino_mean_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rows: Vec<ReportRow>,
    pub per_marker: Vec<MarkerSummary>,
    /// Binocular mean over frames of the nine calibration markers.
    pub inner_bino_mean_deg: f64,
    /// Binocular mean over frames of the sixteen other markers.
    pub outer_bino_mean_deg: f64,
    pub axis_error_mean_deg: f64,
    /// Worst distance between the six-glint centroid and the exact
    /// camera-coincident glint on noise-free optics, pixels.
    pub centroid_discrepancy_max_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub subject_id: usize,
    pub frames: Vec<FrameEvaluation>,
    pub rows: Vec<ReportRow>,
    pub centroid_discrepancy_max_px: f64,
}

/// Runs the gaze pipeline over the test recordings and scores it against truth.
pub fn evaluate(ds: &Dataset, profile: &CalibrationProfile, opts: &PipelineOptions) -> Result<Evaluation> {
    let truth = ds.truth.as_ref().ok_or(Error::MissingGroundTruth)?;
    let rig = &ds.header.rig;
    let mut recs: Vec<u32> = ds.frames.iter().map(|f| f.recording_id).filter(|&r| r > 0).collect();
    recs.sort_unstable();
    recs.dedup();
    if recs.is_empty() {
        return Err(Error::MissingRecording(1));
    }
    let kv = profile.k_virtual;
    let sid = ds.header.subject_id;
    let mut out = Vec::new();
    let mut rows = Vec::new();
    for &rec in &recs {
        let frames: Vec<&FeatureFrame> = ds.recording(rec).collect();
        // Batch centers on this recording's own axes: the reference for
        // center errors and the source for CenterSource::Batch.
        let mut batch = [None; 2];
        for eye in Eye::BOTH {
            let axes: Vec<_> = frames
                .iter()
                .filter_map(|f| estimate::optical_axis_frame(f.eye(eye), rig.eye(eye)).ok())
                .map(|o| o.axis)
                .collect();
            batch[eye.index()] = estimate::batch_center(&axes, opts.center_mode).ok().map(|c| c.center);
        }
        let start = out.len();
        for f in &frames {
            let t = truth.frame(f.frame_id).ok_or_else(|| Error::Format(format!("no truth for frame {}", f.frame_id)))?;
            let (est, obs) = estimate_gaze(f, rig, profile, opts, batch);
            let offset = |eye: Eye| est.eye_px(eye).map(|p| angular_offset(&p, &t.eye(eye).gaze_px, &kv));
            let center_err = |eye: Eye| {
                let e = match eye {
                    Eye::Left => est.e_now_left,
                    Eye::Right => est.e_now_right,
                }?;
                let b = batch[eye.index()]?;
                Some(rig.eye(eye).cameras[0].pose.rotation * (e - b))
            };
            let axis_err = |eye: Eye| {
                obs[eye.index()].map(|o| geom::angle_between(&o.axis.dir, &t.eye(eye).optical_axis.dir).to_degrees())
            };
            out.push(FrameEvaluation {
                left_deg: offset(Eye::Left),
                right_deg: offset(Eye::Right),
                bino_deg: est.bino_px.map(|p| angular_offset(&p, &t.left.gaze_px, &kv)),
                center_error_left: center_err(Eye::Left),
                center_error_right: center_err(Eye::Right),
                axis_error_left_deg: axis_err(Eye::Left),
                axis_error_right_deg: axis_err(Eye::Right),
                estimate: est,
            });
        }
        let refs: Vec<&FrameEvaluation> = out[start..].iter().collect();
        rows.push(summarize(&sid.to_string(), &rec.to_string(), &refs));
    }
    let all: Vec<&FrameEvaluation> = out.iter().collect();
    rows.push(summarize(&sid.to_string(), "all", &all));
    let centroid_discrepancy_max_px = centroid_discrepancy(ds, recs[0])?;
    Ok(Evaluation { subject_id: sid, frames: out, rows, centroid_discrepancy_max_px })
}

/// Worst six-glint centroid error against the exact camera-coincident glint,
/// on noise-free optics for every test marker of one recording.
pub fn centroid_discrepancy(ds: &Dataset, recording: u32) -> Result<f64> {
    let truth = ds.truth.as_ref().ok_or(Error::MissingGroundTruth)?;
    let slip = truth
        .recordings
        .iter()
        .find(|r| r.recording_id == recording)
        .ok_or(Error::MissingRecording(recording))?
        .slip;
    let rig = apply_slippage(&ds.header.rig, &slip, &ds.header.scenario.slip_caps)?;
    let nominal = &ds.header.rig;
    let centers = [nominal.left.nominal_center, nominal.right.nominal_center];
    let proto = ds.header.scenario.protocol;
    let k = nominal.left.display.virtual_cam;
    let mid = Pixel::new(k.width as f64 / 2.0, k.height as f64 / 2.0);
    let mut worst: f64 = 0.0;
    for m in 0..TEST_MARKERS {
        let px = proto.test_marker(mid, m);
        for eye in Eye::BOTH {
            let params = truth.subject.eye(eye);
            let Ok(clean) = crate::sim::render_eye_clean(params, &centers[eye.index()], &rig, eye, &px) else { continue };
            let Ok(pose) = eyemodel::pose_fixating(params, centers[eye.index()], rig.marker_world(eye, &px)?) else { continue };
            for c in 0..clean.glints_px.len() {
                let glints: Vec<Pixel> = clean.glints_px[c].iter().flatten().copied().collect();
                let cam = rig.camera_world(eye, c);
                let (Ok(centroid), Ok(g)) = (estimate::glint_centroid(&glints), eyemodel::camera_coincident_glint(params, &pose, &cam.center())) else {
                    continue;
                };
                if let Ok(gp) = geom::project(&cam, &g.position) {
                    worst = worst.max(gp.dist(&centroid));
                }
            }
        }
    }
    Ok(worst)
}

/// Per-marker means and the calibration/non-calibration split.
pub fn summary(evals: &[Evaluation], rows: Vec<ReportRow>) -> ReportSummary {
    let frames: Vec<&FrameEvaluation> = evals.iter().flat_map(|e| &e.frames).collect();
    let mut per_marker = Vec::new();
    let (mut inner, mut outer) = (Vec::new(), Vec::new());
    for m in 0..TEST_MARKERS {
        let fm: Vec<&&FrameEvaluation> = frames.iter().filter(|f| f.estimate.marker_index == m).collect();
        if fm.is_empty() {
            continue;
        }
        let mean = |f: fn(&FrameEvaluation) -> Option<f64>| mean_sd(&fm.iter().filter_map(|e| f(e)).collect::<Vec<_>>()).0;
        let calibration = MarkerProtocol::is_calibration(m);
        let bino: Vec<f64> = fm.iter().filter_map(|e| e.bino_deg).collect();
        if calibration { inner.extend(&bino) } else { outer.extend(&bino) }
        let marker_px = fm[0].estimate.marker_px;
        per_marker.push(MarkerSummary {
            marker_index: m,
            marker_px,
            calibration,
            frames: fm.len(),
            left_mean_deg: mean(|e| e.left_deg),
            right_mean_deg: mean(|e| e.right_deg),
            bino_mean_deg: mean(|e| e.bino_deg),
        });
    }
    let axis: Vec<f64> = frames.iter().flat_map(|f| [f.axis_error_left_deg, f.axis_error_right_deg]).flatten().collect();
    ReportSummary {
        rows,
        per_marker,
        inner_bino_mean_deg: mean_sd(&inner).0,
        outer_bino_mean_deg: mean_sd(&outer).0,
        axis_error_mean_deg: mean_sd(&axis).0,
        centroid_discrepancy_max_px: evals.iter().map(|e| e.centroid_discrepancy_max_px).fold(0.0, f64::max),
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(REPORT_COLUMNS).expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}
