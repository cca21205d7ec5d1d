//! Synthetic subjects, the marker protocol with remount slippage, and
//! feature-level datasets with a separable ground-truth section.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eyemodel::{self, EyeParams};
use crate::geom::{self, Line3, Pixel, Vec3};
use crate::rig::{apply_slippage, Eye, RigConfig, RigLayout, SlipCaps, SlippageTransform, CAMERAS_PER_EYE, LEDS_PER_CAMERA};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const TEST_RECORDINGS: u32 = 3;
/// Usable cameras need at least this many glints.
pub const MIN_GLINTS: usize = 3;

/// Deterministic child RNG for a named stream of the scenario seed.
pub fn child_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a over the stream name, then splitmix64 mixing.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub pupil_sigma_px: f64,
    pub glint_sigma_px: f64,
    pub dropout_p: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { pupil_sigma_px: 0.3, glint_sigma_px: 0.5, dropout_p: 0.02 }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self { pupil_sigma_px: 0.0, glint_sigma_px: 0.0, dropout_p: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pupil_sigma_px >= 0.0) {
            return Err(Error::invalid("scenario.noise.pupil_sigma_px", "must be >= 0"));
        }
        if !(self.glint_sigma_px >= 0.0) {
            return Err(Error::invalid("scenario.noise.glint_sigma_px", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("scenario.noise.dropout_p", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// How remount slippage is drawn for the test recordings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlipSampling {
    /// Per-axis Gaussian translation; rotation about a uniform axis with a
    /// Gaussian angle. Draws outside the caps are redrawn.
    Random { translation_sigma_mm: f64, rotation_sigma_deg: f64 },
    /// The same slip for every test recording; rotation is about device +y.
    Fixed { translation_mm: Vec3, rotation_deg: f64 },
}

impl Default for SlipSampling {
    fn default() -> Self {
        SlipSampling::Random { translation_sigma_mm: 1.5, rotation_sigma_deg: 0.8 }
    }
}

/// Marker grid on the display: a 5x5 test grid, the inner 3x3 of which is
/// the calibration grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarkerProtocol {
    pub step_u_px: f64,
    pub step_v_px: f64,
    pub frames_per_marker: usize,
}

impl Default for MarkerProtocol {
    fn default() -> Self {
        Self { step_u_px: 320.0, step_v_px: 180.0, frames_per_marker: 8 }
    }
}

pub const TEST_GRID: usize = 5;
pub const TEST_MARKERS: usize = TEST_GRID * TEST_GRID;
pub const CALIB_MARKERS: usize = 9;

impl MarkerProtocol {
    /// Test marker pixel by row-major index around `center`.
    pub fn test_marker(&self, center: Pixel, index: usize) -> Pixel {
        let (row, col) = (index / TEST_GRID, index % TEST_GRID);
        Pixel::new(center.u + (col as f64 - 2.0) * self.step_u_px, center.v + (row as f64 - 2.0) * self.step_v_px)
    }

    /// Whether a test marker also belongs to the calibration grid.
    pub fn is_calibration(index: usize) -> bool {
        let (row, col) = (index / TEST_GRID, index % TEST_GRID);
        (1..=3).contains(&row) && (1..=3).contains(&col)
    }

    pub fn calibration_indices() -> Vec<usize> {
        (0..TEST_MARKERS).filter(|&i| Self::is_calibration(i)).collect()
    }

    /// `(calibration, test)` marker pixels.
    pub fn markers(&self, center: Pixel) -> (Vec<Pixel>, Vec<Pixel>) {
        let test: Vec<Pixel> = (0..TEST_MARKERS).map(|i| self.test_marker(center, i)).collect();
        let calib = Self::calibration_indices().into_iter().map(|i| test[i]).collect();
        (calib, test)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_u_px > 0.0 && self.step_v_px > 0.0) {
            return Err(Error::invalid("scenario.protocol.step_u_px", "marker steps must be > 0"));
        }
        if self.frames_per_marker == 0 {
            return Err(Error::invalid("scenario.protocol.frames_per_marker", "must be >= 1"));
        }
        Ok(())
    }
}

/// Default protocol on a 1920x1080 display.
pub fn marker_protocol() -> (Vec<Pixel>, Vec<Pixel>) {
    MarkerProtocol::default().markers(Pixel::new(960.0, 540.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub subject_count: usize,
    pub rng_seed: u64,
    pub noise: NoiseModel,
    pub slippage: SlipSampling,
    pub slip_caps: SlipCaps,
    pub protocol: MarkerProtocol,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            subject_count: 9,
            rng_seed: 7,
            noise: NoiseModel::default(),
            slippage: SlipSampling::default(),
            slip_caps: SlipCaps::default(),
            protocol: MarkerProtocol::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.subject_count == 0 {
            return Err(Error::invalid("scenario.subject_count", "must be >= 1"));
        }
        self.noise.validate()?;
        self.protocol.validate()?;
        match self.slippage {
            SlipSampling::Random { translation_sigma_mm, rotation_sigma_deg } => {
                if !(translation_sigma_mm >= 0.0 && rotation_sigma_deg >= 0.0) {
                    return Err(Error::invalid("scenario.slippage", "sigmas must be >= 0"));
                }
            }
            SlipSampling::Fixed { translation_mm, rotation_deg } => {
                let slip = fixed_slip(translation_mm, rotation_deg);
                if !self.slip_caps.admits(&slip) {
                    return Err(Error::invalid("scenario.slippage", "fixed slip exceeds slip_caps"));
                }
            }
        }
        if !(self.slip_caps.max_translation_mm >= 0.0 && self.slip_caps.max_rotation_deg >= 0.0) {
            return Err(Error::invalid("scenario.slip_caps", "caps must be >= 0"));
        }
        Ok(())
    }
}

fn fixed_slip(translation_mm: Vec3, rotation_deg: f64) -> SlippageTransform {
    SlippageTransform { rotation: geom::rotation_about(&Vec3::y(), rotation_deg.to_radians()), translation: translation_mm }
}

/// Draws one remount slip.
pub fn sample_slip(sampling: &SlipSampling, caps: &SlipCaps, rng: &mut impl Rng) -> SlippageTransform {
    match *sampling {
        SlipSampling::Fixed { translation_mm, rotation_deg } => fixed_slip(translation_mm, rotation_deg),
        SlipSampling::Random { translation_sigma_mm, rotation_sigma_deg } => {
            let nt = Normal::new(0.0, translation_sigma_mm).expect("sigma validated");
            let nr = Normal::new(0.0, rotation_sigma_deg).expect("sigma validated");
            for _ in 0..1000 {
                let t = Vec3::new(nt.sample(rng), nt.sample(rng), nt.sample(rng));
                let axis: [f64; 3] = UnitSphere.sample(rng);
                let angle: f64 = nr.sample(rng);
                let slip = SlippageTransform {
                    rotation: geom::rotation_about(&Vec3::from(axis), angle.to_radians()),
                    translation: t,
                };
                if caps.admits(&slip) {
                    return slip;
                }
            }
            SlippageTransform::identity()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub left: EyeParams,
    pub right: EyeParams,
    pub ipd_mm: f64,
}

impl Subject {
    pub fn eye(&self, eye: Eye) -> &EyeParams {
        match eye {
            Eye::Left => &self.left,
            Eye::Right => &self.right,
        }
    }
}

/// Apex to rotation center and apex to pupil distances used for sampled eyes.
pub const APEX_TO_ROTATION_CENTER_MM: f64 = 13.5;
pub const APEX_TO_PUPIL_MM: f64 = 3.6;

fn sample_eye(rng: &mut impl Rng, nasal_sign: f64) -> EyeParams {
    let r = rng.random_range(7.2..=8.4);
    let q: f64 = rng.random_range(-0.45..=-0.15);
    let kappa_h: f64 = rng.random_range(3.0..=6.0);
    let kappa_v = rng.random_range(0.5..=2.5);
    let apex = r / (q + 1.0).sqrt();
    EyeParams {
        r,
        q,
        t: APEX_TO_ROTATION_CENTER_MM - apex,
        d_pupil: apex - APEX_TO_PUPIL_MM,
        n_refr: 1.3375,
        kappa_h_deg: nasal_sign * kappa_h,
        kappa_v_deg: kappa_v,
    }
}

/// Samples a subject. Kappa is nasal for both eyes.
pub fn generate_subject(rng: &mut impl Rng) -> Subject {
    let left = sample_eye(rng, Eye::Left.nasal_sign());
    let right = sample_eye(rng, Eye::Right.nasal_sign());
    let ipd_mm = rng.random_range(56.0..=72.0);
    Subject { left, right, ipd_mm }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFeatures {
    pub pupil_px: Option<Pixel>,
    pub glints_px: [Option<Pixel>; LEDS_PER_CAMERA],
    pub valid: bool,
}

impl CameraFeatures {
    fn invalid() -> Self {
        Self { pupil_px: None, glints_px: [None; LEDS_PER_CAMERA], valid: false }
    }

    pub fn glint_count(&self) -> usize {
        self.glints_px.iter().flatten().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeFeatures {
    pub cameras: [CameraFeatures; CAMERAS_PER_EYE],
}

impl EyeFeatures {
    pub fn usable(&self) -> bool {
        self.cameras.iter().all(|c| c.valid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub recording_id: u32,
    pub frame_id: u64,
    /// Row-major index into the 5x5 test grid.
    pub marker_index: usize,
    pub marker_px: Pixel,
    pub left: EyeFeatures,
    pub right: EyeFeatures,
}

impl FeatureFrame {
    pub fn eye(&self, eye: Eye) -> &EyeFeatures {
        match eye {
            Eye::Left => &self.left,
            Eye::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeTruth {
    /// Optical axis in the device frame, directed out of the eye.
    pub optical_axis: Line3,
    /// Rotation center in the device frame.
    pub rotation_center: Vec3,
    pub gaze_px: Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame_id: u64,
    pub left: EyeTruth,
    pub right: EyeTruth,
}

impl FrameTruth {
    pub fn eye(&self, eye: Eye) -> &EyeTruth {
        match eye {
            Eye::Left => &self.left,
            Eye::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordingTruth {
    pub recording_id: u32,
    pub slip: SlippageTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub subject: Subject,
    pub recordings: Vec<RecordingTruth>,
    pub frames: Vec<FrameTruth>,
}

impl GroundTruth {
    pub fn frame(&self, frame_id: u64) -> Option<&FrameTruth> {
        self.frames
            .binary_search_by_key(&frame_id, |f| f.frame_id)
            .ok()
            .map(|i| &self.frames[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub subject_id: usize,
    pub scenario: Scenario,
    /// Nominal rig as calibrated; slippage lives only in the truth section.
    pub rig: RigConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub frames: Vec<FeatureFrame>,
    pub truth: Option<GroundTruth>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
enum Record {
    Header(Box<DatasetHeader>),
    Frame(FeatureFrame),
    TruthSubject { subject: Subject },
    TruthRecording(RecordingTruth),
    TruthFrame(FrameTruth),
}

impl Dataset {
    pub fn recording(&self, id: u32) -> impl Iterator<Item = &FeatureFrame> {
        self.frames.iter().filter(move |f| f.recording_id == id)
    }

    pub fn without_truth(&self) -> Dataset {
        Dataset { truth: None, ..self.clone() }
    }

    /// Line-delimited JSON: header, frames, then optional truth records.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("dataset records serialize"));
            out.push('\n');
        };
        push(&Record::Header(Box::new(self.header.clone())));
        for f in &self.frames {
            push(&Record::Frame(f.clone()));
        }
        if let Some(t) = &self.truth {
            push(&Record::TruthSubject { subject: t.subject });
            for r in &t.recordings {
                push(&Record::TruthRecording(*r));
            }
            for f in &t.frames {
                push(&Record::TruthFrame(*f));
            }
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Dataset> {
        let mut header = None;
        let mut frames = Vec::new();
        let mut subject = None;
        let mut recordings = Vec::new();
        let mut truth_frames = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            match rec {
                Record::Header(h) => {
                    if header.is_some() {
                        return Err(Error::Format(format!("line {}: duplicate header", n + 1)));
                    }
                    if h.schema_version != DATASET_SCHEMA_VERSION {
                        return Err(Error::Format(format!("unsupported dataset schema {}", h.schema_version)));
                    }
                    header = Some(*h);
                }
                Record::Frame(f) => frames.push(f),
                Record::TruthSubject { subject: s } => subject = Some(s),
                Record::TruthRecording(r) => recordings.push(r),
                Record::TruthFrame(f) => truth_frames.push(f),
            }
        }
        let header = header.ok_or_else(|| Error::Format("missing header record".into()))?;
        let truth = match subject {
            Some(subject) => Some(GroundTruth { subject, recordings, frames: truth_frames }),
            None if recordings.is_empty() && truth_frames.is_empty() => None,
            None => return Err(Error::Format("truth records without a subject record".into())),
        };
        Ok(Dataset { header, frames, truth })
    }
}

/// Noise-free feature pixels of one eye, with per-camera failures as `None`.
pub struct CleanEye {
    pub pupil_px: [Option<Pixel>; CAMERAS_PER_EYE],
    pub glints_px: [[Option<Pixel>; LEDS_PER_CAMERA]; CAMERAS_PER_EYE],
    pub truth: EyeTruth,
}

/// Exact optics for one eye fixating a display marker.
pub fn render_eye_clean(params: &EyeParams, rotation_center_head: &Vec3, rig: &RigConfig, eye: Eye, marker_px: &Pixel) -> Result<CleanEye> {
    let target = rig.marker_world(eye, marker_px)?;
    let pose = eyemodel::pose_fixating(params, *rotation_center_head, target)?;
    let mut pupil_px = [None; CAMERAS_PER_EYE];
    let mut glints_px = [[None; LEDS_PER_CAMERA]; CAMERAS_PER_EYE];
    for c in 0..CAMERAS_PER_EYE {
        let cam = rig.camera_world(eye, c);
        let center = cam.center();
        pupil_px[c] = eyemodel::virtual_pupil_image(params, &pose, &cam).ok().filter(|px| cam.contains(px));
        for (l, slot) in glints_px[c].iter_mut().enumerate() {
            let led = rig.led_world(eye, c, l);
            *slot = eyemodel::glint_point(params, &pose, &led, &center)
                .ok()
                .and_then(|g| geom::project(&cam, &g.position).ok())
                .filter(|px| cam.contains(px));
        }
    }
    let to_device = rig.device_pose.inverse();
    let truth = EyeTruth {
        optical_axis: eyemodel::optical_axis(params, &pose).transformed(&to_device),
        rotation_center: to_device.apply(rotation_center_head),
        gaze_px: *marker_px,
    };
    Ok(CleanEye { pupil_px, glints_px, truth })
}

fn noisy(px: Pixel, dist: &Normal<f64>, rng: &mut impl Rng) -> Pixel {
    Pixel::new(px.u + dist.sample(rng), px.v + dist.sample(rng))
}

/// Renders one frame for a subject whose eyes sit at `eye_centers_head`.
/// Ids in the returned frame are zero; the session assigns them.
pub fn render_frame(
    subject: &Subject,
    eye_centers_head: &[Vec3; 2],
    rig: &RigConfig,
    marker_px: &Pixel,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<(FeatureFrame, FrameTruth)> {
    let pupil_n = Normal::new(0.0, noise.pupil_sigma_px).map_err(|e| Error::invalid("scenario.noise.pupil_sigma_px", e.to_string()))?;
    let glint_n = Normal::new(0.0, noise.glint_sigma_px).map_err(|e| Error::invalid("scenario.noise.glint_sigma_px", e.to_string()))?;
    let mut features = Vec::with_capacity(2);
    let mut truths = Vec::with_capacity(2);
    for eye in Eye::BOTH {
        let cams = rig.eye(eye).cameras;
        let clean = render_eye_clean(subject.eye(eye), &eye_centers_head[eye.index()], rig, eye, marker_px)?;
        let cameras = std::array::from_fn(|c| {
            let bounds = &cams[c];
            // Noise and dropout draws happen for every slot so the stream stays aligned.
            let pupil = clean.pupil_px[c].map(|p| noisy(p, &pupil_n, rng));
            let mut glints = [None; LEDS_PER_CAMERA];
            for (l, g) in clean.glints_px[c].iter().enumerate() {
                let drop = rng.random_bool(noise.dropout_p);
                let px = g.map(|p| noisy(p, &glint_n, rng));
                glints[l] = px.filter(|p| !drop && bounds.contains(p));
            }
            let pupil = pupil.filter(|p| bounds.contains(p));
            let count = glints.iter().flatten().count();
            if pupil.is_none() && count == 0 {
                return CameraFeatures::invalid();
            }
            CameraFeatures { pupil_px: pupil, glints_px: glints, valid: pupil.is_some() && count >= MIN_GLINTS }
        });
        features.push(EyeFeatures { cameras });
        truths.push(clean.truth);
    }
    let right = features.pop().expect("two eyes");
    let left = features.pop().expect("two eyes");
    let frame = FeatureFrame { recording_id: 0, frame_id: 0, marker_index: 0, marker_px: *marker_px, left, right };
    let truth = FrameTruth { frame_id: 0, left: truths[0], right: truths[1] };
    Ok((frame, truth))
}

/// Full four-recording session for one subject: recording 0 shows the nine
/// calibration markers with no slip, recordings 1-3 show all 25 markers
/// after independent remounts.
pub fn simulate_session(subject: &Subject, layout: &RigLayout, scenario: &Scenario, subject_id: usize) -> Result<Dataset> {
    simulate_recordings(subject, layout, scenario, subject_id, 0..=TEST_RECORDINGS)
}

/// A dataset holding only the given recordings of a session. Each recording
/// draws from its own streams, so the frames match the full session's.
pub fn simulate_recordings(
    subject: &Subject,
    layout: &RigLayout,
    scenario: &Scenario,
    subject_id: usize,
    recordings_ids: impl IntoIterator<Item = u32>,
) -> Result<Dataset> {
    scenario.validate()?;
    let rig = layout.build(subject.ipd_mm)?;
    let eye_centers = [rig.left.nominal_center, rig.right.nominal_center];
    let center = {
        let k = rig.left.display.virtual_cam;
        Pixel::new(k.width as f64 / 2.0, k.height as f64 / 2.0)
    };
    let proto = scenario.protocol;
    let mut frames = Vec::new();
    let mut truth_frames = Vec::new();
    let mut recordings = Vec::new();
    let seed = scenario.rng_seed;
    let stream = (subject_id as u64) << 8;
    for rec in recordings_ids {
        if rec > TEST_RECORDINGS {
            return Err(Error::MissingRecording(rec));
        }
        let slip = if rec == 0 {
            SlippageTransform::identity()
        } else {
            sample_slip(&scenario.slippage, &scenario.slip_caps, &mut child_rng(seed, "slip", stream + rec as u64))
        };
        let slipped = apply_slippage(&rig, &slip, &scenario.slip_caps)?;
        recordings.push(RecordingTruth { recording_id: rec, slip });
        let markers: Vec<usize> = if rec == 0 { MarkerProtocol::calibration_indices() } else { (0..TEST_MARKERS).collect() };
        let mut rng = child_rng(seed, "frames", stream + rec as u64);
        for &m in &markers {
            let px = proto.test_marker(center, m);
            for _ in 0..proto.frames_per_marker {
                let (mut f, mut t) = render_frame(subject, &eye_centers, &slipped, &px, &scenario.noise, &mut rng)?;
                let id = frames.len() as u64;
                f.recording_id = rec;
                f.frame_id = id;
                f.marker_index = m;
                t.frame_id = id;
                frames.push(f);
                truth_frames.push(t);
            }
        }
    }
    Ok(Dataset {
        header: DatasetHeader { schema_version: DATASET_SCHEMA_VERSION, subject_id, scenario: scenario.clone(), rig },
        frames,
        truth: Some(GroundTruth { subject: *subject, recordings, frames: truth_frames }),
    })
}

/// Only the calibration recording of a session.
pub fn simulate_recording(subject: &Subject, layout: &RigLayout, scenario: &Scenario, subject_id: usize, recording: u32) -> Result<Dataset> {
    simulate_recordings(subject, layout, scenario, subject_id, [recording])
}

/// Subject `index` of a scenario.
pub fn scenario_subject(scenario: &Scenario, index: usize) -> Subject {
    generate_subject(&mut child_rng(scenario.rng_seed, "subject", index as u64))
}
