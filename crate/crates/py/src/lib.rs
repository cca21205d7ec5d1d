//! Python bindings. Datasets, profiles and reports cross the boundary in
//! their on-disk text formats (JSONL, JSON, CSV).

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use slipgaze::calibrate::{calibrate_dataset, CalibrationProfile};
use slipgaze::estimate::CenterMode;
use slipgaze::eyemodel::EyeParams;
use slipgaze::gaze::{self, CenterSource, PipelineOptions};
use slipgaze::geom::Pixel;
use slipgaze::rig::{self, RigLayout};
use slipgaze::sim::{self, Dataset, Scenario};

create_exception!(slipgaze_py, SlipgazeError, PyException);

fn err(e: slipgaze::Error) -> PyErr {
    match e {
        slipgaze::Error::Invalid { .. } => PyValueError::new_err(e.to_string()),
        other => SlipgazeError::new_err(other.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned + Default>(what: &str, text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(format!("{what}: {e}"))),
        None => Ok(T::default()),
    }
}

fn center_mode(mode: &str) -> PyResult<CenterMode> {
    match mode {
        "l2" => Ok(CenterMode::LeastSquares),
        "l1" => Ok(CenterMode::L1),
        other => Err(PyValueError::new_err(format!("mode must be 'l2' or 'l1', got {other:?}"))),
    }
}

/// Simulates one subject's session and returns it as JSONL.
#[pyfunction]
#[pyo3(signature = (subject, scenario_json=None, rig_json=None))]
fn simulate_session(subject: usize, scenario_json: Option<&str>, rig_json: Option<&str>) -> PyResult<String> {
    let scenario: Scenario = parse("scenario", scenario_json)?;
    let layout: RigLayout = parse("rig", rig_json)?;
    scenario.validate().map_err(err)?;
    layout.validate().map_err(err)?;
    let s = sim::scenario_subject(&scenario, subject);
    Ok(sim::simulate_session(&s, &layout, &scenario, subject).map_err(err)?.to_jsonl())
}

/// Calibrates from a session's recording 0; returns the profile JSON.
#[pyfunction]
#[pyo3(signature = (dataset_jsonl, mode="l2"))]
fn calibrate(dataset_jsonl: &str, mode: &str) -> PyResult<String> {
    let ds = Dataset::from_jsonl(dataset_jsonl).map_err(err)?;
    Ok(calibrate_dataset(&ds, center_mode(mode)?).map_err(err)?.to_json())
}

/// Evaluates a profile on the test recordings; returns the report CSV.
#[pyfunction]
#[pyo3(signature = (dataset_jsonl, profile_json, correct=true, center_source="frame"))]
fn evaluate(dataset_jsonl: &str, profile_json: &str, correct: bool, center_source: &str) -> PyResult<String> {
    let ds = Dataset::from_jsonl(dataset_jsonl).map_err(err)?;
    let profile = CalibrationProfile::from_json(profile_json).map_err(err)?;
    let center_source = match center_source {
        "frame" => CenterSource::Frame,
        "batch" => CenterSource::Batch,
        other => return Err(PyValueError::new_err(format!("center_source must be 'frame' or 'batch', got {other:?}"))),
    };
    let opts = PipelineOptions { correct_slippage: correct, center_source, center_mode: profile.center_mode };
    let ev = gaze::evaluate(&ds, &profile, &opts).map_err(err)?;
    Ok(gaze::rows_to_csv(&ev.rows))
}

/// Angle in degrees between two display pixels seen from the virtual camera.
#[pyfunction]
#[pyo3(signature = (est, truth, fov_deg=44.0, width=1920, height=1080))]
fn angular_offset(est: (f64, f64), truth: (f64, f64), fov_deg: f64, width: u32, height: u32) -> PyResult<f64> {
    let k = rig::virtual_intrinsics(fov_deg, width, height).map_err(err)?;
    Ok(gaze::angular_offset(&Pixel::new(est.0, est.1), &Pixel::new(truth.0, truth.1), &k))
}

#[pyfunction]
fn gaze_point_bino(left: (f64, f64), right: (f64, f64)) -> PyResult<(f64, f64)> {
    let p = gaze::gaze_point_bino(Some(Pixel::new(left.0, left.1)), Some(Pixel::new(right.0, right.1))).map_err(err)?;
    Ok((p.u, p.v))
}

/// Exact rotation-center to glint-normal-foot distance for a cornea.
#[pyfunction]
#[pyo3(signature = (theta_rad, r=7.8, q=-0.3, t=None))]
fn center_distance(theta_rad: f64, r: f64, q: f64, t: Option<f64>) -> PyResult<f64> {
    let d = EyeParams::default();
    let p = EyeParams { r, q, t: t.unwrap_or(d.t), ..d };
    p.validate("params").map_err(err)?;
    Ok(p.center_distance(theta_rad))
}

/// Least-squares `L = k1 + k2 tan^2(theta)` over `(theta_rad, L)` samples.
#[pyfunction]
fn fit_k(samples: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = slipgaze::calibrate::fit_k(&samples).map_err(err)?;
    Ok((f.k1, f.k2, f.rms_mm))
}

#[pymodule]
fn slipgaze_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SlipgazeError", m.py().get_type::<SlipgazeError>())?;
    m.add_function(wrap_pyfunction!(simulate_session, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(angular_offset, m)?)?;
    m.add_function(wrap_pyfunction!(gaze_point_bino, m)?)?;
    m.add_function(wrap_pyfunction!(center_distance, m)?)?;
    m.add_function(wrap_pyfunction!(fit_k, m)?)?;
    Ok(())
}
