use serde::Serialize;
use slipgaze::calibrate::{calibrate_dataset, CalibrationProfile};
use slipgaze::gaze::{self, evaluate, summarize, Evaluation, FrameEvaluation, PipelineOptions, ReportRow};
use slipgaze::sim::{self, Dataset, Scenario, SlipSampling};

use crate::config::RunConfig;
use crate::error::CliError;

pub struct SubjectRun {
    pub dataset: Dataset,
    pub profile: CalibrationProfile,
    pub evaluation: Evaluation,
}

pub fn simulate_subject(cfg: &RunConfig, index: usize) -> Result<Dataset, CliError> {
    let subject = sim::scenario_subject(&cfg.scenario, index);
    Ok(sim::simulate_session(&subject, &cfg.rig, &cfg.scenario, index)?)
}

pub fn run_subject(cfg: &RunConfig, index: usize) -> Result<SubjectRun, CliError> {
    let dataset = simulate_subject(cfg, index)?;
    let profile = calibrate_dataset(&dataset, cfg.pipeline.center_mode)?;
    let evaluation = evaluate(&dataset, &profile, &cfg.pipeline)?;
    Ok(SubjectRun { dataset, profile, evaluation })
}

/// Per-subject rows followed by cross-subject rows per recording and overall.
pub fn report_rows(evals: &[Evaluation]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = evals.iter().flat_map(|e| e.rows.iter().cloned()).collect();
    let frames: Vec<&FrameEvaluation> = evals.iter().flat_map(|e| &e.frames).collect();
    let mut recs: Vec<u32> = frames.iter().map(|f| f.estimate.recording_id).collect();
    recs.sort_unstable();
    recs.dedup();
    for rec in recs {
        let sel: Vec<&FrameEvaluation> = frames.iter().copied().filter(|f| f.estimate.recording_id == rec).collect();
        rows.push(summarize("all", &rec.to_string(), &sel));
    }
    rows.push(summarize("all", "all", &frames));
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Pupil and glint pixel sigma, both set to the grid value.
    Noise,
    /// Remount slip translation sigma in mm; rotation sigma is kept.
    Slip,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Noise => "noise",
            SweepAxis::Slip => "slip",
        }
    }

    pub fn apply(self, scenario: &Scenario, value: f64) -> Scenario {
        let mut s = scenario.clone();
        match self {
            SweepAxis::Noise => {
                s.noise.pupil_sigma_px = value;
                s.noise.glint_sigma_px = value;
            }
            SweepAxis::Slip => {
                let rotation_sigma_deg = match s.slippage {
                    SlipSampling::Random { rotation_sigma_deg, .. } => rotation_sigma_deg,
                    SlipSampling::Fixed { .. } => 0.0,
                };
                s.slippage = SlipSampling::Random { translation_sigma_mm: value, rotation_sigma_deg };
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: f64,
    pub frames: usize,
    pub left_mean_deg: f64,
    pub left_sd_deg: f64,
    pub right_mean_deg: f64,
    pub right_sd_deg: f64,
    pub bino_mean_deg: f64,
    pub bino_sd_deg: f64,
    pub center_z_mean_mm: f64,
}

pub fn sweep(cfg: &RunConfig, axis: SweepAxis, grid: &[f64]) -> Result<Vec<SweepRow>, CliError> {
    let mut out = Vec::with_capacity(grid.len());
    for &value in grid {
        let point = RunConfig { scenario: axis.apply(&cfg.scenario, value), ..cfg.clone() };
        point.validate()?;
        let evals = (0..point.scenario.subject_count)
            .map(|i| run_subject(&point, i).map(|r| r.evaluation))
            .collect::<Result<Vec<_>, _>>()?;
        let frames: Vec<&FrameEvaluation> = evals.iter().flat_map(|e| &e.frames).collect();
        let r = summarize("all", "all", &frames);
        out.push(SweepRow {
            axis: axis.name(),
            value,
            frames: r.frames,
            left_mean_deg: r.left_mean_deg,
            left_sd_deg: r.left_sd_deg,
            right_mean_deg: r.right_mean_deg,
            right_sd_deg: r.right_sd_deg,
            bino_mean_deg: r.bino_mean_deg,
            bino_sd_deg: r.bino_sd_deg,
            center_z_mean_mm: r.center_z_mean_mm,
        });
    }
    Ok(out)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn pipeline_summary(evals: &[Evaluation], rows: Vec<ReportRow>) -> String {
    let mut s = serde_json::to_string_pretty(&gaze::summary(evals, rows)).expect("summary serializes");
    s.push('\n');
    s
}

pub fn options_line(opts: &PipelineOptions) -> String {
    format!("correction {}, center source {:?}, center mode {:?}", if opts.correct_slippage { "on" } else { "off" }, opts.center_source, opts.center_mode)
}
