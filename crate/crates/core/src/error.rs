use thiserror::Error;

/// Errors raised by the geometry, optics, estimation and calibration stages.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point lies behind the camera (depth {depth} mm)")]
    BehindCamera { depth: f64 },
    #[error("planes are parallel, normals cross to {cross_norm:e}")]
    ParallelPlanes { cross_norm: f64 },
    #[error("lines are parallel, directions cross to {cross_norm:e}")]
    ParallelLines { cross_norm: f64 },
    #[error("point is not on the corneal surface (residual {residual:e})")]
    OffSurface { residual: f64 },
    #[error("fixation target coincides with the rotation center")]
    DegenerateTarget,
    #[error("no visible corneal reflection: {0}")]
    NoVisibleReflection(String),
    #[error("no camera-coincident reflection point: {0}")]
    NoSolution(String),
    #[error("total internal reflection on the refracted pupil path")]
    TotalInternalReflection,
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error("invalid field of view {fov_deg} deg, expected (0, 180)")]
    InvalidFov { fov_deg: f64 },
    #[error("slippage exceeds caps: {0}")]
    SlipTooLarge(String),
    #[error("pixel ({u}, {v}) outside display bounds")]
    OutOfBounds { u: f64, v: f64 },
    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),
    #[error("need at least 3 glints, got {0}")]
    TooFewGlints(usize),
    #[error("need at least {needed} axes, got {got}")]
    NotEnoughAxes { needed: usize, got: usize },
    #[error("optical axes are all parallel")]
    DegenerateBundle,
    #[error("theta {theta_deg} deg outside the supported range [0, 80)")]
    ThetaOutOfRange { theta_deg: f64 },
    #[error("invalid distance model parameter k1 = {0} (must be > 0)")]
    InvalidK1(f64),
    #[error("tan^2(theta) spread {spread:e} too small to identify k2")]
    InsufficientSpread { spread: f64 },
    #[error("axis directions do not span 3D")]
    DegenerateAxes,
    #[error("mapped gaze ray points behind the virtual camera")]
    BehindVirtualCamera,
    #[error("monocular estimate missing for {0} eye")]
    MissingEye(&'static str),
    #[error("dataset has no ground truth section")]
    MissingGroundTruth,
    #[error("dataset has no recording {0}")]
    MissingRecording(u32),
    #[error("only {got} usable frames for the {eye} eye, need {needed}")]
    TooFewFrames { eye: &'static str, got: usize, needed: usize },
    #[error("frame {index}: {source}")]
    Frame { index: u64, source: Box<Error> },
    #[error("invalid value for {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid { path: path.into(), message: message.into() }
    }

    pub(crate) fn in_frame(self, index: u64) -> Self {
        Error::Frame { index, source: Box::new(self) }
    }

    /// Innermost error, unwrapping frame context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Frame { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
