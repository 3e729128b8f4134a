use std::fmt;
use std::path::PathBuf;

/// Pipeline stage used to attribute errors raised inside
/// [`crate::pipeline::estimate_relative_pose`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AnchorCloud,
    QueryCloud,
    Filtering,
    Voxelization,
    Correspondence,
    Ransac,
    Icp,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::AnchorCloud => "anchor cloud",
            Stage::QueryCloud => "query cloud",
            Stage::Filtering => "filtering",
            Stage::Voxelization => "voxelization",
            Stage::Correspondence => "correspondence",
            Stage::Ransac => "ransac",
            Stage::Icp => "icp",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("degenerate frame: no pixel has both mask and valid depth")]
    DegenerateFrame,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate sample: covariance is rank deficient")]
    DegenerateSample,

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("no consensus: no model reached {needed} inliers")]
    NoConsensus { needed: usize },

    #[error("label mismatch: query has {query:?}, anchor has {anchor:?}")]
    LabelMismatch {
        query: Vec<String>,
        anchor: Vec<String>,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("ingestion error in {}: {message}", path.display())]
    Ingestion { path: PathBuf, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage attribution wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub fn is_no_consensus(&self) -> bool {
        matches!(self.root(), Error::NoConsensus { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
