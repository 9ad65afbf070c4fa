//! Error taxonomy mapped to process exit codes.
//!
//! Configuration problems exit with 2, missing or malformed data with 3,
//! and numeric failures inside the algorithms with 4.

use concept_probe::cav::CavError;
use concept_probe::concepts::ConceptError;
use concept_probe::factorization::FactorError;
use concept_probe::midi::MidiError;
use concept_probe::model::ModelError;
use concept_probe::prt::PrtError;
use concept_probe::render::RenderError;
use concept_probe::stats::StatsError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MidiError> for CliError {
    fn from(e: MidiError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PrtError> for CliError {
    fn from(e: PrtError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(_) => CliError::Config(e.to_string()),
            ModelError::Io(_)
            | ModelError::Tensor(_)
            | ModelError::Manifest(_)
            | ModelError::CheckpointShape { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<CavError> for CliError {
    fn from(e: CavError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<FactorError> for CliError {
    fn from(e: FactorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ConceptError> for CliError {
    fn from(e: ConceptError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::BadThreshold { .. } | RenderError::BadScale => {
                CliError::Config(e.to_string())
            }
            RenderError::HeatmapDims { .. } | RenderError::Png(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}
