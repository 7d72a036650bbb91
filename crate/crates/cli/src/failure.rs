use mvboot::config::ConfigError;
use mvboot::io::IoError;
use mvboot::metrics::MetricsError;
use mvboot::pipeline::PipelineError;
use mvboot::planning::PlanningError;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_INVARIANT: u8 = 3;
pub const EXIT_NO_CONSENSUS: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn parse(message: impl Into<String>) -> Self {
        Self { code: EXIT_PARSE, message: message.into() }
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Self { code: EXIT_INVARIANT, message: message.into() }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self { code: EXIT_OTHER, message: message.into() }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let code = match e {
            IoError::Parse { .. } => EXIT_PARSE,
            IoError::Invariant { .. } => EXIT_INVARIANT,
            IoError::Io(_) => EXIT_OTHER,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Parse { .. } => EXIT_PARSE,
            ConfigError::Invalid(_) | ConfigError::MissingFile(_) => EXIT_INVARIANT,
            ConfigError::Io(_) => EXIT_OTHER,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self::invariant(e.to_string())
    }
}

impl From<PlanningError> for Failure {
    fn from(e: PlanningError) -> Self {
        Self::parse(e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Self::invariant(e.to_string())
    }
}

impl From<mvboot::triangulation::TriangulationError> for Failure {
    fn from(e: mvboot::triangulation::TriangulationError) -> Self {
        Self::invariant(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}
