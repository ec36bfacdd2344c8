use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or arguments. The CLI maps this to exit code 2.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: missing mandatory column `{0}`")]
    MissingColumn(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate polygon `{geoid}` (zero area)")]
    DegeneratePolygon { geoid: String },

    #[error("invalid polygon `{geoid}`: {reason}")]
    InvalidPolygon { geoid: String, reason: String },

    #[error("duplicate geoid `{0}`")]
    DuplicateGeoid(String),

    #[error("latitude {0} outside the projectable range |lat| < 84")]
    LatitudeOutOfRange(f64),

    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("pixel value {value} at ({row}, {col}) does not fit in 16 bits")]
    CountOverflow { row: usize, col: usize, value: u32 },

    #[error("image error: {0}")]
    Image(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("lag {lag} reaches before the start of the series for target hour {target}")]
    LagOutOfRange { lag: usize, target: usize },

    #[error("singular normal matrix; use a ridge penalty lambda > 0")]
    SingularSystem,

    #[error("degenerate: identical configurations (every paired difference is zero)")]
    AllZeroDifferences,

    #[error("p-value {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("model/input mismatch: {0}")]
    ModelMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
