use alloc::string::String;

/// Errors produced by the core computations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("support size {size} exceeds the limit of {limit}")]
    Size { size: usize, limit: usize },

    #[error("insufficient samples: {0}")]
    SampleSize(String),

    #[error("need at least 2 classes, got {0}")]
    ClassCount(usize),

    #[error("label error: {0}")]
    Label(String),

    #[error("schema violation in `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error("degenerate normalizer: {0}")]
    DegenerateNormalizer(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("transport solver exceeded {0} pivots")]
    SolverStalled(usize),
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Stable name of the error variant, used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "DimensionError",
            Error::Data(_) => "DataError",
            Error::Size { .. } => "SizeError",
            Error::SampleSize(_) => "SampleSizeError",
            Error::ClassCount(_) => "ClassCountError",
            Error::Label(_) => "LabelError",
            Error::Schema { .. } => "SchemaError",
            Error::DegenerateNormalizer(_) => "DegenerateNormalizerError",
            Error::Domain(_) => "DomainError",
            Error::Geometry(_) => "GeometryError",
            Error::InsufficientData(_) => "InsufficientDataError",
            Error::SolverStalled(_) => "SolverStalled",
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
