use thiserror::Error;

pub type Result<T, E = GdaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Class,
    Domain,
}

impl std::fmt::Display for LabelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelKind::Class => "class",
            LabelKind::Domain => "domain",
        })
    }
}

#[derive(Debug, Error)]
pub enum GdaError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{kind} label of sample {index} is hidden")]
    HiddenLabel { index: usize, kind: LabelKind },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("grid {grid} exceeds image size {height}x{width}")]
    GridTooLarge {
        grid: usize,
        height: usize,
        width: usize,
    },

    #[error("scenario parse error at position {position}: {message}")]
    ScenarioParse { position: usize, message: String },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<GdaError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl GdaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GdaError::InvalidArgument(msg.into())
    }

    /// Wrap an error with the pipeline stage it came from.
    pub fn at(self, stage: &'static str) -> Self {
        match self {
            e @ GdaError::Stage { .. } => e,
            e => GdaError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

/// Tag the error side of a result with a pipeline stage.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<GdaError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.into().at(stage))
    }
}
