use std::fmt;
use std::path::PathBuf;

/// Pipeline stage, used to label errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Decode,
    ColorTransfer,
    LayerSeparation,
    Tracking,
    Render,
    Flow,
    Hdr,
    Encode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Decode => "decode",
            Stage::ColorTransfer => "color transfer",
            Stage::LayerSeparation => "layer separation",
            Stage::Tracking => "tracking",
            Stage::Render => "render",
            Stage::Flow => "optical flow",
            Stage::Hdr => "hdr merge",
            Stage::Encode => "encode",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {}: {message}", path.display())]
    Io { path: PathBuf, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: motionfx_core::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, err: impl fmt::Display) -> Self {
        CliError::Io { path: path.into(), message: err.to_string() }
    }

    /// 2 for configuration and contract problems, 3 for I/O, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use motionfx_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Stage { source, .. } => match source {
                E::Io { .. } | E::Decode { .. } => 3,
                E::Numerical { .. } | E::InsufficientData(_) => 4,
                E::Contract(_) | E::Dimension(_) | E::Spec(_) => 2,
            },
        }
    }
}

/// Attaches a stage label to core errors.
pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, CliError>;
}

impl<T> AtStage<T> for motionfx_core::Result<T> {
    fn at(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
