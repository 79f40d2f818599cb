use std::path::PathBuf;

use cnna_core::dse::DseError;
use cnna_core::fxp::FxpError;
use cnna_core::model::ModelError;
use cnna_core::qtrain::TrainError;
use cnna_core::scheduler::ScheduleError;

use crate::formats::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Dse(#[from] DseError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0} mismatching words against the reference")]
    OracleMismatch(usize),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad input, 3 when the simulator broke an internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schedule(ScheduleError::Fault { .. }) | Error::OracleMismatch(_) => 3,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Format { .. } => "format",
            Error::Model(_) => "model",
            Error::Fxp(_) => "fixed-point",
            Error::Schedule(ScheduleError::Fault { .. }) => "simulator-fault",
            Error::Schedule(_) => "schedule",
            Error::Dse(_) => "dse",
            Error::Train(_) => "train",
            Error::Csv(_) => "csv",
            Error::Usage(_) => "usage",
            Error::OracleMismatch(_) => "oracle-mismatch",
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
