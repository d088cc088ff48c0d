use thiserror::Error;

use crate::assembly::AssemblyError;
use crate::config::ConfigError;
use crate::decision::DecisionError;
use crate::ledger::LedgerError;
use crate::market_data::DataError;
use crate::portfolio::PortfolioError;
use crate::report::ReportError;
use crate::sde::SdeError;
use crate::wavelet::WaveletError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error, one variant per module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Missing files, unreadable or malformed input data.
    Data,
    /// Out-of-range configuration or inputs the numerics reject.
    Validation,
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Data(DataError::InvalidParameter(_)) => ErrorClass::Validation,
            Error::Io { .. } | Error::Data(_) | Error::Report(_) => ErrorClass::Data,
            Error::Config(ConfigError::Io { .. }) => ErrorClass::Data,
            _ => ErrorClass::Validation,
        }
    }
}
