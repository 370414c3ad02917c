use std::fmt;

use thiserror::Error;

/// Errors produced by the estimation library.
///
/// Each variant carries the module that raised it so the CLI can prefix
/// messages with their origin.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{module}: i/o error: {source}")]
    Io {
        module: Module,
        #[source]
        source: std::io::Error,
    },

    #[error("{module}: parse error at row {row}: {message}")]
    Parse {
        module: Module,
        row: usize,
        message: String,
    },

    #[error("panel_data: unbalanced panel, missing (unit, period) pairs: {}", format_pairs(.missing))]
    Unbalanced { missing: Vec<(String, String)> },

    #[error("{module}: domain error: {message}")]
    Domain { module: Module, message: String },

    #[error("{module}: shape mismatch: {message}")]
    Shape { module: Module, message: String },

    #[error("{module}: numeric error: {message}")]
    Numeric { module: Module, message: String },

    #[error("nuclear_solver: no observations at treatment level {0}")]
    EmptyMask(i64),

    #[error("estimators: conditioning set empty for treatment level {0}")]
    EmptyConditioningSet(i64),

    #[error("estimators: distribution pipeline failed at y = {y}: {source}")]
    Pipeline {
        y: f64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Module of origin, used as the message prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    PanelData,
    NuclearSolver,
    FactorModel,
    Matching,
    Estimators,
    Simulation,
    Cli,
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Module::PanelData => "panel_data",
            Module::NuclearSolver => "nuclear_solver",
            Module::FactorModel => "factor_model",
            Module::Matching => "matching",
            Module::Estimators => "estimators",
            Module::Simulation => "simulation",
            Module::Cli => "cli",
        };
        f.write_str(name)
    }
}

impl Error {
    pub(crate) fn domain(module: Module, message: impl Into<String>) -> Self {
        Error::Domain {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn shape(module: Module, message: impl Into<String>) -> Self {
        Error::Shape {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn numeric(module: Module, message: impl Into<String>) -> Self {
        Error::Numeric {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn io(module: Module, source: std::io::Error) -> Self {
        Error::Io { module, source }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Parse { .. } => 4,
            Error::Unbalanced { .. } => 5,
            Error::Domain { .. } | Error::EmptyMask(_) | Error::EmptyConditioningSet(_) => 6,
            Error::Shape { .. } => 7,
            Error::Numeric { .. } => 8,
            Error::Pipeline { source, .. } => source.exit_code(),
        }
    }
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(u, p)| format!("({u}, {p})"))
        .collect::<Vec<_>>()
        .join(", ")
}
