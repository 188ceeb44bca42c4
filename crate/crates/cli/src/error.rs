//! Failure categories and their exit codes.

use std::fmt;
use std::io;

use drivectx::annotation::AnnotateError;
use drivectx::dataset::DatasetError;
use drivectx::evaluation::EvalError;
use drivectx::protocol::BackendError;
use drivectx::query::{QueryError, RecognizeError};
use drivectx::realtime::RunError;
use drivectx::taxonomy::TaxonomyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Backend,
    Data,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Config => 3,
            Category::Backend => 4,
            Category::Data => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Backend => "backend",
            Category::Data => "data",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
    /// Extra machine-readable context, e.g. the unknown-question report.
    pub detail: Option<serde_json::Value>,
}

impl CliError {
    pub fn new(category: Category, message: impl fmt::Display) -> Self {
        CliError { category, message: message.to_string(), detail: None }
    }

    pub fn usage(message: impl fmt::Display) -> Self {
        Self::new(Category::Usage, message)
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn backend(message: impl fmt::Display) -> Self {
        Self::new(Category::Backend, message)
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self::new(Category::Data, message)
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = Some(detail);
        self
    }

    /// The single JSON line printed to stderr on failure.
    pub fn to_json_line(&self) -> String {
        let mut v = serde_json::json!({
            "error": self.category.as_str(),
            "exit_code": self.category.exit_code(),
            "message": self.message,
        });
        if let Some(detail) = &self.detail {
            v["detail"] = detail.clone();
        }
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category.as_str(), self.message)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::MissingGroundTruth(_) => CliError::data(e),
            _ => CliError::backend(e),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let detail = match &e {
            DatasetError::UnknownQuestions(report) => serde_json::to_value(report).ok(),
            _ => None,
        };
        let err = CliError::data(&e);
        match detail {
            Some(d) => err.with_detail(d),
            None => err,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::data(e)
    }
}

impl From<TaxonomyError> for CliError {
    fn from(e: TaxonomyError) -> Self {
        match e {
            TaxonomyError::UnknownKind(_) => CliError::usage(e),
            _ => CliError::config(e),
        }
    }
}

impl From<QueryError> for CliError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::JointUnsupported(_) | QueryError::TooManyQuestions { .. } => CliError::backend(e),
            _ => CliError::usage(e),
        }
    }
}

impl From<RecognizeError> for CliError {
    fn from(e: RecognizeError) -> Self {
        match e {
            RecognizeError::Query(q) => q.into(),
            RecognizeError::Backend { .. } => CliError::backend(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Query(q) => q.into(),
            EvalError::NoRepetitions => CliError::usage(e),
            EvalError::EmptyCounts | EvalError::NothingToBenchmark => CliError::data(e),
        }
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::InvalidThreshold(_) | AnnotateError::InvalidRate(_) | AnnotateError::NoBackends => {
                CliError::usage(e)
            }
            AnnotateError::AllBackendsFailed(_) => CliError::backend(e),
            AnnotateError::EmptyRecords => CliError::data(e),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) => CliError::config(e),
            RunError::Sink(_) => CliError::data(e),
            RunError::BudgetLaw { .. } => CliError::config(e),
            RunError::Query(q) => q.into(),
        }
    }
}
