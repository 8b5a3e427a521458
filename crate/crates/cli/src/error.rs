use std::fmt;

use xlssl_core::audio::AudioError;
use xlssl_core::corpus::CorpusError;
use xlssl_core::evaluation::EvalError;
use xlssl_core::experiments::ExperimentError;
use xlssl_core::features::FeatureError;
use xlssl_core::model::ModelError;
use xlssl_core::ssl::SslError;
use xlssl_core::trainer::TrainError;

/// Failure class, mapped one-to-one onto the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Validation => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub msg: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self { kind: Kind::Validation, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { kind: Kind::Data, msg: msg.into() }
    }

    /// Prefixes the message with where the error happened.
    pub fn context(mut self, ctx: impl fmt::Display) -> Self {
        self.msg = format!("{ctx}: {}", self.msg);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn with_kind(kind: Kind, e: impl fmt::Display) -> CliError {
    CliError { kind, msg: e.to_string() }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match e {
            CorpusError::InvalidRatios(_) => Kind::Validation,
            _ => Kind::Data,
        };
        with_kind(kind, e)
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        with_kind(Kind::Data, e)
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        let kind = match e {
            FeatureError::AboveNyquist { .. } | FeatureError::InvalidRange { .. } => Kind::Validation,
            _ => Kind::Data,
        };
        with_kind(kind, e)
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::NonFinite(_) => Kind::Numeric,
        ModelError::InvalidArch(_) => Kind::Validation,
        _ => Kind::Data,
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        with_kind(model_kind(&e), e)
    }
}

fn eval_kind(e: &EvalError) -> Kind {
    match e {
        EvalError::InvalidSpec(_) => Kind::Validation,
        EvalError::Model(m) => model_kind(m),
        _ => Kind::Data,
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        with_kind(eval_kind(&e), e)
    }
}

fn train_kind(e: &TrainError) -> Kind {
    match e {
        TrainError::InvalidConfig(_) => Kind::Validation,
        TrainError::Ssl(SslError::InvalidConfig(_)) => Kind::Validation,
        TrainError::NonFinite { .. } => Kind::Numeric,
        TrainError::Model(m) | TrainError::Ssl(SslError::Model(m)) => model_kind(m),
        TrainError::Eval(ev) => eval_kind(ev),
        _ => Kind::Data,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        with_kind(train_kind(&e), e)
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        let kind = match &e {
            ExperimentError::InvalidPlan(_) => Kind::Validation,
            ExperimentError::Train(t) => train_kind(t),
            ExperimentError::Eval(ev) => eval_kind(ev),
            ExperimentError::Corpus(CorpusError::InvalidRatios(_)) => Kind::Validation,
            _ => Kind::Data,
        };
        with_kind(kind, e)
    }
}
