use thiserror::Error;

/// Top-level error wrapping every module's error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Glm(#[from] crate::glm::GlmError),
    #[error(transparent)]
    Bayes(#[from] crate::bayes::BayesError),
    #[error(transparent)]
    Mrp(#[from] crate::mrp::MrpError),
    #[error(transparent)]
    Culture(#[from] crate::culture::CultureError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Matching(#[from] crate::matching::MatchingError),
    #[error(transparent)]
    Evaluate(#[from] crate::evaluate::EvaluateError),
}

pub type Result<T> = std::result::Result<T, Error>;
