//! Report models: the completion interface, scripted mock models, and an
//! HTTP client for a real endpoint.

mod http;
mod mock;

pub use http::HttpModel;
pub use mock::{
    default_vocab, parse_mock_spec, BehaviorStepper, MockBehavior, MockModel, RandomStepper,
    REFUSAL_TEXT,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ReportRecord;
use crate::prompting::TemplateVariant;

/// One completion call. The sampling temperature is fixed at zero and cannot
/// be changed: extraction must be deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    temperature: f64,
    pub max_tokens: usize,
    pub stop: Option<Vec<String>>,
}

impl CompletionRequest {
    pub const DEFAULT_MAX_TOKENS: usize = 512;

    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            stop: None,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Failures while obtaining a completion.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    /// The endpoint could not be reached after all retries.
    #[error("transport failure for report '{report_id}': {message}")]
    Transport { report_id: String, message: String },
    /// The endpoint answered with a non-success HTTP status.
    #[error("endpoint returned HTTP {status}: {detail}")]
    Protocol { status: u16, detail: String },
    /// The endpoint answered 2xx but not with the expected JSON shape.
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
}

/// Anything that can turn a report into raw output text.
pub trait ReportModel: Send + Sync {
    /// Short human-readable identifier for manifests and logs.
    fn name(&self) -> String;

    /// Produces the raw completion for one report.
    fn complete(
        &self,
        report: &ReportRecord,
        request: &CompletionRequest,
        variant: TemplateVariant,
    ) -> Result<String, ModelError>;
}

/// Failure inside a token stepper.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("stepper failure: {0}")]
pub struct StepperError(pub String);

/// Token-level interface used by grammar-constrained decoding. The stepper
/// owns a fixed vocabulary; `step` yields the probability distribution over
/// that vocabulary for the next token, and `append` commits a chosen token.
/// Fast-forwarded tokens are committed via `append` without a `step` call.
pub trait TokenStepper {
    fn vocab(&self) -> &[String];

    /// Distribution over the vocabulary for the next position. Must be
    /// deterministic given the appended history, length-matched to the
    /// vocabulary, non-negative, and sum to one within 1e-9.
    fn step(&mut self) -> Result<Vec<f64>, StepperError>;

    /// Commits `token_id` as the next token of the output.
    fn append(&mut self, token_id: usize) -> Result<(), StepperError>;
}
