//! Grade probabilities from a logprob-capable completion endpoint.

pub mod batch;
pub mod client;
pub mod extract;
pub mod prompt;

pub use batch::{batch_annotate, BatchFailure, BatchOptions, BatchReport, Fallback, Texts};
pub use client::{
    complete_with_retry, fetch_grade_probs, parse_completion, ClientError, CompletionClient, DecodingConfig,
    OpenAiClient, RetryPolicy,
};
pub use extract::{extract_grade_probs, grade_position, Completion, GradeTokens, TokenPosition};
pub use lara_core::grades::normalize_probabilities;
pub use prompt::{grade_list, PromptTemplate};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("template placeholder {{{0}}} cannot be resolved")]
    MissingField(String),
    #[error("endpoint unreachable after retries: {0}")]
    EndpointUnreachable(String),
    #[error("no grade token among the returned candidates")]
    NoGradeTokenFound,
    #[error("bad endpoint response: {0}")]
    BadResponse(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
