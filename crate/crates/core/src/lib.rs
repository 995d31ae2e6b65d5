//! Relevance assessment with LLM grade distributions and a budget of human
//! judgments: data formats, calibration, selection strategies, evaluation
//! metrics, simulation and the experiment engine.

pub mod calibration;
pub mod collection;
pub mod engine;
pub mod grades;
pub mod metrics;
pub mod simulation;
pub mod strategies;
pub mod trec_io;

pub use collection::{Collection, CollectionError, PairId};
pub use grades::{Grade, GradeError, GradeVector};
