//! Evaluation harness for world-model rollouts: clip ingestion, QA dataset
//! construction, data-mixture planning, prompt layout, an evaluator bridge
//! with a deterministic mock, scoring, and human-study statistics.

pub mod annotation;
pub mod bridge;
pub mod describe;
pub mod ingest;
pub mod metrics;
pub mod prompt;
pub mod qa;
pub mod sampler;
pub mod synthetic;
pub mod task;
pub mod util;

pub use task::{QaFormat, Task};
