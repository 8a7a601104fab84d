//! Toolkit for studying and steering the self-correction behavior of
//! reasoning language models.
//!
//! The pipeline: inject arithmetic errors into chains-of-thought, classify
//! how runs recover (think/answer quadrants), pool answer-token activations
//! into contrastive pairs, train linear probes, extract a difference-in-means
//! steering vector, read it through the logit lens, steer generation with it,
//! and evaluate error detection and budget-forced test-time scaling.

pub mod backend;
pub mod client;
pub mod config;
pub mod critique;
pub mod harness;
pub mod activations;
pub mod intervention;
pub mod outcome;
pub mod persist;
pub mod pipeline;
pub mod plot;
pub mod probe;

pub use backend::{
    generate, generate_with_capture, generate_with_steering, BackendError, GenerationConfig,
    MarkerKind, ModelBackend, PositionScope, ReasoningRun, ResidualCapture, Script,
    ScriptedBackend, SteeringSpec, TokenSequence, ToyBackend, ToyConfig,
};
