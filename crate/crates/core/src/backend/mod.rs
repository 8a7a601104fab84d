//! Model backend abstraction: tokenization, structured generation with a
//! think phase, residual-stream capture, and steering injection.
//!
//! Two backends ship with the crate:
//! - [`ToyBackend`]: a small seeded transformer whose forward pass is exact
//!   and CPU-cheap, used as ground truth for every mechanism.
//! - [`ScriptedBackend`]: emits pre-authored continuations while computing
//!   activations with a toy model underneath, used for end-to-end fixtures.
//!
//! Real models plug in by implementing [`ModelBackend`]: tokenize/detokenize,
//! a stepwise forward with layer-tap read (capture) and layer-tap write
//! (steering), and unembedding export.

mod generate;
mod scripted;
mod toy;

pub use generate::{generate, generate_full, generate_with_capture, generate_with_steering};
pub(crate) use generate::{assemble_run, forced_context, sample_token};
pub use scripted::{Script, ScriptedBackend};
pub use toy::{ToyAlphabet, ToyBackend, ToyConfig, ToyWeights, UnembeddingKind};

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vocabulary index of a single token.
pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt of {len} tokens exceeds context window of {window}")]
    ContextOverflow { len: usize, window: usize },
    #[error("layer index {layer} out of range for backend with {depth} layers")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("steering vector has dimension {got}, backend hidden size is {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("prompt must not contain think markers (found {0:?} at position {1})")]
    MarkerInPrompt(MarkerKind, usize),
    #[error("backend failure: {0}")]
    Internal(String),
}

/// Structural marker tokens recognized by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkerKind {
    ThinkStart,
    ThinkEnd,
    EndOfSequence,
    Wait,
}

/// Positions of the structural markers inside a token sequence.
///
/// At most one think-start and one think-end may be present; when both are,
/// the think-start precedes the think-end.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialMarks {
    pub think_start: Option<usize>,
    pub think_end: Option<usize>,
    pub end_of_sequence: Option<usize>,
}

/// A tokenized piece of text together with its marker positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub text: String,
    pub marks: SpecialMarks,
}

impl TokenSequence {
    /// Tokenize `text` with the backend and record marker positions.
    pub fn from_text(backend: &dyn ModelBackend, text: &str) -> Result<Self, BackendError> {
        let ids = backend.tokenize(text)?;
        Ok(Self::from_ids(backend, ids))
    }

    /// Wrap raw ids, decoding them and scanning for markers.
    pub fn from_ids(backend: &dyn ModelBackend, ids: Vec<TokenId>) -> Self {
        let text = backend.detokenize(&ids).unwrap_or_default();
        let marks = scan_marks(backend, &ids);
        Self { ids, text, marks }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Locate marker tokens in `ids`. First occurrence wins for each kind.
pub fn scan_marks(backend: &dyn ModelBackend, ids: &[TokenId]) -> SpecialMarks {
    let mut marks = SpecialMarks::default();
    for (i, &id) in ids.iter().enumerate() {
        if Some(id) == backend.marker(MarkerKind::ThinkStart) && marks.think_start.is_none() {
            marks.think_start = Some(i);
        } else if Some(id) == backend.marker(MarkerKind::ThinkEnd) && marks.think_end.is_none() {
            marks.think_end = Some(i);
        } else if Some(id) == backend.marker(MarkerKind::EndOfSequence)
            && marks.end_of_sequence.is_none()
        {
            marks.end_of_sequence = Some(i);
        }
    }
    marks
}

/// Decoding settings. `temperature == 0` selects argmax at every step, so a
/// given (config, prompt, backend) triple always produces the same tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Markers that end generation when emitted. End-of-sequence always stops.
    pub stop_conditions: Vec<MarkerKind>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens: 128,
            seed: 0,
            stop_conditions: vec![MarkerKind::EndOfSequence],
        }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::Internal(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::Internal(
                "max_new_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Post-MLP residual-stream vectors for one layer over a range of positions.
///
/// `vectors[i]` is the hidden state at token index `positions.start + i`,
/// taken immediately after the MLP sublayer of `layer`, before the next layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCapture {
    pub layer: usize,
    pub positions: Range<usize>,
    pub vectors: Vec<Vec<f64>>,
}

impl ResidualCapture {
    /// Hidden vector at absolute token index `pos`, if covered.
    pub fn at_position(&self, pos: usize) -> Option<&[f64]> {
        if self.positions.contains(&pos) {
            self.vectors.get(pos - self.positions.start).map(Vec::as_slice)
        } else {
            None
        }
    }
}

/// Which positions a steering write applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScope {
    /// Prompt and generated positions alike (default).
    #[default]
    AllPositions,
    /// Only positions produced after the forced context.
    GeneratedOnly,
}

/// Additive residual-stream intervention: at `layer`, every in-scope
/// position's post-MLP residual becomes `h + alpha * vector` before it
/// propagates to the next layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub alpha: f64,
    pub position_scope: PositionScope,
}

impl SteeringSpec {
    pub fn new(layer: usize, vector: Vec<f64>, alpha: f64) -> Self {
        Self {
            layer,
            vector,
            alpha,
            position_scope: PositionScope::default(),
        }
    }

    pub fn validate(&self, backend: &dyn ModelBackend) -> Result<(), BackendError> {
        if self.vector.len() != backend.hidden_size() {
            return Err(BackendError::DimensionMismatch {
                got: self.vector.len(),
                expected: backend.hidden_size(),
            });
        }
        if self.layer >= backend.num_layers() {
            return Err(BackendError::LayerOutOfRange {
                layer: self.layer,
                depth: backend.num_layers(),
            });
        }
        Ok(())
    }

    /// Compact summary for records and reports.
    pub fn summary(&self) -> SteeringSummary {
        SteeringSummary {
            layer: self.layer,
            alpha: self.alpha,
            position_scope: self.position_scope,
        }
    }
}

/// Steering parameters without the vector payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub layer: usize,
    pub alpha: f64,
    pub position_scope: PositionScope,
}

/// One generation split into prompt, think, and answer spans.
///
/// Layout of `tokens.ids`:
/// `prompt ++ [think-start] ++ prefill ++ generated...`
/// The think span covers everything between think-start and think-end
/// (prefill included); the answer span is everything after think-end,
/// excluding a trailing end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningRun {
    pub tokens: TokenSequence,
    /// Tokens before the think-start marker.
    pub prompt_len: usize,
    /// Prompt + think-start + prefill; generation starts here.
    pub forced_len: usize,
    pub think_span: Range<usize>,
    pub answer_span: Range<usize>,
    /// True when the budget ran out before a think-end was emitted.
    pub unterminated: bool,
}

impl ReasoningRun {
    pub fn think_ids(&self) -> &[TokenId] {
        &self.tokens.ids[self.think_span.clone()]
    }

    pub fn answer_ids(&self) -> &[TokenId] {
        &self.tokens.ids[self.answer_span.clone()]
    }

    /// Token indices produced by sampling (everything past the forced context).
    pub fn generated_span(&self) -> Range<usize> {
        self.forced_len..self.tokens.ids.len()
    }
}

/// Read/write taps for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct TapRequest<'a> {
    /// Layers whose post-MLP residuals should be captured at every position.
    pub capture_layers: &'a [usize],
    /// Optional steering write.
    pub steering: Option<&'a SteeringSpec>,
    /// Index of the first position past the forced context. Used to resolve
    /// [`PositionScope::GeneratedOnly`] and, by scripted backends, to locate
    /// the current emission step.
    pub gen_start: usize,
}

/// Result of one forward pass over a full sequence.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Next-token logits at the final position, length = vocab size.
    pub next_logits: Vec<f64>,
    /// Per requested layer: post-MLP residuals at every position.
    pub captures: BTreeMap<usize, Vec<Vec<f64>>>,
}

/// Final-projection matrix, hidden size x vocabulary, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingMatrix {
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub data: Vec<f64>,
}

impl UnembeddingMatrix {
    pub fn entry(&self, dim: usize, token: usize) -> f64 {
        self.data[dim * self.vocab_size + token]
    }

    /// The d-dimensional direction associated with `token`.
    pub fn token_direction(&self, token: TokenId) -> Vec<f64> {
        (0..self.hidden_size)
            .map(|j| self.entry(j, token as usize))
            .collect()
    }

    /// Project a hidden vector into vocabulary logits.
    pub fn project(&self, hidden: &[f64]) -> Vec<f64> {
        assert_eq!(hidden.len(), self.hidden_size, "projection dim mismatch");
        let mut logits = vec![0.0; self.vocab_size];
        for (j, &h) in hidden.iter().enumerate() {
            let row = &self.data[j * self.vocab_size..(j + 1) * self.vocab_size];
            for (t, &w) in row.iter().enumerate() {
                logits[t] += h * w;
            }
        }
        logits
    }
}

/// Uniform interface to a causal LM with think-phase structure.
///
/// A backend handle serves one generation at a time; concurrent experiments
/// use independent handles. Capture and steering state is per-call.
pub trait ModelBackend: Send + Sync {
    /// Stable identity string (kind, shape, weight seed) for manifests.
    fn id(&self) -> String;
    fn hidden_size(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn context_window(&self) -> usize;
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;
    fn detokenize(&self, ids: &[TokenId]) -> Result<String, BackendError>;
    fn marker(&self, kind: MarkerKind) -> Option<TokenId>;
    /// One forward pass over `ids` with the requested taps applied.
    fn forward(&self, ids: &[TokenId], taps: &TapRequest) -> Result<ForwardOutput, BackendError>;
    fn unembedding_matrix(&self) -> Result<UnembeddingMatrix, BackendError>;
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, -3.0, 0.5]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
    }

    #[test]
    fn unembedding_project_matches_entry_sum() {
        let m = UnembeddingMatrix {
            hidden_size: 2,
            vocab_size: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let logits = m.project(&[1.0, -1.0]);
        assert_eq!(logits, vec![1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
        assert_eq!(m.token_direction(1), vec![2.0, 5.0]);
    }
}
