//! Generation loop shared by all backends: builds the forced context
//! (prompt + think-start + optional prefill), samples until a stop marker or
//! the token budget, and assembles the span structure of a [`ReasoningRun`].

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    scan_marks, softmax, BackendError, GenerationConfig, MarkerKind, ModelBackend, ReasoningRun,
    ResidualCapture, SteeringSpec, TapRequest, TokenId, TokenSequence,
};

/// Sample one token from `logits`. Zero temperature is argmax with ties
/// broken toward the lowest index; otherwise softmax at `1/temperature`
/// inverse scale, walked by a single uniform draw.
pub(crate) fn sample_token(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    if temperature == 0.0 {
        return super::argmax(logits) as TokenId;
    }
    let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    let probs = softmax(&scaled);
    let draw: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i as TokenId;
        }
    }
    (probs.len() - 1) as TokenId
}

fn require_marker(backend: &dyn ModelBackend, kind: MarkerKind) -> Result<TokenId, BackendError> {
    backend
        .marker(kind)
        .ok_or(BackendError::Unsupported("think markers"))
}

/// Build the forced context `prompt ++ [think-start] ++ prefill` and check
/// the capacity and marker preconditions.
pub(crate) fn forced_context(
    backend: &dyn ModelBackend,
    prompt: &TokenSequence,
    prefill: Option<&TokenSequence>,
) -> Result<(Vec<TokenId>, usize), BackendError> {
    if prompt.is_empty() {
        return Err(BackendError::EmptyPrompt);
    }
    let think_start = require_marker(backend, MarkerKind::ThinkStart)?;
    let think_end = require_marker(backend, MarkerKind::ThinkEnd)?;
    for (i, &id) in prompt.ids.iter().enumerate() {
        if id == think_start {
            return Err(BackendError::MarkerInPrompt(MarkerKind::ThinkStart, i));
        }
        if id == think_end {
            return Err(BackendError::MarkerInPrompt(MarkerKind::ThinkEnd, i));
        }
    }
    if let Some(pre) = prefill {
        for (i, &id) in pre.ids.iter().enumerate() {
            if id == think_start {
                return Err(BackendError::MarkerInPrompt(MarkerKind::ThinkStart, i));
            }
            if id == think_end {
                return Err(BackendError::MarkerInPrompt(MarkerKind::ThinkEnd, i));
            }
        }
    }

    let mut ids = prompt.ids.clone();
    ids.push(think_start);
    if let Some(pre) = prefill {
        ids.extend_from_slice(&pre.ids);
    }
    if ids.len() >= backend.context_window() {
        return Err(BackendError::ContextOverflow {
            len: ids.len(),
            window: backend.context_window(),
        });
    }
    Ok((ids, prompt.ids.len()))
}

/// Assemble span structure from a finished token sequence.
pub(crate) fn assemble_run(
    backend: &dyn ModelBackend,
    ids: Vec<TokenId>,
    prompt_len: usize,
    forced_len: usize,
) -> ReasoningRun {
    let marks = scan_marks(backend, &ids);
    let think_start_pos = marks.think_start.unwrap_or(prompt_len);
    let end = ids.len();
    let (think_span, answer_span, unterminated) = match marks.think_end {
        Some(te) => {
            let answer_end = match marks.end_of_sequence {
                Some(e) if e >= te => e,
                _ => end,
            };
            (think_start_pos + 1..te, te + 1..answer_end, false)
        }
        None => (think_start_pos + 1..end, end..end, true),
    };
    let text = backend.detokenize(&ids).unwrap_or_default();
    ReasoningRun {
        tokens: TokenSequence { ids, text, marks },
        prompt_len,
        forced_len,
        think_span,
        answer_span,
        unterminated,
    }
}

/// Full-control generation: optional prefill, optional steering, optional
/// residual capture. The public `generate*` entry points delegate here.
pub fn generate_full(
    backend: &dyn ModelBackend,
    prompt: &TokenSequence,
    config: &GenerationConfig,
    prefill: Option<&TokenSequence>,
    steering: Option<&SteeringSpec>,
    capture_layers: &[usize],
) -> Result<(ReasoningRun, Vec<ResidualCapture>), BackendError> {
    config.validate()?;
    if let Some(spec) = steering {
        spec.validate(backend)?;
    }
    for &layer in capture_layers {
        if layer >= backend.num_layers() {
            return Err(BackendError::LayerOutOfRange {
                layer,
                depth: backend.num_layers(),
            });
        }
    }

    let (mut ids, prompt_len) = forced_context(backend, prompt, prefill)?;
    let forced_len = ids.len();
    let think_start = require_marker(backend, MarkerKind::ThinkStart)?;
    let think_end = require_marker(backend, MarkerKind::ThinkEnd)?;
    let eos = backend.marker(MarkerKind::EndOfSequence);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let no_capture: [usize; 0] = [];
    let mut seen_think_end = false;

    for _ in 0..config.max_new_tokens {
        if ids.len() >= backend.context_window() {
            break;
        }
        let taps = TapRequest {
            capture_layers: &no_capture,
            steering,
            gen_start: forced_len,
        };
        let out = backend.forward(&ids, &taps)?;
        let token = sample_token(&out.next_logits, config.temperature, &mut rng);

        if Some(token) == eos {
            ids.push(token);
            break;
        }
        // A repeated think marker would corrupt the span structure; treat it
        // as end of generation instead of appending it.
        if token == think_start || (token == think_end && seen_think_end) {
            break;
        }
        if token == think_end {
            seen_think_end = true;
            ids.push(token);
            if config.stop_conditions.contains(&MarkerKind::ThinkEnd) {
                break;
            }
            continue;
        }
        ids.push(token);
    }

    let captures = if capture_layers.is_empty() {
        Vec::new()
    } else {
        capture_pass(backend, &ids, steering, capture_layers, forced_len)?
    };

    Ok((
        assemble_run(backend, ids, prompt_len, forced_len),
        captures,
    ))
}

/// One forward pass over the finished sequence, slicing out the generated
/// region of each requested layer. With causal attention the activation at a
/// position is independent of later tokens, so this equals stepwise capture.
pub(crate) fn capture_pass(
    backend: &dyn ModelBackend,
    ids: &[TokenId],
    steering: Option<&SteeringSpec>,
    capture_layers: &[usize],
    gen_start: usize,
) -> Result<Vec<ResidualCapture>, BackendError> {
    let taps = TapRequest {
        capture_layers,
        steering,
        gen_start,
    };
    let out = backend.forward(ids, &taps)?;
    let mut captures = Vec::with_capacity(capture_layers.len());
    for (&layer, vectors) in out.captures.iter() {
        let sliced: Vec<Vec<f64>> = vectors[gen_start..].to_vec();
        captures.push(ResidualCapture {
            layer,
            positions: gen_start..ids.len(),
            vectors: sliced,
        });
    }
    Ok(captures)
}

/// Generate a reasoning run. If `prefill` is given it is inserted directly
/// after the think-start marker before any sampling.
pub fn generate(
    backend: &dyn ModelBackend,
    prompt: &TokenSequence,
    config: &GenerationConfig,
    prefill: Option<&TokenSequence>,
) -> Result<ReasoningRun, BackendError> {
    generate_full(backend, prompt, config, prefill, None, &[]).map(|(run, _)| run)
}

/// Generate while capturing post-MLP residuals at the requested layers for
/// every generated position. Requesting captures never alters the tokens.
pub fn generate_with_capture(
    backend: &dyn ModelBackend,
    prompt: &TokenSequence,
    config: &GenerationConfig,
    layers: &[usize],
) -> Result<(ReasoningRun, Vec<ResidualCapture>), BackendError> {
    generate_full(backend, prompt, config, None, None, layers)
}

/// Generate under a steering intervention.
pub fn generate_with_steering(
    backend: &dyn ModelBackend,
    prompt: &TokenSequence,
    config: &GenerationConfig,
    spec: &SteeringSpec,
) -> Result<ReasoningRun, BackendError> {
    generate_full(backend, prompt, config, None, Some(spec), &[]).map(|(run, _)| run)
}
