//! A backend that emits pre-authored continuations while borrowing a toy
//! transformer for activations.
//!
//! Next-token logits are a near-one-hot distribution over the scripted token
//! for the current emission step, so both greedy and finite-temperature
//! decoding reproduce the script. Captures and the unembedding come from the
//! underlying toy model evaluated on the actual token sequence, which gives
//! fixtures real, text-dependent activations to probe and steer.
//!
//! Script selection: among scripts whose `prompt_contains` is a substring of
//! the decoded context, one with a matching steering `alpha` wins over a
//! wildcard, then the longest `prompt_contains`, then file order. The
//! emission step is `ids.len() - gen_start`, which stays aligned under
//! budget forcing because a suppressed think-end is replaced by exactly one
//! token. A backend past the end of its script emits end-of-sequence.

use serde::{Deserialize, Serialize};

use super::{
    BackendError, ForwardOutput, MarkerKind, ModelBackend, TapRequest, TokenId, ToyBackend,
    ToyConfig, UnembeddingMatrix,
};

const SCRIPT_LOGIT: f64 = 1e4;

/// One scripted continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    /// Substring of the decoded context that selects this script.
    pub prompt_contains: String,
    /// Optional second substring that must also appear; lets intervened
    /// contexts (question plus injected trace) outrank plain-question ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub and_contains: Option<String>,
    /// When set, the script only applies at this exact steering coefficient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Text the backend will emit, tokenized with the toy tokenizer.
    pub continuation: String,
}

impl Script {
    fn matches(&self, context: &str) -> bool {
        context.contains(&self.prompt_contains)
            && self
                .and_contains
                .as_ref()
                .map_or(true, |extra| context.contains(extra))
    }

    fn specificity(&self) -> usize {
        self.prompt_contains.len() + self.and_contains.as_ref().map_or(0, String::len)
    }
}

pub struct ScriptedBackend {
    inner: ToyBackend,
    scripts: Vec<(Script, Vec<TokenId>)>,
}

impl ScriptedBackend {
    pub fn new(config: ToyConfig, scripts: Vec<Script>) -> Result<Self, BackendError> {
        let inner = ToyBackend::new(config)?;
        let mut compiled = Vec::with_capacity(scripts.len());
        for s in scripts {
            let ids = inner.tokenize(&s.continuation)?;
            compiled.push((s, ids));
        }
        Ok(Self {
            inner,
            scripts: compiled,
        })
    }

    pub fn over_default_toy(scripts: Vec<Script>) -> Result<Self, BackendError> {
        Self::new(ToyConfig::default(), scripts)
    }

    fn select_script(&self, context: &str, alpha: Option<f64>) -> Option<&(Script, Vec<TokenId>)> {
        let alpha_exact = self
            .scripts
            .iter()
            .filter(|(s, _)| s.matches(context) && s.alpha.is_some() && s.alpha == alpha)
            .max_by_key(|(s, _)| s.specificity());
        alpha_exact.or_else(|| {
            self.scripts
                .iter()
                .filter(|(s, _)| s.matches(context) && s.alpha.is_none())
                .max_by_key(|(s, _)| s.specificity())
        })
    }
}

impl ModelBackend for ScriptedBackend {
    fn id(&self) -> String {
        format!("scripted-{}-n{}", self.inner.id(), self.scripts.len())
    }

    fn hidden_size(&self) -> usize {
        self.inner.hidden_size()
    }

    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn context_window(&self) -> usize {
        self.inner.context_window()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.inner.tokenize(text)
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, BackendError> {
        self.inner.detokenize(ids)
    }

    fn marker(&self, kind: MarkerKind) -> Option<TokenId> {
        self.inner.marker(kind)
    }

    fn forward(&self, ids: &[TokenId], taps: &TapRequest) -> Result<ForwardOutput, BackendError> {
        if ids.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        if let Some(spec) = taps.steering {
            spec.validate(self)?;
        }

        // Captures run through the toy model on the real token sequence.
        let captures = if taps.capture_layers.is_empty() {
            Default::default()
        } else {
            self.inner.forward(ids, taps)?.captures
        };

        let forced = &ids[..taps.gen_start.min(ids.len())];
        let context = self.inner.detokenize(forced)?;
        let alpha = taps.steering.map(|s| s.alpha);
        let step = ids.len().saturating_sub(taps.gen_start);

        let eos = self
            .marker(MarkerKind::EndOfSequence)
            .expect("toy backend has an end-of-sequence marker");
        let next = match self.select_script(&context, alpha) {
            Some((_, tokens)) => tokens.get(step).copied().unwrap_or(eos),
            None => {
                tracing::warn!("no script matches context; emitting end-of-sequence");
                eos
            }
        };

        let mut logits = vec![0.0; self.vocab_size()];
        logits[next as usize] = SCRIPT_LOGIT;
        Ok(ForwardOutput {
            next_logits: logits,
            captures,
        })
    }

    fn unembedding_matrix(&self) -> Result<UnembeddingMatrix, BackendError> {
        self.inner.unembedding_matrix()
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate, generate_with_steering, GenerationConfig, SteeringSpec, TokenSequence};
    use super::*;

    fn backend() -> ScriptedBackend {
        ScriptedBackend::over_default_toy(vec![
            Script {
                prompt_contains: "2+2".into(),
                and_contains: None,
            alpha: None,
                continuation: "it is 4</think>the answer is \\boxed{4}<eos>".into(),
            },
            Script {
                prompt_contains: "2+2".into(),
                and_contains: None,
                alpha: Some(1.0),
                continuation: "wait, 4</think>\\boxed{4}<eos>".into(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn emits_script_verbatim() {
        let b = backend();
        let prompt = TokenSequence::from_text(&b, "2+2?").unwrap();
        let cfg = GenerationConfig::greedy(64);
        let run = generate(&b, &prompt, &cfg, None).unwrap();
        assert_eq!(
            run.tokens.text,
            "2+2?<think>it is 4</think>the answer is \\boxed{4}<eos>"
        );
        assert!(!run.unterminated);
        let b2 = backend();
        let answer = b2.detokenize(run.answer_ids()).unwrap();
        assert_eq!(answer, "the answer is \\boxed{4}");
    }

    #[test]
    fn sampling_at_temperature_still_follows_script() {
        let b = backend();
        let prompt = TokenSequence::from_text(&b, "2+2?").unwrap();
        let cfg = GenerationConfig {
            temperature: 0.6,
            max_new_tokens: 64,
            seed: 0,
            ..GenerationConfig::default()
        };
        let run = generate(&b, &prompt, &cfg, None).unwrap();
        assert!(run.tokens.text.contains("it is 4"));
    }

    #[test]
    fn alpha_keyed_script_wins_under_matching_steering() {
        let b = backend();
        let prompt = TokenSequence::from_text(&b, "2+2?").unwrap();
        let cfg = GenerationConfig::greedy(64);
        let spec = SteeringSpec::new(1, vec![0.0; 16], 1.0);
        let run = generate_with_steering(&b, &prompt, &cfg, &spec).unwrap();
        assert!(run.tokens.text.contains("wait, 4"));
        // a non-keyed alpha falls back to the wildcard script
        let spec_neg = SteeringSpec::new(1, vec![0.0; 16], -1.0);
        let run_neg = generate_with_steering(&b, &prompt, &cfg, &spec_neg).unwrap();
        assert!(run_neg.tokens.text.contains("it is 4"));
    }

    #[test]
    fn unmatched_context_terminates_immediately() {
        let b = backend();
        let prompt = TokenSequence::from_text(&b, "9*9?").unwrap();
        let cfg = GenerationConfig::greedy(8);
        let run = generate(&b, &prompt, &cfg, None).unwrap();
        assert!(run.unterminated);
        assert!(run.answer_ids().is_empty());
    }
}
