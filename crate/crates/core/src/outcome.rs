//! Splits runs into think and answer parts, verifies each against ground
//! truth through a verifier service (with a rule-based boxed-match fallback),
//! and classifies the four-quadrant recovery outcome.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ModelBackend, ReasoningRun};
use crate::client::{ClientError, VerifierClient, VerifyRequest};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("ground truth must be non-empty")]
    EmptyGroundTruth,
    #[error("verifier returned a malformed response: {0}")]
    MalformedResponse(String),
    #[error("cannot aggregate an empty record list")]
    EmptyRecords,
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Which part of a run a verdict grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictTarget {
    Think,
    Answer,
}

/// How a verdict was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMethod {
    VerifierService,
    BoxedMatch,
}

/// An immutable correctness judgment for one part of one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub target: VerdictTarget,
    pub correct: bool,
    pub method: VerifyMethod,
    /// Raw verifier response, or the fallback's note (e.g. `unparseable`).
    pub raw: String,
}

/// Joint correctness of the think trace and the final answer.
///
/// `ThinkBadAnswerOk` is the hidden-recovery class: the visible reasoning
/// stays wrong, yet the final answer lands on the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeQuadrant {
    ThinkOkAnswerOk,
    ThinkOkAnswerBad,
    ThinkBadAnswerOk,
    ThinkBadAnswerBad,
}

impl OutcomeQuadrant {
    pub fn from_verdicts(think_correct: bool, answer_correct: bool) -> Self {
        match (think_correct, answer_correct) {
            (true, true) => Self::ThinkOkAnswerOk,
            (true, false) => Self::ThinkOkAnswerBad,
            (false, true) => Self::ThinkBadAnswerOk,
            (false, false) => Self::ThinkBadAnswerBad,
        }
    }

    pub const ALL: [Self; 4] = [
        Self::ThinkOkAnswerOk,
        Self::ThinkOkAnswerBad,
        Self::ThinkBadAnswerOk,
        Self::ThinkBadAnswerBad,
    ];

    fn index(self) -> usize {
        match self {
            Self::ThinkOkAnswerOk => 0,
            Self::ThinkOkAnswerBad => 1,
            Self::ThinkBadAnswerOk => 2,
            Self::ThinkBadAnswerBad => 3,
        }
    }
}

/// Everything between think-start and think-end, and everything after
/// think-end. Unterminated runs yield an empty answer and a flag.
pub fn split_run(run: &ReasoningRun, backend: &dyn ModelBackend) -> (String, String, bool) {
    let think = backend.detokenize(run.think_ids()).unwrap_or_default();
    let answer = backend.detokenize(run.answer_ids()).unwrap_or_default();
    (think, answer, run.unterminated)
}

static BOXED_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\\boxed\{").expect("static regex"));

/// Last `\boxed{...}` content with balanced braces, if any.
pub fn extract_last_boxed(text: &str) -> Option<String> {
    let mut last = None;
    for m in BOXED_RE.find_iter(text) {
        let rest = &text[m.end()..];
        let mut depth = 1usize;
        let mut content = String::new();
        for c in rest.chars() {
            match c {
                '{' => {
                    depth += 1;
                    content.push(c);
                }
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                    content.push(c);
                }
                _ => content.push(c),
            }
        }
        if depth == 0 {
            last = Some(content);
        }
    }
    last
}

static NUMBER_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("static regex"));

/// Last plain number in the text (think-trace fallback).
pub fn extract_last_number(text: &str) -> Option<String> {
    NUMBER_RE
        .find_iter(text)
        .last()
        .map(|m| m.as_str().to_string())
}

/// Canonical form used for fallback comparison: trim, strip surrounding `$`,
/// drop all whitespace, strip leading zeros before a digit, strip a trailing
/// `.0...0`.
pub fn canonical_answer(raw: &str) -> String {
    let mut s: String = raw.trim().trim_matches('$').trim().to_string();
    s.retain(|c| !c.is_whitespace());

    let negative = s.starts_with('-');
    let body = if negative { &s[1..] } else { &s[..] };
    let mut chars: Vec<char> = body.chars().collect();
    while chars.len() >= 2 && chars[0] == '0' && chars[1].is_ascii_digit() {
        chars.remove(0);
    }
    let mut out: String = chars.into_iter().collect();

    if let Some(dot) = out.rfind('.') {
        if out[dot + 1..].chars().all(|c| c == '0') && !out[dot + 1..].is_empty() {
            out.truncate(dot);
        }
    }
    if negative {
        format!("-{out}")
    } else {
        out
    }
}

/// Grade `text` against `ground_truth`.
///
/// The service path returns the verifier's boolean. When the service is
/// unavailable the fallback compares the last boxed expression (answers) or
/// the last boxed-else-numeric value (think traces) after canonicalization;
/// nothing parseable means incorrect with the note `unparseable`.
pub fn verify(
    target: VerdictTarget,
    text: &str,
    ground_truth: &str,
    question: Option<&str>,
    client: &dyn VerifierClient,
) -> Result<Verdict, VerifyError> {
    if ground_truth.is_empty() {
        return Err(VerifyError::EmptyGroundTruth);
    }
    let request = VerifyRequest {
        question: question.unwrap_or_default().to_string(),
        candidate_text: text.to_string(),
        ground_truth: ground_truth.to_string(),
    };
    match client.verify(&request) {
        Ok(correct) => Ok(Verdict {
            target,
            correct,
            method: VerifyMethod::VerifierService,
            raw: format!("{{\"correct\":{correct}}}"),
        }),
        Err(ClientError::Unavailable(_)) => Ok(boxed_match(target, text, ground_truth)),
        Err(other) => Err(other.into()),
    }
}

/// The deterministic fallback verifier.
pub fn boxed_match(target: VerdictTarget, text: &str, ground_truth: &str) -> Verdict {
    let candidate = match target {
        VerdictTarget::Answer => extract_last_boxed(text),
        VerdictTarget::Think => extract_last_boxed(text).or_else(|| extract_last_number(text)),
    };
    match candidate {
        Some(value) => {
            let correct = canonical_answer(&value) == canonical_answer(ground_truth);
            Verdict {
                target,
                correct,
                method: VerifyMethod::BoxedMatch,
                raw: value,
            }
        }
        None => Verdict {
            target,
            correct: false,
            method: VerifyMethod::BoxedMatch,
            raw: "unparseable".to_string(),
        },
    }
}

/// Verdicts for both parts of a run plus the quadrant they imply.
/// Unterminated runs classify the answer as incorrect.
pub fn classify_with_verdicts(
    think_text: &str,
    answer_text: &str,
    unterminated: bool,
    ground_truth: &str,
    question: Option<&str>,
    client: &dyn VerifierClient,
) -> Result<(OutcomeQuadrant, Verdict, Verdict), VerifyError> {
    let think = verify(VerdictTarget::Think, think_text, ground_truth, question, client)?;
    let answer = if unterminated {
        Verdict {
            target: VerdictTarget::Answer,
            correct: false,
            method: VerifyMethod::BoxedMatch,
            raw: "unterminated".to_string(),
        }
    } else {
        verify(
            VerdictTarget::Answer,
            answer_text,
            ground_truth,
            question,
            client,
        )?
    };
    let quadrant = OutcomeQuadrant::from_verdicts(think.correct, answer.correct);
    Ok((quadrant, think, answer))
}

/// Split a run and classify it in one step. The run's prompt text is sent to
/// the verifier as question context.
pub fn classify(
    run: &ReasoningRun,
    backend: &dyn ModelBackend,
    ground_truth: &str,
    client: &dyn VerifierClient,
) -> Result<OutcomeQuadrant, VerifyError> {
    classify_run(run, backend, ground_truth, client).map(|(q, _, _)| q)
}

/// Like [`classify`] but keeps both verdicts for record persistence.
pub fn classify_run(
    run: &ReasoningRun,
    backend: &dyn ModelBackend,
    ground_truth: &str,
    client: &dyn VerifierClient,
) -> Result<(OutcomeQuadrant, Verdict, Verdict), VerifyError> {
    let (think_text, answer_text, unterminated) = split_run(run, backend);
    let question = backend
        .detokenize(&run.tokens.ids[..run.prompt_len])
        .unwrap_or_default();
    classify_with_verdicts(
        &think_text,
        &answer_text,
        unterminated,
        ground_truth,
        Some(&question),
        client,
    )
}

/// Counts and proportions over the four quadrants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantDistribution {
    /// Order: ok/ok, ok/bad, bad/ok, bad/bad.
    pub counts: [usize; 4],
    pub proportions: [f64; 4],
    pub total: usize,
}

impl QuadrantDistribution {
    pub fn count(&self, q: OutcomeQuadrant) -> usize {
        self.counts[q.index()]
    }

    pub fn proportion(&self, q: OutcomeQuadrant) -> f64 {
        self.proportions[q.index()]
    }
}

/// Proportions per quadrant over classified runs; they sum to one.
pub fn aggregate_distribution(
    quadrants: &[OutcomeQuadrant],
) -> Result<QuadrantDistribution, VerifyError> {
    if quadrants.is_empty() {
        return Err(VerifyError::EmptyRecords);
    }
    let mut counts = [0usize; 4];
    for q in quadrants {
        counts[q.index()] += 1;
    }
    let total = quadrants.len();
    let proportions = counts.map(|c| c as f64 / total as f64);
    Ok(QuadrantDistribution {
        counts,
        proportions,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{generate, GenerationConfig, Script, ScriptedBackend, TokenSequence};
    use crate::client::OfflineVerifier;

    #[test]
    fn quadrant_truth_table_is_exhaustive() {
        // independent enumeration over the four boolean pairs
        let mut seen = std::collections::HashSet::new();
        for think in [true, false] {
            for answer in [true, false] {
                let q = OutcomeQuadrant::from_verdicts(think, answer);
                let expected = match (think, answer) {
                    (true, true) => OutcomeQuadrant::ThinkOkAnswerOk,
                    (true, false) => OutcomeQuadrant::ThinkOkAnswerBad,
                    (false, true) => OutcomeQuadrant::ThinkBadAnswerOk,
                    (false, false) => OutcomeQuadrant::ThinkBadAnswerBad,
                };
                assert_eq!(q, expected);
                seen.insert(q);
            }
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn boxed_match_accepts_canonical_variants() {
        for (text, truth, expect) in [
            ("the total is \\boxed{18}", "18", true),
            ("so \\boxed{018}", "18", true),
            ("thus \\boxed{18.0}", "18", true),
            ("gives \\boxed{$18$}", "18", true),
            ("result \\boxed{ 18 }", "18", true),
            ("maybe \\boxed{19}", "18", false),
            ("negatives \\boxed{-042}", "-42", true),
        ] {
            let v = boxed_match(VerdictTarget::Answer, text, truth);
            assert_eq!(v.correct, expect, "{text}");
            assert_eq!(v.method, VerifyMethod::BoxedMatch);
        }
    }

    #[test]
    fn missing_box_is_unparseable_and_incorrect() {
        let v = boxed_match(VerdictTarget::Answer, "no box here", "18");
        assert!(!v.correct);
        assert_eq!(v.raw, "unparseable");
    }

    #[test]
    fn last_box_wins() {
        let v = boxed_match(VerdictTarget::Answer, "\\boxed{3} then \\boxed{5}", "5");
        assert!(v.correct);
    }

    #[test]
    fn think_fallback_uses_last_number_without_box() {
        let v = boxed_match(VerdictTarget::Think, "so 16 - 6 = 10, giving $20", "20");
        assert!(v.correct);
        let v2 = boxed_match(VerdictTarget::Think, "so the value comes to 18", "20");
        assert!(!v2.correct);
    }

    #[test]
    fn canonicalization_rules() {
        assert_eq!(canonical_answer(" 018 "), "18");
        assert_eq!(canonical_answer("$18$"), "18");
        assert_eq!(canonical_answer("18.0"), "18");
        assert_eq!(canonical_answer("18.00"), "18");
        assert_eq!(canonical_answer("18.50"), "18.50");
        assert_eq!(canonical_answer("0"), "0");
        assert_eq!(canonical_answer("0.5"), "0.5");
        assert_eq!(canonical_answer("-018"), "-18");
        assert_eq!(canonical_answer("1 000"), "1000");
    }

    #[test]
    fn nested_braces_in_boxed_are_balanced() {
        assert_eq!(
            extract_last_boxed("\\boxed{\\frac{1}{2}}").as_deref(),
            Some("\\frac{1}{2}")
        );
        assert_eq!(extract_last_boxed("\\boxed{unclosed"), None);
    }

    #[test]
    fn aggregate_proportions_sum_to_one() {
        let qs = vec![
            OutcomeQuadrant::ThinkOkAnswerOk,
            OutcomeQuadrant::ThinkOkAnswerBad,
            OutcomeQuadrant::ThinkBadAnswerOk,
            OutcomeQuadrant::ThinkBadAnswerBad,
        ];
        let d = aggregate_distribution(&qs).unwrap();
        assert!(d.proportions.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        let sum: f64 = d.proportions.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_record_distribution() {
        let d = aggregate_distribution(&[OutcomeQuadrant::ThinkBadAnswerOk]).unwrap();
        assert_eq!(d.proportion(OutcomeQuadrant::ThinkBadAnswerOk), 1.0);
        assert_eq!(d.proportion(OutcomeQuadrant::ThinkOkAnswerOk), 0.0);
        assert_eq!(d.total, 1);
    }

    #[test]
    fn empty_aggregate_errors() {
        assert!(matches!(
            aggregate_distribution(&[]),
            Err(VerifyError::EmptyRecords)
        ));
    }

    #[test]
    fn split_run_on_scripted_transcript() {
        let b = ScriptedBackend::over_default_toy(vec![Script {
            prompt_contains: "q:".into(),
            and_contains: None,
            alpha: None,
            continuation: "a</think>b<eos>".into(),
        }])
        .unwrap();
        let prompt = TokenSequence::from_text(&b, "q:").unwrap();
        let run = generate(&b, &prompt, &GenerationConfig::greedy(16), None).unwrap();
        let (think, answer, unterminated) = split_run(&run, &b);
        assert_eq!(think, "a");
        assert_eq!(answer, "b");
        assert!(!unterminated);
    }

    #[test]
    fn unterminated_run_classifies_answer_incorrect() {
        let b = ScriptedBackend::over_default_toy(vec![Script {
            prompt_contains: "q:".into(),
            and_contains: None,
            alpha: None,
            continuation: "endless 42 thinking".into(),
        }])
        .unwrap();
        let prompt = TokenSequence::from_text(&b, "q: what is 6*7").unwrap();
        let cfg = GenerationConfig::greedy(12);
        let run = generate(&b, &prompt, &cfg, None).unwrap();
        assert!(run.unterminated);
        let (q, think, answer) = classify_run(&run, &b, "42", &OfflineVerifier).unwrap();
        assert!(think.correct, "think trace concludes 42");
        assert!(!answer.correct);
        assert_eq!(answer.raw, "unterminated");
        assert_eq!(q, OutcomeQuadrant::ThinkOkAnswerBad);
    }
}
