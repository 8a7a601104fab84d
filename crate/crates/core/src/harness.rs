//! The two evaluation families: step-level error detection over tagged
//! solutions, and budget-forced test-time scaling from injected errors, both
//! runnable under arbitrary steering specs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    assemble_run, forced_context, sample_token, BackendError, GenerationConfig, MarkerKind,
    ModelBackend, ReasoningRun, SteeringSpec, SteeringSummary, TapRequest, TokenSequence,
};
use crate::client::VerifierClient;
use crate::intervention::QuestionItem;
use crate::outcome::{split_run, verify, VerdictTarget, VerifyError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown suite for item {0:?}")]
    UnknownSuite(String),
    #[error("item {id:?} label {label} invalid for {suite:?} with {steps} steps")]
    InvalidLabel {
        id: String,
        label: i64,
        steps: usize,
        suite: DetectionSuite,
    },
    #[error("one prediction per item required: {predictions} predictions, {items} items")]
    PredictionMismatch { predictions: usize, items: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Which benchmark family an item belongs to; indexing conventions differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSuite {
    /// Paragraph-tagged math solutions indexed from 0.
    Processbench,
    /// Step-numbered traces indexed from 1.
    Bigbench,
}

/// One error-detection item: a problem, its tagged solution steps, and the
/// earliest erroneous index (or -1 when every step is sound).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionItem {
    pub id: String,
    pub problem: String,
    pub steps: Vec<String>,
    pub label: i64,
    pub suite: DetectionSuite,
    /// Task framing used by the step-numbered suite's template.
    #[serde(default)]
    pub task_description: String,
}

impl DetectionItem {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let ok = match self.suite {
            DetectionSuite::Processbench => {
                self.label == -1 || (0..self.steps.len() as i64).contains(&self.label)
            }
            DetectionSuite::Bigbench => {
                self.label == -1 || (1..=self.steps.len() as i64).contains(&self.label)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::InvalidLabel {
                id: self.id.clone(),
                label: self.label,
                steps: self.steps.len(),
                suite: self.suite,
            })
        }
    }
}

const PROCESSBENCH_TEMPLATE: &str = r#"The following is a math problem and a solution (split into paragraphs, enclosed with tags and indexed from 0):

[Math Problem]

{problem}

[Solution]

{tagged_response}

Your task is to review and critique the solution paragraph by paragraph. Once you identify an error in a paragraph, return the index of the paragraph where the earliest error occurs. Otherwise, return the index of -1.

Please put your final answer in \boxed{}."#;

const BIGBENCH_TEMPLATE: &str = r#"Given a problem and its solution steps below, identify whether there is any incorrect reasoning step. Do NOT solve the problem.

Task:

{task_description}

Problem:

{input}

Reasoning:

{steps}

Return \boxed{k} where k is the step number of the incorrect step, or \boxed{-1} if all steps are correct."#;

/// Render the suite's template for one item. Field substitution is the only
/// variation, so two renders of the same item are identical.
pub fn render_detection_prompt(item: &DetectionItem) -> Result<String, HarnessError> {
    item.validate()?;
    match item.suite {
        DetectionSuite::Processbench => {
            let tagged: Vec<String> = item
                .steps
                .iter()
                .enumerate()
                .map(|(i, step)| format!("<paragraph_{i}>\n{step}\n</paragraph_{i}>"))
                .collect();
            Ok(PROCESSBENCH_TEMPLATE
                .replace("{problem}", &item.problem)
                .replace("{tagged_response}", &tagged.join("\n\n")))
        }
        DetectionSuite::Bigbench => {
            let steps: Vec<String> = item
                .steps
                .iter()
                .enumerate()
                .map(|(i, step)| format!("Step {}: {step}", i + 1))
                .collect();
            Ok(BIGBENCH_TEMPLATE
                .replace("{task_description}", &item.task_description)
                .replace("{input}", &item.problem)
                .replace("{steps}", &steps.join("\n")))
        }
    }
}

/// Extract the last `\boxed{...}` whose content parses as an optionally
/// signed integer. Anything else is a parse failure, which graders count as
/// an incorrect prediction. Never fails hard.
pub fn parse_boxed_index(answer_text: &str) -> Option<i64> {
    // scan every balanced box, keep the last integer-valued one
    let mut result = None;
    let mut rest = answer_text;
    while let Some(found) = extract_first_boxed(rest) {
        let (content, next) = found;
        if let Ok(value) = content.trim().parse::<i64>() {
            result = Some(value);
        }
        rest = next;
    }
    result
}

fn extract_first_boxed(text: &str) -> Option<(String, &str)> {
    let start = text.find("\\boxed{")?;
    let after = &text[start + "\\boxed{".len()..];
    let mut depth = 1usize;
    for (i, c) in after.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((after[..i].to_string(), &after[i + 1..]));
                }
            }
            _ => {}
        }
    }
    None
}

/// Exact-match accuracies over the two label classes and their harmonic mean.
/// A class absent from the items leaves its accuracy (and the mean) undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub error_accuracy: Option<f64>,
    pub correct_accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub n_error: usize,
    pub n_correct: usize,
}

/// Harmonic mean of the two accuracies; zero when either side is zero.
pub fn harmonic_f1(error_accuracy: f64, correct_accuracy: f64) -> f64 {
    if error_accuracy == 0.0 || correct_accuracy == 0.0 {
        0.0
    } else {
        2.0 * error_accuracy * correct_accuracy / (error_accuracy + correct_accuracy)
    }
}

/// Grade one prediction per item: exact index match on erroneous items,
/// -1 on clean items. `None` predictions (parse failures, backend failures)
/// count as incorrect on both sides.
pub fn detection_metrics(
    predictions: &[Option<i64>],
    items: &[DetectionItem],
) -> Result<DetectionMetrics, HarnessError> {
    if predictions.len() != items.len() {
        return Err(HarnessError::PredictionMismatch {
            predictions: predictions.len(),
            items: items.len(),
        });
    }
    let mut n_error = 0usize;
    let mut n_correct = 0usize;
    let mut error_hits = 0usize;
    let mut correct_hits = 0usize;
    for (pred, item) in predictions.iter().zip(items) {
        if item.label == -1 {
            n_correct += 1;
            if *pred == Some(-1) {
                correct_hits += 1;
            }
        } else {
            n_error += 1;
            if *pred == Some(item.label) {
                error_hits += 1;
            }
        }
    }
    let error_accuracy = (n_error > 0).then(|| error_hits as f64 / n_error as f64);
    let correct_accuracy = (n_correct > 0).then(|| correct_hits as f64 / n_correct as f64);
    let f1 = match (error_accuracy, correct_accuracy) {
        (Some(e), Some(c)) => Some(harmonic_f1(e, c)),
        _ => None,
    };
    Ok(DetectionMetrics {
        error_accuracy,
        correct_accuracy,
        f1,
        n_error,
        n_correct,
    })
}

/// Sample-level alternative: precision/recall of exact erroneous-step hits
/// against claimed errors. Exposed alongside the harmonic-mean convention.
pub fn micro_f1(predictions: &[Option<i64>], items: &[DetectionItem]) -> Option<f64> {
    let mut hits = 0usize;
    let mut claimed = 0usize;
    let mut actual = 0usize;
    for (pred, item) in predictions.iter().zip(items) {
        let claims_error = matches!(pred, Some(p) if *p != -1);
        if claims_error {
            claimed += 1;
        }
        if item.label != -1 {
            actual += 1;
            if *pred == Some(item.label) {
                hits += 1;
            }
        }
    }
    if claimed == 0 || actual == 0 {
        return None;
    }
    let precision = hits as f64 / claimed as f64;
    let recall = hits as f64 / actual as f64;
    if precision + recall == 0.0 {
        return Some(0.0);
    }
    Some(2.0 * precision * recall / (precision + recall))
}

/// Per-item trace of a detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub item_id: String,
    pub prediction: Option<i64>,
    pub correct: bool,
    /// Set when the backend failed or the run never terminated.
    pub flagged: bool,
    pub answer_text: String,
}

/// Render, generate under the steering spec, read the boxed index from the
/// answer span only, and grade. Backend failures mark the item incorrect and
/// flagged rather than aborting the suite.
pub fn run_detection_suite(
    items: &[DetectionItem],
    backend: &dyn ModelBackend,
    steering: Option<&SteeringSpec>,
    config: &GenerationConfig,
) -> Result<(DetectionMetrics, Vec<DetectionRecord>), HarnessError> {
    let mut predictions = Vec::with_capacity(items.len());
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let prompt_text = render_detection_prompt(item)?;
        let outcome = TokenSequence::from_text(backend, &prompt_text)
            .and_then(|prompt| {
                crate::backend::generate_full(backend, &prompt, config, None, steering, &[])
            })
            .map(|(run, _)| run);
        let (prediction, flagged, answer_text) = match outcome {
            Ok(run) => {
                let (_, answer_text, unterminated) = split_run(&run, backend);
                let prediction = if unterminated {
                    None
                } else {
                    parse_boxed_index(&answer_text)
                };
                (prediction, unterminated, answer_text)
            }
            Err(e) => {
                tracing::warn!(id = %item.id, "backend failed on detection item: {e}");
                (None, true, String::new())
            }
        };
        let correct = prediction == Some(item.label);
        records.push(DetectionRecord {
            item_id: item.id.clone(),
            prediction,
            correct,
            flagged,
            answer_text,
        });
        predictions.push(prediction);
    }
    let metrics = detection_metrics(&predictions, items)?;
    Ok((metrics, records))
}

/// One budget-forced generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTSRecord {
    pub item_id: String,
    /// Forced continuations actually applied (each one replaced an emitted
    /// think-end with the "Wait" token sequence).
    pub iterations: usize,
    pub final_answer_correct: bool,
    pub unterminated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steering: Option<SteeringSummary>,
}

/// Generate from `question + think-start + error_trace`. Each time the model
/// emits think-end while fewer than `budget` forcings have occurred, the
/// think-end is dropped, the literal "Wait" token sequence is appended, and
/// generation resumes; afterwards the run proceeds to its final answer,
/// which is verified against the ground truth.
pub fn run_budget_forced(
    item: &QuestionItem,
    error_trace: &str,
    backend: &dyn ModelBackend,
    steering: Option<&SteeringSpec>,
    config: &GenerationConfig,
    budget: usize,
    verifier: &dyn VerifierClient,
) -> Result<(TTSRecord, ReasoningRun), HarnessError> {
    config.validate()?;
    if let Some(spec) = steering {
        spec.validate(backend)?;
    }
    let prompt = TokenSequence::from_text(backend, &item.question)?;
    let prefill = TokenSequence::from_text(backend, error_trace)?;
    let (mut ids, prompt_len) = forced_context(backend, &prompt, Some(&prefill))?;
    let forced_len = ids.len();

    let think_start = backend
        .marker(MarkerKind::ThinkStart)
        .ok_or(BackendError::Unsupported("think markers"))?;
    let think_end = backend
        .marker(MarkerKind::ThinkEnd)
        .ok_or(BackendError::Unsupported("think markers"))?;
    let eos = backend.marker(MarkerKind::EndOfSequence);
    // the literal token sequence for "Wait" in this backend's vocabulary
    let wait_ids = match backend.marker(MarkerKind::Wait) {
        Some(id) => vec![id],
        None => backend.tokenize("Wait")?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut forcings = 0usize;
    let mut seen_think_end = false;
    let mut appended = 0usize;
    let no_capture: [usize; 0] = [];

    while appended < config.max_new_tokens {
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
        if token == think_start || (token == think_end && seen_think_end) {
            break;
        }
        if token == think_end {
            if forcings < budget {
                // replace the think-end with "Wait" and resume thinking
                ids.extend_from_slice(&wait_ids);
                appended += wait_ids.len();
                forcings += 1;
                continue;
            }
            seen_think_end = true;
            ids.push(token);
            appended += 1;
            continue;
        }
        ids.push(token);
        appended += 1;
    }

    let run = assemble_run(backend, ids, prompt_len, forced_len);
    let final_answer_correct = if run.unterminated {
        false
    } else {
        let (_, answer_text, _) = split_run(&run, backend);
        verify(
            VerdictTarget::Answer,
            &answer_text,
            &item.ground_truth,
            Some(&item.question),
            verifier,
        )?
        .correct
    };

    Ok((
        TTSRecord {
            item_id: item.id.clone(),
            iterations: forcings,
            final_answer_correct,
            unterminated: run.unterminated,
            steering: steering.map(SteeringSpec::summary),
        },
        run,
    ))
}

/// One cell of the accuracy-versus-iterations grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub iterations: usize,
    pub alpha: f64,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Accuracy per (iterations, alpha) cell; missing grid cells are reported,
/// never interpolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub iterations: Vec<usize>,
    pub alphas: Vec<f64>,
    pub cells: Vec<CurveCell>,
    pub missing: Vec<(usize, f64)>,
}

/// Fold TTS records into the accuracy grid. Records without a steering spec
/// count as alpha = 0.
pub fn accuracy_curve(records: &[TTSRecord]) -> AccuracyCurve {
    let alpha_of = |r: &TTSRecord| r.steering.map_or(0.0, |s| s.alpha);

    let mut iterations: Vec<usize> = records.iter().map(|r| r.iterations).collect();
    iterations.sort_unstable();
    iterations.dedup();
    let mut alphas: Vec<f64> = records.iter().map(alpha_of).collect();
    alphas.sort_by(|a, b| a.partial_cmp(b).expect("finite alphas"));
    alphas.dedup();

    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for &it in &iterations {
        for &alpha in &alphas {
            let matching: Vec<&TTSRecord> = records
                .iter()
                .filter(|r| r.iterations == it && alpha_of(r) == alpha)
                .collect();
            if matching.is_empty() {
                missing.push((it, alpha));
                continue;
            }
            let n = matching.len();
            let correct = matching.iter().filter(|r| r.final_answer_correct).count();
            cells.push(CurveCell {
                iterations: it,
                alpha,
                n,
                correct,
                accuracy: correct as f64 / n as f64,
            });
        }
    }
    AccuracyCurve {
        iterations,
        alphas,
        cells,
        missing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Script, ScriptedBackend};
    use crate::client::OfflineVerifier;
    use crate::intervention::SourceDataset;

    fn pb_item(id: &str, label: i64) -> DetectionItem {
        DetectionItem {
            id: id.into(),
            problem: format!("problem {id}"),
            steps: vec!["first step".into(), "second step".into(), "third".into()],
            label,
            suite: DetectionSuite::Processbench,
            task_description: String::new(),
        }
    }

    #[test]
    fn processbench_prompt_contains_contract_phrases() {
        let prompt = render_detection_prompt(&pb_item("a", 1)).unwrap();
        assert!(prompt.contains("enclosed with tags and indexed from 0"));
        assert!(prompt.contains("<paragraph_0>"));
        assert!(prompt.contains("</paragraph_2>"));
        assert!(prompt.contains("\\boxed{}"));
        assert_eq!(prompt, render_detection_prompt(&pb_item("a", 1)).unwrap());
    }

    #[test]
    fn bigbench_prompt_contains_contract_phrases() {
        let item = DetectionItem {
            id: "b".into(),
            problem: "(1+2)*3".into(),
            steps: vec!["add".into(), "multiply".into()],
            label: 2,
            suite: DetectionSuite::Bigbench,
            task_description: "arithmetic".into(),
        };
        let prompt = render_detection_prompt(&item).unwrap();
        assert!(prompt.contains("Do NOT solve the problem"));
        assert!(prompt.contains("Step 1: add"));
        assert!(prompt.contains("Step 2: multiply"));
        assert!(prompt.contains("\\boxed{k}"));
    }

    #[test]
    fn label_bounds_are_suite_specific() {
        assert!(pb_item("x", 2).validate().is_ok());
        assert!(pb_item("x", 3).validate().is_err());
        assert!(pb_item("x", -1).validate().is_ok());
        let mut bb = pb_item("y", 3);
        bb.suite = DetectionSuite::Bigbench;
        assert!(bb.validate().is_ok(), "1-based upper bound");
        bb.label = 0;
        assert!(bb.validate().is_err(), "0 invalid when 1-based");
    }

    #[test]
    fn boxed_index_parsing() {
        assert_eq!(parse_boxed_index("so \\boxed{-1}"), Some(-1));
        assert_eq!(parse_boxed_index("\\boxed{3}. Wait, \\boxed{5}"), Some(5));
        assert_eq!(parse_boxed_index("\\boxed{three}"), None);
        assert_eq!(parse_boxed_index("nothing boxed"), None);
        assert_eq!(parse_boxed_index("\\boxed{ 7 } trailing"), Some(7));
        // a later non-integer box does not erase an earlier integer one
        assert_eq!(parse_boxed_index("\\boxed{4} then \\boxed{x}"), Some(4));
    }

    #[test]
    fn f1_is_the_harmonic_mean() {
        let e = 0.5;
        let c = 1.0;
        let f1 = harmonic_f1(e, c);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(harmonic_f1(0.0, 1.0), 0.0);
    }

    #[test]
    fn metrics_on_hand_graded_fixture() {
        // six items, half erroneous; predictions hand-graded
        let items = vec![
            pb_item("e1", 0),
            pb_item("e2", 1),
            pb_item("e3", 2),
            pb_item("c1", -1),
            pb_item("c2", -1),
            pb_item("c3", -1),
        ];
        let predictions = vec![
            Some(0),  // hit
            Some(2),  // wrong index
            None,     // parse failure counts as incorrect
            Some(-1), // hit
            Some(-1), // hit
            Some(0),  // false positive
        ];
        let m = detection_metrics(&predictions, &items).unwrap();
        assert_eq!(m.n_error, 3);
        assert_eq!(m.n_correct, 3);
        assert!((m.error_accuracy.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.correct_accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let expect_f1 = harmonic_f1(1.0 / 3.0, 2.0 / 3.0);
        assert!((m.f1.unwrap() - expect_f1).abs() < 1e-12);
    }

    #[test]
    fn absent_class_leaves_metrics_undefined() {
        let items = vec![pb_item("e1", 0)];
        let m = detection_metrics(&[Some(0)], &items).unwrap();
        assert!(m.error_accuracy.is_some());
        assert!(m.correct_accuracy.is_none());
        assert!(m.f1.is_none());
    }

    #[test]
    fn all_correct_predictions_score_one() {
        let items = vec![pb_item("e", 1), pb_item("c", -1)];
        let m = detection_metrics(&[Some(1), Some(-1)], &items).unwrap();
        assert_eq!(m.error_accuracy, Some(1.0));
        assert_eq!(m.correct_accuracy, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
    }

    fn tts_item() -> QuestionItem {
        QuestionItem::new(
            "bailey",
            "bailey saves money. how much did bailey start with?",
            "60",
            SourceDataset::Gsm8k,
        )
        .unwrap()
    }

    fn tts_backend() -> ScriptedBackend {
        // three think-end attempts; the reasoning self-corrects after waits
        ScriptedBackend::over_default_toy(vec![Script {
            prompt_contains: "bailey".into(),
            and_contains: None,
            alpha: None,
            continuation: "so 5 × 8 = 30.</think> next, 30 is off, 5 × 8 = 40.</think> so 100 - 40 = 60.</think>\\boxed{60}<eos>".into(),
        }])
        .unwrap()
    }

    #[test]
    fn zero_budget_equals_plain_intervened_generation() {
        let backend = tts_backend();
        let item = tts_item();
        let cfg = GenerationConfig::greedy(200);
        let (record, run) = run_budget_forced(
            &item,
            "first, multiply 5 × 8 = 30.",
            &backend,
            None,
            &cfg,
            0,
            &OfflineVerifier,
        )
        .unwrap();
        assert_eq!(record.iterations, 0);
        // stops at the first think-end attempt; answer span holds the rest
        assert!(run.tokens.text.contains("</think>"));
        assert!(!record.final_answer_correct, "answer text has no box yet");

        // and the transcript is token-identical to an unforced prefill run
        let prompt = TokenSequence::from_text(&backend, &item.question).unwrap();
        let prefill =
            TokenSequence::from_text(&backend, "first, multiply 5 × 8 = 30.").unwrap();
        let plain = crate::backend::generate(&backend, &prompt, &cfg, Some(&prefill)).unwrap();
        assert_eq!(plain.tokens.ids, run.tokens.ids);
    }

    #[test]
    fn forcing_budget_inserts_exact_wait_count() {
        let backend = tts_backend();
        let item = tts_item();
        let cfg = GenerationConfig::greedy(200);
        for budget in [1usize, 2] {
            let (record, run) = run_budget_forced(
                &item,
                "first, multiply 5 × 8 = 30.",
                &backend,
                None,
                &cfg,
                budget,
                &OfflineVerifier,
            )
            .unwrap();
            assert_eq!(record.iterations, budget);
            let wait_id = backend.marker(MarkerKind::Wait).unwrap();
            let waits = run
                .tokens
                .ids
                .iter()
                .filter(|&&t| t == wait_id)
                .count();
            assert_eq!(waits, budget, "transcript scan");
        }
        // with budget 2 the final boxed answer is correct
        let (record, _) = run_budget_forced(
            &item,
            "first, multiply 5 × 8 = 30.",
            &backend,
            None,
            &cfg,
            2,
            &OfflineVerifier,
        )
        .unwrap();
        assert!(record.final_answer_correct);
    }

    #[test]
    fn budget_exhaustion_flags_unterminated() {
        let backend = ScriptedBackend::over_default_toy(vec![Script {
            prompt_contains: "bailey".into(),
            and_contains: None,
            alpha: None,
            continuation: "thinking forever without conclusion".into(),
        }])
        .unwrap();
        let (record, _) = run_budget_forced(
            &tts_item(),
            "seed error.",
            &backend,
            None,
            &GenerationConfig::greedy(10),
            3,
            &OfflineVerifier,
        )
        .unwrap();
        assert!(record.unterminated);
        assert!(!record.final_answer_correct);
        assert_eq!(record.iterations, 0);
    }

    fn record(iterations: usize, alpha: f64, correct: bool) -> TTSRecord {
        TTSRecord {
            item_id: "x".into(),
            iterations,
            final_answer_correct: correct,
            unterminated: false,
            steering: Some(SteeringSummary {
                layer: 1,
                alpha,
                position_scope: crate::backend::PositionScope::AllPositions,
            }),
        }
    }

    #[test]
    fn curve_counts_match_manual_grid() {
        let records = vec![
            record(0, -1.0, false),
            record(0, -1.0, true),
            record(0, 1.0, true),
            record(0, 1.0, true),
            record(2, -1.0, false),
            record(2, -1.0, false),
            record(2, 1.0, true),
            record(2, 1.0, false),
        ];
        let curve = accuracy_curve(&records);
        assert_eq!(curve.iterations, vec![0, 2]);
        assert_eq!(curve.alphas, vec![-1.0, 1.0]);
        assert!(curve.missing.is_empty());
        let cell = |it: usize, alpha: f64| {
            curve
                .cells
                .iter()
                .find(|c| c.iterations == it && c.alpha == alpha)
                .copied()
                .unwrap()
        };
        assert_eq!(cell(0, -1.0).accuracy, 0.5);
        assert_eq!(cell(0, 1.0).accuracy, 1.0);
        assert_eq!(cell(2, -1.0).accuracy, 0.0);
        assert_eq!(cell(2, 1.0).accuracy, 0.5);
    }

    #[test]
    fn all_correct_records_give_unit_cells() {
        let records = vec![record(0, 0.0, true), record(1, 0.0, true)];
        let curve = accuracy_curve(&records);
        assert!(curve.cells.iter().all(|c| c.accuracy == 1.0));
    }

    #[test]
    fn ragged_grid_reports_missing_cells() {
        let records = vec![record(0, -1.0, true), record(2, 1.0, true)];
        let curve = accuracy_curve(&records);
        assert_eq!(curve.missing.len(), 2);
        assert!(curve.missing.contains(&(0, 1.0)));
        assert!(curve.missing.contains(&(2, -1.0)));
    }
}
