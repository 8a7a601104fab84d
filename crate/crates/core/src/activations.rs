//! Contrastive activation sets: mean-pooled answer-token vectors for
//! baseline and intervened runs, filtered to the hidden-recovery pairing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ReasoningRun, ResidualCapture};
use crate::outcome::OutcomeQuadrant;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("run has an empty answer span; nothing to pool")]
    EmptyAnswerSpan,
    #[error("capture for layer {layer} covers {covered:?}, answer span is {span:?}")]
    CaptureGap {
        layer: usize,
        covered: std::ops::Range<usize>,
        span: std::ops::Range<usize>,
    },
    #[error("activation set is empty or single-class")]
    SingleClass,
    #[error("no contrastive pairs survive; dominant filter: {dominant} ({detail})")]
    NoPairs { dominant: String, detail: String },
    #[error("rows without a counterpart for question ids {0:?}")]
    Orphans(Vec<String>),
    #[error("activation set misaligned: {0}")]
    Misaligned(String),
    #[error("layer {0} missing from the {1} activation sets")]
    MissingLayer(usize, &'static str),
    #[error("scores invalid: {0}")]
    InvalidScores(String),
    #[error("bin count must be at least 1, got {0}")]
    InvalidBins(usize),
    #[error("lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("layer set is empty")]
    NoLayers,
}

/// Labeled, mean-pooled activations for one layer. Row `i` belongs to
/// `question_ids[i]`; `labels[i]` is true for intervened runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSet {
    pub layer: usize,
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub question_ids: Vec<String>,
}

impl ActivationSet {
    pub fn new(layer: usize) -> Self {
        Self {
            layer,
            vectors: Vec::new(),
            labels: Vec::new(),
            question_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn push(&mut self, question_id: String, label: bool, vector: Vec<f64>) {
        self.question_ids.push(question_id);
        self.labels.push(label);
        self.vectors.push(vector);
    }

    /// Alignment and the one-row-per-class-per-question rule.
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.vectors.len() != self.labels.len() || self.labels.len() != self.question_ids.len()
        {
            return Err(AnalysisError::Misaligned(format!(
                "{} vectors, {} labels, {} ids",
                self.vectors.len(),
                self.labels.len(),
                self.question_ids.len()
            )));
        }
        let d = self.dim();
        if self.vectors.iter().any(|v| v.len() != d) {
            return Err(AnalysisError::Misaligned("ragged vector rows".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (id, &label) in self.question_ids.iter().zip(&self.labels) {
            if !seen.insert((id.as_str(), label)) {
                return Err(AnalysisError::Misaligned(format!(
                    "question {id:?} has two rows with label {label}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean of the answer-span vectors per captured layer:
/// `(1/|a|) * sum of h_i` over answer positions only.
pub fn mean_pool_answer(
    run: &ReasoningRun,
    captures: &[ResidualCapture],
) -> Result<BTreeMap<usize, Vec<f64>>, AnalysisError> {
    let span = run.answer_span.clone();
    if span.is_empty() {
        return Err(AnalysisError::EmptyAnswerSpan);
    }
    let mut pooled = BTreeMap::new();
    for capture in captures {
        if span.start < capture.positions.start || span.end > capture.positions.end {
            return Err(AnalysisError::CaptureGap {
                layer: capture.layer,
                covered: capture.positions.clone(),
                span,
            });
        }
        let d = capture.vectors.first().map_or(0, Vec::len);
        let mut acc = vec![0.0f64; d];
        for pos in span.clone() {
            let v = capture
                .at_position(pos)
                .expect("span bounds checked above");
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let n = span.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        pooled.insert(capture.layer, acc);
    }
    Ok(pooled)
}

/// A run reduced to its pooled per-layer vectors plus its outcome, the unit
/// consumed by pair construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRun {
    pub question_id: String,
    pub quadrant: OutcomeQuadrant,
    pub pooled: BTreeMap<usize, Vec<f64>>,
}

/// Keep only questions whose baseline run is think-ok/answer-ok and whose
/// intervened run is think-bad/answer-ok (the hidden-recovery pairing), and
/// emit one baseline row (label false) plus one intervened row (label true)
/// per surviving question, per layer.
pub fn build_contrastive_pairs(
    baseline: &[PooledRun],
    intervened: &[PooledRun],
) -> Result<BTreeMap<usize, ActivationSet>, AnalysisError> {
    let by_id: BTreeMap<&str, &PooledRun> = intervened
        .iter()
        .map(|r| (r.question_id.as_str(), r))
        .collect();

    let mut baseline_filtered = 0usize;
    let mut intervened_filtered = 0usize;
    let mut missing_counterpart = 0usize;
    let mut sets: BTreeMap<usize, ActivationSet> = BTreeMap::new();
    let mut survivors = 0usize;

    for base in baseline {
        if base.quadrant != OutcomeQuadrant::ThinkOkAnswerOk {
            baseline_filtered += 1;
            continue;
        }
        let Some(interv) = by_id.get(base.question_id.as_str()) else {
            missing_counterpart += 1;
            continue;
        };
        if interv.quadrant != OutcomeQuadrant::ThinkBadAnswerOk {
            intervened_filtered += 1;
            continue;
        }
        survivors += 1;
        for (&layer, base_vec) in &base.pooled {
            let Some(int_vec) = interv.pooled.get(&layer) else {
                return Err(AnalysisError::MissingLayer(layer, "intervened"));
            };
            let set = sets
                .entry(layer)
                .or_insert_with(|| ActivationSet::new(layer));
            set.push(base.question_id.clone(), false, base_vec.clone());
            set.push(base.question_id.clone(), true, int_vec.clone());
        }
    }

    if survivors == 0 {
        let (dominant, detail) = [
            (
                "baseline not think-ok/answer-ok",
                baseline_filtered,
            ),
            (
                "intervened not think-bad/answer-ok (hidden recovery)",
                intervened_filtered,
            ),
            ("missing intervened counterpart", missing_counterpart),
        ]
        .iter()
        .max_by_key(|(_, n)| *n)
        .map(|(name, n)| (name.to_string(), format!("{n} candidates eliminated")))
        .expect("three filters");
        return Err(AnalysisError::NoPairs { dominant, detail });
    }
    for set in sets.values() {
        set.validate()?;
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn capture(layer: usize, start: usize, vectors: Vec<Vec<f64>>) -> ResidualCapture {
        let end = start + vectors.len();
        ResidualCapture {
            layer,
            positions: start..end,
            vectors,
        }
    }

    fn run_with_answer(start: usize, len: usize, total: usize) -> ReasoningRun {
        use crate::backend::{SpecialMarks, TokenSequence};
        ReasoningRun {
            tokens: TokenSequence {
                ids: vec![0; total],
                text: String::new(),
                marks: SpecialMarks::default(),
            },
            prompt_len: 0,
            forced_len: 1,
            think_span: 1..start.saturating_sub(1),
            answer_span: start..start + len,
            unterminated: len == 0,
        }
    }

    #[test]
    fn pooling_is_the_arithmetic_mean() {
        let run = run_with_answer(2, 2, 4);
        let caps = vec![capture(0, 1, vec![vec![9.0, 9.0], vec![1.0, 3.0], vec![3.0, 5.0]])];
        let pooled = mean_pool_answer(&run, &caps).unwrap();
        assert_eq!(pooled[&0], vec![2.0, 4.0]);
    }

    #[test]
    fn single_token_answer_is_identity() {
        let run = run_with_answer(3, 1, 4);
        let caps = vec![capture(1, 3, vec![vec![7.0, -2.0]])];
        let pooled = mean_pool_answer(&run, &caps).unwrap();
        assert_eq!(pooled[&1], vec![7.0, -2.0]);
    }

    #[test]
    fn empty_answer_span_errors() {
        let run = run_with_answer(4, 0, 4);
        let caps = vec![capture(0, 0, vec![vec![1.0]])];
        assert!(matches!(
            mean_pool_answer(&run, &caps),
            Err(AnalysisError::EmptyAnswerSpan)
        ));
    }

    #[test]
    fn uncovered_span_errors() {
        let run = run_with_answer(2, 3, 5);
        let caps = vec![capture(0, 3, vec![vec![1.0], vec![2.0]])];
        assert!(matches!(
            mean_pool_answer(&run, &caps),
            Err(AnalysisError::CaptureGap { layer: 0, .. })
        ));
    }

    fn pooled_run(id: &str, quadrant: OutcomeQuadrant, value: f64) -> PooledRun {
        let mut pooled = BTreeMap::new();
        pooled.insert(0usize, vec![value, value]);
        pooled.insert(1usize, vec![-value, value]);
        PooledRun {
            question_id: id.to_string(),
            quadrant,
            pooled,
        }
    }

    #[test]
    fn pair_filter_keeps_only_hidden_recovery() {
        use OutcomeQuadrant::*;
        let baseline: Vec<PooledRun> = (0..10)
            .map(|i| {
                let q = if i < 8 { ThinkOkAnswerOk } else { ThinkBadAnswerBad };
                pooled_run(&format!("q{i}"), q, i as f64)
            })
            .collect();
        let intervened: Vec<PooledRun> = (0..10)
            .map(|i| {
                let q = if i < 6 { ThinkBadAnswerOk } else { ThinkBadAnswerBad };
                pooled_run(&format!("q{i}"), q, 100.0 + i as f64)
            })
            .collect();
        let sets = build_contrastive_pairs(&baseline, &intervened).unwrap();
        // 6 qualify -> 12 rows per layer, 6 of each label
        for layer in [0usize, 1] {
            let set = &sets[&layer];
            assert_eq!(set.len(), 12);
            assert_eq!(set.labels.iter().filter(|&&l| l).count(), 6);
            assert_eq!(set.labels.iter().filter(|&&l| !l).count(), 6);
        }
    }

    #[test]
    fn question_with_qualifying_runs_emits_exactly_two_rows() {
        use OutcomeQuadrant::*;
        let sets = build_contrastive_pairs(
            &[pooled_run("q", ThinkOkAnswerOk, 1.0)],
            &[pooled_run("q", ThinkBadAnswerOk, 2.0)],
        )
        .unwrap();
        assert_eq!(sets[&0].len(), 2);
        assert_eq!(sets[&0].labels, vec![false, true]);
    }

    #[test]
    fn excluded_quadrant_is_dropped() {
        use OutcomeQuadrant::*;
        let err = build_contrastive_pairs(
            &[pooled_run("q", ThinkOkAnswerOk, 1.0)],
            &[pooled_run("q", ThinkBadAnswerBad, 2.0)],
        )
        .unwrap_err();
        match err {
            AnalysisError::NoPairs { dominant, .. } => {
                assert!(dominant.contains("hidden recovery"), "{dominant}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
