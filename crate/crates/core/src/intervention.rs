//! Builds error-injected datasets: renders the error-generation instruction,
//! calls a generator service, validates the returned traces, and writes one
//! JSONL record per question.

use std::io::Write;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, ErrorGenerator};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("question item invalid: {0}")]
    InvalidItem(String),
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("trace violates the {rule} rule; raw response: {raw:?}")]
    InvalidTrace { rule: &'static str, raw: String },
    #[error("all {0} items failed; dataset would be empty")]
    EmptyDataset(usize),
    #[error("items list is empty")]
    NoItems,
    #[error("I/O failure at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Origin corpus of a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDataset {
    Gsm8k,
    Math500,
    BigbenchMistake,
    Custom,
}

/// A question with its canonical answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub id: String,
    pub question: String,
    pub ground_truth: String,
    pub source_dataset: SourceDataset,
}

impl QuestionItem {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        ground_truth: impl Into<String>,
        source_dataset: SourceDataset,
    ) -> Result<Self, DatasetError> {
        let item = Self {
            id: id.into(),
            question: question.into(),
            ground_truth: ground_truth.into(),
            source_dataset,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.id.trim().is_empty() {
            return Err(DatasetError::InvalidItem("id must be non-empty".into()));
        }
        if self.question.trim().is_empty() {
            return Err(DatasetError::InvalidItem(format!(
                "question of {:?} must be non-empty",
                self.id
            )));
        }
        if self.ground_truth.trim().is_empty() {
            return Err(DatasetError::InvalidItem(format!(
                "ground truth of {:?} must be non-empty",
                self.id
            )));
        }
        Ok(())
    }
}

/// An erroneous partial reasoning trace for one question.
///
/// Invariants: the trace stops right after its mistaken calculation step, so
/// it must not contain a terminal-answer pattern, and its steps are separated
/// by blank lines (double newline) — a lone `\n` is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedError {
    pub question_id: String,
    pub trace: String,
    pub generator: String,
    pub created_at: String,
}

static TERMINAL_ANSWER_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?i)\\boxed\{|the answer is|final answer|answer:")
        .expect("static regex")
});

/// Check both trace invariants; `Err` names the violated rule.
pub fn validate_trace(trace: &str) -> Result<(), DatasetError> {
    if trace.trim().is_empty() {
        return Err(DatasetError::InvalidTrace {
            rule: "non-empty trace",
            raw: trace.to_string(),
        });
    }
    if TERMINAL_ANSWER_RE.is_match(trace) {
        return Err(DatasetError::InvalidTrace {
            rule: "no terminal answer",
            raw: trace.to_string(),
        });
    }
    let bytes = trace.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            let prev_nl = i > 0 && bytes[i - 1] == b'\n';
            let next_nl = i + 1 < bytes.len() && bytes[i + 1] == b'\n';
            if !prev_nl && !next_nl {
                return Err(DatasetError::InvalidTrace {
                    rule: "double-newline step separator",
                    raw: trace.to_string(),
                });
            }
        }
    }
    Ok(())
}

const ERROR_PROMPT_TEMPLATE: &str = r#"Given a question and its ground-truth answer, generate a natural reasoning trace that contains a calculation error.

PURPOSE:
This trace is a deliberate error variant used to test a reasoning model's ability to recover from arithmetic mistakes.

INSTRUCTIONS:
- Write the trace as a sequence of short, natural reasoning steps, phrased as if someone is thinking aloud.
- Use natural, anthropomorphic openings such as "First, I need to...", "Okay, so...", "Let me...", or other common starter phrases typically found in the thinking process of reasoning models.
- Separate steps with two newlines (\n\n).
- Do NOT mention or hint that an error occurred (no phrases like "mistake", "should be", or "wrong").
- Introduce an arithmetic error at the earliest plausible calculation step.
- Stop the reasoning immediately after the mistaken calculation step; do not continue solving or produce an answer. The goal is to isolate the reasoning up to the error only.
- The trace must be self-consistent and match the question up to the step before the error.
- Keep the reasoning coherent, natural, and plausible.

EXAMPLE:
Question: Olivia buys 3 packs of markers, each pack containing 12 markers. She gives 7 markers to her friend. How many markers does Olivia have left?
Ground-truth answer: 29

Trace: "Okay, so I need to figure out how many markers Olivia got in total. She bought 3 packs, each with 12 markers.\n\nNext, I'll multiply 3 × 12 = 38."

Return only the interventions using the configured JSON schema.

Question:
{question}
Ground-truth answer:
{ground_truth}"#;

/// Render the error-generation instruction for one item. Substituting the
/// question and ground truth is the only variation.
pub fn render_error_prompt(item: &QuestionItem) -> String {
    ERROR_PROMPT_TEMPLATE
        .replace("{question}", &item.question)
        .replace("{ground_truth}", &item.ground_truth)
}

/// Request one injected error; a response violating the trace invariants
/// triggers one structured re-request, then a validation error carrying the
/// raw response.
pub fn request_error(
    item: &QuestionItem,
    client: &dyn ErrorGenerator,
) -> Result<InjectedError, DatasetError> {
    item.validate()?;
    let prompt = render_error_prompt(item);
    let mut last_err = None;
    for attempt in 0..2 {
        let trace = client.request_trace(&item.id, &prompt)?;
        match validate_trace(&trace) {
            Ok(()) => {
                return Ok(InjectedError {
                    question_id: item.id.clone(),
                    trace,
                    generator: client.provenance(),
                    created_at: chrono::Utc::now().to_rfc3339(),
                });
            }
            Err(e) => {
                tracing::warn!(attempt, id = %item.id, "generator returned an invalid trace: {e}");
                last_err = Some(e);
            }
        }
    }
    Err(last_err.expect("two attempts recorded an error"))
}

/// One line of an error dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub question_id: String,
    pub question: String,
    pub ground_truth: String,
    pub error_trace: String,
}

/// Build summary written to the sidecar, next to the dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub created_at: String,
    pub generator: String,
    pub requested: usize,
    pub written: usize,
    pub skipped: Vec<String>,
}

/// Generate one error per question and write a JSONL dataset, one record per
/// line in input order. Failed items are logged and skipped; timestamps and
/// the failure summary go to a `<path>.meta.json` sidecar so the dataset
/// itself is byte-stable across rebuilds.
pub fn build_error_dataset(
    items: &[QuestionItem],
    client: &dyn ErrorGenerator,
    path: &Path,
) -> Result<DatasetSidecar, DatasetError> {
    if items.is_empty() {
        return Err(DatasetError::NoItems);
    }
    let mut seen = std::collections::HashSet::new();
    for item in items {
        item.validate()?;
        if !seen.insert(item.id.as_str()) {
            return Err(DatasetError::DuplicateId(item.id.clone()));
        }
    }

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for item in items {
        match request_error(item, client) {
            Ok(err) => records.push(ErrorRecord {
                question_id: item.id.clone(),
                question: item.question.clone(),
                ground_truth: item.ground_truth.clone(),
                error_trace: err.trace,
            }),
            Err(e) => {
                tracing::warn!(id = %item.id, "skipping item: {e}");
                skipped.push(item.id.clone());
            }
        }
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset(items.len()));
    }

    write_jsonl(path, &records)?;
    let sidecar = DatasetSidecar {
        created_at: chrono::Utc::now().to_rfc3339(),
        generator: client.provenance(),
        requested: items.len(),
        written: records.len(),
        skipped,
    };
    let sidecar_path = sidecar_path(path);
    let body = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&sidecar_path, body).map_err(|e| DatasetError::Io {
        path: sidecar_path.display().to_string(),
        source: e,
    })?;
    Ok(sidecar)
}

pub fn sidecar_path(dataset: &Path) -> std::path::PathBuf {
    let mut name = dataset
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    name.push_str(".meta.json");
    dataset.with_file_name(name)
}

/// Serialize records as JSONL, one compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DatasetError::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(&buf).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Parse a JSONL file into records, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let body = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| {
            DatasetError::InvalidItem(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}
