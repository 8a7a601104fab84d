//! The experiment pipeline: each stage reads artifacts, writes artifacts,
//! and records an append-only manifest with content hashes so any stage can
//! be replayed bit-exactly on the deterministic backends.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::{build_contrastive_pairs, mean_pool_answer, AnalysisError, PooledRun};
use crate::backend::{
    generate_full, BackendError, ModelBackend, Script, ScriptedBackend, SteeringSpec,
    TokenSequence, ToyBackend,
};
use crate::client::{
    CachingErrorGenerator, ErrorGenerator, FixtureErrorGenerator, HttpErrorGenerator,
    HttpVerifier, OfflineVerifier, VerifierClient,
};
use crate::config::{BackendKind, Config, ConfigError};
use crate::critique::{
    extract_vector, logit_lens_topk, select_layer, CritiqueVector, SelectionAlphas, VectorError,
};
use crate::harness::{
    accuracy_curve, run_budget_forced, run_detection_suite, DetectionItem, DetectionMetrics,
    HarnessError, TTSRecord,
};
use crate::intervention::{
    build_error_dataset, read_jsonl, write_jsonl, DatasetError, ErrorRecord, QuestionItem,
};
use crate::outcome::{
    aggregate_distribution, classify_run, OutcomeQuadrant, Verdict, VerifyError,
};
use crate::persist::{
    artifact_ref, fmt_float, read_activation_set, read_manifest, read_vector, write_activation_set,
    write_atomic, write_csv, write_manifest, write_vector, ArtifactRef, PersistError, RunManifest,
    Workspace,
};
use crate::plot::{bar_chart, line_chart, Series};
use crate::probe::layer_sweep;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Client(#[from] crate::client::ClientError),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{0}")]
    Stage(String),
}

/// Which error-generator backs the build-errors stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeneratorKind {
    Fixture,
    /// Fixture generator behind a disk cache under the workspace.
    CachedFixture,
    Http { model: String },
}

impl GeneratorKind {
    fn param(&self) -> String {
        match self {
            Self::Fixture => "fixture".to_string(),
            Self::CachedFixture => "cached_fixture".to_string(),
            Self::Http { model } => format!("http:{model}"),
        }
    }

    fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "fixture" => Ok(Self::Fixture),
            "cached_fixture" => Ok(Self::CachedFixture),
            other => match other.strip_prefix("http:") {
                Some(model) => Ok(Self::Http {
                    model: model.to_string(),
                }),
                None => Err(PipelineError::Stage(format!("unknown generator {other:?}"))),
            },
        }
    }
}

/// Build the configured backend.
pub fn build_backend(config: &Config) -> Result<Box<dyn ModelBackend>, PipelineError> {
    match config.backend.kind {
        BackendKind::Toy => Ok(Box::new(ToyBackend::new(config.toy_config())?)),
        BackendKind::Scripted => {
            let path = config.backend.scripts.as_ref().ok_or_else(|| {
                PipelineError::Stage("scripted backend needs backend.scripts".into())
            })?;
            let scripts: Vec<Script> = read_jsonl(Path::new(path))?;
            Ok(Box::new(ScriptedBackend::new(config.toy_config(), scripts)?))
        }
    }
}

/// The verifier client: HTTP when `VERIFIER_ENDPOINT` is set, otherwise the
/// offline boxed-match fallback.
pub fn default_verifier() -> Box<dyn VerifierClient> {
    match HttpVerifier::from_env() {
        Ok(client) => Box::new(client),
        Err(_) => Box::new(OfflineVerifier),
    }
}

/// One classified run, persisted with its verdicts inlined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedRecord {
    pub question_id: String,
    pub kind: RunKind,
    pub quadrant: OutcomeQuadrant,
    pub think_verdict: Verdict,
    pub answer_verdict: Verdict,
    pub unterminated: bool,
    pub transcript: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Baseline,
    Intervened,
}

/// Result of one stage run.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

pub struct Pipeline<'a> {
    pub config: &'a Config,
    pub workspace: &'a Workspace,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a Config, workspace: &'a Workspace) -> Self {
        Self { config, workspace }
    }

    fn finish_stage(
        &self,
        stage: &str,
        params: BTreeMap<String, String>,
        input_paths: &[PathBuf],
        output_paths: &[PathBuf],
        backend_id: String,
    ) -> Result<StageOutput, PipelineError> {
        let inputs: Vec<ArtifactRef> = input_paths
            .iter()
            .map(|p| artifact_ref(self.workspace, p))
            .collect::<Result<_, _>>()?;
        let outputs: Vec<ArtifactRef> = output_paths
            .iter()
            .map(|p| artifact_ref(self.workspace, p))
            .collect::<Result<_, _>>()?;
        let config_toml = self.config.dump();
        let manifest = RunManifest {
            id: RunManifest::derive_id(stage, &config_toml, &params, &inputs),
            stage: stage.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
            backend_id,
            config_toml,
            params,
            inputs,
            outputs,
        };
        let manifest_path = write_manifest(self.workspace, &manifest)?;
        Ok(StageOutput {
            manifest,
            manifest_path,
        })
    }

    /// Generate one injected error per question and write the dataset.
    pub fn build_errors(
        &self,
        items_path: &Path,
        name: &str,
        generator: GeneratorKind,
    ) -> Result<StageOutput, PipelineError> {
        let items: Vec<QuestionItem> = read_jsonl(items_path)?;
        let out_path = self.workspace.datasets().join(format!("{name}.jsonl"));

        let client: Box<dyn ErrorGenerator> = match &generator {
            GeneratorKind::Fixture => Box::new(FixtureErrorGenerator),
            GeneratorKind::CachedFixture => Box::new(CachingErrorGenerator::new(
                FixtureErrorGenerator,
                self.workspace.root().join("cache").join("errorgen"),
            )?),
            GeneratorKind::Http { model } => {
                Box::new(HttpErrorGenerator::from_env(model.clone())?)
            }
        };
        build_error_dataset(&items, client.as_ref(), &out_path)?;

        let params = BTreeMap::from([
            ("items".to_string(), display_path(items_path)),
            ("name".to_string(), name.to_string()),
            ("generator".to_string(), generator.param()),
        ]);
        self.finish_stage(
            "build-errors",
            params,
            &[items_path.to_path_buf()],
            &[out_path],
            "none".to_string(),
        )
    }

    /// Run baseline and intervened generations with full-depth capture,
    /// classify the outcome quadrants, and write records, the quadrant
    /// distributions, and the paired per-layer activation sets.
    pub fn classify(&self, dataset_path: &Path, name: &str) -> Result<StageOutput, PipelineError> {
        let records: Vec<ErrorRecord> = read_jsonl(dataset_path)?;
        if records.is_empty() {
            return Err(PipelineError::MissingArtifact(format!(
                "{} holds no records",
                dataset_path.display()
            )));
        }
        let backend = build_backend(self.config)?;
        let verifier = default_verifier();
        let gen_cfg = self.config.generation_config();
        let layers: Vec<usize> = (0..backend.num_layers()).collect();

        let mut classified = Vec::new();
        let mut baseline_pooled = Vec::new();
        let mut intervened_pooled = Vec::new();
        let mut baseline_quadrants = Vec::new();
        let mut intervened_quadrants = Vec::new();

        for record in &records {
            let prompt = TokenSequence::from_text(backend.as_ref(), &record.question)?;
            let prefill = TokenSequence::from_text(backend.as_ref(), &record.error_trace)?;

            for (kind, prefill_opt) in [
                (RunKind::Baseline, None),
                (RunKind::Intervened, Some(&prefill)),
            ] {
                let (run, captures) = generate_full(
                    backend.as_ref(),
                    &prompt,
                    &gen_cfg,
                    prefill_opt,
                    None,
                    &layers,
                )?;
                let (quadrant, think_verdict, answer_verdict) = classify_run(
                    &run,
                    backend.as_ref(),
                    &record.ground_truth,
                    verifier.as_ref(),
                )?;
                classified.push(ClassifiedRecord {
                    question_id: record.question_id.clone(),
                    kind,
                    quadrant,
                    think_verdict,
                    answer_verdict,
                    unterminated: run.unterminated,
                    transcript: run.tokens.text.clone(),
                });
                let pooled = match mean_pool_answer(&run, &captures) {
                    Ok(pooled) => Some(pooled),
                    Err(AnalysisError::EmptyAnswerSpan) => None,
                    Err(e) => return Err(e.into()),
                };
                let quadrants = match kind {
                    RunKind::Baseline => &mut baseline_quadrants,
                    RunKind::Intervened => &mut intervened_quadrants,
                };
                quadrants.push(quadrant);
                if let Some(pooled) = pooled {
                    let run = PooledRun {
                        question_id: record.question_id.clone(),
                        quadrant,
                        pooled,
                    };
                    match kind {
                        RunKind::Baseline => baseline_pooled.push(run),
                        RunKind::Intervened => intervened_pooled.push(run),
                    }
                }
            }
        }

        let records_path = self.workspace.reports().join(format!("{name}.records.jsonl"));
        write_jsonl(&records_path, &classified)?;

        let quadrants_path = self.workspace.reports().join(format!("{name}.quadrants.csv"));
        let mut rows = Vec::new();
        for (kind, quadrants) in [
            ("baseline", &baseline_quadrants),
            ("intervened", &intervened_quadrants),
        ] {
            let dist = aggregate_distribution(quadrants)?;
            for q in OutcomeQuadrant::ALL {
                rows.push(vec![
                    kind.to_string(),
                    quadrant_label(q).to_string(),
                    dist.count(q).to_string(),
                    fmt_float(dist.proportion(q)),
                ]);
            }
        }
        write_csv(
            &quadrants_path,
            &["run", "quadrant", "count", "proportion"],
            &rows,
        )?;

        let mut outputs = vec![records_path, quadrants_path];
        match build_contrastive_pairs(&baseline_pooled, &intervened_pooled) {
            Ok(sets) => {
                for (layer, set) in &sets {
                    let path = self
                        .workspace
                        .activations()
                        .join(format!("{name}.layer{layer:02}.acts"));
                    write_activation_set(&path, set)?;
                    outputs.push(path);
                }
            }
            Err(AnalysisError::NoPairs { dominant, detail }) => {
                tracing::warn!("no contrastive pairs ({dominant}: {detail}); activations skipped");
            }
            Err(e) => return Err(e.into()),
        }

        let params = BTreeMap::from([
            ("dataset".to_string(), display_path(dataset_path)),
            ("name".to_string(), name.to_string()),
        ]);
        self.finish_stage(
            "classify",
            params,
            &[dataset_path.to_path_buf()],
            &outputs,
            backend.id(),
        )
    }

    fn activation_files(&self, name: &str) -> Result<Vec<(usize, PathBuf)>, PipelineError> {
        let dir = self.workspace.activations();
        let mut found = Vec::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| {
            PipelineError::MissingArtifact(format!("{}: {e}", dir.display()))
        })?;
        for entry in entries.flatten() {
            let file_name = entry.file_name().to_string_lossy().to_string();
            if let Some(rest) = file_name
                .strip_prefix(&format!("{name}.layer"))
                .and_then(|r| r.strip_suffix(".acts"))
            {
                if let Ok(layer) = rest.parse::<usize>() {
                    found.push((layer, entry.path()));
                }
            }
        }
        found.sort_by_key(|(layer, _)| *layer);
        if found.is_empty() {
            return Err(PipelineError::MissingArtifact(format!(
                "no activation sets named {name}.layerNN.acts under {}",
                dir.display()
            )));
        }
        Ok(found)
    }

    /// Train probes per layer on the ID sets, evaluate ID validation and OOD,
    /// and write the sweep table.
    pub fn probe_sweep(
        &self,
        id_name: &str,
        ood_name: &str,
        out_name: &str,
    ) -> Result<StageOutput, PipelineError> {
        let id_files = self.activation_files(id_name)?;
        let ood_files = self.activation_files(ood_name)?;
        let mut id_sets = BTreeMap::new();
        for (layer, path) in &id_files {
            id_sets.insert(*layer, read_activation_set(path)?);
        }
        let mut ood_sets = BTreeMap::new();
        for (layer, path) in &ood_files {
            ood_sets.insert(*layer, read_activation_set(path)?);
        }

        let table = layer_sweep(&id_sets, &ood_sets, &self.config.sweep_options())?;
        let csv_path = self.workspace.reports().join(format!("{out_name}.sweep.csv"));
        let rows: Vec<Vec<String>> = table
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.layer.to_string(),
                    fmt_float(r.auroc_id),
                    fmt_float(r.ece_id),
                    fmt_float(r.auroc_ood),
                    fmt_float(r.ece_ood),
                ]
            })
            .collect();
        write_csv(
            &csv_path,
            &["layer", "auroc_id", "ece_id", "auroc_ood", "ece_ood"],
            &rows,
        )?;
        let best_path = self
            .workspace
            .reports()
            .join(format!("{out_name}.sweep.json"));
        let mut body = serde_json::to_vec_pretty(&table).expect("table serializes");
        body.push(b'\n');
        write_atomic(&best_path, &body)?;

        let inputs: Vec<PathBuf> = id_files
            .iter()
            .chain(&ood_files)
            .map(|(_, p)| p.clone())
            .collect();
        let params = BTreeMap::from([
            ("id".to_string(), id_name.to_string()),
            ("ood".to_string(), ood_name.to_string()),
            ("out".to_string(), out_name.to_string()),
        ]);
        self.finish_stage(
            "probe-sweep",
            params,
            &inputs,
            &[csv_path, best_path],
            "none".to_string(),
        )
    }

    /// Extract the difference-in-means vector at one layer (or all layers).
    pub fn extract_vector(
        &self,
        acts_name: &str,
        layer: Option<usize>,
    ) -> Result<StageOutput, PipelineError> {
        let files = self.activation_files(acts_name)?;
        let chosen: Vec<&(usize, PathBuf)> = match layer {
            Some(l) => files.iter().filter(|(fl, _)| *fl == l).collect(),
            None => files.iter().collect(),
        };
        if chosen.is_empty() {
            return Err(PipelineError::MissingArtifact(format!(
                "no activation set for layer {layer:?} under name {acts_name}"
            )));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (l, path) in chosen {
            let set = read_activation_set(path)?;
            let vector = extract_vector(&set, acts_name)?;
            let out = self
                .workspace
                .vectors()
                .join(format!("{acts_name}.layer{l:02}.json"));
            write_vector(&out, &vector)?;
            inputs.push(path.clone());
            outputs.push(out);
        }
        let params = BTreeMap::from([
            ("acts".to_string(), acts_name.to_string()),
            (
                "layer".to_string(),
                layer.map_or("all".to_string(), |l| l.to_string()),
            ),
        ]);
        self.finish_stage("extract-vector", params, &inputs, &outputs, "none".to_string())
    }

    /// Project a stored vector through the unembedding and write the top-k
    /// token table.
    pub fn lens(
        &self,
        vector_path: &Path,
        k: usize,
        out_name: &str,
    ) -> Result<StageOutput, PipelineError> {
        let vector = read_vector(vector_path)?;
        let backend = build_backend(self.config)?;
        let entries = logit_lens_topk(&vector, k, backend.as_ref())?;
        let csv_path = self.workspace.reports().join(format!("{out_name}.lens.csv"));
        let rows: Vec<Vec<String>> = entries
            .iter()
            .map(|e| {
                vec![
                    e.rank.to_string(),
                    e.token.clone(),
                    e.token_id.to_string(),
                    fmt_float(e.logit),
                ]
            })
            .collect();
        write_csv(&csv_path, &["rank", "token", "token_id", "logit"], &rows)?;

        let params = BTreeMap::from([
            ("vector".to_string(), display_path(vector_path)),
            ("k".to_string(), k.to_string()),
            ("out".to_string(), out_name.to_string()),
        ]);
        self.finish_stage(
            "lens",
            params,
            &[vector_path.to_path_buf()],
            &[csv_path],
            backend.id(),
        )
    }

    /// Evaluate steering at every layer's own vector under negative, zero,
    /// and positive coefficients on the error dataset (budget-forcing with
    /// zero budget) and pick the layer with the largest accuracy gap.
    pub fn select_layer(
        &self,
        dataset_path: &Path,
        vectors_name: &str,
        out_name: &str,
    ) -> Result<StageOutput, PipelineError> {
        let records: Vec<ErrorRecord> = read_jsonl(dataset_path)?;
        let backend = build_backend(self.config)?;
        let verifier = default_verifier();
        let eval_cfg = self.config.evaluation_config();

        let mut vector_paths = Vec::new();
        let mut vectors: BTreeMap<usize, CritiqueVector> = BTreeMap::new();
        for layer in 0..backend.num_layers() {
            let path = self
                .workspace
                .vectors()
                .join(format!("{vectors_name}.layer{layer:02}.json"));
            if !path.exists() {
                return Err(PipelineError::MissingArtifact(format!(
                    "vector file {} (extract-vector over all layers first)",
                    path.display()
                )));
            }
            vectors.insert(layer, read_vector(&path)?);
            vector_paths.push(path);
        }

        let layers: Vec<usize> = (0..backend.num_layers()).collect();
        let report = select_layer(
            |layer, alpha| {
                let vector = &vectors[&layer];
                let spec = SteeringSpec {
                    layer,
                    vector: vector.vector.clone(),
                    alpha,
                    position_scope: self.config.steering.position_scope,
                };
                let mut correct = 0usize;
                for record in &records {
                    let item = QuestionItem::new(
                        record.question_id.clone(),
                        record.question.clone(),
                        record.ground_truth.clone(),
                        crate::intervention::SourceDataset::Custom,
                    )
                    .map_err(|e| e.to_string())?;
                    let (tts, _) = run_budget_forced(
                        &item,
                        &record.error_trace,
                        backend.as_ref(),
                        Some(&spec),
                        &eval_cfg,
                        0,
                        verifier.as_ref(),
                    )
                    .map_err(|e| e.to_string())?;
                    if tts.final_answer_correct {
                        correct += 1;
                    }
                }
                Ok(correct as f64 / records.len() as f64)
            },
            &layers,
            SelectionAlphas::default(),
        )?;

        let csv_path = self
            .workspace
            .reports()
            .join(format!("{out_name}.layer_selection.csv"));
        let rows: Vec<Vec<String>> = report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.layer.to_string(),
                    fmt_float(r.acc_zero),
                    fmt_float(r.acc_neg),
                    fmt_float(r.acc_pos),
                    fmt_float(r.delta()),
                ]
            })
            .collect();
        write_csv(
            &csv_path,
            &["layer", "acc_zero", "acc_neg", "acc_pos", "delta"],
            &rows,
        )?;
        let json_path = self
            .workspace
            .reports()
            .join(format!("{out_name}.layer_selection.json"));
        let mut body = serde_json::to_vec_pretty(&report).expect("report serializes");
        body.push(b'\n');
        write_atomic(&json_path, &body)?;

        let mut inputs = vec![dataset_path.to_path_buf()];
        inputs.extend(vector_paths);
        let params = BTreeMap::from([
            ("dataset".to_string(), display_path(dataset_path)),
            ("vectors".to_string(), vectors_name.to_string()),
            ("out".to_string(), out_name.to_string()),
        ]);
        self.finish_stage(
            "select-layer",
            params,
            &inputs,
            &[csv_path, json_path],
            backend.id(),
        )
    }

    /// Run the detection suite at every configured steering coefficient.
    pub fn detect(
        &self,
        items_path: &Path,
        vector_path: Option<&Path>,
        out_name: &str,
    ) -> Result<StageOutput, PipelineError> {
        let items: Vec<DetectionItem> = read_jsonl(items_path)?;
        let backend = build_backend(self.config)?;
        let eval_cfg = self.config.evaluation_config();
        let vector = vector_path.map(read_vector).transpose()?;

        let alphas: Vec<f64> = match &vector {
            Some(_) => self.config.steering.alphas.clone(),
            None => vec![0.0],
        };

        let mut metric_rows = Vec::new();
        let mut outputs = Vec::new();
        for &alpha in &alphas {
            let spec = vector.as_ref().map(|v| SteeringSpec {
                layer: v.layer,
                vector: v.vector.clone(),
                alpha,
                position_scope: self.config.steering.position_scope,
            });
            let (metrics, records) =
                run_detection_suite(&items, backend.as_ref(), spec.as_ref(), &eval_cfg)?;
            let records_path = self
                .workspace
                .reports()
                .join(format!("{out_name}.detect.alpha{}.jsonl", alpha_tag(alpha)));
            write_jsonl(&records_path, &records)?;
            outputs.push(records_path);
            metric_rows.push(metrics_row(alpha, &metrics));
        }

        let csv_path = self
            .workspace
            .reports()
            .join(format!("{out_name}.detect.csv"));
        write_csv(
            &csv_path,
            &[
                "alpha",
                "error_accuracy",
                "correct_accuracy",
                "f1",
                "n_error",
                "n_correct",
            ],
            &metric_rows,
        )?;
        outputs.insert(0, csv_path);

        let mut inputs = vec![items_path.to_path_buf()];
        if let Some(p) = vector_path {
            inputs.push(p.to_path_buf());
        }
        let params = BTreeMap::from([
            ("items".to_string(), display_path(items_path)),
            (
                "vector".to_string(),
                vector_path.map(display_path).unwrap_or_default(),
            ),
            ("out".to_string(), out_name.to_string()),
        ]);
        self.finish_stage("detect", params, &inputs, &outputs, backend.id())
    }

    /// Budget-forced test-time scaling over the configured iteration and
    /// coefficient grid.
    pub fn tts(
        &self,
        dataset_path: &Path,
        vector_path: Option<&Path>,
        out_name: &str,
    ) -> Result<StageOutput, PipelineError> {
        let records: Vec<ErrorRecord> = read_jsonl(dataset_path)?;
        let backend = build_backend(self.config)?;
        let verifier = default_verifier();
        let eval_cfg = self.config.evaluation_config();
        let vector = vector_path.map(read_vector).transpose()?;
        let alphas: Vec<f64> = match &vector {
            Some(_) => self.config.steering.alphas.clone(),
            None => vec![0.0],
        };

        let mut tts_records: Vec<TTSRecord> = Vec::new();
        for &budget in &self.config.tts.iterations {
            for &alpha in &alphas {
                let spec = vector.as_ref().map(|v| SteeringSpec {
                    layer: v.layer,
                    vector: v.vector.clone(),
                    alpha,
                    position_scope: self.config.steering.position_scope,
                });
                for record in &records {
                    let item = QuestionItem::new(
                        record.question_id.clone(),
                        record.question.clone(),
                        record.ground_truth.clone(),
                        crate::intervention::SourceDataset::Custom,
                    )?;
                    let (tts, _) = run_budget_forced(
                        &item,
                        &record.error_trace,
                        backend.as_ref(),
                        spec.as_ref(),
                        &eval_cfg,
                        budget,
                        verifier.as_ref(),
                    )?;
                    tts_records.push(tts);
                }
            }
        }

        let records_path = self
            .workspace
            .reports()
            .join(format!("{out_name}.tts.jsonl"));
        write_jsonl(&records_path, &tts_records)?;

        let curve = accuracy_curve(&tts_records);
        let curve_path = self.workspace.reports().join(format!("{out_name}.tts.csv"));
        let rows: Vec<Vec<String>> = curve
            .cells
            .iter()
            .map(|c| {
                vec![
                    c.iterations.to_string(),
                    fmt_float(c.alpha),
                    c.n.to_string(),
                    c.correct.to_string(),
                    fmt_float(c.accuracy),
                ]
            })
            .collect();
        write_csv(
            &curve_path,
            &["iterations", "alpha", "n", "correct", "accuracy"],
            &rows,
        )?;

        let mut inputs = vec![dataset_path.to_path_buf()];
        if let Some(p) = vector_path {
            inputs.push(p.to_path_buf());
        }
        let params = BTreeMap::from([
            ("dataset".to_string(), display_path(dataset_path)),
            (
                "vector".to_string(),
                vector_path.map(display_path).unwrap_or_default(),
            ),
            ("out".to_string(), out_name.to_string()),
        ]);
        self.finish_stage(
            "tts",
            params,
            &inputs,
            &[records_path, curve_path],
            backend.id(),
        )
    }

    /// Draw plots from previously written records and tables.
    pub fn report(
        &self,
        classify_records: Option<&Path>,
        detect_csv: Option<&Path>,
        tts_records: Option<&Path>,
        out_name: &str,
    ) -> Result<StageOutput, PipelineError> {
        if classify_records.is_none() && detect_csv.is_none() && tts_records.is_none() {
            return Err(PipelineError::Stage(
                "report needs at least one input (classify records, detect table, tts records)"
                    .into(),
            ));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();

        if let Some(path) = classify_records {
            let records: Vec<ClassifiedRecord> = read_jsonl(path)?;
            for kind in [RunKind::Baseline, RunKind::Intervened] {
                let quadrants: Vec<OutcomeQuadrant> = records
                    .iter()
                    .filter(|r| r.kind == kind)
                    .map(|r| r.quadrant)
                    .collect();
                if quadrants.is_empty() {
                    continue;
                }
                let dist = aggregate_distribution(&quadrants)?;
                let bars: Vec<(String, f64)> = OutcomeQuadrant::ALL
                    .iter()
                    .map(|&q| (quadrant_label(q).to_string(), dist.proportion(q)))
                    .collect();
                let tag = match kind {
                    RunKind::Baseline => "baseline",
                    RunKind::Intervened => "intervened",
                };
                let svg = bar_chart(
                    &format!("Outcome distribution ({tag})"),
                    "proportion",
                    &bars,
                );
                let out = self
                    .workspace
                    .reports()
                    .join(format!("{out_name}.quadrants.{tag}.svg"));
                write_atomic(&out, svg.as_bytes())?;
                outputs.push(out);
            }
            inputs.push(path.to_path_buf());
        }

        if let Some(path) = detect_csv {
            let table = read_detect_csv(path)?;
            let mut series = Vec::new();
            for (name, idx) in [("error accuracy", 1), ("correct accuracy", 2), ("f1", 3)] {
                let points: Vec<(f64, f64)> = table
                    .iter()
                    .filter_map(|row| row[idx].map(|y| (row[0].expect("alpha present"), y)))
                    .collect();
                if !points.is_empty() {
                    series.push(Series {
                        name: name.to_string(),
                        points,
                    });
                }
            }
            let svg = line_chart(
                "Detection metrics vs steering coefficient",
                "alpha",
                "metric",
                &series,
                Some(0.0),
            );
            let out = self
                .workspace
                .reports()
                .join(format!("{out_name}.detect.svg"));
            write_atomic(&out, svg.as_bytes())?;
            outputs.push(out);
            inputs.push(path.to_path_buf());
        }

        if let Some(path) = tts_records {
            let records: Vec<TTSRecord> = read_jsonl(path)?;
            let curve = accuracy_curve(&records);
            let mut series = Vec::new();
            for &alpha in &curve.alphas {
                let points: Vec<(f64, f64)> = curve
                    .cells
                    .iter()
                    .filter(|c| c.alpha == alpha)
                    .map(|c| (c.iterations as f64, c.accuracy))
                    .collect();
                series.push(Series {
                    name: format!("alpha {alpha}"),
                    points,
                });
            }
            let svg = line_chart(
                "Accuracy vs forced iterations",
                "iterations",
                "accuracy",
                &series,
                None,
            );
            let out = self.workspace.reports().join(format!("{out_name}.tts.svg"));
            write_atomic(&out, svg.as_bytes())?;
            outputs.push(out);
            inputs.push(path.to_path_buf());
        }

        let params = BTreeMap::from([
            (
                "classify".to_string(),
                classify_records.map(display_path).unwrap_or_default(),
            ),
            (
                "detect".to_string(),
                detect_csv.map(display_path).unwrap_or_default(),
            ),
            (
                "tts".to_string(),
                tts_records.map(display_path).unwrap_or_default(),
            ),
            ("out".to_string(), out_name.to_string()),
        ]);
        self.finish_stage("report", params, &inputs, &outputs, "none".to_string())
    }
}

/// Re-run the stage a manifest records, using its config snapshot, and
/// verify every regenerated artifact hashes to the recorded value.
pub fn replay_manifest(
    workspace: &Workspace,
    manifest_path: &Path,
) -> Result<ReplayReport, PipelineError> {
    let manifest = read_manifest(manifest_path)?;
    let config = crate::config::parse_config(&manifest.config_toml)?;
    let pipeline = Pipeline::new(&config, workspace);
    let p = |key: &str| -> Result<String, PipelineError> {
        manifest
            .params
            .get(key)
            .cloned()
            .ok_or_else(|| PipelineError::Stage(format!("manifest lacks param {key:?}")))
    };
    let opt = |key: &str| -> Option<PathBuf> {
        manifest
            .params
            .get(key)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    };

    let rerun = match manifest.stage.as_str() {
        "build-errors" => pipeline.build_errors(
            Path::new(&p("items")?),
            &p("name")?,
            GeneratorKind::parse(&p("generator")?)?,
        )?,
        "classify" => pipeline.classify(Path::new(&p("dataset")?), &p("name")?)?,
        "probe-sweep" => pipeline.probe_sweep(&p("id")?, &p("ood")?, &p("out")?)?,
        "extract-vector" => {
            let layer = match p("layer")?.as_str() {
                "all" => None,
                n => Some(n.parse::<usize>().map_err(|e| {
                    PipelineError::Stage(format!("bad layer param: {e}"))
                })?),
            };
            pipeline.extract_vector(&p("acts")?, layer)?
        }
        "lens" => pipeline.lens(
            Path::new(&p("vector")?),
            p("k")?.parse::<usize>().map_err(|e| {
                PipelineError::Stage(format!("bad k param: {e}"))
            })?,
            &p("out")?,
        )?,
        "select-layer" => pipeline.select_layer(
            Path::new(&p("dataset")?),
            &p("vectors")?,
            &p("out")?,
        )?,
        "detect" => pipeline.detect(
            Path::new(&p("items")?),
            opt("vector").as_deref(),
            &p("out")?,
        )?,
        "tts" => pipeline.tts(
            Path::new(&p("dataset")?),
            opt("vector").as_deref(),
            &p("out")?,
        )?,
        "report" => pipeline.report(
            opt("classify").as_deref(),
            opt("detect").as_deref(),
            opt("tts").as_deref(),
            &p("out")?,
        )?,
        other => {
            return Err(PipelineError::Stage(format!(
                "manifest names unknown stage {other:?}"
            )))
        }
    };

    let mut artifacts = Vec::new();
    let mut all_match = true;
    for expected in &manifest.outputs {
        let regenerated = rerun
            .manifest
            .outputs
            .iter()
            .find(|o| o.path == expected.path);
        let matched = regenerated.map_or(false, |r| r.sha256 == expected.sha256);
        all_match &= matched;
        artifacts.push(ReplayArtifact {
            path: expected.path.clone(),
            expected_sha256: expected.sha256.clone(),
            actual_sha256: regenerated.map(|r| r.sha256.clone()),
            matched,
        });
    }
    Ok(ReplayReport {
        stage: manifest.stage,
        manifest_id: manifest.id,
        artifacts,
        all_match,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayArtifact {
    pub path: String,
    pub expected_sha256: String,
    pub actual_sha256: Option<String>,
    pub matched: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub stage: String,
    pub manifest_id: String,
    pub artifacts: Vec<ReplayArtifact>,
    pub all_match: bool,
}

fn display_path(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

fn quadrant_label(q: OutcomeQuadrant) -> &'static str {
    match q {
        OutcomeQuadrant::ThinkOkAnswerOk => "think ok / answer ok",
        OutcomeQuadrant::ThinkOkAnswerBad => "think ok / answer bad",
        OutcomeQuadrant::ThinkBadAnswerOk => "think bad / answer ok",
        OutcomeQuadrant::ThinkBadAnswerBad => "think bad / answer bad",
    }
}

fn alpha_tag(alpha: f64) -> String {
    let mut tag = format!("{alpha}");
    tag = tag.replace('-', "m").replace('.', "p");
    tag
}

fn metrics_row(alpha: f64, metrics: &DetectionMetrics) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    vec![
        fmt_float(alpha),
        opt(metrics.error_accuracy),
        opt(metrics.correct_accuracy),
        opt(metrics.f1),
        metrics.n_error.to_string(),
        metrics.n_correct.to_string(),
    ]
}

/// Parse the detection metrics table back into optional columns
/// (alpha, error, correct, f1).
fn read_detect_csv(path: &Path) -> Result<Vec<[Option<f64>; 4]>, PipelineError> {
    let body = std::fs::read_to_string(path).map_err(|e| {
        PipelineError::MissingArtifact(format!("{}: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 4 {
            return Err(PipelineError::Stage(format!(
                "{}:{}: expected at least 4 columns",
                path.display(),
                i + 1
            )));
        }
        let parse = |s: &str| -> Option<f64> { s.parse::<f64>().ok() };
        out.push([
            parse(cells[0]),
            parse(cells[1]),
            parse(cells[2]),
            parse(cells[3]),
        ]);
    }
    Ok(out)
}
