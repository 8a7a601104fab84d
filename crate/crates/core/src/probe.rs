//! Layer-wise linear probes over pooled activations, with rank-based AUROC,
//! binned calibration error, and the ID/OOD layer sweep.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationSet, AnalysisError};

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Decay from the base rate to zero over the epoch count.
    #[default]
    Cosine,
    Constant,
}

/// Probe training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            schedule: Schedule::Cosine,
            seed: 0,
            weight_decay: 0.01,
        }
    }
}

/// Provenance of a trained probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub final_train_accuracy: f64,
}

/// A two-class affine probe: scores(x) = W x + b with W in R^{2 x d}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub layer: usize,
    pub weights: [Vec<f64>; 2],
    pub bias: [f64; 2],
    pub training_meta: TrainingMeta,
}

impl ProbeModel {
    pub fn scores(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [self.bias[0], self.bias[1]];
        for c in 0..2 {
            for (w, &v) in self.weights[c].iter().zip(x) {
                out[c] += w * v;
            }
        }
        out
    }

    pub fn probabilities(&self, x: &[f64]) -> [f64; 2] {
        let s = self.scores(x);
        let m = s[0].max(s[1]);
        let e0 = (s[0] - m).exp();
        let e1 = (s[1] - m).exp();
        let z = e0 + e1;
        [e0 / z, e1 / z]
    }

    /// Probability of the intervened class (label true).
    pub fn positive_probability(&self, x: &[f64]) -> f64 {
        self.probabilities(x)[1]
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        let p = self.probabilities(x);
        p[1] > p[0]
    }

    /// Softmax probability of the predicted class.
    pub fn confidence(&self, x: &[f64]) -> f64 {
        let p = self.probabilities(x);
        p[0].max(p[1])
    }
}

fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

/// Train a two-class probe with full-batch AdamW and the configured
/// learning-rate schedule. Bit-reproducible for a fixed seed.
pub fn train_probe(set: &ActivationSet, hyper: &ProbeHyper) -> Result<ProbeModel, AnalysisError> {
    set.validate()?;
    let n = set.len();
    let d = set.dim();
    let n_pos = set.labels.iter().filter(|&&l| l).count();
    if n == 0 || n_pos == 0 || n_pos == n {
        return Err(AnalysisError::SingleClass);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = vec![0.0f64; 2 * d + 2];
    for p in params.iter_mut().take(2 * d) {
        *p = (rng.random::<f64>() * 2.0 - 1.0) * 0.01;
    }

    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0f64; params.len()];
    let mut v = vec![0.0f64; params.len()];
    let mut grad = vec![0.0f64; params.len()];

    for epoch in 0..hyper.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &label) in set.vectors.iter().zip(&set.labels) {
            let mut s = [params[2 * d], params[2 * d + 1]];
            for c in 0..2 {
                for (j, &xv) in x.iter().enumerate() {
                    s[c] += params[c * d + j] * xv;
                }
            }
            let mx = s[0].max(s[1]);
            let e = [(s[0] - mx).exp(), (s[1] - mx).exp()];
            let z = e[0] + e[1];
            let p = [e[0] / z, e[1] / z];
            let y = usize::from(label);
            for c in 0..2 {
                let g_logit = (p[c] - if c == y { 1.0 } else { 0.0 }) / n as f64;
                for (j, &xv) in x.iter().enumerate() {
                    grad[c * d + j] += g_logit * xv;
                }
                grad[2 * d + c] += g_logit;
            }
        }

        let lr = match hyper.schedule {
            Schedule::Cosine => cosine_lr(hyper.learning_rate, epoch, hyper.epochs),
            Schedule::Constant => hyper.learning_rate,
        };
        let t = (epoch + 1) as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for i in 0..params.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            // decoupled weight decay on weights only, not biases
            let decay = if i < 2 * d { hyper.weight_decay * params[i] } else { 0.0 };
            params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay);
        }
    }

    let weights = [params[..d].to_vec(), params[d..2 * d].to_vec()];
    let bias = [params[2 * d], params[2 * d + 1]];
    let model = ProbeModel {
        layer: set.layer,
        weights,
        bias,
        training_meta: TrainingMeta {
            epochs: hyper.epochs,
            learning_rate: hyper.learning_rate,
            schedule: hyper.schedule,
            seed: hyper.seed,
            final_train_accuracy: 0.0,
        },
    };
    let correct = set
        .vectors
        .iter()
        .zip(&set.labels)
        .filter(|(x, &l)| model.predict(x) == l)
        .count();
    let mut model = model;
    model.training_meta.final_train_accuracy = correct as f64 / n as f64;
    Ok(model)
}

/// Rank-based (Mann-Whitney) AUROC; tied scores receive average ranks, so a
/// fully tied input scores exactly 0.5. Invariant under strictly monotone
/// transforms of the scores.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, AnalysisError> {
    if scores.len() != labels.len() {
        return Err(AnalysisError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(AnalysisError::InvalidScores("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AnalysisError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tied block
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Expected calibration error with equal-width bins over (0, 1]:
/// `sum over bins of (n_b / N) * |acc_b - conf_b|`; empty bins contribute 0.
/// Confidence 0.0 falls into the first bin.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64, AnalysisError> {
    if bins < 1 {
        return Err(AnalysisError::InvalidBins(bins));
    }
    if confidences.len() != correct.len() {
        return Err(AnalysisError::LengthMismatch(
            confidences.len(),
            correct.len(),
        ));
    }
    if confidences.is_empty() {
        return Err(AnalysisError::InvalidScores("empty confidence list".into()));
    }
    for &c in confidences {
        if !(0.0..=1.0).contains(&c) {
            return Err(AnalysisError::InvalidScores(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
    }

    let n = confidences.len();
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = if c <= 0.0 {
            0
        } else {
            ((c * bins as f64).ceil() as usize - 1).min(bins - 1)
        };
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            hits[b] += 1;
        }
    }
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let acc = hits[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += (count[b] as f64 / n as f64) * (acc - conf).abs();
    }
    Ok(total)
}

/// Split an activation set (1 - fraction)/fraction by question id, so paired
/// rows never straddle the split. Deterministic for a fixed seed.
pub fn split_by_question(
    set: &ActivationSet,
    validation_fraction: f64,
    seed: u64,
) -> (ActivationSet, ActivationSet) {
    let mut ids: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for id in &set.question_ids {
        if seen.insert(id.as_str()) {
            ids.push(id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = ((ids.len() as f64 * validation_fraction).round() as usize)
        .clamp(1, ids.len().saturating_sub(1).max(1));
    let val_ids: std::collections::HashSet<&str> = ids[..n_val].iter().copied().collect();

    let mut train = ActivationSet::new(set.layer);
    let mut val = ActivationSet::new(set.layer);
    for i in 0..set.len() {
        let dst = if val_ids.contains(set.question_ids[i].as_str()) {
            &mut val
        } else {
            &mut train
        };
        dst.push(
            set.question_ids[i].clone(),
            set.labels[i],
            set.vectors[i].clone(),
        );
    }
    (train, val)
}

/// Per-dimension standardization fitted on one set and applied to others.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(set: &ActivationSet) -> Self {
        let d = set.dim();
        let n = set.len().max(1) as f64;
        let mut mean = vec![0.0f64; d];
        for row in &set.vectors {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for row in &set.vectors {
            for (j, &x) in row.iter().enumerate() {
                var[j] += (x - mean[j]).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, set: &ActivationSet) -> ActivationSet {
        let mut out = ActivationSet::new(set.layer);
        for i in 0..set.len() {
            let row = set.vectors[i]
                .iter()
                .enumerate()
                .map(|(j, &x)| (x - self.mean[j]) / self.scale[j])
                .collect();
            out.push(set.question_ids[i].clone(), set.labels[i], row);
        }
        out
    }
}

/// Probe metrics for one evaluation set.
pub fn evaluate_probe(
    model: &ProbeModel,
    set: &ActivationSet,
    ece_bins: usize,
) -> Result<(f64, f64), AnalysisError> {
    let scores: Vec<f64> = set
        .vectors
        .iter()
        .map(|x| model.positive_probability(x))
        .collect();
    let roc = auroc(&scores, &set.labels)?;
    let confidences: Vec<f64> = set.vectors.iter().map(|x| model.confidence(x)).collect();
    let correct: Vec<bool> = set
        .vectors
        .iter()
        .zip(&set.labels)
        .map(|(x, &l)| model.predict(x) == l)
        .collect();
    let cal = ece(&confidences, &correct, ece_bins)?;
    Ok((roc, cal))
}

/// Options for the layer sweep beyond the probe hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub hyper: ProbeHyper,
    pub ece_bins: usize,
    pub validation_fraction: f64,
    pub standardize: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            hyper: ProbeHyper::default(),
            ece_bins: 10,
            validation_fraction: 0.1,
            standardize: false,
        }
    }
}

/// One row of the sweep table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub auroc_id: f64,
    pub ece_id: f64,
    pub auroc_ood: f64,
    pub ece_ood: f64,
}

/// Sweep table plus the selected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best_layer: usize,
}

/// Highest ID AUROC wins; ties break toward lower ID ECE, then lower layer.
pub fn select_best_row(rows: &[SweepRow]) -> Result<usize, AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::NoLayers);
    }
    let mut best = &rows[0];
    for row in &rows[1..] {
        let better = row.auroc_id > best.auroc_id
            || (row.auroc_id == best.auroc_id && row.ece_id < best.ece_id)
            || (row.auroc_id == best.auroc_id
                && row.ece_id == best.ece_id
                && row.layer < best.layer);
        if better {
            best = row;
        }
    }
    Ok(best.layer)
}

/// Train a probe per layer on the ID training split, evaluate on the ID
/// validation split and the full OOD set, and select the best layer.
pub fn layer_sweep(
    id_sets: &std::collections::BTreeMap<usize, ActivationSet>,
    ood_sets: &std::collections::BTreeMap<usize, ActivationSet>,
    options: &SweepOptions,
) -> Result<SweepTable, AnalysisError> {
    if id_sets.is_empty() {
        return Err(AnalysisError::NoLayers);
    }
    let mut rows = Vec::with_capacity(id_sets.len());
    for (&layer, id_set) in id_sets {
        let ood = ood_sets
            .get(&layer)
            .ok_or(AnalysisError::MissingLayer(layer, "out-of-distribution"))?;
        let (train, val) = split_by_question(id_set, options.validation_fraction, options.hyper.seed);
        let (train, val, ood_eval) = if options.standardize {
            let std = Standardizer::fit(&train);
            (std.apply(&train), std.apply(&val), std.apply(ood))
        } else {
            (train, val, ood.clone())
        };
        let model = train_probe(&train, &options.hyper)?;
        let (auroc_id, ece_id) = evaluate_probe(&model, &val, options.ece_bins)?;
        let (auroc_ood, ece_ood) = evaluate_probe(&model, &ood_eval, options.ece_bins)?;
        rows.push(SweepRow {
            layer,
            auroc_id,
            ece_id,
            auroc_ood,
            ece_ood,
        });
    }
    let best_layer = select_best_row(&rows)?;
    Ok(SweepTable { rows, best_layer })
}
