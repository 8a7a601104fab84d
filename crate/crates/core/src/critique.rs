//! The critique vector: a per-layer difference-in-means over contrastive
//! activation pairs, its logit-lens reading, and steering-layer selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::ActivationSet;
use crate::backend::{BackendError, ModelBackend, TokenId};

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("rows without a counterpart: question ids {0:?}")]
    Orphans(Vec<String>),
    #[error("activation set is empty")]
    Empty,
    #[error("vector dimension {got} does not match backend hidden size {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("layer set is empty")]
    NoLayers,
    #[error("evaluation failed at layer {layer}, alpha {alpha}: {message}")]
    EvalFailed {
        layer: usize,
        alpha: f64,
        message: String,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Per-layer steering direction with provenance. The vector is stored
/// unnormalized (raw mean difference), so a steering coefficient of 1.0
/// applies one full mean difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueVector {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub pair_count: usize,
    pub source: String,
    pub norm: f64,
}

impl CritiqueVector {
    /// Unit-length copy for cross-model comparisons.
    pub fn normalized(&self) -> CritiqueVector {
        let mut out = self.clone();
        if self.norm > 0.0 {
            for x in out.vector.iter_mut() {
                *x /= self.norm;
            }
            out.norm = 1.0;
        }
        out
    }
}

fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean over questions of (intervened - baseline), computed pairwise.
///
/// Every question id in the set must contribute exactly one baseline and one
/// intervened row; otherwise the orphan ids are reported.
pub fn extract_vector(pairs: &ActivationSet, source: &str) -> Result<CritiqueVector, VectorError> {
    if pairs.is_empty() {
        return Err(VectorError::Empty);
    }
    use std::collections::BTreeMap;
    let mut baseline: BTreeMap<&str, &Vec<f64>> = BTreeMap::new();
    let mut intervened: BTreeMap<&str, &Vec<f64>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for i in 0..pairs.len() {
        let id = pairs.question_ids[i].as_str();
        let slot = if pairs.labels[i] {
            &mut intervened
        } else {
            &mut baseline
        };
        if slot.insert(id, &pairs.vectors[i]).is_none() && !order.contains(&id) {
            order.push(id);
        }
    }
    let orphans: Vec<String> = order
        .iter()
        .filter(|id| !(baseline.contains_key(*id) && intervened.contains_key(*id)))
        .map(|id| id.to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(VectorError::Orphans(orphans));
    }

    let d = pairs.dim();
    let mut acc = vec![0.0f64; d];
    for id in &order {
        let base = baseline[id];
        let interv = intervened[id];
        for j in 0..d {
            acc[j] += interv[j] - base[j];
        }
    }
    let n = order.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    let norm = euclidean_norm(&acc);
    Ok(CritiqueVector {
        layer: pairs.layer,
        vector: acc,
        pair_count: order.len(),
        source: source.to_string(),
        norm,
    })
}

/// One row of a logit-lens reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub rank: usize,
    pub token_id: TokenId,
    pub token: String,
    pub logit: f64,
}

/// Project the vector through the backend's unembedding and return the top-k
/// tokens by logit, descending, ties broken by vocabulary index. A `k` beyond
/// the vocabulary is clipped with a warning.
pub fn logit_lens_topk(
    vector: &CritiqueVector,
    k: usize,
    backend: &dyn ModelBackend,
) -> Result<Vec<LensEntry>, VectorError> {
    let unembedding = backend.unembedding_matrix()?;
    if vector.vector.len() != unembedding.hidden_size {
        return Err(VectorError::DimensionMismatch {
            got: vector.vector.len(),
            expected: unembedding.hidden_size,
        });
    }
    let logits = unembedding.project(&vector.vector);
    let k = if k > logits.len() {
        tracing::warn!(k, vocab = logits.len(), "top-k clipped to vocabulary size");
        logits.len()
    } else {
        k
    };
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    let mut out = Vec::with_capacity(k);
    for (rank, &token_id) in order.iter().take(k).enumerate() {
        let token = backend
            .detokenize(&[token_id as TokenId])
            .unwrap_or_else(|_| format!("<{token_id}>"));
        out.push(LensEntry {
            rank: rank + 1,
            token_id: token_id as TokenId,
            token,
            logit: logits[token_id],
        });
    }
    Ok(out)
}

/// Accuracy of one layer under negative, zero, and positive steering, as
/// percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSelectionRow {
    pub layer: usize,
    pub acc_neg: f64,
    pub acc_zero: f64,
    pub acc_pos: f64,
}

impl LayerSelectionRow {
    pub fn delta(&self) -> f64 {
        self.acc_pos - self.acc_neg
    }
}

/// Result of the steering-layer search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelectionReport {
    pub rows: Vec<LayerSelectionRow>,
    pub selected_layer: usize,
    /// acc_pos - acc_neg at the selected layer, in percentage points.
    pub delta: f64,
}

/// The alpha grid used for layer selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionAlphas {
    pub negative: f64,
    pub zero: f64,
    pub positive: f64,
}

impl Default for SelectionAlphas {
    fn default() -> Self {
        Self {
            negative: -1.0,
            zero: 0.0,
            positive: 1.0,
        }
    }
}

/// Evaluate `eval_fn(layer, alpha) -> accuracy fraction` over the grid and
/// pick the layer with the largest positive-minus-negative accuracy gap.
/// Ties break toward the lower layer; the zero-steering column is reported
/// as context and never influences the choice.
pub fn select_layer<F>(
    mut eval_fn: F,
    layers: &[usize],
    alphas: SelectionAlphas,
) -> Result<LayerSelectionReport, VectorError>
where
    F: FnMut(usize, f64) -> Result<f64, String>,
{
    if layers.is_empty() {
        return Err(VectorError::NoLayers);
    }
    let mut rows = Vec::with_capacity(layers.len());
    for &layer in layers {
        let mut acc_at = |alpha: f64| -> Result<f64, VectorError> {
            eval_fn(layer, alpha)
                .map(|a| a * 100.0)
                .map_err(|message| VectorError::EvalFailed {
                    layer,
                    alpha,
                    message,
                })
        };
        let acc_neg = acc_at(alphas.negative)?;
        let acc_zero = acc_at(alphas.zero)?;
        let acc_pos = acc_at(alphas.positive)?;
        rows.push(LayerSelectionRow {
            layer,
            acc_neg,
            acc_zero,
            acc_pos,
        });
    }
    let mut best = rows[0];
    for row in &rows[1..] {
        if row.delta() > best.delta() || (row.delta() == best.delta() && row.layer < best.layer) {
            best = *row;
        }
    }
    Ok(LayerSelectionReport {
        rows,
        selected_layer: best.layer,
        delta: best.delta(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyAlphabet, ToyBackend, ToyConfig, UnembeddingKind};

    fn set_from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> ActivationSet {
        let mut set = ActivationSet::new(0);
        for (i, (base, interv)) in pairs.iter().enumerate() {
            set.push(format!("q{i}"), false, base.clone());
            set.push(format!("q{i}"), true, interv.clone());
        }
        set
    }

    #[test]
    fn single_pair_is_the_raw_difference() {
        let set = set_from_pairs(&[(vec![0.0, 0.0], vec![2.0, 0.0])]);
        let v = extract_vector(&set, "unit").unwrap();
        assert_eq!(v.vector, vec![2.0, 0.0]);
        assert_eq!(v.pair_count, 1);
        assert_eq!(v.norm, 2.0);
    }

    #[test]
    fn two_pairs_average() {
        let set = set_from_pairs(&[
            (vec![0.0, 0.0], vec![2.0, 0.0]),
            (vec![0.0, 0.0], vec![0.0, 2.0]),
        ]);
        let v = extract_vector(&set, "unit").unwrap();
        assert_eq!(v.vector, vec![1.0, 1.0]);
    }

    #[test]
    fn orphan_rows_are_reported() {
        let mut set = set_from_pairs(&[(vec![0.0], vec![1.0])]);
        set.push("lonely".into(), true, vec![5.0]);
        match extract_vector(&set, "unit") {
            Err(VectorError::Orphans(ids)) => assert_eq!(ids, vec!["lonely".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matches_direct_summation_oracle() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..50)
            .map(|_| {
                let base: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
                let interv: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
                (base, interv)
            })
            .collect();
        let set = set_from_pairs(&pairs);
        let v = extract_vector(&set, "unit").unwrap();

        // direct summation over per-pair differences
        let mut expect = vec![0.0f64; d];
        for (base, interv) in &pairs {
            for j in 0..d {
                expect[j] += interv[j] - base[j];
            }
        }
        for e in expect.iter_mut() {
            *e /= pairs.len() as f64;
        }
        for j in 0..d {
            assert!((v.vector[j] - expect[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_invariance_in_both_classes() {
        let pairs = vec![
            (vec![1.0, -2.0], vec![3.0, 0.5]),
            (vec![0.5, 0.5], vec![-1.0, 2.0]),
        ];
        let set = set_from_pairs(&pairs);
        let v = extract_vector(&set, "unit").unwrap();
        let shift = [10.0, -7.0];
        let shifted: Vec<(Vec<f64>, Vec<f64>)> = pairs
            .iter()
            .map(|(b, i)| {
                (
                    b.iter().zip(shift).map(|(x, s)| x + s).collect(),
                    i.iter().zip(shift).map(|(x, s)| x + s).collect(),
                )
            })
            .collect();
        let v2 = extract_vector(&set_from_pairs(&shifted), "unit").unwrap();
        assert_eq!(v.vector, v2.vector);
    }

    #[test]
    fn normalized_variant_has_unit_norm() {
        let set = set_from_pairs(&[(vec![0.0, 0.0], vec![3.0, 4.0])]);
        let v = extract_vector(&set, "unit").unwrap().normalized();
        assert!((v.norm - 1.0).abs() < 1e-12);
        assert!((euclidean_norm(&v.vector) - 1.0).abs() < 1e-12);
    }

    fn identity_backend() -> ToyBackend {
        ToyBackend::new(ToyConfig {
            hidden_size: 32,
            alphabet: ToyAlphabet::Compact,
            unembedding: UnembeddingKind::Identity,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn lens_on_identity_unembedding_reads_coordinates() {
        let backend = identity_backend();
        let mut vector = vec![0.0f64; 32];
        vector[0] = 0.5;
        vector[1] = -0.2;
        let v = CritiqueVector {
            layer: 0,
            vector,
            pair_count: 1,
            source: "unit".into(),
            norm: 0.0,
        };
        let top = logit_lens_topk(&v, 3, &backend).unwrap();
        assert_eq!(top[0].token_id, 0);
        assert_eq!(top[0].logit, 0.5);
        assert_eq!(top[0].rank, 1);
    }

    #[test]
    fn lens_full_ranking_is_a_permutation() {
        let backend = identity_backend();
        let v = CritiqueVector {
            layer: 0,
            vector: (0..32).map(|i| ((i * 7) % 13) as f64 * 0.1).collect(),
            pair_count: 1,
            source: "unit".into(),
            norm: 0.0,
        };
        let all = logit_lens_topk(&v, 999, &backend).unwrap();
        assert_eq!(all.len(), 32);
        let mut ids: Vec<u32> = all.iter().map(|e| e.token_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..32).collect::<Vec<u32>>());
        // ties resolved by vocabulary index
        for w in all.windows(2) {
            assert!(
                w[0].logit > w[1].logit || (w[0].logit == w[1].logit && w[0].token_id < w[1].token_id)
            );
        }
    }

    #[test]
    fn lens_rejects_dimension_mismatch() {
        let backend = identity_backend();
        let v = CritiqueVector {
            layer: 0,
            vector: vec![1.0; 8],
            pair_count: 1,
            source: "unit".into(),
            norm: 0.0,
        };
        assert!(matches!(
            logit_lens_topk(&v, 3, &backend),
            Err(VectorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn selection_reproduces_published_row() {
        // table fixture: the winning layer posts 42.36 / 25.00 / 63.72
        let table = |layer: usize, alpha: f64| -> Result<f64, String> {
            let (neg, zero, pos) = match layer {
                20 => (0.30, 0.42, 0.50),
                21 => (0.2500, 0.4236, 0.6372),
                22 => (0.35, 0.41, 0.55),
                _ => (0.40, 0.40, 0.40),
            };
            Ok(if alpha < 0.0 {
                neg
            } else if alpha > 0.0 {
                pos
            } else {
                zero
            })
        };
        let report = select_layer(table, &[19, 20, 21, 22], SelectionAlphas::default()).unwrap();
        assert_eq!(report.selected_layer, 21);
        assert!((report.delta - 38.72).abs() < 1e-9);
        let row = report.rows.iter().find(|r| r.layer == 21).unwrap();
        assert!((row.acc_zero - 42.36).abs() < 1e-9);
    }

    #[test]
    fn identical_accuracies_select_lowest_layer() {
        let report = select_layer(
            |_, _| Ok(0.5),
            &[0, 1, 2, 3],
            SelectionAlphas::default(),
        )
        .unwrap();
        assert_eq!(report.selected_layer, 0);
        assert_eq!(report.delta, 0.0);
    }

    #[test]
    fn selection_ignores_zero_column() {
        // same pos/neg, wildly different zero column -> same selection
        let with_zero = |z: f64| {
            move |layer: usize, alpha: f64| -> Result<f64, String> {
                let delta = [0.1, 0.3, 0.2][layer];
                Ok(if alpha < 0.0 {
                    0.4 - delta / 2.0
                } else if alpha > 0.0 {
                    0.4 + delta / 2.0
                } else {
                    z
                })
            }
        };
        let a = select_layer(with_zero(0.0), &[0, 1, 2], SelectionAlphas::default()).unwrap();
        let b = select_layer(with_zero(0.99), &[0, 1, 2], SelectionAlphas::default()).unwrap();
        assert_eq!(a.selected_layer, b.selected_layer);
        assert_eq!(a.selected_layer, 1);
    }

    #[test]
    fn empty_layer_set_errors() {
        assert!(matches!(
            select_layer(|_, _| Ok(0.5), &[], SelectionAlphas::default()),
            Err(VectorError::NoLayers)
        ));
    }

    #[test]
    fn random_tables_match_brute_force_scan() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let layers: Vec<usize> = (0..6).collect();
            let accs: Vec<(f64, f64)> = (0..6)
                .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
                .collect();
            let report = select_layer(
                |layer, alpha| {
                    Ok(if alpha < 0.0 {
                        accs[layer].0
                    } else if alpha > 0.0 {
                        accs[layer].1
                    } else {
                        0.0
                    })
                },
                &layers,
                SelectionAlphas::default(),
            )
            .unwrap();
            let mut best = 0usize;
            for l in 1..6 {
                if accs[l].1 - accs[l].0 > accs[best].1 - accs[best].0 {
                    best = l;
                }
            }
            assert_eq!(report.selected_layer, best);
        }
    }
}
