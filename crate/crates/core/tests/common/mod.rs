//! Test-only oracles, written independently of the library code paths they
//! check. The forward-pass reference reads raw toy weights and recomputes
//! every quantity with plain index arithmetic.

use critique_core::backend::{PositionScope, SteeringSpec, TokenId, ToyBackend};

/// Post-MLP residuals per layer (layer -> position -> vector) and final
/// next-token logits, recomputed from scratch.
pub struct ReferenceForward {
    pub post_mlp: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<f64>,
}

/// Straight-line re-implementation of the toy forward pass.
///
/// `steering` and `gen_start` mirror the backend's write-tap semantics: at
/// the steered layer, `alpha * vector` is added to the post-MLP residual of
/// every in-scope position before the next layer consumes it.
pub fn reference_forward(
    backend: &ToyBackend,
    ids: &[TokenId],
    steering: Option<&SteeringSpec>,
    gen_start: usize,
) -> ReferenceForward {
    let w = backend.weights();
    let d = backend.config().hidden_size;
    let m = 2 * d;
    let n = ids.len();
    let n_layers = w.layers.len();
    let vocab = w.embedding.len();

    // Embedding + positional.
    let mut h = vec![vec![0.0f64; d]; n];
    for i in 0..n {
        for j in 0..d {
            h[i][j] = w.embedding[ids[i] as usize][j] + w.positional[i][j];
        }
    }

    let mut post_mlp: Vec<Vec<Vec<f64>>> = Vec::new();

    for l in 0..n_layers {
        let lw = &w.layers[l];

        // Projections.
        let mut q = vec![vec![0.0f64; d]; n];
        let mut k = vec![vec![0.0f64; d]; n];
        let mut v = vec![vec![0.0f64; d]; n];
        for i in 0..n {
            for r in 0..d {
                let mut aq = 0.0;
                let mut ak = 0.0;
                let mut av = 0.0;
                for c in 0..d {
                    aq += lw.w_query[r * d + c] * h[i][c];
                    ak += lw.w_key[r * d + c] * h[i][c];
                    av += lw.w_value[r * d + c] * h[i][c];
                }
                q[i][r] = aq;
                k[i][r] = ak;
                v[i][r] = av;
            }
        }

        // Causal single-head attention with residual add.
        let mut after_attn = vec![vec![0.0f64; d]; n];
        for i in 0..n {
            let mut scores = vec![0.0f64; i + 1];
            for j in 0..=i {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[i][c] * k[j][c];
                }
                scores[j] = dot / (d as f64).sqrt();
            }
            let mut max = f64::NEG_INFINITY;
            for &s in &scores {
                if s > max {
                    max = s;
                }
            }
            let mut exps = vec![0.0f64; i + 1];
            let mut z = 0.0;
            for j in 0..=i {
                exps[j] = (scores[j] - max).exp();
                z += exps[j];
            }
            let mut mixed = vec![0.0f64; d];
            for j in 0..=i {
                let wgt = exps[j] / z;
                for c in 0..d {
                    mixed[c] += wgt * v[j][c];
                }
            }
            for r in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += lw.w_out[r * d + c] * mixed[c];
                }
                after_attn[i][r] = h[i][r] + acc;
            }
        }

        // Tanh MLP with residual add, then the optional steering write.
        let mut after_mlp = vec![vec![0.0f64; d]; n];
        for i in 0..n {
            let mut up = vec![0.0f64; m];
            for r in 0..m {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += lw.w_up[r * d + c] * after_attn[i][c];
                }
                up[r] = (acc + lw.b_up[r]).tanh();
            }
            for r in 0..d {
                let mut acc = 0.0;
                for c in 0..m {
                    acc += lw.w_down[r * m + c] * up[c];
                }
                after_mlp[i][r] = after_attn[i][r] + acc + lw.b_down[r];
            }
        }
        if let Some(spec) = steering {
            if spec.layer == l && spec.alpha != 0.0 {
                let from = match spec.position_scope {
                    PositionScope::AllPositions => 0,
                    PositionScope::GeneratedOnly => gen_start,
                };
                for row in after_mlp.iter_mut().skip(from) {
                    for (c, x) in row.iter_mut().enumerate() {
                        *x += spec.alpha * spec.vector[c];
                    }
                }
            }
        }

        post_mlp.push(after_mlp.clone());
        h = after_mlp;
    }

    let mut logits = vec![0.0f64; vocab];
    for t in 0..vocab {
        let mut acc = 0.0;
        for j in 0..d {
            acc += h[n - 1][j] * w.unembedding[j * vocab + t];
        }
        logits[t] = acc;
    }

    ReferenceForward { post_mlp, logits }
}

/// Relative error |a-b| / max(|a|, |b|, 1).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Deterministic standard-normal samples via Box-Muller.
pub fn gaussian(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::RngExt;
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
