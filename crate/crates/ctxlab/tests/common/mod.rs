//! Shared finite-difference gradient oracle.
//!
//! A from-scratch f64 forward pass over plain nested `Vec<f64>` buffers —
//! it shares no code with the library's f32 path, and recomputes rotary
//! angles directly from the base instead of reading the cached tables.
//! Central differences through this oracle are compared against the
//! analytic gradients block by block. Both the dedicated gradient-check
//! target and the acceptance gate run it.

use ctxlab::model::{compute_gradients, ModelConfig, TrainExample, TransformerWeights};
use ctxlab::rng::Rng;
use ctxlab::rope::RopeCache;

/// All parameters flattened to f64, keyed and ordered like
/// `TransformerWeights::param_views`.
struct OracleModel {
    vocab: usize,
    d: usize,
    heads: usize,
    layers: usize,
    dff: usize,
    base: f64,
    blocks: Vec<(String, Vec<f64>)>,
}

impl OracleModel {
    fn from_weights(w: &TransformerWeights) -> Self {
        let c = &w.config;
        OracleModel {
            vocab: c.vocab_size,
            d: c.d_model,
            heads: c.n_heads,
            layers: c.n_layers,
            dff: c.d_ff,
            base: f64::from(c.rope_base),
            blocks: w
                .param_views()
                .into_iter()
                .map(|(name, data)| (name, data.iter().map(|&v| f64::from(v)).collect()))
                .collect(),
        }
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.blocks.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name}")).1
    }

    /// Mean masked next-token negative log-likelihood over the batch.
    fn loss(&self, batch: &[TrainExample]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in batch {
            let logits = self.forward(&ex.tokens);
            for (i, &keep) in ex.loss_mask.iter().enumerate() {
                if !keep {
                    continue;
                }
                let row = &logits[i];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += log_z - row[ex.tokens[i + 1] as usize];
                count += 1;
            }
        }
        total / count as f64
    }

    fn forward(&self, tokens: &[u32]) -> Vec<Vec<f64>> {
        let s = tokens.len();
        let hd = self.d / self.heads;
        let emb = self.get("token_embedding");
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| emb[t as usize * self.d..(t as usize + 1) * self.d].to_vec())
            .collect();
        for l in 0..self.layers {
            let name = |suffix: &str| format!("layer{l}.{suffix}");
            let xn = rmsnorm(&x, self.get(&name("attn_norm")));
            let q = matmul(&xn, self.get(&name("w_q")), self.d);
            let k = matmul(&xn, self.get(&name("w_k")), self.d);
            let v = matmul(&xn, self.get(&name("w_v")), self.d);
            let mut concat = vec![vec![0.0; self.d]; s];
            for h in 0..self.heads {
                let slice =
                    |m: &[Vec<f64>], i: usize| m[i][h * hd..(h + 1) * hd].to_vec();
                let qr: Vec<Vec<f64>> =
                    (0..s).map(|i| rotate(&slice(&q, i), i, self.base)).collect();
                let kr: Vec<Vec<f64>> =
                    (0..s).map(|i| rotate(&slice(&k, i), i, self.base)).collect();
                let scale = 1.0 / (hd as f64).sqrt();
                for i in 0..s {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| scale * dot(&qr[i], &kr[j]))
                        .collect();
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        let p = e / z;
                        let vj = slice(&v, j);
                        for (dd, &vv) in vj.iter().enumerate() {
                            concat[i][h * hd + dd] += p * vv;
                        }
                    }
                }
            }
            let y = matmul(&concat, self.get(&name("w_o")), self.d);
            add_into(&mut x, &y);
            let xn2 = rmsnorm(&x, self.get(&name("mlp_norm")));
            let mut hidden = matmul(&xn2, self.get(&name("w_in")), self.dff);
            for row in &mut hidden {
                for vv in row {
                    *vv = gelu(*vv);
                }
            }
            let m = matmul(&hidden, self.get(&name("w_out")), self.d);
            add_into(&mut x, &m);
        }
        let xf = rmsnorm(&x, self.get("final_norm"));
        matmul(&xf, self.get("head"), self.vocab)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul(a: &[Vec<f64>], b_flat: &[f64], cols_out: usize) -> Vec<Vec<f64>> {
    let inner = a[0].len();
    assert_eq!(b_flat.len(), inner * cols_out);
    a.iter()
        .map(|row| {
            (0..cols_out)
                .map(|j| (0..inner).map(|k| row[k] * b_flat[k * cols_out + j]).sum())
                .collect()
        })
        .collect()
}

fn rmsnorm(x: &[Vec<f64>], gain: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let r = 1.0 / (ms + 1e-5).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * r * g).collect()
        })
        .collect()
}

fn rotate(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let half = v.len() / 2;
    let mut out = vec![0.0; v.len()];
    for d in 0..half {
        let theta = base.powf(-2.0 * d as f64 / v.len() as f64);
        let (sin, cos) = (pos as f64 * theta).sin_cos();
        out[2 * d] = cos * v[2 * d] - sin * v[2 * d + 1];
        out[2 * d + 1] = sin * v[2 * d] + cos * v[2 * d + 1];
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn add_into(x: &mut [Vec<f64>], y: &[Vec<f64>]) {
    for (xr, yr) in x.iter_mut().zip(y) {
        for (a, b) in xr.iter_mut().zip(yr) {
            *a += b;
        }
    }
}


/// Runs the whole check on the standard micro-model: every parameter block
/// must agree with central differences at 1e-3 relative tolerance. Returns
/// the worst (ratio, block name) seen. Panics on any violation.
pub fn finite_difference_check() -> (f64, String) {
    let config = ModelConfig {
        vocab_size: 10,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        train_context: 12,
        rope_base: 50.0,
    };
    let weights = TransformerWeights::init(&config, &mut Rng::new(1234));
    let cache = RopeCache::new(config.head_dim(), config.train_context, config.rope_base);
    // Every vocabulary row appears, and masking is irregular on purpose.
    let batch = vec![
        TrainExample {
            tokens: vec![0, 1, 2, 3, 4, 5, 6, 7, 8],
            loss_mask: vec![true, true, false, true, true, true, false, true],
        },
        TrainExample::lm(vec![9, 8, 7, 6, 5, 4, 3, 2, 1]),
    ];

    let (loss_f32, grads) = compute_gradients(&weights, &batch, &cache);
    let mut oracle = OracleModel::from_weights(&weights);
    let loss_f64 = oracle.loss(&batch);
    assert!(
        (loss_f32 - loss_f64).abs() < 1e-4 * loss_f64.abs().max(1.0),
        "forward disagreement: f32 path {loss_f32}, f64 oracle {loss_f64}"
    );

    let h = 1e-3;
    let analytic = grads.param_views();
    let rng = Rng::new(99);
    let mut worst: (f64, String) = (0.0, String::new());
    for (b, (name, ga)) in analytic.iter().enumerate() {
        // All entries for small blocks; a seeded sample for big ones.
        let indices: Vec<usize> = if ga.len() <= 12 {
            (0..ga.len()).collect()
        } else {
            let mut r = rng.derive(b as u64);
            (0..12).map(|_| r.index(ga.len())).collect()
        };
        let mut diff2 = 0.0f64;
        let mut na2 = 0.0f64;
        let mut nn2 = 0.0f64;
        for &idx in &indices {
            let orig = oracle.blocks[b].1[idx];
            oracle.blocks[b].1[idx] = orig + h;
            let up = oracle.loss(&batch);
            oracle.blocks[b].1[idx] = orig - h;
            let down = oracle.loss(&batch);
            oracle.blocks[b].1[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = f64::from(ga[idx]);
            diff2 += (a - numeric).powi(2);
            na2 += a * a;
            nn2 += numeric * numeric;
        }
        assert!(nn2 > 0.0, "block {name}: sampled numeric gradient is identically zero");
        let ratio = diff2.sqrt() / (na2.sqrt() + nn2.sqrt());
        if ratio > worst.0 {
            worst = (ratio, name.clone());
        }
        assert!(
            ratio <= 1e-3,
            "block {name}: |analytic - numeric| / (|analytic| + |numeric|) = {ratio:.2e}"
        );
    }
    worst
}
