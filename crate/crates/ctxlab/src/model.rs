//! A deliberately small decoder-only transformer: pre-norm blocks with
//! RMS normalization, rotary attention, and a GELU feed-forward, trained
//! with hand-written backpropagation and Adam.
//!
//! Training always runs plain causal attention at sequences no longer than
//! the configured context; the position-remapping schemes are inference
//! behavior, swapped in at evaluation time through
//! [`crate::positions::ExtensionScheme`]. That split mirrors how the
//! remappings are meant to be used: nothing about the weights changes.
//!
//! Everything is sequential f32, so a fixed seed reproduces a training
//! trajectory bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use crate::attention::{causal_mask, multi_head_attention, MhaWeights};
use crate::positions::ExtensionScheme;
use crate::rng::Rng;
use crate::rope::{apply_rope_inverse, apply_rope_rows, RopeCache};
use crate::tensor::Matrix2D;
use crate::{Error, Result};

const RMS_EPS: f32 = 1e-5;

// ── Configuration ───────────────────────────────────────────────────────────

/// Model shape. `d_model` must divide evenly into `n_heads`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Context length used for training; the longest sequence the model's
    /// position behavior is in-distribution for.
    pub train_context: usize,
    pub rope_base: f32,
}

impl ModelConfig {
    /// The desk-scale default used throughout the experiments.
    #[must_use]
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 512,
            train_context: 64,
            rope_base: 10_000.0,
        }
    }

    #[inline]
    #[must_use]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ff == 0
            || self.train_context == 0
        {
            return Err(Error::Config("model dimensions must all be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 || self.head_dim() % 2 != 0 {
            return Err(Error::Config("head_dim must be even for rotary pairs".into()));
        }
        if self.rope_base <= 0.0 {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }
}

// ── Weights ─────────────────────────────────────────────────────────────────

/// One transformer block's parameters.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub attn: MhaWeights,
    pub mlp_norm: Vec<f32>,
    pub w_in: Matrix2D,
    pub w_out: Matrix2D,
}

/// Full parameter set. The same struct doubles as gradient and Adam-moment
/// storage via [`TransformerWeights::zeros_like`].
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    /// `vocab_size x d_model`.
    pub token_embedding: Matrix2D,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `d_model x vocab_size` output projection.
    pub head: Matrix2D,
}

impl TransformerWeights {
    /// Random initialization: every projection is N(0, 0.02), except the
    /// two residual-writing projections per block (`w_o`, `w_out`), which
    /// are shrunk by `1/sqrt(2 * n_layers)` so the residual stream's
    /// variance stays flat with depth. Norm gains start at 1.
    ///
    /// Draw order is fixed (embedding, then each layer's `w_q, w_k, w_v,
    /// w_o, w_in, w_out`, then head), so one seed pins the whole init.
    #[must_use]
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        config.validate().expect("invalid model config");
        let std = 0.02;
        let residual_std = std / (2.0 * config.n_layers as f64).sqrt();
        let draw = |rows: usize, cols: usize, std: f64, rng: &mut Rng| {
            Matrix2D::from_fn(rows, cols, |_, _| rng.normal(0.0, std) as f32)
        };
        let d = config.d_model;
        let token_embedding = draw(config.vocab_size, d, std, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                attn: MhaWeights {
                    w_q: draw(d, d, std, rng),
                    w_k: draw(d, d, std, rng),
                    w_v: draw(d, d, std, rng),
                    w_o: draw(d, d, residual_std, rng),
                    n_heads: config.n_heads,
                },
                mlp_norm: vec![1.0; d],
                w_in: draw(d, config.d_ff, std, rng),
                w_out: draw(config.d_ff, d, residual_std, rng),
            })
            .collect();
        let head = draw(d, config.vocab_size, std, rng);
        TransformerWeights {
            config: *config,
            token_embedding,
            layers,
            final_norm: vec![1.0; d],
            head,
        }
    }

    /// Same shapes, all zeros — gradient and optimizer-state storage.
    #[must_use]
    pub fn zeros_like(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let zeros = Matrix2D::zeros;
        TransformerWeights {
            config: *config,
            token_embedding: zeros(config.vocab_size, d),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: vec![0.0; d],
                    attn: MhaWeights {
                        w_q: zeros(d, d),
                        w_k: zeros(d, d),
                        w_v: zeros(d, d),
                        w_o: zeros(d, d),
                        n_heads: config.n_heads,
                    },
                    mlp_norm: vec![0.0; d],
                    w_in: zeros(d, config.d_ff),
                    w_out: zeros(config.d_ff, d),
                })
                .collect(),
            final_norm: vec![0.0; d],
            head: zeros(d, config.vocab_size),
        }
    }

    /// Named views of every parameter block, in the fixed checkpoint order.
    #[must_use]
    pub fn param_views(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> =
            vec![("token_embedding".into(), self.token_embedding.as_slice())];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), &layer.attn_norm));
            out.push((format!("layer{i}.w_q"), layer.attn.w_q.as_slice()));
            out.push((format!("layer{i}.w_k"), layer.attn.w_k.as_slice()));
            out.push((format!("layer{i}.w_v"), layer.attn.w_v.as_slice()));
            out.push((format!("layer{i}.w_o"), layer.attn.w_o.as_slice()));
            out.push((format!("layer{i}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layer{i}.w_in"), layer.w_in.as_slice()));
            out.push((format!("layer{i}.w_out"), layer.w_out.as_slice()));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), self.head.as_slice()));
        out
    }

    /// Mutable counterpart of [`TransformerWeights::param_views`].
    pub fn param_views_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out: Vec<(String, &mut [f32])> =
            vec![("token_embedding".into(), self.token_embedding.as_mut_slice())];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn_norm"), layer.attn_norm.as_mut_slice()));
            out.push((format!("layer{i}.w_q"), layer.attn.w_q.as_mut_slice()));
            out.push((format!("layer{i}.w_k"), layer.attn.w_k.as_mut_slice()));
            out.push((format!("layer{i}.w_v"), layer.attn.w_v.as_mut_slice()));
            out.push((format!("layer{i}.w_o"), layer.attn.w_o.as_mut_slice()));
            out.push((format!("layer{i}.mlp_norm"), layer.mlp_norm.as_mut_slice()));
            out.push((format!("layer{i}.w_in"), layer.w_in.as_mut_slice()));
            out.push((format!("layer{i}.w_out"), layer.w_out.as_mut_slice()));
        }
        out.push(("final_norm".into(), self.final_norm.as_mut_slice()));
        out.push(("head".into(), self.head.as_mut_slice()));
        out
    }

    /// Total parameter count.
    #[must_use]
    pub fn n_params(&self) -> usize {
        self.param_views().iter().map(|(_, s)| s.len()).sum()
    }
}

// ── Shared forward pieces ───────────────────────────────────────────────────

/// Row-wise RMS normalization with gain; returns the output and each row's
/// `1 / rms` for reuse in the backward pass.
fn rmsnorm_rows(x: &Matrix2D, gain: &[f32]) -> (Matrix2D, Vec<f32>) {
    assert_eq!(x.cols(), gain.len(), "gain length must match width");
    let mut out = Matrix2D::zeros(x.rows(), x.cols());
    let mut inv_rms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / x.cols() as f32;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms.push(r);
        let out_row = out.row_mut(i);
        for j in 0..row.len() {
            out_row[j] = row[j] * r * gain[j];
        }
    }
    (out, inv_rms)
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[inline]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_prime(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn embed(weights: &TransformerWeights, tokens: &[u32]) -> Matrix2D {
    let vocab = weights.config.vocab_size;
    let mut x = Matrix2D::zeros(tokens.len(), weights.config.d_model);
    for (i, &t) in tokens.iter().enumerate() {
        assert!((t as usize) < vocab, "token {t} outside vocabulary of {vocab}");
        x.row_mut(i).copy_from_slice(weights.token_embedding.row(t as usize));
    }
    x
}

// ── Inference forward ───────────────────────────────────────────────────────

/// Runs the model under any position scheme and returns `seq_len x vocab`
/// logits. Panics on empty input, out-of-range tokens, or a sequence
/// longer than the rotary cache.
#[must_use]
pub fn forward(
    weights: &TransformerWeights,
    tokens: &[u32],
    scheme: &ExtensionScheme,
    cache: &RopeCache,
) -> Matrix2D {
    assert!(!tokens.is_empty(), "forward requires at least one token");
    let mut x = embed(weights, tokens);
    for layer in &weights.layers {
        let (xn, _) = rmsnorm_rows(&x, &layer.attn_norm);
        let y = multi_head_attention(&xn, &layer.attn, scheme, cache);
        x.add_assign(&y);
        let (xn, _) = rmsnorm_rows(&x, &layer.mlp_norm);
        let mut h = xn.matmul(&layer.w_in);
        for v in h.as_mut_slice() {
            *v = gelu(*v);
        }
        let m = h.matmul(&layer.w_out);
        x.add_assign(&m);
    }
    let (xf, _) = rmsnorm_rows(&x, &weights.final_norm);
    xf.matmul(&weights.head)
}

// ── Losses ──────────────────────────────────────────────────────────────────

/// Mean negative log-likelihood (natural log) of `targets[i]` under
/// `logits` row `i`, restricted to positions where `mask` is true.
/// Accumulated in f64. Panics if no position is unmasked.
#[must_use]
pub fn cross_entropy_loss(logits: &Matrix2D, targets: &[u32], mask: &[bool]) -> f64 {
    assert_eq!(logits.rows(), targets.len(), "one target per logit row");
    assert_eq!(logits.rows(), mask.len(), "one mask bit per logit row");
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..logits.rows() {
        if !mask[i] {
            continue;
        }
        total += row_nll(logits, i, targets[i]);
        count += 1;
    }
    assert!(count > 0, "cross_entropy_loss: every position masked out");
    total / count as f64
}

/// `-log softmax(logits[row])[target]` in f64.
fn row_nll(logits: &Matrix2D, row: usize, target: u32) -> f64 {
    let r = logits.row(row);
    assert!((target as usize) < r.len(), "target {target} outside vocabulary");
    let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let log_z: f64 =
        f64::from(max) + r.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
    log_z - f64::from(r[target as usize])
}

/// Negative log-likelihood of each token given its prefix, under a scheme:
/// entry `i` scores `tokens[i + 1]`. The first token has no prefix and is
/// not scored.
#[must_use]
pub fn sequence_nll(
    weights: &TransformerWeights,
    tokens: &[u32],
    scheme: &ExtensionScheme,
    cache: &RopeCache,
) -> Vec<f64> {
    assert!(tokens.len() >= 2, "need at least two tokens to score one");
    let logits = forward(weights, tokens, scheme, cache);
    (0..tokens.len() - 1).map(|i| row_nll(&logits, i, tokens[i + 1])).collect()
}

// ── Training ────────────────────────────────────────────────────────────────

/// One supervised sequence: `loss_mask[i]` says whether predicting
/// `tokens[i + 1]` from position `i` contributes to the loss.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    /// Plain language modeling: every next-token prediction counts.
    #[must_use]
    pub fn lm(tokens: Vec<u32>) -> Self {
        let mask = vec![true; tokens.len().saturating_sub(1)];
        TrainExample { tokens, loss_mask: mask }
    }
}

/// Optimizer hyperparameters: Adam with linear warmup to a constant rate.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TrainHyperparams {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        TrainHyperparams { lr: 1e-3, warmup_steps: 100, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

impl TrainHyperparams {
    /// Learning rate at a 0-indexed step: linear ramp over the warmup, then
    /// flat.
    #[must_use]
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step + 1 >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Weights plus Adam moments and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: TransformerWeights,
    pub hp: TrainHyperparams,
    pub step: usize,
    adam_m: TransformerWeights,
    adam_v: TransformerWeights,
}

impl TrainState {
    #[must_use]
    pub fn new(weights: TransformerWeights, hp: TrainHyperparams) -> Self {
        let config = weights.config;
        TrainState {
            weights,
            hp,
            step: 0,
            adam_m: TransformerWeights::zeros_like(&config),
            adam_v: TransformerWeights::zeros_like(&config),
        }
    }
}

/// Per-layer activations recorded by the training forward pass.
struct LayerTape {
    x_in: Matrix2D,
    inv_rms_a: Vec<f32>,
    xn_a: Matrix2D,
    v: Matrix2D,
    /// Rotated per-head queries/keys and post-softmax weights.
    qr: Vec<Matrix2D>,
    kr: Vec<Matrix2D>,
    probs: Vec<Matrix2D>,
    concat: Matrix2D,
    x_mid: Matrix2D,
    inv_rms_m: Vec<f32>,
    xn_m: Matrix2D,
    h_pre: Matrix2D,
    h_act: Matrix2D,
}

struct Tape {
    layers: Vec<LayerTape>,
    x_final: Matrix2D,
    inv_rms_f: Vec<f32>,
    xf: Matrix2D,
    logits: Matrix2D,
}

fn head_slice(m: &Matrix2D, h: usize, width: usize) -> Matrix2D {
    Matrix2D::from_fn(m.rows(), width, |i, j| m.get(i, h * width + j))
}

/// Training forward: plain causal rotary attention, activations kept.
fn forward_train(weights: &TransformerWeights, tokens: &[u32], cache: &RopeCache) -> Tape {
    let config = &weights.config;
    assert!(
        tokens.len() <= config.train_context,
        "training sequence of {} exceeds context {}",
        tokens.len(),
        config.train_context
    );
    let seq_len = tokens.len();
    let head_dim = config.head_dim();
    let positions: Vec<usize> = (0..seq_len).collect();
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut x = embed(weights, tokens);
    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in &weights.layers {
        let x_in = x.clone();
        let (xn_a, inv_rms_a) = rmsnorm_rows(&x_in, &layer.attn_norm);
        let q = xn_a.matmul(&layer.attn.w_q);
        let k = xn_a.matmul(&layer.attn.w_k);
        let v = xn_a.matmul(&layer.attn.w_v);
        let mut qr = Vec::with_capacity(config.n_heads);
        let mut kr = Vec::with_capacity(config.n_heads);
        let mut probs = Vec::with_capacity(config.n_heads);
        let mut concat = Matrix2D::zeros(seq_len, config.d_model);
        for h in 0..config.n_heads {
            let qh = apply_rope_rows(&head_slice(&q, h, head_dim), &positions, cache);
            let kh = apply_rope_rows(&head_slice(&k, h, head_dim), &positions, cache);
            let vh = head_slice(&v, h, head_dim);
            let mut s = qh.matmul(&kh.transpose());
            s.scale(scale);
            causal_mask(&mut s);
            let p = s.softmax_rows();
            let oh = p.matmul(&vh);
            for i in 0..seq_len {
                for j in 0..head_dim {
                    concat.set(i, h * head_dim + j, oh.get(i, j));
                }
            }
            qr.push(qh);
            kr.push(kh);
            probs.push(p);
        }
        let y = concat.matmul(&layer.attn.w_o);
        let mut x_mid = x_in.clone();
        x_mid.add_assign(&y);
        let (xn_m, inv_rms_m) = rmsnorm_rows(&x_mid, &layer.mlp_norm);
        let h_pre = xn_m.matmul(&layer.w_in);
        let mut h_act = h_pre.clone();
        for vv in h_act.as_mut_slice() {
            *vv = gelu(*vv);
        }
        let m = h_act.matmul(&layer.w_out);
        let mut x_out = x_mid.clone();
        x_out.add_assign(&m);
        layers.push(LayerTape {
            x_in,
            inv_rms_a,
            xn_a,
            v,
            qr,
            kr,
            probs,
            concat,
            x_mid,
            inv_rms_m,
            xn_m,
            h_pre,
            h_act,
        });
        x = x_out;
    }
    let (xf, inv_rms_f) = rmsnorm_rows(&x, &weights.final_norm);
    let logits = xf.matmul(&weights.head);
    Tape { layers, x_final: x, inv_rms_f, xf, logits }
}

/// Backward through RMS normalization. `dy` is the gradient at the output;
/// returns the gradient at the input and accumulates the gain gradient.
fn rmsnorm_backward(
    x: &Matrix2D,
    inv_rms: &[f32],
    gain: &[f32],
    dy: &Matrix2D,
    dgain: &mut [f32],
) -> Matrix2D {
    let d = x.cols() as f32;
    let mut dx = Matrix2D::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (row, dyr) = (x.row(i), dy.row(i));
        let r = inv_rms[i];
        let mut dot = 0.0f32;
        for j in 0..row.len() {
            dgain[j] += dyr[j] * row[j] * r;
            dot += dyr[j] * gain[j] * row[j];
        }
        let k = dot * r * r * r / d;
        let dxr = dx.row_mut(i);
        for j in 0..row.len() {
            dxr[j] = dyr[j] * gain[j] * r - row[j] * k;
        }
    }
    dx
}

/// Loss and parameter gradients for a batch, averaged over every unmasked
/// target position across the batch. Exposed so the finite-difference
/// checks can interrogate gradients without touching optimizer state.
#[must_use]
pub fn compute_gradients(
    weights: &TransformerWeights,
    batch: &[TrainExample],
    cache: &RopeCache,
) -> (f64, TransformerWeights) {
    assert!(!batch.is_empty(), "empty batch");
    let config = &weights.config;
    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f32).sqrt();
    let total_targets: usize = batch
        .iter()
        .map(|ex| {
            assert_eq!(
                ex.loss_mask.len(),
                ex.tokens.len() - 1,
                "loss mask must cover every next-token prediction"
            );
            ex.loss_mask.iter().filter(|&&b| b).count()
        })
        .sum();
    assert!(total_targets > 0, "batch has no unmasked targets");
    let inv_total = 1.0 / total_targets as f32;
    let mut grads = TransformerWeights::zeros_like(config);
    let mut loss = 0.0f64;

    for ex in batch {
        let seq_len = ex.tokens.len();
        let tape = forward_train(weights, &ex.tokens, cache);

        // Loss and its gradient at the logits.
        let mut dlogits = Matrix2D::zeros(seq_len, config.vocab_size);
        let probs = {
            // Softmax over real logits only; no mask sentinel here.
            let mut p = Matrix2D::zeros(seq_len, config.vocab_size);
            for i in 0..seq_len {
                let row = tape.logits.row(i);
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for (dst, &v) in p.row_mut(i).iter_mut().zip(row) {
                    let e = (v - max).exp();
                    *dst = e;
                    sum += f64::from(e);
                }
                let inv = (1.0 / sum) as f32;
                for dst in p.row_mut(i) {
                    *dst *= inv;
                }
            }
            p
        };
        for i in 0..seq_len - 1 {
            if !ex.loss_mask[i] {
                continue;
            }
            let target = ex.tokens[i + 1];
            loss += row_nll(&tape.logits, i, target);
            let drow = dlogits.row_mut(i);
            for (j, &p) in probs.row(i).iter().enumerate() {
                drow[j] = p * inv_total;
            }
            drow[target as usize] -= inv_total;
        }

        // Head and final norm.
        grads.head.add_assign(&tape.xf.transpose().matmul(&dlogits));
        let dxf = dlogits.matmul(&weights.head.transpose());
        let mut dx = rmsnorm_backward(
            &tape.x_final,
            &tape.inv_rms_f,
            &weights.final_norm,
            &dxf,
            &mut grads.final_norm,
        );

        // Blocks in reverse.
        for (layer, tape_l, glayer) in itertools_rev(&weights.layers, &tape.layers, &mut grads.layers)
        {
            // MLP branch: x_out = x_mid + gelu(xn_m . w_in) . w_out
            let dm = &dx;
            glayer.w_out.add_assign(&tape_l.h_act.transpose().matmul(dm));
            let mut dh = dm.matmul(&layer.w_out.transpose());
            for (dv, &pre) in dh.as_mut_slice().iter_mut().zip(tape_l.h_pre.as_slice()) {
                *dv *= gelu_prime(pre);
            }
            glayer.w_in.add_assign(&tape_l.xn_m.transpose().matmul(&dh));
            let dxn_m = dh.matmul(&layer.w_in.transpose());
            let dmid_norm = rmsnorm_backward(
                &tape_l.x_mid,
                &tape_l.inv_rms_m,
                &layer.mlp_norm,
                &dxn_m,
                &mut glayer.mlp_norm,
            );
            let mut dx_mid = dx; // residual path
            dx_mid.add_assign(&dmid_norm);

            // Attention branch: x_mid = x_in + concat . w_o
            let dy = &dx_mid;
            glayer.attn.w_o.add_assign(&tape_l.concat.transpose().matmul(dy));
            let dconcat = dy.matmul(&layer.attn.w_o.transpose());
            let seq = dconcat.rows();
            let mut dq = Matrix2D::zeros(seq, config.d_model);
            let mut dk = Matrix2D::zeros(seq, config.d_model);
            let mut dv = Matrix2D::zeros(seq, config.d_model);
            for h in 0..config.n_heads {
                let doh = head_slice(&dconcat, h, head_dim);
                let p = &tape_l.probs[h];
                let vh = head_slice(&tape_l.v, h, head_dim);
                let dp = doh.matmul(&vh.transpose());
                let dvh = p.transpose().matmul(&doh);
                // Softmax backward, rows independent; masked cells have
                // p = 0 and so contribute nothing.
                let mut ds = Matrix2D::zeros(seq, seq);
                for i in 0..seq {
                    let (pr, dpr) = (p.row(i), dp.row(i));
                    let dot: f32 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    let dsr = ds.row_mut(i);
                    for j in 0..seq {
                        dsr[j] = pr[j] * (dpr[j] - dot);
                    }
                }
                ds.scale(scale);
                let dqr = ds.matmul(&tape_l.kr[h]);
                let dkr = ds.transpose().matmul(&tape_l.qr[h]);
                for i in 0..seq {
                    let back_q = apply_rope_inverse(dqr.row(i), i, cache);
                    let back_k = apply_rope_inverse(dkr.row(i), i, cache);
                    for j in 0..head_dim {
                        dq.set(i, h * head_dim + j, back_q[j]);
                        dk.set(i, h * head_dim + j, back_k[j]);
                        dv.set(i, h * head_dim + j, dvh.get(i, j));
                    }
                }
            }
            glayer.attn.w_q.add_assign(&tape_l.xn_a.transpose().matmul(&dq));
            glayer.attn.w_k.add_assign(&tape_l.xn_a.transpose().matmul(&dk));
            glayer.attn.w_v.add_assign(&tape_l.xn_a.transpose().matmul(&dv));
            let mut dxn_a = dq.matmul(&layer.attn.w_q.transpose());
            dxn_a.add_assign(&dk.matmul(&layer.attn.w_k.transpose()));
            dxn_a.add_assign(&dv.matmul(&layer.attn.w_v.transpose()));
            let dattn_norm = rmsnorm_backward(
                &tape_l.x_in,
                &tape_l.inv_rms_a,
                &layer.attn_norm,
                &dxn_a,
                &mut glayer.attn_norm,
            );
            dx = dx_mid; // residual path
            dx.add_assign(&dattn_norm);
        }

        // Embedding rows.
        for (i, &t) in ex.tokens.iter().enumerate() {
            let demb = grads.token_embedding.row_mut(t as usize);
            for (g, &d) in demb.iter_mut().zip(dx.row(i)) {
                *g += d;
            }
        }
    }
    (loss / total_targets as f64, grads)
}

/// Reverse lockstep iteration over layers, their tapes, and their gradient
/// slots.
fn itertools_rev<'a>(
    layers: &'a [LayerWeights],
    tapes: &'a [LayerTape],
    grads: &'a mut [LayerWeights],
) -> impl Iterator<Item = (&'a LayerWeights, &'a LayerTape, &'a mut LayerWeights)> {
    layers.iter().rev().zip(tapes.iter().rev()).zip(grads.iter_mut().rev()).map(|((a, b), c)| (a, b, c))
}

/// One optimizer step over a batch. Returns the batch loss, or an error if
/// it came out non-finite (the step is aborted, weights untouched).
pub fn train_step(
    state: &mut TrainState,
    batch: &[TrainExample],
    cache: &RopeCache,
) -> Result<f64> {
    let (loss, grads) = compute_gradients(&state.weights, batch, cache);
    if !loss.is_finite() {
        return Err(Error::Diverged { step: state.step, loss });
    }
    let t = (state.step + 1) as f64;
    let lr = state.hp.lr_at(state.step);
    let (b1, b2, eps) = (state.hp.beta1, state.hp.beta2, state.hp.eps);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let mut w_views = state.weights.param_views_mut();
    let mut m_views = state.adam_m.param_views_mut();
    let mut v_views = state.adam_v.param_views_mut();
    let g_views = grads.param_views();
    for (((wv, mv), vv), gv) in
        w_views.iter_mut().zip(m_views.iter_mut()).zip(v_views.iter_mut()).zip(g_views.iter())
    {
        debug_assert_eq!(wv.0, gv.0, "parameter blocks out of order");
        for i in 0..wv.1.len() {
            let g = f64::from(gv.1[i]);
            let m = b1 * f64::from(mv.1[i]) + (1.0 - b1) * g;
            let v = b2 * f64::from(vv.1[i]) + (1.0 - b2) * g * g;
            mv.1[i] = m as f32;
            vv.1[i] = v as f32;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            wv.1[i] -= update as f32;
        }
    }
    state.step += 1;
    Ok(loss)
}

// ── Decoding ────────────────────────────────────────────────────────────────

/// Greedy decoding: append the argmax token `max_new` times, re-running the
/// full forward each step. Ties break toward the lowest token id.
#[must_use]
pub fn greedy_decode(
    weights: &TransformerWeights,
    prompt: &[u32],
    max_new: usize,
    scheme: &ExtensionScheme,
    cache: &RopeCache,
) -> Vec<u32> {
    assert!(!prompt.is_empty(), "decoding needs a non-empty prompt");
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let logits = forward(weights, &tokens, scheme, cache);
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (j, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = j;
            }
        }
        tokens.push(best as u32);
        generated.push(best as u32);
    }
    generated
}

// ── Checkpoints ─────────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"CTXLABCK";
const CKPT_VERSION: u32 = 1;

/// Writes weights to the little-endian binary checkpoint layout:
/// magic `CTXLABCK`, version u32, the seven config fields (six u32 then
/// rope_base f32), the array count, then each array as
/// `name_len u32, name bytes, len u64, f32 data`.
pub fn save_checkpoint(weights: &TransformerWeights, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let c = &weights.config;
    for field in [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.train_context] {
        buf.extend_from_slice(&(field as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.rope_base.to_le_bytes());
    let views = weights.param_views();
    buf.extend_from_slice(&(views.len() as u32).to_le_bytes());
    for (name, data) in views {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], validating magic,
/// version, and every array shape against the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<TransformerWeights> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::MalformedFile(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                *pos
            )));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(Error::MalformedFile("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut pos)?;
    if version != CKPT_VERSION {
        return Err(Error::MalformedFile(format!("unsupported checkpoint version {version}")));
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = read_u32(&mut pos)? as usize;
    }
    let rope_base = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let config = ModelConfig {
        vocab_size: fields[0],
        d_model: fields[1],
        n_heads: fields[2],
        n_layers: fields[3],
        d_ff: fields[4],
        train_context: fields[5],
        rope_base,
    };
    config.validate()?;
    let mut weights = TransformerWeights::zeros_like(&config);
    let n_arrays = read_u32(&mut pos)? as usize;
    let mut views = weights.param_views_mut();
    if n_arrays != views.len() {
        return Err(Error::MalformedFile(format!(
            "checkpoint holds {n_arrays} arrays, model shape needs {}",
            views.len()
        )));
    }
    for (name, data) in views.iter_mut() {
        let name_len = read_u32(&mut pos)? as usize;
        let got_name = String::from_utf8_lossy(take(&mut pos, name_len)?).into_owned();
        if got_name != *name {
            return Err(Error::MalformedFile(format!(
                "array order mismatch: found {got_name:?}, expected {name:?}"
            )));
        }
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if len != data.len() {
            return Err(Error::MalformedFile(format!(
                "array {name} holds {len} values, expected {}",
                data.len()
            )));
        }
        for v in data.iter_mut() {
            *v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        }
    }
    if pos != buf.len() {
        return Err(Error::MalformedFile(format!("{} trailing bytes", buf.len() - pos)));
    }
    Ok(weights)
}
