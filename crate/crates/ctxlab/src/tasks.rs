//! Synthetic corpora, retrieval tasks, and the evaluations run on them.
//!
//! The experiments need two things from their data: a *known answer* (an
//! analytic entropy floor for language modeling, an exact target string
//! for retrieval) and *reproducibility* (every sample derived from a seed).
//! Both corpora here are built around those constraints.
//!
//! The Markov corpus has a conditional entropy that is exact by
//! construction: the next token is `shift(a, b) + offset (mod V)` where
//! `shift` is a fixed random table over context pairs and `offset` is drawn
//! from a fixed probability kernel. Whatever the stationary distribution
//! over contexts turns out to be, the per-token entropy is the kernel's
//! entropy, so `exp(H(kernel))` is the exact perplexity floor a perfect
//! model approaches.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::model::{
    greedy_decode, sequence_nll, train_step, ModelConfig, TrainExample, TrainHyperparams,
    TrainState, TransformerWeights,
};
use crate::positions::ExtensionScheme;
use crate::report::EvalRow;
use crate::rng::Rng;
use crate::rope::RopeCache;
use crate::{Error, Result};

// ── Markov corpus with an analytic entropy floor ────────────────────────────

/// A second-order Markov source: `P(c | a, b) = kernel[(c - shift(a,b)) mod V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovCorpusSpec {
    pub vocab: u32,
    /// Probability of each offset from the context's shift value.
    pub kernel: Vec<f64>,
    /// Seeds the `shift` table (and nothing else).
    pub seed: u64,
}

impl MarkovCorpusSpec {
    /// A peaked kernel over 32 tokens: low entropy floor, so a model that
    /// loses track of context degrades by a large, easily measured factor.
    #[must_use]
    pub fn sharp_default(seed: u64) -> Self {
        MarkovCorpusSpec { vocab: 32, kernel: vec![0.85, 0.07, 0.05, 0.03], seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("markov vocab must be at least 2".into()));
        }
        if self.kernel.is_empty() || self.kernel.len() > self.vocab as usize {
            return Err(Error::Config(format!(
                "kernel length {} must be in 1..={}",
                self.kernel.len(),
                self.vocab
            )));
        }
        if self.kernel.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Config("kernel entries must be finite and non-negative".into()));
        }
        let sum: f64 = self.kernel.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("kernel sums to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Entropy of the offset kernel in nats — exactly the conditional
    /// entropy `H(next | prev two)` of the source.
    #[must_use]
    pub fn conditional_entropy(&self) -> f64 {
        -self.kernel.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    /// `exp` of the conditional entropy: the perplexity a perfect
    /// next-token model attains on this source.
    #[must_use]
    pub fn entropy_floor_ppl(&self) -> f64 {
        self.conditional_entropy().exp()
    }

    /// The context-to-shift table, `vocab^2` entries, fixed by the seed.
    fn shift_table(&self) -> Vec<u32> {
        let v = self.vocab as usize;
        let mut rng = Rng::new(self.seed).derive(1);
        (0..v * v).map(|_| rng.index(v) as u32).collect()
    }

    /// Samples `len` tokens. The first two are uniform; the rest follow
    /// the kernel. `rng` drives the sampling only — the shift table comes
    /// from the spec's own seed, so two corpora from the same spec share
    /// the same underlying rule.
    #[must_use]
    pub fn generate(&self, len: usize, rng: &mut Rng) -> Vec<u32> {
        self.validate().expect("invalid corpus spec");
        assert!(len >= 2, "a second-order chain needs at least two tokens");
        let v = self.vocab as u64;
        let table = self.shift_table();
        let cumulative: Vec<f64> = self
            .kernel
            .iter()
            .scan(0.0, |acc, &p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let mut out = Vec::with_capacity(len);
        out.push(rng.index(v as usize) as u32);
        out.push(rng.index(v as usize) as u32);
        while out.len() < len {
            let (a, b) = (out[out.len() - 2], out[out.len() - 1]);
            let u = rng.next_f64();
            let offset = cumulative.iter().position(|&c| u < c).unwrap_or(self.kernel.len() - 1);
            let shifted = (u64::from(table[(a as usize) * v as usize + b as usize])
                + offset as u64)
                % v;
            out.push(shifted as u32);
        }
        out
    }
}

// ── Retrieval vocabulary ────────────────────────────────────────────────────

/// Token layout shared by the key–value and passkey tasks. Everything the
/// tasks emit lives below [`retrieval::MIN_VOCAB`]; the rest of the model's
/// vocabulary is simply unused.
pub mod retrieval {
    /// Digits `0..10` map to token ids `0..10`.
    pub const DIGIT_BASE: u32 = 0;
    pub const N_DIGITS: u32 = 10;
    /// Key alphabet, disjoint from digits.
    pub const KEY_BASE: u32 = 10;
    pub const N_KEYS: u32 = 16;
    /// Structural markers.
    pub const PAIR_MARK: u32 = 26;
    pub const VALUE_MARK: u32 = 27;
    pub const QUERY_MARK: u32 = 28;
    pub const ANSWER_MARK: u32 = 29;
    /// Filler runs a fixed 8-token cycle keyed by absolute position, so
    /// padding is perfectly predictable and carries no information.
    pub const FILLER_BASE: u32 = 30;
    pub const N_FILLER: u32 = 8;
    /// Smallest model vocabulary that can host these tasks.
    pub const MIN_VOCAB: usize = (FILLER_BASE + N_FILLER) as usize;

    #[inline]
    #[must_use]
    pub fn filler_at(pos: usize) -> u32 {
        FILLER_BASE + (pos as u32 % N_FILLER)
    }
}

// ── Key–value retrieval episodes ────────────────────────────────────────────

/// Shape of a key–value training episode.
///
/// An episode is a fixed-length sequence: a handful of
/// `PAIR_MARK key… VALUE_MARK digits…` records scattered at random offsets
/// in a filler background, then a `QUERY_MARK key… ANSWER_MARK digits…`
/// suffix at the very end. Only the answer digits carry loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KvEpisodeParams {
    pub seq_len: usize,
    pub n_pairs_min: usize,
    pub n_pairs_max: usize,
    pub key_len: usize,
    pub val_len_min: usize,
    pub val_len_max: usize,
}

impl Default for KvEpisodeParams {
    fn default() -> Self {
        KvEpisodeParams {
            seq_len: 64,
            n_pairs_min: 2,
            n_pairs_max: 3,
            key_len: 2,
            val_len_min: 1,
            val_len_max: 8,
        }
    }
}

impl KvEpisodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.key_len < 1 || self.val_len_min < 1 {
            return Err(Error::Config("keys and values cannot be empty".into()));
        }
        if self.n_pairs_min < 1 || self.n_pairs_min > self.n_pairs_max {
            return Err(Error::Config(format!(
                "bad pair-count range {}..={}",
                self.n_pairs_min, self.n_pairs_max
            )));
        }
        if self.val_len_min > self.val_len_max {
            return Err(Error::Config(format!(
                "bad value-length range {}..={}",
                self.val_len_min, self.val_len_max
            )));
        }
        let worst = self.n_pairs_max * (2 + self.key_len + self.val_len_max)
            + (2 + self.key_len + self.val_len_max);
        if worst > self.seq_len {
            return Err(Error::Config(format!(
                "seq_len {} cannot hold {} pairs at the longest value length (needs {worst})",
                self.seq_len, self.n_pairs_max
            )));
        }
        Ok(())
    }
}

fn random_digits(rng: &mut Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| retrieval::DIGIT_BASE + rng.index(retrieval::N_DIGITS as usize) as u32).collect()
}

fn random_key(rng: &mut Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| retrieval::KEY_BASE + rng.index(retrieval::N_KEYS as usize) as u32).collect()
}

/// One training episode. The loss mask covers exactly the answer digits.
#[must_use]
pub fn gen_kv_episode(params: &KvEpisodeParams, rng: &mut Rng) -> TrainExample {
    use retrieval::*;
    params.validate().expect("invalid episode parameters");
    let n_pairs = rng.int(params.n_pairs_min as i64, params.n_pairs_max as i64 + 1) as usize;

    // Distinct keys; each pair carries its own value length.
    let mut keys: Vec<Vec<u32>> = Vec::with_capacity(n_pairs);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    while keys.len() < n_pairs {
        let k = random_key(rng, params.key_len);
        if seen.insert(k.clone()) {
            keys.push(k);
        }
    }
    let values: Vec<Vec<u32>> = (0..n_pairs)
        .map(|_| {
            let len = rng.int(params.val_len_min as i64, params.val_len_max as i64 + 1) as usize;
            random_digits(rng, len)
        })
        .collect();
    let target = rng.index(n_pairs);

    let suffix_len = 2 + params.key_len + values[target].len();
    let region = params.seq_len - suffix_len;
    let pair_len = |i: usize| 2 + params.key_len + values[i].len();
    let pairs_total: usize = (0..n_pairs).map(pair_len).sum();
    assert!(pairs_total <= region, "episode layout overflow");

    // Scatter the pairs: draw sorted cut points over the free space so the
    // gaps between consecutive pairs are exchangeable.
    let free = region - pairs_total;
    let mut cuts: Vec<usize> = (0..n_pairs).map(|_| rng.index(free + 1)).collect();
    cuts.sort_unstable();

    let mut tokens = vec![u32::MAX; params.seq_len];
    let mut cursor = 0usize;
    let mut prev_cut = 0usize;
    for i in 0..n_pairs {
        cursor += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        tokens[cursor] = PAIR_MARK;
        tokens[cursor + 1..cursor + 1 + params.key_len].copy_from_slice(&keys[i]);
        tokens[cursor + 1 + params.key_len] = VALUE_MARK;
        tokens[cursor + 2 + params.key_len..cursor + pair_len(i)].copy_from_slice(&values[i]);
        cursor += pair_len(i);
    }

    let q = region;
    tokens[q] = QUERY_MARK;
    tokens[q + 1..q + 1 + params.key_len].copy_from_slice(&keys[target]);
    tokens[q + 1 + params.key_len] = ANSWER_MARK;
    tokens[q + 2 + params.key_len..].copy_from_slice(&values[target]);

    for (pos, t) in tokens.iter_mut().enumerate() {
        if *t == u32::MAX {
            *t = filler_at(pos);
        }
    }

    let answer_len = values[target].len();
    let mut loss_mask = vec![false; params.seq_len - 1];
    for m in loss_mask.iter_mut().skip(params.seq_len - answer_len - 1) {
        *m = true;
    }
    TrainExample { tokens, loss_mask }
}

/// A batch of independent episodes from one generator.
#[must_use]
pub fn gen_kv_batch(
    params: &KvEpisodeParams,
    batch_size: usize,
    rng: &mut Rng,
) -> Vec<TrainExample> {
    (0..batch_size).map(|_| gen_kv_episode(params, rng)).collect()
}

// ── Passkey probes ──────────────────────────────────────────────────────────

/// A single retrieval probe: one key–value record embedded in filler at a
/// controlled depth, followed by the query suffix. `tokens` ends at the
/// answer marker; `answer` is what decoding should produce next.
#[derive(Debug, Clone, PartialEq)]
pub struct PasskeySample {
    pub tokens: Vec<u32>,
    pub answer: Vec<u32>,
    pub carrier_start: usize,
}

/// Jitter half-width scaling for carrier placement: roughly half a percent
/// of the sequence per side, never below ±4. Public so window-sensitive
/// analyses can tell which depths keep the carrier strictly outside a
/// local attention window even at the jitter extreme.
pub fn placement_span(total_len: usize) -> usize {
    ((400 * total_len + 4096) / 8192).max(8)
}

/// Builds a probe of exactly `total_len` tokens. The carrier's start
/// position is `depth * total_len` plus a small uniform jitter, clamped so
/// carrier and suffix never overlap.
#[must_use]
pub fn gen_passkey_sample(
    total_len: usize,
    depth: f64,
    n_digits: usize,
    key_len: usize,
    rng: &mut Rng,
) -> PasskeySample {
    use retrieval::*;
    assert!((0.0..=1.0).contains(&depth), "depth {depth} outside [0, 1]");
    assert!(n_digits >= 1 && key_len >= 1);
    let carrier_len = 2 + key_len + n_digits;
    let suffix_len = 2 + key_len;
    let max_start = total_len
        .checked_sub(suffix_len)
        .and_then(|u| u.checked_sub(carrier_len))
        .expect("total_len too small for carrier plus suffix");
    let span = placement_span(total_len);
    let center = (depth * total_len as f64).round() as i64;
    let jitter = rng.index(span + 1) as i64 - (span / 2) as i64;
    let carrier_start = (center + jitter).clamp(0, max_start as i64) as usize;

    let key = random_key(rng, key_len);
    let answer = random_digits(rng, n_digits);

    let mut tokens = vec![u32::MAX; total_len];
    tokens[carrier_start] = PAIR_MARK;
    tokens[carrier_start + 1..carrier_start + 1 + key_len].copy_from_slice(&key);
    tokens[carrier_start + 1 + key_len] = VALUE_MARK;
    tokens[carrier_start + 2 + key_len..carrier_start + carrier_len].copy_from_slice(&answer);
    let q = total_len - suffix_len;
    tokens[q] = QUERY_MARK;
    tokens[q + 1..q + 1 + key_len].copy_from_slice(&key);
    tokens[q + 1 + key_len] = ANSWER_MARK;
    for (pos, t) in tokens.iter_mut().enumerate() {
        if *t == u32::MAX {
            *t = filler_at(pos);
        }
    }
    PasskeySample { tokens, answer, carrier_start }
}

/// Accuracy of greedy retrieval over seeded trials at one (length, depth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PasskeyOutcome {
    /// Fraction of trials whose full answer decoded exactly.
    pub exact: f64,
    /// Fraction of individual digits decoded correctly.
    pub digit: f64,
    pub n_trials: usize,
}

/// Runs `n_trials` independent probes and decodes greedily under the given
/// scheme. Trial `t` always draws from stream `t` of `seed`, so results do
/// not depend on evaluation order.
#[must_use]
pub fn eval_passkey(
    weights: &TransformerWeights,
    scheme: &ExtensionScheme,
    cache: &RopeCache,
    total_len: usize,
    depth: f64,
    n_digits: usize,
    key_len: usize,
    n_trials: usize,
    seed: u64,
) -> PasskeyOutcome {
    assert!(n_trials >= 1, "need at least one trial");
    let base = Rng::new(seed);
    let mut exact_hits = 0usize;
    let mut digit_hits = 0usize;
    for t in 0..n_trials {
        let mut rng = base.derive(t as u64);
        let sample = gen_passkey_sample(total_len, depth, n_digits, key_len, &mut rng);
        let decoded = greedy_decode(weights, &sample.tokens, n_digits, scheme, cache);
        if decoded == sample.answer {
            exact_hits += 1;
        }
        digit_hits += decoded.iter().zip(&sample.answer).filter(|(a, b)| a == b).count();
    }
    PasskeyOutcome {
        exact: exact_hits as f64 / n_trials as f64,
        digit: digit_hits as f64 / (n_trials * n_digits) as f64,
        n_trials,
    }
}

/// Warning cell for rows measured beyond a scheme's safe length.
fn length_warning(scheme: &ExtensionScheme, length: usize) -> Option<String> {
    match scheme.max_safe_length() {
        Some(max) if length > max => Some("beyond_safe_length".into()),
        _ => None,
    }
}

/// Passkey accuracy over a (length x depth) grid, as report rows. Row
/// order is lengths outer, depths inner; each cell owns an independent
/// seed stream, so a fanned-out run produces the same rows as a serial one.
#[must_use]
pub fn passkey_grid(
    weights: &TransformerWeights,
    scheme: &ExtensionScheme,
    cache: &RopeCache,
    lengths: &[usize],
    depths: &[f64],
    n_digits: usize,
    key_len: usize,
    n_trials: usize,
    seed: u64,
) -> Vec<EvalRow> {
    if n_trials == 0 {
        return Vec::new();
    }
    let base = Rng::new(seed);
    let mut rows = Vec::with_capacity(lengths.len() * depths.len());
    for (li, &length) in lengths.iter().enumerate() {
        for (di, &depth) in depths.iter().enumerate() {
            let cell = (li * depths.len() + di) as u64;
            let cell_seed = base.derive(cell).seed;
            let outcome = eval_passkey(
                weights, scheme, cache, length, depth, n_digits, key_len, n_trials, cell_seed,
            );
            rows.push(EvalRow {
                scheme: scheme.label().to_string(),
                length,
                depth: Some(depth),
                digits: Some(n_digits),
                metric: "exact_acc".into(),
                value: outcome.exact,
                digit_accuracy: Some(outcome.digit),
                n_trials: Some(n_trials),
                seed,
                warning: length_warning(scheme, length),
            });
        }
    }
    rows
}

// ── Perplexity ──────────────────────────────────────────────────────────────

/// Sliding-window perplexity (natural-log based). The first window scores
/// every token it can; each later window advances by `stride` and scores
/// only its fresh tokens, so every token is scored exactly once with at
/// least `window - stride` tokens of context.
///
/// Inputs no longer than the window are scored in one pass.
#[must_use]
pub fn ppl_sliding_window(
    weights: &TransformerWeights,
    scheme: &ExtensionScheme,
    cache: &RopeCache,
    tokens: &[u32],
    window: usize,
    stride: usize,
) -> f64 {
    assert!(tokens.len() >= 2, "nothing to score");
    assert!(window >= 2 && stride >= 1, "window must be >= 2 and stride >= 1");
    assert!(stride < window, "stride {stride} must leave some context (window {window})");
    let len = tokens.len();
    let mut total = 0.0f64;
    let mut count = 0usize;
    if len <= window {
        for nll in sequence_nll(weights, tokens, scheme, cache) {
            total += nll;
            count += 1;
        }
    } else {
        for nll in sequence_nll(weights, &tokens[..window], scheme, cache) {
            total += nll;
            count += 1;
        }
        let mut end = window;
        while end < len {
            let next_end = (end + stride).min(len);
            let slice = &tokens[next_end - window..next_end];
            let nll = sequence_nll(weights, slice, scheme, cache);
            for &v in &nll[nll.len() - (next_end - end)..] {
                total += v;
                count += 1;
            }
            end = next_end;
        }
    }
    debug_assert_eq!(count, len - 1, "every token after the first is scored once");
    (total / count as f64).exp()
}

/// Full-context perplexity: one forward over the whole input.
#[must_use]
pub fn ppl_full_context(
    weights: &TransformerWeights,
    scheme: &ExtensionScheme,
    cache: &RopeCache,
    tokens: &[u32],
) -> f64 {
    let nll = sequence_nll(weights, tokens, scheme, cache);
    (nll.iter().sum::<f64>() / nll.len() as f64).exp()
}

/// Full-context perplexity at each requested length, as report rows.
///
/// For each length, `n_slices` windows are cut from the corpus at seeded
/// offsets and scored in a single forward pass each; the row's value pools
/// token-level NLL across slices. Rows past the scheme's safe length carry
/// a warning.
#[must_use]
pub fn ppl_curve(
    weights: &TransformerWeights,
    scheme: &ExtensionScheme,
    cache: &RopeCache,
    corpus: &[u32],
    lengths: &[usize],
    n_slices: usize,
    seed: u64,
) -> Vec<EvalRow> {
    assert!(n_slices >= 1, "need at least one slice per length");
    let base = Rng::new(seed);
    let mut rows = Vec::with_capacity(lengths.len());
    for (li, &length) in lengths.iter().enumerate() {
        assert!(
            corpus.len() >= length,
            "corpus of {} tokens cannot provide slices of {length}",
            corpus.len()
        );
        let mut total = 0.0f64;
        let mut count = 0usize;
        for s in 0..n_slices {
            let mut rng = base.derive((li * 4096 + s) as u64);
            let offset = rng.index(corpus.len() - length + 1);
            for nll in sequence_nll(weights, &corpus[offset..offset + length], scheme, cache) {
                total += nll;
                count += 1;
            }
        }
        rows.push(EvalRow {
            scheme: scheme.label().to_string(),
            length,
            depth: None,
            digits: None,
            metric: "ppl".into(),
            value: (total / count as f64).exp(),
            digit_accuracy: None,
            n_trials: Some(n_slices),
            seed,
            warning: length_warning(scheme, length),
        });
    }
    rows
}

// ── Training drivers ────────────────────────────────────────────────────────

/// Knobs shared by the two training drivers.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TrainRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hp: TrainHyperparams,
    pub seed: u64,
    /// Record the loss every this many steps (the final step is always
    /// recorded). Zero disables intermediate records.
    pub log_every: usize,
}

fn record_loss(curve: &mut Vec<(usize, f64)>, step: usize, loss: f64, cfg: &TrainRunConfig) {
    if step + 1 == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0) {
        curve.push((step, loss));
    }
}

/// Trains a fresh model as a language model on a Markov corpus. Windows of
/// `train_context` tokens are cut from a corpus of `corpus_len` tokens at
/// seeded offsets. Returns the trained state and the recorded loss curve.
pub fn train_markov_model(
    model_config: &ModelConfig,
    corpus_spec: &MarkovCorpusSpec,
    corpus_len: usize,
    run: &TrainRunConfig,
) -> Result<(TrainState, Vec<(usize, f64)>)> {
    corpus_spec.validate()?;
    model_config.validate()?;
    if corpus_spec.vocab as usize > model_config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab {} exceeds model vocab {}",
            corpus_spec.vocab, model_config.vocab_size
        )));
    }
    let window = model_config.train_context;
    assert!(corpus_len > window, "corpus must be longer than one context window");
    let base = Rng::new(run.seed);
    let corpus = corpus_spec.generate(corpus_len, &mut base.derive(1));
    let weights = TransformerWeights::init(model_config, &mut base.derive(2));
    let cache = RopeCache::new(model_config.head_dim(), window, model_config.rope_base);
    let mut sampler = base.derive(3);
    let mut state = TrainState::new(weights, run.hp);
    let mut curve = Vec::new();
    for step in 0..run.steps {
        let batch: Vec<TrainExample> = (0..run.batch_size)
            .map(|_| {
                let offset = sampler.index(corpus_len - window + 1);
                TrainExample::lm(corpus[offset..offset + window].to_vec())
            })
            .collect();
        let loss = train_step(&mut state, &batch, &cache)?;
        record_loss(&mut curve, step, loss, run);
    }
    Ok((state, curve))
}

/// Trains a fresh model on key–value retrieval episodes (fresh samples
/// every step). Episode length must fit the model's training context.
pub fn train_kv_model(
    model_config: &ModelConfig,
    episode: &KvEpisodeParams,
    run: &TrainRunConfig,
) -> Result<(TrainState, Vec<(usize, f64)>)> {
    model_config.validate()?;
    episode.validate()?;
    if model_config.vocab_size < retrieval::MIN_VOCAB {
        return Err(Error::Config(format!(
            "retrieval tasks need vocab of at least {}, model has {}",
            retrieval::MIN_VOCAB,
            model_config.vocab_size
        )));
    }
    if episode.seq_len > model_config.train_context {
        return Err(Error::Config(format!(
            "episode length {} exceeds training context {}",
            episode.seq_len, model_config.train_context
        )));
    }
    let base = Rng::new(run.seed);
    let weights = TransformerWeights::init(model_config, &mut base.derive(2));
    let cache =
        RopeCache::new(model_config.head_dim(), model_config.train_context, model_config.rope_base);
    let mut sampler = base.derive(3);
    let mut state = TrainState::new(weights, run.hp);
    let mut curve = Vec::new();
    for step in 0..run.steps {
        let batch = gen_kv_batch(episode, run.batch_size, &mut sampler);
        let loss = train_step(&mut state, &batch, &cache)?;
        record_loss(&mut curve, step, loss, run);
    }
    Ok((state, curve))
}

// ── Token files ─────────────────────────────────────────────────────────────

const TOKEN_MAGIC: &[u8; 8] = b"CTXLABTK";
const TOKEN_VERSION: u32 = 1;

/// Writes tokens as a little-endian binary file: magic `CTXLABTK`,
/// version u32, vocab u32, count u64, then one u16 per token.
pub fn save_token_file(path: &Path, vocab: u32, tokens: &[u32]) -> Result<()> {
    assert!(vocab <= 1 << 16, "token file format stores u16 ids");
    let mut buf = Vec::with_capacity(24 + tokens.len() * 2);
    buf.extend_from_slice(TOKEN_MAGIC);
    buf.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    buf.extend_from_slice(&vocab.to_le_bytes());
    buf.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for &t in tokens {
        assert!(t < vocab, "token {t} outside vocab {vocab}");
        buf.extend_from_slice(&(t as u16).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a file written by [`save_token_file`]; returns `(vocab, tokens)`.
pub fn load_token_file(path: &Path) -> Result<(u32, Vec<u32>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 24 || &buf[..8] != TOKEN_MAGIC {
        return Err(Error::MalformedFile("not a token file".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != TOKEN_VERSION {
        return Err(Error::MalformedFile(format!("unsupported token file version {version}")));
    }
    let vocab = u32::from_le_bytes(buf[12..16].try_into().unwrap());
    let count = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    if buf.len() != 24 + count * 2 {
        return Err(Error::MalformedFile(format!(
            "token file length {} does not match count {count}",
            buf.len()
        )));
    }
    let tokens: Vec<u32> = buf[24..]
        .chunks_exact(2)
        .map(|c| u32::from(u16::from_le_bytes([c[0], c[1]])))
        .collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::MalformedFile(format!("token {bad} outside vocab {vocab}")));
    }
    Ok((vocab, tokens))
}
