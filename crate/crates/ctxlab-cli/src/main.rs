//! `ctxlab` — train small rotary decoders and measure how far past their
//! training context different attention schemes keep them usable.
//!
//! All experiment parameters come from a flat key=value configuration
//! (file, `CTXLAB_*` environment variables, or `--set key=value`), so one
//! file can drive the whole train → evaluate → compare pipeline. Every
//! command reads the full key vocabulary and uses what it needs; keys
//! outside that vocabulary are rejected as typos.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, bad files, divergence),
//! 2 usage or configuration errors.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Config;
use ctxlab::model::{load_checkpoint, save_checkpoint, ModelConfig, TransformerWeights};
use ctxlab::positions::{
    check_rule, max_extended_length, min_feasible_group, rel_pos_matrix, ExtensionScheme,
    SelfExtendParams,
};
use ctxlab::report::{EvalReport, EvalRow};
use ctxlab::rng::Rng;
use ctxlab::rope::{AlibiSlopes, RopeCache};
use ctxlab::tasks::{
    load_token_file, passkey_grid, ppl_curve, save_token_file, train_kv_model,
    train_markov_model, KvEpisodeParams, MarkovCorpusSpec, TrainRunConfig,
};
use ctxlab::{model::TrainHyperparams, Error, Result};

#[derive(Parser)]
#[command(
    name = "ctxlab",
    version,
    about = "Context-window extension laboratory for small rotary decoders"
)]
struct Cli {
    /// Key=value configuration file (# comments allowed).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable, highest precedence).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed for corpora, initialization, and evaluation probes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for `compare` (schemes fan out; output is identical
    /// to a serial run).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (Markov language modeling or key-value retrieval).
    Train,
    /// Perplexity across sequence lengths under one attention scheme.
    Ppl,
    /// Passkey retrieval accuracy over a length x depth grid.
    Passkey,
    /// Inspect the relative-position table a scheme induces.
    Relpos,
    /// Check the group-size feasibility rule and extension limits.
    Rule,
    /// Run several schemes through the same evaluation side by side.
    Compare,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref(), &cli.set)?;
    let r = Resolved::read(&cfg, cli.seed)?;
    // Every key the tool understands has been read now; anything left over
    // is a typo. Check before doing any real work.
    cfg.reject_unknown()?;
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Train => cmd_train(cli, &cfg, &r),
        Command::Ppl => cmd_ppl(cli, &cfg, &r),
        Command::Passkey => cmd_passkey(cli, &cfg, &r),
        Command::Relpos => cmd_relpos(cli, &cfg, &r),
        Command::Rule => cmd_rule(&r),
        Command::Compare => cmd_compare(cli, &cfg, &r),
    }
}

/// Every configuration key the tool understands, read once with its
/// default. Commands use the subset they need.
struct Resolved {
    model: ModelConfig,
    // training
    task: String,
    steps: usize,
    batch_size: usize,
    lr: f64,
    warmup_steps: usize,
    log_every: usize,
    corpus_len: usize,
    markov: MarkovCorpusSpec,
    kv_seq_len: usize,
    kv_pairs_min: usize,
    kv_pairs_max: usize,
    kv_key_len: usize,
    kv_val_min: usize,
    kv_val_max: usize,
    checkpoint: String,
    dump_corpus: String,
    // scheme
    scheme: String,
    group_size: usize,
    neighbor_window: usize,
    pretrain_window: usize,
    window: usize,
    local_window: usize,
    // evaluation
    lengths: Vec<usize>,
    depths: Vec<f64>,
    digits: usize,
    key_len: usize,
    trials: usize,
    n_slices: usize,
    sliding_window: usize,
    stride: usize,
    corpus_file: String,
    schemes: String,
    eval: String,
    // relpos / rule
    length: usize,
    target_length: usize,
    dump_matrix: String,
    dump_merge_mask: String,
}

impl Resolved {
    fn read(cfg: &Config, master_seed: u64) -> Result<Self> {
        let model = ModelConfig {
            vocab_size: cfg.get("vocab_size", 64)?,
            d_model: cfg.get("d_model", 128)?,
            n_heads: cfg.get("n_heads", 4)?,
            n_layers: cfg.get("n_layers", 2)?,
            d_ff: cfg.get("d_ff", 512)?,
            train_context: cfg.get("train_context", 64)?,
            rope_base: cfg.get("rope_base", 10_000.0f32)?,
        };
        model.validate()?;
        let markov = MarkovCorpusSpec {
            vocab: cfg.get("markov_vocab", 32u32)?,
            kernel: cfg.get_list("markov_kernel", "0.85,0.07,0.05,0.03")?,
            seed: cfg.get("markov_seed", master_seed)?,
        };
        Ok(Resolved {
            model,
            task: cfg.get_str("task", "markov"),
            steps: cfg.get("steps", 300)?,
            batch_size: cfg.get("batch_size", 8)?,
            lr: cfg.get("lr", 1e-3)?,
            warmup_steps: cfg.get("warmup_steps", 50)?,
            log_every: cfg.get("log_every", 10)?,
            corpus_len: cfg.get("corpus_len", 100_000)?,
            markov,
            kv_seq_len: cfg.get("kv_seq_len", 0)?,
            kv_pairs_min: cfg.get("kv_pairs_min", 2)?,
            kv_pairs_max: cfg.get("kv_pairs_max", 3)?,
            kv_key_len: cfg.get("kv_key_len", 2)?,
            kv_val_min: cfg.get("kv_val_min", 1)?,
            kv_val_max: cfg.get("kv_val_max", 8)?,
            checkpoint: cfg.get_str("checkpoint", "model.ckpt"),
            dump_corpus: cfg.get_str("dump_corpus", ""),
            scheme: cfg.get_str("scheme", "vanilla"),
            group_size: cfg.get("group_size", 8)?,
            neighbor_window: cfg.get("neighbor_window", 8)?,
            pretrain_window: cfg.get("pretrain_window", 0)?,
            window: cfg.get("window", 0)?,
            local_window: cfg.get("local_window", 0)?,
            lengths: cfg.get_list("lengths", "32,64,128,256")?,
            depths: cfg.get_list("depths", "0.0,0.25,0.5,0.75,1.0")?,
            digits: cfg.get("digits", 5)?,
            key_len: cfg.get("key_len", 2)?,
            trials: cfg.get("trials", 20)?,
            n_slices: cfg.get("n_slices", 4)?,
            sliding_window: cfg.get("sliding_window", 0)?,
            stride: cfg.get("stride", 0)?,
            corpus_file: cfg.get_str("corpus_file", ""),
            schemes: cfg.get_str("schemes", "vanilla,selfextend,rerope,swa,chunked"),
            eval: cfg.get_str("eval", "ppl"),
            length: cfg.get("length", 128)?,
            target_length: cfg.get("target_length", 256)?,
            dump_matrix: cfg.get_str("dump_matrix", ""),
            dump_merge_mask: cfg.get_str("dump_merge_mask", ""),
        })
    }

    /// Training context the scheme should treat as the pretrained window:
    /// the `pretrain_window` key if set, else the model's (checkpoint's)
    /// training context.
    fn effective_pretrain(&self, from_checkpoint: Option<usize>) -> usize {
        if self.pretrain_window > 0 {
            self.pretrain_window
        } else {
            from_checkpoint.unwrap_or(self.model.train_context)
        }
    }

    /// Builds one scheme by name against a pretrained window and head
    /// count (slopes for the bias-based schemes are per-head).
    fn build_scheme(&self, name: &str, pretrain: usize, n_heads: usize) -> Result<ExtensionScheme> {
        let params = SelfExtendParams {
            group_size: self.group_size,
            neighbor_window: self.neighbor_window,
            pretrain_window: pretrain,
        };
        let or_pretrain = |v: usize| if v > 0 { v } else { pretrain };
        let scheme = match name {
            "vanilla" => ExtensionScheme::Vanilla { pretrain_window: pretrain },
            "selfextend" => ExtensionScheme::SelfExtend(params),
            "rerope" => ExtensionScheme::ReRope {
                neighbor_window: self.neighbor_window,
                pretrain_window: pretrain,
            },
            "swa" => ExtensionScheme::SlidingWindow { window: or_pretrain(self.window) },
            "chunked" => {
                ExtensionScheme::Chunked { local_window: or_pretrain(self.local_window) }
            }
            "alibi" => ExtensionScheme::Alibi { slopes: AlibiSlopes::geometric(n_heads) },
            "alibi_selfextend" => ExtensionScheme::AlibiSelfExtend {
                params,
                slopes: AlibiSlopes::geometric(n_heads),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown scheme {other:?} (expected vanilla, selfextend, rerope, swa, \
                     chunked, alibi, or alibi_selfextend)"
                )))
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }

    fn checkpoint_path(&self, out: &Path) -> PathBuf {
        let p = Path::new(&self.checkpoint);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}

/// Loads a checkpoint, naming the file in any I/O error.
fn load_model(path: &Path) -> Result<TransformerWeights> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => {
            Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => other,
    })
}

/// Retrieval evaluations need the whole marker/digit/filler vocabulary.
fn require_retrieval_vocab(config: &ModelConfig) -> Result<()> {
    if config.vocab_size < ctxlab::tasks::retrieval::MIN_VOCAB {
        return Err(Error::Config(format!(
            "passkey evaluation needs a model vocabulary of at least {}, checkpoint has {}",
            ctxlab::tasks::retrieval::MIN_VOCAB,
            config.vocab_size
        )));
    }
    Ok(())
}

/// Report configuration echo: the command name plus every resolved key.
fn report_config(cfg: &Config, command: &str, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut out = vec![("command".to_string(), command.to_string())];
    for (k, v) in extra {
        out.push((k.to_string(), v.clone()));
    }
    out.extend(cfg.echo());
    out
}

// ── train ───────────────────────────────────────────────────────────────────

fn cmd_train(cli: &Cli, cfg: &Config, r: &Resolved) -> Result<()> {
    let run = TrainRunConfig {
        steps: r.steps,
        batch_size: r.batch_size,
        hp: TrainHyperparams {
            lr: r.lr,
            warmup_steps: r.warmup_steps,
            ..TrainHyperparams::default()
        },
        seed: cli.seed,
        log_every: r.log_every,
    };
    let (state, curve, floor) = match r.task.as_str() {
        "markov" => {
            let (state, curve) = train_markov_model(&r.model, &r.markov, r.corpus_len, &run)?;
            if !r.dump_corpus.is_empty() {
                let corpus =
                    r.markov.generate(r.corpus_len, &mut Rng::new(cli.seed).derive(1));
                let path = cli.out.join(&r.dump_corpus);
                std::fs::create_dir_all(&cli.out)?;
                save_token_file(&path, r.markov.vocab, &corpus)?;
                println!("corpus        : {}", path.display());
            }
            let floor = r.markov.entropy_floor_ppl();
            (state, curve, Some(floor))
        }
        "kv" => {
            let episode = KvEpisodeParams {
                seq_len: if r.kv_seq_len > 0 { r.kv_seq_len } else { r.model.train_context },
                n_pairs_min: r.kv_pairs_min,
                n_pairs_max: r.kv_pairs_max,
                key_len: r.kv_key_len,
                val_len_min: r.kv_val_min,
                val_len_max: r.kv_val_max,
            };
            let (state, curve) = train_kv_model(&r.model, &episode, &run)?;
            (state, curve, None)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown task {other:?} (expected markov or kv)"
            )))
        }
    };

    std::fs::create_dir_all(&cli.out)?;
    let ckpt = r.checkpoint_path(&cli.out);
    save_checkpoint(&state.weights, &ckpt)?;

    let mut csv = String::new();
    csv.push_str(&format!("# ctxlab {}\n", env!("CARGO_PKG_VERSION")));
    for (k, v) in report_config(cfg, "train", &[]) {
        csv.push_str(&format!("# {k} = {v}\n"));
    }
    csv.push_str("step,loss\n");
    for (step, loss) in &curve {
        csv.push_str(&format!("{step},{loss:.6}\n"));
    }
    let curve_path = cli.out.join(format!("train_{}.csv", r.task));
    std::fs::write(&curve_path, csv)?;

    let final_loss = curve.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
    println!("task          : {}", r.task);
    println!("steps         : {}", state.step);
    println!("final loss    : {final_loss:.4} nats");
    if let Some(floor) = floor {
        println!(
            "entropy floor : {:.4} nats (perplexity {:.4})",
            floor.ln(),
            floor
        );
    }
    println!("checkpoint    : {}", ckpt.display());
    println!("loss curve    : {}", curve_path.display());
    Ok(())
}

// ── ppl ─────────────────────────────────────────────────────────────────────

/// Evaluation corpus: an explicit token file if configured, otherwise a
/// held-out Markov sample (a different seed stream than training uses, but
/// the same underlying chain rule).
fn eval_corpus(r: &Resolved, seed: u64, need: usize) -> Result<Vec<u32>> {
    if r.corpus_file.is_empty() {
        let len = r.corpus_len.max(need);
        Ok(r.markov.generate(len, &mut Rng::new(seed).derive(7)))
    } else {
        let (_, tokens) = load_token_file(Path::new(&r.corpus_file))?;
        if tokens.len() < need {
            return Err(Error::Config(format!(
                "corpus file holds {} tokens, need at least {need}",
                tokens.len()
            )));
        }
        Ok(tokens)
    }
}

/// Full-context rows, plus pooled sliding-window rows over the same slices
/// when a sliding window is configured.
fn ppl_rows(
    weights: &TransformerWeights,
    scheme: &ExtensionScheme,
    cache: &RopeCache,
    corpus: &[u32],
    r: &Resolved,
    seed: u64,
) -> Vec<EvalRow> {
    let mut rows = ppl_curve(weights, scheme, cache, corpus, &r.lengths, r.n_slices, seed);
    if r.sliding_window > 0 {
        let window = r.sliding_window;
        let stride = if r.stride > 0 { r.stride } else { (window / 2).max(1) };
        let base = Rng::new(seed);
        for (li, &length) in r.lengths.iter().enumerate() {
            let mut log_sum = 0.0f64;
            for s in 0..r.n_slices {
                // Same derivation as the full-context rows: identical text.
                let mut rng = base.derive((li * 4096 + s) as u64);
                let offset = rng.index(corpus.len() - length + 1);
                let slice = &corpus[offset..offset + length];
                log_sum += ctxlab::tasks::ppl_sliding_window(
                    weights, scheme, cache, slice, window, stride,
                )
                .ln();
            }
            rows.push(EvalRow {
                scheme: scheme.label().to_string(),
                length,
                depth: None,
                digits: None,
                metric: "ppl_sliding".into(),
                value: (log_sum / r.n_slices as f64).exp(),
                digit_accuracy: None,
                n_trials: Some(r.n_slices),
                seed,
                warning: None,
            });
        }
    }
    rows
}

fn print_rows(rows: &[EvalRow]) {
    for row in rows {
        let depth = row.depth.map(|d| format!(" depth {d:<4}")).unwrap_or_default();
        let warn = row.warning.as_deref().map(|w| format!("  [{w}]")).unwrap_or_default();
        println!(
            "  {:<18} len {:>5}{} {} = {:.4}{}",
            row.scheme, row.length, depth, row.metric, row.value, warn
        );
    }
}

fn cmd_ppl(cli: &Cli, cfg: &Config, r: &Resolved) -> Result<()> {
    let weights = load_model(&r.checkpoint_path(&cli.out))?;
    let ctx = weights.config.train_context;
    let scheme = r.build_scheme(&r.scheme, r.effective_pretrain(Some(ctx)), weights.config.n_heads)?;
    let max_len = r.lengths.iter().copied().max().unwrap_or(ctx);
    let cache = RopeCache::new(weights.config.head_dim(), max_len.max(ctx), weights.config.rope_base);
    let corpus = eval_corpus(r, cli.seed, max_len)?;
    let rows = ppl_rows(&weights, &scheme, &cache, &corpus, r, cli.seed);

    let mut report =
        EvalReport::new(report_config(cfg, "ppl", &[("scheme_detail", scheme.describe())]));
    report.rows = rows;
    let (csv, json) = report.write_files(&cli.out, &format!("ppl_{}", scheme.label()))?;
    println!("perplexity under {}", scheme.describe());
    print_rows(&report.rows);
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

// ── passkey ─────────────────────────────────────────────────────────────────

fn cmd_passkey(cli: &Cli, cfg: &Config, r: &Resolved) -> Result<()> {
    let weights = load_model(&r.checkpoint_path(&cli.out))?;
    require_retrieval_vocab(&weights.config)?;
    let ctx = weights.config.train_context;
    let scheme = r.build_scheme(&r.scheme, r.effective_pretrain(Some(ctx)), weights.config.n_heads)?;
    let max_len = r.lengths.iter().copied().max().unwrap_or(ctx) + r.digits;
    let cache = RopeCache::new(weights.config.head_dim(), max_len.max(ctx), weights.config.rope_base);
    let rows = passkey_grid(
        &weights, &scheme, &cache, &r.lengths, &r.depths, r.digits, r.key_len, r.trials, cli.seed,
    );

    let mut report =
        EvalReport::new(report_config(cfg, "passkey", &[("scheme_detail", scheme.describe())]));
    report.rows = rows;
    let (csv, json) = report.write_files(&cli.out, &format!("passkey_{}", scheme.label()))?;
    println!("passkey retrieval under {}", scheme.describe());
    print_rows(&report.rows);
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

// ── relpos ──────────────────────────────────────────────────────────────────

fn cmd_relpos(cli: &Cli, cfg: &Config, r: &Resolved) -> Result<()> {
    let _ = cfg;
    let pretrain = r.effective_pretrain(None);
    let scheme = r.build_scheme(&r.scheme, pretrain, r.model.n_heads)?;
    let matrix = rel_pos_matrix(r.length, &scheme)?;
    println!("scheme          : {}", scheme.describe());
    println!("sequence length : {}", r.length);
    match matrix.max_entry() {
        Some(max) => {
            println!("max distance    : {max}");
            let verdict = if matrix.out_of_distribution() {
                format!("NO (distance {max} exceeds trained range {})", pretrain - 1)
            } else {
                format!("yes (all distances <= {})", pretrain - 1)
            };
            println!("in distribution : {verdict}");
        }
        None => println!("max distance    : (no unmasked cells)"),
    }
    match scheme.max_safe_length() {
        Some(max) => println!("max safe length : {max}"),
        None => println!("max safe length : unbounded (distances capped by construction)"),
    }
    if !r.dump_matrix.is_empty() {
        std::fs::create_dir_all(&cli.out)?;
        let path = cli.out.join(&r.dump_matrix);
        std::fs::write(&path, matrix.to_csv())?;
        println!("matrix          : {}", path.display());
    }
    if !r.dump_merge_mask.is_empty() {
        let neighbor = match &scheme {
            ExtensionScheme::SelfExtend(p) | ExtensionScheme::AlibiSelfExtend { params: p, .. } => {
                p.neighbor_window
            }
            ExtensionScheme::ReRope { neighbor_window, .. } => *neighbor_window,
            _ => {
                return Err(Error::Config(
                    "merge mask only exists for the bi-level schemes".into(),
                ))
            }
        };
        std::fs::create_dir_all(&cli.out)?;
        let path = cli.out.join(&r.dump_merge_mask);
        std::fs::write(&path, ctxlab::attention::merge_mask(r.length, neighbor).to_csv())?;
        println!("merge mask      : {}", path.display());
    }
    Ok(())
}

// ── rule ────────────────────────────────────────────────────────────────────

fn cmd_rule(r: &Resolved) -> Result<()> {
    let pretrain = r.effective_pretrain(None) as u64;
    let target = r.target_length as u64;
    let neighbor = r.neighbor_window as u64;
    if neighbor >= pretrain {
        return Err(Error::Config(format!(
            "neighbor_window {neighbor} must be smaller than the pretrained window {pretrain}"
        )));
    }
    if target < pretrain {
        return Err(Error::Config(format!(
            "target_length {target} is shorter than the pretrained window {pretrain}; \
             nothing to extend"
        )));
    }
    println!("pretrained window (L) : {pretrain}");
    println!("target length (N)     : {target}");
    println!("neighbor window (W)   : {neighbor}");
    match min_feasible_group(pretrain, target, neighbor) {
        Some(g) => {
            println!("minimum feasible G_s  : {g}");
            println!(
                "extended length there : {}",
                max_extended_length(pretrain as usize, neighbor as usize, g as usize)
            );
        }
        None => println!(
            "minimum feasible G_s  : none (neighbor window consumes half the context or more)"
        ),
    }
    let g = r.group_size as u64;
    if g >= 1 {
        let ok = check_rule(pretrain, target, neighbor, g);
        println!(
            "rule at G_s = {g}      : {}",
            if ok { "satisfied" } else { "NOT satisfied" }
        );
        println!(
            "extended length there : {}",
            max_extended_length(pretrain as usize, neighbor as usize, g as usize)
        );
    }
    Ok(())
}

// ── compare ─────────────────────────────────────────────────────────────────

fn cmd_compare(cli: &Cli, cfg: &Config, r: &Resolved) -> Result<()> {
    let weights = load_model(&r.checkpoint_path(&cli.out))?;
    if r.eval == "passkey" {
        require_retrieval_vocab(&weights.config)?;
    }
    let ctx = weights.config.train_context;
    let pretrain = r.effective_pretrain(Some(ctx));
    let names: Vec<String> =
        r.schemes.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Config("schemes list is empty".into()));
    }
    let schemes: Vec<ExtensionScheme> = names
        .iter()
        .map(|n| r.build_scheme(n, pretrain, weights.config.n_heads))
        .collect::<Result<_>>()?;
    let max_len = r.lengths.iter().copied().max().unwrap_or(ctx) + r.digits;
    let cache = RopeCache::new(weights.config.head_dim(), max_len.max(ctx), weights.config.rope_base);
    let corpus = if r.eval == "ppl" { eval_corpus(r, cli.seed, max_len)? } else { Vec::new() };

    // Each scheme is independent; fan out when asked. Every scheme sees
    // the same seeds, so rows are comparable cell by cell and identical to
    // a serial run.
    let eval_one = |scheme: &ExtensionScheme| -> Result<Vec<EvalRow>> {
        match r.eval.as_str() {
            "ppl" => Ok(ppl_rows(&weights, scheme, &cache, &corpus, r, cli.seed)),
            "passkey" => Ok(passkey_grid(
                &weights, scheme, &cache, &r.lengths, &r.depths, r.digits, r.key_len, r.trials,
                cli.seed,
            )),
            other => Err(Error::Config(format!(
                "unknown eval {other:?} (expected ppl or passkey)"
            ))),
        }
    };
    let mut results: Vec<Option<Result<Vec<EvalRow>>>> = (0..schemes.len()).map(|_| None).collect();
    if cli.threads <= 1 || schemes.len() <= 1 {
        for (i, scheme) in schemes.iter().enumerate() {
            results[i] = Some(eval_one(scheme));
        }
    } else {
        let workers = cli.threads.min(schemes.len());
        std::thread::scope(|scope| {
            let chunks: Vec<Vec<usize>> = (0..workers)
                .map(|w| (w..schemes.len()).step_by(workers).collect())
                .collect();
            let mut handles = Vec::new();
            for chunk in chunks {
                let schemes = &schemes;
                let eval_one = &eval_one;
                handles.push(scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|i| (i, eval_one(&schemes[i])))
                        .collect::<Vec<_>>()
                }));
            }
            for handle in handles {
                for (i, res) in handle.join().expect("worker panicked") {
                    results[i] = Some(res);
                }
            }
        });
    }

    let mut report = EvalReport::new(report_config(
        cfg,
        "compare",
        &[(
            "scheme_details",
            schemes.iter().map(|s| s.describe()).collect::<Vec<_>>().join("; "),
        )],
    ));
    for res in results {
        report.rows.extend(res.expect("all schemes evaluated")?);
    }
    let (csv, json) = report.write_files(&cli.out, &format!("compare_{}", r.eval))?;
    println!("comparison ({}) across {} schemes", r.eval, schemes.len());
    print_rows(&report.rows);
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}
