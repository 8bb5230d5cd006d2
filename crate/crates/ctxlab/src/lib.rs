//! Desk-scale laboratory for context-window extension in decoder-only
//! transformers.
//!
//! The crate trains tiny language models at a short context `L` and then
//! evaluates them far beyond `L` under several attention variants:
//!
//! * vanilla RoPE attention (the out-of-distribution baseline),
//! * bi-level attention that merges exact neighbor positions with
//!   floor-divided grouped positions (no fine-tuning required),
//! * the degenerate constant-far-position variant of the same path,
//! * sliding-window and chunked local attention,
//! * ALiBi, with and without grouped position remapping.
//!
//! Everything is plain `f32` on the CPU, seeded, and single-threaded by
//! default, so experiment outputs are byte-for-byte reproducible.

pub mod attention;
pub mod model;
pub mod positions;
pub mod report;
pub mod rng;
pub mod rope;
pub mod tasks;
pub mod tensor;

/// Errors surfaced by fallible operations: file formats, configuration,
/// and experiment-level failures.
///
/// Programmer-level contract violations (shape mismatches, out-of-range
/// positions) panic instead; see the individual operation docs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A checkpoint or corpus file did not match the documented layout.
    #[error("malformed file: {0}")]
    MalformedFile(String),

    /// Configuration rejected before any work was attempted.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss; the step number is reported so
    /// the run can be diagnosed from the log alone.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
