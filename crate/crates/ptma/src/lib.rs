//! Cross-view online action detection with probabilistic temporal masked
//! attention.
//!
//! The model couples two branches over a sliding window of per-frame video
//! features:
//!
//! * a **classification branch** — a GRU producing raw temporal encodings,
//!   refined by attention and mapped to per-frame action logits;
//! * a **probabilistic branch** — a per-frame VAE whose latent samples act as
//!   attention queries against the GRU encodings, under a band-limited causal
//!   mask so that only the most recent `T` frames are visible.
//!
//! Everything is built on a small dense-tensor substrate with reverse-mode
//! differentiation ([`numerics`]), so the whole window loss is checkable
//! against central finite differences.
//!
//! The crate ships:
//!
//! * [`model`] — configuration, parameters, the temporal mask, and the
//!   forward pass of one training window;
//! * [`objectives`] — classification, reconstruction and KL losses and their
//!   weighted combination;
//! * [`trainer`] — window sampling, Adam with cosine annealing, multi-view
//!   reconstruction pairing, early stopping, checkpoints;
//! * [`stream`] — constant-memory frame-by-frame inference equivalent to
//!   full-sequence batch inference under the temporal mask;
//! * [`dataio`] — the feature-file format, dataset catalogs, the synthetic
//!   cross-view generator, and the cs/cv/csv/m-cv/m-csv protocol splits;
//! * [`evalproto`] — per-frame (calibrated) average precision and protocol
//!   reports;
//! * [`cli`] — the `ptma` command-line entry point.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the README for the CLI walkthrough.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod evalproto;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod stream;
pub mod trainer;

pub use error::PtmaError;
