//! Desk-scale activation steering engine.
//!
//! The crate implements one experiment end to end: train a small decoder-only
//! transformer on a synthetic two-modality corpus with a deliberate alignment
//! gap, capture residual-stream and attention-head activations at hookable
//! sites, extract contrastive revision vectors from them, inject those vectors
//! back into the forward pass during generation, and measure the effect on
//! refusal and task behaviour with a composite score that trades attack
//! success against helpfulness.
//!
//! Modules are layered bottom-up:
//!
//! * [`numkernel`]: dense matrix math and the deterministic RNG everything
//!   else draws from.
//! * [`transformer`]: model definition, hookable forward pass, greedy
//!   decoding, and the versioned weight file.
//! * [`synthdata`]: corpus generation, toy-model training with behavioural
//!   gates, and contrastive pair construction.
//! * [`capture`]: labeled activation sets harvested from forward passes.
//! * [`probes`]: MLP and linear probes plus the cross-dataset accuracy
//!   heatmap.
//! * [`revision`]: revision-vector extraction and steering plans.
//! * [`eval`]: refusal oracle, attack-success/task-accuracy rates, composite
//!   score, hyperparameter sweeps, and cross-model transfer.
//! * [`viz`]: PCA and exact t-SNE projections with plot-data emission.
//!
//! All floating-point work is `f32` storage with `f64` accumulation inside
//! reductions; every random choice flows from a single 64-bit seed, so any
//! pipeline built from these pieces is bit-reproducible on a given platform.

pub mod capture;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod numkernel;
pub mod probes;
pub mod revision;
pub mod synthdata;
pub mod transformer;
pub mod viz;

pub use error::{Error, Result};
pub use numkernel::{Matrix, Rng};
pub use transformer::{CaptureSpec, ForwardTrace, HookSite, Model, ModelConfig, TransformerWeights};

