//! Causal self-attention, linear attention, order-sensitivity probes and a
//! toy trainer for transformers without positional encodings.
//!
//! The crate is organized bottom-up:
//!
//! - [`math`], [`rng`]: dense `f64` matrices and seeded randomness.
//! - [`attention`]: softmax attention in step and masked matrix form.
//! - [`linear_attention`]: the fast-weight form of linear attention and its
//!   attention-form dual.
//! - [`model`]: a small autoregressive transformer LM with optional
//!   positional encodings.
//! - [`probes`]: permutation and position-sensitivity checks, plus symbolic
//!   context sets.
//! - [`train`]: hand-written backprop, finite-difference checks and the
//!   order-discrimination experiment.

pub mod attention;
pub mod error;
pub mod io;
pub mod linear_attention;
pub mod math;
pub mod model;
pub mod probes;
pub mod rng;
pub mod train;

pub use attention::{
    attn_matrix, attn_step, make_mask, AttentionKind, AttentionMask, AttentionParams, MaskKind, StepState,
};
pub use error::{Error, Result};
pub use linear_attention::{
    duality_check, duality_sweep, fwp_step, linear_attn_form, DualityReport, DualitySweep, FastWeightState,
};
pub use math::{gaussian_init, outer, softmax_columns, Matrix};
pub use model::{forward, ModelConfig, ModelParams, PeScheme, TokenSequence};
pub use rng::SeededRng;
pub use train::{gen_order_task, loss_and_grads, run_experiment, ExperimentSpec, OrderTask, TrainConfig, TrainReport};
