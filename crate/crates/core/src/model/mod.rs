// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale decoder-only transformer.

mod forward;
mod trace;
mod weights;

pub use forward::{forward, forward_traced, BiasEntry, BiasSpec, ForwardOutput, KvCache, Selection};
pub use trace::{ForwardTrace, HeadTrace, LayerTrace, TraceOptions, UpdateNorm, ROW_SUM_TOL};
pub use weights::{
    init_model, load_weights, load_weights_expecting, save_weights, LayerWeights, ModelConfig, NormKind,
    PositionalKind, Weights, WEIGHT_MAGIC, WEIGHT_VERSION,
};
