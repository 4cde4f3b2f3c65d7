// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-logit span biasing and span-influence metrics on a small,
//! fully deterministic decoder-only transformer.
//!
//! * [`tags`] turns `<!-> … <-!>` / `<?-> … <-?>` markup into clean text and
//!   token spans.
//! * [`model`] runs the forward pass, adding `Δ` to the attention logits of
//!   emphasised key positions, and records per-layer traces.
//! * [`influence`] propagates a span's importance through a trace
//!   (norm-weighted Influence, Attention Rollout, raw attention).
//! * [`calibration`] picks `Δ` from the log-influence gap of a naturally
//!   emphasised prompt variant.
//! * [`decoding`] generates text with sustained biasing.
//! * [`harness`] runs needle sweeps, Δ sweeps and AUC/correlation reports.

pub mod calibration;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod influence;
pub mod math;
pub mod model;
pub mod tags;

pub use error::{GuideError, Result};
