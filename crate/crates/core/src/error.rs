// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::ops::Range;

use thiserror::Error;

/// Every fallible operation in `guide-core` returns this error.
#[derive(Debug, Error)]
pub enum GuideError {
    // -- numeric kernels / statistics --
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("invalid dimensions {rows}x{cols}")]
    InvalidDimensions { rows: usize, cols: usize },

    #[error("ROC AUC undefined: need at least one positive and one negative label ({positives} positive, {negatives} negative)")]
    UndefinedAuc { positives: usize, negatives: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    // -- tag grammar --
    #[error("tag parse error at byte {offset}: {message}")]
    TagParse { offset: usize, message: String },

    #[error("unknown emphasis level {0} (expected 1, 2 or 3)")]
    UnknownLevel(u8),

    #[error("invalid delta {0}: must be finite and >= 0")]
    InvalidDelta(f64),

    // -- model --
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("range {start}..{end} invalid for length {len}")]
    InvalidRange { start: usize, end: usize, len: usize },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("weight file config does not match the expected config")]
    ConfigMismatch,

    // -- metrics / calibration --
    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("transform changed span length; realigned span would be {suggested:?}")]
    SpanMisaligned { suggested: Range<usize> },

    #[error("influence summary is zero, log-influence undefined")]
    ZeroInfluence,

    #[error("expected exactly one query span, found {0}")]
    QuerySpanCount(usize),

    #[error("unknown {kind}: {value}")]
    UnknownName { kind: &'static str, value: String },

    #[error("invalid generation params: {0}")]
    InvalidParams(String),

    // -- harness --
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error("needle and question need {needed} bytes but the context length is {context}")]
    NeedleTooLong { needed: usize, context: usize },

    #[error("filler corpus unavailable: {0}")]
    MissingCorpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GuideError>;
