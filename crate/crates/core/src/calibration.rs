// SPDX-License-Identifier: MIT OR Apache-2.0

//! Choosing `Δ` by matching a natural-emphasis transform.
//!
//! Two unbiased forward passes are run: one on the prompt as written and one
//! with the query span rewritten (uppercase by default). The calibrated `Δ`
//! is the natural-log Influence gap between them, clamped to
//! `[0, delta_max]`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GuideError, Result};
use crate::influence::{compute_map, InfluenceMap, Variant};
use crate::model::{forward_traced, BiasSpec, TraceOptions, Weights};
use crate::tags::{tokenize, TaggedPrompt};

pub const DEFAULT_DELTA_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextTransform {
    Identity,
    Uppercase,
    Lowercase,
}

impl TextTransform {
    pub fn apply(self, text: &str) -> String {
        match self {
            TextTransform::Identity => text.to_string(),
            TextTransform::Uppercase => text.to_uppercase(),
            TextTransform::Lowercase => text.to_lowercase(),
        }
    }
}

impl fmt::Display for TextTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextTransform::Identity => "identity",
            TextTransform::Uppercase => "uppercase",
            TextTransform::Lowercase => "lowercase",
        })
    }
}

impl FromStr for TextTransform {
    type Err = GuideError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "uppercase" | "upper" => Ok(Self::Uppercase),
            "lowercase" | "lower" => Ok(Self::Lowercase),
            other => Err(GuideError::UnknownName {
                kind: "transform",
                value: other.to_string(),
            }),
        }
    }
}

/// Which Influence readout feeds the log difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    /// Final layer, last position.
    #[default]
    Final,
    /// Mean over layers `1..=L` of the last-position log value.
    Averaged,
}

impl FromStr for LayerPolicy {
    type Err = GuideError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Self::Final),
            "averaged" | "average" => Ok(Self::Averaged),
            other => Err(GuideError::UnknownName {
                kind: "layer policy",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub transform: TextTransform,
    pub layer_policy: LayerPolicy,
    pub delta_max: f64,
    pub variant: Variant,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            transform: TextTransform::Uppercase,
            layer_policy: LayerPolicy::Final,
            delta_max: DEFAULT_DELTA_MAX,
            variant: Variant::InfluenceExact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub delta: f64,
    pub log_influence_base: f64,
    pub log_influence_transformed: f64,
    pub layer_policy: LayerPolicy,
    /// Unclamped difference.
    pub raw_difference: f64,
}

/// Rewrite the single query span of `prompt` with `transform`.
///
/// Returns the new clean text and the (unchanged) span. Transforms that
/// change the byte length of the span are rejected with the span the
/// rewritten text would occupy.
pub fn transform_prompt(prompt: &TaggedPrompt, transform: TextTransform) -> Result<(String, Range<usize>)> {
    let span = prompt.single_query()?;
    let clean = &prompt.clean_text;
    let original = &clean[span.clone()];
    let rewritten = transform.apply(original);
    if rewritten.len() != original.len() {
        return Err(GuideError::SpanMisaligned {
            suggested: span.start..span.start + rewritten.len(),
        });
    }
    let text = format!("{}{}{}", &clean[..span.start], rewritten, &clean[span.end..]);
    Ok((text, span))
}

fn readout(map: &InfluenceMap, policy: LayerPolicy) -> Result<f64> {
    let ln = |v: f64| {
        if v > 0.0 {
            Ok(v.ln())
        } else {
            Err(GuideError::ZeroInfluence)
        }
    };
    match policy {
        LayerPolicy::Final => ln(map.summary),
        LayerPolicy::Averaged => {
            let per_layer = &map.layer_summaries()[1..];
            let logs = per_layer.iter().map(|&v| ln(v)).collect::<Result<Vec<f64>>>()?;
            Ok(logs.iter().sum::<f64>() / logs.len() as f64)
        }
    }
}

fn log_influence(weights: &Weights, text: &str, span: Range<usize>, options: &CalibrationOptions) -> Result<f64> {
    let tokens = tokenize(text);
    let (_, trace) = forward_traced(weights, &tokens, &BiasSpec::none(), &TraceOptions::default())?;
    let map = compute_map(&trace, span, options.variant)?;
    readout(&map, options.layer_policy)
}

pub fn calibrate_delta(
    weights: &Weights,
    prompt: &TaggedPrompt,
    transform: TextTransform,
) -> Result<CalibrationResult> {
    calibrate_delta_with(
        weights,
        prompt,
        &CalibrationOptions {
            transform,
            ..CalibrationOptions::default()
        },
    )
}

pub fn calibrate_delta_with(
    weights: &Weights,
    prompt: &TaggedPrompt,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    if !options.delta_max.is_finite() || options.delta_max < 0.0 {
        return Err(GuideError::InvalidDelta(options.delta_max));
    }
    let (transformed, span) = transform_prompt(prompt, options.transform)?;
    let (base, moved) = std::thread::scope(|scope| {
        let other = scope.spawn(|| log_influence(weights, &transformed, span.clone(), options));
        let base = log_influence(weights, &prompt.clean_text, span.clone(), options);
        (base, other.join().expect("calibration pass panicked"))
    });
    let (base, moved) = (base?, moved?);
    let raw = moved - base;
    Ok(CalibrationResult {
        delta: raw.clamp(0.0, options.delta_max),
        log_influence_base: base,
        log_influence_transformed: moved,
        layer_policy: options.layer_policy,
        raw_difference: raw,
    })
}

/// Default bias per kind of emphasis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Following an instruction.
    Instruction,
    /// Retrieving highlighted information.
    Retrieval,
    /// Producing a required output format.
    Format,
}

impl FromStr for Task {
    type Err = GuideError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instruction" => Ok(Self::Instruction),
            "retrieval" => Ok(Self::Retrieval),
            "format" => Ok(Self::Format),
            other => Err(GuideError::UnknownName {
                kind: "task",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Instruction => "instruction",
            Task::Retrieval => "retrieval",
            Task::Format => "format",
        })
    }
}

pub fn default_delta(task: Task) -> f64 {
    match task {
        Task::Instruction => 2.0,
        Task::Retrieval => 1.0,
        Task::Format => 3.0,
    }
}
