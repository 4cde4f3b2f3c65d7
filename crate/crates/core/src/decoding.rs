// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy and multinomial generation with sustained span biasing.
//!
//! Random draws come from a ChaCha stream selected by `(seed, step)`, so a
//! generation is a pure function of its inputs no matter how many run in
//! parallel. Generated tokens never join the emphasised span; under the
//! default policy every new query row keeps the bias on the prompt span.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GuideError, Result};
use crate::influence::{compute_map_multi, Variant};
use crate::model::{forward, forward_traced, BiasSpec, KvCache, TraceOptions, Weights};
use crate::tags::{detokenize, TaggedPrompt, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Greedy,
    Multinomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceTracking {
    /// Recompute the map every `stride` steps.
    pub stride: usize,
    pub variant: Variant,
}

impl Default for InfluenceTracking {
    fn default() -> Self {
        Self {
            stride: 8,
            variant: Variant::InfluenceExact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: usize,
    pub stop_tokens: BTreeSet<u32>,
    /// Bias only the prompt's own query rows, not generated positions.
    pub bias_prompt_only: bool,
    pub influence: Option<InfluenceTracking>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            temperature: 1.0,
            seed: 0,
            max_tokens: 32,
            stop_tokens: BTreeSet::from([EOS]),
            bias_prompt_only: false,
            influence: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(GuideError::InvalidParams(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GuideError::InvalidParams("max_tokens must be >= 1".into()));
        }
        if self.influence.as_ref().is_some_and(|t| t.stride == 0) {
            return Err(GuideError::InvalidParams("influence stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopToken,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub tokens: Vec<u32>,
    pub text: String,
    /// Probability of each emitted token under `softmax(logits / T)`.
    pub probabilities: Vec<f64>,
    /// One entry per step; `null` on steps skipped by the stride.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub influence: Option<Vec<Option<f64>>>,
    pub stop_reason: StopReason,
}

/// Uniform draw in `[0, 1)` for a given `(seed, step)`.
pub fn step_uniform(seed: u64, step: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.random::<f64>()
}

fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    crate::math::softmax_in_place(&mut p);
    p
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_nonzero
}

/// The bias a generation applies, given the prompt length.
pub fn generation_bias(prompt: &TaggedPrompt, params: &GenerationParams, bias_from_spans: bool) -> BiasSpec {
    if !bias_from_spans {
        return BiasSpec::none();
    }
    let bias = prompt.bias_spec();
    if params.bias_prompt_only {
        bias.with_query_limit(prompt.clean_text.len())
    } else {
        bias
    }
}

fn tracked_spans(prompt: &TaggedPrompt) -> Result<Vec<Range<usize>>> {
    let spans: Vec<Range<usize>> = if prompt.query_spans.is_empty() {
        prompt.emphasis_spans.iter().map(|s| s.token_range.clone()).collect()
    } else {
        prompt.query_spans.iter().map(|s| s.token_range.clone()).collect()
    };
    if spans.is_empty() {
        return Err(GuideError::InvalidParams(
            "influence tracking needs a query or emphasis span".into(),
        ));
    }
    Ok(spans)
}

pub fn decode(
    weights: &Weights,
    prompt: &TaggedPrompt,
    params: &GenerationParams,
    bias_from_spans: bool,
) -> Result<GenerationRecord> {
    params.validate()?;
    let mut context = prompt.tokens();
    if context.is_empty() {
        return Err(GuideError::EmptyInput("prompt"));
    }
    let needed = context.len() + params.max_tokens;
    if needed > weights.config.max_seq {
        return Err(GuideError::SequenceTooLong {
            len: needed,
            max: weights.config.max_seq,
        });
    }
    let bias = generation_bias(prompt, params, bias_from_spans);
    let track = params
        .influence
        .as_ref()
        .map(|t| tracked_spans(prompt).map(|spans| (t, spans)))
        .transpose()?;

    let mut cache = KvCache::new(&weights.config);
    let prompt_logits = cache.extend(weights, &context, &bias)?;
    let mut next_logits = prompt_logits.row(prompt_logits.rows() - 1).to_vec();

    let mut emitted = Vec::with_capacity(params.max_tokens);
    let mut probabilities = Vec::with_capacity(params.max_tokens);
    let mut trajectory = track.as_ref().map(|_| Vec::with_capacity(params.max_tokens));
    let mut stop_reason = StopReason::MaxTokens;

    for step in 0..params.max_tokens {
        if let (Some((tracking, spans)), Some(traj)) = (track.as_ref(), trajectory.as_mut()) {
            let value = if step % tracking.stride == 0 {
                let (_, trace) = forward_traced(weights, &context, &bias, &TraceOptions::default())?;
                Some(compute_map_multi(&trace, spans, tracking.variant)?.summary)
            } else {
                None
            };
            traj.push(value);
        }

        let probs = tempered_probs(&next_logits, params.temperature);
        let token = match params.mode {
            SamplingMode::Greedy => argmax(&next_logits),
            SamplingMode::Multinomial => sample(&probs, step_uniform(params.seed, step as u64)),
        };
        let token_id = token as u32;
        probabilities.push(probs[token]);
        emitted.push(token_id);
        context.push(token_id);

        if params.stop_tokens.contains(&token_id) {
            stop_reason = StopReason::StopToken;
            break;
        }
        if step + 1 < params.max_tokens {
            next_logits = cache.extend(weights, &[token_id], &bias)?.row(0).to_vec();
        }
    }

    Ok(GenerationRecord {
        text: detokenize(&emitted),
        tokens: emitted,
        probabilities,
        influence: trajectory,
        stop_reason,
    })
}

/// Probability of `continuation` after `prompt_tokens`, recomputed with one
/// full forward pass (no cache).
pub fn continuation_probability(
    weights: &Weights,
    prompt_tokens: &[u32],
    continuation: &[u32],
    bias: &BiasSpec,
    temperature: f64,
) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(1.0);
    }
    let full: Vec<u32> = prompt_tokens.iter().chain(continuation).copied().collect();
    let out = forward(weights, &full[..full.len() - 1], bias, false)?;
    let mut prob = 1.0;
    for (j, &tok) in continuation.iter().enumerate() {
        let row = out.logits.row(prompt_tokens.len() - 1 + j);
        prob *= tempered_probs(row, temperature)[tok as usize];
    }
    Ok(prob)
}
