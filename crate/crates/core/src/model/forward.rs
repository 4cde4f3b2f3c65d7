// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass with span-biased attention and an incremental KV cache.
//!
//! ```text
//! x = embed(tok) + pos(p)
//! for each layer:
//!     h  = rms(x) · g_attn
//!     per head:  w = q·kᵀ/√d (+ Δ on biased key columns), A = softmax(w)
//!     U  = concat(A·v) · Wo          ; residual addend traced as ‖U‖
//!     x += U
//!     x += gelu(rms(x) · g_mlp · W_in) · W_out
//! logits = rms(x) · g_final · W_unembed
//! ```
//!
//! The cache stores unbiased keys and values; the bias is applied per query
//! row, so one cache can be reused with any `BiasSpec`. A full forward pass
//! is an `extend` on an empty cache, which makes incremental decoding and
//! recomputation arithmetically identical.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::trace::{ForwardTrace, HeadTrace, LayerTrace, TraceOptions, UpdateNorm};
use super::weights::{ModelConfig, Weights};
use crate::error::{GuideError, Result};
use crate::math::{l2_norm, softmax_in_place, vec_mat_into, Matrix};

const RMS_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Bias specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub range: Range<usize>,
    pub delta: f64,
}

/// Which layers or heads receive the bias.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    All,
    Only(Vec<usize>),
}

impl Selection {
    pub fn contains(&self, i: usize) -> bool {
        match self {
            Selection::All => true,
            Selection::Only(v) => v.contains(&i),
        }
    }
}

/// Key positions whose attention logits get `+Δ`, for every query row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasSpec {
    pub entries: Vec<BiasEntry>,
    #[serde(default)]
    pub layers: Selection,
    #[serde(default)]
    pub heads: Selection,
    /// Only query rows before this position are biased (`None`: all rows).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_limit: Option<usize>,
}

impl BiasSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn single(range: Range<usize>, delta: f64) -> Self {
        let mut s = Self::none();
        s.push(range, delta);
        s
    }

    pub fn push(&mut self, range: Range<usize>, delta: f64) {
        self.entries.push(BiasEntry { range, delta });
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Restrict the bias to query rows `< limit`.
    pub fn with_query_limit(mut self, limit: usize) -> Self {
        self.query_limit = Some(limit);
        self
    }

    #[inline]
    fn applies_to_row(&self, p: usize) -> bool {
        self.query_limit.is_none_or(|l| p < l)
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        for e in &self.entries {
            if !e.delta.is_finite() || e.delta < 0.0 {
                return Err(GuideError::InvalidDelta(e.delta));
            }
            if e.range.start > e.range.end || e.range.end > len {
                return Err(GuideError::InvalidRange {
                    start: e.range.start,
                    end: e.range.end,
                    len,
                });
            }
        }
        Ok(())
    }

    /// Additive bias per key column, length `len`. Overlapping entries add.
    pub fn column_bias(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for e in &self.entries {
            for b in &mut out[e.range.clone()] {
                *b += e.delta;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------

/// Head-major: `keys[h]` holds `head_dim` values per cached position.
#[derive(Debug, Clone)]
struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.n_layers)
                .map(|_| LayerCache {
                    keys: vec![Vec::new(); config.n_heads],
                    values: vec![Vec::new(); config.n_heads],
                })
                .collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Process `tokens` after the cached prefix and return their logits
    /// `[tokens.len() × V]`. Bias ranges index absolute positions.
    pub fn extend(&mut self, weights: &Weights, tokens: &[u32], bias: &BiasSpec) -> Result<Matrix> {
        run(weights, self, tokens, bias, None).map(|(logits, _)| logits)
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[s × V]`
    pub logits: Matrix,
    pub trace: Option<ForwardTrace>,
}

/// Full forward pass; with `capture` the trace uses default options.
pub fn forward(weights: &Weights, tokens: &[u32], bias: &BiasSpec, capture: bool) -> Result<ForwardOutput> {
    if capture {
        let (logits, trace) = forward_traced(weights, tokens, bias, &TraceOptions::default())?;
        Ok(ForwardOutput {
            logits,
            trace: Some(trace),
        })
    } else {
        let mut cache = KvCache::new(&weights.config);
        let logits = cache.extend(weights, tokens, bias)?;
        Ok(ForwardOutput { logits, trace: None })
    }
}

pub fn forward_traced(
    weights: &Weights,
    tokens: &[u32],
    bias: &BiasSpec,
    options: &TraceOptions,
) -> Result<(Matrix, ForwardTrace)> {
    let mut cache = KvCache::new(&weights.config);
    let (logits, trace) = run(weights, &mut cache, tokens, bias, Some(options))?;
    Ok((logits, trace.expect("trace requested")))
}

/// Sinusoidal position code scaled to unit-order norm so it does not swamp
/// the `1/√D`-scaled token embeddings.
fn add_position(x: &mut [f64], pos: usize) {
    let d = x.len();
    let scale = (2.0 / d as f64).sqrt();
    for (i, v) in x.iter_mut().enumerate() {
        let pair = (i / 2) as f64;
        let freq = (10_000f64).powf(-2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        *v += scale * if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

fn rms_norm_into(x: &[f64], gain: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // √(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

struct HeadRows {
    logits: Vec<Vec<f64>>,
    attention: Vec<Vec<f64>>,
}

struct LayerRows {
    attention: Vec<Vec<f64>>,
    residual_norms: Vec<f64>,
    update_norms: Vec<f64>,
    heads: Option<Vec<HeadRows>>,
}

fn validate_input(config: &ModelConfig, cache: &KvCache, tokens: &[u32], bias: &BiasSpec) -> Result<()> {
    if tokens.is_empty() {
        return Err(GuideError::EmptyInput("token sequence"));
    }
    let total = cache.len + tokens.len();
    if total > config.max_seq {
        return Err(GuideError::SequenceTooLong {
            len: total,
            max: config.max_seq,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t as usize >= config.vocab) {
        return Err(GuideError::TokenOutOfRange {
            token,
            vocab: config.vocab,
        });
    }
    bias.validate(total)
}

fn run(
    weights: &Weights,
    cache: &mut KvCache,
    tokens: &[u32],
    bias: &BiasSpec,
    capture: Option<&TraceOptions>,
) -> Result<(Matrix, Option<ForwardTrace>)> {
    let config = &weights.config;
    validate_input(config, cache, tokens, bias)?;
    if capture.is_some() && !cache.is_empty() {
        return Err(GuideError::InvalidTrace(
            "traces are only captured from an empty cache".into(),
        ));
    }

    let start = cache.len;
    let n = tokens.len();
    let total = start + n;
    let d = config.width();
    let hd = config.head_dim;
    let n_heads = config.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let col_bias = bias.column_bias(total);
    let per_head = capture.is_some_and(|c| c.per_head);
    let update_norm = capture.map_or(UpdateNorm::PostO, |c| c.update_norm);

    let mut x = Matrix::zeros(n, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        row.copy_from_slice(weights.token_embedding.row(tok as usize));
        add_position(row, start + t);
    }

    let mut captured: Vec<LayerRows> = Vec::new();
    let mut h = vec![0.0; d];
    let mut q = Matrix::zeros(n, d);
    let mut mix = vec![0.0; d];
    let mut update = vec![0.0; d];
    let mut hidden = vec![0.0; config.mlp_width()];
    let mut mlp_out = vec![0.0; d];
    let mut scores = vec![0.0; total];

    for (li, lw) in weights.layers.iter().enumerate() {
        let layer_cache = &mut cache.layers[li];
        let mut rows = capture.map(|_| LayerRows {
            attention: Vec::with_capacity(n),
            residual_norms: Vec::with_capacity(n),
            update_norms: Vec::with_capacity(n),
            heads: per_head.then(|| {
                (0..n_heads)
                    .map(|_| HeadRows {
                        logits: Vec::with_capacity(n),
                        attention: Vec::with_capacity(n),
                    })
                    .collect()
            }),
        });

        // project the new positions and append their keys/values
        let mut kv = vec![0.0; d];
        for t in 0..n {
            rms_norm_into(x.row(t), &lw.attn_gain, &mut h);
            vec_mat_into(&h, &lw.wq, q.row_mut(t));
            vec_mat_into(&h, &lw.wk, &mut kv);
            for (head, chunk) in kv.chunks_exact(hd).enumerate() {
                layer_cache.keys[head].extend_from_slice(chunk);
            }
            vec_mat_into(&h, &lw.wv, &mut kv);
            for (head, chunk) in kv.chunks_exact(hd).enumerate() {
                layer_cache.values[head].extend_from_slice(chunk);
            }
        }
        let bias_layer = bias.layers.contains(li);

        for t in 0..n {
            let p = start + t;
            let keys_visible = p + 1;
            let bias_row = bias_layer && bias.applies_to_row(p);
            let qrow = q.row(t);
            mix.fill(0.0);
            let mut avg = rows.as_ref().map(|_| vec![0.0; keys_visible]);

            for head in 0..n_heads {
                let off = head * hd;
                let qh = &qrow[off..off + hd];
                let keys = layer_cache.keys[head].chunks_exact(hd);
                for (s, kh) in scores[..keys_visible].iter_mut().zip(keys) {
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let raw_logits = per_head.then(|| scores[..keys_visible].to_vec());
                if bias_row && bias.heads.contains(head) {
                    for (s, b) in scores[..keys_visible].iter_mut().zip(&col_bias) {
                        *s += b;
                    }
                }
                let attn = &mut scores[..keys_visible];
                softmax_in_place(attn);
                let mix_h = &mut mix[off..off + hd];
                for (&a, vh) in attn.iter().zip(layer_cache.values[head].chunks_exact(hd)) {
                    for (m, v) in mix_h.iter_mut().zip(vh) {
                        *m += a * v;
                    }
                }
                if let Some(avg) = avg.as_mut() {
                    for (acc, &a) in avg.iter_mut().zip(attn.iter()) {
                        *acc += a;
                    }
                }
                if let Some(heads) = rows.as_mut().and_then(|r| r.heads.as_mut()) {
                    heads[head].logits.push(raw_logits.expect("per-head capture"));
                    heads[head].attention.push(attn.to_vec());
                }
            }

            vec_mat_into(&mix, &lw.wo, &mut update);
            if let Some(rows) = rows.as_mut() {
                let mut avg = avg.expect("capture");
                for a in &mut avg {
                    *a /= n_heads as f64;
                }
                rows.attention.push(avg);
                rows.residual_norms.push(l2_norm(x.row(t)));
                rows.update_norms.push(match update_norm {
                    UpdateNorm::PostO => l2_norm(&update),
                    UpdateNorm::PreO => l2_norm(&mix),
                });
            }
            for (xv, u) in x.row_mut(t).iter_mut().zip(&update) {
                *xv += u;
            }

            // MLP is per-token, so it can run right after this row's attention
            rms_norm_into(x.row(t), &lw.mlp_gain, &mut h);
            vec_mat_into(&h, &lw.w_in, &mut hidden);
            for v in &mut hidden {
                *v = gelu(*v);
            }
            vec_mat_into(&hidden, &lw.w_out, &mut mlp_out);
            for (xv, m) in x.row_mut(t).iter_mut().zip(&mlp_out) {
                *xv += m;
            }
        }
        if let Some(rows) = rows {
            captured.push(rows);
        }
    }
    cache.len = total;

    let mut logits = Matrix::zeros(n, config.vocab);
    for t in 0..n {
        rms_norm_into(x.row(t), &weights.final_gain, &mut h);
        vec_mat_into(&h, &weights.unembed, logits.row_mut(t));
    }

    let trace = match capture {
        None => None,
        Some(opts) => {
            let layers = captured
                .into_iter()
                .map(|rows| assemble_layer(rows, total))
                .collect::<Result<Vec<_>>>()?;
            let trace = ForwardTrace {
                layers,
                update_norm: opts.update_norm,
            };
            Some(trace)
        }
    };
    Ok((logits, trace))
}

fn square_from_rows(rows: &[Vec<f64>], s: usize) -> Matrix {
    let mut m = Matrix::zeros(s, s);
    for (k, row) in rows.iter().enumerate() {
        m.row_mut(k)[..row.len()].copy_from_slice(row);
    }
    m
}

fn assemble_layer(rows: LayerRows, s: usize) -> Result<LayerTrace> {
    let mut layer = LayerTrace::new(
        square_from_rows(&rows.attention, s),
        rows.residual_norms,
        rows.update_norms,
    )?;
    layer.heads = rows.heads.map(|heads| {
        heads
            .into_iter()
            .map(|h| HeadTrace {
                logits: square_from_rows(&h.logits, s),
                attention: square_from_rows(&h.attention, s),
            })
            .collect()
    });
    Ok(layer)
}
