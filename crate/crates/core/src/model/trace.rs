// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer records captured during a forward pass.
//!
//! For layer `ℓ` (1-based in the metric recurrences, 0-based here) the trace
//! holds the head-averaged attention matrix, the norm of the residual stream
//! entering the layer, the norm of the attention branch's residual addend and
//! their ratio `r = ‖E‖ / ‖U‖`.

use serde::{Deserialize, Serialize};

use crate::error::{GuideError, Result};
use crate::math::Matrix;

/// Tolerance on attention row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Which vector the update norm is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateNorm {
    /// Attention output after the output projection (what is actually added
    /// to the residual stream).
    #[default]
    PostO,
    /// Attention-weighted value mix before the output projection.
    PreO,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    /// Also keep per-head logits and attention.
    pub per_head: bool,
    pub update_norm: UpdateNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrace {
    /// Scaled query-key logits before any bias; zero above the diagonal.
    pub logits: Matrix,
    pub attention: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Head-averaged, lower-triangular `[s × s]`.
    pub attention: Matrix,
    pub residual_norms: Vec<f64>,
    pub update_norms: Vec<f64>,
    pub ratios: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<HeadTrace>>,
}

impl LayerTrace {
    /// Build a layer record, computing the ratios. Used by the forward pass
    /// and for hand-made traces.
    pub fn new(attention: Matrix, residual_norms: Vec<f64>, update_norms: Vec<f64>) -> Result<Self> {
        let ratios = residual_norms.iter().zip(&update_norms).map(|(e, u)| e / u).collect();
        let layer = Self {
            attention,
            residual_norms,
            update_norms,
            ratios,
            heads: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn seq_len(&self) -> usize {
        self.residual_norms.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.residual_norms.len();
        let bad = |m: String| Err(GuideError::InvalidTrace(m));
        if s == 0 {
            return bad("empty layer".into());
        }
        if self.attention.rows() != s || self.attention.cols() != s {
            return bad(format!(
                "attention is {}x{}, expected {s}x{s}",
                self.attention.rows(),
                self.attention.cols()
            ));
        }
        if self.update_norms.len() != s || self.ratios.len() != s {
            return bad("norm vectors differ in length".into());
        }
        for (name, v) in [("residual", &self.residual_norms), ("update", &self.update_norms)] {
            if let Some(x) = v.iter().find(|x| !x.is_finite() || **x <= 0.0) {
                return bad(format!("{name} norm {x} is not finite and positive"));
            }
        }
        for k in 0..s {
            let row = self.attention.row(k);
            if row.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return bad(format!("attention row {k} has negative or non-finite entries"));
            }
            if row[k + 1..].iter().any(|&a| a != 0.0) {
                return bad(format!("attention row {k} attends to future positions"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return bad(format!("attention row {k} sums to {sum}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub update_norm: UpdateNorm,
}

impl ForwardTrace {
    pub fn from_layers(layers: Vec<LayerTrace>) -> Result<Self> {
        let trace = Self {
            layers,
            update_norm: UpdateNorm::PostO,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, LayerTrace::seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(GuideError::InvalidTrace("no layers".into()));
        }
        let s = self.seq_len();
        for (i, l) in self.layers.iter().enumerate() {
            if l.seq_len() != s {
                return Err(GuideError::InvalidTrace(format!(
                    "layer {i} has length {}, expected {s}",
                    l.seq_len()
                )));
            }
            l.validate()?;
        }
        Ok(())
    }
}
