// SPDX-License-Identifier: MIT OR Apache-2.0

//! Span-importance maps computed from a [`ForwardTrace`].
//!
//! All variants start from the span indicator at layer 0 and produce an
//! `[(L+1) × s]` map with values in `[0, 1]`:
//!
//! * **Influence (exact)**: the attention mix is a norm-weighted average,
//!   `I(U_k) = Σ A_ki ‖E_i‖ I(E_i) / Σ A_ki ‖E_i‖`, then the residual update is
//!   `I(E'_k) = (‖E_k‖ I(E_k) + ‖U_k‖ I(U_k)) / (‖E_k‖ + ‖U_k‖)`. The MLP is a
//!   per-token map and leaves values unchanged.
//! * **Influence (simplified)**: residual norms within a layer are treated as
//!   constant, giving `(r_k I(E_k) + Σ A_ki I(E_i)) / (1 + r_k)`.
//! * **Rollout**: both branches weigh one half, `½ (R(E_k) + Σ A_ki R(E_i))`.
//! * **Raw attention**: per layer, the attention mass each position puts on
//!   the span.
//!
//! Attention mixes divide by the row sum. Trace rows sum to one up to
//! rounding; dividing makes the full-span and empty-span fixed points exact.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GuideError, Result};
use crate::math::Matrix;
use crate::model::{ForwardTrace, LayerTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    InfluenceExact,
    InfluenceSimplified,
    Rollout,
    RawAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::InfluenceExact,
        Variant::InfluenceSimplified,
        Variant::Rollout,
        Variant::RawAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::InfluenceExact => "influence_exact",
            Variant::InfluenceSimplified => "influence_simplified",
            Variant::Rollout => "rollout",
            Variant::RawAttention => "raw_attention",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GuideError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "influence" | "influence_exact" => Ok(Variant::InfluenceExact),
            "simplified" | "influence_simplified" => Ok(Variant::InfluenceSimplified),
            "rollout" => Ok(Variant::Rollout),
            "raw" | "raw_attention" => Ok(Variant::RawAttention),
            other => Err(GuideError::UnknownName {
                kind: "metric variant",
                value: other.to_string(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Initialisation and single-layer steps
// ---------------------------------------------------------------------------

fn check_span(span: &Range<usize>, s: usize) -> Result<()> {
    if span.start > span.end || span.end > s {
        return Err(GuideError::InvalidRange {
            start: span.start,
            end: span.end,
            len: s,
        });
    }
    Ok(())
}

/// Indicator of `span` over `s` positions.
pub fn influence_init(span: Range<usize>, s: usize) -> Result<Vec<f64>> {
    influence_init_multi(std::slice::from_ref(&span), s)
}

/// Indicator of the union of disjoint spans.
pub fn influence_init_multi(spans: &[Range<usize>], s: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; s];
    for span in spans {
        check_span(span, s)?;
        for v in &mut out[span.clone()] {
            if *v != 0.0 {
                return Err(GuideError::InvalidRange {
                    start: span.start,
                    end: span.end,
                    len: s,
                });
            }
            *v = 1.0;
        }
    }
    Ok(out)
}

fn check_step(prev: &[f64], layer: &LayerTrace) -> Result<()> {
    if prev.len() != layer.seq_len() {
        return Err(GuideError::LengthMismatch {
            left: prev.len(),
            right: layer.seq_len(),
        });
    }
    if prev.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(GuideError::InvalidTrace("previous values outside [0, 1]".into()));
    }
    layer.validate()
}

/// `Σ_i w_i v_i / Σ_i w_i` over the causal part of row `k`.
#[inline]
fn weighted_mix(row: &[f64], weight: impl Fn(usize) -> f64, values: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &a) in row.iter().enumerate() {
        let w = a * weight(i);
        num += w * values[i];
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// One layer of norm-weighted Influence.
pub fn influence_layer_step(prev: &[f64], layer: &LayerTrace) -> Result<Vec<f64>> {
    check_step(prev, layer)?;
    let e = &layer.residual_norms;
    let u = &layer.update_norms;
    Ok((0..prev.len())
        .map(|k| {
            let mix = weighted_mix(&layer.attention.row(k)[..=k], |i| e[i], prev);
            ((e[k] * prev[k] + u[k] * mix) / (e[k] + u[k])).clamp(0.0, 1.0)
        })
        .collect())
}

/// One layer of Influence with constant residual norms inside the mix.
pub fn influence_layer_step_simplified(prev: &[f64], layer: &LayerTrace) -> Result<Vec<f64>> {
    check_step(prev, layer)?;
    let r = &layer.ratios;
    Ok((0..prev.len())
        .map(|k| {
            let mix = weighted_mix(&layer.attention.row(k)[..=k], |_| 1.0, prev);
            ((prev[k] * r[k] + mix) / (1.0 + r[k])).clamp(0.0, 1.0)
        })
        .collect())
}

/// One layer of Attention Rollout.
pub fn attention_rollout_step(prev: &[f64], layer: &LayerTrace) -> Result<Vec<f64>> {
    check_step(prev, layer)?;
    Ok((0..prev.len())
        .map(|k| {
            let mix = weighted_mix(&layer.attention.row(k)[..=k], |_| 1.0, prev);
            (0.5 * (prev[k] + mix)).clamp(0.0, 1.0)
        })
        .collect())
}

fn raw_attention_layer(layer: &LayerTrace, indicator: &[f64]) -> Vec<f64> {
    (0..layer.seq_len())
        .map(|k| weighted_mix(&layer.attention.row(k)[..=k], |_| 1.0, indicator).clamp(0.0, 1.0))
        .collect()
}

/// Last-layer attention mass on `span` for every query position.
pub fn raw_attention_score(trace: &ForwardTrace, span: Range<usize>) -> Result<Vec<f64>> {
    trace.validate()?;
    let indicator = influence_init(span, trace.seq_len())?;
    let last = trace.layers.last().expect("validated trace has layers");
    Ok(raw_attention_layer(last, &indicator))
}

// ---------------------------------------------------------------------------
// Maps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMap {
    pub variant: Variant,
    pub spans: Vec<Range<usize>>,
    /// `[(L+1) × s]`; row 0 is the span indicator.
    pub values: Matrix,
    /// Final layer, last position.
    pub summary: f64,
}

pub fn compute_map(trace: &ForwardTrace, span: Range<usize>, variant: Variant) -> Result<InfluenceMap> {
    compute_map_multi(trace, &[span], variant)
}

/// Map for the union of several disjoint spans.
pub fn compute_map_multi(trace: &ForwardTrace, spans: &[Range<usize>], variant: Variant) -> Result<InfluenceMap> {
    trace.validate()?;
    if spans.is_empty() {
        return Err(GuideError::EmptyInput("span list"));
    }
    let s = trace.seq_len();
    let init = influence_init_multi(spans, s)?;
    let mut values = Matrix::zeros(trace.n_layers() + 1, s);
    values.row_mut(0).copy_from_slice(&init);

    let mut prev = init.clone();
    for (l, layer) in trace.layers.iter().enumerate() {
        let next = match variant {
            Variant::InfluenceExact => influence_layer_step(&prev, layer)?,
            Variant::InfluenceSimplified => influence_layer_step_simplified(&prev, layer)?,
            Variant::Rollout => attention_rollout_step(&prev, layer)?,
            Variant::RawAttention => raw_attention_layer(layer, &init),
        };
        values.row_mut(l + 1).copy_from_slice(&next);
        prev = next;
    }
    let summary = values.get(trace.n_layers(), s - 1);
    Ok(InfluenceMap {
        variant,
        spans: spans.to_vec(),
        values,
        summary,
    })
}

#[derive(Serialize)]
struct MapExport {
    variant: Variant,
    span: [usize; 2],
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    extra_spans: Vec<[usize; 2]>,
    values: Vec<Vec<f64>>,
    summary: f64,
}

impl InfluenceMap {
    pub fn n_layers(&self) -> usize {
        self.values.rows() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.values.cols()
    }

    /// Last-position value at every layer `0..=L`.
    pub fn layer_summaries(&self) -> Vec<f64> {
        let last = self.seq_len() - 1;
        (0..self.values.rows()).map(|l| self.values.get(l, last)).collect()
    }

    /// `{variant, span: [i, j], values: [[..]; L+1], summary}`.
    pub fn to_json_value(&self) -> serde_json::Value {
        let pair = |r: &Range<usize>| [r.start, r.end];
        let export = MapExport {
            variant: self.variant,
            span: pair(&self.spans[0]),
            extra_spans: self.spans[1..].iter().map(pair).collect(),
            values: self.values.to_rows(),
            summary: self.summary,
        };
        serde_json::to_value(export).expect("map serialises")
    }

    /// `layer,position,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "position", "value"])?;
        for l in 0..self.values.rows() {
            for k in 0..self.values.cols() {
                w.write_record([l.to_string(), k.to_string(), self.values.get(l, k).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // oracles are literal index loops
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ---- independent oracles (literal ratio form, explicit loops) ----

    fn oracle_exact(prev: &[f64], a: &Matrix, e: &[f64], u: &[f64]) -> Vec<f64> {
        let s = prev.len();
        let mut out = vec![0.0; s];
        for k in 0..s {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..s {
                num += a.get(k, i) * e[i] * prev[i];
                den += a.get(k, i) * e[i];
            }
            let r = e[k] / u[k];
            out[k] = (prev[k] * r + num / den) / (1.0 + r);
        }
        out
    }

    fn oracle_simplified(prev: &[f64], a: &Matrix, e: &[f64], u: &[f64]) -> Vec<f64> {
        let s = prev.len();
        let mut out = vec![0.0; s];
        for k in 0..s {
            let r = e[k] / u[k];
            let mut mix = 0.0;
            for i in 0..s {
                mix += a.get(k, i) * prev[i];
            }
            out[k] = prev[k] * r / (1.0 + r) + mix / (1.0 + r);
        }
        out
    }

    fn random_layer(rng: &mut ChaCha8Rng, s: usize) -> LayerTrace {
        let mut a = Matrix::zeros(s, s);
        for k in 0..s {
            let raw: Vec<f64> = (0..=k).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            for (i, v) in raw.iter().enumerate() {
                a.set(k, i, v / z);
            }
        }
        let e = (0..s).map(|_| rng.random_range(0.1..50.0)).collect();
        let u = (0..s).map(|_| rng.random_range(0.1..50.0)).collect();
        LayerTrace::new(a, e, u).unwrap()
    }

    fn uniform_layer(s: usize, e: f64, u: f64) -> LayerTrace {
        let mut a = Matrix::zeros(s, s);
        for k in 0..s {
            for i in 0..=k {
                a.set(k, i, 1.0 / (k + 1) as f64);
            }
        }
        LayerTrace::new(a, vec![e; s], vec![u; s]).unwrap()
    }

    #[test]
    fn init_examples() {
        assert_eq!(influence_init(2..4, 5).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(influence_init(0..7, 7).unwrap(), vec![1.0; 7]);
        assert_eq!(influence_init(3..3, 4).unwrap(), vec![0.0; 4]);
        assert!(influence_init(2..6, 5).is_err());
        assert_eq!(
            influence_init_multi(&[0..1, 3..4], 4).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0]
        );
        assert!(influence_init_multi(&[0..2, 1..3], 4).is_err());
    }

    #[test]
    fn step_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = random_layer(&mut rng, 6);
        for step in [
            influence_layer_step,
            influence_layer_step_simplified,
            attention_rollout_step,
        ] {
            assert_eq!(step(&[1.0; 6], &layer).unwrap(), vec![1.0; 6]);
            assert_eq!(step(&[0.0; 6], &layer).unwrap(), vec![0.0; 6]);
        }
    }

    #[test]
    fn hand_set_micro_trace() {
        // s = 3, one layer, span {0}
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.25, 0.75, 0.0], vec![0.5, 0.2, 0.3]]).unwrap();
        let e = vec![2.0, 4.0, 1.0];
        let u = vec![1.0, 0.5, 2.0];
        let layer = LayerTrace::new(a, e, u).unwrap();
        let got = influence_layer_step(&[1.0, 0.0, 0.0], &layer).unwrap();
        // k=0: mix 1 → 1
        // k=1: mix = 0.25·2 / (0.25·2 + 0.75·4) = 0.5/3.5 = 1/7; value = 0.5·(1/7)/4.5
        // k=2: mix = 0.5·2 / (0.5·2 + 0.2·4 + 0.3·1) = 1/2.1; value = 2·(1/2.1)/3
        let expected = [1.0, 0.5 / 7.0 / 4.5, 2.0 / 2.1 / 3.0];
        for (g, x) in got.iter().zip(expected) {
            assert!((g - x).abs() < 1e-15, "{g} vs {x}");
        }
    }

    #[test]
    fn equal_norms_collapse_to_simplified() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = rng.random_range(1..9);
            let mut layer = random_layer(&mut rng, s);
            let c = rng.random_range(0.5..20.0);
            layer = LayerTrace::new(layer.attention, vec![c; s], layer.update_norms).unwrap();
            let prev: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..=1.0)).collect();
            let a = influence_layer_step(&prev, &layer).unwrap();
            let b = influence_layer_step_simplified(&prev, &layer).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_single_token_closed_forms() {
        let s = 8;
        let r = 100.0;
        let trace = ForwardTrace::from_layers(vec![uniform_layer(s, r, 1.0)]).unwrap();
        let inf = compute_map(&trace, 0..1, Variant::InfluenceSimplified).unwrap();
        let exact = compute_map(&trace, 0..1, Variant::InfluenceExact).unwrap();
        let roll = compute_map(&trace, 0..1, Variant::Rollout).unwrap();
        for k in 1..s {
            let kk = (k + 1) as f64;
            let want_inf = (1.0 / kk) * (1.0 / (1.0 + r));
            assert!((inf.values.get(1, k) - want_inf).abs() < 1e-15);
            assert!((exact.values.get(1, k) - want_inf).abs() < 1e-15);
            assert!((roll.values.get(1, k) - 0.5 / kk).abs() < 1e-15);
        }
        for k in 0..s {
            assert!(roll.values.get(1, k) >= inf.values.get(1, k));
        }
    }

    #[test]
    fn raw_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = vec![random_layer(&mut rng, 5), random_layer(&mut rng, 5)];
        let trace = ForwardTrace::from_layers(layers).unwrap();
        assert_eq!(raw_attention_score(&trace, 0..5).unwrap(), vec![1.0; 5]);
        assert_eq!(raw_attention_score(&trace, 2..2).unwrap(), vec![0.0; 5]);
        let got = raw_attention_score(&trace, 1..3).unwrap();
        let a = &trace.layers[1].attention;
        for k in 0..5 {
            let direct = a.get(k, 1) + a.get(k, 2);
            assert!((got[k] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_map_composes_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers = vec![random_layer(&mut rng, 4), random_layer(&mut rng, 4)];
        let trace = ForwardTrace::from_layers(layers).unwrap();
        let map = compute_map(&trace, 1..3, Variant::InfluenceExact).unwrap();
        let mut prev = vec![0.0, 1.0, 1.0, 0.0];
        for (l, layer) in trace.layers.iter().enumerate() {
            prev = oracle_exact(&prev, &layer.attention, &layer.residual_norms, &layer.update_norms);
            for k in 0..4 {
                assert!((map.values.get(l + 1, k) - prev[k]).abs() < 1e-12);
            }
        }
        assert_eq!(map.summary, map.values.get(2, 3));
        assert_eq!(map.layer_summaries().len(), 3);
    }

    #[test]
    fn summary_decays_with_context_under_uniform_attention() {
        for r in [0.5, 1.0, 10.0, 100.0] {
            let mut last = f64::INFINITY;
            for s in 2..40 {
                let trace = ForwardTrace::from_layers(vec![uniform_layer(s, r, 1.0); 3]).unwrap();
                let v = compute_map(&trace, 0..1, Variant::InfluenceSimplified).unwrap().summary;
                assert!(v <= last, "r={r} s={s}: {v} > {last}");
                last = v;
            }
        }
    }

    #[test]
    fn step_errors() {
        let layer = uniform_layer(3, 1.0, 1.0);
        assert!(influence_layer_step(&[0.0; 2], &layer).is_err());
        assert!(influence_layer_step(&[0.0, 1.5, 0.0], &layer).is_err());
        let mut bad = layer.clone();
        bad.update_norms[1] = 0.0;
        assert!(influence_layer_step(&[0.0; 3], &bad).is_err());
        bad.update_norms[1] = f64::NAN;
        assert!(influence_layer_step_simplified(&[0.0; 3], &bad).is_err());
    }

    #[test]
    fn exports() {
        let trace = ForwardTrace::from_layers(vec![uniform_layer(3, 2.0, 1.0)]).unwrap();
        let map = compute_map(&trace, 0..2, Variant::Rollout).unwrap();
        let json = map.to_json_value();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["variant", "span", "values", "summary"]);
        assert_eq!(json["variant"], "rollout");
        assert_eq!(json["span"], serde_json::json!([0, 2]));
        assert_eq!(json["values"].as_array().unwrap().len(), 2);

        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("layer,position,value"));
        assert_eq!(lines.next(), Some("0,0,1"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }

    proptest! {
        #[test]
        fn steps_match_naive_oracles(seed in any::<u64>(), s in 1usize..=6, l in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layers: Vec<LayerTrace> = (0..l).map(|_| random_layer(&mut rng, s)).collect();
            let trace = ForwardTrace::from_layers(layers).unwrap();
            let start = rng.random_range(0..s);
            let end = rng.random_range(start..=s);
            let exact = compute_map(&trace, start..end, Variant::InfluenceExact).unwrap();
            let simp = compute_map(&trace, start..end, Variant::InfluenceSimplified).unwrap();
            let mut pe = influence_init(start..end, s).unwrap();
            let mut ps = pe.clone();
            for (li, layer) in trace.layers.iter().enumerate() {
                pe = oracle_exact(&pe, &layer.attention, &layer.residual_norms, &layer.update_norms);
                ps = oracle_simplified(&ps, &layer.attention, &layer.residual_norms, &layer.update_norms);
                for k in 0..s {
                    prop_assert!((exact.values.get(li + 1, k) - pe[k]).abs() < 1e-10);
                    prop_assert!((simp.values.get(li + 1, k) - ps[k]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn all_values_in_unit_interval(seed in any::<u64>(), s in 1usize..=12, l in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layers: Vec<LayerTrace> = (0..l).map(|_| random_layer(&mut rng, s)).collect();
            let trace = ForwardTrace::from_layers(layers).unwrap();
            let start = rng.random_range(0..s);
            let end = rng.random_range(start..=s);
            for v in Variant::ALL {
                let map = compute_map(&trace, start..end, v).unwrap();
                prop_assert!(map.values.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
                let init = influence_init(start..end, s).unwrap();
                prop_assert_eq!(map.values.row(0), init.as_slice());
            }
        }
    }
}
