// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale evaluation harness.
//!
//! With randomly initialised weights answer accuracy is meaningless, so the
//! needle sweep records span-importance metrics (Influence, Rollout, raw
//! attention) for the needle instead of scoring generated answers.

mod needle;
mod report;
pub mod templates;

use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use needle::{
    build_needle_prompt, insert_needle, insertion_point, synthetic_filler, Corpus, NeedleLayout, NeedlePrompt,
};
pub use report::{
    json_key_jaccard, json_object_keys, read_samples_csv, run_auc_report, AucReport, AucRow, SampleGroups,
};

use crate::calibration::{calibrate_delta_with, CalibrationOptions, TextTransform};
use crate::error::{GuideError, Result};
use crate::influence::{compute_map, compute_map_multi, Variant};
use crate::model::{forward_traced, init_model, BiasSpec, ModelConfig, TraceOptions, Weights};
use crate::tags::{parse_tags, tokenize};

pub const DEFAULT_NEEDLE: &str = "The secret code for the archive is 4721.";
pub const DEFAULT_QUESTION: &str = "What is the secret code for the archive?";

/// Metric recording the first-layer exact influence at the last position.
pub const LAYER1_METRIC: &str = "influence_exact_layer1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentTask {
    NeedleSweep,
    DeltaSweep,
    CalibrationReport,
    AucReport,
}

fn default_needle() -> String {
    DEFAULT_NEEDLE.to_string()
}

fn default_question() -> String {
    DEFAULT_QUESTION.to_string()
}

fn default_transforms() -> Vec<TextTransform> {
    vec![TextTransform::Uppercase]
}

/// A grid experiment, usually loaded from JSON.
///
/// Each seed initialises its own model (`model.init_seed` is replaced) and,
/// for the synthetic corpus, its own filler text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: ExperimentTask,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub context_lengths: Vec<usize>,
    #[serde(default)]
    pub quantiles: Vec<f64>,
    #[serde(default)]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_needle")]
    pub needle: String,
    #[serde(default = "default_question")]
    pub question: String,
    /// Text files used as haystack; the synthetic generator when empty.
    #[serde(default)]
    pub corpus: Vec<PathBuf>,
    #[serde(default)]
    pub use_template: bool,
    /// Tagged prompt for Δ sweeps and calibration reports.
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default = "default_transforms")]
    pub transforms: Vec<TextTransform>,
    /// `metric,score,label` files for AUC reports.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
}

impl ExperimentSpec {
    /// A needle sweep over the given grid with default needle and question.
    pub fn needle_sweep(
        model: ModelConfig,
        context_lengths: Vec<usize>,
        quantiles: Vec<f64>,
        deltas: Vec<f64>,
        seeds: Vec<u64>,
    ) -> Self {
        Self {
            task: ExperimentTask::NeedleSweep,
            model,
            context_lengths,
            quantiles,
            deltas,
            seeds,
            needle: default_needle(),
            question: default_question(),
            corpus: Vec::new(),
            use_template: false,
            prompt: None,
            transforms: default_transforms(),
            inputs: Vec::new(),
        }
    }

    /// The quantile grid 0.1, 0.2, ..., 1.0.
    pub fn decile_quantiles() -> Vec<f64> {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GuideError::InvalidExperiment(m.to_string()));
        self.model.validate()?;
        let need_seeds = !matches!(self.task, ExperimentTask::AucReport);
        if need_seeds && self.seeds.is_empty() {
            return bad("seed grid is empty");
        }
        if self.deltas.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return bad("deltas must be finite and non-negative");
        }
        match self.task {
            ExperimentTask::NeedleSweep => {
                if self.context_lengths.is_empty() || self.quantiles.is_empty() || self.deltas.is_empty() {
                    return bad("needle sweep needs context lengths, quantiles and deltas");
                }
                if let Some(&c) = self.context_lengths.iter().find(|&&c| c > self.model.max_seq) {
                    return bad(&format!("context length {c} exceeds max_seq {}", self.model.max_seq));
                }
                if self.quantiles.iter().any(|q| !(q.is_finite() && *q > 0.0 && *q <= 1.0)) {
                    return bad("quantiles must lie in (0, 1]");
                }
            }
            ExperimentTask::DeltaSweep => {
                if self.deltas.is_empty() {
                    return bad("delta sweep needs deltas");
                }
                if self.prompt.is_none() {
                    return bad("delta sweep needs a prompt");
                }
            }
            ExperimentTask::CalibrationReport => {
                if self.prompt.is_none() {
                    return bad("calibration report needs a prompt");
                }
                if self.transforms.is_empty() {
                    return bad("calibration report needs transforms");
                }
            }
            ExperimentTask::AucReport => {
                if self.inputs.is_empty() {
                    return bad("auc report needs input files");
                }
            }
        }
        Ok(())
    }

    fn weights_per_seed(&self) -> Result<Vec<Weights>> {
        self.seeds
            .par_iter()
            .map(|&seed| init_model(&self.model.clone().with_seed(seed)))
            .collect()
    }
}

/// One measurement of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub context_length: usize,
    pub position_quantile: Option<f64>,
    pub delta: Option<f64>,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, row: ResultRow) -> Result<()> {
        if !row.value.is_finite() {
            return Err(GuideError::NonFinite { what: "result value" });
        }
        self.rows.push(row);
        Ok(())
    }

    /// Rows with the given metric name.
    pub fn metric<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.metric == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ExperimentOutput {
    Table(ResultTable),
    Auc(AucReport),
}

impl ExperimentOutput {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        match self {
            Self::Table(t) => t.write_csv(out),
            Self::Auc(r) => r.write_csv(out),
        }
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    match spec.task {
        ExperimentTask::NeedleSweep => {
            let corpus = if spec.corpus.is_empty() {
                Corpus::Synthetic
            } else {
                Corpus::from_files(&spec.corpus)?
            };
            run_needle_sweep(spec, &corpus).map(ExperimentOutput::Table)
        }
        ExperimentTask::DeltaSweep => run_delta_sweep(spec).map(ExperimentOutput::Table),
        ExperimentTask::CalibrationReport => run_calibration_report(spec).map(ExperimentOutput::Table),
        ExperimentTask::AucReport => {
            spec.validate()?;
            let mut groups = SampleGroups::new();
            for path in &spec.inputs {
                read_samples_csv(std::fs::File::open(path)?, &mut groups)?;
            }
            run_auc_report(&groups).map(ExperimentOutput::Auc)
        }
    }
}

/// Needle sweep over seeds × context lengths × quantiles × deltas.
///
/// The needle is biased by the cell's Δ and is also the measured span. Each
/// cell yields one row per [`Variant`] summary plus [`LAYER1_METRIC`]. Cells
/// run in parallel; rows come out in grid order.
pub fn run_needle_sweep(spec: &ExperimentSpec, corpus: &Corpus) -> Result<ResultTable> {
    spec.validate()?;
    let weights = spec.weights_per_seed()?;
    let layout = NeedleLayout {
        needle: &spec.needle,
        question: &spec.question,
        use_template: spec.use_template,
    };

    let mut prompts = Vec::new();
    for (si, &seed) in spec.seeds.iter().enumerate() {
        for &c in &spec.context_lengths {
            for &q in &spec.quantiles {
                prompts.push((si, seed, c, q, build_needle_prompt(corpus, seed, &layout, c, q)?));
            }
        }
    }
    let cells: Vec<_> = prompts
        .iter()
        .flat_map(|p| spec.deltas.iter().map(move |&d| (p, d)))
        .collect();

    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(&(si, seed, c, q, ref prompt), delta)| {
            let tokens = tokenize(&prompt.text);
            let bias = BiasSpec::single(prompt.needle_span.clone(), delta);
            let (_, trace) = forward_traced(&weights[si], &tokens, &bias, &TraceOptions::default())?;
            let row = |metric: &str, value: f64| ResultRow {
                context_length: c,
                position_quantile: Some(q),
                delta: Some(delta),
                seed,
                metric: metric.to_string(),
                value,
            };
            let mut rows = Vec::with_capacity(Variant::ALL.len() + 1);
            for variant in Variant::ALL {
                let map = compute_map(&trace, prompt.needle_span.clone(), variant)?;
                if variant == Variant::InfluenceExact {
                    rows.push(row(LAYER1_METRIC, map.layer_summaries()[1]));
                }
                rows.push(row(variant.name(), map.summary));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut table = ResultTable::default();
    for row in per_cell.into_iter().flatten() {
        table.push(row)?;
    }
    Ok(table)
}

/// Per-layer log influence of the prompt's query span as Δ varies.
///
/// Δ is applied to every emphasis span, or to the query span itself when the
/// prompt has no emphasis. Without a query span the emphasis spans are
/// measured. Rows carry metric `log_influence_layer{ℓ}` for ℓ = 1..L plus the
/// summary of each variant.
pub fn run_delta_sweep(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let prompt = parse_tags(spec.prompt.as_deref().expect("validated"))?;
    let emphasis: Vec<_> = prompt.emphasis_spans.iter().map(|s| s.token_range.clone()).collect();
    let measured = match prompt.query_spans.as_slice() {
        [] if !emphasis.is_empty() => emphasis.clone(),
        [] => return Err(GuideError::QuerySpanCount(0)),
        [only] => vec![only.token_range.clone()],
        many => return Err(GuideError::QuerySpanCount(many.len())),
    };
    let targets = if emphasis.is_empty() {
        measured.clone()
    } else {
        emphasis
    };
    let tokens = prompt.tokens();
    let weights = spec.weights_per_seed()?;

    let cells: Vec<_> = spec
        .seeds
        .iter()
        .enumerate()
        .flat_map(|(si, &seed)| spec.deltas.iter().map(move |&d| (si, seed, d)))
        .collect();
    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(si, seed, delta)| {
            let mut bias = BiasSpec::none();
            for t in &targets {
                bias.push(t.clone(), delta);
            }
            let (_, trace) = forward_traced(&weights[si], &tokens, &bias, &TraceOptions::default())?;
            let row = |metric: String, value: f64| ResultRow {
                context_length: tokens.len(),
                position_quantile: None,
                delta: Some(delta),
                seed,
                metric,
                value,
            };
            let mut rows = Vec::new();
            for variant in Variant::ALL {
                let map = compute_map_multi(&trace, &measured, variant)?;
                if variant == Variant::InfluenceExact {
                    for (l, v) in map.layer_summaries().iter().enumerate().skip(1) {
                        if *v <= 0.0 {
                            return Err(GuideError::ZeroInfluence);
                        }
                        rows.push(row(format!("log_influence_layer{l}"), v.ln()));
                    }
                }
                rows.push(row(variant.name().to_string(), map.summary));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut table = ResultTable::default();
    for row in per_cell.into_iter().flatten() {
        table.push(row)?;
    }
    Ok(table)
}

/// Calibrated Δ per seed and transform for the prompt's query span.
pub fn run_calibration_report(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let prompt = parse_tags(spec.prompt.as_deref().expect("validated"))?;
    let weights = spec.weights_per_seed()?;
    let cells: Vec<_> = spec
        .seeds
        .iter()
        .enumerate()
        .flat_map(|(si, &seed)| spec.transforms.iter().map(move |&t| (si, seed, t)))
        .collect();
    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(si, seed, transform)| {
            let options = CalibrationOptions {
                transform,
                ..CalibrationOptions::default()
            };
            let result = calibrate_delta_with(&weights[si], &prompt, &options)?;
            let row = |metric: String, value: f64| ResultRow {
                context_length: prompt.clean_text.len(),
                position_quantile: None,
                delta: None,
                seed,
                metric,
                value,
            };
            Ok(vec![
                row(format!("calibrated_delta_{transform}"), result.delta),
                row(format!("raw_difference_{transform}"), result.raw_difference),
                row("log_influence_base".to_string(), result.log_influence_base),
                row(format!("log_influence_{transform}"), result.log_influence_transformed),
            ])
        })
        .collect::<Result<_>>()?;

    let mut table = ResultTable::default();
    for row in per_cell.into_iter().flatten() {
        table.push(row)?;
    }
    Ok(table)
}
