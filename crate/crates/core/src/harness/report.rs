// SPDX-License-Identifier: MIT OR Apache-2.0

//! Score/label reports and JSON key scoring.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{GuideError, Result};
use crate::math::{jaccard_keys, label_correlation, roc_auc, StatSample};

/// Samples keyed by metric name, in name order.
pub type SampleGroups = BTreeMap<String, Vec<StatSample>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub metric: String,
    pub n: usize,
    pub positives: usize,
    pub roc_auc: f64,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AucReport {
    pub rows: Vec<AucRow>,
}

/// One row per metric with ROC AUC and score/label correlation.
pub fn run_auc_report(groups: &SampleGroups) -> Result<AucReport> {
    if groups.is_empty() {
        return Err(GuideError::EmptyInput("sample groups"));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (metric, samples) in groups {
        rows.push(AucRow {
            metric: metric.clone(),
            n: samples.len(),
            positives: samples.iter().filter(|s| s.label).count(),
            roc_auc: roc_auc(samples)?,
            correlation: label_correlation(samples)?,
        });
    }
    Ok(AucReport { rows })
}

impl AucReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct SampleRecord {
    metric: String,
    score: f64,
    label: String,
}

fn parse_label(raw: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(GuideError::UnknownName {
            kind: "label",
            value: other.to_string(),
        }),
    }
}

/// Read `metric,score,label` rows (label `0/1` or `true/false`) and merge
/// them into `groups`.
pub fn read_samples_csv<R: Read>(input: R, groups: &mut SampleGroups) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    for record in reader.deserialize() {
        let record: SampleRecord = record?;
        if !record.score.is_finite() {
            return Err(GuideError::NonFinite { what: "sample score" });
        }
        let label = parse_label(&record.label)?;
        groups
            .entry(record.metric)
            .or_default()
            .push(StatSample::new(record.score, label));
    }
    Ok(())
}

/// Top-level keys of the first JSON object found in `text`.
///
/// Accepts either a bare object or one embedded in surrounding prose (from
/// the first `{` to the last `}`). Returns `None` when no object parses.
pub fn json_object_keys(text: &str) -> Option<HashSet<String>> {
    let parse = |s: &str| match serde_json::from_str::<serde_json::Value>(s) {
        Ok(serde_json::Value::Object(map)) => Some(map.keys().cloned().collect()),
        _ => None,
    };
    parse(text.trim()).or_else(|| {
        let start = text.find('{')?;
        let end = text.rfind('}')?;
        (start < end).then(|| parse(&text[start..=end])).flatten()
    })
}

/// Jaccard index between the keys of a generated JSON object and a schema.
///
/// A generation without a parseable object scores as having no keys.
pub fn json_key_jaccard(generated: &str, schema: &str) -> Result<f64> {
    let schema_keys =
        json_object_keys(schema).ok_or_else(|| GuideError::InvalidExperiment("schema is not a JSON object".into()))?;
    let generated_keys = json_object_keys(generated).unwrap_or_default();
    Ok(jaccard_keys(&generated_keys, &schema_keys))
}
