// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bundled prompt templates.
//!
//! Placeholders are written `{name}` and replaced verbatim by [`fill`]; any
//! other braces (such as the JSON schema body) are left alone.

/// French summarisation instruction followed by `{context}`.
pub const SUMMARIZATION_FRENCH: &str = include_str!("../../fixtures/templates/summarization_french.txt");

/// Question wrapper around `{context}`, repeating `{question}` before and after.
pub const NEEDLE_HAYSTACK: &str = include_str!("../../fixtures/templates/needle_haystack.txt");

/// JSON extraction prompt with an inline schema and a `{content}` slot.
pub const JSON_GENERATION: &str = include_str!("../../fixtures/templates/json_generation.txt");

/// Keys expected by [`JSON_GENERATION`], as a JSON object.
pub const JSON_SCHEMA_KEYS: &str = include_str!("../../fixtures/templates/json_schema_keys.json");

/// Look up a bundled template by name.
pub fn by_name(name: &str) -> Option<&'static str> {
    match name {
        "summarization_french" => Some(SUMMARIZATION_FRENCH),
        "needle_haystack" => Some(NEEDLE_HAYSTACK),
        "json_generation" => Some(JSON_GENERATION),
        _ => None,
    }
}

pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Split a template around `{slot}` after filling the other placeholders.
///
/// Returns `None` when the slot is absent.
pub fn split_at_slot(template: &str, slot: &str, values: &[(&str, &str)]) -> Option<(String, String)> {
    let marker = format!("{{{slot}}}");
    let (before, after) = template.split_once(&marker)?;
    Some((fill(before, values), fill(after, values)))
}
