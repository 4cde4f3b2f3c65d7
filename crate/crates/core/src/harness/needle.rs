// SPDX-License-Identifier: MIT OR Apache-2.0

//! Haystack construction: filler text, needle insertion and prompt assembly.

use std::ops::Range;
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::templates;
use crate::error::{GuideError, Result};

const FILLER_WORDS: &[&str] = &[
    "the",
    "a",
    "river",
    "city",
    "morning",
    "garden",
    "old",
    "quiet",
    "market",
    "window",
    "letter",
    "road",
    "village",
    "teacher",
    "sailor",
    "bright",
    "slowly",
    "walked",
    "found",
    "opened",
    "under",
    "across",
    "behind",
    "little",
    "green",
    "stone",
    "bridge",
    "evening",
    "story",
    "people",
    "small",
    "house",
    "winter",
    "summer",
    "light",
    "kept",
    "carried",
    "near",
    "field",
    "mountain",
    "painted",
    "quickly",
    "every",
    "door",
    "bread",
    "music",
    "table",
    "north",
    "harbour",
    "forest",
    "waited",
    "remembered",
    "soft",
    "long",
    "warm",
];

/// Deterministic English-like filler of at least `min_len` bytes.
///
/// Sentences are 5 to 12 lowercase words, capitalised and closed by a period,
/// separated by single spaces. The output is ASCII.
pub fn synthetic_filler(seed: u64, min_len: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_len + 96);
    while out.len() < min_len {
        if !out.is_empty() {
            out.push(' ');
        }
        let n = rng.random_range(5..=12);
        for i in 0..n {
            let word = FILLER_WORDS.choose(&mut rng).expect("word list is non-empty");
            if i == 0 {
                let mut chars = word.chars();
                let first = chars.next().expect("words are non-empty");
                out.push(first.to_ascii_uppercase());
                out.push_str(chars.as_str());
            } else {
                out.push(' ');
                out.push_str(word);
            }
        }
        out.push('.');
    }
    out
}

/// Source of haystack text.
#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    /// [`synthetic_filler`] seeded per run.
    Synthetic,
    /// User-supplied text, repeated (newline-separated) when too short.
    Text(String),
}

impl Corpus {
    /// Concatenate text files, newline-separated.
    pub fn from_files(paths: &[PathBuf]) -> Result<Self> {
        if paths.is_empty() {
            return Err(GuideError::MissingCorpus("no corpus files given".into()));
        }
        let mut parts = Vec::with_capacity(paths.len());
        for p in paths {
            let text =
                std::fs::read_to_string(p).map_err(|e| GuideError::MissingCorpus(format!("{}: {e}", p.display())))?;
            parts.push(text);
        }
        Self::from_text(parts.join("\n"))
    }

    pub fn from_text(text: String) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(GuideError::MissingCorpus("corpus is empty".into()));
        }
        if !text.contains('.') {
            return Err(GuideError::MissingCorpus("corpus has no period to insert after".into()));
        }
        Ok(Self::Text(text))
    }

    /// At least `min_len` bytes of filler (more when a repeat overshoots).
    pub fn text(&self, seed: u64, min_len: usize) -> String {
        match self {
            Self::Synthetic => synthetic_filler(seed, min_len),
            Self::Text(t) => {
                let mut out = t.clone();
                while out.len() < min_len {
                    out.push('\n');
                    out.push_str(t);
                }
                out
            }
        }
    }
}

/// Byte offset just after the period chosen for quantile `q`.
///
/// Picks the last period whose following offset is at or before `q·len`;
/// when every period lies later, the first one.
pub fn insertion_point(haystack: &str, quantile: f64) -> Result<usize> {
    let target = quantile * haystack.len() as f64;
    let mut best = None;
    let mut first = None;
    for (i, _) in haystack.match_indices('.') {
        let p = i + 1;
        first.get_or_insert(p);
        if p as f64 <= target {
            best = Some(p);
        } else {
            break;
        }
    }
    best.or(first)
        .ok_or_else(|| GuideError::MissingCorpus("haystack has no period to insert after".into()))
}

/// Insert `" " + needle` after the period chosen for `quantile`.
///
/// Returns the new text and the needle's byte range.
pub fn insert_needle(haystack: &str, needle: &str, quantile: f64) -> Result<(String, Range<usize>)> {
    let p = insertion_point(haystack, quantile)?;
    let mut out = String::with_capacity(haystack.len() + needle.len() + 1);
    out.push_str(&haystack[..p]);
    out.push(' ');
    out.push_str(needle);
    out.push_str(&haystack[p..]);
    Ok((out, p + 1..p + 1 + needle.len()))
}

/// Largest char boundary of `s` not above `max`.
fn floor_boundary(s: &str, max: usize) -> usize {
    if max >= s.len() {
        return s.len();
    }
    (0..=max).rev().find(|&i| s.is_char_boundary(i)).unwrap_or(0)
}

/// A needle-in-a-haystack prompt with the needle's byte (= token) range.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedlePrompt {
    pub text: String,
    pub needle_span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleLayout<'a> {
    pub needle: &'a str,
    pub question: &'a str,
    /// Wrap the haystack in the bundled question template instead of the
    /// compact `haystack + "\n\n" + question` layout.
    pub use_template: bool,
}

/// Build a prompt of at most `context_length` bytes with the needle inserted
/// at `quantile` of the haystack.
pub fn build_needle_prompt(
    corpus: &Corpus,
    seed: u64,
    layout: &NeedleLayout<'_>,
    context_length: usize,
    quantile: f64,
) -> Result<NeedlePrompt> {
    if layout.needle.is_empty() {
        return Err(GuideError::EmptyInput("needle"));
    }
    let (prefix, suffix) = if layout.use_template {
        templates::split_at_slot(templates::NEEDLE_HAYSTACK, "context", &[("question", layout.question)])
            .expect("bundled template has a context slot")
    } else {
        (String::new(), format!("\n\n{}", layout.question))
    };
    let needed = prefix.len() + suffix.len() + layout.needle.len() + 1;
    if needed >= context_length {
        return Err(GuideError::NeedleTooLong {
            needed: needed + 1,
            context: context_length,
        });
    }
    let budget = context_length - needed;
    let filler = corpus.text(seed, budget);
    // Whole sentences only: cut after the last period that fits.
    let fitting = &filler[..floor_boundary(&filler, budget)];
    let end = fitting.rfind('.').map(|i| i + 1).ok_or(GuideError::NeedleTooLong {
        needed: needed + filler.find('.').map_or(filler.len(), |i| i + 1),
        context: context_length,
    })?;
    let haystack = &fitting[..end];
    let (body, span) = insert_needle(haystack, layout.needle, quantile)?;
    let text = format!("{prefix}{body}{suffix}");
    debug_assert!(text.len() <= context_length);
    Ok(NeedlePrompt {
        text,
        needle_span: span.start + prefix.len()..span.end + prefix.len(),
    })
}
