// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer and the emphasis/query tag grammar.
//!
//! Markup recognised in raw prompts:
//!
//! | open       | close      | meaning              |
//! |------------|------------|----------------------|
//! | `<!->`     | `<-!>`     | emphasis, level 1    |
//! | `<!!->`    | `<-!!>`    | emphasis, level 2    |
//! | `<!!!->`   | `<-!!!>`   | emphasis, level 3    |
//! | `<?->`     | `<-?>`     | influence query span |
//!
//! Markers are stripped from the text the model sees; each enclosed region
//! becomes a span over the cleaned text. Tags do not nest and spans may not
//! be empty.
//!
//! With a byte tokenizer, token index == byte offset into the cleaned text,
//! so token ranges and byte ranges coincide.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{GuideError, Result};
use crate::model::BiasSpec;

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Number of byte tokens.
pub const BYTE_VOCAB: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const SEP: u32 = 259;
/// Byte tokens plus the four specials.
pub const VOCAB_SIZE: usize = BYTE_VOCAB + 4;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Byte payload of `tokens`; special tokens are dropped.
pub fn detokenize_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

/// Lossy UTF-8 decode of [`detokenize_bytes`]. Exact for tokens produced by
/// [`tokenize`].
pub fn detokenize(tokens: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(tokens)).into_owned()
}

// ---------------------------------------------------------------------------
// Delta configuration
// ---------------------------------------------------------------------------

/// Bias assigned to each emphasis level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaConfig {
    pub level1: f64,
    pub level2: f64,
    pub level3: f64,
}

/// Deltas above this tend to derail generation; allowed, but logged.
pub const DELTA_WARN_THRESHOLD: f64 = 5.0;

impl Default for DeltaConfig {
    fn default() -> Self {
        Self {
            level1: 1.0,
            level2: 2.0,
            level3: 3.0,
        }
    }
}

impl DeltaConfig {
    pub fn get(&self, level: u8) -> Result<f64> {
        let delta = match level {
            1 => self.level1,
            2 => self.level2,
            3 => self.level3,
            other => return Err(GuideError::UnknownLevel(other)),
        };
        check_delta(delta)?;
        Ok(delta)
    }

    pub fn set(&mut self, level: u8, delta: f64) -> Result<()> {
        check_delta(delta)?;
        match level {
            1 => self.level1 = delta,
            2 => self.level2 = delta,
            3 => self.level3 = delta,
            other => return Err(GuideError::UnknownLevel(other)),
        }
        Ok(())
    }

    /// Apply an override of the form `level=value`, e.g. `2=2.5`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let bad = || GuideError::UnknownName {
            kind: "delta override",
            value: spec.to_string(),
        };
        let (level, value) = spec.split_once('=').ok_or_else(bad)?;
        let level: u8 = level.trim().parse().map_err(|_| bad())?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        self.set(level, value)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(GuideError::InvalidDelta(delta));
    }
    if delta > DELTA_WARN_THRESHOLD {
        log::warn!("delta {delta} exceeds {DELTA_WARN_THRESHOLD}; outputs may degrade");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tagged prompts
// ---------------------------------------------------------------------------

/// A region of the cleaned text marked for emphasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmphasisSpan {
    pub token_range: Range<usize>,
    /// Unicode scalar offsets into the cleaned text.
    pub char_range: Range<usize>,
    pub level: u8,
    pub delta: f64,
}

/// A region of the cleaned text whose influence should be measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpan {
    pub token_range: Range<usize>,
    pub char_range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedPrompt {
    pub raw_text: String,
    pub clean_text: String,
    pub emphasis_spans: Vec<EmphasisSpan>,
    pub query_spans: Vec<QuerySpan>,
}

impl TaggedPrompt {
    /// Untagged prompt.
    pub fn plain(text: &str) -> Self {
        Self {
            raw_text: text.to_string(),
            clean_text: text.to_string(),
            emphasis_spans: Vec::new(),
            query_spans: Vec::new(),
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        tokenize(&self.clean_text)
    }

    /// Bias covering every emphasis span at its resolved delta.
    pub fn bias_spec(&self) -> BiasSpec {
        let mut spec = BiasSpec::none();
        for span in &self.emphasis_spans {
            spec.push(span.token_range.clone(), span.delta);
        }
        spec
    }

    /// Re-resolve every emphasis delta against `config`.
    pub fn with_delta_config(mut self, config: &DeltaConfig) -> Result<Self> {
        for span in &mut self.emphasis_spans {
            span.delta = resolve_delta(span, config)?;
        }
        Ok(self)
    }

    /// The single query span, or an error if there are zero or several.
    pub fn single_query(&self) -> Result<Range<usize>> {
        match self.query_spans.as_slice() {
            [only] => Ok(only.token_range.clone()),
            other => Err(GuideError::QuerySpanCount(other.len())),
        }
    }
}

pub fn resolve_delta(span: &EmphasisSpan, config: &DeltaConfig) -> Result<f64> {
    config.get(span.level)
}

#[derive(Debug, Clone, Default)]
pub struct TagOptions {
    pub deltas: DeltaConfig,
    /// Leave markers in the cleaned text (ablation). Spans still cover only
    /// the enclosed bytes.
    pub keep_markers: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagKind {
    Emphasis(u8),
    Query,
}

impl TagKind {
    fn describe(self) -> String {
        match self {
            TagKind::Emphasis(l) => format!("emphasis level {l}"),
            TagKind::Query => "query".to_string(),
        }
    }
}

// Longest markers first so `<!!->` is not read as `<!` + junk.
const MARKERS: &[(&str, TagKind, bool)] = &[
    ("<!!!->", TagKind::Emphasis(3), true),
    ("<-!!!>", TagKind::Emphasis(3), false),
    ("<!!->", TagKind::Emphasis(2), true),
    ("<-!!>", TagKind::Emphasis(2), false),
    ("<!->", TagKind::Emphasis(1), true),
    ("<-!>", TagKind::Emphasis(1), false),
    ("<?->", TagKind::Query, true),
    ("<-?>", TagKind::Query, false),
];

pub fn parse_tags(raw: &str) -> Result<TaggedPrompt> {
    parse_tags_with(raw, &TagOptions::default())
}

pub fn parse_tags_with(raw: &str, options: &TagOptions) -> Result<TaggedPrompt> {
    let bytes = raw.as_bytes();
    let mut clean = String::with_capacity(raw.len());
    let mut emphasis_spans = Vec::new();
    let mut query_spans = Vec::new();
    // (kind, raw offset of the opening marker, clean byte offset of content)
    let mut open: Option<(TagKind, usize, usize)> = None;

    let mut pos = 0;
    let mut copied_from = 0;
    while pos < bytes.len() {
        let hit = (bytes[pos] == b'<')
            .then(|| MARKERS.iter().find(|(m, _, _)| bytes[pos..].starts_with(m.as_bytes())))
            .flatten();
        let Some(&(marker, kind, is_open)) = hit else {
            pos += 1;
            continue;
        };
        // Markers are ASCII, so `pos` is a char boundary.
        clean.push_str(&raw[copied_from..pos]);
        let marker_start = clean.len();
        if options.keep_markers {
            clean.push_str(marker);
        }

        match (is_open, open) {
            (true, None) => open = Some((kind, pos, clean.len())),
            (true, Some((outer, _, _))) => {
                return Err(GuideError::TagParse {
                    offset: pos,
                    message: format!("nested {} tag inside {} tag", kind.describe(), outer.describe()),
                });
            }
            (false, None) => {
                return Err(GuideError::TagParse {
                    offset: pos,
                    message: format!("closing {} tag without opening tag", kind.describe()),
                });
            }
            (false, Some((open_kind, open_at, start))) => {
                if open_kind != kind {
                    return Err(GuideError::TagParse {
                        offset: pos,
                        message: format!(
                            "closing {} tag does not match {} tag opened at byte {open_at}",
                            kind.describe(),
                            open_kind.describe()
                        ),
                    });
                }
                let end = marker_start;
                if end == start {
                    return Err(GuideError::TagParse {
                        offset: open_at,
                        message: "empty tagged span".to_string(),
                    });
                }
                let char_range = char_offset(&clean, start)..char_offset(&clean, end);
                match kind {
                    TagKind::Emphasis(level) => emphasis_spans.push(EmphasisSpan {
                        token_range: start..end,
                        char_range,
                        level,
                        delta: options.deltas.get(level)?,
                    }),
                    TagKind::Query => query_spans.push(QuerySpan {
                        token_range: start..end,
                        char_range,
                    }),
                }
                open = None;
            }
        }
        pos += marker.len();
        copied_from = pos;
    }
    if let Some((kind, open_at, _)) = open {
        return Err(GuideError::TagParse {
            offset: open_at,
            message: format!("unclosed {} tag", kind.describe()),
        });
    }
    clean.push_str(&raw[copied_from..]);

    Ok(TaggedPrompt {
        raw_text: raw.to_string(),
        clean_text: clean,
        emphasis_spans,
        query_spans,
    })
}

fn char_offset(s: &str, byte: usize) -> usize {
    s[..byte].chars().count()
}

/// Raw text with every recognised marker removed, without validating
/// structure.
pub fn strip_markers(raw: &str) -> String {
    let mut out = raw.to_string();
    for (m, _, _) in MARKERS {
        out = out.replace(m, "");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&tokenize("héllo ✓")), "héllo ✓");
        assert_eq!(detokenize(&[BOS, 104, 105, EOS]), "hi");
    }

    #[test]
    fn emphasis_level_one() {
        let p = parse_tags("Summarize <!->in French<-!> the text").unwrap();
        assert_eq!(p.clean_text, "Summarize in French the text");
        assert_eq!(p.emphasis_spans.len(), 1);
        let span = &p.emphasis_spans[0];
        assert_eq!(span.level, 1);
        assert_eq!(span.delta, 1.0);
        assert_eq!(&p.clean_text[span.token_range.clone()], "in French");
        assert!(p.query_spans.is_empty());
    }

    #[test]
    fn untagged_is_identity() {
        let p = parse_tags("no tags here").unwrap();
        assert_eq!(p.clean_text, "no tags here");
        assert!(p.emphasis_spans.is_empty() && p.query_spans.is_empty());
    }

    #[test]
    fn query_span() {
        let p = parse_tags("<?->needle<-?> rest").unwrap();
        assert_eq!(p.clean_text, "needle rest");
        assert_eq!(p.query_spans.len(), 1);
        assert_eq!(p.query_spans[0].token_range, 0..6);
        assert_eq!(p.single_query().unwrap(), 0..6);
    }

    #[test]
    fn all_levels() {
        let p = parse_tags("<!->a<-!> <!!->bb<-!!> <!!!->ccc<-!!!>").unwrap();
        assert_eq!(p.clean_text, "a bb ccc");
        let levels: Vec<(u8, f64)> = p.emphasis_spans.iter().map(|s| (s.level, s.delta)).collect();
        assert_eq!(levels, vec![(1, 1.0), (2, 2.0), (3, 3.0)]);
        assert_eq!(p.emphasis_spans[2].token_range, 5..8);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let err = |s: &str| match parse_tags(s) {
            Err(GuideError::TagParse { offset, .. }) => offset,
            other => panic!("expected parse error for {s:?}, got {other:?}"),
        };
        assert_eq!(err("<!->oops"), 0);
        assert_eq!(err("ab<!->x<-!!>"), 7);
        assert_eq!(err("<!->a<?->b<-?><-!>"), 5);
        assert_eq!(err("x<-?>"), 1);
        assert_eq!(err("x<!-><-!>"), 1);
    }

    #[test]
    fn char_and_token_coordinates_differ_for_multibyte() {
        let p = parse_tags("é<!->ü<-!>").unwrap();
        let s = &p.emphasis_spans[0];
        assert_eq!(s.token_range, 2..4);
        assert_eq!(s.char_range, 1..2);
    }

    #[test]
    fn keep_markers_option() {
        let opts = TagOptions {
            keep_markers: true,
            ..TagOptions::default()
        };
        let p = parse_tags_with("a <!->b<-!> c", &opts).unwrap();
        assert_eq!(p.clean_text, "a <!->b<-!> c");
        assert_eq!(&p.clean_text[p.emphasis_spans[0].token_range.clone()], "b");
    }

    #[test]
    fn delta_resolution() {
        let cfg = DeltaConfig::default();
        let span = |level| EmphasisSpan {
            token_range: 0..1,
            char_range: 0..1,
            level,
            delta: 0.0,
        };
        assert_eq!(resolve_delta(&span(2), &cfg).unwrap(), 2.0);
        assert_eq!(resolve_delta(&span(1), &cfg).unwrap(), 1.0);
        assert_eq!(resolve_delta(&span(3), &cfg).unwrap(), 3.0);
        assert!(matches!(
            resolve_delta(&span(4), &cfg),
            Err(GuideError::UnknownLevel(4))
        ));
    }

    #[test]
    fn delta_overrides() {
        let mut cfg = DeltaConfig::default();
        cfg.apply_override("2=2.5").unwrap();
        assert_eq!(cfg.level2, 2.5);
        cfg.apply_override("3 = 7").unwrap(); // allowed, only warns
        assert_eq!(cfg.level3, 7.0);
        assert!(cfg.apply_override("4=1").is_err());
        assert!(cfg.apply_override("1=-1").is_err());
        assert!(cfg.apply_override("garbage").is_err());

        let p = parse_tags("<!!->x<-!!>").unwrap().with_delta_config(&cfg).unwrap();
        assert_eq!(p.emphasis_spans[0].delta, 2.5);
    }

    proptest! {
        #[test]
        fn any_string_round_trips(s in any::<String>()) {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }

        #[test]
        fn spans_map_to_enclosed_text(
            pieces in prop::collection::vec(("[a-zé ]{0,6}", "[a-zü]{1,5}", 0u8..4), 0..6),
            tail in "[a-z ]{0,5}",
        ) {
            let mut raw = String::new();
            let mut expected = Vec::new();
            for (plain, inner, kind) in &pieces {
                raw.push_str(plain);
                let (open, close) = match kind {
                    0 => ("<!->", "<-!>"),
                    1 => ("<!!->", "<-!!>"),
                    2 => ("<!!!->", "<-!!!>"),
                    _ => ("<?->", "<-?>"),
                };
                raw.push_str(open);
                raw.push_str(inner);
                raw.push_str(close);
                expected.push(inner.clone());
            }
            raw.push_str(&tail);

            let p = parse_tags(&raw).unwrap();
            prop_assert_eq!(&p.clean_text, &strip_markers(&raw));
            prop_assert_eq!(detokenize(&p.tokens()), strip_markers(&raw));

            let mut spans: Vec<(Range<usize>, Range<usize>)> = p.emphasis_spans.iter()
                .map(|s| (s.token_range.clone(), s.char_range.clone()))
                .chain(p.query_spans.iter().map(|s| (s.token_range.clone(), s.char_range.clone())))
                .collect();
            spans.sort_by_key(|(t, _)| t.start);
            prop_assert_eq!(spans.len(), expected.len());
            let chars: Vec<char> = p.clean_text.chars().collect();
            for ((tok, ch), inner) in spans.iter().zip(&expected) {
                let bytes = detokenize_bytes(&p.tokens()[tok.clone()]);
                prop_assert_eq!(String::from_utf8(bytes).unwrap(), inner.clone());
                prop_assert_eq!(chars[ch.clone()].iter().collect::<String>(), inner.clone());
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].0.end <= w[1].0.start);
            }
        }
    }
}
