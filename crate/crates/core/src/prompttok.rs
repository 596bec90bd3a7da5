//! Prompt segmentation: words outside quotes, one grapheme per span inside.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Word,
    Char,
    QuoteMark,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub text: String,
    pub kind: SpanKind,
    pub byte_range: Range<usize>,
}

/// ASCII double quote, curly double quotes, CJK corner brackets.
pub const DEFAULT_QUOTE_PAIRS: [(char, char); 4] =
    [('"', '"'), ('\u{201C}', '\u{201D}'), ('「', '」'), ('『', '』')];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmenter {
    pub quote_pairs: Vec<(char, char)>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter {
            quote_pairs: DEFAULT_QUOTE_PAIRS.to_vec(),
        }
    }
}

impl Segmenter {
    pub fn segment(&self, prompt: &str) -> Vec<TokenSpan> {
        let mut spans = Vec::new();
        let mut word_start: Option<usize> = None;
        let flush = |spans: &mut Vec<TokenSpan>, start: &mut Option<usize>, end: usize| {
            if let Some(s) = start.take() {
                spans.push(TokenSpan {
                    text: prompt[s..end].to_string(),
                    kind: SpanKind::Word,
                    byte_range: s..end,
                });
            }
        };

        let mut pos = 0;
        while pos < prompt.len() {
            let ch = prompt[pos..].chars().next().expect("pos is on a char boundary");
            let width = ch.len_utf8();
            let closing = self
                .quote_pairs
                .iter()
                .find(|(open, _)| *open == ch)
                .map(|&(_, close)| close);
            let close_at = closing.and_then(|close| {
                prompt[pos + width..]
                    .find(close)
                    .map(|off| (pos + width + off, close.len_utf8()))
            });

            if let Some((close_pos, close_width)) = close_at {
                flush(&mut spans, &mut word_start, pos);
                spans.push(quote_span(prompt, pos..pos + width));
                for (off, g) in prompt[pos + width..close_pos].grapheme_indices(true) {
                    let start = pos + width + off;
                    spans.push(TokenSpan {
                        text: g.to_string(),
                        kind: SpanKind::Char,
                        byte_range: start..start + g.len(),
                    });
                }
                spans.push(quote_span(prompt, close_pos..close_pos + close_width));
                pos = close_pos + close_width;
            } else if ch.is_whitespace() {
                flush(&mut spans, &mut word_start, pos);
                pos += width;
            } else {
                word_start.get_or_insert(pos);
                pos += width;
            }
        }
        flush(&mut spans, &mut word_start, prompt.len());
        spans
    }
}

fn quote_span(prompt: &str, range: Range<usize>) -> TokenSpan {
    TokenSpan {
        text: prompt[range.clone()].to_string(),
        kind: SpanKind::QuoteMark,
        byte_range: range,
    }
}

pub fn segment_prompt(prompt: &str) -> Vec<TokenSpan> {
    Segmenter::default().segment(prompt)
}

/// Rebuilds the source from span texts; bytes between spans are copied
/// from `source`.
pub fn reassemble(spans: &[TokenSpan], source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    let mut cursor = 0;
    for s in spans {
        out.push_str(&source[cursor..s.byte_range.start]);
        out.push_str(&s.text);
        cursor = s.byte_range.end;
    }
    out.push_str(&source[cursor..]);
    out
}

/// Spans are ordered and disjoint, each text equals its source slice and
/// every uncovered byte is whitespace.
pub fn is_lossless(spans: &[TokenSpan], source: &str) -> bool {
    let mut cursor = 0;
    for s in spans {
        let r = &s.byte_range;
        if r.start < cursor || r.end > source.len() || source.get(r.clone()) != Some(&s.text) {
            return false;
        }
        if !source[cursor..r.start].chars().all(char::is_whitespace) {
            return false;
        }
        cursor = r.end;
    }
    source[cursor..].chars().all(char::is_whitespace) && reassemble(spans, source) == source
}
