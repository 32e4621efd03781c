//! Pattern-based reference extractor: regular expressions plus proximity
//! binding, no model involved. It scans a report for decimal values, binds
//! each value to the nearest physiology-index keyword and vessel mention,
//! and applies the lowest-value rule per slot. Mangled fragments such as
//! ",93" or "0,0.93" are deliberately not matched — recognizing those is the
//! typo-tolerant verifier's job, and the gap between the two is part of what
//! the evaluation measures.

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{FixedDecimal, PhysIndex, PhysiologyRecord, Slot, Vessel};

/// One extraction rule: how to spot a vessel, an index keyword, and a value,
/// and how far apart (in characters) they may sit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternRule {
    pub vessel: Vessel,
    /// Case-insensitive regex for mentions of the vessel (canonical name and
    /// aliases).
    pub vessel_pattern: String,
    pub index: PhysIndex,
    /// Case-insensitive regex for the index keyword ("FFR" / "iFR").
    pub index_pattern: String,
    /// Regex for a candidate decimal; both "." and "," separators.
    pub number_pattern: String,
    /// Maximum character distance between a value and the mentions it binds.
    pub window: usize,
}

/// Ordered rule list. Order is the tie-break of last resort: when two rules
/// bind equally close, the earlier rule wins. An empty list extracts nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PatternSet {
    pub rules: Vec<PatternRule>,
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("rule {rule} ({field}): invalid regex: {source}")]
    BadRegex {
        rule: usize,
        field: &'static str,
        #[source]
        source: regex::Error,
    },
    #[error("failed to read pattern file {path}: {message}")]
    File { path: String, message: String },
}

impl PatternSet {
    /// The built-in rule set: one rule per slot in template order, a shared
    /// number pattern restricted to integer part 0 or 1 (catheter sizes like
    /// "3.5" never qualify), and a 120-character proximity window — wide
    /// enough for a section header and its procedure narration, narrow
    /// enough not to leak across report sections.
    pub fn defaults() -> Self {
        let vessel_pattern = |v: Vessel| -> String {
            match v {
                Vessel::TroncoComum => r"\btronco\s+comum\b|\bTC\b".to_string(),
                Vessel::DescendenteAnterior => r"\bdescendente\s+anterior\b|\bDA\b".to_string(),
                Vessel::Circunflexa => r"\bcircunflexa\b|\bCX\b".to_string(),
                Vessel::CoronariaDireita => r"\bcoronária\s+direita\b|\bCD\b".to_string(),
                Vessel::OutrasArterias => {
                    r"\boutras\s+artérias\b|\bdiagonal\b|\bmarginal\b|\bramo\s+intermédio\b"
                        .to_string()
                }
            }
        };
        let rules = Slot::ALL
            .iter()
            .map(|slot| PatternRule {
                vessel: slot.vessel,
                vessel_pattern: vessel_pattern(slot.vessel),
                index: slot.index,
                index_pattern: match slot.index {
                    PhysIndex::Ffr => r"\bFFR\b".to_string(),
                    PhysIndex::Ifr => r"\biFR\b".to_string(),
                },
                number_pattern: r"[01][.,][0-9]{1,4}".to_string(),
                window: 120,
            })
            .collect();
        PatternSet { rules }
    }

    /// Loads a rule set from a plain JSON file (the serialization of
    /// [`PatternSet`]).
    pub fn from_json_file(path: &std::path::Path) -> Result<Self, PatternError> {
        let text = std::fs::read_to_string(path).map_err(|e| PatternError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| PatternError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Compiles every regex once; extraction then reuses the compiled set.
    pub fn compile(&self) -> Result<CompiledPatternSet, PatternError> {
        let build = |rule: usize, field: &'static str, pattern: &str| {
            RegexBuilder::new(pattern)
                .case_insensitive(true)
                .build()
                .map_err(|source| PatternError::BadRegex {
                    rule,
                    field,
                    source,
                })
        };
        let mut compiled = Vec::with_capacity(self.rules.len());
        for (i, rule) in self.rules.iter().enumerate() {
            compiled.push(CompiledRule {
                vessel: rule.vessel,
                vessel_re: build(i, "vessel_pattern", &rule.vessel_pattern)?,
                index: rule.index,
                index_re: build(i, "index_pattern", &rule.index_pattern)?,
                number_re: build(i, "number_pattern", &rule.number_pattern)?,
                window: rule.window,
            });
        }
        Ok(CompiledPatternSet { rules: compiled })
    }
}

#[derive(Debug)]
pub struct CompiledPatternSet {
    rules: Vec<CompiledRule>,
}

#[derive(Debug)]
struct CompiledRule {
    vessel: Vessel,
    vessel_re: Regex,
    index: PhysIndex,
    index_re: Regex,
    number_re: Regex,
    window: usize,
}

#[derive(Clone, Copy)]
struct Mention<T> {
    start: usize,
    end: usize,
    what: T,
    rule: usize,
}

/// Extracts a physiology record from report text. Total: unparseable or
/// unbindable values are skipped, never errored; a report without readable
/// measurements yields an all-absent record. When a slot accumulates several
/// values (repeated measurements), the minimum is kept.
pub fn extract_baseline(text: &str, patterns: &CompiledPatternSet) -> PhysiologyRecord {
    let mut record = PhysiologyRecord::empty();
    if patterns.rules.is_empty() {
        return record;
    }
    let sentences = sentence_spans(text);

    let mut vessel_mentions: Vec<Mention<Vessel>> = Vec::new();
    let mut index_mentions: Vec<Mention<PhysIndex>> = Vec::new();
    let mut number_spans: Vec<(usize, usize)> = Vec::new();
    for (rule_idx, rule) in patterns.rules.iter().enumerate() {
        for m in rule.vessel_re.find_iter(text) {
            vessel_mentions.push(Mention {
                start: m.start(),
                end: m.end(),
                what: rule.vessel,
                rule: rule_idx,
            });
        }
        for m in rule.index_re.find_iter(text) {
            index_mentions.push(Mention {
                start: m.start(),
                end: m.end(),
                what: rule.index,
                rule: rule_idx,
            });
        }
        for m in rule.number_re.find_iter(text) {
            if passes_boundary_guards(text, m.start(), m.end())
                && !number_spans.contains(&(m.start(), m.end()))
            {
                number_spans.push((m.start(), m.end()));
            }
        }
    }
    number_spans.sort_unstable();

    for &(num_start, num_end) in &number_spans {
        let Some(index) = bind_index(text, &index_mentions, patterns, num_start) else {
            continue;
        };
        let Some(vessel) = bind_vessel(text, &vessel_mentions, patterns, &sentences, num_start, num_end)
        else {
            continue;
        };
        let Ok(value) = FixedDecimal::parse_lenient(&text[num_start..num_end]) else {
            continue;
        };
        let slot = Slot::new(vessel, index);
        let best = match record.get(slot) {
            Some(existing) => existing.min(value),
            None => value,
        };
        record.set(slot, Some(best));
    }
    record
}

/// Convenience wrapper over [`extract_baseline`] with the built-in rules.
pub fn extract_with_defaults(text: &str) -> PhysiologyRecord {
    let compiled = PatternSet::defaults()
        .compile()
        .expect("built-in patterns always compile");
    extract_baseline(text, &compiled)
}

/// A decimal match only counts when it stands alone: not glued to more
/// digits or to further separator+digit runs (which is what mangled
/// fragments like "0,0.93" look like).
fn passes_boundary_guards(text: &str, start: usize, end: usize) -> bool {
    if let Some(prev) = text[..start].chars().next_back() {
        if prev.is_ascii_digit() || prev == '.' || prev == ',' {
            return false;
        }
    }
    let mut after = text[end..].chars();
    match after.next() {
        None => true,
        Some(c) if c.is_ascii_digit() => false,
        Some('.') | Some(',') => !after.next().is_some_and(|c2| c2.is_ascii_digit()),
        Some(_) => true,
    }
}

/// Character distance between two byte positions.
fn char_gap(text: &str, from: usize, to: usize) -> usize {
    text[from..to].chars().count()
}

/// Sentence spans, split on '.' followed by whitespace or end of text.
/// Decimal points ("0.83") and inline abbreviations stay un-split because a
/// digit, not whitespace, follows them.
fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'.' {
            let next_ws = bytes
                .get(i + 1)
                .map_or(true, |&n| n.is_ascii_whitespace());
            if next_ws {
                spans.push((start, i + 1));
                start = i + 1;
            }
        }
    }
    if start < bytes.len() {
        spans.push((start, bytes.len()));
    }
    spans
}

fn sentence_of(sentences: &[(usize, usize)], pos: usize) -> Option<(usize, usize)> {
    sentences.iter().copied().find(|&(s, e)| pos >= s && pos < e)
}

/// Nearest index keyword ending before the value, within its rule's window.
fn bind_index(
    text: &str,
    mentions: &[Mention<PhysIndex>],
    patterns: &CompiledPatternSet,
    num_start: usize,
) -> Option<PhysIndex> {
    let mut best: Option<(usize, usize, PhysIndex)> = None; // (gap, rule, index)
    for m in mentions {
        if m.end > num_start {
            continue;
        }
        let gap = char_gap(text, m.end, num_start);
        if gap > patterns.rules[m.rule].window {
            continue;
        }
        let candidate = (gap, m.rule, m.what);
        if best.map_or(true, |(bg, br, _)| (gap, m.rule) < (bg, br)) {
            best = Some(candidate);
        }
    }
    best.map(|(_, _, index)| index)
}

/// Vessel binding precedence: a mention inside the value's own sentence,
/// then the nearest preceding mention, then the nearest following one —
/// everything limited by the window of the rule that produced the mention.
/// Clinical reports mostly state the vessel before the value (often in a
/// section header), hence preceding-before-following.
fn bind_vessel(
    text: &str,
    mentions: &[Mention<Vessel>],
    patterns: &CompiledPatternSet,
    sentences: &[(usize, usize)],
    num_start: usize,
    num_end: usize,
) -> Option<Vessel> {
    let sentence = sentence_of(sentences, num_start);

    // Rank of a candidate: (precedence class, gap, direction, rule order).
    // Lower compares first, so the best candidate is the minimum.
    let mut best: Option<((u8, usize, u8, usize), Vessel)> = None;
    for m in mentions {
        let (gap, following) = if m.end <= num_start {
            (char_gap(text, m.end, num_start), 0u8)
        } else if m.start >= num_end {
            (char_gap(text, num_end, m.start), 1u8)
        } else {
            continue; // a mention overlapping the number is nonsense
        };
        if gap > patterns.rules[m.rule].window {
            continue;
        }
        let in_sentence = sentence
            .is_some_and(|(s, e)| m.start >= s && m.end <= e);
        let class = match (in_sentence, following) {
            (true, _) => 0u8,
            (false, 0) => 1,
            (false, _) => 2,
        };
        let rank = (class, gap, following, m.rule);
        if best.as_ref().map_or(true, |(b, _)| rank < *b) {
            best = Some((rank, m.what));
        }
    }
    best.map(|(_, v)| v)
}
