//! Turning raw model text into validated records: output parsing, typo
//! normalization, range filtering, and report-grounded verification.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::prompting::TemplateVariant;
use crate::record::{FixedDecimal, PhysiologyRecord, Slot};

// ---------------------------------------------------------------------------
// Typo normalization
// ---------------------------------------------------------------------------

/// Recoverable ways a decimal measurement gets mistyped in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypoClass {
    /// Leading zero dropped: ",93" for 0.93.
    MissingZero,
    /// Separator before the zero: ",099" for 0.099.
    WrongCommaPlacing,
    /// Separator dropped entirely: "089" for 0.89.
    MissingComma,
    /// Stray space after the separator: "0, 75" for 0.75.
    ExtraSpace,
    /// Zero and punctuation doubled: "0,0.93" for 0.93.
    RepeatedZeroPunct,
}

impl TypoClass {
    pub const ALL: [TypoClass; 5] = [
        TypoClass::MissingZero,
        TypoClass::WrongCommaPlacing,
        TypoClass::MissingComma,
        TypoClass::ExtraSpace,
        TypoClass::RepeatedZeroPunct,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TypoClass::MissingZero => "missing_zero",
            TypoClass::WrongCommaPlacing => "wrong_comma_placing",
            TypoClass::MissingComma => "missing_comma",
            TypoClass::ExtraSpace => "extra_space",
            TypoClass::RepeatedZeroPunct => "repeated_zero_punct",
        }
    }
}

impl fmt::Display for TypoClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Result of recognizing a written measurement fragment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizedValue {
    pub value: FixedDecimal,
    /// `None` when the fragment was already well formed (either separator).
    pub class: Option<TypoClass>,
}

fn all_ascii_digits(bytes: &[u8]) -> bool {
    !bytes.is_empty() && bytes.iter().all(u8::is_ascii_digit)
}

fn is_sep(byte: u8) -> bool {
    byte == b'.' || byte == b','
}

fn build(int_digit: u8, frac: &[u8], class: Option<TypoClass>) -> Option<NormalizedValue> {
    let mut canonical = String::with_capacity(2 + frac.len());
    canonical.push(int_digit as char);
    if !frac.is_empty() {
        canonical.push('.');
        canonical.push_str(std::str::from_utf8(frac).ok()?);
    }
    let value = FixedDecimal::parse_canonical(&canonical).ok()?;
    Some(NormalizedValue { value, class })
}

/// Recognizes a measurement fragment, fixing the five recoverable typo
/// shapes. Returns `None` when the fragment is not a plausible rendering of
/// a single measurement. Matching is anchored: the whole fragment must fit.
pub fn normalize_typo(fragment: &str) -> Option<NormalizedValue> {
    let b = fragment.as_bytes();
    let n = b.len();
    if n == 0 {
        return None;
    }
    // Bare integer part: "0" or "1".
    if n == 1 && (b[0] == b'0' || b[0] == b'1') {
        return build(b[0], &[], None);
    }
    // Well-formed with either separator: "0.83", "0,83".
    if n >= 3
        && (b[0] == b'0' || b[0] == b'1')
        && is_sep(b[1])
        && all_ascii_digits(&b[2..])
        && n - 2 <= 4
    {
        return build(b[0], &b[2..], None);
    }
    // Leading zero dropped: ",93".
    if n >= 2
        && is_sep(b[0])
        && (b'1'..=b'9').contains(&b[1])
        && all_ascii_digits(&b[1..])
        && n - 1 <= 4
    {
        return build(b'0', &b[1..], Some(TypoClass::MissingZero));
    }
    // Separator placed before the zero: ",099".
    if n >= 3 && is_sep(b[0]) && b[1] == b'0' && all_ascii_digits(&b[1..]) && n - 1 <= 4 {
        return build(b'0', &b[1..], Some(TypoClass::WrongCommaPlacing));
    }
    // Separator dropped: "089".
    if n >= 2 && b[0] == b'0' && all_ascii_digits(&b[1..]) && n - 1 <= 4 {
        return build(b'0', &b[1..], Some(TypoClass::MissingComma));
    }
    // Stray space after the separator: "0, 75".
    if n >= 4
        && (b[0] == b'0' || b[0] == b'1')
        && is_sep(b[1])
        && b[2] == b' '
        && all_ascii_digits(&b[3..])
        && n - 3 <= 4
    {
        return build(b[0], &b[3..], Some(TypoClass::ExtraSpace));
    }
    // Zero and punctuation doubled: "0,0.93".
    if n >= 5 && b[0] == b'0' && is_sep(b[1]) && b[2] == b'0' && is_sep(b[3])
        && all_ascii_digits(&b[4..])
        && n - 4 <= 4
    {
        return build(b'0', &b[4..], Some(TypoClass::RepeatedZeroPunct));
    }
    None
}

// ---------------------------------------------------------------------------
// Filter trace
// ---------------------------------------------------------------------------

/// How report-grounded verification treats extracted values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyMode {
    /// No verification.
    Off,
    /// A value survives only if its exact written form occurs in the report.
    Strict,
    /// Also accepts the five recoverable typo renderings of the value.
    TypoTolerant,
}

impl VerifyMode {
    pub fn label(self) -> &'static str {
        match self {
            VerifyMode::Off => "off",
            VerifyMode::Strict => "strict",
            VerifyMode::TypoTolerant => "typo-tolerant",
        }
    }
}

impl fmt::Display for VerifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for VerifyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(VerifyMode::Off),
            "strict" => Ok(VerifyMode::Strict),
            "typo-tolerant" => Ok(VerifyMode::TypoTolerant),
            other => Err(format!(
                "unknown verify mode '{other}' (expected 'off', 'strict' or 'typo-tolerant')"
            )),
        }
    }
}

/// One step in the per-report filtering history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    /// A string-typed value was recognized and canonicalized.
    Normalized {
        slot: String,
        raw: String,
        value: FixedDecimal,
        class: Option<TypoClass>,
    },
    /// A value fell outside the plausible range and was dropped.
    RemovedByRange {
        slot: String,
        value: FixedDecimal,
        lo: FixedDecimal,
        hi: FixedDecimal,
    },
    /// A value had no written occurrence in the report and was dropped.
    RemovedByVerify {
        slot: String,
        value: FixedDecimal,
        mode: VerifyMode,
    },
    /// A value survived every enabled filter.
    Kept { slot: String, value: FixedDecimal },
}

/// Append-only history of what happened to each extracted value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterTrace {
    events: Vec<TraceEvent>,
}

impl FilterTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Records one `Kept` event per value still present in `record`.
    pub fn record_kept(&mut self, record: &PhysiologyRecord) {
        for (slot, value) in record.iter() {
            if let Some(value) = value {
                self.push(TraceEvent::Kept {
                    slot: slot.flat_key().to_string(),
                    value,
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Output parsing
// ---------------------------------------------------------------------------

/// Why a raw model output could not be scored as a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutOfFormatReason {
    /// No parseable JSON object in the output.
    NotJson,
    /// The object lacks a required key for the active template.
    MissingKey,
    /// A slot holds something that is not a decimal, null, or a recognizable
    /// written measurement.
    NonNumericValue,
    /// More than one top-level JSON object in the output.
    ExtraProse,
}

impl fmt::Display for OutOfFormatReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self {
            OutOfFormatReason::NotJson => "not-json",
            OutOfFormatReason::MissingKey => "missing-key",
            OutOfFormatReason::NonNumericValue => "non-numeric-value",
            OutOfFormatReason::ExtraProse => "extra-prose",
        };
        f.write_str(label)
    }
}

/// Whether a raw output yielded a scoreable record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FormatStatus {
    Parsed,
    OutOfFormat {
        reason: OutOfFormatReason,
        detail: String,
    },
}

impl FormatStatus {
    pub fn is_parsed(&self) -> bool {
        matches!(self, FormatStatus::Parsed)
    }
}

/// Knobs for [`parse_output`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    pub variant: TemplateVariant,
    /// Treat a missing template key as an explicit null instead of rejecting
    /// the whole output.
    pub missing_keys_as_null: bool,
}

impl ParseOptions {
    pub fn new(variant: TemplateVariant) -> Self {
        ParseOptions {
            variant,
            missing_keys_as_null: false,
        }
    }
}

/// What parsing produced: a record when the output was in format.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub status: FormatStatus,
    pub record: Option<PhysiologyRecord>,
}

fn out_of_format(reason: OutOfFormatReason, detail: impl Into<String>) -> ParsedOutput {
    ParsedOutput {
        status: FormatStatus::OutOfFormat {
            reason,
            detail: detail.into(),
        },
        record: None,
    }
}

/// Byte spans of balanced `{...}` regions at nesting depth zero, skipping
/// brace characters inside JSON string literals.
fn top_level_object_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &byte) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if byte == b'\\' {
                escaped = true;
            } else if byte == b'"' {
                in_string = false;
            }
            continue;
        }
        match byte {
            b'"' if depth > 0 => in_string = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' => {
                if depth > 0 {
                    depth -= 1;
                    if depth == 0 {
                        spans.push((start, i + 1));
                    }
                }
            }
            _ => {}
        }
    }
    spans
}

enum LeafOutcome {
    Value(Option<FixedDecimal>),
    Bad(String),
}

fn read_leaf(slot_name: &str, value: &serde_json::Value, trace: &mut FilterTrace) -> LeafOutcome {
    match value {
        serde_json::Value::Null => LeafOutcome::Value(None),
        serde_json::Value::Number(number) => match number.as_f64() {
            Some(float) => match FixedDecimal::try_from_f64(float) {
                Ok(decimal) => LeafOutcome::Value(Some(decimal)),
                Err(err) => LeafOutcome::Bad(format!("{slot_name}: {err}")),
            },
            None => LeafOutcome::Bad(format!("{slot_name}: number out of range")),
        },
        serde_json::Value::String(text) => {
            let trimmed = text.trim();
            if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("null") {
                return LeafOutcome::Value(None);
            }
            match normalize_typo(trimmed) {
                Some(normalized) => {
                    trace.push(TraceEvent::Normalized {
                        slot: slot_name.to_string(),
                        raw: trimmed.to_string(),
                        value: normalized.value,
                        class: normalized.class,
                    });
                    LeafOutcome::Value(Some(normalized.value))
                }
                None => LeafOutcome::Bad(format!(
                    "{slot_name}: string '{trimmed}' is not a recognizable measurement"
                )),
            }
        }
        other => LeafOutcome::Bad(format!(
            "{slot_name}: expected a decimal or null, found {}",
            json_type_name(other)
        )),
    }
}

fn json_type_name(value: &serde_json::Value) -> &'static str {
    match value {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "a boolean",
        serde_json::Value::Number(_) => "a number",
        serde_json::Value::String(_) => "a string",
        serde_json::Value::Array(_) => "an array",
        serde_json::Value::Object(_) => "an object",
    }
}

/// Extracts a record from raw model text. Total: never panics on arbitrary
/// input. Prose and code fences around a single JSON object are tolerated;
/// two or more top-level objects are not.
pub fn parse_output(raw: &str, options: &ParseOptions, trace: &mut FilterTrace) -> ParsedOutput {
    let spans = top_level_object_spans(raw);
    let (start, end) = match spans.len() {
        0 => return out_of_format(OutOfFormatReason::NotJson, "no JSON object found"),
        1 => spans[0],
        n => {
            return out_of_format(
                OutOfFormatReason::ExtraProse,
                format!("found {n} top-level JSON objects, expected exactly one"),
            )
        }
    };
    let parsed: serde_json::Value = match serde_json::from_str(&raw[start..end]) {
        Ok(value) => value,
        Err(err) => return out_of_format(OutOfFormatReason::NotJson, err.to_string()),
    };
    let Some(object) = parsed.as_object() else {
        return out_of_format(OutOfFormatReason::NotJson, "top-level value is not an object");
    };

    let mut record = PhysiologyRecord::empty();
    for slot in Slot::ALL {
        let (slot_name, leaf) = match options.variant {
            TemplateVariant::FlatKeys => {
                let key = slot.flat_key();
                let leaf = object.get(&key);
                (key, leaf)
            }
            TemplateVariant::NestedPerVessel => {
                let vessel_key = slot.vessel.canonical_name();
                let index_key = slot.index.label();
                let leaf = object
                    .get(vessel_key)
                    .and_then(|inner| inner.as_object())
                    .and_then(|inner| inner.get(index_key));
                (format!("{vessel_key}.{index_key}"), leaf)
            }
        };
        let Some(leaf) = leaf else {
            if options.missing_keys_as_null {
                continue;
            }
            return out_of_format(
                OutOfFormatReason::MissingKey,
                format!("missing key '{slot_name}'"),
            );
        };
        match read_leaf(&slot_name, leaf, trace) {
            LeafOutcome::Value(value) => record.set(slot, value),
            LeafOutcome::Bad(detail) => {
                return out_of_format(OutOfFormatReason::NonNumericValue, detail)
            }
        }
    }
    ParsedOutput {
        status: FormatStatus::Parsed,
        record: Some(record),
    }
}

// ---------------------------------------------------------------------------
// Plausibility filter
// ---------------------------------------------------------------------------

/// Drops values outside the inclusive range `[lo, hi]`, recording each
/// removal. Both bounds themselves survive.
pub fn plausibility_filter(
    record: &PhysiologyRecord,
    lo: FixedDecimal,
    hi: FixedDecimal,
    trace: &mut FilterTrace,
) -> PhysiologyRecord {
    let mut kept = PhysiologyRecord::empty();
    for (slot, value) in record.iter() {
        let Some(value) = value else { continue };
        if value < lo || value > hi {
            trace.push(TraceEvent::RemovedByRange {
                slot: slot.flat_key().to_string(),
                value,
                lo,
                hi,
            });
        } else {
            kept.set(slot, Some(value));
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Report-grounded verification
// ---------------------------------------------------------------------------

/// True when `needle` occurs in `text` not embedded in a larger number:
/// the previous character must not be a digit or separator, the next must
/// not be a digit, and the next must not be a separator followed by a digit.
fn occurs_guarded(text: &str, needle: &str) -> bool {
    for (pos, _) in text.match_indices(needle) {
        if let Some(prev) = text[..pos].chars().next_back() {
            if prev.is_ascii_digit() || prev == '.' || prev == ',' {
                continue;
            }
        }
        let mut after = text[pos + needle.len()..].chars();
        match after.next() {
            Some(next) if next.is_ascii_digit() => continue,
            Some(next) if next == '.' || next == ',' => {
                if after.next().is_some_and(|second| second.is_ascii_digit()) {
                    continue;
                }
            }
            _ => {}
        }
        return true;
    }
    false
}

/// The written forms under which a value counts as occurring in a report.
fn written_candidates(value: FixedDecimal, tolerant: bool) -> Vec<String> {
    let canonical = value.to_string();
    let mut candidates = Vec::new();
    let Some((int_part, frac)) = canonical.split_once('.') else {
        candidates.push(canonical);
        return candidates;
    };
    for sep in ['.', ','] {
        candidates.push(format!("{int_part}{sep}{frac}"));
    }
    if tolerant {
        for sep in ['.', ','] {
            // Stray space after the separator.
            candidates.push(format!("{int_part}{sep} {frac}"));
        }
        if int_part == "0" {
            for sep in ['.', ','] {
                // Leading zero dropped, or separator placed before the zero.
                candidates.push(format!("{sep}{frac}"));
                for second in ['.', ','] {
                    // Zero and punctuation doubled.
                    candidates.push(format!("0{sep}0{second}{frac}"));
                }
            }
            // Separator dropped.
            candidates.push(format!("0{frac}"));
        }
    }
    candidates
}

/// Drops values that never occur in the report text in an accepted written
/// form. Never adds or alters values; with [`VerifyMode::Off`] the record is
/// returned unchanged.
pub fn verify_against_report(
    record: &PhysiologyRecord,
    report_text: &str,
    mode: VerifyMode,
    trace: &mut FilterTrace,
) -> PhysiologyRecord {
    let tolerant = match mode {
        VerifyMode::Off => return record.clone(),
        VerifyMode::Strict => false,
        VerifyMode::TypoTolerant => true,
    };
    let mut kept = PhysiologyRecord::empty();
    for (slot, value) in record.iter() {
        let Some(value) = value else { continue };
        let confirmed = written_candidates(value, tolerant)
            .iter()
            .any(|candidate| occurs_guarded(report_text, candidate));
        if confirmed {
            kept.set(slot, Some(value));
        } else {
            trace.push(TraceEvent::RemovedByVerify {
                slot: slot.flat_key().to_string(),
                value,
                mode,
            });
        }
    }
    kept
}
