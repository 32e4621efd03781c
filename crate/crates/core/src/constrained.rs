//! Grammar-constrained decoding: every decoded output is a syntactically
//! valid filled template by construction. The output language is a linear
//! sequence of fixed text segments with one value slot between consecutive
//! segments; each value is either `null` or a decimal with a mandatory `0`
//! or `1` integer part and one to four fractional digits.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use thiserror::Error;

use crate::model::{StepperError, TokenStepper};
use crate::prompting::{canonical_segments, slot_guidance, TemplateVariant};
use crate::record::{Slot, Vessel};

// ---------------------------------------------------------------------------
// Output schema
// ---------------------------------------------------------------------------

/// One value field of the output schema, in template order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaField {
    /// Flat key, or `Vessel.Index` path for the nested shape.
    pub name: String,
    pub description: String,
}

/// The declared shape of the decoder's output: which keys, in which order,
/// with what guidance. Keys must match the canonical key set and order of
/// one template shape exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputSchema {
    variant: TemplateVariant,
    fields: Vec<SchemaField>,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to read schema file '{path}': {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse schema file '{path}': {message}")]
    Parse { path: String, message: String },
    #[error("schema root must declare \"type\": \"object\", found '{0}'")]
    NotAnObjectSchema(String),
    #[error("schema mixes nested object properties with plain value properties")]
    MixedShapes,
    #[error("schema keys do not match the {variant} template: expected {expected:?}, found {found:?}")]
    KeyMismatch {
        variant: TemplateVariant,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("schema field '{key}' must declare \"type\": [\"number\", \"null\"], found {found}")]
    BadLeafType { key: String, found: String },
    #[error("schema 'required' list must name every key in order: expected {expected:?}, found {found:?}")]
    BadRequired {
        expected: Vec<String>,
        found: Vec<String>,
    },
}

/// Ordered property list that rejects duplicate keys. Deserialized by
/// streaming map entries, so duplicates in the document are visible.
#[derive(Debug)]
struct PropertyList(Vec<(String, RawProperty)>);

impl<'de> Deserialize<'de> for PropertyList {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: Deserializer<'de>,
    {
        struct PropertyListVisitor;

        impl<'de> Visitor<'de> for PropertyListVisitor {
            type Value = PropertyList;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of schema properties")
            }

            fn visit_map<A>(self, mut map: A) -> Result<Self::Value, A::Error>
            where
                A: MapAccess<'de>,
            {
                let mut entries: Vec<(String, RawProperty)> = Vec::new();
                while let Some((key, value)) = map.next_entry::<String, RawProperty>()? {
                    if entries.iter().any(|(existing, _)| *existing == key) {
                        return Err(de::Error::custom(format!("duplicate schema key '{key}'")));
                    }
                    entries.push((key, value));
                }
                Ok(PropertyList(entries))
            }
        }

        deserializer.deserialize_map(PropertyListVisitor)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    #[serde(rename = "type")]
    kind: String,
    properties: PropertyList,
    #[serde(default)]
    required: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProperty {
    #[serde(rename = "type")]
    kind: serde_json::Value,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    properties: Option<PropertyList>,
    #[serde(default)]
    required: Option<Vec<String>>,
}

fn leaf_type() -> serde_json::Value {
    serde_json::json!(["number", "null"])
}

fn check_required(
    declared: Option<&Vec<String>>,
    expected: &[String],
) -> Result<(), SchemaError> {
    if let Some(found) = declared {
        if found != expected {
            return Err(SchemaError::BadRequired {
                expected: expected.to_vec(),
                found: found.clone(),
            });
        }
    }
    Ok(())
}

fn leaf_field(key: String, property: &RawProperty) -> Result<SchemaField, SchemaError> {
    if property.kind != leaf_type() {
        return Err(SchemaError::BadLeafType {
            key,
            found: property.kind.to_string(),
        });
    }
    Ok(SchemaField {
        name: key,
        description: property.description.clone().unwrap_or_default(),
    })
}

impl OutputSchema {
    /// The built-in schema for a template shape, with per-slot guidance as
    /// descriptions.
    pub fn default_for(variant: TemplateVariant) -> Self {
        let fields = Slot::ALL
            .iter()
            .map(|slot| {
                let name = match variant {
                    TemplateVariant::FlatKeys => slot.flat_key(),
                    TemplateVariant::NestedPerVessel => format!(
                        "{}.{}",
                        slot.vessel.canonical_name(),
                        slot.index.label()
                    ),
                };
                SchemaField {
                    name,
                    description: slot_guidance(*slot),
                }
            })
            .collect();
        OutputSchema { variant, fields }
    }

    pub fn variant(&self) -> TemplateVariant {
        self.variant
    }

    pub fn fields(&self) -> &[SchemaField] {
        &self.fields
    }

    /// Parses a JSON-schema-style document. Key order in the document is
    /// significant and duplicate keys are rejected.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, SchemaError> {
        let raw: RawSchema = serde_json::from_str(text).map_err(|err| SchemaError::Parse {
            path: origin.to_string(),
            message: err.to_string(),
        })?;
        if raw.kind != "object" {
            return Err(SchemaError::NotAnObjectSchema(raw.kind));
        }
        let nested_count = raw
            .props()
            .iter()
            .filter(|(_, property)| property.properties.is_some())
            .count();
        let total = raw.props().len();
        let (variant, fields) = if nested_count == 0 {
            let mut fields = Vec::with_capacity(total);
            for (key, property) in raw.props() {
                fields.push(leaf_field(key.clone(), property)?);
            }
            (TemplateVariant::FlatKeys, fields)
        } else if nested_count == total {
            let mut fields = Vec::new();
            for (vessel_key, property) in raw.props() {
                if property.kind != serde_json::json!("object") {
                    return Err(SchemaError::BadLeafType {
                        key: vessel_key.clone(),
                        found: property.kind.to_string(),
                    });
                }
                let inner = property
                    .properties
                    .as_ref()
                    .expect("nested property checked above");
                let inner_keys: Vec<String> =
                    inner.0.iter().map(|(key, _)| key.clone()).collect();
                check_required(property.required.as_ref(), &inner_keys)?;
                for (index_key, leaf) in &inner.0 {
                    fields.push(leaf_field(
                        format!("{vessel_key}.{index_key}"),
                        leaf,
                    )?);
                }
            }
            (TemplateVariant::NestedPerVessel, fields)
        } else {
            return Err(SchemaError::MixedShapes);
        };

        let top_keys: Vec<String> = raw
            .props()
            .iter()
            .map(|(key, _)| key.clone())
            .collect();
        check_required(raw.required.as_ref(), &top_keys)?;

        let schema = OutputSchema { variant, fields };
        schema.validate_canonical()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    fn validate_canonical(&self) -> Result<(), SchemaError> {
        let expected: Vec<String> = OutputSchema::default_for(self.variant)
            .fields
            .into_iter()
            .map(|field| field.name)
            .collect();
        let found: Vec<String> = self.fields.iter().map(|field| field.name.clone()).collect();
        if expected != found {
            return Err(SchemaError::KeyMismatch {
                variant: self.variant,
                expected,
                found,
            });
        }
        Ok(())
    }

    /// Renders the schema back into its JSON document form.
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut properties = serde_json::Map::new();
        match self.variant {
            TemplateVariant::FlatKeys => {
                for field in &self.fields {
                    properties.insert(
                        field.name.clone(),
                        serde_json::json!({
                            "type": ["number", "null"],
                            "description": field.description,
                        }),
                    );
                }
            }
            TemplateVariant::NestedPerVessel => {
                for vessel in Vessel::ALL {
                    let mut inner = serde_json::Map::new();
                    for field in &self.fields {
                        let Some((vessel_key, index_key)) = field.name.split_once('.') else {
                            continue;
                        };
                        if vessel_key == vessel.canonical_name() {
                            inner.insert(
                                index_key.to_string(),
                                serde_json::json!({
                                    "type": ["number", "null"],
                                    "description": field.description,
                                }),
                            );
                        }
                    }
                    let inner_keys: Vec<&str> = inner.keys().map(String::as_str).collect();
                    let value = serde_json::json!({
                        "type": "object",
                        "properties": serde_json::Value::Object(inner.clone()),
                        "required": inner_keys,
                    });
                    properties.insert(vessel.canonical_name().to_string(), value);
                }
            }
        }
        let keys: Vec<&str> = properties.keys().map(String::as_str).collect();
        serde_json::json!({
            "type": "object",
            "properties": serde_json::Value::Object(properties.clone()),
            "required": keys,
        })
    }
}

impl RawSchema {
    fn props(&self) -> &Vec<(String, RawProperty)> {
        &self.properties.0
    }
}

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

/// Deterministic finite automaton over characters for one template shape.
#[derive(Debug, Clone)]
pub struct Grammar {
    variant: TemplateVariant,
    segments: Vec<Vec<char>>,
}

/// Progress inside a value slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ValuePhase {
    /// Nothing consumed yet: `n`, `0`, or `1` may follow.
    Start,
    /// Inside the literal `null`; the field counts consumed characters.
    Null(u8),
    /// The integer digit was consumed; `.` continues, or the value ends.
    Int,
    /// The separator was consumed; a digit must follow.
    Dot,
    /// `k` fractional digits consumed; more digits up to four, or the end.
    Frac(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Phase {
    /// Inside fixed segment `segment`, next expected character at `offset`.
    Fixed { offset: usize },
    /// Inside the value slot that follows fixed segment `segment`.
    Value(ValuePhase),
    /// The final `}` has been consumed.
    Done,
}

/// A decoding position. States are cheap to copy and hashable so searches
/// over the reachable state space are straightforward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrammarState {
    segment: usize,
    phase: Phase,
}

impl Grammar {
    /// Builds the automaton for a validated schema.
    pub fn compile(schema: &OutputSchema) -> Self {
        Grammar {
            variant: schema.variant(),
            segments: canonical_segments(schema.variant())
                .into_iter()
                .map(|segment| segment.chars().collect())
                .collect(),
        }
    }

    pub fn variant(&self) -> TemplateVariant {
        self.variant
    }

    /// Every character the automaton can ever consume.
    pub fn alphabet(&self) -> BTreeSet<char> {
        let mut chars: BTreeSet<char> = self.segments.iter().flatten().copied().collect();
        chars.extend("0123456789.null".chars());
        chars
    }

    pub fn start(&self) -> GrammarState {
        GrammarState {
            segment: 0,
            phase: Phase::Fixed { offset: 0 },
        }
    }

    pub fn is_accepting(&self, state: GrammarState) -> bool {
        state.phase == Phase::Done
    }

    /// Consumes one character, or `None` if the character is not allowed.
    pub fn next_char(&self, state: GrammarState, c: char) -> Option<GrammarState> {
        match state.phase {
            Phase::Done => None,
            Phase::Fixed { offset } => {
                let segment = &self.segments[state.segment];
                (segment[offset] == c).then(|| self.after_fixed(state.segment, offset + 1))
            }
            Phase::Value(value_phase) => self.next_value_char(state.segment, value_phase, c),
        }
    }

    /// The state after `consumed` characters of fixed segment `segment`.
    fn after_fixed(&self, segment: usize, consumed: usize) -> GrammarState {
        if consumed < self.segments[segment].len() {
            GrammarState {
                segment,
                phase: Phase::Fixed { offset: consumed },
            }
        } else if segment == 10 {
            GrammarState {
                segment,
                phase: Phase::Done,
            }
        } else {
            GrammarState {
                segment,
                phase: Phase::Value(ValuePhase::Start),
            }
        }
    }

    /// Transition where the value in slot `slot` ends and the next fixed
    /// segment begins with `c`.
    fn enter_next_segment(&self, slot: usize, c: char) -> Option<GrammarState> {
        let next = slot + 1;
        (self.segments[next][0] == c).then(|| self.after_fixed(next, 1))
    }

    fn next_value_char(
        &self,
        slot: usize,
        phase: ValuePhase,
        c: char,
    ) -> Option<GrammarState> {
        const NULL: [char; 4] = ['n', 'u', 'l', 'l'];
        let stay = |value_phase| {
            Some(GrammarState {
                segment: slot,
                phase: Phase::Value(value_phase),
            })
        };
        match phase {
            ValuePhase::Start => match c {
                'n' => stay(ValuePhase::Null(1)),
                '0' | '1' => stay(ValuePhase::Int),
                _ => None,
            },
            ValuePhase::Null(consumed) => {
                if NULL[consumed as usize] != c {
                    return None;
                }
                if consumed == 3 {
                    Some(self.after_fixed(slot + 1, 0))
                } else {
                    stay(ValuePhase::Null(consumed + 1))
                }
            }
            ValuePhase::Int => match c {
                '.' => stay(ValuePhase::Dot),
                _ => self.enter_next_segment(slot, c),
            },
            ValuePhase::Dot => {
                if c.is_ascii_digit() {
                    stay(ValuePhase::Frac(1))
                } else {
                    None
                }
            }
            ValuePhase::Frac(count) => {
                if c.is_ascii_digit() && count < 4 {
                    stay(ValuePhase::Frac(count + 1))
                } else {
                    self.enter_next_segment(slot, c)
                }
            }
        }
    }

    /// Consumes a whole token (possibly several characters).
    pub fn advance(&self, state: GrammarState, token: &str) -> Option<GrammarState> {
        if token.is_empty() {
            return None;
        }
        let mut current = state;
        for c in token.chars() {
            current = self.next_char(current, c)?;
        }
        Some(current)
    }

    /// Indices of the vocabulary tokens admissible in `state`.
    pub fn admissible(&self, state: GrammarState, vocab: &[String]) -> Vec<usize> {
        vocab
            .iter()
            .enumerate()
            .filter(|(_, token)| self.advance(state, token).is_some())
            .map(|(id, _)| id)
            .collect()
    }

    /// Upper bound on the character length of any accepted output.
    pub fn output_length_bound(&self) -> usize {
        let fixed: usize = self.segments.iter().map(Vec::len).sum();
        fixed + 10 * "0.1234".len()
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Counters describing one decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct DecodeStats {
    /// Positions where the stepper's distribution was consulted.
    pub steps: usize,
    /// Positions emitted without consulting the stepper because exactly one
    /// token was admissible.
    pub fast_forwarded: usize,
}

/// A successful decode: the full output text and its statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub text: String,
    pub stats: DecodeStats,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeErrorKind {
    #[error("vocabulary lacks required characters: {missing:?}")]
    VocabGap { missing: Vec<char> },
    #[error("stepper failed: {0}")]
    StepperFailed(StepperError),
    #[error("bad distribution: {0}")]
    BadDistribution(String),
    #[error("no vocabulary token is admissible")]
    NoAdmissibleToken,
    #[error("decoded output exceeded the grammar's length bound")]
    Overrun,
}

/// A failed decode, carrying whatever had been emitted so far.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} (after {} decoded characters)", partial.chars().count())]
pub struct DecodeError {
    pub kind: DecodeErrorKind,
    pub partial: String,
}

fn check_distribution(dist: &[f64], vocab_len: usize) -> Result<(), String> {
    if dist.len() != vocab_len {
        return Err(format!(
            "length {} does not match vocabulary size {vocab_len}",
            dist.len()
        ));
    }
    if let Some(bad) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(format!("probability {bad} is negative or not finite"));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(format!("probabilities sum to {total}, expected 1 ± 1e-9"));
    }
    Ok(())
}

/// Greedy masked decoding: at every position the admissible token set is
/// computed from the grammar; a single admissible token is emitted without
/// consulting the stepper; otherwise the stepper's distribution is masked
/// to the admissible set, renormalized, and its argmax is emitted, breaking
/// ties toward the lexicographically smallest token. If no admissible token
/// carries probability mass, the lexicographically smallest admissible token
/// is emitted.
pub fn decode(
    grammar: &Grammar,
    stepper: &mut dyn TokenStepper,
) -> Result<DecodeOutcome, DecodeError> {
    let vocab: Vec<String> = stepper.vocab().to_vec();
    let covered: BTreeSet<char> = vocab.iter().flat_map(|token| token.chars()).collect();
    let missing: Vec<char> = grammar
        .alphabet()
        .into_iter()
        .filter(|c| !covered.contains(c))
        .collect();
    if !missing.is_empty() {
        return Err(DecodeError {
            kind: DecodeErrorKind::VocabGap { missing },
            partial: String::new(),
        });
    }

    let bound = grammar.output_length_bound();
    let mut out = String::new();
    let mut stats = DecodeStats::default();
    let mut state = grammar.start();
    let fail = |kind, partial: &String| DecodeError {
        kind,
        partial: partial.clone(),
    };

    while !grammar.is_accepting(state) {
        if out.chars().count() > bound {
            return Err(fail(DecodeErrorKind::Overrun, &out));
        }
        let admissible = grammar.admissible(state, &vocab);
        let chosen = match admissible.len() {
            0 => return Err(fail(DecodeErrorKind::NoAdmissibleToken, &out)),
            1 => {
                stats.fast_forwarded += 1;
                admissible[0]
            }
            _ => {
                let dist = stepper
                    .step()
                    .map_err(|err| fail(DecodeErrorKind::StepperFailed(err), &out))?;
                check_distribution(&dist, vocab.len())
                    .map_err(|detail| fail(DecodeErrorKind::BadDistribution(detail), &out))?;
                stats.steps += 1;
                let mut best = admissible[0];
                for &candidate in &admissible[1..] {
                    let better = dist[candidate] > dist[best]
                        || (dist[candidate] == dist[best] && vocab[candidate] < vocab[best]);
                    if better {
                        best = candidate;
                    }
                }
                best
            }
        };
        stepper
            .append(chosen)
            .map_err(|err| fail(DecodeErrorKind::StepperFailed(err), &out))?;
        state = grammar
            .advance(state, &vocab[chosen])
            .expect("admissible token must advance the automaton");
        out.push_str(&vocab[chosen]);
    }

    Ok(DecodeOutcome { text: out, stats })
}
