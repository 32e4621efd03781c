//! Core value types shared by every stage of the pipeline: exact decimal
//! measurement values, the five coronary vessel territories, the two
//! physiology indices (FFR / iFR), and the ten-slot record that holds one
//! report's ground truth or one model's extraction.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of fractional digits carried by [`FixedDecimal`].
pub const DECIMAL_SCALE: u32 = 4;
const SCALE_FACTOR: i64 = 10_000;

/// Errors produced when parsing or constructing decimal values.
#[derive(Debug, Error, PartialEq, Clone)]
pub enum DecimalError {
    #[error("empty decimal literal")]
    Empty,
    #[error("invalid decimal literal {0:?}")]
    Invalid(String),
    #[error("decimal literal {0:?} has more than {DECIMAL_SCALE} fractional digits")]
    TooManyFractionalDigits(String),
    #[error("decimal value must be non-negative, got {0:?}")]
    Negative(String),
    #[error("numeric value {0} cannot be represented exactly with {DECIMAL_SCALE} fractional digits")]
    NotRepresentable(f64),
}

/// An exact non-negative decimal with at most four fractional digits,
/// stored as a scaled integer so that equality is exact: `0.830 == 0.83`
/// while `0.099 != 0.99`. All truth/prediction comparisons in the pipeline
/// go through this type; binary floating point never decides a match.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedDecimal(i64);

impl FixedDecimal {
    /// Builds a value from an already-scaled integer (`units = value * 10^4`).
    pub fn from_scaled(units: i64) -> Result<Self, DecimalError> {
        if units < 0 {
            return Err(DecimalError::Negative(units.to_string()));
        }
        Ok(FixedDecimal(units))
    }

    /// The scaled integer representation (`value * 10^4`).
    pub fn scaled(self) -> i64 {
        self.0
    }

    /// Parses the canonical textual form: optional integer part, `.` as the
    /// only admitted separator, at most four fractional digits, no sign.
    pub fn parse_canonical(s: &str) -> Result<Self, DecimalError> {
        if s.is_empty() {
            return Err(DecimalError::Empty);
        }
        if s.starts_with('-') || s.starts_with('+') {
            return Err(DecimalError::Negative(s.to_string()));
        }
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(DecimalError::Invalid(s.to_string()));
        }
        if !int_part.chars().all(|c| c.is_ascii_digit()) {
            return Err(DecimalError::Invalid(s.to_string()));
        }
        if frac_part.len() as u32 > DECIMAL_SCALE {
            return Err(DecimalError::TooManyFractionalDigits(s.to_string()));
        }
        if s.contains('.') && frac_part.is_empty() {
            return Err(DecimalError::Invalid(s.to_string()));
        }
        if !frac_part.chars().all(|c| c.is_ascii_digit()) {
            return Err(DecimalError::Invalid(s.to_string()));
        }
        let int_value: i64 = if int_part.is_empty() {
            0
        } else {
            int_part
                .parse()
                .map_err(|_| DecimalError::Invalid(s.to_string()))?
        };
        let mut frac_value: i64 = 0;
        for c in frac_part.chars() {
            frac_value = frac_value * 10 + i64::from(c.to_digit(10).unwrap());
        }
        frac_value *= SCALE_FACTOR / 10_i64.pow(frac_part.len() as u32);
        int_value
            .checked_mul(SCALE_FACTOR)
            .and_then(|v| v.checked_add(frac_value))
            .map(FixedDecimal)
            .ok_or_else(|| DecimalError::Invalid(s.to_string()))
    }

    /// Parses a literal that may use either `.` or `,` as separator
    /// (`"0,83"` → `0.83`). Used where Portuguese comma renderings are legal.
    pub fn parse_lenient(s: &str) -> Result<Self, DecimalError> {
        Self::parse_canonical(&s.replace(',', "."))
    }

    /// Converts a binary float, accepting it only when it is (up to float
    /// noise) exactly representable with four fractional digits.
    pub fn try_from_f64(x: f64) -> Result<Self, DecimalError> {
        if !x.is_finite() {
            return Err(DecimalError::NotRepresentable(x));
        }
        if x < 0.0 {
            return Err(DecimalError::Negative(x.to_string()));
        }
        let scaled = x * SCALE_FACTOR as f64;
        if scaled > (i64::MAX / 2) as f64 {
            return Err(DecimalError::NotRepresentable(x));
        }
        let rounded = scaled.round();
        if (scaled - rounded).abs() > 1e-3 {
            return Err(DecimalError::NotRepresentable(x));
        }
        Ok(FixedDecimal(rounded as i64))
    }

    /// The nearest binary float; used only for rendering and JSON output,
    /// never for equality.
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE_FACTOR as f64
    }

    /// Integer part of the value.
    pub fn int_part(self) -> i64 {
        self.0 / SCALE_FACTOR
    }

    /// Fractional digits in canonical form (trailing zeros stripped),
    /// empty for whole numbers.
    pub fn frac_digits(self) -> String {
        let mut frac = format!("{:04}", self.0 % SCALE_FACTOR);
        while frac.ends_with('0') {
            frac.pop();
        }
        frac
    }
}

impl fmt::Display for FixedDecimal {
    /// Canonical rendering: `.` separator, trailing zeros stripped
    /// (`0.83`, `0.099`, `1`).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let frac = self.frac_digits();
        if frac.is_empty() {
            write!(f, "{}", self.int_part())
        } else {
            write!(f, "{}.{}", self.int_part(), frac)
        }
    }
}

impl fmt::Debug for FixedDecimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FixedDecimal({self})")
    }
}

impl FromStr for FixedDecimal {
    type Err = DecimalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_canonical(s)
    }
}

impl PartialOrd for FixedDecimal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FixedDecimal {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp(&other.0)
    }
}

impl Serialize for FixedDecimal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.to_f64())
    }
}

impl<'de> Deserialize<'de> for FixedDecimal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let x = f64::deserialize(deserializer)?;
        FixedDecimal::try_from_f64(x).map_err(de::Error::custom)
    }
}

/// Convenience constructor for literals in tests and fixtures: `dec("0.83")`.
/// Panics on malformed input, so keep it out of request-handling paths.
pub fn dec(s: &str) -> FixedDecimal {
    FixedDecimal::parse_canonical(s).unwrap_or_else(|e| panic!("bad decimal literal {s:?}: {e}"))
}

/// The two invasive physiology indices reported for coronary lesions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhysIndex {
    Ffr,
    Ifr,
}

impl PhysIndex {
    pub const ALL: [PhysIndex; 2] = [PhysIndex::Ffr, PhysIndex::Ifr];

    /// Clinical spelling used in report text and template keys.
    pub fn label(self) -> &'static str {
        match self {
            PhysIndex::Ffr => "FFR",
            PhysIndex::Ifr => "iFR",
        }
    }
}

impl fmt::Display for PhysIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The five vessel territories measurements are attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vessel {
    TroncoComum,
    DescendenteAnterior,
    Circunflexa,
    CoronariaDireita,
    OutrasArterias,
}

impl Vessel {
    pub const ALL: [Vessel; 5] = [
        Vessel::TroncoComum,
        Vessel::DescendenteAnterior,
        Vessel::Circunflexa,
        Vessel::CoronariaDireita,
        Vessel::OutrasArterias,
    ];

    /// Canonical display name, as used by the nested report template.
    pub fn canonical_name(self) -> &'static str {
        match self {
            Vessel::TroncoComum => "Tronco Comum",
            Vessel::DescendenteAnterior => "Descendente Anterior",
            Vessel::Circunflexa => "Circunflexa",
            Vessel::CoronariaDireita => "Coronária Direita",
            Vessel::OutrasArterias => "Outras artérias",
        }
    }

    /// Key fragment used by the flat template (`<fragment>_FFR` / `<fragment>_iFR`).
    pub fn flat_key_fragment(self) -> &'static str {
        match self {
            Vessel::TroncoComum => "Tronco_Comum",
            Vessel::DescendenteAnterior => "Descendente_Anterior",
            Vessel::Circunflexa => "Circunflexa",
            Vessel::CoronariaDireita => "Coronária_Direita",
            Vessel::OutrasArterias => "Outras_artérias",
        }
    }

    /// Short acronyms and alternative spellings seen in report prose.
    pub fn aliases(self) -> &'static [&'static str] {
        match self {
            Vessel::TroncoComum => &["TC", "tronco comum"],
            Vessel::DescendenteAnterior => &["DA", "descendente anterior", "coronária descendente anterior"],
            Vessel::Circunflexa => &["CX", "circunflexa", "artéria circunflexa"],
            Vessel::CoronariaDireita => &["CD", "coronária direita"],
            Vessel::OutrasArterias => &["primeira diagonal", "segunda marginal", "ramo intermédio"],
        }
    }

    /// Locative preposition agreeing with the vessel name ("no Tronco Comum",
    /// "na Descendente Anterior", "nas outras artérias").
    pub fn locative_preposition(self) -> &'static str {
        match self {
            Vessel::TroncoComum => "no",
            Vessel::OutrasArterias => "nas",
            _ => "na",
        }
    }
}

impl fmt::Display for Vessel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

/// One of the ten (vessel, index) measurement positions of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub vessel: Vessel,
    pub index: PhysIndex,
}

impl Slot {
    pub const fn new(vessel: Vessel, index: PhysIndex) -> Self {
        Slot { vessel, index }
    }

    /// All ten slots in template order: vessel-major, FFR before iFR.
    pub const ALL: [Slot; 10] = [
        Slot::new(Vessel::TroncoComum, PhysIndex::Ffr),
        Slot::new(Vessel::TroncoComum, PhysIndex::Ifr),
        Slot::new(Vessel::DescendenteAnterior, PhysIndex::Ffr),
        Slot::new(Vessel::DescendenteAnterior, PhysIndex::Ifr),
        Slot::new(Vessel::Circunflexa, PhysIndex::Ffr),
        Slot::new(Vessel::Circunflexa, PhysIndex::Ifr),
        Slot::new(Vessel::CoronariaDireita, PhysIndex::Ffr),
        Slot::new(Vessel::CoronariaDireita, PhysIndex::Ifr),
        Slot::new(Vessel::OutrasArterias, PhysIndex::Ffr),
        Slot::new(Vessel::OutrasArterias, PhysIndex::Ifr),
    ];

    /// Position of this slot inside [`Slot::ALL`].
    pub fn ordinal(self) -> usize {
        Slot::ALL
            .iter()
            .position(|s| *s == self)
            .expect("Slot::ALL covers all slots")
    }

    /// Flat template key, e.g. `Descendente_Anterior_FFR`.
    pub fn flat_key(self) -> String {
        format!("{}_{}", self.vessel.flat_key_fragment(), self.index.label())
    }

    /// Reverse lookup of [`Slot::flat_key`].
    pub fn from_flat_key(key: &str) -> Option<Slot> {
        Slot::ALL.iter().copied().find(|s| s.flat_key() == key)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.flat_key())
    }
}

/// A single attributed measurement: which index, which vessel, what value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub slot: Slot,
    pub value: FixedDecimal,
}

/// The ten optional measurement values of one report, either as annotated
/// ground truth or as a model extraction. Slot-wise comparison is exact
/// decimal equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhysiologyRecord {
    values: [Option<FixedDecimal>; 10],
}

impl PhysiologyRecord {
    /// A record with all ten slots absent.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, slot: Slot) -> Option<FixedDecimal> {
        self.values[slot.ordinal()]
    }

    pub fn set(&mut self, slot: Slot, value: Option<FixedDecimal>) {
        self.values[slot.ordinal()] = value;
    }

    pub fn with(mut self, slot: Slot, value: FixedDecimal) -> Self {
        self.set(slot, Some(value));
        self
    }

    /// Iterates the ten slots in template order with their current values.
    pub fn iter(&self) -> impl Iterator<Item = (Slot, Option<FixedDecimal>)> + '_ {
        Slot::ALL.iter().map(move |s| (*s, self.values[s.ordinal()]))
    }

    /// Slots currently holding a value, in template order.
    pub fn present(&self) -> Vec<Measurement> {
        self.iter()
            .filter_map(|(slot, v)| v.map(|value| Measurement { slot, value }))
            .collect()
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn absent_count(&self) -> usize {
        10 - self.present_count()
    }

    pub fn is_empty(&self) -> bool {
        self.present_count() == 0
    }
}

impl Serialize for PhysiologyRecord {
    /// Serializes as the flat ten-key object in template order; absent slots
    /// are explicit `null`s so the on-disk shape always matches the template.
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(10))?;
        for (slot, value) in self.iter() {
            map.serialize_entry(&slot.flat_key(), &value)?;
        }
        map.end()
    }
}

struct PhysiologyRecordVisitor;

impl<'de> Visitor<'de> for PhysiologyRecordVisitor {
    type Value = PhysiologyRecord;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("an object with the ten flat measurement keys mapping to numbers or nulls")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
        let mut record = PhysiologyRecord::empty();
        let mut seen = [false; 10];
        while let Some(key) = access.next_key::<String>()? {
            let slot = Slot::from_flat_key(&key)
                .ok_or_else(|| de::Error::custom(format!("unknown measurement key {key:?}")))?;
            if seen[slot.ordinal()] {
                return Err(de::Error::custom(format!("duplicate measurement key {key:?}")));
            }
            seen[slot.ordinal()] = true;
            let raw: serde_json::Value = access.next_value()?;
            let value = match raw {
                serde_json::Value::Null => None,
                serde_json::Value::Number(n) => {
                    let x = n.as_f64().ok_or_else(|| {
                        de::Error::custom(format!("value for {key} is not a finite number"))
                    })?;
                    Some(FixedDecimal::try_from_f64(x).map_err(|e| {
                        de::Error::custom(format!("value for {key} is not an admissible decimal: {e}"))
                    })?)
                }
                serde_json::Value::String(s) if s.contains(',') => {
                    return Err(de::Error::custom(format!(
                        "value for {key} is the string {s:?}: the decimal separator must be '.' and the value must be a JSON number"
                    )));
                }
                other => {
                    return Err(de::Error::custom(format!(
                        "value for {key} must be a JSON number or null, got {other}"
                    )));
                }
            };
            record.set(slot, value);
        }
        for slot in Slot::ALL {
            if !seen[slot.ordinal()] {
                return Err(de::Error::custom(format!(
                    "missing measurement key {:?}",
                    slot.flat_key()
                )));
            }
        }
        Ok(record)
    }
}

impl<'de> Deserialize<'de> for PhysiologyRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_map(PhysiologyRecordVisitor)
    }
}
