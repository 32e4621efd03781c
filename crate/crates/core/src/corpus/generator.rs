//! Deterministic generator of synthetic Portuguese CAG reports.
//!
//! Every report is assembled from a fixed sentence inventory: an angiography
//! description, functional-assessment chunks carrying the FFR/iFR
//! measurements, neutral procedural filler, and a conclusion. All randomness
//! flows from one seeded ChaCha stream, so a configuration reproduces its
//! corpus byte-for-byte. Injected artifacts (typos, aliases, repeated
//! measurements) are recorded in each report's meta block.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::postprocess::TypoClass;
use crate::record::{FixedDecimal, PhysiologyRecord, Slot, Vessel};

use super::{ArtifactKind, ArtifactNote, ReportMeta, ReportRecord};

/// Per-slot presence probabilities, addressed in template order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresenceMarginals([f64; 10]);

impl PresenceMarginals {
    pub fn uniform(p: f64) -> Self {
        PresenceMarginals([p; 10])
    }

    pub fn get(&self, slot: Slot) -> f64 {
        self.0[slot.ordinal()]
    }

    pub fn set(&mut self, slot: Slot, p: f64) {
        self.0[slot.ordinal()] = p;
    }

    /// Expected fraction of the ten slots that hold a value.
    pub fn expected_present_fraction(&self) -> f64 {
        self.0.iter().sum::<f64>() / 10.0
    }

    /// Marginals matching the published per-vessel measurement counts over a
    /// 1342-report corpus (e.g. iFR on the Descendente Anterior in 720 of
    /// 1342 reports). With these, about 86.4% of all slots are absent.
    pub fn clinical_defaults() -> Self {
        const COUNTS: [f64; 10] = [
            16.0,  // Tronco Comum FFR
            32.0,  // Tronco Comum iFR
            387.0, // Descendente Anterior FFR
            720.0, // Descendente Anterior iFR
            91.0,  // Circunflexa FFR
            188.0, // Circunflexa iFR
            95.0,  // Coronária Direita FFR
            224.0, // Coronária Direita iFR
            14.0,  // Outras artérias FFR
            54.0,  // Outras artérias iFR
        ];
        let mut m = [0.0; 10];
        for (i, c) in COUNTS.iter().enumerate() {
            m[i] = c / 1342.0;
        }
        PresenceMarginals(m)
    }
}

impl Serialize for PresenceMarginals {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(10))?;
        for slot in Slot::ALL {
            map.serialize_entry(&slot.flat_key(), &self.get(slot))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for PresenceMarginals {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = std::collections::BTreeMap::<String, f64>::deserialize(deserializer)?;
        let mut m = PresenceMarginals([0.0; 10]);
        for (key, p) in &raw {
            let slot = Slot::from_flat_key(key)
                .ok_or_else(|| D::Error::custom(format!("unknown slot key {key:?}")))?;
            m.set(slot, *p);
        }
        for slot in Slot::ALL {
            if !raw.contains_key(&slot.flat_key()) {
                return Err(D::Error::custom(format!(
                    "missing marginal for slot {:?}",
                    slot.flat_key()
                )));
            }
        }
        Ok(m)
    }
}

/// Configuration of one corpus generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of reports to generate; must be positive.
    pub report_count: usize,
    /// Per-slot probability that a measurement is present.
    pub presence: PresenceMarginals,
    /// Optional sanity anchor: expected fraction of absent slots. When set,
    /// configuration validation requires it to agree with `presence`.
    pub target_missing_rate: Option<f64>,
    /// Probability that a present single-measurement slot is rendered as a
    /// mangled fragment instead of a clean decimal.
    pub typo_rate: f64,
    /// Probability that a vessel is mentioned by an alias (e.g. "DA").
    pub alias_rate: f64,
    /// Probability that a present slot renders two measurements; the truth is
    /// then their minimum.
    pub multi_measurement_rate: f64,
    /// Probability that a decimal is rendered with a `.` separator instead of
    /// the Portuguese default `,`.
    pub dot_separator_rate: f64,
    /// Inclusive bounds on report length in words.
    pub min_words: usize,
    pub max_words: usize,
    /// Seed of the single ChaCha stream driving all sampling.
    pub seed: u64,
}

impl GeneratorConfig {
    /// Defaults mirroring the published corpus statistics: clinical presence
    /// marginals, 86.4% expected absence, report length 12..=667 words.
    pub fn clinical_defaults(report_count: usize, seed: u64) -> Self {
        GeneratorConfig {
            report_count,
            presence: PresenceMarginals::clinical_defaults(),
            target_missing_rate: Some(0.864),
            typo_rate: 0.05,
            alias_rate: 0.30,
            multi_measurement_rate: 0.10,
            dot_separator_rate: 0.25,
            min_words: 12,
            max_words: 667,
            seed,
        }
    }

    /// Same defaults but with no typos, aliases, or repeated measurements:
    /// every truth value appears verbatim (modulo separator choice) in the
    /// report body.
    pub fn clean_defaults(report_count: usize, seed: u64) -> Self {
        GeneratorConfig {
            typo_rate: 0.0,
            alias_rate: 0.0,
            multi_measurement_rate: 0.0,
            ..Self::clinical_defaults(report_count, seed)
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorConfigError> {
        if self.report_count == 0 {
            return Err(GeneratorConfigError::field(
                "report_count",
                "must be positive",
            ));
        }
        let rates = [
            ("typo_rate", self.typo_rate),
            ("alias_rate", self.alias_rate),
            ("multi_measurement_rate", self.multi_measurement_rate),
            ("dot_separator_rate", self.dot_separator_rate),
        ];
        for (name, value) in rates {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(GeneratorConfigError::field(name, "must lie in [0, 1]"));
            }
        }
        for slot in Slot::ALL {
            let p = self.presence.get(slot);
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(GeneratorConfigError::Field {
                    field: "presence",
                    message: format!("marginal for {} must lie in [0, 1]", slot.flat_key()),
                });
            }
        }
        if self.min_words == 0 {
            return Err(GeneratorConfigError::field("min_words", "must be positive"));
        }
        if self.min_words > self.max_words {
            return Err(GeneratorConfigError::field(
                "max_words",
                "must be at least min_words",
            ));
        }
        if let Some(target) = self.target_missing_rate {
            if !(0.0..=1.0).contains(&target) {
                return Err(GeneratorConfigError::field(
                    "target_missing_rate",
                    "must lie in [0, 1]",
                ));
            }
            let implied = 1.0 - self.presence.expected_present_fraction();
            if (implied - target).abs() > 0.02 {
                return Err(GeneratorConfigError::Field {
                    field: "target_missing_rate",
                    message: format!(
                        "inconsistent with presence marginals: they imply an absent fraction of {implied:.4}, target is {target:.4}"
                    ),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeneratorConfigError {
    #[error("generator configuration field `{field}` {message}")]
    Field { field: &'static str, message: String },
}

impl GeneratorConfigError {
    fn field(field: &'static str, message: &str) -> Self {
        GeneratorConfigError::Field {
            field,
            message: message.to_string(),
        }
    }
}

/// Generates a corpus. Deterministic: equal configurations yield equal
/// corpora, byte for byte once serialized. Generation is sequential by
/// design — the single RNG stream is the reproducibility anchor.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<ReportRecord>, GeneratorConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.report_count);
    for i in 0..cfg.report_count {
        reports.push(generate_report(format!("r{i:05}"), cfg, &mut rng));
    }
    Ok(reports)
}

// ── Sentence inventory ──────────────────────────────────────────────────────

const OPENINGS: &[&str] = &["CORONARIOGRAFIA.", "CORONARIOGRAFIA DIAGNÓSTICA."];

/// Angiographic description sentences; `{V}` is the capitalized vessel name.
/// Deliberately digit-free so they can never be mistaken for measurements.
const DESCRIPTIVE: &[&str] = &[
    "{V} sem lesões.",
    "{V} sem lesões significativas.",
    "{V} com irregularidades parietais ligeiras.",
    "{V} com lesão ligeira no segmento proximal.",
    "{V} de bom calibre, sem estenoses.",
];

/// Procedure narration placed between a functional-assessment header and its
/// measurement. Kept short and vessel-free so the header stays the nearest
/// vessel mention for the value that follows (under 120 characters away).
const PROCEDURE: &str = "Anticoagulação com heparina. Fio guia Pressurewire. Adenosina por via endovenosa.";

/// Neutral narrative filler used for length padding. No digits and no vessel
/// mentions, so padding can never disturb measurement attribution.
const FILLER: &[&str] = &[
    "Acesso radial com introdutor de calibre habitual.",
    "Procedimento realizado sob monitorização eletrocardiográfica contínua.",
    "Sem complicações imediatas no decurso do exame.",
    "Hemostase do ponto de acesso vascular por compressão manual.",
    "Boa função ventricular esquerda sem alterações segmentares.",
    "Doente manteve-se hemodinamicamente estável durante todo o exame.",
    "Sem intercorrências hemodinâmicas relevantes.",
    "Administrada profilaxia antiemética conforme protocolo.",
    "Doente encaminhado para a unidade de cuidados intermédios.",
    "Recomendado controlo clínico em consulta de cardiologia.",
    "Terapêutica médica otimizada em ambulatório.",
    "Reforçada a importância da adesão terapêutica.",
];

const CONCLUSIONS: &[&str] = &[
    "CONCLUSÃO: Doença coronária sem critérios de intervenção imediata. Terapêutica médica.",
    "CONCLUSÃO: Avaliação funcional sem critérios de significado hemodinâmico. Orientação clínica.",
    "CONCLUSÃO: Exame sem indicação para revascularização. Terapêutica médica otimizada.",
];

/// Uppercase genitive vessel form for the assessment header
/// ("AVALIAÇÃO FUNCIONAL ... DO SEGMENTO PROXIMAL <genitive>:").
fn genitive_upper(vessel: Vessel) -> &'static str {
    match vessel {
        Vessel::TroncoComum => "DO TRONCO COMUM",
        Vessel::DescendenteAnterior => "DA DESCENDENTE ANTERIOR",
        Vessel::Circunflexa => "DA CIRCUNFLEXA",
        Vessel::CoronariaDireita => "DA CORONÁRIA DIREITA",
        Vessel::OutrasArterias => "DA PRIMEIRA DIAGONAL",
    }
}

/// Preposition for "in/on the <mention>", agreeing with the rendered mention.
fn preposition_for(vessel: Vessel, mention: &str) -> &'static str {
    match vessel {
        Vessel::TroncoComum => "no",
        Vessel::OutrasArterias if mention.starts_with("outras") => "nas",
        Vessel::OutrasArterias => "na",
        _ => "na",
    }
}

// ── Value sampling and rendering ────────────────────────────────────────────

fn scaled(d_tenths: i64, d_hundredths: i64, d_thousandths: i64) -> FixedDecimal {
    FixedDecimal::from_scaled(d_tenths * 1000 + d_hundredths * 100 + d_thousandths * 10)
        .expect("digit-built values are non-negative")
}

/// A plausible physiology value: 0.41–0.99 with two fractional digits, or
/// occasionally three. The last rendered digit is never zero, so the
/// canonical display equals the rendered digit string.
fn sample_plain_value(rng: &mut ChaCha8Rng) -> FixedDecimal {
    if rng.gen_bool(0.15) {
        scaled(
            rng.gen_range(4..=9),
            rng.gen_range(0..=9),
            rng.gen_range(1..=9),
        )
    } else {
        scaled(rng.gen_range(4..=9), rng.gen_range(1..=9), 0)
    }
}

/// A sub-0.1 value of the form 0.0XY, the shape involved in wrong-separator
/// typos (e.g. ",099" for 0.099).
fn sample_low_value(rng: &mut ChaCha8Rng) -> FixedDecimal {
    scaled(0, rng.gen_range(1..=9), rng.gen_range(1..=9))
}

fn render_value(v: FixedDecimal, sep: char) -> String {
    v.to_string().replace('.', &sep.to_string())
}

/// Produces the mangled textual fragment for a typo class. The fragment's
/// typo-tolerant normalization recovers `v` exactly, which keeps the
/// annotated truth consistent with the text.
fn mangle(class: TypoClass, v: FixedDecimal, sep: char) -> String {
    let frac = v.frac_digits();
    match class {
        TypoClass::MissingZero => format!("{sep}{frac}"),
        TypoClass::MissingComma => format!("0{frac}"),
        TypoClass::ExtraSpace => format!("0{sep} {frac}"),
        TypoClass::WrongCommaPlacing => format!("{sep}{frac}"),
        TypoClass::RepeatedZeroPunct => {
            let other = if sep == ',' { '.' } else { ',' };
            format!("0{sep}0{other}{frac}")
        }
    }
}

/// Samples a value whose shape suits the typo class: wrong-separator typos
/// need the 0.0XY form, the rest use ordinary two/three-digit values.
fn sample_value_for_typo(class: TypoClass, rng: &mut ChaCha8Rng) -> FixedDecimal {
    match class {
        TypoClass::WrongCommaPlacing => sample_low_value(rng),
        _ => sample_plain_value(rng),
    }
}

// ── Report assembly ─────────────────────────────────────────────────────────

struct RenderedSlot {
    chunk: String,
    truth: FixedDecimal,
    artifacts: Vec<ArtifactNote>,
}

/// Renders one present slot into a measurement chunk. Each chunk is atomic:
/// it contains exactly one vessel attribution (in-sentence or as a section
/// header) and no other vessel mention, so extraction can always bind the
/// value to the intended vessel.
fn render_slot(slot: Slot, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> RenderedSlot {
    let idx = slot.index.label();
    let sep = if rng.gen_bool(cfg.dot_separator_rate) { '.' } else { ',' };
    let is_typo = rng.gen_bool(cfg.typo_rate);
    let is_multi = !is_typo && rng.gen_bool(cfg.multi_measurement_rate);
    let use_alias = rng.gen_bool(cfg.alias_rate);

    let mut artifacts = Vec::new();
    let (mention, was_alias) = if use_alias && !slot.vessel.aliases().is_empty() {
        let aliases = slot.vessel.aliases();
        let mention = aliases[rng.gen_range(0..aliases.len())].to_string();
        (mention, true)
    } else {
        (slot.vessel.canonical_name().to_lowercase(), false)
    };
    if was_alias {
        artifacts.push(ArtifactNote {
            slot: slot.flat_key(),
            kind: ArtifactKind::Alias {
                mention: mention.clone(),
            },
        });
    }
    let prep = preposition_for(slot.vessel, &mention);
    let initial = capitalize_first(&mention);

    if is_multi {
        let low = scaled(rng.gen_range(4..=8), rng.gen_range(1..=9), 0);
        let delta = rng.gen_range(1..=10) * 100;
        let high = FixedDecimal::from_scaled(low.scaled() + delta).expect("sum of positives");
        let (first, second) = if rng.gen_bool(0.5) { (low, high) } else { (high, low) };
        let (v1, v2) = (render_value(first, sep), render_value(second, sep));
        let chunk = match rng.gen_range(0..2) {
            0 => format!("{idx} {v1} e {v2} {prep} {mention}."),
            _ => format!(
                "Medição de {idx} {prep} {mention}: primeira medição {v1}, repetida medição {v2}."
            ),
        };
        artifacts.push(ArtifactNote {
            slot: slot.flat_key(),
            kind: ArtifactKind::MultiMeasurement {
                rendered: vec![first, second],
            },
        });
        return RenderedSlot {
            chunk,
            truth: low,
            artifacts,
        };
    }

    let (truth, fragment) = if is_typo {
        let class = TypoClass::ALL[rng.gen_range(0..TypoClass::ALL.len())];
        let value = sample_value_for_typo(class, rng);
        let fragment = mangle(class, value, sep);
        artifacts.push(ArtifactNote {
            slot: slot.flat_key(),
            kind: ArtifactKind::Typo {
                class,
                rendered: fragment.clone(),
            },
        });
        (value, fragment)
    } else {
        let value = sample_plain_value(rng);
        (value, render_value(value, sep))
    };

    // The header template never uses an alias; skip it when one was rolled.
    let template_count = if was_alias || is_typo { 5 } else { 6 };
    let chunk = match rng.gen_range(0..template_count) {
        0 => format!("{idx} {fragment} {prep} {mention}."),
        1 => format!("{idx} de {fragment} {prep} {mention}."),
        2 => format!("{initial} com {idx} {fragment}."),
        3 => format!("Medição de {idx} {prep} {mention}: {fragment}."),
        4 => format!("{initial} apresenta {idx} de {fragment}."),
        _ => format!(
            "AVALIAÇÃO FUNCIONAL DA LESÃO DO SEGMENTO PROXIMAL {}: {PROCEDURE} {idx} {fragment} (não significativo).",
            genitive_upper(slot.vessel)
        ),
    };
    RenderedSlot {
        chunk,
        truth,
        artifacts,
    }
}

fn generate_report(id: String, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> ReportRecord {
    let mut truth = PhysiologyRecord::empty();
    let mut artifacts = Vec::new();
    let mut body: Vec<String> = Vec::new();

    body.push(OPENINGS[rng.gen_range(0..OPENINGS.len())].to_string());

    let descriptive_vessels = [
        Vessel::TroncoComum,
        Vessel::DescendenteAnterior,
        Vessel::Circunflexa,
        Vessel::CoronariaDireita,
    ];
    let described = rng.gen_range(2..=4usize);
    for vessel in descriptive_vessels.into_iter().take(described) {
        let template = DESCRIPTIVE[rng.gen_range(0..DESCRIPTIVE.len())];
        body.push(template.replace("{V}", &capitalize_first(&vessel.canonical_name().to_lowercase())));
    }

    for slot in Slot::ALL {
        if !rng.gen_bool(cfg.presence.get(slot)) {
            continue;
        }
        let rendered = render_slot(slot, cfg, rng);
        body.push(rendered.chunk);
        artifacts.extend(rendered.artifacts);
        truth.set(slot, Some(rendered.truth));
    }

    let conclusion = CONCLUSIONS[rng.gen_range(0..CONCLUSIONS.len())].to_string();
    let desired = rng.gen_range(cfg.min_words..=cfg.max_words);
    let mut words = body.iter().map(|s| word_count(s)).sum::<usize>() + word_count(&conclusion);
    while words < desired {
        let filler = FILLER[rng.gen_range(0..FILLER.len())];
        let w = word_count(filler);
        if words + w > cfg.max_words {
            break;
        }
        body.push(filler.to_string());
        words += w;
    }
    body.push(conclusion);

    let text = body.join(" ");
    let word_count = text.split_whitespace().count();
    ReportRecord {
        id,
        text,
        truth,
        meta: ReportMeta {
            artifacts,
            word_count,
        },
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}
