//! Prompt assembly: instruction fixtures, output templates, and worked
//! examples used when querying a report model.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::ReportRecord;
use crate::record::{dec, FixedDecimal, PhysiologyRecord, Slot, Vessel};

/// Marker in the instruction fixtures that is swapped for the report text.
pub const REPORT_PLACEHOLDER: &str = "|<REPORT>|";

const ZERO_SHOT_FLAT: &str = include_str!("../prompts/zero_shot_flat.txt");
const ZERO_SHOT_NESTED: &str = include_str!("../prompts/zero_shot_nested.txt");
const CONSTRAINED_FLAT: &str = include_str!("../prompts/constrained_flat.txt");
const CONSTRAINED_NESTED: &str = include_str!("../prompts/constrained_nested.txt");
const EXEMPLARS_JSONL: &str = include_str!("../prompts/exemplars.jsonl");

/// Shape of the JSON object the model is asked to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateVariant {
    /// One object with ten `Vessel_Index` keys.
    FlatKeys,
    /// One object with five vessel keys, each holding `{"FFR": .., "iFR": ..}`.
    NestedPerVessel,
}

impl TemplateVariant {
    pub const ALL: [TemplateVariant; 2] =
        [TemplateVariant::FlatKeys, TemplateVariant::NestedPerVessel];

    pub fn label(self) -> &'static str {
        match self {
            TemplateVariant::FlatKeys => "flat",
            TemplateVariant::NestedPerVessel => "nested",
        }
    }
}

impl fmt::Display for TemplateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TemplateVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(TemplateVariant::FlatKeys),
            "nested" => Ok(TemplateVariant::NestedPerVessel),
            other => Err(format!(
                "unknown template variant '{other}' (expected 'flat' or 'nested')"
            )),
        }
    }
}

/// How many worked examples accompany the instructions, and of what kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStrategy {
    /// Instructions only.
    ZeroShot,
    /// Instructions plus three worked examples with realistic values.
    FewShot,
    /// Same examples, but every demonstrated value is shifted far outside the
    /// physiological range so that copied values are detectable downstream.
    FewShotImplausible,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 3] = [
        PromptStrategy::ZeroShot,
        PromptStrategy::FewShot,
        PromptStrategy::FewShotImplausible,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "zero-shot",
            PromptStrategy::FewShot => "few-shot",
            PromptStrategy::FewShotImplausible => "few-shot-implausible",
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero-shot" => Ok(PromptStrategy::ZeroShot),
            "few-shot" => Ok(PromptStrategy::FewShot),
            "few-shot-implausible" => Ok(PromptStrategy::FewShotImplausible),
            other => Err(format!(
                "unknown prompt strategy '{other}' \
                 (expected 'zero-shot', 'few-shot' or 'few-shot-implausible')"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("the zero-shot strategy has no worked examples")]
    ZeroShotHasNoExemplars,
    #[error("instruction fixture must contain the report placeholder exactly once, found {count}")]
    PlaceholderCount { count: usize },
}

/// A worked example: a report together with the record it should yield.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub id: String,
    pub text: String,
    pub truth: PhysiologyRecord,
}

// ---------------------------------------------------------------------------
// Canonical filled-template rendering
// ---------------------------------------------------------------------------

/// Renders a value slot the way filled templates and decoded outputs print it.
pub fn value_text(value: Option<FixedDecimal>) -> String {
    match value {
        None => "null".to_string(),
        Some(v) => v.to_string(),
    }
}

/// The fixed text around the ten value slots of a filled template, in order.
/// There are always eleven segments; a complete output interleaves them with
/// the ten rendered values.
pub fn canonical_segments(variant: TemplateVariant) -> Vec<String> {
    match variant {
        TemplateVariant::FlatKeys => {
            let mut segments = Vec::with_capacity(11);
            for (pos, slot) in Slot::ALL.iter().enumerate() {
                let lead = if pos == 0 { "{\n" } else { ",\n" };
                segments.push(format!("{lead}  \"{}\": ", slot.flat_key()));
            }
            segments.push("\n}".to_string());
            segments
        }
        TemplateVariant::NestedPerVessel => {
            let mut segments = Vec::with_capacity(11);
            for (pos, vessel) in Vessel::ALL.iter().enumerate() {
                let lead = if pos == 0 { "{\n" } else { "\n  },\n" };
                segments.push(format!(
                    "{lead}  \"{}\": {{\n    \"FFR\": ",
                    vessel.canonical_name()
                ));
                segments.push(",\n    \"iFR\": ".to_string());
            }
            segments.push("\n  }\n}".to_string());
            segments
        }
    }
}

/// Renders a record as the canonical filled template for `variant`.
pub fn render_filled(variant: TemplateVariant, record: &PhysiologyRecord) -> String {
    let segments = canonical_segments(variant);
    let mut out = String::new();
    for (pos, slot) in Slot::ALL.iter().enumerate() {
        out.push_str(&segments[pos]);
        out.push_str(&value_text(record.get(*slot)));
    }
    out.push_str(&segments[10]);
    out
}

// ---------------------------------------------------------------------------
// Worked examples
// ---------------------------------------------------------------------------

fn base_exemplars() -> &'static [Exemplar] {
    static CACHE: OnceLock<Vec<Exemplar>> = OnceLock::new();
    CACHE.get_or_init(|| {
        EXEMPLARS_JSONL
            .lines()
            .filter(|line| !line.trim().is_empty())
            .map(|line| {
                let record: ReportRecord =
                    serde_json::from_str(line).expect("bundled exemplar line must parse");
                Exemplar {
                    id: record.id,
                    text: record.text,
                    truth: record.truth,
                }
            })
            .collect()
    })
}

/// Pairs of (demonstrated value, implausible stand-in) used by the
/// implausible-exemplar strategy.
pub fn implausible_pairs() -> [(FixedDecimal, FixedDecimal); 4] {
    [
        (dec("0.76"), dec("3.21")),
        (dec("0.89"), dec("5.48")),
        (dec("0.93"), dec("7.02")),
        (dec("0.81"), dec("9.64")),
    ]
}

/// The implausible stand-in values themselves, in demonstration order.
pub fn implausible_exemplar_values() -> Vec<FixedDecimal> {
    implausible_pairs().iter().map(|(_, to)| *to).collect()
}

fn comma_render(v: FixedDecimal) -> String {
    v.to_string().replace('.', ",")
}

fn make_implausible(exemplar: &Exemplar) -> Exemplar {
    let mut text = exemplar.text.clone();
    let mut truth = PhysiologyRecord::empty();
    for (slot, value) in exemplar.truth.iter() {
        let Some(value) = value else {
            continue;
        };
        let mut mapped = None;
        for (from, to) in implausible_pairs() {
            if from == value {
                mapped = Some(to);
                text = text.replace(&comma_render(from), &comma_render(to));
                text = text.replace(&from.to_string(), &to.to_string());
            }
        }
        truth.set(
            slot,
            Some(mapped.expect("every demonstrated value must have an implausible stand-in")),
        );
    }
    Exemplar {
        id: exemplar.id.clone(),
        text,
        truth,
    }
}

/// The worked examples for a strategy, values already transformed where the
/// strategy calls for it. The zero-shot strategy has none and is an error.
pub fn exemplar_records(strategy: PromptStrategy) -> Result<Vec<Exemplar>, PromptError> {
    match strategy {
        PromptStrategy::ZeroShot => Err(PromptError::ZeroShotHasNoExemplars),
        PromptStrategy::FewShot => Ok(base_exemplars().to_vec()),
        PromptStrategy::FewShotImplausible => {
            Ok(base_exemplars().iter().map(make_implausible).collect())
        }
    }
}

/// Worked examples rendered as (report text, filled template) pairs.
pub fn exemplar_set(
    strategy: PromptStrategy,
    variant: TemplateVariant,
) -> Result<Vec<(String, String)>, PromptError> {
    Ok(exemplar_records(strategy)?
        .into_iter()
        .map(|ex| {
            let filled = render_filled(variant, &ex.truth);
            (ex.text, filled)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Prompt assembly
// ---------------------------------------------------------------------------

/// The per-slot instruction used both in the constrained system text and as
/// the field description of the output schema.
pub fn slot_guidance(slot: Slot) -> String {
    format!(
        "Extrai o valor de {} {} {}. Extrair apenas o valor decimal. Nunca incluir valores não \
         presentes no relatório. Em caso de dúvida, preencher com null. Quando há mais de uma \
         medição, incluir o valor mais baixo.",
        slot.index.label(),
        slot.vessel.locative_preposition(),
        slot.vessel.canonical_name()
    )
}

fn instruction_fixture(variant: TemplateVariant) -> &'static str {
    match variant {
        TemplateVariant::FlatKeys => ZERO_SHOT_FLAT,
        TemplateVariant::NestedPerVessel => ZERO_SHOT_NESTED,
    }
}

fn exemplar_section(strategy: PromptStrategy, variant: TemplateVariant) -> Result<String, PromptError> {
    let mut section = String::from("Exemplos:\n\n");
    for (text, filled) in exemplar_set(strategy, variant)? {
        section.push_str("Relatório: ");
        section.push_str(&text);
        section.push_str("\nResposta:\n");
        section.push_str(&filled);
        section.push_str("\n\n");
    }
    Ok(section)
}

/// Builds the full prompt for one report.
pub fn build_prompt(
    strategy: PromptStrategy,
    variant: TemplateVariant,
    report_text: &str,
) -> Result<String, PromptError> {
    let fixture = instruction_fixture(variant);
    let count = fixture.matches(REPORT_PLACEHOLDER).count();
    if count != 1 {
        return Err(PromptError::PlaceholderCount { count });
    }
    let report_line = format!("Relatório: {REPORT_PLACEHOLDER}");
    let with_examples = match strategy {
        PromptStrategy::ZeroShot => fixture.to_string(),
        PromptStrategy::FewShot | PromptStrategy::FewShotImplausible => {
            let section = exemplar_section(strategy, variant)?;
            fixture.replacen(&report_line, &format!("{section}{report_line}"), 1)
        }
    };
    Ok(with_examples.replacen(REPORT_PLACEHOLDER, report_text, 1))
}

/// The fixed system text used when decoding is grammar-constrained. The
/// report is appended separately by the pipeline; this text never contains
/// the placeholder.
pub fn build_constrained_prompt(variant: TemplateVariant) -> &'static str {
    match variant {
        TemplateVariant::FlatKeys => CONSTRAINED_FLAT,
        TemplateVariant::NestedPerVessel => CONSTRAINED_NESTED,
    }
}

/// The full constrained-mode context for one report: system text, worked
/// examples when the strategy has them, then the report.
pub fn build_constrained_context(
    strategy: PromptStrategy,
    variant: TemplateVariant,
    report_text: &str,
) -> Result<String, PromptError> {
    let mut context = build_constrained_prompt(variant).to_string();
    if !matches!(strategy, PromptStrategy::ZeroShot) {
        context.push_str(&exemplar_section(strategy, variant)?);
    }
    context.push_str("Relatório: ");
    context.push_str(report_text);
    context.push('\n');
    Ok(context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{PhysIndex, Vessel};

    const FLAT_BLOCK: &str = "    {\n    \"Tronco_Comum_FFR\": null,\n    \"Tronco_Comum_iFR\": null,\n    \"Descendente_Anterior_FFR\": null,    \n    \"Descendente_Anterior_iFR\": null, \n    \"Circunflexa_FFR\": null,\n    \"Circunflexa_iFR\": null,\n    \"Coronária_Direita_FFR\": null,\n    \"Coronária_Direita_iFR\": null,\n    \"Outras_artérias_FFR\": null,\n    \"Outras_artérias_iFR\": null\n    }\n";

    const NESTED_BLOCK: &str = "    {\n    \"Tronco Comum\": {\n      \"FFR\": null,\n      \"iFR\": null\n    },\n    \"Descendente Anterior\": {\n      \"FFR\": null,\n      \"iFR\": null\n    },\n    \"Circunflexa\": {\n      \"FFR\": null,\n      \"iFR\": null\n    },\n    \"Coronária Direita\": {\n      \"FFR\": null,\n      \"iFR\": null\n    },\n    \"Outras artérias\": {\n      \"FFR\": null,\n      \"iFR\": null\n    }\n    }\n";

    #[test]
    fn zero_shot_flat_is_fixture_with_report_substituted() {
        let report = "Texto de teste.";
        let prompt = build_prompt(PromptStrategy::ZeroShot, TemplateVariant::FlatKeys, report)
            .unwrap();
        assert_eq!(prompt, ZERO_SHOT_FLAT.replacen(REPORT_PLACEHOLDER, report, 1));
        assert!(!prompt.contains(REPORT_PLACEHOLDER));
        assert!(prompt.contains("Relatório: Texto de teste."));
    }

    #[test]
    fn fixtures_contain_placeholder_exactly_once() {
        for fixture in [ZERO_SHOT_FLAT, ZERO_SHOT_NESTED] {
            assert_eq!(fixture.matches(REPORT_PLACEHOLDER).count(), 1);
        }
        for fixture in [CONSTRAINED_FLAT, CONSTRAINED_NESTED] {
            assert_eq!(fixture.matches(REPORT_PLACEHOLDER).count(), 0);
        }
    }

    #[test]
    fn flat_fixture_anchors() {
        assert!(ZERO_SHOT_FLAT.starts_with("És um especialista em relatórios"));
        for slot in Slot::ALL {
            assert!(
                ZERO_SHOT_FLAT.contains(&format!("\"{}\": null", slot.flat_key())),
                "missing template line for {}",
                slot.flat_key()
            );
        }
        assert!(ZERO_SHOT_FLAT.contains("mantém \"null\""));
        assert!(ZERO_SHOT_FLAT.contains("A tua resposta deve ser um JSON válido."));
        assert!(ZERO_SHOT_FLAT.trim_end().ends_with("inclui o valor mais baixo."));
    }

    #[test]
    fn flat_and_nested_fixtures_differ_only_in_template_block() {
        assert!(ZERO_SHOT_FLAT.contains(FLAT_BLOCK));
        assert!(ZERO_SHOT_NESTED.contains(NESTED_BLOCK));
        assert_eq!(
            ZERO_SHOT_FLAT.replacen(FLAT_BLOCK, NESTED_BLOCK, 1),
            ZERO_SHOT_NESTED
        );
    }

    #[test]
    fn prompt_build_is_deterministic() {
        for strategy in PromptStrategy::ALL {
            for variant in TemplateVariant::ALL {
                let a = build_prompt(strategy, variant, "Relato.").unwrap();
                let b = build_prompt(strategy, variant, "Relato.").unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn few_shot_embeds_examples_before_the_report() {
        let prompt =
            build_prompt(PromptStrategy::FewShot, TemplateVariant::FlatKeys, "RELATO FINAL")
                .unwrap();
        assert!(prompt.contains("Exemplos:"));
        for ex in exemplar_records(PromptStrategy::FewShot).unwrap() {
            assert!(prompt.contains(&ex.text), "missing exemplar {}", ex.id);
        }
        assert!(prompt.contains("\"Descendente_Anterior_FFR\": 0.76"));
        let examples_at = prompt.find("Exemplos:").unwrap();
        let report_at = prompt.find("RELATO FINAL").unwrap();
        assert!(examples_at < report_at);
        let zero = build_prompt(PromptStrategy::ZeroShot, TemplateVariant::FlatKeys, "x").unwrap();
        assert!(!zero.contains("Exemplos:"));
    }

    #[test]
    fn implausible_examples_swap_every_value_in_text_and_truth() {
        let base = exemplar_records(PromptStrategy::FewShot).unwrap();
        let swapped = exemplar_records(PromptStrategy::FewShotImplausible).unwrap();
        assert_eq!(base.len(), 3);
        assert_eq!(swapped.len(), 3);
        let pairs = implausible_pairs();
        for (b, s) in base.iter().zip(&swapped) {
            assert_eq!(b.id, s.id);
            assert_eq!(b.truth.present_count(), s.truth.present_count());
            for (slot, value) in b.truth.iter() {
                let Some(value) = value else { continue };
                let mapped = pairs
                    .iter()
                    .find(|(from, _)| *from == value)
                    .map(|(_, to)| *to)
                    .unwrap();
                assert_eq!(s.truth.get(slot), Some(mapped));
                assert!(s.text.contains(&comma_render(mapped)));
                assert!(!s.text.contains(&comma_render(value)));
            }
        }
        let prompt = build_prompt(
            PromptStrategy::FewShotImplausible,
            TemplateVariant::FlatKeys,
            "x",
        )
        .unwrap();
        assert!(prompt.contains("3,21"));
        assert!(prompt.contains("\"Descendente_Anterior_FFR\": 3.21"));
        assert!(!prompt.contains("0,76"));
    }

    #[test]
    fn exemplar_values_appear_in_their_own_text() {
        for strategy in [PromptStrategy::FewShot, PromptStrategy::FewShotImplausible] {
            for ex in exemplar_records(strategy).unwrap() {
                for (_, value) in ex.truth.iter() {
                    let Some(value) = value else { continue };
                    assert!(
                        ex.text.contains(&comma_render(value)),
                        "{}: value {} not in text",
                        ex.id,
                        value
                    );
                }
            }
        }
    }

    #[test]
    fn exemplar_ids_cannot_collide_with_generated_ids() {
        for ex in base_exemplars() {
            assert!(ex.id.starts_with("exemplar-"));
        }
    }

    #[test]
    fn zero_shot_has_no_exemplars() {
        assert_eq!(
            exemplar_records(PromptStrategy::ZeroShot),
            Err(PromptError::ZeroShotHasNoExemplars)
        );
        assert_eq!(
            exemplar_set(PromptStrategy::ZeroShot, TemplateVariant::FlatKeys),
            Err(PromptError::ZeroShotHasNoExemplars)
        );
    }

    #[test]
    fn rendered_flat_template_is_valid_json_and_round_trips() {
        let record = PhysiologyRecord::empty()
            .with(Slot::new(Vessel::DescendenteAnterior, PhysIndex::Ffr), dec("0.83"))
            .with(Slot::new(Vessel::CoronariaDireita, PhysIndex::Ifr), dec("0.9"));
        let rendered = render_filled(TemplateVariant::FlatKeys, &record);
        assert!(rendered.starts_with("{\n  \"Tronco_Comum_FFR\": null,\n"));
        assert!(rendered.contains("\n  \"Descendente_Anterior_FFR\": 0.83,\n"));
        assert!(rendered.ends_with("\n  \"Outras_artérias_iFR\": null\n}"));
        let parsed: PhysiologyRecord = serde_json::from_str(&rendered).unwrap();
        assert_eq!(parsed, record);
    }

    #[test]
    fn rendered_nested_template_is_valid_json_with_expected_shape() {
        let record = PhysiologyRecord::empty()
            .with(Slot::new(Vessel::Circunflexa, PhysIndex::Ffr), dec("0.81"));
        let rendered = render_filled(TemplateVariant::NestedPerVessel, &record);
        let parsed: serde_json::Value = serde_json::from_str(&rendered).unwrap();
        let object = parsed.as_object().unwrap();
        assert_eq!(object.len(), 5);
        let keys: Vec<&str> = object.keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            vec![
                "Tronco Comum",
                "Descendente Anterior",
                "Circunflexa",
                "Coronária Direita",
                "Outras artérias"
            ]
        );
        for (vessel, fields) in object {
            let fields = fields.as_object().unwrap();
            assert_eq!(
                fields.keys().collect::<Vec<_>>(),
                vec!["FFR", "iFR"],
                "bad subfields for {vessel}"
            );
        }
        assert_eq!(object["Circunflexa"]["FFR"], serde_json::json!(0.81));
        assert!(object["Circunflexa"]["iFR"].is_null());
    }

    #[test]
    fn canonical_segments_interleave_cleanly() {
        for variant in TemplateVariant::ALL {
            let segments = canonical_segments(variant);
            assert_eq!(segments.len(), 11);
            let empty = render_filled(variant, &PhysiologyRecord::empty());
            assert_eq!(empty.matches("null").count(), 10);
            let total: usize = segments.iter().map(String::len).sum();
            assert_eq!(empty.len(), total + 10 * "null".len());
        }
    }

    #[test]
    fn constrained_prompt_carries_field_guidance() {
        let flat = build_constrained_prompt(TemplateVariant::FlatKeys);
        assert!(flat.contains("angioplastia.O relatório"));
        assert!(flat.contains("Dá como output um JSON válido."));
        for slot in Slot::ALL {
            assert!(
                flat.contains(&format!("{}: Extrai o valor de", slot.flat_key())),
                "missing guidance line for {}",
                slot.flat_key()
            );
        }
        assert!(flat.contains("Extrai o valor de FFR no Tronco Comum."));
        assert!(flat.contains("Quando há mais de uma medição, incluir o valor mais baixo."));
        for slot in Slot::ALL {
            assert!(
                flat.contains(&format!("{}: {}", slot.flat_key(), slot_guidance(slot))),
                "fixture line out of sync with guidance for {}",
                slot.flat_key()
            );
        }
        let nested = build_constrained_prompt(TemplateVariant::NestedPerVessel);
        assert!(nested.contains("Tronco Comum / FFR: Extrai o valor de FFR no Tronco Comum."));
    }

    #[test]
    fn constrained_context_appends_examples_and_report() {
        let context = build_constrained_context(
            PromptStrategy::FewShot,
            TemplateVariant::FlatKeys,
            "TEXTO DO RELATO",
        )
        .unwrap();
        assert!(context.starts_with(CONSTRAINED_FLAT));
        assert!(context.contains("Exemplos:"));
        assert!(context.trim_end().ends_with("Relatório: TEXTO DO RELATO"));
        let zero = build_constrained_context(
            PromptStrategy::ZeroShot,
            TemplateVariant::FlatKeys,
            "TEXTO",
        )
        .unwrap();
        assert!(!zero.contains("Exemplos:"));
    }
}
