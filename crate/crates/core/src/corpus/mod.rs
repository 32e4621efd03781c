//! Synthetic corpus of Portuguese coronary-angiography (CAG) reports with
//! slot-level ground truth: generation, JSONL persistence, and the embedded
//! single-report reference fixture used throughout the test suite.

mod generator;
mod io;

pub use generator::{generate_corpus, GeneratorConfig, PresenceMarginals};
pub use io::{corpus_fingerprint, load_corpus, save_corpus};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::postprocess::TypoClass;
use crate::record::{dec, FixedDecimal, PhysIndex, PhysiologyRecord, Slot, Vessel};

/// One synthetic report: free-text body plus its annotated measurement truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub id: String,
    pub text: String,
    pub truth: PhysiologyRecord,
    pub meta: ReportMeta,
}

/// Markup describing what the generator injected into a report, so tests and
/// scripted models can act on artifacts without re-parsing the prose.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMeta {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<ArtifactNote>,
    #[serde(default)]
    pub word_count: usize,
}

impl ReportMeta {
    /// Artifacts attached to a particular measurement slot.
    pub fn artifacts_for(&self, slot: Slot) -> impl Iterator<Item = &ArtifactNote> {
        let key = slot.flat_key();
        self.artifacts.iter().filter(move |a| a.slot == key)
    }
}

/// A single injected artifact, keyed by the flat slot name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactNote {
    pub slot: String,
    #[serde(flatten)]
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArtifactKind {
    /// The slot's value was rendered as a mangled fragment instead of a
    /// well-formed decimal; `rendered` is the exact fragment placed in the text.
    Typo { class: TypoClass, rendered: String },
    /// The slot rendered several measurements; truth is their minimum.
    MultiMeasurement { rendered: Vec<FixedDecimal> },
    /// The vessel was mentioned by an alias rather than its canonical name.
    Alias { mention: String },
}

/// Errors raised while reading or writing corpus files.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to {action} corpus file {path}: {source}")]
    Io {
        action: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus file {path}, line {line}: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("corpus file {path}, line {line}: duplicate report id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        path: String,
        line: usize,
        first_line: usize,
        id: String,
    },
}

/// Verbatim body of the worked single-report example; the functional
/// assessment section carries the report's only measurement, FFR 0.83 on the
/// Descendente Anterior.
pub const REPORT_1_TEXT: &str = "CORONARIOGRAFIA. Tronco comum sem lesões. Descendente anterior com lesão longa ligeira a moderada no segmento proximal e médio. Lesão grave, curta, no segmento distal, junto ao apex. Circunflexa dominante com ligeiras irregularidades. Coronária direita de pequeno calibre, não dominante, com lesão crítica no segmento proximal e médio provavelmente culpável pelo síndrome coronário agudo. AVALIAÇÃO FUNCIONAL DA LESÃO LONGA DO SEGMENTO PROXIMAL E MÉDIO DA DESCENDENTE ANTERIOR: Anticoagulação com heparina. Cateter JR 3.5 SH. Fio guia Pressurewire. Adenosia por via endovenosa periférica. FFR 0.83 (não significativo). Hemostase do ponto de acesso vascular por compressão. CONCLUSÃO: Doença coronária grave no segmento distal da descendente anterior e coronária direita não-dominante que não justificam intervenção. Lesão longa no segmento proximal e médio da descendente anterior, funcionalmente não significativa. Boa função ventricular esquerda sem alterações segmentares. Terapêutica médica.";

/// Identifier of the embedded reference report.
pub const REPORT_1_ID: &str = "report-1";

/// Returns the embedded reference report. Its truth holds exactly one value:
/// FFR 0.83 on the Descendente Anterior; the nine other slots are absent.
pub fn embed_report_1() -> ReportRecord {
    let truth = PhysiologyRecord::empty().with(
        Slot::new(Vessel::DescendenteAnterior, PhysIndex::Ffr),
        dec("0.83"),
    );
    ReportRecord {
        id: REPORT_1_ID.to_string(),
        text: REPORT_1_TEXT.to_string(),
        truth,
        meta: ReportMeta {
            artifacts: Vec::new(),
            word_count: REPORT_1_TEXT.split_whitespace().count(),
        },
    }
}
