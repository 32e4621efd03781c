//! Deterministic scripted models for desk-scale verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ArtifactKind, ReportRecord};
use crate::model::{
    CompletionRequest, ModelError, ReportModel, StepperError, TokenStepper,
};
use crate::prompting::{canonical_segments, render_filled, TemplateVariant};
use crate::record::{FixedDecimal, PhysiologyRecord, Slot};

/// What the prose-refusing mock always answers. Contains no digits and no
/// braces, so it can never be mistaken for a filled template.
pub const REFUSAL_TEXT: &str = "Não posso preencher o template pedido. O relatório apresenta \
informação clínica que deve ser revista manualmente pelo cardiologista responsável. Recomendo \
a validação direta dos índices de fisiologia no sistema de origem.";

/// The scripted behaviors a mock model can follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "kebab-case")]
pub enum MockBehavior {
    /// Answers with the report's exact ground truth.
    Oracle,
    /// Answers with an entirely empty template.
    AllNull,
    /// Answers with the truth plus fabricated values in absent slots, each
    /// absent slot independently filled with probability `rate`.
    Hallucinator { rate: f64 },
    /// Refuses in prose and never produces JSON.
    ProseRefuser,
    /// Copies mistyped fragments verbatim as JSON strings and parrots the
    /// given values into absent slots, in template order.
    TypoCopier { parrot: Vec<FixedDecimal> },
}

impl MockBehavior {
    pub fn label(&self) -> String {
        match self {
            MockBehavior::Oracle => "oracle".to_string(),
            MockBehavior::AllNull => "all-null".to_string(),
            MockBehavior::Hallucinator { rate } => format!("hallucinator({rate})"),
            MockBehavior::ProseRefuser => "prose-refuser".to_string(),
            MockBehavior::TypoCopier { parrot } => format!("typo-copier(k={})", parrot.len()),
        }
    }
}

/// Parses a command-line mock selector such as `oracle`,
/// `hallucinator:0.3`, or `typo-copier:3.21,5.48`.
pub fn parse_mock_spec(spec: &str) -> Result<MockBehavior, String> {
    let (name, argument) = match spec.split_once(':') {
        Some((name, argument)) => (name, Some(argument)),
        None => (spec, None),
    };
    match (name, argument) {
        ("oracle", None) => Ok(MockBehavior::Oracle),
        ("all-null", None) => Ok(MockBehavior::AllNull),
        ("prose-refuser", None) => Ok(MockBehavior::ProseRefuser),
        ("hallucinator", argument) => {
            let rate = match argument {
                None => 0.3,
                Some(text) => text
                    .parse::<f64>()
                    .map_err(|err| format!("bad hallucinator rate '{text}': {err}"))?,
            };
            if !(0.0..=1.0).contains(&rate) {
                return Err(format!("hallucinator rate {rate} must lie in [0, 1]"));
            }
            Ok(MockBehavior::Hallucinator { rate })
        }
        ("typo-copier", argument) => {
            let parrot = match argument {
                None => crate::prompting::implausible_exemplar_values(),
                Some(text) => text
                    .split(',')
                    .map(|piece| {
                        FixedDecimal::parse_canonical(piece.trim())
                            .map_err(|err| format!("bad parrot value '{piece}': {err}"))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            };
            Ok(MockBehavior::TypoCopier { parrot })
        }
        _ => Err(format!(
            "unknown mock spec '{spec}' (expected oracle, all-null, hallucinator[:rate], \
             prose-refuser, or typo-copier[:v1,v2,..])"
        )),
    }
}

/// A deterministic scripted model: output depends only on the behavior, the
/// seed, and the report.
#[derive(Debug, Clone)]
pub struct MockModel {
    pub behavior: MockBehavior,
    pub seed: u64,
}

impl MockModel {
    pub fn new(behavior: MockBehavior, seed: u64) -> Self {
        MockModel { behavior, seed }
    }

    fn rng_for(&self, report_id: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(report_id.as_bytes());
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    /// The raw text this mock emits for a report, independent of transport.
    pub fn render_behavior(&self, report: &ReportRecord, variant: TemplateVariant) -> String {
        match &self.behavior {
            MockBehavior::Oracle => render_filled(variant, &report.truth),
            MockBehavior::AllNull => render_filled(variant, &PhysiologyRecord::empty()),
            MockBehavior::Hallucinator { rate } => {
                let mut rng = self.rng_for(&report.id);
                let mut filled = report.truth.clone();
                for slot in Slot::ALL {
                    let coin: f64 = rng.gen();
                    let scaled = i64::from(rng.gen_range(10u32..=99)) * 100;
                    if filled.get(slot).is_none() && coin < *rate {
                        let value = FixedDecimal::from_scaled(scaled)
                            .expect("fabricated value is representable");
                        filled.set(slot, Some(value));
                    }
                }
                render_filled(variant, &filled)
            }
            MockBehavior::ProseRefuser => REFUSAL_TEXT.to_string(),
            MockBehavior::TypoCopier { parrot } => {
                let mut parrot_queue = parrot.iter().copied();
                let leaves: Vec<String> = Slot::ALL
                    .iter()
                    .map(|slot| {
                        let typo = report.meta.artifacts_for(*slot).find_map(|note| {
                            match &note.kind {
                                ArtifactKind::Typo { rendered, .. } => Some(rendered.clone()),
                                _ => None,
                            }
                        });
                        if let Some(fragment) = typo {
                            serde_json::to_string(&fragment)
                                .expect("string serialization cannot fail")
                        } else if let Some(value) = report.truth.get(*slot) {
                            value.to_string()
                        } else if let Some(parroted) = parrot_queue.next() {
                            parroted.to_string()
                        } else {
                            "null".to_string()
                        }
                    })
                    .collect();
                let segments = canonical_segments(variant);
                let mut out = String::new();
                for (position, leaf) in leaves.iter().enumerate() {
                    out.push_str(&segments[position]);
                    out.push_str(leaf);
                }
                out.push_str(&segments[10]);
                out
            }
        }
    }

    /// A token stepper whose greedy path reproduces this mock's output.
    pub fn stepper(&self, report: &ReportRecord, variant: TemplateVariant) -> BehaviorStepper {
        BehaviorStepper::toward(self.render_behavior(report, variant))
    }
}

impl ReportModel for MockModel {
    fn name(&self) -> String {
        format!("mock:{}@{}", self.behavior.label(), self.seed)
    }

    fn complete(
        &self,
        report: &ReportRecord,
        _request: &CompletionRequest,
        variant: TemplateVariant,
    ) -> Result<String, ModelError> {
        Ok(self.render_behavior(report, variant))
    }
}

/// The shared single-character vocabulary of the mock steppers: every
/// character either template shape can emit, the value alphabet, and prose
/// distractors.
pub fn default_vocab() -> Vec<String> {
    let mut chars = std::collections::BTreeSet::new();
    for variant in TemplateVariant::ALL {
        for segment in canonical_segments(variant) {
            chars.extend(segment.chars());
        }
    }
    chars.extend("0123456789.,null".chars());
    chars.extend(REFUSAL_TEXT.chars());
    chars.extend("befhjkwxyz;".chars());
    chars.into_iter().map(String::from).collect()
}

/// Character-level stepper that concentrates probability mass on a target
/// string: at position `k` the token matching the `k`-th target character
/// gets 90% of the mass and the rest is spread uniformly. Deterministic
/// given the number of appended tokens.
#[derive(Debug, Clone)]
pub struct BehaviorStepper {
    vocab: Vec<String>,
    target: Vec<char>,
    appended: usize,
}

impl BehaviorStepper {
    pub fn toward(target: impl Into<String>) -> Self {
        BehaviorStepper {
            vocab: default_vocab(),
            target: target.into().chars().collect(),
            appended: 0,
        }
    }

    pub fn appended(&self) -> usize {
        self.appended
    }
}

impl TokenStepper for BehaviorStepper {
    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn step(&mut self) -> Result<Vec<f64>, StepperError> {
        let size = self.vocab.len();
        let target_token = self
            .target
            .get(self.appended)
            .map(char::to_string)
            .and_then(|wanted| self.vocab.iter().position(|token| *token == wanted));
        let mut weights = vec![1.0; size];
        if let Some(index) = target_token {
            let boost = 9.0 * (size as f64 - 1.0);
            weights[index] += boost;
        }
        let total: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / total).collect())
    }

    fn append(&mut self, _token_id: usize) -> Result<(), StepperError> {
        self.appended += 1;
        Ok(())
    }
}

/// Fuzzing stepper: an arbitrary but deterministic distribution at every
/// position, derived from the seed and the appended count only.
#[derive(Debug, Clone)]
pub struct RandomStepper {
    vocab: Vec<String>,
    seed: u64,
    appended: u64,
}

impl RandomStepper {
    pub fn new(seed: u64) -> Self {
        RandomStepper {
            vocab: default_vocab(),
            seed,
            appended: 0,
        }
    }
}

impl TokenStepper for RandomStepper {
    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn step(&mut self) -> Result<Vec<f64>, StepperError> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.appended.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        let mut weights: Vec<f64> = (0..self.vocab.len())
            .map(|_| rng.gen_range(0.01f64..1.0))
            .collect();
        let total: f64 = weights.iter().sum();
        for weight in &mut weights {
            *weight /= total;
        }
        Ok(weights)
    }

    fn append(&mut self, _token_id: usize) -> Result<(), StepperError> {
        self.appended += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ArtifactNote, ReportMeta};
    use crate::postprocess::{parse_output, FilterTrace, ParseOptions, TypoClass};
    use crate::record::{dec, PhysIndex, Vessel};

    fn report_with(truth: PhysiologyRecord) -> ReportRecord {
        ReportRecord {
            id: "t00001".to_string(),
            text: "CORONARIOGRAFIA. FFR 0,93 na descendente anterior.".to_string(),
            truth,
            meta: ReportMeta::default(),
        }
    }

    fn da_ffr() -> Slot {
        Slot::new(Vessel::DescendenteAnterior, PhysIndex::Ffr)
    }

    #[test]
    fn oracle_reproduces_the_truth_in_both_shapes() {
        let truth = PhysiologyRecord::empty().with(da_ffr(), dec("0.93"));
        let report = report_with(truth.clone());
        let model = MockModel::new(MockBehavior::Oracle, 1);
        let request = CompletionRequest::new("p");
        for variant in TemplateVariant::ALL {
            let output = model.complete(&report, &request, variant).unwrap();
            assert_eq!(output, render_filled(variant, &truth));
            let mut trace = FilterTrace::new();
            let parsed = parse_output(&output, &ParseOptions::new(variant), &mut trace);
            assert_eq!(parsed.record, Some(truth.clone()));
        }
    }

    #[test]
    fn all_null_emits_an_empty_template() {
        let report = report_with(PhysiologyRecord::empty().with(da_ffr(), dec("0.8")));
        let model = MockModel::new(MockBehavior::AllNull, 1);
        let request = CompletionRequest::new("p");
        let output = model
            .complete(&report, &request, TemplateVariant::FlatKeys)
            .unwrap();
        assert_eq!(
            output,
            render_filled(TemplateVariant::FlatKeys, &PhysiologyRecord::empty())
        );
    }

    #[test]
    fn mock_output_is_deterministic_per_seed_and_report() {
        let report = report_with(PhysiologyRecord::empty());
        let model = MockModel::new(MockBehavior::Hallucinator { rate: 1.0 }, 9);
        let request = CompletionRequest::new("p");
        let first = model
            .complete(&report, &request, TemplateVariant::FlatKeys)
            .unwrap();
        let second = model
            .complete(&report, &request, TemplateVariant::FlatKeys)
            .unwrap();
        assert_eq!(first, second);

        let mut other = report_with(PhysiologyRecord::empty());
        other.id = "t00002".to_string();
        let third = model
            .complete(&other, &request, TemplateVariant::FlatKeys)
            .unwrap();
        assert_ne!(first, third, "different reports should fabricate differently");
    }

    #[test]
    fn hallucinator_extremes() {
        let truth = PhysiologyRecord::empty().with(da_ffr(), dec("0.93"));
        let report = report_with(truth.clone());
        let request = CompletionRequest::new("p");

        let silent = MockModel::new(MockBehavior::Hallucinator { rate: 0.0 }, 3);
        assert_eq!(
            silent
                .complete(&report, &request, TemplateVariant::FlatKeys)
                .unwrap(),
            render_filled(TemplateVariant::FlatKeys, &truth)
        );

        let loud = MockModel::new(MockBehavior::Hallucinator { rate: 1.0 }, 3);
        let output = loud
            .complete(&report, &request, TemplateVariant::FlatKeys)
            .unwrap();
        let mut trace = FilterTrace::new();
        let parsed = parse_output(
            &output,
            &ParseOptions::new(TemplateVariant::FlatKeys),
            &mut trace,
        );
        let record = parsed.record.unwrap();
        assert_eq!(record.present_count(), 10);
        assert_eq!(record.get(da_ffr()), Some(dec("0.93")), "truth is preserved");
    }

    #[test]
    fn prose_refuser_is_never_json() {
        let report = report_with(PhysiologyRecord::empty());
        let model = MockModel::new(MockBehavior::ProseRefuser, 1);
        let request = CompletionRequest::new("p");
        let output = model
            .complete(&report, &request, TemplateVariant::FlatKeys)
            .unwrap();
        assert_eq!(output, REFUSAL_TEXT);
        assert!(!output.contains('{'));
        assert!(!output.chars().any(|c| c.is_ascii_digit()));
    }

    #[test]
    fn typo_copier_copies_fragments_and_parrots_into_absent_slots() {
        let truth = PhysiologyRecord::empty().with(da_ffr(), dec("0.93"));
        let mut report = report_with(truth);
        report.meta.artifacts.push(ArtifactNote {
            slot: da_ffr().flat_key(),
            kind: ArtifactKind::Typo {
                class: TypoClass::MissingZero,
                rendered: ",93".to_string(),
            },
        });
        let model = MockModel::new(
            MockBehavior::TypoCopier {
                parrot: vec![dec("9.64")],
            },
            1,
        );
        let request = CompletionRequest::new("p");
        let output = model
            .complete(&report, &request, TemplateVariant::FlatKeys)
            .unwrap();
        assert!(output.contains("\"Descendente_Anterior_FFR\": \",93\""));
        assert!(output.contains("\"Tronco_Comum_FFR\": 9.64"));

        let mut trace = FilterTrace::new();
        let parsed = parse_output(
            &output,
            &ParseOptions::new(TemplateVariant::FlatKeys),
            &mut trace,
        );
        let record = parsed.record.unwrap();
        assert_eq!(record.get(da_ffr()), Some(dec("0.93")), "fragment normalizes back");
        assert_eq!(
            record.get(Slot::new(Vessel::TroncoComum, PhysIndex::Ffr)),
            Some(dec("9.64"))
        );
        assert_eq!(record.present_count(), 2);
    }

    #[test]
    fn mock_spec_parsing() {
        assert_eq!(parse_mock_spec("oracle"), Ok(MockBehavior::Oracle));
        assert_eq!(parse_mock_spec("all-null"), Ok(MockBehavior::AllNull));
        assert_eq!(
            parse_mock_spec("prose-refuser"),
            Ok(MockBehavior::ProseRefuser)
        );
        assert_eq!(
            parse_mock_spec("hallucinator"),
            Ok(MockBehavior::Hallucinator { rate: 0.3 })
        );
        assert_eq!(
            parse_mock_spec("hallucinator:0.75"),
            Ok(MockBehavior::Hallucinator { rate: 0.75 })
        );
        assert_eq!(
            parse_mock_spec("typo-copier:3.21,5.48"),
            Ok(MockBehavior::TypoCopier {
                parrot: vec![dec("3.21"), dec("5.48")],
            })
        );
        assert_eq!(
            parse_mock_spec("typo-copier"),
            Ok(MockBehavior::TypoCopier {
                parrot: crate::prompting::implausible_exemplar_values(),
            })
        );
        assert!(parse_mock_spec("hallucinator:1.5").is_err());
        assert!(parse_mock_spec("hallucinator:abc").is_err());
        assert!(parse_mock_spec("gpt-4").is_err());
        assert!(parse_mock_spec("typo-copier:xx").is_err());
    }

    #[test]
    fn behavior_stepper_distributions_are_valid_and_deterministic() {
        let mut stepper = BehaviorStepper::toward("{\n");
        let first = stepper.step().unwrap();
        let again = stepper.step().unwrap();
        assert_eq!(first, again, "same position, same distribution");
        assert_eq!(first.len(), stepper.vocab().len());
        let sum: f64 = first.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(first.iter().all(|p| *p >= 0.0));

        let best = first
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(stepper.vocab()[best], "{");
        stepper.append(best).unwrap();
        let second = stepper.step().unwrap();
        let best = second
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(stepper.vocab()[best], "\n");
    }

    #[test]
    fn behavior_stepper_is_uniform_past_the_target() {
        let mut stepper = BehaviorStepper::toward("x");
        stepper.append(0).unwrap();
        let dist = stepper.step().unwrap();
        let first = dist[0];
        assert!(dist.iter().all(|p| (*p - first).abs() < 1e-12));
    }

    #[test]
    fn random_stepper_is_deterministic_per_position() {
        let mut a = RandomStepper::new(7);
        let mut b = RandomStepper::new(7);
        for _ in 0..5 {
            let da = a.step().unwrap();
            let db = b.step().unwrap();
            assert_eq!(da, db);
            let sum: f64 = da.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            a.append(0).unwrap();
            b.append(0).unwrap();
        }
        let mut c = RandomStepper::new(8);
        assert_ne!(a.step().unwrap(), c.step().unwrap());
    }

    #[test]
    fn default_vocab_covers_both_template_shapes() {
        let vocab = default_vocab();
        let chars: std::collections::BTreeSet<char> =
            vocab.iter().flat_map(|token| token.chars()).collect();
        for variant in TemplateVariant::ALL {
            for segment in canonical_segments(variant) {
                for c in segment.chars() {
                    assert!(chars.contains(&c), "missing '{c}' from vocab");
                }
            }
        }
        for c in "0123456789.,null".chars() {
            assert!(chars.contains(&c));
        }
        assert!(vocab.iter().all(|token| token.chars().count() == 1));
        let mut sorted = vocab.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, vocab, "vocabulary is sorted and duplicate-free");
    }
}
