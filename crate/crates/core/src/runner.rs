//! Run orchestration: load a corpus, drive a model (scripted, HTTP, or the
//! regex extractor) through the prompt/decode/parse/filter pipeline, score the
//! outcomes, and leave a reproducible set of files behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{extract_baseline, CompiledPatternSet, PatternError, PatternSet};
use crate::constrained::{decode, DecodeError, Grammar, OutputSchema, SchemaError};
use crate::corpus::{corpus_fingerprint, load_corpus, CorpusError, ReportRecord};
use crate::eval::{
    compare_runs, csv_header, csv_row, evaluate_run, DeltaReport, EvalError, EvalSummary,
    ExtractionOutcome,
};
use crate::model::{CompletionRequest, HttpModel, MockBehavior, MockModel, ModelError, ReportModel};
use crate::postprocess::{
    parse_output, plausibility_filter, verify_against_report, FilterTrace, FormatStatus,
    ParseOptions, VerifyMode,
};
use crate::prompting::{
    build_constrained_context, build_prompt, render_filled, PromptError, PromptStrategy,
    TemplateVariant,
};
use crate::record::FixedDecimal;

/// Which engine produces raw output for each report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// POST each prompt to a completion endpoint.
    Http {
        endpoint: String,
        /// Additional attempts after the first; `None` keeps the client default.
        #[serde(default)]
        retries: Option<u32>,
        /// First backoff delay in milliseconds; doubles per attempt.
        #[serde(default)]
        backoff_ms: Option<u64>,
    },
    /// Scripted in-process model; fully determined by behavior and seed.
    Mock { behavior: MockBehavior, seed: u64 },
    /// Regex extraction straight from the report text, no model in the loop.
    Baseline {
        /// Pattern rules file; `None` uses the built-in rules.
        #[serde(default)]
        patterns: Option<PathBuf>,
    },
}

impl ModelSpec {
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Http { .. } => "http".to_string(),
            ModelSpec::Mock { behavior, .. } => format!("mock-{}", behavior.label()),
            ModelSpec::Baseline { .. } => "baseline".to_string(),
        }
    }
}

/// Range-filter selection. The default defers to the prompt strategy: the
/// strategy whose exemplars carry deliberately impossible values switches the
/// [0, 1] filter on, the others leave it off.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "setting", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlausibilitySetting {
    #[default]
    StrategyDefault,
    Off,
    Range { lo: FixedDecimal, hi: FixedDecimal },
}

impl PlausibilitySetting {
    /// The concrete bounds in force for a strategy, if any.
    pub fn effective(
        &self,
        strategy: PromptStrategy,
    ) -> Option<(FixedDecimal, FixedDecimal)> {
        match self {
            PlausibilitySetting::StrategyDefault => match strategy {
                PromptStrategy::FewShotImplausible => Some((
                    FixedDecimal::from_scaled(0).expect("zero is representable"),
                    FixedDecimal::from_scaled(10_000).expect("one is representable"),
                )),
                _ => None,
            },
            PlausibilitySetting::Off => None,
            PlausibilitySetting::Range { lo, hi } => Some((*lo, *hi)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PlausibilitySetting::StrategyDefault => "plaus-default".to_string(),
            PlausibilitySetting::Off => "plaus-off".to_string(),
            PlausibilitySetting::Range { lo, hi } => format!("plaus-{lo}-{hi}"),
        }
    }
}

/// Everything one run needs; serialized verbatim into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub model: ModelSpec,
    pub strategy: PromptStrategy,
    pub template: TemplateVariant,
    /// Decode under the output grammar instead of free-text completion.
    pub constrained: bool,
    pub verify_mode: VerifyMode,
    pub plausibility: PlausibilitySetting,
    /// Worker count for per-report extraction; 1 runs strictly sequentially.
    pub parallelism: usize,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.parallelism < 1 {
            return Err(RunError::Config(
                "parallelism must be at least 1".to_string(),
            ));
        }
        if self.constrained && !matches!(self.model, ModelSpec::Mock { .. }) {
            return Err(RunError::Config(format!(
                "constrained decoding needs token-level access and only the scripted model \
                 provides it; got model '{}'",
                self.model.label()
            )));
        }
        if let PlausibilitySetting::Range { lo, hi } = self.plausibility {
            if lo > hi {
                return Err(RunError::Config(format!(
                    "plausibility range is empty: lo {lo} > hi {hi}"
                )));
            }
        }
        Ok(())
    }

    /// Stable human-readable identifier used for CSV rows and directory names.
    pub fn setting_label(&self) -> String {
        format!(
            "{}_{}_{}_{}_verify-{}_{}",
            self.model.label(),
            self.strategy.label(),
            self.template.label(),
            if self.constrained { "constrained" } else { "free" },
            self.verify_mode.label(),
            self.plausibility.label(),
        )
    }
}

/// What a finished run leaves behind besides its data files: enough to check
/// a re-run reproduced the experiment bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub setting: String,
    pub corpus_fingerprint: String,
    pub report_count: u64,
    pub outcomes_file: String,
    pub outcomes_sha256: String,
    pub summary_file: String,
    pub summary_sha256: String,
    pub csv_file: String,
    pub csv_sha256: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

/// A run's in-memory result next to its on-disk manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub summary: EvalSummary,
    pub outcomes: Vec<ExtractionOutcome>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

enum PreparedModel {
    Http(HttpModel),
    Mock(MockModel),
    Baseline(CompiledPatternSet),
}

impl PreparedModel {
    fn build(spec: &ModelSpec) -> Result<Self, RunError> {
        Ok(match spec {
            ModelSpec::Http {
                endpoint,
                retries,
                backoff_ms,
            } => {
                let mut model = HttpModel::new(endpoint.clone());
                if let Some(retries) = retries {
                    model = model.with_retries(*retries);
                }
                if let Some(backoff_ms) = backoff_ms {
                    model = model.with_backoff_base(Duration::from_millis(*backoff_ms));
                }
                PreparedModel::Http(model)
            }
            ModelSpec::Mock { behavior, seed } => {
                PreparedModel::Mock(MockModel::new(behavior.clone(), *seed))
            }
            ModelSpec::Baseline { patterns } => {
                let rules = match patterns {
                    None => PatternSet::defaults(),
                    Some(path) => PatternSet::from_json_file(path)?,
                };
                PreparedModel::Baseline(rules.compile()?)
            }
        })
    }
}

/// Runs the full pipeline for one report and returns its outcome.
fn extract_one(
    cfg: &RunConfig,
    model: &PreparedModel,
    grammar: Option<&Grammar>,
    report: &ReportRecord,
) -> Result<ExtractionOutcome, RunError> {
    let mut trace = FilterTrace::new();
    let options = ParseOptions::new(cfg.template);

    let (raw, status, parsed_record) = match model {
        PreparedModel::Baseline(patterns) => {
            let record = extract_baseline(&report.text, patterns);
            let raw = render_filled(cfg.template, &record);
            (raw, FormatStatus::Parsed, Some(record))
        }
        PreparedModel::Mock(mock) if cfg.constrained => {
            // The scripted stepper ignores its context, but building it keeps
            // this path shaped like a real constrained call.
            build_constrained_context(cfg.strategy, cfg.template, &report.text)?;
            let grammar = grammar.expect("grammar prepared for constrained runs");
            let mut stepper = mock.stepper(report, cfg.template);
            let decoded = decode(grammar, &mut stepper)?;
            let parsed = parse_output(&decoded.text, &options, &mut trace);
            (decoded.text, parsed.status, parsed.record)
        }
        PreparedModel::Mock(_) | PreparedModel::Http(_) => {
            let prompt = build_prompt(cfg.strategy, cfg.template, &report.text)?;
            let request = CompletionRequest::new(prompt);
            let raw = match model {
                PreparedModel::Mock(mock) => mock.complete(report, &request, cfg.template)?,
                PreparedModel::Http(http) => http.complete(report, &request, cfg.template)?,
                PreparedModel::Baseline(_) => unreachable!("handled above"),
            };
            let parsed = parse_output(&raw, &options, &mut trace);
            (raw, parsed.status, parsed.record)
        }
    };

    let record = match parsed_record {
        Some(record) => {
            let mut current = record;
            if let Some((lo, hi)) = cfg.plausibility.effective(cfg.strategy) {
                current = plausibility_filter(&current, lo, hi, &mut trace);
            }
            current = verify_against_report(&current, &report.text, cfg.verify_mode, &mut trace);
            trace.record_kept(&current);
            Some(current)
        }
        None => None,
    };

    Ok(ExtractionOutcome::new(
        &report.id,
        raw,
        status,
        record,
        trace,
    ))
}

/// Applies `f` to every report, in corpus order, using up to `parallelism`
/// workers. `parallelism == 1` stays on the calling thread.
#[cfg(feature = "parallel")]
pub fn map_reports<T, F>(reports: &[ReportRecord], parallelism: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&ReportRecord) -> T + Sync,
{
    use rayon::prelude::*;
    if parallelism <= 1 {
        reports.iter().map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("worker pool construction cannot fail for small thread counts");
        pool.install(|| reports.par_iter().map(|report| f(report)).collect())
    }
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn map_reports<T, F>(reports: &[ReportRecord], _parallelism: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&ReportRecord) -> T + Sync,
{
    reports.iter().map(f).collect()
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| RunError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    let mut file = fs::File::create(path).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(bytes).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn outcomes_jsonl(outcomes: &[ExtractionOutcome]) -> String {
    let mut text = String::new();
    for outcome in outcomes {
        text.push_str(
            &serde_json::to_string(outcome).expect("outcome serialization cannot fail"),
        );
        text.push('\n');
    }
    text
}

/// Loads the corpus named by the config and runs it.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus)?;
    run_on(cfg, &corpus)
}

/// Runs an already-loaded corpus: extract per report, score, and write
/// `outcomes.jsonl`, `summary.json`, `summary.csv`, and `manifest.json` into
/// the config's output directory.
///
/// A report whose model call fails does not take the others down: every
/// successful outcome is still written to `outcomes.jsonl` before the first
/// failure is returned.
pub fn run_on(cfg: &RunConfig, corpus: &[ReportRecord]) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let started_unix_ms = now_ms();
    let model = PreparedModel::build(&cfg.model)?;
    let grammar = if cfg.constrained {
        Some(Grammar::compile(&OutputSchema::default_for(cfg.template)))
    } else {
        None
    };

    let results = map_reports(corpus, cfg.parallelism, |report| {
        extract_one(cfg, &model, grammar.as_ref(), report)
    });

    let mut outcomes = Vec::with_capacity(results.len());
    let mut first_error = None;
    for result in results {
        match result {
            Ok(outcome) => outcomes.push(outcome),
            Err(error) => {
                if first_error.is_none() {
                    first_error = Some(error);
                }
            }
        }
    }

    let outcomes_text = outcomes_jsonl(&outcomes);
    let outcomes_path = cfg.output_dir.join("outcomes.jsonl");
    write_file(&outcomes_path, outcomes_text.as_bytes())?;
    if let Some(error) = first_error {
        return Err(error);
    }

    let summary = evaluate_run(corpus, &outcomes)?;
    let setting = cfg.setting_label();

    let summary_text = format!(
        "{}\n",
        serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail")
    );
    let csv_text = format!("{}\n{}\n", csv_header(), csv_row(&setting, &summary));
    write_file(&cfg.output_dir.join("summary.json"), summary_text.as_bytes())?;
    write_file(&cfg.output_dir.join("summary.csv"), csv_text.as_bytes())?;

    let manifest = RunManifest {
        config: cfg.clone(),
        setting,
        corpus_fingerprint: corpus_fingerprint(corpus),
        report_count: corpus.len() as u64,
        outcomes_file: "outcomes.jsonl".to_string(),
        outcomes_sha256: sha256_hex(outcomes_text.as_bytes()),
        summary_file: "summary.json".to_string(),
        summary_sha256: sha256_hex(summary_text.as_bytes()),
        csv_file: "summary.csv".to_string(),
        csv_sha256: sha256_hex(csv_text.as_bytes()),
        started_unix_ms,
        finished_unix_ms: now_ms(),
    };
    let manifest_text = format!(
        "{}\n",
        serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail")
    );
    write_file(&cfg.output_dir.join("manifest.json"), manifest_text.as_bytes())?;

    Ok(RunOutput {
        manifest,
        summary,
        outcomes,
    })
}

/// The grid of settings to sweep; an empty axis keeps the base config's value
/// for that dimension.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixAxes {
    #[serde(default)]
    pub strategies: Vec<PromptStrategy>,
    #[serde(default)]
    pub templates: Vec<TemplateVariant>,
    #[serde(default)]
    pub constrained: Vec<bool>,
    #[serde(default)]
    pub verify_modes: Vec<VerifyMode>,
    #[serde(default)]
    pub plausibility: Vec<PlausibilitySetting>,
}

impl MatrixAxes {
    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
            && self.templates.is_empty()
            && self.constrained.is_empty()
            && self.verify_modes.is_empty()
            && self.plausibility.is_empty()
    }

    /// All cell configs derived from a base, in deterministic sweep order.
    fn cells(&self, base: &RunConfig) -> Vec<RunConfig> {
        let strategies = non_empty(&self.strategies, base.strategy);
        let templates = non_empty(&self.templates, base.template);
        let constrained = non_empty(&self.constrained, base.constrained);
        let verify_modes = non_empty(&self.verify_modes, base.verify_mode);
        let plausibility = non_empty(&self.plausibility, base.plausibility);
        let mut cells = Vec::new();
        for strategy in &strategies {
            for template in &templates {
                for &constrained in &constrained {
                    for verify_mode in &verify_modes {
                        for plaus in &plausibility {
                            let mut cfg = base.clone();
                            cfg.strategy = *strategy;
                            cfg.template = *template;
                            cfg.constrained = constrained;
                            cfg.verify_mode = *verify_mode;
                            cfg.plausibility = *plaus;
                            cfg.output_dir = base.output_dir.join(cfg.setting_label());
                            cells.push(cfg);
                        }
                    }
                }
            }
        }
        cells
    }
}

fn non_empty<T: Clone>(axis: &[T], fallback: T) -> Vec<T> {
    if axis.is_empty() {
        vec![fallback]
    } else {
        axis.to_vec()
    }
}

/// One cell of a sweep: its config and how the run ended.
#[derive(Debug)]
pub struct MatrixCell {
    pub setting: String,
    pub config: RunConfig,
    pub result: Result<RunOutput, RunError>,
}

/// A finished sweep: per-cell results, the combined CSV text, and
/// flat-vs-nested template deltas where both template cells succeeded.
#[derive(Debug)]
pub struct MatrixOutcome {
    pub cells: Vec<MatrixCell>,
    pub combined_csv: String,
    pub template_deltas: BTreeMap<String, DeltaReport>,
}

impl MatrixOutcome {
    pub fn succeeded(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_ok()).count()
    }
}

/// Sweeps every axis combination over the base config. Cells are isolated:
/// one failing cell is reported in its slot while the others still run. The
/// combined CSV (one row per successful cell) is written to `matrix.csv` in
/// the base output directory, and template deltas to `deltas.json`.
pub fn run_matrix(base: &RunConfig, axes: &MatrixAxes) -> Result<MatrixOutcome, RunError> {
    if axes.is_empty() {
        return Err(RunError::Config(
            "matrix axes are empty; toggle at least one dimension".to_string(),
        ));
    }
    base.validate()?;
    let corpus = load_corpus(&base.corpus)?;
    run_matrix_on(base, axes, &corpus)
}

/// [`run_matrix`] over an already-loaded corpus.
pub fn run_matrix_on(
    base: &RunConfig,
    axes: &MatrixAxes,
    corpus: &[ReportRecord],
) -> Result<MatrixOutcome, RunError> {
    if axes.is_empty() {
        return Err(RunError::Config(
            "matrix axes are empty; toggle at least one dimension".to_string(),
        ));
    }
    let mut cells = Vec::new();
    for cfg in axes.cells(base) {
        let setting = cfg.setting_label();
        let result = run_on(&cfg, corpus);
        cells.push(MatrixCell {
            setting,
            config: cfg,
            result,
        });
    }

    let mut combined_csv = format!("{}\n", csv_header());
    for cell in &cells {
        if let Ok(output) = &cell.result {
            combined_csv.push_str(&csv_row(&cell.setting, &output.summary));
            combined_csv.push('\n');
        }
    }
    write_file(&base.output_dir.join("matrix.csv"), combined_csv.as_bytes())?;

    let template_deltas = template_deltas(&cells);
    if !template_deltas.is_empty() {
        let text = format!(
            "{}\n",
            serde_json::to_string_pretty(&template_deltas)
                .expect("delta serialization cannot fail")
        );
        write_file(&base.output_dir.join("deltas.json"), text.as_bytes())?;
    }

    Ok(MatrixOutcome {
        cells,
        combined_csv,
        template_deltas,
    })
}

/// Pairs cells that differ only in template and reports nested-minus-flat
/// metric deltas, keyed by the cell label with the template field elided.
fn template_deltas(cells: &[MatrixCell]) -> BTreeMap<String, DeltaReport> {
    let mut by_key: BTreeMap<String, [Option<&EvalSummary>; 2]> = BTreeMap::new();
    for cell in cells {
        let Ok(output) = &cell.result else { continue };
        let key = key_without_template(&cell.config);
        let pair = by_key.entry(key).or_default();
        match cell.config.template {
            TemplateVariant::FlatKeys => pair[0] = Some(&output.summary),
            TemplateVariant::NestedPerVessel => pair[1] = Some(&output.summary),
        }
    }
    by_key
        .into_iter()
        .filter_map(|(key, pair)| match pair {
            [Some(flat), Some(nested)] => Some((key, compare_runs(flat, nested))),
            _ => None,
        })
        .collect()
}

fn key_without_template(cfg: &RunConfig) -> String {
    format!(
        "{}_{}_{}_verify-{}_{}",
        cfg.model.label(),
        cfg.strategy.label(),
        if cfg.constrained { "constrained" } else { "free" },
        cfg.verify_mode.label(),
        cfg.plausibility.label(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{embed_report_1, generate_corpus, save_corpus, GeneratorConfig};
    use crate::record::{dec, PhysIndex, PhysiologyRecord, Slot, Vessel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn mock_cfg(behavior: MockBehavior, dir: &Path) -> RunConfig {
        RunConfig {
            corpus: dir.join("corpus.jsonl"),
            model: ModelSpec::Mock { behavior, seed: 7 },
            strategy: PromptStrategy::ZeroShot,
            template: TemplateVariant::FlatKeys,
            constrained: false,
            verify_mode: VerifyMode::Off,
            plausibility: PlausibilitySetting::StrategyDefault,
            parallelism: 1,
            output_dir: dir.join("out"),
        }
    }

    fn write_corpus(dir: &Path, n: usize, seed: u64) -> Vec<ReportRecord> {
        let corpus = generate_corpus(&GeneratorConfig::clinical_defaults(n, seed)).unwrap();
        save_corpus(&dir.join("corpus.jsonl"), &corpus).unwrap();
        corpus
    }

    #[test]
    fn oracle_run_writes_every_artifact_and_scores_clean() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 25, 3);
        let cfg = mock_cfg(MockBehavior::Oracle, dir.path());
        let output = run(&cfg).unwrap();

        assert_eq!(output.outcomes.len(), 25);
        assert_eq!(output.summary.detection.precision, 1.0);
        assert_eq!(output.summary.detection.recall, 1.0);
        assert_eq!(output.summary.value_accuracy, Some(1.0));
        assert_eq!(output.summary.out_of_format_count, 0);
        assert_eq!(output.manifest.report_count, 25);
        assert_eq!(output.manifest.corpus_fingerprint, corpus_fingerprint(&corpus));

        let outcomes_bytes = fs::read(cfg.output_dir.join("outcomes.jsonl")).unwrap();
        assert_eq!(
            outcomes_bytes.iter().filter(|b| **b == b'\n').count(),
            25,
            "one JSONL line per report"
        );
        assert_eq!(output.manifest.outcomes_sha256, sha256_hex(&outcomes_bytes));

        let summary_bytes = fs::read(cfg.output_dir.join("summary.json")).unwrap();
        let read_back: EvalSummary = serde_json::from_slice(&summary_bytes).unwrap();
        assert_eq!(read_back, output.summary);
        assert_eq!(output.manifest.summary_sha256, sha256_hex(&summary_bytes));

        let csv = fs::read_to_string(cfg.output_dir.join("summary.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(csv_header()));
        let row = lines.next().unwrap();
        assert!(row.starts_with("mock-oracle_zero-shot_flat_free_verify-off_plaus-default,"));
        assert!(row.ends_with(",1.000"));

        let manifest_bytes = fs::read(cfg.output_dir.join("manifest.json")).unwrap();
        let manifest: RunManifest = serde_json::from_slice(&manifest_bytes).unwrap();
        assert_eq!(manifest, output.manifest);
    }

    #[test]
    fn refuser_is_out_of_format_free_text_but_not_constrained() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 10, 11);

        let mut cfg = mock_cfg(MockBehavior::ProseRefuser, dir.path());
        cfg.output_dir = dir.path().join("free");
        let free = run_on(&cfg, &corpus).unwrap();
        assert_eq!(free.summary.out_of_format_count, 10);
        assert_eq!(free.summary.scored_report_count, 0);

        cfg.constrained = true;
        cfg.output_dir = dir.path().join("constrained");
        let constrained = run_on(&cfg, &corpus).unwrap();
        assert_eq!(constrained.summary.out_of_format_count, 0);
        assert_eq!(constrained.summary.scored_report_count, 10);
        let absent_cells: u64 = corpus
            .iter()
            .map(|r| r.truth.absent_count() as u64)
            .sum();
        assert_eq!(
            constrained.summary.counts.fp, absent_cells,
            "grammar-forced zeros land in every absent slot"
        );
        assert_eq!(constrained.summary.value_accuracy, Some(0.0));
    }

    #[test]
    fn constrained_decoding_rejects_models_without_token_access() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = mock_cfg(MockBehavior::Oracle, dir.path());
        cfg.constrained = true;
        cfg.model = ModelSpec::Http {
            endpoint: "http://127.0.0.1:1/v1/complete".to_string(),
            retries: None,
            backoff_ms: None,
        };
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        cfg.model = ModelSpec::Baseline { patterns: None };
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        cfg.model = ModelSpec::Mock {
            behavior: MockBehavior::Oracle,
            seed: 7,
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn bad_parallelism_and_empty_ranges_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = mock_cfg(MockBehavior::Oracle, dir.path());
        cfg.parallelism = 0;
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        cfg.parallelism = 1;
        cfg.plausibility = PlausibilitySetting::Range {
            lo: dec("0.9"),
            hi: dec("0.1"),
        };
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
    }

    #[test]
    fn strategy_default_switches_the_range_filter() {
        let setting = PlausibilitySetting::StrategyDefault;
        assert_eq!(setting.effective(PromptStrategy::ZeroShot), None);
        assert_eq!(setting.effective(PromptStrategy::FewShot), None);
        assert_eq!(
            setting.effective(PromptStrategy::FewShotImplausible),
            Some((dec("0"), dec("1")))
        );
        assert_eq!(
            PlausibilitySetting::Off.effective(PromptStrategy::FewShotImplausible),
            None
        );
        assert_eq!(
            PlausibilitySetting::Range {
                lo: dec("0.5"),
                hi: dec("0.9")
            }
            .effective(PromptStrategy::ZeroShot),
            Some((dec("0.5"), dec("0.9")))
        );
    }

    #[test]
    fn sequential_and_parallel_runs_agree_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 40, 17);
        let mut cfg = mock_cfg(MockBehavior::Hallucinator { rate: 0.4 }, dir.path());
        cfg.verify_mode = VerifyMode::Strict;

        cfg.parallelism = 1;
        cfg.output_dir = dir.path().join("seq");
        let sequential = run_on(&cfg, &corpus).unwrap();

        cfg.parallelism = 4;
        cfg.output_dir = dir.path().join("par");
        let parallel = run_on(&cfg, &corpus).unwrap();

        assert_eq!(sequential.outcomes, parallel.outcomes);
        assert_eq!(sequential.summary, parallel.summary);
        let seq_csv = fs::read(dir.path().join("seq/summary.csv")).unwrap();
        let par_csv = fs::read(dir.path().join("par/summary.csv")).unwrap();
        assert_eq!(seq_csv, par_csv);
    }

    #[test]
    fn baseline_model_reads_report_one_correctly() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![embed_report_1()];
        save_corpus(&dir.path().join("corpus.jsonl"), &corpus).unwrap();
        let mut cfg = mock_cfg(MockBehavior::Oracle, dir.path());
        cfg.model = ModelSpec::Baseline { patterns: None };
        let output = run(&cfg).unwrap();
        let expected = PhysiologyRecord::empty().with(
            Slot::new(Vessel::DescendenteAnterior, PhysIndex::Ffr),
            dec("0.83"),
        );
        assert_eq!(output.outcomes[0].record, Some(expected));
        assert_eq!(output.summary.detection.precision, 1.0);
        assert_eq!(output.summary.value_accuracy, Some(1.0));
    }

    #[test]
    fn implausible_exemplar_echoes_are_filtered_by_default() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 12, 23);
        let mut cfg = mock_cfg(
            MockBehavior::TypoCopier {
                parrot: vec![dec("3.21"), dec("5.48")],
            },
            dir.path(),
        );
        cfg.strategy = PromptStrategy::FewShotImplausible;
        let output = run_on(&cfg, &corpus).unwrap();
        for outcome in &output.outcomes {
            if let Some(record) = &outcome.record {
                for (_, value) in record.iter() {
                    if let Some(value) = value {
                        assert!(value <= dec("1"), "parroted value {value} survived");
                    }
                }
            }
        }
        let removals: usize = output
            .outcomes
            .iter()
            .map(|o| {
                o.trace
                    .events()
                    .iter()
                    .filter(|e| {
                        matches!(e, crate::postprocess::TraceEvent::RemovedByRange { .. })
                    })
                    .count()
            })
            .sum();
        assert!(removals > 0, "the range filter must have fired somewhere");
    }

    #[test]
    fn filter_order_does_not_change_the_kept_records() {
        let corpus = generate_corpus(&GeneratorConfig::clinical_defaults(30, 31)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let lo = dec("0");
        let hi = dec("1");
        for report in &corpus {
            let mut noisy = report.truth;
            for slot in Slot::ALL {
                if rng.gen_bool(0.3) {
                    let scaled = i64::from(rng.gen_range(1u32..=30_000));
                    noisy.set(slot, Some(FixedDecimal::from_scaled(scaled).unwrap()));
                }
            }
            let mut trace_a = FilterTrace::new();
            let plaus_first = verify_against_report(
                &plausibility_filter(&noisy, lo, hi, &mut trace_a),
                &report.text,
                VerifyMode::Strict,
                &mut trace_a,
            );
            let mut trace_b = FilterTrace::new();
            let verify_first = plausibility_filter(
                &verify_against_report(&noisy, &report.text, VerifyMode::Strict, &mut trace_b),
                lo,
                hi,
                &mut trace_b,
            );
            assert_eq!(plaus_first, verify_first);
        }
    }

    #[test]
    fn matrix_sweeps_every_cell_and_combines_rows() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 6, 41);
        let base = mock_cfg(MockBehavior::Oracle, dir.path());
        let axes = MatrixAxes {
            strategies: vec![
                PromptStrategy::ZeroShot,
                PromptStrategy::FewShot,
                PromptStrategy::FewShotImplausible,
            ],
            verify_modes: vec![VerifyMode::Off, VerifyMode::Strict],
            ..Default::default()
        };
        let outcome = run_matrix_on(&base, &axes, &corpus).unwrap();
        assert_eq!(outcome.cells.len(), 6);
        assert_eq!(outcome.succeeded(), 6);
        assert_eq!(outcome.combined_csv.lines().count(), 7);
        assert!(outcome.template_deltas.is_empty(), "single template, no deltas");
        let on_disk = fs::read_to_string(dir.path().join("out/matrix.csv")).unwrap();
        assert_eq!(on_disk, outcome.combined_csv);
        for cell in &outcome.cells {
            assert!(cell.config.output_dir.join("manifest.json").exists());
        }
    }

    #[test]
    fn matrix_with_both_templates_reports_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 8, 43);
        let base = mock_cfg(MockBehavior::Oracle, dir.path());
        let axes = MatrixAxes {
            templates: vec![TemplateVariant::FlatKeys, TemplateVariant::NestedPerVessel],
            ..Default::default()
        };
        let outcome = run_matrix_on(&base, &axes, &corpus).unwrap();
        assert_eq!(outcome.cells.len(), 2);
        assert_eq!(outcome.template_deltas.len(), 1);
        let delta = outcome.template_deltas.values().next().unwrap();
        assert_eq!(delta.precision, 0.0, "oracle is template-insensitive");
        assert_eq!(delta.recall, 0.0);
        assert!(dir.path().join("out/deltas.json").exists());
    }

    #[test]
    fn empty_axes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = mock_cfg(MockBehavior::Oracle, dir.path());
        let err = run_matrix(&base, &MatrixAxes::default()).unwrap_err();
        assert!(matches!(err, RunError::Config(_)));
    }

    #[test]
    fn matrix_rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 5, 53);
        let axes = MatrixAxes {
            verify_modes: vec![VerifyMode::Off, VerifyMode::TypoTolerant],
            ..Default::default()
        };
        let mut base = mock_cfg(MockBehavior::Hallucinator { rate: 0.5 }, dir.path());
        base.output_dir = dir.path().join("first");
        let first = run_matrix_on(&base, &axes, &corpus).unwrap();
        base.output_dir = dir.path().join("second");
        let second = run_matrix_on(&base, &axes, &corpus).unwrap();
        assert_eq!(first.combined_csv, second.combined_csv);
        for cell in first.cells.iter().zip(&second.cells) {
            let (a, b) = cell;
            let csv_a = fs::read(a.config.output_dir.join("summary.csv")).unwrap();
            let csv_b = fs::read(b.config.output_dir.join("summary.csv")).unwrap();
            assert_eq!(csv_a, csv_b);
        }
    }

    /// Minimal scripted completion endpoint: answers the wire shape for the
    /// first `successes` requests, then a bare 500 for every later one. The
    /// thread exits after exactly `connections` accepts so joins cannot hang.
    fn flaky_server(
        successes: usize,
        connections: usize,
        reply_text: String,
    ) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}/complete", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut served = 0usize;
            for stream in listener.incoming().take(connections) {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(rest) = lower.strip_prefix("content-length:") {
                        content_length = rest.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0u8; content_length];
                let _ = reader.read_exact(&mut body);
                let response = if served < successes {
                    let payload = serde_json::json!({ "text": reply_text }).to_string();
                    format!(
                        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n\
                         Content-Length: {}\r\nConnection: close\r\n\r\n{}",
                        payload.len(),
                        payload
                    )
                } else {
                    "HTTP/1.1 500 Internal Server Error\r\nContent-Length: 0\r\n\
                     Connection: close\r\n\r\n"
                        .to_string()
                };
                let _ = stream.write_all(response.as_bytes());
                served += 1;
            }
        });
        (endpoint, handle)
    }

    #[test]
    fn transport_failure_still_logs_the_successful_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 3, 61);
        let reply = render_filled(TemplateVariant::FlatKeys, &PhysiologyRecord::empty());
        let (endpoint, handle) = flaky_server(1, 3, reply);
        let mut cfg = mock_cfg(MockBehavior::Oracle, dir.path());
        cfg.model = ModelSpec::Http {
            endpoint,
            retries: Some(0),
            backoff_ms: Some(1),
        };
        let err = run_on(&cfg, &corpus).unwrap_err();
        assert!(matches!(err, RunError::Model(ModelError::Protocol { status: 500, .. })));
        let logged = fs::read_to_string(cfg.output_dir.join("outcomes.jsonl")).unwrap();
        assert_eq!(logged.lines().count(), 1, "the successful report is preserved");
        let outcome: ExtractionOutcome = serde_json::from_str(logged.lines().next().unwrap()).unwrap();
        assert_eq!(outcome.report_id, corpus[0].id);
        handle.join().unwrap();
    }

    #[test]
    fn http_run_succeeds_end_to_end_against_a_scripted_endpoint() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), 2, 67);
        let reply = render_filled(TemplateVariant::FlatKeys, &PhysiologyRecord::empty());
        let (endpoint, handle) = flaky_server(2, 2, reply);
        let mut cfg = mock_cfg(MockBehavior::Oracle, dir.path());
        cfg.model = ModelSpec::Http {
            endpoint,
            retries: Some(0),
            backoff_ms: Some(1),
        };
        let output = run_on(&cfg, &corpus).unwrap();
        assert_eq!(output.outcomes.len(), 2);
        assert_eq!(output.summary.out_of_format_count, 0);
        assert_eq!(output.summary.counts.fp, 0, "all-null replies invent nothing");
        handle.join().unwrap();
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = mock_cfg(
            MockBehavior::TypoCopier {
                parrot: vec![dec("3.21")],
            },
            dir.path(),
        );
        cfg.plausibility = PlausibilitySetting::Range {
            lo: dec("0"),
            hi: dec("1"),
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
