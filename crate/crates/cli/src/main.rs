//! Command-line front end: corpus generation, single extraction runs, grid
//! sweeps, re-scoring of stored outcomes, and table rendering.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cagx_core::corpus::{
    corpus_fingerprint, embed_report_1, generate_corpus, load_corpus, save_corpus,
    GeneratorConfig, ReportRecord,
};
use cagx_core::eval::{
    asymmetric_report, csv_header, csv_row, evaluate_run_with_policy, markdown_table,
    EvalSummary, ExtractionOutcome, OutOfFormatPolicy,
};
use cagx_core::model::parse_mock_spec;
use cagx_core::postprocess::VerifyMode;
use cagx_core::prompting::{PromptStrategy, TemplateVariant};
use cagx_core::record::FixedDecimal;
use cagx_core::runner::{
    run_matrix, MatrixAxes, ModelSpec, PlausibilitySetting, RunConfig, RunManifest, RunOutput,
};

#[derive(Parser)]
#[command(
    name = "cagx",
    version,
    about = "Extract FFR/iFR measurements from Portuguese angiography reports and score the results"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus
    Gen(GenArgs),
    /// Run one extraction setting over a corpus
    Run(RunArgs),
    /// Sweep a grid of settings over a corpus and combine the results
    Matrix(MatrixArgs),
    /// Re-score a stored outcomes file against its corpus
    Eval(EvalArgs),
    /// Render stored run summaries as a table
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of reports to generate
    #[arg(short = 'n', long = "count", conflicts_with = "report_1")]
    count: Option<usize>,
    /// Use the built-in clinical sparsity profile (about 86.4% of slots
    /// absent, mistyped values included); this is also the default
    #[arg(long = "paper-defaults", conflicts_with_all = ["clean", "report_1"])]
    paper_defaults: bool,
    /// Generate typo-free reports: every value appears in canonical form
    #[arg(long, conflicts_with = "report_1")]
    clean: bool,
    /// Emit only the embedded single-report reference fixture
    #[arg(long = "report-1")]
    report_1: bool,
    /// Generator seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Corpus file to write (JSON Lines)
    #[arg(short, long)]
    output: PathBuf,
}

/// Model selection shared by `run` and `matrix`. Exactly one source must be
/// chosen.
#[derive(Args)]
struct ModelArgs {
    /// Completion endpoint URL (or set CAGX_ENDPOINT)
    #[arg(long, env = "CAGX_ENDPOINT")]
    endpoint: Option<String>,
    /// Scripted model: oracle | all-null | prose-refuser | hallucinator[:rate]
    /// | typo-copier[:v1,v2,..]
    #[arg(long)]
    mock: Option<String>,
    /// Use the regex extractor directly, with no model in the loop
    #[arg(long)]
    baseline: bool,
    /// Pattern rules file for --baseline (defaults to the built-in rules)
    #[arg(long, requires = "baseline")]
    patterns: Option<PathBuf>,
    /// Seed for scripted models
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Extra HTTP attempts after a failed call
    #[arg(long, requires = "endpoint")]
    retries: Option<u32>,
    /// First HTTP retry backoff in milliseconds (doubles per attempt)
    #[arg(long, requires = "endpoint")]
    backoff_ms: Option<u64>,
}

impl ModelArgs {
    fn to_spec(&self) -> Result<ModelSpec> {
        let sources = [self.endpoint.is_some(), self.mock.is_some(), self.baseline];
        match sources.iter().filter(|chosen| **chosen).count() {
            0 => bail!(
                "no model selected: pass --mock, --endpoint (or CAGX_ENDPOINT), or --baseline"
            ),
            1 => {}
            _ => bail!(
                "conflicting model selections: choose exactly one of --mock, --endpoint \
                 (or CAGX_ENDPOINT), --baseline"
            ),
        }
        if let Some(spec) = &self.mock {
            let behavior = parse_mock_spec(spec).map_err(|message| anyhow!(message))?;
            return Ok(ModelSpec::Mock {
                behavior,
                seed: self.seed,
            });
        }
        if self.baseline {
            return Ok(ModelSpec::Baseline {
                patterns: self.patterns.clone(),
            });
        }
        Ok(ModelSpec::Http {
            endpoint: self.endpoint.clone().expect("endpoint presence checked above"),
            retries: self.retries,
            backoff_ms: self.backoff_ms,
        })
    }
}

/// Pipeline settings shared by `run` and `matrix`.
#[derive(Args)]
struct SettingArgs {
    /// Prompting strategy: zero-shot, few-shot, or few-shot-implausible
    #[arg(long, default_value = "zero-shot")]
    strategy: String,
    /// Output template: flat or nested
    #[arg(long, default_value = "flat")]
    template: String,
    /// Decode under the output grammar (scripted models only)
    #[arg(long)]
    constrained: bool,
    /// Post-hoc verification: off, strict, or typo-tolerant
    #[arg(long, default_value = "off")]
    verify: String,
    /// Range filter: 'off' or 'lo,hi'; without the flag, few-shot-implausible
    /// defaults to [0,1] and the other strategies to off
    #[arg(long)]
    plausibility: Option<String>,
    /// Extraction worker count; 1 runs sequentially
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

fn parse_as<T: FromStr>(what: &str, text: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    text.parse::<T>()
        .map_err(|err| anyhow!("bad {what} '{text}': {err}"))
}

fn parse_plausibility(text: Option<&str>) -> Result<PlausibilitySetting> {
    let Some(text) = text else {
        return Ok(PlausibilitySetting::StrategyDefault);
    };
    if text.eq_ignore_ascii_case("off") {
        return Ok(PlausibilitySetting::Off);
    }
    let (lo, hi) = text
        .split_once(',')
        .with_context(|| format!("bad plausibility '{text}': expected 'off' or 'lo,hi'"))?;
    Ok(PlausibilitySetting::Range {
        lo: parse_as::<FixedDecimal>("plausibility bound", lo.trim())?,
        hi: parse_as::<FixedDecimal>("plausibility bound", hi.trim())?,
    })
}

fn build_config(
    corpus: &Path,
    model: &ModelArgs,
    setting: &SettingArgs,
    output: &Path,
) -> Result<RunConfig> {
    Ok(RunConfig {
        corpus: corpus.to_path_buf(),
        model: model.to_spec()?,
        strategy: parse_as("strategy", &setting.strategy)?,
        template: parse_as("template", &setting.template)?,
        constrained: setting.constrained,
        verify_mode: parse_as("verify mode", &setting.verify)?,
        plausibility: parse_plausibility(setting.plausibility.as_deref())?,
        parallelism: setting.parallelism,
        output_dir: output.to_path_buf(),
    })
}

#[derive(Args)]
struct RunArgs {
    /// Corpus file to run over
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    setting: SettingArgs,
    /// Directory for outcomes.jsonl, summary.json, summary.csv, manifest.json
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    /// Corpus file to run over
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    setting: SettingArgs,
    /// Dimension to sweep across all its values; repeatable. One of:
    /// strategy, template, constrained, verify, plausibility
    #[arg(long = "axis", required = true)]
    axes: Vec<String>,
    /// Base directory; each cell writes to a subdirectory named by its setting
    #[arg(short, long)]
    output: PathBuf,
}

fn build_axes(names: &[String]) -> Result<MatrixAxes> {
    let mut axes = MatrixAxes::default();
    for name in names {
        match name.as_str() {
            "strategy" => {
                if !axes.strategies.is_empty() {
                    bail!("axis 'strategy' given twice");
                }
                axes.strategies = PromptStrategy::ALL.to_vec();
            }
            "template" => {
                if !axes.templates.is_empty() {
                    bail!("axis 'template' given twice");
                }
                axes.templates = TemplateVariant::ALL.to_vec();
            }
            "constrained" => {
                if !axes.constrained.is_empty() {
                    bail!("axis 'constrained' given twice");
                }
                axes.constrained = vec![false, true];
            }
            "verify" => {
                if !axes.verify_modes.is_empty() {
                    bail!("axis 'verify' given twice");
                }
                axes.verify_modes =
                    vec![VerifyMode::Off, VerifyMode::Strict, VerifyMode::TypoTolerant];
            }
            "plausibility" => {
                if !axes.plausibility.is_empty() {
                    bail!("axis 'plausibility' given twice");
                }
                axes.plausibility = vec![
                    PlausibilitySetting::Off,
                    PlausibilitySetting::Range {
                        lo: FixedDecimal::from_scaled(0).expect("zero is representable"),
                        hi: FixedDecimal::from_scaled(10_000).expect("one is representable"),
                    },
                ];
            }
            other => bail!(
                "unknown axis '{other}': expected strategy, template, constrained, verify, \
                 or plausibility"
            ),
        }
    }
    Ok(axes)
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus the outcomes were produced from
    #[arg(long)]
    corpus: PathBuf,
    /// outcomes.jsonl written by a previous run
    #[arg(long)]
    outcomes: PathBuf,
    /// Scoring of never-parsed outputs: exclude or score-as-all-null
    #[arg(long, default_value = "exclude")]
    policy: String,
    /// Row label for the CSV line
    #[arg(long, default_value = "re-eval")]
    setting: String,
    /// Optional directory to write summary.json and summary.csv
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (holding summary.json + manifest.json) or summary.json
    /// files
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Table format: markdown or csv
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Also print the asymmetric-cost note for each run
    #[arg(long)]
    asymmetric: bool,
}

fn main() -> Result<()> {
    // Die quietly when the read end of a pipe closes (`cagx ... | head`),
    // like any other line-oriented tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match Cli::parse().command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Matrix(args) => cmd_matrix(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let corpus: Vec<ReportRecord> = if args.report_1 {
        vec![embed_report_1()]
    } else {
        let count = args
            .count
            .context("configuration error: pass -n/--count or --report-1")?;
        let config = if args.clean {
            GeneratorConfig::clean_defaults(count, args.seed)
        } else {
            GeneratorConfig::clinical_defaults(count, args.seed)
        };
        generate_corpus(&config).map_err(|err| anyhow!("configuration error: {err}"))?
    };
    save_corpus(&args.output, &corpus)?;
    let absent: usize = corpus.iter().map(|r| r.truth.absent_count()).sum();
    let fraction = absent as f64 / (10 * corpus.len()) as f64;
    println!(
        "wrote {} report{} to {}",
        corpus.len(),
        if corpus.len() == 1 { "" } else { "s" },
        args.output.display()
    );
    println!("fingerprint {}", corpus_fingerprint(&corpus));
    println!("absent-slot fraction {fraction:.3}");
    Ok(())
}

fn print_run(output: &RunOutput) {
    let summary = &output.summary;
    let counts = &summary.counts;
    let d = &summary.detection;
    println!("setting {}", output.manifest.setting);
    println!(
        "reports {}  out-of-format {}",
        output.manifest.report_count, summary.out_of_format_count
    );
    println!(
        "tp {}  fp {}  fn {}  tn {}",
        counts.tp, counts.fp, counts.fn_, counts.tn
    );
    println!(
        "accuracy {:.3}  precision {:.3}  recall {:.3}  f1 {:.3}  value_accuracy {}",
        d.accuracy,
        d.precision,
        d.recall,
        d.f1,
        match summary.value_accuracy {
            Some(v) => format!("{v:.3}"),
            None => "N/A".to_string(),
        }
    );
    println!("{}", asymmetric_report(summary).headline);
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = build_config(&args.corpus, &args.model, &args.setting, &args.output)?;
    let output = cagx_core::runner::run(&cfg)?;
    print_run(&output);
    println!("wrote {}", args.output.join("outcomes.jsonl").display());
    println!("wrote {}", args.output.join("summary.json").display());
    println!("wrote {}", args.output.join("summary.csv").display());
    println!("wrote {}", args.output.join("manifest.json").display());
    Ok(())
}

fn cmd_matrix(args: MatrixArgs) -> Result<()> {
    let base = build_config(&args.corpus, &args.model, &args.setting, &args.output)?;
    let axes = build_axes(&args.axes)?;
    let outcome = run_matrix(&base, &axes)?;
    let mut failures = 0usize;
    for cell in &outcome.cells {
        match &cell.result {
            Ok(_) => println!("cell {} ok", cell.setting),
            Err(err) => {
                failures += 1;
                eprintln!("cell {} failed: {err}", cell.setting);
            }
        }
    }
    print!("{}", outcome.combined_csv);
    for (key, delta) in &outcome.template_deltas {
        println!(
            "template delta {key}: precision {:+.3} recall {:+.3} f1 {:+.3}",
            delta.precision, delta.recall, delta.f1
        );
    }
    println!("wrote {}", args.output.join("matrix.csv").display());
    if failures > 0 {
        bail!("{failures} matrix cell(s) failed");
    }
    Ok(())
}

fn parse_policy(text: &str) -> Result<OutOfFormatPolicy> {
    match text {
        "exclude" => Ok(OutOfFormatPolicy::Exclude),
        "score-as-all-null" => Ok(OutOfFormatPolicy::ScoreAsAllNull),
        other => bail!("bad policy '{other}': expected exclude or score-as-all-null"),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let text = fs::read_to_string(&args.outcomes)
        .with_context(|| format!("failed to read {}", args.outcomes.display()))?;
    let outcomes: Vec<ExtractionOutcome> = text
        .lines()
        .enumerate()
        .map(|(index, line)| {
            serde_json::from_str(line).with_context(|| {
                format!("{}: line {} is not an outcome", args.outcomes.display(), index + 1)
            })
        })
        .collect::<Result<_>>()?;
    let policy = parse_policy(&args.policy)?;
    let summary = evaluate_run_with_policy(&corpus, &outcomes, policy)?;
    println!("{}", csv_header());
    println!("{}", csv_row(&args.setting, &summary));
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail")
    );
    if let Some(dir) = &args.output {
        fs::create_dir_all(dir)
            .with_context(|| format!("failed to create {}", dir.display()))?;
        fs::write(
            dir.join("summary.json"),
            format!(
                "{}\n",
                serde_json::to_string_pretty(&summary)
                    .expect("summary serialization cannot fail")
            ),
        )?;
        fs::write(
            dir.join("summary.csv"),
            format!("{}\n{}\n", csv_header(), csv_row(&args.setting, &summary)),
        )?;
        println!("wrote {}", dir.join("summary.json").display());
        println!("wrote {}", dir.join("summary.csv").display());
    }
    Ok(())
}

/// Loads a run's summary and display label from a run directory or a bare
/// summary.json path.
fn load_labelled_summary(path: &Path) -> Result<(String, EvalSummary)> {
    let (summary_path, label) = if path.is_dir() {
        let manifest_path = path.join("manifest.json");
        let label = fs::read_to_string(&manifest_path)
            .ok()
            .and_then(|text| serde_json::from_str::<RunManifest>(&text).ok())
            .map(|manifest| manifest.setting);
        let label = label.unwrap_or_else(|| {
            path.file_name()
                .map(|name| name.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string())
        });
        (path.join("summary.json"), label)
    } else {
        let label = path
            .parent()
            .and_then(Path::file_name)
            .map(|name| name.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        (path.to_path_buf(), label)
    };
    let text = fs::read_to_string(&summary_path)
        .with_context(|| format!("failed to read {}", summary_path.display()))?;
    let summary: EvalSummary = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a run summary", summary_path.display()))?;
    Ok((label, summary))
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let rows: Vec<(String, EvalSummary)> = args
        .runs
        .iter()
        .map(|path| load_labelled_summary(path))
        .collect::<Result<_>>()?;
    match args.format.as_str() {
        "markdown" => print!("{}", markdown_table(&rows)),
        "csv" => {
            println!("{}", csv_header());
            for (label, summary) in &rows {
                println!("{}", csv_row(label, summary));
            }
        }
        other => bail!("bad format '{other}': expected markdown or csv"),
    }
    if args.asymmetric {
        for (label, summary) in &rows {
            println!("== {label}");
            print!("{}", asymmetric_report(summary).rendered);
        }
    }
    Ok(())
}
