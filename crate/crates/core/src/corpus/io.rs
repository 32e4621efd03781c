//! JSONL persistence for corpora: one report object per line with the fields
//! `id`, `text`, `truth` (flat ten-key object), and `meta`. Loading is
//! strict — malformed lines and duplicate ids fail with their line numbers —
//! and round-trips are byte-stable, which is what run manifests fingerprint.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CorpusError, ReportRecord};

/// Writes a corpus as JSONL. Field order and number formatting are stable,
/// so equal corpora produce equal bytes.
pub fn save_corpus(path: &Path, reports: &[ReportRecord]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        action: "write",
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for report in reports {
        let line = serde_json::to_string(report).expect("report serialization cannot fail");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Loads a JSONL corpus. Every malformed line is reported with its 1-based
/// line number; duplicate report ids are rejected.
pub fn load_corpus(path: &Path) -> Result<Vec<ReportRecord>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        action: "open",
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut reports = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            action: "read",
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let report: ReportRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        if let Some(first_line) = seen.insert(report.id.clone(), line_no) {
            return Err(CorpusError::DuplicateId {
                path: path.display().to_string(),
                line: line_no,
                first_line,
                id: report.id,
            });
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Content fingerprint of a corpus: SHA-256 over its canonical JSONL
/// serialization. Stable across load/save round-trips.
pub fn corpus_fingerprint(reports: &[ReportRecord]) -> String {
    let mut hasher = Sha256::new();
    for report in reports {
        let line = serde_json::to_string(report).expect("report serialization cannot fail");
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{embed_report_1, generate_corpus, GeneratorConfig};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("cagx-corpus-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{}-{}", std::process::id(), name))
    }

    #[test]
    fn save_load_round_trip_preserves_records_and_bytes() {
        let corpus = generate_corpus(&GeneratorConfig::clinical_defaults(40, 21)).unwrap();
        let path = tmp("roundtrip.jsonl");
        save_corpus(&path, &corpus).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, corpus);

        let bytes_first = std::fs::read(&path).unwrap();
        save_corpus(&path, &loaded).unwrap();
        let bytes_second = std::fs::read(&path).unwrap();
        assert_eq!(bytes_first, bytes_second, "round-trip must be byte-stable");
        assert_eq!(corpus_fingerprint(&corpus), corpus_fingerprint(&loaded));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_line_errors_carry_the_line_number() {
        let path = tmp("malformed.jsonl");
        let good = serde_json::to_string(&embed_report_1()).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"id\": \"broken\"\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn duplicate_ids_are_rejected_with_both_lines() {
        let path = tmp("dupes.jsonl");
        let line = serde_json::to_string(&embed_report_1()).unwrap();
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate report id"), "{msg}");
        assert!(msg.contains("line 2") && msg.contains("line 1"), "{msg}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn comma_separator_truth_values_are_rejected() {
        let path = tmp("comma.jsonl");
        let line = serde_json::to_string(&embed_report_1()).unwrap();
        let bad = line.replace("\"Descendente_Anterior_FFR\":0.83", "\"Descendente_Anterior_FFR\":\"0,83\"");
        assert_ne!(line, bad, "replacement must have applied");
        std::fs::write(&path, format!("{bad}\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("separator must be '.'"), "{msg}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn unknown_fields_fail_loading() {
        let path = tmp("unknown.jsonl");
        let mut value: serde_json::Value =
            serde_json::to_value(embed_report_1()).unwrap();
        value.as_object_mut().unwrap().insert("surprise".into(), 1.into());
        std::fs::write(&path, format!("{value}\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        std::fs::remove_file(&path).ok();
    }
}
