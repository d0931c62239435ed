//! JSON-Lines and CSV corpus import/export.
//!
//! A JSONL line is a flat object holding the `PatientCase` fields plus
//! `labels`, an array of integer subtype codes (0–4). A `narrative` key, if
//! present, is ignored; it is always re-rendered.
//!
//! CSV import expects a header row. Columns are matched case-insensitively
//! against the field names, with these additional aliases:
//!
//! | header                      | field                |
//! |-----------------------------|----------------------|
//! | `subject`, `subject_id`     | `id`                 |
//! | `m/f`, `sex`                | `gender`             |
//! | `hand`                      | `handedness`         |
//! | `educ`, `education_years`   | `education`          |
//! | `hippocampus`               | `hippocampal_volume` |
//! | `amygdala`                  | `amygdala_volume`    |
//! | `ventricles`                | `ventricular_volume` |
//! | `wmh`                       | `wmh_load`           |
//! | `apoe4`, `apoe_e4`          | `apoe_e4_count`      |
//!
//! Empty cells are treated as absent. `labels` holds `;`-separated codes or
//! label keys (`late_onset;sporadic`).

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde_json::{Map, Value};

use super::case::{validate_case, LabelSet, SubtypeLabel, ValidationErrors, CASE_FIELDS};
use super::CaseRecord;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: ValidationErrors },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: bad labels: {message}")]
    Labels { line: usize, message: String },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CorpusError {
    /// Stable reason tag for per-line rejection reports.
    pub fn reason(&self) -> &'static str {
        match self {
            CorpusError::Invalid { source, .. } => source.first().code(),
            CorpusError::Json { .. } => "MalformedJson",
            CorpusError::Labels { .. } => "BadLabels",
            CorpusError::DuplicateId { .. } => "DuplicateId",
            CorpusError::Csv(_) => "MalformedCsv",
            CorpusError::Io(_) => "IoFailure",
        }
    }
}

pub fn record_to_json(r: &CaseRecord) -> Value {
    let mut m = r.case.to_field_map();
    m.insert("labels".into(), serde_json::to_value(r.labels).expect("labels"));
    Value::Object(m)
}

fn parse_labels(v: &Value) -> Result<LabelSet, String> {
    match v {
        Value::Null => Ok(LabelSet::EMPTY),
        Value::Array(_) => serde_json::from_value::<LabelSet>(v.clone()).map_err(|e| e.to_string()),
        Value::String(s) => parse_label_list(s),
        _ => Err("labels must be an array of codes".into()),
    }
}

fn parse_label_list(s: &str) -> Result<LabelSet, String> {
    let mut set = LabelSet::EMPTY;
    for tok in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        let label = tok
            .parse::<u8>()
            .ok()
            .and_then(SubtypeLabel::from_code)
            .or_else(|| SubtypeLabel::ALL.into_iter().find(|l| l.key() == tok))
            .ok_or_else(|| format!("unknown label {tok:?}"))?;
        if set.contains(label) {
            return Err(format!("duplicate label {tok:?}"));
        }
        set.insert(label);
    }
    Ok(set)
}

/// Parse one record object (already decoded from JSON).
pub fn record_from_map(mut m: Map<String, Value>, line: usize) -> Result<CaseRecord, CorpusError> {
    let labels = m
        .remove("labels")
        .map(|v| parse_labels(&v))
        .transpose()
        .map_err(|message| CorpusError::Labels { line, message })?
        .unwrap_or(LabelSet::EMPTY);
    m.remove("narrative");
    let case = validate_case(&m).map_err(|source| CorpusError::Invalid { line, source })?;
    Ok(CaseRecord::new(case, labels))
}

pub fn parse_jsonl_line(text: &str, line: usize) -> Result<CaseRecord, CorpusError> {
    let v: Value = serde_json::from_str(text).map_err(|e| CorpusError::Json { line, message: e.to_string() })?;
    match v {
        Value::Object(m) => record_from_map(m, line),
        _ => Err(CorpusError::Json { line, message: "expected an object".into() }),
    }
}

/// Outcome of a lenient bulk parse: good records plus per-line rejections.
#[derive(Debug, Default)]
pub struct ParsedCorpus {
    pub records: Vec<CaseRecord>,
    pub rejected: Vec<CorpusError>,
}

/// Parse JSONL text line by line (1-based line numbers, blank lines skipped).
/// Ids in `existing` and repeated ids within the text are rejected.
pub fn parse_jsonl_lenient(text: &str, existing: &HashSet<String>) -> ParsedCorpus {
    let mut out = ParsedCorpus::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        match parse_jsonl_line(l, line) {
            Ok(r) => {
                if existing.contains(r.id()) || !seen.insert(r.id().to_string()) {
                    out.rejected.push(CorpusError::DuplicateId { line, id: r.id().to_string() });
                } else {
                    out.records.push(r);
                }
            }
            Err(e) => out.rejected.push(e),
        }
    }
    out
}

/// Strict JSONL read: any bad line is an error.
pub fn read_jsonl(path: &Path) -> Result<Vec<CaseRecord>, CorpusError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, l) in std::io::BufReader::new(f).lines().enumerate() {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let r = parse_jsonl_line(&l, i + 1)?;
        if !seen.insert(r.id().to_string()) {
            return Err(CorpusError::DuplicateId { line: i + 1, id: r.id().to_string() });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[CaseRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &record_to_json(r))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_jsonl_file(path: &Path, records: &[CaseRecord]) -> std::io::Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_jsonl(&mut w, records)?;
    w.flush()
}

fn map_header(h: &str) -> String {
    let h = h.trim().to_ascii_lowercase();
    let mapped = match h.as_str() {
        "subject" | "subject_id" => "id",
        "m/f" | "sex" => "gender",
        "hand" => "handedness",
        "educ" | "education_years" => "education",
        "hippocampus" => "hippocampal_volume",
        "amygdala" => "amygdala_volume",
        "ventricles" => "ventricular_volume",
        "wmh" => "wmh_load",
        "apoe4" | "apoe_e4" => "apoe_e4_count",
        other => other,
    };
    mapped.to_string()
}

/// Read a CSV corpus with a header row (see module docs for the mapping).
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<CaseRecord>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CorpusError::Csv(e.to_string()))?
        .iter()
        .map(map_header)
        .collect();
    for h in &headers {
        if h != "labels" && !CASE_FIELDS.contains(&h.as_str()) {
            return Err(CorpusError::Csv(format!("unmapped column {h:?}")));
        }
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CorpusError::Csv(e.to_string()))?;
        let mut m = Map::new();
        for (h, cell) in headers.iter().zip(row.iter()) {
            if cell.is_empty() {
                continue;
            }
            let v = if h == "id" || h == "labels" {
                Value::from(cell)
            } else if let Ok(n) = cell.parse::<f64>() {
                serde_json::Number::from_f64(n).map_or(Value::from(cell), Value::Number)
            } else {
                Value::from(cell)
            };
            m.insert(h.clone(), v);
        }
        let r = record_from_map(m, line)?;
        if !seen.insert(r.id().to_string()) {
            return Err(CorpusError::DuplicateId { line, id: r.id().to_string() });
        }
        out.push(r);
    }
    Ok(out)
}
