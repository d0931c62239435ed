//! Request-level screening shared by the HTTP service, the CLI and the C ABI.
//!
//! Everything here is synchronous; callers on an async runtime should run it
//! on a blocking thread.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::casemodel::io::{read_jsonl, CorpusError};
use crate::casemodel::{validate_case, CaseRecord, Cdr, Gender, Handedness, LabelSet, NumericField, SubtypeLabel, ValidationErrors};
use crate::config::BackendChoice;
use crate::diagnose::{
    checkpoint_load, predict_local, predict_remote, Checkpoint, DiagnoseError, DiagnosisReport, RemoteConfig,
};
use crate::retrieval::{index_load, CaseBase, RetrievalError};

/// Closed set of error tags returned by every public surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ErrorCode {
    ValidationFailed,
    BadRequest,
    UnknownCase,
    NotFound,
    NotReady,
    Unauthorized,
    PayloadUnparseable,
    BackendTimeout,
    BackendHttpError,
    BackendUnreachable,
    BackendNotConfigured,
    CorruptArtifact,
    VersionMismatch,
    IoFailure,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 15] = [
        ErrorCode::ValidationFailed,
        ErrorCode::BadRequest,
        ErrorCode::UnknownCase,
        ErrorCode::NotFound,
        ErrorCode::NotReady,
        ErrorCode::Unauthorized,
        ErrorCode::PayloadUnparseable,
        ErrorCode::BackendTimeout,
        ErrorCode::BackendHttpError,
        ErrorCode::BackendUnreachable,
        ErrorCode::BackendNotConfigured,
        ErrorCode::CorruptArtifact,
        ErrorCode::VersionMismatch,
        ErrorCode::IoFailure,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::ValidationFailed => "ValidationFailed",
            ErrorCode::BadRequest => "BadRequest",
            ErrorCode::UnknownCase => "UnknownCase",
            ErrorCode::NotFound => "NotFound",
            ErrorCode::NotReady => "NotReady",
            ErrorCode::Unauthorized => "Unauthorized",
            ErrorCode::PayloadUnparseable => "PayloadUnparseable",
            ErrorCode::BackendTimeout => "BackendTimeout",
            ErrorCode::BackendHttpError => "BackendHttpError",
            ErrorCode::BackendUnreachable => "BackendUnreachable",
            ErrorCode::BackendNotConfigured => "BackendNotConfigured",
            ErrorCode::CorruptArtifact => "CorruptArtifact",
            ErrorCode::VersionMismatch => "VersionMismatch",
            ErrorCode::IoFailure => "IoFailure",
            ErrorCode::Internal => "Internal",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScreenError {
    #[error(transparent)]
    Validation(#[from] ValidationErrors),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("remote backend requested but not configured")]
    BackendNotConfigured,
    #[error(transparent)]
    Diagnose(#[from] DiagnoseError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("artifacts disagree: {0}")]
    Mismatch(String),
}

impl ScreenError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ScreenError::Validation(_) => ErrorCode::ValidationFailed,
            ScreenError::BadRequest(_) => ErrorCode::BadRequest,
            ScreenError::UnknownCase(_) => ErrorCode::UnknownCase,
            ScreenError::BackendNotConfigured => ErrorCode::BackendNotConfigured,
            ScreenError::Diagnose(e) => match e {
                DiagnoseError::BackendTimeout { .. } => ErrorCode::BackendTimeout,
                DiagnoseError::BackendHttpError { .. } => ErrorCode::BackendHttpError,
                DiagnoseError::BackendTransport(_) => ErrorCode::BackendUnreachable,
                DiagnoseError::VersionMismatch { .. } => ErrorCode::VersionMismatch,
                DiagnoseError::CorruptCheckpoint(_) => ErrorCode::CorruptArtifact,
                DiagnoseError::Io(_) => ErrorCode::IoFailure,
                _ => ErrorCode::Internal,
            },
            ScreenError::Retrieval(RetrievalError::IoFailure(_)) | ScreenError::Corpus(CorpusError::Io(_)) => {
                ErrorCode::IoFailure
            }
            ScreenError::Retrieval(_) | ScreenError::Corpus(_) | ScreenError::Mismatch(_) => {
                ErrorCode::CorruptArtifact
            }
        }
    }

    /// Error body shared by HTTP and the C ABI.
    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.code().as_str(), "message": self.to_string() });
        match self {
            ScreenError::Validation(errs) => {
                v["fields"] = Value::Array(errs.0.iter().map(|e| e.to_json()).collect());
            }
            ScreenError::Diagnose(DiagnoseError::BackendTimeout { attempts }) => v["attempts"] = json!(attempts),
            ScreenError::Diagnose(DiagnoseError::BackendHttpError { status, body_digest }) => {
                v["status"] = json!(status);
                v["body_digest"] = json!(body_digest);
            }
            _ => {}
        }
        v
    }
}

/// A loaded checkpoint and the case base it retrieves from.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub checkpoint: Checkpoint,
    pub base: CaseBase,
    pub checkpoint_digest: String,
    pub config_digest: String,
}

impl Artifacts {
    pub fn new(checkpoint: Checkpoint, base: CaseBase) -> Result<Self, ScreenError> {
        let d = checkpoint.model.d();
        if !base.is_empty() && base.index.dim() != d {
            return Err(ScreenError::Mismatch(format!("index dim {} but model d {d}", base.index.dim())));
        }
        let config_digest = hex::encode(Sha256::digest(
            serde_json::to_vec(&(&checkpoint.model.config, &checkpoint.train)).expect("config serializes"),
        ));
        Ok(Self { checkpoint_digest: checkpoint.digest(), config_digest, checkpoint, base })
    }

    /// Index every record with the checkpoint's encoder.
    pub fn build(checkpoint: Checkpoint, records: Vec<CaseRecord>) -> Result<Self, ScreenError> {
        let m = &checkpoint.model;
        let base = CaseBase::build(records, &m.encoder, m.stats.as_ref())?;
        Self::new(checkpoint, base)
    }

    /// Load a checkpoint, a saved index and the JSONL corpus it was built
    /// from. Every indexed id needs a record whose narrative digest matches.
    pub fn load(checkpoint: &Path, index: &Path, corpus: &Path) -> Result<Self, ScreenError> {
        let ckpt = checkpoint_load(checkpoint)?;
        let index = index_load(index)?;
        let records = read_jsonl(corpus)?;
        for r in &records {
            if let Some(e) = index.get(r.id()) {
                if e.digest != r.narrative_digest() {
                    return Err(ScreenError::Mismatch(format!("record {:?} differs from its indexed copy", r.id())));
                }
            }
        }
        let base = CaseBase::from_parts(index, records)?;
        Self::new(ckpt, base)
    }

    /// A copy with `more` appended to the case base. Ids already present are
    /// skipped and returned.
    pub fn with_records(&self, more: Vec<CaseRecord>) -> Result<(Self, Vec<String>), ScreenError> {
        let m = &self.checkpoint.model;
        let mut index = self.base.index.clone();
        let mut records: Vec<CaseRecord> = self.base.records().cloned().collect();
        let mut skipped = Vec::new();
        for r in more {
            if index.contains(r.id()) {
                skipped.push(r.id().to_string());
                continue;
            }
            let e = m.encoder.embed_cls(&r, m.stats.as_ref()).map_err(RetrievalError::from)?;
            index.add(r.id(), &e.vector, r.labels, r.narrative_digest())?;
            records.push(r);
        }
        let base = CaseBase::from_parts(index, records)?;
        Ok((Self { base, ..self.clone() }, skipped))
    }

    pub fn ids(&self) -> HashSet<String> {
        self.base.index.entries().iter().map(|e| e.id.clone()).collect()
    }
}

/// A parsed screening request.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenRequest {
    pub record: CaseRecord,
    pub k: Option<usize>,
    pub backend: Option<BackendChoice>,
}

fn take_k(m: &mut Map<String, Value>) -> Result<Option<usize>, ScreenError> {
    match m.remove("k") {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .filter(|k| *k >= 1)
            .map(|k| Some(k as usize))
            .ok_or_else(|| ScreenError::BadRequest("k must be a positive integer".into())),
    }
}

/// Parse `{case fields..., "k"?, "backend"?}`.
pub fn parse_screen_request(body: Value) -> Result<ScreenRequest, ScreenError> {
    let Value::Object(mut m) = body else {
        return Err(ScreenError::BadRequest("expected a JSON object".into()));
    };
    let k = take_k(&mut m)?;
    let backend = match m.remove("backend") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<BackendChoice>(v)
                .map_err(|_| ScreenError::BadRequest("backend must be \"local\" or \"remote\"".into()))?,
        ),
    };
    // a label set on a screening request is never used
    m.remove("labels");
    let case = validate_case(&m)?;
    Ok(ScreenRequest { record: CaseRecord::new(case, LabelSet::EMPTY), k, backend })
}

/// Key fields of a retrieved case, for display next to its scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseSummary {
    pub id: String,
    pub labels: LabelSet,
    pub mmse: f64,
    pub cdr: f64,
    pub age: f64,
    pub nwbv: Option<f64>,
    pub narrative_digest: String,
}

impl CaseSummary {
    pub fn of(r: &CaseRecord) -> Self {
        Self {
            id: r.id().to_string(),
            labels: r.labels,
            mmse: r.case.mmse,
            cdr: r.case.cdr.value(),
            age: r.case.age,
            nwbv: r.case.nwbv,
            narrative_digest: hex::encode(r.narrative_digest()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenResponse {
    pub id: String,
    #[serde(flatten)]
    pub report: DiagnosisReport,
    pub cases: Vec<CaseSummary>,
    pub checkpoint_digest: String,
    pub config_digest: String,
}

/// Screen one case against the loaded artifacts.
pub fn screen(
    art: &Artifacts,
    req: &ScreenRequest,
    default_backend: BackendChoice,
    remote: Option<&RemoteConfig>,
) -> Result<ScreenResponse, ScreenError> {
    let model = &art.checkpoint.model;
    let report = match req.backend.unwrap_or(default_backend) {
        BackendChoice::Local => predict_local(&req.record, model, &art.base, req.k)?,
        BackendChoice::Remote => {
            let cfg = remote.ok_or(ScreenError::BackendNotConfigured)?;
            let retrieved = model.neighbours(&req.record, &art.base, req.k.unwrap_or(model.config.k))?;
            predict_remote(&req.record, &retrieved, &art.base, cfg)?
        }
    };
    let cases = report.evidence.iter().filter_map(|e| art.base.record(&e.id)).map(CaseSummary::of).collect();
    Ok(ScreenResponse {
        id: req.record.id().to_string(),
        report,
        cases,
        checkpoint_digest: art.checkpoint_digest.clone(),
        config_digest: art.config_digest.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbour {
    pub cosine: f64,
    pub rerank: Option<f64>,
    #[serde(flatten)]
    pub case: CaseSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarResponse {
    pub id: String,
    pub k_requested: usize,
    pub k_actual: usize,
    pub neighbours: Vec<Neighbour>,
}

/// Nearest indexed cases to the indexed case `id`, itself excluded.
pub fn similar(art: &Artifacts, id: &str, k: usize) -> Result<SimilarResponse, ScreenError> {
    if k == 0 {
        return Err(ScreenError::BadRequest("k must be at least 1".into()));
    }
    let record = art.base.record(id).ok_or_else(|| ScreenError::UnknownCase(id.to_string()))?;
    let got = art.checkpoint.model.neighbours(record, &art.base, k)?;
    let neighbours = got
        .items
        .iter()
        .filter_map(|c| {
            art.base.record(&c.id).map(|r| Neighbour { cosine: c.cosine, rerank: c.rerank, case: CaseSummary::of(r) })
        })
        .collect::<Vec<_>>();
    Ok(SimilarResponse { id: id.to_string(), k_requested: k, k_actual: neighbours.len(), neighbours })
}

fn bound(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// Machine-readable description of the case fields, labels and error codes.
pub fn case_schema() -> Value {
    let mut fields = vec![json!({ "name": "id", "type": "string", "required": true })];
    for f in NumericField::ALL {
        let integer = f == NumericField::ApoeE4Count;
        let r = f.range();
        fields.push(json!({
            "name": f.name(),
            "type": if integer { "integer" } else { "number" },
            "required": f.required(),
            "range": { "min": bound(r.lo), "max": bound(r.hi), "min_exclusive": r.lo_open, "max_exclusive": r.hi_open },
        }));
    }
    fields.push(json!({
        "name": "cdr", "type": "number", "required": true,
        "categories": Cdr::ALL.iter().map(|c| c.value()).collect::<Vec<_>>(),
    }));
    fields.push(json!({
        "name": "gender", "type": "category", "required": false,
        "categories": Gender::ALL.iter().map(|g| g.token()).collect::<Vec<_>>(),
    }));
    fields.push(json!({
        "name": "handedness", "type": "category", "required": false,
        "categories": Handedness::ALL.iter().map(|h| h.token()).collect::<Vec<_>>(),
    }));
    fields.push(json!({
        "name": "ses", "type": "integer", "required": false,
        "range": { "min": 1, "max": 5, "min_exclusive": false, "max_exclusive": false },
    }));
    fields.sort_by(|a, b| a["name"].as_str().cmp(&b["name"].as_str()));
    json!({
        "fields": fields,
        "labels": SubtypeLabel::ALL.iter().map(|l| json!({ "code": l.code(), "key": l.key(), "name": l.display_name() })).collect::<Vec<_>>(),
        "request_options": {
            "k": { "type": "integer", "min": 1, "default": crate::retrieval::DEFAULT_K },
            "backend": { "type": "category", "categories": ["local", "remote"], "default": "local" },
        },
        "error_codes": ErrorCode::ALL.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
    })
}
