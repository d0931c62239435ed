//! Diagnosis from the fused representation, training, checkpoints and the
//! remote prompt-concatenation backend.
//!
//! The local head is linear over `[fusion ‖ target cls]` followed by a
//! per-label sigmoid. A label is decided when its score is at least the
//! threshold (inclusive).

mod checkpoint;
mod remote;
mod train;

use serde::{Deserialize, Serialize};

use crate::casemodel::{CaseRecord, LabelSet, PreprocessError, PreprocessStats, SubtypeLabel};
use crate::encoder::{EncoderConfig, EncoderError, EncoderMode, EncoderParams, HiddenSequence};
use crate::fusion::{
    build_concat, fuse, splice_prompt, ConcatMatrix, FusionError, FusionOutput, FusionParams, PromptSequence,
    DEFAULT_DK,
};
use crate::linalg::{sigmoid, Matrix};
use crate::retrieval::{retrieve_vector, CaseBase, RerankerParams, RetrievalError, RetrievedSet};

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_load, checkpoint_save, checkpoint_to_bytes, Checkpoint, CHECKPOINT_FORMAT_VERSION,
    CHECKPOINT_MAGIC,
};
pub use remote::{parse_labels, predict_remote, build_request, RemoteConfig, RemoteTemplate};
pub use train::{
    example_loss, example_loss_grads, rerank_aux_loss_grads, train, AdamW, EpochLog, Grads, LlmStageSettings,
    TrainConfig, TrainLog,
};

pub const LABELS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum DiagnoseError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format_version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("remote backend timed out after {attempts} attempt(s)")]
    BackendTimeout { attempts: u32 },
    #[error("remote backend returned HTTP {status} (body sha256 {body_digest})")]
    BackendHttpError { status: u16, body_digest: String },
    #[error("remote backend unreachable: {0}")]
    BackendTransport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DiagnoseError {
    /// Stable machine-readable tag.
    pub fn code(&self) -> &'static str {
        match self {
            DiagnoseError::Encoder(_) => "EncoderError",
            DiagnoseError::Retrieval(RetrievalError::EmptyIndex) => "EmptyIndex",
            DiagnoseError::Retrieval(_) => "RetrievalError",
            DiagnoseError::Fusion(_) => "FusionError",
            DiagnoseError::Preprocess(_) => "PreprocessError",
            DiagnoseError::EmptyTrainSplit => "EmptyTrainSplit",
            DiagnoseError::BadConfig(_) => "BadConfig",
            DiagnoseError::CorruptCheckpoint(_) => "CorruptCheckpoint",
            DiagnoseError::VersionMismatch { .. } => "VersionMismatch",
            DiagnoseError::BackendTimeout { .. } => "BackendTimeout",
            DiagnoseError::BackendHttpError { .. } => "BackendHttpError",
            DiagnoseError::BackendTransport(_) => "BackendUnreachable",
            DiagnoseError::Io(_) => "IoFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    LocalFusion,
    RemoteConcat,
    LocalNoRag,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evidence {
    pub id: String,
    pub cosine: f64,
    pub rerank: Option<f64>,
    /// Total attention mass on this case's rows (local fusion only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisReport {
    pub scores: [f64; LABELS],
    pub decided: LabelSet,
    pub threshold: f64,
    pub evidence: Vec<Evidence>,
    pub backend: Backend,
    pub no_evidence: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub parse_failure: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_attempts: Option<u32>,
}

/// Labels whose score is `>= threshold`.
pub fn decide(scores: &[f64; LABELS], threshold: f64) -> LabelSet {
    SubtypeLabel::ALL.into_iter().zip(scores).filter(|(_, s)| **s >= threshold).map(|(l, _)| l).collect()
}

/// Mean binary cross-entropy over the five labels; scores are clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(scores: &[f64; LABELS], gold: LabelSet) -> f64 {
    SubtypeLabel::ALL
        .into_iter()
        .zip(scores)
        .map(|(l, &s)| {
            let p = s.clamp(1e-7, 1.0 - 1e-7);
            if gold.contains(l) {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / LABELS as f64
}

/// Linear map from `[fusion ‖ cls]` to five logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `5 × (d_k + d)`
    pub w: Matrix,
    /// `1 × 5`
    pub b: Matrix,
}

impl HeadParams {
    pub fn init<R: rand::Rng + ?Sized>(d_k: usize, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((d_k + d) as f64).sqrt();
        Self { w: Matrix::uniform(LABELS, d_k + d, bound, rng), b: Matrix::zeros(1, LABELS) }
    }

    pub fn logits(&self, input: &[f64]) -> [f64; LABELS] {
        let mut out = [0.0; LABELS];
        for (i, (o, z)) in out.iter_mut().zip(self.w.matvec(input)).enumerate() {
            *o = z + self.b.get(0, i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_k: usize,
    pub shared_kv: bool,
    /// Auxiliary cases fused at inference; 0 disables retrieval.
    pub k: usize,
    /// First-stage candidate count; `None` means `min(1000, index size)`.
    pub n1: Option<usize>,
    pub threshold: f64,
    /// Seed for fusion, head and prompt initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            d_k: DEFAULT_DK,
            shared_kv: true,
            k: crate::retrieval::DEFAULT_K,
            n1: None,
            threshold: 0.5,
            seed: 23,
        }
    }
}

/// Every parameter the local pipeline needs at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub head: HeadParams,
    pub reranker: RerankerParams,
    pub prompt: PromptSequence,
    pub stats: Option<PreprocessStats>,
}

impl Model {
    pub fn init(config: ModelConfig, stats: Option<PreprocessStats>) -> Result<Self, DiagnoseError> {
        if config.encoder.mode == EncoderMode::Structured && stats.is_none() {
            return Err(DiagnoseError::BadConfig("structured encoder needs preprocessing stats".into()));
        }
        if config.d_k == 0 {
            return Err(DiagnoseError::BadConfig("d_k must be at least 1".into()));
        }
        if !(config.threshold > 0.0 && config.threshold <= 1.0) {
            return Err(DiagnoseError::BadConfig(format!("threshold {} outside (0, 1]", config.threshold)));
        }
        let feature_len = stats.as_ref().map_or(0, PreprocessStats::feature_len);
        let encoder = EncoderParams::init(config.encoder.clone(), feature_len)?;
        let d = encoder.d();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
        let fusion = FusionParams::init(d, config.d_k, config.shared_kv, &mut rng);
        let head = HeadParams::init(config.d_k, d, &mut rng);
        let prompt = PromptSequence::default_template(config.d_k, config.seed ^ 0x5eed);
        Ok(Self { reranker: RerankerParams::identity(d), encoder, fusion, head, prompt, stats, config })
    }

    pub fn d(&self) -> usize {
        self.encoder.d()
    }

    /// Named parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.tensors();
        out.extend(self.fusion.tensors());
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out.push(("reranker.m".into(), &self.reranker.m));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.fusion.tensors_mut());
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out.push(("reranker.m".into(), &mut self.reranker.m));
        out
    }

    pub fn encode_query(&self, record: &CaseRecord) -> Result<HiddenSequence, DiagnoseError> {
        Ok(self.encoder.encode(record, self.stats.as_ref())?)
    }

    pub fn encode_reference(&self, record: &CaseRecord) -> Result<HiddenSequence, DiagnoseError> {
        Ok(self.encoder.encode_reference(record, self.stats.as_ref())?)
    }

    /// Neighbours of `record` in `base` (itself excluded). Empty when the
    /// model does not use retrieval or `base` has nothing else to offer.
    pub fn neighbours(&self, record: &CaseRecord, base: &CaseBase, k: usize) -> Result<RetrievedSet, DiagnoseError> {
        if k == 0 || base.is_empty() {
            return Ok(RetrievedSet { items: vec![], k_requested: k });
        }
        let q = self.encoder.embed_cls(record, self.stats.as_ref())?;
        match retrieve_vector(&q.vector, Some(record.id()), &base.index, &self.reranker, k, self.config.n1) {
            Ok(r) => Ok(r),
            Err(RetrievalError::EmptyIndex) => Ok(RetrievedSet { items: vec![], k_requested: k }),
            Err(e) => Err(e.into()),
        }
    }
}

/// Head input, logits and scores for one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct HeadForward {
    pub fusion: FusionOutput,
    pub input: Vec<f64>,
    pub scores: [f64; LABELS],
}

pub(crate) fn head_forward(
    model: &Model,
    t_cls: &[f64],
    concat: Option<&ConcatMatrix>,
) -> Result<HeadForward, DiagnoseError> {
    let fusion = fuse(t_cls, concat, &model.fusion)?;
    let spliced = splice_prompt(&model.prompt, &fusion.vector)?;
    let at = model.prompt.rag_position()?;
    let mut input = spliced.slots[at].vector.clone();
    input.extend_from_slice(t_cls);
    let logits = model.head.logits(&input);
    let scores = logits.map(sigmoid);
    Ok(HeadForward { fusion, input, scores })
}

/// Local inference: retrieve, fuse, score. `k` overrides the model's K.
pub fn predict_local(
    record: &CaseRecord,
    model: &Model,
    base: &CaseBase,
    k: Option<usize>,
) -> Result<DiagnosisReport, DiagnoseError> {
    let k = k.unwrap_or(model.config.k);
    let target = model.encode_query(record)?;
    let retrieved = model.neighbours(record, base, k)?;
    let refs = retrieved
        .items
        .iter()
        .map(|c| {
            let r = base.record(&c.id).ok_or_else(|| {
                DiagnoseError::Retrieval(RetrievalError::CorruptIndex(format!("no record for {:?}", c.id)))
            })?;
            model.encode_reference(r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let concat = if refs.is_empty() { None } else { Some(build_concat(&refs.iter().collect::<Vec<_>>())?) };
    let f = head_forward(model, &target.cls, concat.as_ref())?;
    let backend = if retrieved.is_empty() { Backend::LocalNoRag } else { Backend::LocalFusion };
    let evidence: Vec<Evidence> = match &concat {
        None => vec![],
        Some(c) => retrieved
            .items
            .iter()
            .zip(&c.boundaries)
            .map(|(cand, rows)| Evidence {
                id: cand.id.clone(),
                cosine: cand.cosine,
                rerank: cand.rerank,
                attention: Some(f.fusion.weights[rows.clone()].iter().sum()),
            })
            .collect(),
    };
    let explanation = evidence
        .iter()
        .max_by(|a, b| a.attention.unwrap_or(0.0).total_cmp(&b.attention.unwrap_or(0.0)).then(b.id.cmp(&a.id)))
        .map(|e| format!("{} retrieved case(s) fused; most attended: {} ({:.3})", evidence.len(), e.id, e.attention.unwrap_or(0.0)));
    Ok(DiagnosisReport {
        decided: decide(&f.scores, model.config.threshold),
        scores: f.scores,
        threshold: model.config.threshold,
        evidence,
        backend,
        no_evidence: f.fusion.no_evidence,
        explanation,
        parse_failure: false,
        remote_attempts: None,
    })
}
