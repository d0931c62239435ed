//! Case encoder: turns a record into a `[CLS]` summary vector plus per-token
//! hidden vectors.
//!
//! Two modes share one output type:
//!
//! * **structured** (default): the preprocessed feature vector `x` gives one
//!   token per slot, `x_j · dir_j`, and the summary is the linear projection
//!   `P x`.
//! * **text**: the canonical narrative is hashed into a fixed vocabulary,
//!   prefixed with `[CLS]`, given sinusoidal positions and passed through a
//!   small stack of pre-norm self-attention blocks.
//!
//! When a record is encoded as a *reference* case (a labelled entry of the
//! knowledge base), its diagnosis is part of the input: in structured mode
//! the sum of the gold labels' directions is added to every row (like a
//! segment embedding), in text mode a diagnosis sentence is appended.

mod structured;
mod text;
pub mod tokenize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::casemodel::{CaseRecord, LabelSet, OutlierPolicy, PreprocessError, PreprocessStats};
use crate::linalg::{norm, Matrix};

pub use structured::StructuredWeights;
pub use text::{TextBlock, TextWeights};
pub use tokenize::tokenize;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("text is empty after trimming")]
    EmptyText,
    #[error("structured encoding requires preprocessing stats")]
    MissingStats,
    #[error("feature length {found} does not match encoder input {expected}")]
    FeatureLength { found: usize, expected: usize },
    #[error("embedding dimension {d} is not divisible by head count {heads}")]
    BadHeads { d: usize, heads: usize },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    #[default]
    Structured,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub d: usize,
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Structured,
            d: 64,
            vocab: 4096,
            layers: 2,
            heads: 4,
            max_len: 128,
            seed: 17,
        }
    }
}

/// Encoder output: summary vector plus per-token hidden vectors, all of
/// dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    pub cls: Vec<f64>,
    pub tokens: Vec<Vec<f64>>,
    /// Tokens in the source before truncation (feature slots or words).
    pub source_len: usize,
}

impl HiddenSequence {
    pub fn dim(&self) -> usize {
        self.cls.len()
    }
}

/// Unit-norm `[CLS]` embedding used as a retrieval key.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsEmbedding {
    pub vector: Vec<f64>,
    /// The raw summary vector had zero norm; `vector` is the first basis vector.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub structured: Option<StructuredWeights>,
    pub text: Option<TextWeights>,
}

impl EncoderParams {
    /// Seed-deterministic initialisation, uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    /// `feature_len` is the preprocessed feature vector length.
    pub fn init(config: EncoderConfig, feature_len: usize) -> Result<Self, EncoderError> {
        if config.heads == 0 || !config.d.is_multiple_of(config.heads) {
            return Err(EncoderError::BadHeads { d: config.d, heads: config.heads });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (config.d as f64).sqrt();
        let (structured, text) = match config.mode {
            EncoderMode::Structured => (Some(StructuredWeights::init(config.d, feature_len, bound, &mut rng)), None),
            EncoderMode::Text => (None, Some(TextWeights::init(&config, bound, &mut rng))),
        };
        Ok(Self { config, structured, text })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Encode a query (unlabelled) record.
    pub fn encode(&self, record: &CaseRecord, stats: Option<&PreprocessStats>) -> Result<HiddenSequence, EncoderError> {
        self.encode_inner(record, stats, None)
    }

    /// Encode a labelled knowledge-base record, including its diagnosis.
    pub fn encode_reference(
        &self,
        record: &CaseRecord,
        stats: Option<&PreprocessStats>,
    ) -> Result<HiddenSequence, EncoderError> {
        self.encode_inner(record, stats, Some(record.labels))
    }

    fn encode_inner(
        &self,
        record: &CaseRecord,
        stats: Option<&PreprocessStats>,
        labels: Option<LabelSet>,
    ) -> Result<HiddenSequence, EncoderError> {
        match (&self.structured, &self.text) {
            (Some(w), _) => {
                let stats = stats.ok_or(EncoderError::MissingStats)?;
                let x = crate::casemodel::apply_preprocess(&record.case, stats, OutlierPolicy::Clip)?;
                w.encode(&x, labels)
            }
            (None, Some(w)) => {
                let text = match labels {
                    Some(l) => format!("{} {}", record.narrative(), diagnosis_sentence(l)),
                    None => record.narrative().to_string(),
                };
                w.encode(&text, &self.config)
            }
            (None, None) => unreachable!("encoder params always carry one weight set"),
        }
    }

    /// Encode free text (text mode only; structured mode has no text path).
    pub fn encode_text(&self, text: &str) -> Result<HiddenSequence, EncoderError> {
        let w = self.text.as_ref().ok_or(EncoderError::EmptyText)?;
        w.encode(text, &self.config)
    }

    /// L2-normalised `[CLS]` of [`encode`](Self::encode).
    pub fn embed_cls(&self, record: &CaseRecord, stats: Option<&PreprocessStats>) -> Result<ClsEmbedding, EncoderError> {
        Ok(normalize_cls(&self.encode(record, stats)?.cls))
    }

    /// Every parameter tensor, in a fixed order, for checkpointing.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Some(w) = &self.structured {
            w.tensors(&mut out);
        }
        if let Some(w) = &self.text {
            w.tensors(&mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.structured {
            w.tensors_mut(&mut out);
        }
        if let Some(w) = &mut self.text {
            w.tensors_mut(&mut out);
        }
        out
    }
}

pub fn diagnosis_sentence(labels: LabelSet) -> String {
    if labels.is_empty() {
        return "Diagnosis: none.".into();
    }
    let names: Vec<&str> = labels.iter().map(|l| l.display_name()).collect();
    format!("Diagnosis: {}.", names.join("; "))
}

pub fn normalize_cls(cls: &[f64]) -> ClsEmbedding {
    let n = norm(cls);
    if n > 0.0 && n.is_finite() {
        ClsEmbedding { vector: cls.iter().map(|v| v / n).collect(), degenerate: false }
    } else {
        let mut e = vec![0.0; cls.len()];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        ClsEmbedding { vector: e, degenerate: true }
    }
}
