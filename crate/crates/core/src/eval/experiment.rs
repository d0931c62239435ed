//! Baseline-ladder experiment: one corpus, one split, every variant scored
//! on the same test cases.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{compute_metrics, format_table, BucketCounts, MetricsReport, Overall, Prf, TableRow};
use crate::casemodel::{
    fit_preprocess, generate_synthetic, split_corpus, CaseRecord, GeneratorConfig, GeneratorError, LabelSet,
    PreprocessError, SplitError,
};
use crate::diagnose::{
    predict_local, predict_remote, train, Checkpoint, DiagnoseError, Model, ModelConfig, RemoteConfig, TrainConfig,
};
use crate::retrieval::{CaseBase, RetrievalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "no-rag")]
    NoRag,
    #[serde(rename = "rag-1")]
    Rag1,
    #[serde(rename = "rag-2")]
    Rag2,
    #[serde(rename = "brains-k5")]
    BrainsK5,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoRag, Variant::Rag1, Variant::Rag2, Variant::BrainsK5];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoRag => "no-rag",
            Variant::Rag1 => "rag-1",
            Variant::Rag2 => "rag-2",
            Variant::BrainsK5 => "brains-k5",
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("experiment needs at least one variant")]
    NoVariants,
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Diagnose(#[from] DiagnoseError),
    #[error("test split is empty")]
    EmptyTestSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub corpus_seed: u64,
    pub generator: GeneratorConfig,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Backend for the `rag-*` variants; without it they are reported as failed.
    pub remote: Option<RemoteConfig>,
    /// Put per-variant wall time into the JSON report (makes it run-dependent).
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            corpus_seed: 42,
            generator: GeneratorConfig::default(),
            split: [0.8, 0.1, 0.1],
            split_seed: 42,
            model: ModelConfig::default(),
            train: TrainConfig { learning_rate: 5e-3, ..TrainConfig::default() },
            remote: None,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub seed: u64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub overall: Overall,
    pub single: Prf,
    pub double: Prf,
    pub triple: Prf,
    pub bucket_counts: BucketCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
    /// Cases whose remote reply named no subtype.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parse_failures: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl VariantReport {
    fn scored(name: &str, m: &MetricsReport) -> Self {
        Self {
            name: name.into(),
            overall: m.overall,
            single: m.single,
            double: m.double,
            triple: m.triple,
            bucket_counts: m.bucket_counts,
            wall_ms: None,
            parse_failures: None,
            failure: None,
        }
    }

    fn failed(name: &str, tag: String, test_n: usize) -> Self {
        let zero = Prf { p: 0.0, r: 0.0, f1: 0.0 };
        Self {
            name: name.into(),
            overall: Overall { correct: 0.0, p: 0.0, r: 0.0, f1: 0.0 },
            single: zero,
            double: zero,
            triple: zero,
            bucket_counts: BucketCounts { other: test_n, ..Default::default() },
            wall_ms: None,
            parse_failures: None,
            failure: Some(tag),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub corpus: CorpusInfo,
    pub test_split_digest: String,
    pub test_size: usize,
    /// How precision/recall/F1 are averaged.
    pub averaging: String,
    pub variants: Vec<VariantReport>,
}

impl ExperimentReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn table(&self) -> String {
        let rows: Vec<(String, Result<TableRow, String>)> = self
            .variants
            .iter()
            .map(|v| {
                let row = match &v.failure {
                    Some(tag) => Err(tag.clone()),
                    None => Ok(TableRow {
                        name: v.name.clone(),
                        correct: v.overall.correct,
                        f1: v.overall.f1,
                        single: v.single,
                        double: v.double,
                        triple: v.triple,
                    }),
                };
                (v.name.clone(), row)
            })
            .collect();
        format_table(&rows)
    }
}

/// SHA-256 of the canonical JSON of the configuration.
pub fn config_digest(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(cfg).expect("config serializes")))
}

/// SHA-256 over the newline-joined ids of a split.
pub fn split_digest(split: &[CaseRecord]) -> String {
    let mut h = Sha256::new();
    for r in split {
        h.update(r.id().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

struct Shared {
    train: Vec<CaseRecord>,
    val: Vec<CaseRecord>,
    test: Vec<CaseRecord>,
    base_model: Model,
    base: CaseBase,
}

fn train_variant(shared: &Shared, cfg: &ExperimentConfig, k: usize) -> Result<Checkpoint, DiagnoseError> {
    let tcfg = TrainConfig { k, ..cfg.train.clone() };
    let (ckpt, log) = train(&shared.train, &shared.val, &tcfg, shared.base_model.clone(), &shared.base)?;
    log::info!(
        "trained k={k}: train loss {:.4} -> {:.4}",
        log.initial_train_loss,
        log.final_train_loss
    );
    Ok(ckpt)
}

fn score_local(shared: &Shared, ckpt: &Checkpoint) -> Result<MetricsReport, ExperimentError> {
    let base = if ckpt.train.unfreeze_encoder {
        CaseBase::build(shared.train.clone(), &ckpt.model.encoder, ckpt.model.stats.as_ref())?
    } else {
        shared.base.clone()
    };
    let pairs = shared
        .test
        .iter()
        .map(|r| Ok((predict_local(r, &ckpt.model, &base, None)?.decided, r.labels)))
        .collect::<Result<Vec<(LabelSet, LabelSet)>, DiagnoseError>>()?;
    Ok(compute_metrics(&pairs).expect("test split is non-empty"))
}

fn score_remote(shared: &Shared, remote: &RemoteConfig, cases: usize) -> Result<(MetricsReport, usize), DiagnoseError> {
    let rc = RemoteConfig { concat_cases: cases, ..remote.clone() };
    let mut pairs = Vec::with_capacity(shared.test.len());
    let mut parse_failures = 0;
    for r in &shared.test {
        let retrieved = shared.base_model.neighbours(r, &shared.base, cases)?;
        let rep = predict_remote(r, &retrieved, &shared.base, &rc)?;
        parse_failures += usize::from(rep.parse_failure);
        pairs.push((rep.decided, r.labels));
    }
    Ok((compute_metrics(&pairs).expect("test split is non-empty"), parse_failures))
}

/// Generate, split, train and score every requested variant on the shared
/// test split. Variant failures are recorded in the report, not raised.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let corpus = generate_synthetic(&cfg.generator, cfg.corpus_seed)?;
    run_experiment_on(cfg, &corpus)
}

/// As [`run_experiment`] on an existing corpus.
pub fn run_experiment_on(cfg: &ExperimentConfig, corpus: &[CaseRecord]) -> Result<ExperimentReport, ExperimentError> {
    if cfg.variants.is_empty() {
        return Err(ExperimentError::NoVariants);
    }
    let (train, val, test) = split_corpus(corpus, cfg.split, cfg.split_seed)?;
    if test.is_empty() {
        return Err(ExperimentError::EmptyTestSplit);
    }
    let stats = fit_preprocess(&train)?;
    let base_model = Model::init(cfg.model.clone(), Some(stats))?;
    let base = CaseBase::build(train.clone(), &base_model.encoder, base_model.stats.as_ref())?;
    let shared = Shared { train, val, test, base_model, base };

    let mut variants = Vec::with_capacity(cfg.variants.len());
    for &v in &cfg.variants {
        let started = Instant::now();
        let name = v.name();
        let mut report = match v {
            Variant::NoRag | Variant::BrainsK5 => {
                let k = if v == Variant::NoRag { 0 } else { cfg.train.k.max(1) };
                match train_variant(&shared, cfg, k).map_err(ExperimentError::from).and_then(|c| score_local(&shared, &c)) {
                    Ok(m) => VariantReport::scored(name, &m),
                    Err(e) => VariantReport::failed(name, failure_tag(&e), shared.test.len()),
                }
            }
            Variant::Rag1 | Variant::Rag2 => {
                let cases = if v == Variant::Rag1 { 1 } else { 2 };
                match &cfg.remote {
                    None => VariantReport::failed(name, "NoBackend".into(), shared.test.len()),
                    Some(remote) => match score_remote(&shared, remote, cases) {
                        Ok((m, pf)) => VariantReport { parse_failures: Some(pf), ..VariantReport::scored(name, &m) },
                        Err(e) => VariantReport::failed(name, e.code().into(), shared.test.len()),
                    },
                }
            }
        };
        let ms = started.elapsed().as_millis() as u64;
        log::info!("{name}: correct {:.4} in {ms} ms", report.overall.correct);
        if cfg.record_timing {
            report.wall_ms = Some(ms);
        }
        variants.push(report);
    }
    Ok(ExperimentReport {
        config_digest: config_digest(cfg),
        corpus: CorpusInfo { seed: cfg.corpus_seed, size: corpus.len() },
        test_split_digest: split_digest(&shared.test),
        test_size: shared.test.len(),
        averaging: "micro".into(),
        variants,
    })
}

fn failure_tag(e: &ExperimentError) -> String {
    match e {
        ExperimentError::Diagnose(d) => d.code().into(),
        ExperimentError::Retrieval(_) => "RetrievalError".into(),
        other => other.to_string(),
    }
}
