//! Prompt-concatenation backend: retrieved cases are written into a chat
//! request as text and the reply is parsed for subtype names.
//!
//! Wire format: `POST {base_url}/v1/chat/completions` with
//! `{model, messages: [{role, content}], temperature, max_tokens}`; the
//! answer is read from `choices[0].message.content`.

use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Backend, DiagnoseError, DiagnosisReport, Evidence, LABELS};
use crate::casemodel::{CaseRecord, LabelSet, SubtypeLabel};
use crate::encoder::diagnosis_sentence;
use crate::retrieval::{CaseBase, RetrievedSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteTemplate {
    pub system: String,
    pub instruction: String,
}

impl Default for RemoteTemplate {
    fn default() -> Self {
        Self {
            system: "You are a clinical decision-support assistant for dementia screening.".into(),
            instruction: "Read the target case and any similar cases, then name every Alzheimer's disease subtype \
                          that applies to the target case, choosing from: Early-Onset, Late-Onset, Familial, \
                          Sporadic, Atypical. Answer with the subtype names separated by semicolons."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Retrieved cases written into the prompt.
    pub concat_cases: usize,
    /// Sent as a bearer token when set.
    pub api_key: Option<String>,
    pub template: RemoteTemplate,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model: "llama-2-13b-chat".into(),
            timeout_ms: 30_000,
            max_retries: 2,
            backoff_ms: 250,
            temperature: 0.0,
            max_tokens: 128,
            concat_cases: 1,
            api_key: None,
            template: RemoteTemplate::default(),
        }
    }
}

impl RemoteConfig {
    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Chat request body for `target` with the given similar cases.
pub fn build_request(target: &CaseRecord, similar: &[&CaseRecord], cfg: &RemoteConfig) -> Value {
    let mut user = format!("{}\n\nTarget case: {}", cfg.template.instruction, target.narrative());
    for (i, r) in similar.iter().enumerate() {
        user.push_str(&format!("\n\nSimilar case {}: {} {}", i + 1, r.narrative(), diagnosis_sentence(r.labels)));
    }
    json!({
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": cfg.template.system},
            {"role": "user", "content": user},
        ],
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    })
}

fn alias_table() -> &'static [(SubtypeLabel, Regex)] {
    static TABLE: OnceLock<Vec<(SubtypeLabel, Regex)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let re = |p: &str| Regex::new(&format!("(?i){p}")).expect("static regex");
        vec![
            (SubtypeLabel::EarlyOnset, re(r"early[\s_-]*onset|\beoad\b")),
            (SubtypeLabel::LateOnset, re(r"late[\s_-]*onset")),
            (SubtypeLabel::Familial, re(r"familial|\bfad\b|autosomal[\s-]+dominant")),
            (SubtypeLabel::Sporadic, re(r"sporadic")),
            (SubtypeLabel::Atypical, re(r"atypical")),
        ]
    })
}

/// Subtypes named in `text`; `None` when none is recognised.
pub fn parse_labels(text: &str) -> Option<LabelSet> {
    let set: LabelSet = alias_table().iter().filter(|(_, re)| re.is_match(text)).map(|(l, _)| *l).collect();
    (!set.is_empty()).then_some(set)
}

fn body_digest(body: &str) -> String {
    hex::encode(&Sha256::digest(body.as_bytes())[..8])
}

enum Attempt {
    Done(String),
    Retry(DiagnoseError),
    Fatal(DiagnoseError),
}

fn attempt(agent: &ureq::Agent, cfg: &RemoteConfig, body: &Value, n: u32) -> Attempt {
    let mut req = agent.post(cfg.endpoint());
    if let Some(key) = &cfg.api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = match req.send_json(body) {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => return Attempt::Fatal(DiagnoseError::BackendTimeout { attempts: n }),
        Err(e) => return Attempt::Retry(DiagnoseError::BackendTransport(e.to_string())),
    };
    let status = resp.status().as_u16();
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(ureq::Error::Timeout(_)) => return Attempt::Fatal(DiagnoseError::BackendTimeout { attempts: n }),
        Err(e) => return Attempt::Retry(DiagnoseError::BackendTransport(e.to_string())),
    };
    if (200..300).contains(&status) {
        return Attempt::Done(text);
    }
    let err = DiagnoseError::BackendHttpError { status, body_digest: body_digest(&text) };
    if status >= 500 || status == 429 {
        Attempt::Retry(err)
    } else {
        Attempt::Fatal(err)
    }
}

/// Send the request, retrying 5xx/429 and connection failures with
/// exponential backoff. A timeout is not retried. Returns the response
/// body and the number of attempts made.
fn call(cfg: &RemoteConfig, body: &Value) -> Result<(String, u32), DiagnoseError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms.max(1))))
        .http_status_as_error(false)
        .build()
        .into();
    let mut n = 0;
    loop {
        n += 1;
        match attempt(&agent, cfg, body, n) {
            Attempt::Done(text) => return Ok((text, n)),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry(e) if n > cfg.max_retries => return Err(e),
            Attempt::Retry(e) => {
                let delay = cfg.backoff_ms.saturating_mul(1 << (n - 1).min(16));
                log::warn!("remote attempt {n} failed ({e}); retrying in {delay} ms");
                std::thread::sleep(Duration::from_millis(delay));
            }
        }
    }
}

fn reply_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?.as_str().map(str::to_string)
}

/// Diagnose through the remote backend, writing up to `cfg.concat_cases`
/// retrieved cases into the prompt.
pub fn predict_remote(
    record: &CaseRecord,
    retrieved: &RetrievedSet,
    base: &CaseBase,
    cfg: &RemoteConfig,
) -> Result<DiagnosisReport, DiagnoseError> {
    let used: Vec<_> = retrieved.items.iter().filter(|c| base.record(&c.id).is_some()).take(cfg.concat_cases).collect();
    let similar: Vec<&CaseRecord> = used.iter().filter_map(|c| base.record(&c.id)).collect();
    let body = build_request(record, &similar, cfg);
    let (text, attempts) = call(cfg, &body)?;
    let content = reply_content(&text);
    let parsed = content.as_deref().and_then(parse_labels);
    let decided = parsed.unwrap_or(LabelSet::EMPTY);
    let mut scores = [0.0; LABELS];
    for l in decided.iter() {
        scores[l.code() as usize] = 1.0;
    }
    Ok(DiagnosisReport {
        scores,
        decided,
        threshold: 0.5,
        evidence: used
            .iter()
            .map(|c| Evidence { id: c.id.clone(), cosine: c.cosine, rerank: c.rerank, attention: None })
            .collect(),
        backend: Backend::RemoteConcat,
        no_evidence: used.is_empty(),
        explanation: content,
        parse_failure: parsed.is_none(),
        remote_attempts: Some(attempts),
    })
}
