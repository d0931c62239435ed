//! Shared fixtures for integration tests: small artifacts and a scripted
//! chat-completion server on loopback.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use brains::casemodel::{fit_preprocess, generate_synthetic, CaseRecord, GeneratorConfig};
use brains::diagnose::{Checkpoint, Model, ModelConfig, TrainConfig};
use brains::screen::Artifacts;

pub fn corpus(n: usize, seed: u64) -> Vec<CaseRecord> {
    generate_synthetic(&GeneratorConfig { n, ..Default::default() }, seed).unwrap()
}

/// Untrained model over a synthetic corpus, every record indexed.
pub fn artifacts(n: usize, seed: u64) -> Artifacts {
    let recs = corpus(n, seed);
    let stats = fit_preprocess(&recs).unwrap();
    let model = Model::init(ModelConfig::default(), Some(stats)).unwrap();
    Artifacts::build(Checkpoint { model, train: TrainConfig::default() }, recs).unwrap()
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn ok(content: &str) -> Self {
        Reply { status: 200, body: chat_body(content), delay: Duration::ZERO }
    }

    pub fn status(status: u16) -> Self {
        Reply { status, body: json!({"error": "scripted"}).to_string(), delay: Duration::ZERO }
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay = Duration::from_millis(ms);
        self
    }
}

pub fn chat_body(content: &str) -> String {
    json!({
        "id": "cmpl-test",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    })
    .to_string()
}

type Responder = dyn Fn(usize, &Value) -> Reply + Send + Sync;

pub struct MockChat {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<(String, Value)>>>,
    hits: Arc<AtomicUsize>,
}

impl MockChat {
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Serve `responder(request_number, body)` for every request, one request
/// per connection.
pub fn mock_chat(responder: impl Fn(usize, &Value) -> Reply + Send + Sync + 'static) -> MockChat {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));
    let responder: Arc<Responder> = Arc::new(responder);
    let (reqs, count) = (requests.clone(), hits.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (responder, reqs, count) = (responder.clone(), reqs.clone(), count.clone());
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    return;
                }
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; len];
                if reader.read_exact(&mut body).is_err() {
                    return;
                }
                let v: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                let n = count.fetch_add(1, Ordering::SeqCst);
                reqs.lock().unwrap().push((path, v.clone()));
                let reply = responder(n, &v);
                std::thread::sleep(reply.delay);
                let head = format!(
                    "HTTP/1.1 {} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    reply.status,
                    reply.body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(reply.body.as_bytes());
            });
        }
    });
    MockChat { base_url, requests, hits }
}

/// Replies from `script` in order, repeating the last entry.
pub fn scripted(script: Vec<Reply>) -> MockChat {
    mock_chat(move |n, _| script[n.min(script.len() - 1)].clone())
}

/// A stand-in language model that answers with the diagnosis written after
/// the first similar case in the prompt, or "I cannot tell." without one.
pub fn copy_first_similar() -> MockChat {
    mock_chat(|_, body| {
        let user = body["messages"][1]["content"].as_str().unwrap_or("");
        let answer = user
            .split("Similar case 1: ")
            .nth(1)
            .and_then(|s| s.split("Diagnosis: ").nth(1))
            .and_then(|s| s.split('.').next())
            .map_or_else(|| "I cannot tell.".to_string(), str::to_string);
        Reply::ok(&answer)
    })
}
