//! A local completions server for tests and offline runs: it replays
//! recorded responses, tokenizes on the fly, or injects faults.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    /// Send this body with status 200.
    Json(Value),
    Status { code: u16, body: String },
    /// Answer with bytes that are not HTTP, then hang up.
    Drop,
    /// Echo the prompt split into whitespace-led tokens, each with this
    /// log-prob (the first token has none); completions return `text`.
    Echo { logprob: f64, text: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubRule {
    /// Applies when the request prompt contains this string.
    pub prompt_contains: String,
    pub reply: StubReply,
}

#[derive(Deserialize)]
struct FixtureLine {
    #[serde(rename = "match")]
    pattern: String,
    response: Option<Value>,
    fault: Option<String>,
}

/// Reads rules from JSONL lines `{"match": s, "response": {...}}` or
/// `{"match": s, "fault": "drop" | "status:<code>"}`.
pub fn load_fixture(path: &Path) -> Result<Vec<StubRule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::bundle(path, Some(i + 1), msg);
        let f: FixtureLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let reply = match (f.response, f.fault.as_deref()) {
            (Some(v), None) => StubReply::Json(v),
            (None, Some("drop")) => StubReply::Drop,
            (None, Some(s)) if s.starts_with("status:") => StubReply::Status {
                code: s["status:".len()..].parse().map_err(|_| bad(format!("bad status fault {s:?}")))?,
                body: "injected fault".into(),
            },
            _ => return Err(bad("need exactly one of response or a known fault".into())),
        };
        rules.push(StubRule {
            prompt_contains: f.pattern,
            reply,
        });
    }
    Ok(rules)
}

/// Whitespace-led tokens with character offsets, in the shape of an echoed
/// completions response.
pub fn echo_response(prompt: &str, logprob: f64, text: &str) -> Value {
    let mut tokens = Vec::new();
    let mut offsets = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, ch) in prompt.chars().enumerate() {
        if ch.is_whitespace() && !current.is_empty() && !current.chars().all(char::is_whitespace) {
            tokens.push(std::mem::take(&mut current));
            offsets.push(start);
            start = i;
        }
        current.push(ch);
    }
    if !current.is_empty() {
        tokens.push(current);
        offsets.push(start);
    }
    let lps: Vec<Value> = (0..tokens.len()).map(|i| if i == 0 { Value::Null } else { json!(logprob) }).collect();
    json!({
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": text,
            "logprobs": {"tokens": tokens, "token_logprobs": lps, "text_offset": offsets},
            "finish_reason": "length"
        }]
    })
}

pub struct StubServer {
    server: Arc<tiny_http::Server>,
    endpoint: String,
    requests: Arc<AtomicU64>,
    bodies: Arc<Mutex<Vec<Value>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `addr` (use port 0 for any free port) and serves until dropped.
    pub fn start(addr: &str, rules: Vec<StubRule>, fallback: StubReply) -> Result<Self> {
        let server = Arc::new(
            tiny_http::Server::http(addr).map_err(|e| Error::InvalidArgument(format!("cannot bind {addr}: {e}")))?,
        );
        let port = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::InvalidArgument("stub server is not on an IP socket".into()))?;
        let endpoint = format!("http://{port}");
        let requests = Arc::new(AtomicU64::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let handle = {
            let (server, requests, bodies) = (server.clone(), requests.clone(), bodies.clone());
            std::thread::spawn(move || {
                for req in server.incoming_requests() {
                    requests.fetch_add(1, Ordering::SeqCst);
                    serve(req, &rules, &fallback, &bodies);
                }
            })
        };
        Ok(Self {
            server,
            endpoint,
            requests,
            bodies,
            handle: Some(handle),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// HTTP requests received, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Parsed JSON bodies received so far.
    pub fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().expect("stub log").clone()
    }

    /// Blocks serving requests until the process exits.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(mut req: tiny_http::Request, rules: &[StubRule], fallback: &StubReply, bodies: &Mutex<Vec<Value>>) {
    let mut raw = String::new();
    let body: Value = match req.as_reader().read_to_string(&mut raw) {
        Ok(_) => serde_json::from_str(&raw).unwrap_or(Value::Null),
        Err(_) => Value::Null,
    };
    bodies.lock().expect("stub log").push(body.clone());
    if req.url() != "/v1/completions" {
        let _ = req.respond(tiny_http::Response::from_string("not found").with_status_code(404));
        return;
    }
    let prompt = body.get("prompt").and_then(Value::as_str).unwrap_or("");
    let reply = rules
        .iter()
        .find(|r| prompt.contains(&r.prompt_contains))
        .map_or(fallback, |r| &r.reply);
    let json_header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    match reply {
        StubReply::Json(v) => {
            let _ = req.respond(tiny_http::Response::from_string(v.to_string()).with_header(json_header));
        }
        StubReply::Status { code, body } => {
            let _ = req.respond(tiny_http::Response::from_string(body.clone()).with_status_code(*code));
        }
        StubReply::Drop => {
            let mut w = req.into_writer();
            let _ = w.write_all(b"\x00\x01 not http\r\n\r\n");
            let _ = w.flush();
        }
        StubReply::Echo { logprob, text } => {
            let generating = body.get("max_tokens").and_then(Value::as_u64).unwrap_or(0) > 0;
            let v = if generating {
                json!({"object": "text_completion", "choices": [{"index": 0, "text": text, "logprobs": null}]})
            } else {
                echo_response(prompt, *logprob, "")
            };
            let _ = req.respond(tiny_http::Response::from_string(v.to_string()).with_header(json_header));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_tokens_cover_the_prompt() {
        let p = "Answer: cs.AI now";
        let v = echo_response(p, -0.5, "");
        let lp = &v["choices"][0]["logprobs"];
        let tokens: Vec<&str> = lp["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
        assert_eq!(tokens, vec!["Answer:", " cs.AI", " now"]);
        assert_eq!(tokens.concat(), p);
        assert_eq!(lp["text_offset"], json!([0, 7, 13]));
        assert_eq!(lp["token_logprobs"][0], Value::Null);
    }

    #[test]
    fn fixture_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        std::fs::write(
            &p,
            "{\"match\":\"a\",\"response\":{\"x\":1}}\n{\"match\":\"b\",\"fault\":\"drop\"}\n{\"match\":\"c\",\"fault\":\"status:503\"}\n",
        )
        .unwrap();
        let rules = load_fixture(&p).unwrap();
        assert_eq!(rules[0].reply, StubReply::Json(json!({"x": 1})));
        assert_eq!(rules[1].reply, StubReply::Drop);
        assert!(matches!(rules[2].reply, StubReply::Status { code: 503, .. }));
        std::fs::write(&p, "{\"match\":\"a\",\"fault\":\"melt\"}\n").unwrap();
        assert!(load_fixture(&p).is_err());
    }
}
