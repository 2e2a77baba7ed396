//! OpenAI-compatible `/v1/completions` client.
//!
//! Scoring sends `prompt + continuation` with `echo` on and zero new
//! tokens; the continuation's log-probs are the echoed tokens whose
//! character offset is at or past the end of the prompt.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{CompletionRequest, CompletionTask, ScoreRequest, Scorer, ScorerSpec, CLASSIFY_MAX_TOKENS, SELECT_MAX_TOKENS};
use crate::error::{Error, Result, ScorerError};

pub const API_KEY_ENV: &str = "GICL_API_KEY";

pub struct HttpScorer {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    retries: usize,
    backoff: Duration,
    max_parallel: usize,
    client: reqwest::blocking::Client,
    calls: AtomicU64,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl HttpScorer {
    pub fn new(spec: &ScorerSpec) -> Result<Self> {
        if spec.endpoint.is_empty() {
            return Err(Error::InvalidArgument("http scorer needs an endpoint".into()));
        }
        if spec.timeout_secs.is_nan() || spec.timeout_secs <= 0.0 {
            return Err(Error::InvalidArgument("scorer timeout must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(spec.timeout_secs))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("http client: {e}")))?;
        Ok(Self {
            id: spec.scorer_id(),
            url: format!("{}/v1/completions", spec.endpoint.trim_end_matches('/')),
            model: spec.model.clone(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retries: spec.retries as usize,
            backoff: Duration::from_millis(spec.backoff_ms),
            max_parallel: spec.max_parallel,
            client,
            calls: AtomicU64::new(0),
        })
    }

    /// POSTs `body`, retrying transport errors, 429 and 5xx with
    /// exponential backoff.
    fn post(&self, body: &serde_json::Value) -> Result<CompletionResponse, ScorerError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let attempts = self.retries + 1;
        let mut last = ScorerError::Transport {
            attempts: 0,
            msg: "not attempted".into(),
        };
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt as u32 - 1));
            }
            let mut req = self.client.post(&self.url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Err(e) => {
                    last = ScorerError::Transport {
                        attempts: attempt + 1,
                        msg: e.to_string(),
                    };
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| ScorerError::Transport {
                        attempts: attempt + 1,
                        msg: e.to_string(),
                    });
                    let text = match text {
                        Ok(t) => t,
                        Err(e) => {
                            last = e;
                            continue;
                        }
                    };
                    if status.is_success() {
                        return serde_json::from_str(&text).map_err(|e| ScorerError::BadResponse(e.to_string()));
                    }
                    last = ScorerError::Status {
                        status: status.as_u16(),
                        body: text.chars().take(500).collect(),
                    };
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(last);
                    }
                }
            }
            log::debug!("scorer attempt {} failed: {last}", attempt + 1);
        }
        Err(last)
    }
}

/// Log-probs of the echoed tokens starting at or after character `boundary`.
fn continuation_logprobs(lp: &Logprobs, boundary: usize) -> Result<Vec<f64>, ScorerError> {
    let n = lp.tokens.len();
    if lp.token_logprobs.len() != n || lp.text_offset.len() != n {
        return Err(ScorerError::BadResponse("logprobs arrays differ in length".into()));
    }
    let mut out = Vec::new();
    for i in 0..n {
        let offset = lp.text_offset[i];
        let len = lp.tokens[i].chars().count();
        if offset >= boundary {
            out.push(lp.token_logprobs[i].ok_or(ScorerError::NoLogprobs)?);
        } else if offset + len > boundary {
            return Err(ScorerError::Misaligned { boundary, offset, len });
        }
    }
    if out.is_empty() {
        return Err(ScorerError::EmptyContinuation);
    }
    Ok(out)
}

impl Scorer for HttpScorer {
    fn scorer_id(&self) -> &str {
        &self.id
    }

    fn token_logprobs(&self, req: &ScoreRequest<'_>) -> Result<Vec<f64>, ScorerError> {
        if req.continuation.is_empty() {
            return Err(ScorerError::EmptyContinuation);
        }
        let body = json!({
            "model": self.model,
            "prompt": format!("{}{}", req.prompt, req.continuation),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let resp = self.post(&body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ScorerError::BadResponse("no choices".into()))?;
        let lp = choice.logprobs.ok_or(ScorerError::NoLogprobs)?;
        continuation_logprobs(&lp, req.prompt.chars().count())
    }

    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, ScorerError> {
        let max_tokens = match req.task {
            CompletionTask::Classify => CLASSIFY_MAX_TOKENS,
            CompletionTask::Select { .. } => SELECT_MAX_TOKENS,
        };
        let body = json!({
            "model": self.model,
            "prompt": req.prompt,
            "max_tokens": max_tokens,
            "temperature": 0,
        });
        let resp = self.post(&body)?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| ScorerError::BadResponse("no choices".into()))
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn max_parallel(&self) -> usize {
        self.max_parallel
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(tokens: &[&str], values: &[Option<f64>]) -> Logprobs {
        let mut offsets = Vec::new();
        let mut at = 0;
        for t in tokens {
            offsets.push(at);
            at += t.chars().count();
        }
        Logprobs {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            token_logprobs: values.to_vec(),
            text_offset: offsets,
        }
    }

    #[test]
    fn picks_tokens_past_boundary() {
        let l = lp(&["Answer", ":", " cs", ".AI"], &[None, Some(-0.5), Some(-1.25), Some(-0.125)]);
        assert_eq!(continuation_logprobs(&l, 7).unwrap(), vec![-1.25, -0.125]);
        assert_eq!(continuation_logprobs(&l, 10).unwrap(), vec![-0.125]);
    }

    #[test]
    fn straddling_token_is_reported() {
        let l = lp(&["Answer", ": c", "s"], &[None, Some(-0.5), Some(-1.0)]);
        assert_eq!(
            continuation_logprobs(&l, 7),
            Err(ScorerError::Misaligned {
                boundary: 7,
                offset: 6,
                len: 3
            })
        );
    }

    #[test]
    fn missing_values_and_empty_continuations() {
        let l = lp(&["a", "b"], &[None, None]);
        assert_eq!(continuation_logprobs(&l, 1), Err(ScorerError::NoLogprobs));
        assert_eq!(continuation_logprobs(&l, 2), Err(ScorerError::EmptyContinuation));
        let mut bad = lp(&["a"], &[None]);
        bad.text_offset.clear();
        assert!(matches!(continuation_logprobs(&bad, 0), Err(ScorerError::BadResponse(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(HttpScorer::new(&ScorerSpec::http("", "m")).is_err());
        let mut s = ScorerSpec::http("http://127.0.0.1:1", "m");
        s.timeout_secs = 0.0;
        assert!(HttpScorer::new(&s).is_err());
    }
}
