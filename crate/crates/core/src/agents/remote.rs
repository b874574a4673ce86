use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::backend::{Backend, BackendError, Completion, GenerationRequest};
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full chat-completions URL, e.g. `http://127.0.0.1:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub timeout_s: f64,
    pub max_in_flight: usize,
    pub max_tokens: u32,
    /// Extra attempts after a transport failure.
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "local-instruct".into(),
            timeout_s: 60.0,
            max_in_flight: 4,
            max_tokens: 256,
            retries: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    completion_tokens: usize,
}

/// Chat-completion client with greedy decoding (temperature 0) and a cap on
/// concurrent requests.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_s.max(0.001)))
            .build();
        Self {
            config,
            agent,
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn request_body(&self, request: &GenerationRequest) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "messages": [
                { "role": "system", "content": request.system },
                { "role": "user", "content": request.user },
            ],
            "temperature": 0.0,
            "max_tokens": self.config.max_tokens,
            "stream": false,
        })
    }

    fn acquire(&self) {
        let limit = self.config.max_in_flight.max(1);
        let mut n = self.in_flight.lock().expect("in-flight counter poisoned");
        while *n >= limit {
            n = self.slot_freed.wait(n).expect("in-flight counter poisoned");
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().expect("in-flight counter poisoned") -= 1;
        self.slot_freed.notify_one();
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<ChatResponse, String> {
        self.acquire();
        let result = self
            .agent
            .post(&self.config.endpoint)
            .send_json(body.clone())
            .map_err(|e| e.to_string())
            .and_then(|resp| resp.into_json::<ChatResponse>().map_err(|e| e.to_string()));
        self.release();
        result
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &'static str {
        "remote"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        let body = self.request_body(request);
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            match self.post_once(&body) {
                Ok(resp) => {
                    let text = resp
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .ok_or_else(|| BackendError::Malformed("no message content".into()))?;
                    let tokens = resp
                        .usage
                        .map_or_else(|| text::whitespace_tokens(&text), |u| u.completion_tokens);
                    return Ok(Completion { text, tokens });
                }
                Err(e) => last = e,
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }
}
