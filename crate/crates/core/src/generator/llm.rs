use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{extract_expressions, prompts, GenError, Generator, GeneratorOutput, PromptContext, Usage};

/// Chat-completion endpoint settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token; empty disables auth.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_attempts: usize,
    pub backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.8,
            max_attempts: 3,
            backoff_ms: 500,
            timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Sends one POST and returns whatever came back, including error statuses.
pub trait Transport: Send {
    fn post(&self, url: &str, headers: &[(String, String)], body: &str) -> Result<HttpReply, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(timeout)).build().into();
        UreqTransport { agent }
    }
}

impl Transport for UreqTransport {
    fn post(&self, url: &str, headers: &[(String, String)], body: &str) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let mut resp = req.send(body).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

/// Replays canned replies in order and records the request bodies it saw.
#[derive(Default)]
pub struct FixtureTransport {
    replies: Mutex<VecDeque<Result<HttpReply, TransportError>>>,
    pub requests: Mutex<Vec<String>>,
}

impl FixtureTransport {
    pub fn new(replies: Vec<Result<HttpReply, TransportError>>) -> Self {
        FixtureTransport { replies: Mutex::new(replies.into()), requests: Mutex::new(Vec::new()) }
    }

    /// A 200 reply wrapping `content` as the first choice.
    pub fn completion(content: &str) -> Result<HttpReply, TransportError> {
        Ok(HttpReply {
            status: 200,
            body: json!({
                "choices": [{"message": {"role": "assistant", "content": content}}],
                "usage": {"prompt_tokens": 100, "completion_tokens": 20}
            })
            .to_string(),
        })
    }
}

impl Transport for FixtureTransport {
    fn post(&self, _url: &str, _headers: &[(String, String)], body: &str) -> Result<HttpReply, TransportError> {
        self.requests.lock().expect("fixture lock").push(body.to_string());
        self.replies
            .lock()
            .expect("fixture lock")
            .pop_front()
            .unwrap_or_else(|| Err(TransportError("fixture exhausted".into())))
    }
}

pub struct LlmGenerator {
    pub cfg: EndpointConfig,
    transport: Box<dyn Transport>,
    api_key: Option<String>,
}

impl LlmGenerator {
    /// Client over HTTP; reads the key from `cfg.api_key_env`.
    pub fn from_env(cfg: EndpointConfig) -> Result<Self, GenError> {
        let api_key = if cfg.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&cfg.api_key_env).map_err(|_| GenError::MissingKey(cfg.api_key_env.clone()))?)
        };
        let transport = Box::new(UreqTransport::new(Duration::from_secs(cfg.timeout_s)));
        Ok(LlmGenerator { cfg, transport, api_key })
    }

    pub fn with_transport(cfg: EndpointConfig, transport: Box<dyn Transport>, api_key: Option<String>) -> Self {
        LlmGenerator { cfg, transport, api_key }
    }

    fn complete(&self, ctx: &PromptContext) -> Result<(String, Usage), GenError> {
        let prompt = prompts::render_prompt(ctx)?;
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": prompts::system_message(ctx.kind)},
                {"role": "user", "content": prompt},
            ],
        })
        .to_string();
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(k) = &self.api_key {
            headers.push(("Authorization".into(), format!("Bearer {k}")));
        }
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (i - 1)));
            }
            match self.transport.post(&self.cfg.url, &headers, &body) {
                Ok(r) if r.status == 401 || r.status == 403 => return Err(GenError::Auth { status: r.status }),
                Ok(r) if (200..300).contains(&r.status) => return parse_reply(&r.body),
                Ok(r) => {
                    last = format!("HTTP {}", r.status);
                    log::warn!("endpoint attempt {} failed: {last}", i + 1);
                }
                Err(e) => {
                    last = e.0;
                    log::warn!("endpoint attempt {} failed: {last}", i + 1);
                }
            }
        }
        Err(GenError::Transport { attempts, last })
    }
}

#[derive(Deserialize)]
struct Reply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ReplyUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ReplyUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn parse_reply(body: &str) -> Result<(String, Usage), GenError> {
    let r: Reply = serde_json::from_str(body).map_err(|e| GenError::BadReply(e.to_string()))?;
    let text = r
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| GenError::BadReply("no message content".into()))?;
    let usage = r.usage.map_or_else(Usage::default, |u| Usage {
        prompt_tokens: u.prompt_tokens,
        completion_tokens: u.completion_tokens,
    });
    Ok((text, usage))
}

impl Generator for LlmGenerator {
    fn propose(&mut self, ctx: &PromptContext) -> Result<GeneratorOutput, GenError> {
        let (raw_text, usage) = self.complete(ctx)?;
        let (extracted, dropped) = extract_expressions(&raw_text, &ctx.variable_names(), ctx.samples_per_prompt);
        if extracted.is_empty() {
            return Err(GenError::NoValidExpression { dropped });
        }
        Ok(GeneratorOutput { raw_text, extracted, dropped, usage })
    }

    fn analyze(&mut self, ctx: &PromptContext) -> Result<String, GenError> {
        self.complete(ctx).map(|(t, _)| t)
    }
}
