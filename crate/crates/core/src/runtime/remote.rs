//! Blocking client for an OpenAI-style chat-completions endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::agents::{Agent, AgentError, AgentReply, AgentRequest, TokenUsage};
use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "COMMPRUNE_ENDPOINT";
pub const ENV_MODEL: &str = "COMMPRUNE_MODEL";
pub const ENV_TOKEN: &str = "COMMPRUNE_API_TOKEN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub temperature: f64,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_token: None,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            temperature: 0.0,
        }
    }

    /// Build from the environment; endpoint and model are required.
    pub fn from_env() -> Result<Self> {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let endpoint =
            get(ENV_ENDPOINT).ok_or_else(|| Error::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model =
            get(ENV_MODEL).ok_or_else(|| Error::Config(format!("{ENV_MODEL} is not set")))?;
        let mut cfg = RemoteConfig::new(endpoint, model);
        cfg.api_token = get(ENV_TOKEN);
        Ok(cfg)
    }

    /// Fill a missing token from the environment.
    pub fn with_env_token(mut self) -> Self {
        if self.api_token.is_none() {
            self.api_token = std::env::var(ENV_TOKEN).ok().filter(|v| !v.is_empty());
        }
        self
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    http: ureq::Agent,
}

impl RemoteBackend {
    /// No connection is attempted until the first call.
    pub fn new(cfg: RemoteConfig) -> Self {
        let http: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(true)
            .build()
            .into();
        RemoteBackend { cfg, http }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<AgentReply, String> {
        let mut req = self.http.post(&self.cfg.endpoint);
        if let Some(tok) = &self.cfg.api_token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| format!("bad response body: {e}"))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| "response has no message content".to_string())?;
        Ok(AgentReply {
            content,
            usage: parsed.usage.map(|u| TokenUsage {
                prompt: u.prompt_tokens,
                completion: u.completion_tokens,
            }),
        })
    }

    pub fn complete(
        &self,
        system: &str,
        user: &str,
    ) -> std::result::Result<AgentReply, AgentError> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::debug!("remote attempt {} failed: {e}", attempt + 1);
                    last = e;
                    if attempt < self.cfg.retries {
                        std::thread::sleep(Duration::from_millis(100 << attempt.min(5)));
                    }
                }
            }
        }
        Err(AgentError(format!(
            "{} failed after {} attempts: {last}",
            self.cfg.endpoint,
            self.cfg.retries + 1
        )))
    }
}

impl Agent for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn respond(&self, req: &AgentRequest<'_>) -> std::result::Result<AgentReply, AgentError> {
        let system = if req.node.prompt_template.is_empty() {
            format!("You are the {} in a team of agents.", req.node.role)
        } else {
            req.node.prompt_template.clone()
        };
        self.complete(&system, &req.render_user_prompt())
    }
}
