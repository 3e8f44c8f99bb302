//! Completion backends: a remote chat-completion client and a scripted
//! stand-in for tests and replays.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::prompt::{Message, PromptPayload, Role};
use crate::tokens::TokenBudget;

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo-16k";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_AUTH_ENV_VAR: &str = "OPENAI_API_KEY";

/// Token counts for one request, as reported by the backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub content: String,
    pub usage: TokenUsage,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("authentication rejected (HTTP {status})")]
    AuthFailure { status: u16 },
    #[error("auth token variable {var} is not set")]
    MissingAuthToken { var: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unexpected HTTP status {status}")]
    Http { status: u16 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no scripted response for {0:?}")]
    ScriptMiss(String),
    #[error("empty payload")]
    EmptyPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key. The key itself
    /// never appears in configuration.
    pub auth_token_env_var: String,
    pub request_timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    /// Script file for [`BackendKind::Scripted`].
    pub script_path: Option<PathBuf>,
    /// Match scripted responses against every in-context command instead
    /// of only the last one.
    pub script_strict: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Remote,
            model_name: DEFAULT_MODEL.into(),
            temperature: 0.0,
            max_output_tokens: 800,
            endpoint_url: DEFAULT_ENDPOINT.into(),
            auth_token_env_var: DEFAULT_AUTH_ENV_VAR.into(),
            request_timeout_secs: 60,
            max_attempts: 3,
            backoff_base_ms: 1000,
            script_path: None,
            script_strict: false,
        }
    }
}

/// Anything that turns a payload into a completion.
#[async_trait]
pub trait CompletionBackend: Send + Sync {
    async fn complete(&self, payload: &PromptPayload) -> Result<CompletionResult, BackendError>;
}

/// Renders a shell-style template. `{command}` and `{cmd}` expand to the
/// program name (first word of the line), `{line}` to the whole line.
pub fn render_command_template(template: &str, command_line: &str) -> String {
    let line = command_line.trim();
    let program = line.split_whitespace().next().unwrap_or("");
    template
        .replace("{command}", program)
        .replace("{cmd}", program)
        .replace("{line}", line)
}

// --- scripted ---------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("reading script {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid script: {0}")]
    Parse(String),
}

const DEFAULT_KEY: &str = "_default";
const FAIL_KEY: &str = "_fail";

/// Deterministic command -> response mapping.
///
/// Script files are JSON objects mapping a command line to its response. The
/// optional `_default` entry is rendered for unknown commands, and the
/// optional `_fail` array lists commands that simulate a transport failure.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    responses: HashMap<String, String>,
    default: Option<String>,
    failing: HashSet<String>,
    strict: bool,
    budget: TokenBudget,
}

impl ScriptedBackend {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self {
            responses,
            default: None,
            failing: HashSet::new(),
            strict: false,
            budget: TokenBudget::default(),
        }
    }

    pub fn from_json_str(json: &str) -> Result<Self, ScriptError> {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(json).map_err(|e| ScriptError::Parse(e.to_string()))?;
        let mut backend = Self::new(HashMap::new());
        for (key, value) in map {
            match (key.as_str(), value) {
                (FAIL_KEY, serde_json::Value::Array(items)) => {
                    for item in items {
                        let serde_json::Value::String(cmd) = item else {
                            return Err(ScriptError::Parse("_fail entries must be strings".into()));
                        };
                        backend.failing.insert(cmd);
                    }
                }
                (DEFAULT_KEY, serde_json::Value::String(text)) => backend.default = Some(text),
                (_, serde_json::Value::String(text)) => {
                    backend.responses.insert(key, text);
                }
                (_, other) => {
                    return Err(ScriptError::Parse(format!(
                        "value for {key:?} must be a string, got {other}"
                    )))
                }
            }
        }
        Ok(backend)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn with_default(mut self, template: impl Into<String>) -> Self {
        self.default = Some(template.into());
        self
    }

    pub fn with_failures<I, S>(mut self, commands: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.failing.extend(commands.into_iter().map(Into::into));
        self
    }

    /// Key on all in-context user messages joined by newlines.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    /// Budget whose estimator synthesizes usage figures.
    pub fn with_budget(mut self, budget: TokenBudget) -> Self {
        self.budget = budget;
        self
    }

    fn lookup_key(&self, payload: &PromptPayload) -> Option<String> {
        if self.strict {
            let users: Vec<&str> = payload
                .messages
                .iter()
                .filter(|m| m.role == Role::User)
                .map(|m| m.content.as_str())
                .collect();
            if users.is_empty() {
                return None;
            }
            Some(users.join("\n"))
        } else {
            payload.final_user_message().map(str::to_owned)
        }
    }

    fn respond(&self, payload: &PromptPayload) -> Result<CompletionResult, BackendError> {
        let started = Instant::now();
        let key = self.lookup_key(payload).ok_or(BackendError::EmptyPayload)?;
        let last = payload.final_user_message().unwrap_or_default();
        if self.failing.contains(last) {
            return Err(BackendError::Transport("scripted failure".into()));
        }
        let content = match self.responses.get(&key) {
            Some(text) => text.clone(),
            None => match &self.default {
                Some(template) => render_command_template(template, last),
                None => return Err(BackendError::ScriptMiss(key)),
            },
        };
        let usage = TokenUsage::new(
            self.budget.estimate_payload(payload) as u64,
            self.budget.count_tokens(&content) as u64,
        );
        Ok(CompletionResult {
            content,
            usage,
            latency: started.elapsed(),
        })
    }
}

#[async_trait]
impl CompletionBackend for ScriptedBackend {
    async fn complete(&self, payload: &PromptPayload) -> Result<CompletionResult, BackendError> {
        self.respond(payload)
    }
}

// --- remote -----------------------------------------------------------------

/// API key wrapper that never prints itself.
#[derive(Clone)]
struct AuthToken(String);

impl fmt::Debug for AuthToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AuthToken(<redacted>)")
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: &'a [Message],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<TokenUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

/// Client for an OpenAI-compatible chat-completion endpoint.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: BackendConfig,
    token: AuthToken,
    client: reqwest::Client,
}

impl RemoteBackend {
    /// Resolves the API key from the environment. Fails immediately when the
    /// variable is unset so misconfiguration surfaces at startup.
    pub fn from_config(config: BackendConfig) -> Result<Self, BackendError> {
        let token = std::env::var(&config.auth_token_env_var)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| BackendError::MissingAuthToken {
                var: config.auth_token_env_var.clone(),
            })?;
        Self::with_token(config, token)
    }

    pub fn with_token(config: BackendConfig, token: impl Into<String>) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            token: AuthToken(token.into()),
            client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16)))
    }

    async fn send_once(&self, payload: &PromptPayload) -> Result<Option<CompletionResult>, BackendError> {
        let body = ChatRequest {
            model: &self.config.model_name,
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
            messages: &payload.messages,
        };
        let started = Instant::now();
        let response = self
            .client
            .post(&self.config.endpoint_url)
            .bearer_auth(&self.token.0)
            .json(&body)
            .send()
            .await
            .map_err(map_transport)?;
        let status = response.status();
        match status.as_u16() {
            401 | 403 => return Err(BackendError::AuthFailure { status: status.as_u16() }),
            429 => return Ok(None),
            _ if !status.is_success() => return Err(BackendError::Http { status: status.as_u16() }),
            _ => {}
        }
        let bytes = response.bytes().await.map_err(map_transport)?;
        let parsed: ChatResponse = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;
        let usage = parsed
            .usage
            .ok_or_else(|| BackendError::MalformedResponse("missing usage".into()))?;
        Ok(Some(CompletionResult {
            content: choice.message.content.unwrap_or_default(),
            usage,
            latency: started.elapsed(),
        }))
    }
}

fn map_transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        // without_url keeps query strings out of logs
        BackendError::Transport(e.without_url().to_string())
    }
}

#[async_trait]
impl CompletionBackend for RemoteBackend {
    async fn complete(&self, payload: &PromptPayload) -> Result<CompletionResult, BackendError> {
        if payload.is_empty() {
            return Err(BackendError::EmptyPayload);
        }
        let attempts = self.config.max_attempts.max(1);
        for attempt in 1..=attempts {
            if let Some(result) = self.send_once(payload).await? {
                return Ok(result);
            }
            if attempt < attempts {
                let delay = self.backoff(attempt);
                tracing::debug!(attempt, ?delay, "rate limited, backing off");
                tokio::time::sleep(delay).await;
            }
        }
        Err(BackendError::RateLimited { attempts })
    }
}
