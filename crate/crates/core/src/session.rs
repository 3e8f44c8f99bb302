//! Per-session state, prompt construction, context budgeting and the
//! command/response loop.

use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{render_command_template, BackendError, CompletionBackend, TokenUsage};
use crate::prompt::{Message, PersonalityPrompt, PromptPayload};
use crate::tokens::TokenBudget;

pub const DEFAULT_PROMPT_PATTERN: &str = r"^[A-Za-z0-9._-]+@[A-Za-z0-9._-]+:[^\n]*[$#] $";
pub const DEFAULT_INITIAL_PROMPT: &str = "root@ubuntu:~# ";
pub const DEFAULT_FALLBACK: &str = "bash: {command}: command not found";

static DEFAULT_SANITIZER: LazyLock<Sanitizer> =
    LazyLock::new(|| Sanitizer::new(DEFAULT_PROMPT_PATTERN).expect("default prompt pattern compiles"));

/// One command and the (sanitized) terminal output it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    #[serde(rename = "command")]
    pub command_text: String,
    #[serde(rename = "output")]
    pub output_text: String,
    #[serde(rename = "ts")]
    pub timestamp: DateTime<Utc>,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub session_id: String,
    pub history: Vec<Turn>,
    /// First turn still inside the model's context.
    pub context_start: usize,
    pub budget: TokenBudget,
    pub created_at: DateTime<Utc>,
    pub personality_fingerprint: String,
    /// Prompt shown before any model output existed.
    pub initial_prompt: String,
    /// Most recent shell prompt line shown to the client.
    pub prompt_line: String,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>, budget: TokenBudget, personality: &PersonalityPrompt) -> Self {
        Self::with_initial_prompt(session_id, budget, personality, DEFAULT_INITIAL_PROMPT)
    }

    pub fn with_initial_prompt(
        session_id: impl Into<String>,
        budget: TokenBudget,
        personality: &PersonalityPrompt,
        initial_prompt: impl Into<String>,
    ) -> Self {
        let initial_prompt = initial_prompt.into();
        Self {
            session_id: session_id.into(),
            history: Vec::new(),
            context_start: 0,
            budget,
            created_at: Utc::now(),
            personality_fingerprint: personality.fingerprint(),
            prompt_line: initial_prompt.clone(),
            initial_prompt,
        }
    }

    pub fn new_id() -> String {
        uuid::Uuid::new_v4().to_string()
    }

    pub fn in_context(&self) -> &[Turn] {
        &self.history[self.context_start.min(self.history.len())..]
    }

    /// Drops every turn from the model's context. The history itself is kept.
    pub fn wipe_context(&mut self) {
        self.context_start = self.history.len();
    }

    pub(crate) fn push_turn(&mut self, command: &str, output: String, usage: Option<TokenUsage>) {
        self.prompt_line = last_line(&output).to_owned();
        self.history.push(Turn {
            index: self.history.len(),
            command_text: command.to_owned(),
            output_text: output,
            timestamp: Utc::now(),
            usage,
        });
    }
}

fn last_line(text: &str) -> &str {
    text.rsplit('\n').next().unwrap_or(text)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("empty command")]
    EmptyCommand,
    #[error("command needs {needed} tokens even without history, limit is {limit}")]
    OversizedInput { needed: usize, limit: usize },
    #[error("invalid prompt pattern: {0}")]
    InvalidPattern(String),
    #[error("initial prompt {0:?} does not match the prompt pattern")]
    InitialPromptMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetDecision {
    Proceed,
    WipeAndRebuild,
}

/// System message, then every in-context turn as a user/assistant pair, then
/// the new command.
pub fn build_prompt(personality: &PersonalityPrompt, session: &SessionState, command: &str) -> PromptPayload {
    let turns = session.in_context();
    let mut messages = Vec::with_capacity(2 + 2 * turns.len());
    messages.push(Message::system(personality.text()));
    for turn in turns {
        messages.push(Message::user(turn.command_text.clone()));
        messages.push(Message::assistant(turn.output_text.clone()));
    }
    messages.push(Message::user(command));
    PromptPayload { messages }
}

pub fn estimate_payload_tokens(payload: &PromptPayload, budget: &TokenBudget) -> usize {
    budget.estimate_payload(payload)
}

/// Checks `candidate` against the session budget. When it does not fit the
/// in-context history is wiped and the payload rebuilt from the personality
/// prompt and `command` alone.
pub fn enforce_budget(
    personality: &PersonalityPrompt,
    session: &mut SessionState,
    candidate: PromptPayload,
    command: &str,
) -> Result<(BudgetDecision, PromptPayload), SessionError> {
    if session.budget.fits(estimate_payload_tokens(&candidate, &session.budget)) {
        return Ok((BudgetDecision::Proceed, candidate));
    }
    session.wipe_context();
    let rebuilt = build_prompt(personality, session, command);
    let needed = estimate_payload_tokens(&rebuilt, &session.budget);
    if !session.budget.fits(needed) {
        return Err(SessionError::OversizedInput {
            needed: needed + session.budget.max_output_tokens(),
            limit: session.budget.context_limit(),
        });
    }
    tracing::info!(session = %session.session_id, turns = session.history.len(), "context full, history wiped");
    Ok((BudgetDecision::WipeAndRebuild, rebuilt))
}

/// Cleans model output so it looks like raw terminal output ending in a
/// prompt line.
#[derive(Debug, Clone)]
pub struct Sanitizer {
    prompt_pattern: Regex,
}

impl Sanitizer {
    pub fn new(prompt_pattern: &str) -> Result<Self, SessionError> {
        let prompt_pattern = Regex::new(prompt_pattern).map_err(|e| SessionError::InvalidPattern(e.to_string()))?;
        Ok(Self { prompt_pattern })
    }

    pub fn is_prompt_line(&self, line: &str) -> bool {
        self.prompt_pattern.is_match(line)
    }

    /// Idempotent as long as `last_prompt` itself is a prompt line.
    pub fn sanitize(&self, raw: &str, last_prompt: &str) -> String {
        let mut text = raw.replace("\r\n", "\n").replace('\r', "\n");
        if let Some(inner) = strip_fence(&text) {
            text = inner;
        }
        let text = text.trim_start_matches('\n');
        let body = text.trim_end_matches('\n');
        let (head, last) = match body.rfind('\n') {
            Some(i) => (&body[..=i], &body[i + 1..]),
            None => ("", body),
        };
        if !last.is_empty() {
            let candidate = if last.ends_with(' ') {
                last.to_owned()
            } else {
                format!("{last} ")
            };
            if self.is_prompt_line(&candidate) {
                return format!("{head}{candidate}");
            }
        }
        if body.is_empty() {
            return last_prompt.to_owned();
        }
        format!("{body}\n{last_prompt}")
    }
}

impl Default for Sanitizer {
    fn default() -> Self {
        DEFAULT_SANITIZER.clone()
    }
}

/// Sanitizes with the default prompt pattern.
pub fn sanitize_output(raw: &str, last_prompt: &str) -> String {
    DEFAULT_SANITIZER.sanitize(raw, last_prompt)
}

// Returns the fenced body when the whole text is a single ``` block.
fn strip_fence(text: &str) -> Option<String> {
    let t = text.trim();
    if t.len() < 6 || !t.starts_with("```") || !t.ends_with("```") {
        return None;
    }
    let open_end = t.find('\n')?;
    let info = &t[3..open_end];
    if !info.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return None;
    }
    let inner = &t[open_end + 1..t.len() - 3];
    if inner.lines().any(|l| l.starts_with("```")) {
        return None;
    }
    Some(inner.strip_suffix('\n').unwrap_or(inner).to_owned())
}

/// What the client should see after a command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Generated { output: String, decision: BudgetDecision },
    /// The backend failed; `output` is a shell-style error and no turn was
    /// recorded.
    Fallback { output: String, error: BackendError },
}

impl Reply {
    pub fn output(&self) -> &str {
        match self {
            Reply::Generated { output, .. } | Reply::Fallback { output, .. } => output,
        }
    }
}

/// Shared, immutable per-deployment engine. Session state lives with the
/// caller.
#[derive(Debug, Clone)]
pub struct SessionEngine {
    personality: PersonalityPrompt,
    sanitizer: Sanitizer,
    fallback_template: String,
}

impl SessionEngine {
    pub fn new(personality: PersonalityPrompt) -> Self {
        Self {
            personality,
            sanitizer: Sanitizer::default(),
            fallback_template: DEFAULT_FALLBACK.into(),
        }
    }

    pub fn with_sanitizer(mut self, sanitizer: Sanitizer) -> Self {
        self.sanitizer = sanitizer;
        self
    }

    pub fn with_fallback(mut self, template: impl Into<String>) -> Self {
        self.fallback_template = template.into();
        self
    }

    pub fn personality(&self) -> &PersonalityPrompt {
        &self.personality
    }

    pub fn sanitizer(&self) -> &Sanitizer {
        &self.sanitizer
    }

    /// Fresh session whose initial prompt is checked against the sanitizer.
    pub fn new_session(
        &self,
        session_id: impl Into<String>,
        budget: TokenBudget,
        initial_prompt: &str,
    ) -> Result<SessionState, SessionError> {
        if !self.sanitizer.is_prompt_line(initial_prompt) {
            return Err(SessionError::InitialPromptMismatch(initial_prompt.to_owned()));
        }
        Ok(SessionState::with_initial_prompt(
            session_id,
            budget,
            &self.personality,
            initial_prompt,
        ))
    }

    pub fn build_prompt(&self, session: &SessionState, command: &str) -> PromptPayload {
        build_prompt(&self.personality, session, command)
    }

    /// Shell-style error line for `command`, followed by the current prompt.
    pub fn fallback_output(&self, session: &SessionState, command: &str) -> String {
        let line = render_command_template(&self.fallback_template, command);
        self.sanitizer.sanitize(&line, &session.prompt_line)
    }

    pub async fn handle_command(
        &self,
        session: &mut SessionState,
        command: &str,
        backend: &dyn CompletionBackend,
    ) -> Result<Reply, SessionError> {
        let command = command.trim_end_matches(['\n', '\r']);
        if command.is_empty() {
            return Err(SessionError::EmptyCommand);
        }
        let candidate = self.build_prompt(session, command);
        let (decision, payload) = enforce_budget(&self.personality, session, candidate, command)?;
        match backend.complete(&payload).await {
            Ok(result) => {
                let output = self.sanitizer.sanitize(&result.content, &session.prompt_line);
                session.push_turn(command, output.clone(), Some(result.usage));
                Ok(Reply::Generated { output, decision })
            }
            Err(error) => {
                tracing::warn!(session = %session.session_id, %error, "backend call failed, sending fallback");
                let output = self.fallback_output(session, command);
                Ok(Reply::Fallback { output, error })
            }
        }
    }
}
