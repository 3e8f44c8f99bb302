//! Core of an LLM-backed SSH shell honeypot: session state and prompt
//! construction, completion backends, transcript persistence, cost
//! accounting and deception metrics.

pub mod backend;
pub mod cost;
pub mod evaluation;
pub mod prompt;
pub mod session;
pub mod tokens;
pub mod transcript;

pub use backend::{
    BackendConfig, BackendError, BackendKind, CompletionBackend, CompletionResult, RemoteBackend, ScriptedBackend,
    TokenUsage,
};
pub use cost::{CostLedger, CostReport, PricingConfig};
pub use evaluation::{AnnotationRecord, ConfusionCounts, Label, MetricsReport};
pub use prompt::{Message, PersonalityPrompt, PromptPayload, Role};
pub use session::{BudgetDecision, Reply, Sanitizer, SessionEngine, SessionError, SessionState, Turn};
pub use tokens::{BudgetSettings, TokenBudget, TokenEstimator};
pub use transcript::TranscriptRecord;
