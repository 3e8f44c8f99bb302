//! Token counting and the context budget.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::prompt::PromptPayload;

/// Default context window of the backing model.
pub const DEFAULT_CONTEXT_LIMIT: usize = 16_384;
/// Default cap on generated tokens per request.
pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 800;
/// Fixed per-message framing cost added by the estimator.
pub const DEFAULT_MESSAGE_OVERHEAD: usize = 4;

/// Counts tokens in a piece of text.
///
/// Implementations must be deterministic and monotone: appending text never
/// lowers the count.
pub trait TokenEstimator: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

/// `ceil(chars / chars_per_token)`, counting Unicode scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharHeuristic {
    pub chars_per_token: usize,
}

impl Default for CharHeuristic {
    fn default() -> Self {
        Self { chars_per_token: 4 }
    }
}

impl TokenEstimator for CharHeuristic {
    fn count_tokens(&self, text: &str) -> usize {
        text.chars().count().div_ceil(self.chars_per_token.max(1))
    }
}

/// Token count under the default heuristic.
pub fn count_tokens(text: &str) -> usize {
    CharHeuristic::default().count_tokens(text)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BudgetConfigError {
    #[error("max_output_tokens must be > 0")]
    ZeroOutput,
    #[error("context_limit ({context_limit}) must exceed max_output_tokens ({max_output_tokens})")]
    OutputExceedsContext {
        context_limit: usize,
        max_output_tokens: usize,
    },
}

/// Serializable part of [`TokenBudget`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetSettings {
    pub context_limit: usize,
    pub max_output_tokens: usize,
    pub message_overhead: usize,
}

impl Default for BudgetSettings {
    fn default() -> Self {
        Self {
            context_limit: DEFAULT_CONTEXT_LIMIT,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            message_overhead: DEFAULT_MESSAGE_OVERHEAD,
        }
    }
}

/// Context limit, reserved output space and the estimator used to check a
/// payload before it is sent.
#[derive(Clone)]
pub struct TokenBudget {
    settings: BudgetSettings,
    estimator: Arc<dyn TokenEstimator>,
}

impl TokenBudget {
    pub fn new(settings: BudgetSettings) -> Result<Self, BudgetConfigError> {
        Self::with_estimator(settings, Arc::new(CharHeuristic::default()))
    }

    pub fn with_estimator(
        settings: BudgetSettings,
        estimator: Arc<dyn TokenEstimator>,
    ) -> Result<Self, BudgetConfigError> {
        if settings.max_output_tokens == 0 {
            return Err(BudgetConfigError::ZeroOutput);
        }
        if settings.context_limit <= settings.max_output_tokens {
            return Err(BudgetConfigError::OutputExceedsContext {
                context_limit: settings.context_limit,
                max_output_tokens: settings.max_output_tokens,
            });
        }
        Ok(Self {
            settings,
            estimator,
        })
    }

    pub fn settings(&self) -> BudgetSettings {
        self.settings
    }

    pub fn context_limit(&self) -> usize {
        self.settings.context_limit
    }

    pub fn max_output_tokens(&self) -> usize {
        self.settings.max_output_tokens
    }

    pub fn message_overhead(&self) -> usize {
        self.settings.message_overhead
    }

    pub fn estimator(&self) -> &Arc<dyn TokenEstimator> {
        &self.estimator
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.estimator.count_tokens(text)
    }

    /// Sum over messages of the estimated content tokens plus the fixed
    /// per-message overhead.
    pub fn estimate_payload(&self, payload: &PromptPayload) -> usize {
        payload
            .messages
            .iter()
            .map(|m| self.count_tokens(&m.content) + self.settings.message_overhead)
            .sum()
    }

    /// Whether a request of `prompt_tokens` still leaves room for a full
    /// completion. The boundary is inclusive.
    pub fn fits(&self, prompt_tokens: usize) -> bool {
        prompt_tokens
            .checked_add(self.settings.max_output_tokens)
            .is_some_and(|needed| needed <= self.settings.context_limit)
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            settings: BudgetSettings::default(),
            estimator: Arc::new(CharHeuristic::default()),
        }
    }
}

impl fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenBudget")
            .field("settings", &self.settings)
            .finish_non_exhaustive()
    }
}
