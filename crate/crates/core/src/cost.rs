//! Token usage ledger and dollar cost reporting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::TokenUsage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PricingConfig {
    pub input_rate_usd_per_1k: f64,
    pub output_rate_usd_per_1k: f64,
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self {
            input_rate_usd_per_1k: 0.001,
            output_rate_usd_per_1k: 0.002,
        }
    }
}

impl PricingConfig {
    pub fn is_valid(&self) -> bool {
        self.input_rate_usd_per_1k >= 0.0 && self.output_rate_usd_per_1k >= 0.0
    }
}

/// Append-only record of the usage of every backend call in a session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub session_id: String,
    calls: Vec<TokenUsage>,
}

impl CostLedger {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            calls: Vec::new(),
        }
    }

    pub fn record_usage(&mut self, usage: TokenUsage) {
        self.calls.push(usage);
    }

    pub fn calls(&self) -> &[TokenUsage] {
        &self.calls
    }

    pub fn total_prompt_tokens(&self) -> u64 {
        self.calls.iter().map(|u| u.prompt_tokens).sum()
    }

    pub fn total_completion_tokens(&self) -> u64 {
        self.calls.iter().map(|u| u.completion_tokens).sum()
    }

    pub fn session_cost(&self, pricing: &PricingConfig) -> CostReport {
        let total_prompt_tokens = self.total_prompt_tokens();
        let total_completion_tokens = self.total_completion_tokens();
        // sums are exact integers, so call order cannot change the result
        let input_usd = total_prompt_tokens as f64 * pricing.input_rate_usd_per_1k / 1000.0;
        let output_usd = total_completion_tokens as f64 * pricing.output_rate_usd_per_1k / 1000.0;
        CostReport {
            input_usd,
            output_usd,
            total_usd: input_usd + output_usd,
            total_prompt_tokens,
            total_completion_tokens,
        }
    }
}

impl Extend<TokenUsage> for CostLedger {
    fn extend<I: IntoIterator<Item = TokenUsage>>(&mut self, iter: I) {
        self.calls.extend(iter);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_usd: f64,
    pub output_usd: f64,
    pub total_usd: f64,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
}

impl CostReport {
    pub fn total_tokens(&self) -> u64 {
        self.total_prompt_tokens + self.total_completion_tokens
    }
}

/// One line of the per-session cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub session: String,
    pub tokens: u64,
    pub input_usd: f64,
    pub output_usd: f64,
    pub minutes: f64,
}

impl CostRow {
    pub fn new(session: impl Into<String>, report: &CostReport, minutes: f64) -> Self {
        Self {
            session: session.into(),
            tokens: report.total_tokens(),
            input_usd: report.input_usd,
            output_usd: report.output_usd,
            minutes,
        }
    }
}

/// Aligned table with Session, Tokens, Input $, Output $ and Time [m]
/// columns, plus a total line.
pub fn render_cost_table(rows: &[CostRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.session.len())
        .chain(std::iter::once("Session".len()))
        .max()
        .unwrap_or(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>10}  {:>10}  {:>10}  {:>8}",
        "Session", "Tokens", "Input $", "Output $", "Time [m]"
    );
    let (mut tokens, mut input, mut output, mut minutes) = (0u64, 0.0, 0.0, 0.0);
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>10.4}  {:>10.4}  {:>8.0}",
            r.session, r.tokens, r.input_usd, r.output_usd, r.minutes
        );
        tokens += r.tokens;
        input += r.input_usd;
        output += r.output_usd;
        minutes += r.minutes;
    }
    let _ = writeln!(
        out,
        "{:<width$}  {:>10}  {:>10.4}  {:>10.4}  {:>8.0}",
        "Total", tokens, input, output, minutes
    );
    out
}
