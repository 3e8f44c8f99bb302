//! Subcommand implementations. Each returns text for stdout; errors bubble
//! up to `main` as one-line diagnostics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use shellm_core::cost::{render_cost_table, CostRow};
use shellm_core::evaluation::{
    aggregate, compute_metrics, per_user_report, read_annotations, render_metrics, render_user_table, UserRow,
};
use shellm_core::transcript::{self, TranscriptRecord};
use shellm_core::{
    BackendKind, CompletionBackend, ConfusionCounts, CostLedger, CostReport, MetricsReport, PricingConfig,
    RemoteBackend, ScriptedBackend, SessionEngine, TokenBudget,
};
use shellm_ssh::{run_terminal_loop, HoneypotServer, SessionSummary, TerminalContext, TerminalMode};
use tokio::io::{AsyncRead, AsyncWrite};

use crate::config::AppConfig;

pub fn build_engine(config: &AppConfig) -> Result<SessionEngine> {
    let personality = config.load_personality()?;
    Ok(SessionEngine::new(personality)
        .with_sanitizer(config.sanitizer()?)
        .with_fallback(config.session.fallback.clone()))
}

pub fn build_budget(config: &AppConfig) -> Result<TokenBudget> {
    TokenBudget::new(config.budget_settings()).context("invalid token budget")
}

/// Builds the configured backend. A remote backend without its API key
/// fails here, before anything is served.
pub fn build_backend(config: &AppConfig, budget: &TokenBudget) -> Result<Arc<dyn CompletionBackend>> {
    match config.backend.kind {
        BackendKind::Remote => {
            let backend = RemoteBackend::from_config(config.backend.clone())?;
            Ok(Arc::new(backend))
        }
        BackendKind::Scripted => {
            let path = config
                .backend
                .script_path
                .as_deref()
                .context("backend.script_path is required for the scripted backend")?;
            let backend = ScriptedBackend::from_path(path)?
                .strict(config.backend.script_strict)
                .with_budget(budget.clone());
            Ok(Arc::new(backend))
        }
    }
}

pub fn terminal_context(config: &AppConfig, budget: &TokenBudget) -> Result<TerminalContext> {
    let engine = build_engine(config)?;
    let backend = build_backend(config, budget)?;
    std::fs::create_dir_all(&config.transcript_dir)
        .with_context(|| format!("creating transcript directory {}", config.transcript_dir.display()))?;
    Ok(TerminalContext {
        engine: Arc::new(engine),
        backend,
        transcript_dir: config.transcript_dir.clone(),
        resume_from: config.session.resume_from.clone(),
    })
}

/// Binds the SSH listener. Everything that can fail at startup fails here.
pub async fn bind_server(config: &AppConfig) -> Result<HoneypotServer> {
    let budget = build_budget(config)?;
    let terminal = terminal_context(config, &budget)?;
    let server = HoneypotServer::bind(config.ssh.clone(), terminal, budget).await?;
    Ok(server)
}

pub async fn serve(config: &AppConfig) -> Result<()> {
    let server = bind_server(config).await?;
    tracing::info!(addr = %server.local_addr()?, "listening");
    tokio::select! {
        result = server.run() => result?,
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
    }
    Ok(())
}

/// Local terminal session without SSH, persisted like a served one.
pub async fn chat<R, W>(config: &AppConfig, input: R, output: W) -> Result<SessionSummary>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let budget = build_budget(config)?;
    let ctx = terminal_context(config, &budget)?;
    let session = ctx.start_session(budget, &config.ssh.initial_prompt)?;
    Ok(run_terminal_loop(input, output, TerminalMode::Canonical, session, &ctx).await)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayTurn {
    pub index: usize,
    pub command: String,
    pub matches: bool,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub fingerprint_mismatch: bool,
    pub turns: Vec<ReplayTurn>,
}

impl ReplayReport {
    pub fn identical(&self) -> usize {
        self.turns.iter().filter(|t| t.matches).count()
    }
}

/// Re-runs every recorded command in a fresh session and compares outputs.
/// Nothing is written to disk.
pub async fn replay(config: &AppConfig, path: &Path) -> Result<ReplayReport> {
    let record = transcript::load(path)?;
    let budget = build_budget(config)?;
    let engine = build_engine(config)?;
    let backend = build_backend(config, &budget)?;
    let mut session = engine.new_session(format!("replay-{}", record.session_id), budget, &config.ssh.initial_prompt)?;
    let mut turns = Vec::with_capacity(record.turns.len());
    for turn in &record.turns {
        let actual = match engine
            .handle_command(&mut session, &turn.command_text, backend.as_ref())
            .await
        {
            Ok(reply) => reply.output().to_owned(),
            Err(e) => format!("<{e}>"),
        };
        turns.push(ReplayTurn {
            index: turn.index,
            command: turn.command_text.clone(),
            matches: actual == turn.output_text,
            expected: turn.output_text.clone(),
            actual,
        });
    }
    Ok(ReplayReport {
        session_id: record.session_id.clone(),
        fingerprint_mismatch: record.personality_fingerprint != engine.personality().fingerprint(),
        turns,
    })
}

pub fn render_replay(report: &ReplayReport) -> String {
    let mut out = String::new();
    if report.fingerprint_mismatch {
        let _ = writeln!(out, "note: transcript was recorded with a different personality prompt");
    }
    for t in &report.turns {
        if t.matches {
            let _ = writeln!(out, "= [{}] {}", t.index, t.command);
            continue;
        }
        let _ = writeln!(out, "! [{}] {}", t.index, t.command);
        for line in t.expected.lines() {
            let _ = writeln!(out, "  - {line}");
        }
        for line in t.actual.lines() {
            let _ = writeln!(out, "  + {line}");
        }
    }
    let _ = writeln!(
        out,
        "{}/{} turns identical",
        report.identical(),
        report.turns.len()
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub counts: ConfusionCounts,
    pub metrics: MetricsReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_user: Vec<UserRow>,
}

pub enum EvaluationInput {
    Annotations(PathBuf),
    /// `tp=41,fp=17,fn=1,tn=167` or a path to a JSON object of counts.
    Counts(String),
}

pub fn evaluate(input: &EvaluationInput) -> Result<EvaluationReport> {
    match input {
        EvaluationInput::Annotations(path) => {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let records = read_annotations(file)?;
            let counts = aggregate(&records)?;
            Ok(EvaluationReport {
                counts,
                metrics: compute_metrics(&counts),
                per_user: per_user_report(&records)?,
            })
        }
        EvaluationInput::Counts(spec) => {
            let counts = if spec.contains('=') {
                ConfusionCounts::parse_spec(spec)?
            } else {
                let text = std::fs::read_to_string(spec).with_context(|| format!("reading counts file {spec}"))?;
                ConfusionCounts::from_json(&text)?
            };
            Ok(EvaluationReport {
                counts,
                metrics: compute_metrics(&counts),
                per_user: Vec::new(),
            })
        }
    }
}

pub fn render_evaluation(report: &EvaluationReport) -> String {
    let mut out = render_metrics(&report.counts, &report.metrics);
    if !report.per_user.is_empty() {
        out.push('\n');
        out.push_str(&render_user_table(&report.per_user));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionCost {
    pub session: String,
    pub minutes: f64,
    #[serde(flatten)]
    pub report: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub sessions: Vec<SessionCost>,
    pub total: CostReport,
}

fn transcript_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        bail!("{} is neither a transcript file nor a directory", path.display());
    }
    Ok(transcript::list(path)?)
}

/// Costs per transcript plus the total over all of them. Turns without
/// recorded usage count as zero.
pub fn cost(pricing: &PricingConfig, path: &Path) -> Result<CostSummary> {
    let mut sessions = Vec::new();
    let mut all = CostLedger::new("total");
    for p in transcript_paths(path)? {
        let record: TranscriptRecord = transcript::load(&p)?;
        let mut ledger = CostLedger::new(record.session_id.clone());
        ledger.extend(record.turns.iter().filter_map(|t| t.usage));
        all.extend(ledger.calls().iter().copied());
        sessions.push(SessionCost {
            session: record.session_id.clone(),
            minutes: record.duration().num_milliseconds() as f64 / 60_000.0,
            report: ledger.session_cost(pricing),
        });
    }
    Ok(CostSummary {
        sessions,
        total: all.session_cost(pricing),
    })
}

pub fn render_cost(summary: &CostSummary) -> String {
    let rows: Vec<CostRow> = summary
        .sessions
        .iter()
        .map(|s| CostRow::new(s.session.clone(), &s.report, s.minutes))
        .collect();
    render_cost_table(&rows)
}
