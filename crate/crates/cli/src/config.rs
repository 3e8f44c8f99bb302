//! Configuration loading: TOML file, then `SHELLM_*` environment variables,
//! then command line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shellm_core::backend::DEFAULT_MODEL;
use shellm_core::session::{DEFAULT_FALLBACK, DEFAULT_PROMPT_PATTERN};
use shellm_core::tokens::{DEFAULT_CONTEXT_LIMIT, DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_MESSAGE_OVERHEAD};
use shellm_core::{BackendConfig, BackendKind, BudgetSettings, PersonalityPrompt, PricingConfig, Sanitizer};
use shellm_ssh::SshConfig;
use toml::Value;

pub const ENV_PREFIX: &str = "SHELLM_";

const SECTIONS: [&str; 5] = ["ssh", "backend", "budget", "pricing", "session"];

// Keys that may only come from the environment.
const SECRET_KEYS: [&str; 1] = ["ssh.password"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub context_limit: usize,
    pub message_overhead: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            context_limit: DEFAULT_CONTEXT_LIMIT,
            message_overhead: DEFAULT_MESSAGE_OVERHEAD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Regex a line must match to count as a shell prompt.
    pub prompt_pattern: String,
    /// Shown when the backend fails. `{command}` is the program name.
    pub fallback: String,
    /// Transcript that every new session continues from.
    pub resume_from: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            prompt_pattern: DEFAULT_PROMPT_PATTERN.into(),
            fallback: DEFAULT_FALLBACK.into(),
            resume_from: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub personality_path: PathBuf,
    pub transcript_dir: PathBuf,
    pub log_level: String,
    pub ssh: SshConfig,
    pub backend: BackendConfig,
    pub budget: ContextConfig,
    pub pricing: PricingConfig,
    pub session: SessionConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            personality_path: PathBuf::new(),
            transcript_dir: PathBuf::from("transcripts"),
            log_level: "info".into(),
            ssh: SshConfig::default(),
            backend: BackendConfig::default(),
            budget: ContextConfig::default(),
            pricing: PricingConfig::default(),
            session: SessionConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn budget_settings(&self) -> BudgetSettings {
        BudgetSettings {
            context_limit: self.budget.context_limit,
            max_output_tokens: self.backend.max_output_tokens as usize,
            message_overhead: self.budget.message_overhead,
        }
    }

    pub fn load_personality(&self) -> Result<PersonalityPrompt, ConfigError> {
        let text = std::fs::read_to_string(&self.personality_path)
            .map_err(|_| ConfigError::MissingPersonality(self.personality_path.clone()))?;
        PersonalityPrompt::with_default_markers(text).map_err(|e| ConfigError::InvalidValue {
            field: "personality_path".into(),
            message: e.to_string(),
        })
    }

    pub fn sanitizer(&self) -> Result<Sanitizer, ConfigError> {
        Sanitizer::new(&self.session.prompt_pattern).map_err(|e| ConfigError::InvalidValue {
            field: "session.prompt_pattern".into(),
            message: e.to_string(),
        })
    }
}

/// Values given on the command line. They win over file and environment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CliOverrides {
    pub port: Option<u16>,
    pub backend: Option<BackendKind>,
    pub script: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path} is not valid TOML: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("personality prompt file {0:?} not found (set personality_path)")]
    MissingPersonality(PathBuf),
    #[error("invalid value for {field}: {message}")]
    InvalidValue { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: AppConfig,
    /// Settings that differ from the reference deployment.
    pub warnings: Vec<String>,
}

/// Loads the effective configuration. `env` is usually `std::env::vars()`;
/// only `SHELLM_*` entries are looked at.
pub fn load_config<I>(path: Option<&Path>, env: I, cli: &CliOverrides) -> Result<LoadedConfig, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut tree = match path {
        Some(path) => read_file(path)?,
        None => toml::Table::new(),
    };
    for key in SECRET_KEYS {
        if lookup(&tree, key).is_some() {
            return Err(invalid(
                key,
                format!("secrets are only read from the environment ({})", env_name(key)),
            ));
        }
    }
    let reference = defaults_tree();
    check_known_keys(&tree, &reference, "")?;

    let env: BTreeMap<String, String> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    for (name, raw) in &env {
        let key = env_key(name).ok_or_else(|| invalid(name, "unknown configuration key"))?;
        let value = typed_value(&key, raw, &reference)?;
        insert(&mut tree, &key, value);
    }

    let mut config: AppConfig = AppConfig::deserialize(Value::Table(tree)).map_err(|e| {
        let message = e.to_string();
        invalid(&field_from_message(&message), message.trim())
    })?;

    if let Some(port) = cli.port {
        config.ssh.listen_port = port;
    }
    if let Some(kind) = cli.backend {
        config.backend.kind = kind;
    }
    if let Some(script) = &cli.script {
        config.backend.script_path = Some(script.clone());
    }

    validate(&config)?;
    Ok(LoadedConfig {
        warnings: deviations(&config),
        config,
    })
}

fn read_file(path: &Path) -> Result<toml::Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    text.parse::<toml::Table>().map_err(|e| ConfigError::Syntax {
        path: path.to_path_buf(),
        message: e.message().to_owned(),
    })
}

fn defaults_tree() -> toml::Table {
    match Value::try_from(AppConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("AppConfig serializes to a table"),
    }
}

// Optional keys are absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 4] = [
    "ssh.password",
    "ssh.auth_log_path",
    "backend.script_path",
    "session.resume_from",
];

fn check_known_keys(tree: &toml::Table, reference: &toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (key, value) in tree {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (value, reference.get(key)) {
            (Value::Table(sub), Some(Value::Table(sub_ref))) => check_known_keys(sub, sub_ref, &path)?,
            (_, Some(_)) => {}
            (_, None) if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            (_, None) => return Err(invalid(&path, "unknown configuration key")),
        }
    }
    Ok(())
}

/// `ssh.listen_port` -> `SHELLM_SSH_LISTEN_PORT`
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

fn env_key(name: &str) -> Option<String> {
    let rest = name.strip_prefix(ENV_PREFIX)?.to_lowercase();
    for section in SECTIONS {
        if let Some(key) = rest.strip_prefix(section).and_then(|r| r.strip_prefix('_')) {
            return Some(format!("{section}.{key}"));
        }
    }
    Some(rest)
}

fn lookup<'a>(tree: &'a toml::Table, key: &str) -> Option<&'a Value> {
    match key.split_once('.') {
        Some((section, rest)) => tree.get(section)?.as_table()?.get(rest),
        None => tree.get(key),
    }
}

fn insert(tree: &mut toml::Table, key: &str, value: Value) {
    match key.split_once('.') {
        Some((section, rest)) => {
            let entry = tree
                .entry(section.to_owned())
                .or_insert_with(|| Value::Table(toml::Table::new()));
            if let Value::Table(t) = entry {
                t.insert(rest.to_owned(), value);
            }
        }
        None => {
            tree.insert(key.to_owned(), value);
        }
    }
}

// Environment strings take the type of the default value at the same key.
fn typed_value(key: &str, raw: &str, reference: &toml::Table) -> Result<Value, ConfigError> {
    let bad = |what: &str| invalid(key, format!("{raw:?} is not {what}"));
    match lookup(reference, key) {
        Some(Value::Integer(_)) => raw.trim().parse::<i64>().map(Value::Integer).map_err(|_| bad("an integer")),
        Some(Value::Float(_)) => raw.trim().parse::<f64>().map(Value::Float).map_err(|_| bad("a number")),
        Some(Value::Boolean(_)) => raw.trim().parse::<bool>().map(Value::Boolean).map_err(|_| bad("true or false")),
        Some(Value::String(_)) => Ok(Value::String(raw.to_owned())),
        Some(_) => Err(invalid(key, "cannot be set from the environment")),
        None if OPTIONAL_KEYS.contains(&key) => Ok(Value::String(raw.to_owned())),
        None => Err(invalid(key, "unknown configuration key")),
    }
}

// serde errors from toml mention the offending key as "... in `ssh.listen_port`"
// or similar; fall back to the whole config.
fn field_from_message(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .filter(|s| !s.contains(' '))
        .unwrap_or("config")
        .to_owned()
}

fn validate(c: &AppConfig) -> Result<(), ConfigError> {
    if c.personality_path.as_os_str().is_empty() || !c.personality_path.is_file() {
        return Err(ConfigError::MissingPersonality(c.personality_path.clone()));
    }
    if !(0.0..=2.0).contains(&c.backend.temperature) {
        return Err(invalid("backend.temperature", "must be between 0 and 2"));
    }
    if c.backend.max_output_tokens == 0 {
        return Err(invalid("backend.max_output_tokens", "must be positive"));
    }
    if c.budget.context_limit <= c.backend.max_output_tokens as usize {
        return Err(invalid(
            "budget.context_limit",
            "must be larger than backend.max_output_tokens",
        ));
    }
    if c.backend.max_attempts == 0 {
        return Err(invalid("backend.max_attempts", "must be at least 1"));
    }
    if c.pricing.input_rate_usd_per_1k < 0.0 || !c.pricing.input_rate_usd_per_1k.is_finite() {
        return Err(invalid("pricing.input_rate_usd_per_1k", "must be a non-negative number"));
    }
    if c.pricing.output_rate_usd_per_1k < 0.0 || !c.pricing.output_rate_usd_per_1k.is_finite() {
        return Err(invalid("pricing.output_rate_usd_per_1k", "must be a non-negative number"));
    }
    if c.log_level.parse::<tracing::Level>().is_err() {
        return Err(invalid("log_level", "expected one of trace, debug, info, warn, error"));
    }
    let sanitizer = c.sanitizer()?;
    if !sanitizer.is_prompt_line(&c.ssh.initial_prompt) {
        return Err(invalid(
            "ssh.initial_prompt",
            "does not match session.prompt_pattern",
        ));
    }
    if c.backend.kind == BackendKind::Scripted {
        match &c.backend.script_path {
            None => return Err(invalid("backend.script_path", "required for the scripted backend")),
            Some(p) if !p.is_file() => return Err(invalid("backend.script_path", format!("{} not found", p.display()))),
            Some(_) => {}
        }
    }
    if let Some(p) = &c.session.resume_from {
        if !p.is_file() {
            return Err(invalid("session.resume_from", format!("{} not found", p.display())));
        }
    }
    Ok(())
}

fn deviations(c: &AppConfig) -> Vec<String> {
    let mut out = Vec::new();
    if c.backend.temperature != 0.0 {
        out.push(format!(
            "backend.temperature = {} deviates from the reference value 0",
            c.backend.temperature
        ));
    }
    if c.backend.max_output_tokens as usize != DEFAULT_MAX_OUTPUT_TOKENS {
        out.push(format!(
            "backend.max_output_tokens = {} deviates from the reference value {DEFAULT_MAX_OUTPUT_TOKENS}",
            c.backend.max_output_tokens
        ));
    }
    if c.budget.context_limit != DEFAULT_CONTEXT_LIMIT {
        out.push(format!(
            "budget.context_limit = {} deviates from the reference value {DEFAULT_CONTEXT_LIMIT}",
            c.budget.context_limit
        ));
    }
    if c.backend.kind == BackendKind::Remote && c.backend.model_name != DEFAULT_MODEL {
        out.push(format!(
            "backend.model_name = {:?} deviates from the reference model {DEFAULT_MODEL:?}",
            c.backend.model_name
        ));
    }
    out
}
