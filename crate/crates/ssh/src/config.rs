use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use shellm_core::session::DEFAULT_INITIAL_PROMPT;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SshConfig {
    pub listen_addr: String,
    pub listen_port: u16,
    pub username: String,
    /// Accepted password. With no password every login is rejected.
    pub password: Option<String>,
    pub max_concurrent_sessions: usize,
    /// Generated on first start and reused afterwards.
    pub host_key_path: PathBuf,
    /// Prompt shown before the first model output.
    pub initial_prompt: String,
    /// Defaults to `auth.jsonl` in the transcript directory.
    pub auth_log_path: Option<PathBuf>,
    pub inactivity_timeout_secs: u64,
    /// SSH identification string sent to clients.
    pub server_id: String,
}

impl Default for SshConfig {
    fn default() -> Self {
        Self {
            listen_addr: "0.0.0.0".into(),
            listen_port: 1337,
            username: "root".into(),
            password: None,
            max_concurrent_sessions: 32,
            host_key_path: PathBuf::from("shellm_host_key"),
            initial_prompt: DEFAULT_INITIAL_PROMPT.into(),
            auth_log_path: None,
            inactivity_timeout_secs: 3600,
            server_id: "SSH-2.0-OpenSSH_8.2p1 Ubuntu-4ubuntu0.5".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SshConfigError {
    #[error("ssh.max_concurrent_sessions must be at least 1")]
    NoSessions,
    #[error("ssh.password is not set")]
    MissingPassword,
    #[error("ssh.server_id must start with \"SSH-2.0-\"")]
    BadServerId,
}

impl SshConfig {
    /// Checks what a running server needs. Port 0 is allowed and binds an
    /// ephemeral port.
    pub fn validate_for_serving(&self) -> Result<(), SshConfigError> {
        if self.max_concurrent_sessions == 0 {
            return Err(SshConfigError::NoSessions);
        }
        if self.password.as_deref().is_none_or(str::is_empty) {
            return Err(SshConfigError::MissingPassword);
        }
        if !self.server_id.starts_with("SSH-2.0-") {
            return Err(SshConfigError::BadServerId);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = SshConfig::default();
        assert_eq!(c.listen_port, 1337);
        assert_eq!(c.username, "root");
        assert_eq!(c.max_concurrent_sessions, 32);
    }

    #[test]
    fn serving_needs_password_and_capacity() {
        let mut c = SshConfig::default();
        assert_eq!(c.validate_for_serving(), Err(SshConfigError::MissingPassword));
        c.password = Some("pw".into());
        assert_eq!(c.validate_for_serving(), Ok(()));
        c.max_concurrent_sessions = 0;
        assert_eq!(c.validate_for_serving(), Err(SshConfigError::NoSessions));
    }
}
