use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::SshConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthOutcome {
    Accept,
    Reject,
}

/// Exact match on both username and password.
pub fn authenticate(offered_user: &str, offered_password: &str, config: &SshConfig) -> AuthOutcome {
    match config.password.as_deref() {
        Some(password) if offered_user == config.username && offered_password == password => AuthOutcome::Accept,
        _ => AuthOutcome::Reject,
    }
}

/// One line of the connection log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthAttempt {
    pub ts: DateTime<Utc>,
    pub peer: String,
    pub user: String,
    pub ok: bool,
}

/// Append-only JSON-lines log of authentication attempts.
#[derive(Debug)]
pub struct AuthLog {
    file: Mutex<File>,
}

impl AuthLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn record(&self, peer: Option<SocketAddr>, user: &str, outcome: AuthOutcome) {
        let attempt = AuthAttempt {
            ts: Utc::now(),
            peer: peer.map(|p| p.to_string()).unwrap_or_else(|| "unknown".into()),
            user: user.to_owned(),
            ok: outcome == AuthOutcome::Accept,
        };
        tracing::info!(peer = %attempt.peer, user = %attempt.user, ok = attempt.ok, "auth attempt");
        let Ok(mut line) = serde_json::to_vec(&attempt) else {
            return;
        };
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = file.write_all(&line) {
            tracing::error!(error = %e, "failed to write auth log");
        }
    }
}
