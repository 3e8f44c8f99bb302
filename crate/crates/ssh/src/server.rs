//! russh server wiring: connection limits, password auth and the bridge from
//! session channels to [`run_terminal_loop`].

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use russh::keys::ssh_key::LineEnding;
use russh::keys::{Algorithm, PrivateKey};
use russh::server::{Auth, ChannelOpenHandle, Config, Handler, Msg, Session};
use russh::{Channel, ChannelId, MethodKind, MethodSet, Pty, SshId};
use shellm_core::session::SessionState;
use shellm_core::{transcript, TokenBudget};
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use crate::auth::{authenticate, AuthLog, AuthOutcome};
use crate::config::{SshConfig, SshConfigError};
use crate::terminal::{run_terminal_loop, SessionSummary, TerminalContext, TerminalMode};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] SshConfigError),
    #[error("host key {path}: {message}")]
    HostKey { path: PathBuf, message: String },
    #[error("auth log {path}: {source}")]
    AuthLog {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("initial prompt: {0}")]
    Prompt(String),
    #[error("binding {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("accept failed: {0}")]
    Accept(#[source] io::Error),
}

/// Loads the host key, creating and saving a new Ed25519 key when the file
/// does not exist yet.
pub fn load_or_create_host_key(path: &Path) -> Result<PrivateKey, ServerError> {
    let err = |message: String| ServerError::HostKey {
        path: path.to_path_buf(),
        message,
    };
    if path.exists() {
        return PrivateKey::read_openssh_file(path).map_err(|e| err(e.to_string()));
    }
    let key = PrivateKey::random(&mut rand::rng(), Algorithm::Ed25519).map_err(|e| err(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
    }
    key.write_openssh_file(path, LineEnding::LF)
        .map_err(|e| err(e.to_string()))?;
    tracing::info!(path = %path.display(), "generated new host key");
    Ok(key)
}

struct Shared {
    ssh: SshConfig,
    terminal: TerminalContext,
    budget: TokenBudget,
    auth_log: AuthLog,
}

impl Shared {
    fn new_session(&self) -> SessionState {
        self.terminal
            .start_session(self.budget.clone(), &self.ssh.initial_prompt)
            .expect("initial prompt validated at startup")
    }
}

/// A bound, not yet running, honeypot listener.
pub struct HoneypotServer {
    listener: TcpListener,
    russh_config: Arc<Config>,
    shared: Arc<Shared>,
}

impl HoneypotServer {
    pub async fn bind(ssh: SshConfig, terminal: TerminalContext, budget: TokenBudget) -> Result<Self, ServerError> {
        ssh.validate_for_serving()?;
        terminal
            .engine
            .new_session("probe", budget.clone(), &ssh.initial_prompt)
            .map_err(|e| ServerError::Prompt(e.to_string()))?;
        let key = load_or_create_host_key(&ssh.host_key_path)?;
        let log_path = ssh
            .auth_log_path
            .clone()
            .unwrap_or_else(|| terminal.transcript_dir.join("auth.jsonl"));
        let auth_log = AuthLog::open(&log_path).map_err(|source| ServerError::AuthLog {
            path: log_path.clone(),
            source,
        })?;
        std::fs::create_dir_all(&terminal.transcript_dir).map_err(|source| ServerError::AuthLog {
            path: terminal.transcript_dir.clone(),
            source,
        })?;

        let addr = format!("{}:{}", ssh.listen_addr, ssh.listen_port);
        let listener = TcpListener::bind(&addr)
            .await
            .map_err(|source| ServerError::Bind { addr, source })?;

        let russh_config = Config {
            server_id: SshId::Standard(ssh.server_id.clone().into()),
            methods: MethodSet::from(&[MethodKind::Password][..]),
            auth_rejection_time: Duration::from_secs(1),
            auth_rejection_time_initial: Some(Duration::from_millis(0)),
            inactivity_timeout: Some(Duration::from_secs(ssh.inactivity_timeout_secs.max(1))),
            keys: vec![key],
            nodelay: true,
            ..Default::default()
        };
        Ok(Self {
            listener,
            russh_config: Arc::new(russh_config),
            shared: Arc::new(Shared {
                ssh,
                terminal,
                budget,
                auth_log,
            }),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections forever. Connections beyond the session limit are
    /// closed before the SSH handshake starts.
    pub async fn run(self) -> Result<(), ServerError> {
        let limit = Arc::new(Semaphore::new(self.shared.ssh.max_concurrent_sessions));
        loop {
            let (stream, peer) = self.listener.accept().await.map_err(ServerError::Accept)?;
            let Ok(permit) = limit.clone().try_acquire_owned() else {
                tracing::warn!(%peer, "session limit reached, refusing connection");
                refuse(stream).await;
                continue;
            };
            let handler = ConnectionHandler::new(peer, self.shared.clone(), permit);
            let config = self.russh_config.clone();
            tokio::spawn(async move {
                match russh::server::run_stream(config, stream, handler).await {
                    Ok(running) => {
                        if let Err(e) = running.await {
                            tracing::debug!(%peer, error = %e, "connection ended with error");
                        }
                    }
                    Err(e) => tracing::debug!(%peer, error = %e, "handshake failed"),
                }
            });
        }
    }
}

async fn refuse(mut stream: TcpStream) {
    let _ = stream.shutdown().await;
}

struct ConnectionHandler {
    peer: SocketAddr,
    shared: Arc<Shared>,
    permit: Arc<OwnedSemaphorePermit>,
    authenticated: bool,
    channels: HashMap<ChannelId, Channel<Msg>>,
    pty: HashMap<ChannelId, bool>,
    sessions_started: usize,
}

impl ConnectionHandler {
    fn new(peer: SocketAddr, shared: Arc<Shared>, permit: OwnedSemaphorePermit) -> Self {
        Self {
            peer,
            shared,
            permit: Arc::new(permit),
            authenticated: false,
            channels: HashMap::new(),
            pty: HashMap::new(),
            sessions_started: 0,
        }
    }
}

impl Drop for ConnectionHandler {
    // Authenticated connections that never opened a shell still leave an
    // (empty) transcript behind.
    fn drop(&mut self) {
        if self.authenticated && self.sessions_started == 0 {
            let session = self.shared.new_session();
            if let Err(e) = transcript::persist(&session, &self.shared.terminal.transcript_dir) {
                tracing::error!(peer = %self.peer, error = %e, "failed to persist empty session");
            }
        }
    }
}

async fn finish(channel: &Channel<Msg>) {
    let _ = channel.exit_status(0).await;
    let _ = channel.eof().await;
    let _ = channel.close().await;
}

impl Handler for ConnectionHandler {
    type Error = russh::Error;

    async fn auth_password(&mut self, user: &str, password: &str) -> Result<Auth, Self::Error> {
        let outcome = authenticate(user, password, &self.shared.ssh);
        self.shared.auth_log.record(Some(self.peer), user, outcome);
        if outcome == AuthOutcome::Accept {
            self.authenticated = true;
            Ok(Auth::Accept)
        } else {
            Ok(Auth::Reject {
                proceed_with_methods: Some(MethodSet::from(&[MethodKind::Password][..])),
                partial_success: false,
            })
        }
    }

    async fn channel_open_session(
        &mut self,
        channel: Channel<Msg>,
        reply: ChannelOpenHandle,
        _session: &mut Session,
    ) -> Result<(), Self::Error> {
        self.channels.insert(channel.id(), channel);
        reply.accept().await;
        Ok(())
    }

    async fn pty_request(
        &mut self,
        channel: ChannelId,
        _term: &str,
        _col_width: u32,
        _row_height: u32,
        _pix_width: u32,
        _pix_height: u32,
        _modes: &[(Pty, u32)],
        session: &mut Session,
    ) -> Result<(), Self::Error> {
        self.pty.insert(channel, true);
        session.channel_success(channel)?;
        Ok(())
    }

    async fn shell_request(&mut self, channel_id: ChannelId, session: &mut Session) -> Result<(), Self::Error> {
        let Some(mut channel) = self.channels.remove(&channel_id) else {
            session.channel_failure(channel_id)?;
            return Ok(());
        };
        session.channel_success(channel_id)?;
        self.sessions_started += 1;
        let mode = if self.pty.get(&channel_id).copied().unwrap_or(false) {
            TerminalMode::Pty
        } else {
            TerminalMode::Canonical
        };
        let shared = self.shared.clone();
        let permit = self.permit.clone();
        let peer = self.peer;
        tokio::spawn(async move {
            let _permit = permit;
            let state = shared.new_session();
            tracing::info!(%peer, session = %state.session_id, ?mode, "shell started");
            let writer = channel.make_writer();
            let summary: SessionSummary = {
                let reader = channel.make_reader();
                run_terminal_loop(reader, writer, mode, state, &shared.terminal).await
            };
            tracing::info!(%peer, session = %summary.session_id, turns = summary.turns, "shell closed");
            finish(&channel).await;
        });
        Ok(())
    }

    /// `ssh host command`: one command, no prompt, then the channel closes.
    async fn exec_request(
        &mut self,
        channel_id: ChannelId,
        data: &[u8],
        session: &mut Session,
    ) -> Result<(), Self::Error> {
        let Some(channel) = self.channels.remove(&channel_id) else {
            session.channel_failure(channel_id)?;
            return Ok(());
        };
        session.channel_success(channel_id)?;
        self.sessions_started += 1;
        let command = String::from_utf8_lossy(data).trim().to_owned();
        let shared = self.shared.clone();
        let permit = self.permit.clone();
        tokio::spawn(async move {
            let _permit = permit;
            let mut state = shared.new_session();
            let terminal = &shared.terminal;
            if !command.is_empty() {
                let text = match terminal
                    .engine
                    .handle_command(&mut state, &command, terminal.backend.as_ref())
                    .await
                {
                    Ok(reply) => reply.output().to_owned(),
                    Err(_) => terminal.engine.fallback_output(&state, &command),
                };
                let body = match text.rfind('\n') {
                    Some(i) => &text[..=i],
                    None => "",
                };
                let mut writer = channel.make_writer();
                let _ = writer.write_all(body.as_bytes()).await;
                let _ = writer.flush().await;
            }
            if let Err(e) = transcript::persist(&state, &terminal.transcript_dir) {
                tracing::error!(error = %e, "failed to persist exec session");
            }
            finish(&channel).await;
        });
        Ok(())
    }
}
