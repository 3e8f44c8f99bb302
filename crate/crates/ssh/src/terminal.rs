//! Line-oriented terminal loop between a byte stream and the session engine.

use std::collections::VecDeque;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use shellm_core::session::{SessionEngine, SessionError, SessionState};
use shellm_core::transcript;
use shellm_core::{CompletionBackend, TokenBudget};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Longest line kept; further bytes on the same line are dropped.
pub const MAX_LINE_BYTES: usize = 16 * 1024;

/// Everything a terminal loop shares with its siblings.
pub struct TerminalContext {
    pub engine: Arc<SessionEngine>,
    pub backend: Arc<dyn CompletionBackend>,
    pub transcript_dir: PathBuf,
    /// Transcript every new session continues from.
    pub resume_from: Option<PathBuf>,
}

impl TerminalContext {
    /// New session, seeded from `resume_from` when set. An unreadable
    /// transcript is logged and a fresh session started instead.
    pub fn start_session(&self, budget: TokenBudget, initial_prompt: &str) -> Result<SessionState, SessionError> {
        let session_id = SessionState::new_id();
        if let Some(path) = &self.resume_from {
            match transcript::resume(path, session_id.clone(), self.engine.personality(), budget.clone(), initial_prompt) {
                Ok(resumed) => return Ok(resumed.session),
                Err(e) => tracing::error!(error = %e, "cannot resume transcript, starting fresh"),
            }
        }
        self.engine.new_session(session_id, budget, initial_prompt)
    }
}

/// How raw client bytes are turned into lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalMode {
    /// Client does its own line editing and sends whole lines (`ssh -T`,
    /// piped stdin). Nothing is echoed.
    #[default]
    Canonical,
    /// A PTY was requested: the client sends keystrokes, so echo them, handle
    /// backspace/Ctrl-C/Ctrl-D and translate output newlines to CRLF.
    Pty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndReason {
    Exit,
    Eof,
    TransportError,
}

#[derive(Debug, Clone)]
pub struct SessionSummary {
    pub session_id: String,
    pub turns: usize,
    pub duration: Duration,
    pub end: EndReason,
    /// JSON transcript, absent only if persisting failed.
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, PartialEq, Eq)]
enum LineEvent {
    Line(String),
    Interrupt,
    Eof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Escape {
    None,
    Esc,
    Csi,
}

struct LineReader<R> {
    input: R,
    mode: TerminalMode,
    pending: VecDeque<u8>,
    line: Vec<u8>,
    escape: Escape,
    last_was_cr: bool,
}

impl<R: AsyncRead + Unpin> LineReader<R> {
    fn new(input: R, mode: TerminalMode) -> Self {
        Self {
            input,
            mode,
            pending: VecDeque::new(),
            line: Vec::new(),
            escape: Escape::None,
            last_was_cr: false,
        }
    }

    fn take_line(&mut self) -> LineEvent {
        let bytes = std::mem::take(&mut self.line);
        LineEvent::Line(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn push_byte(&mut self, b: u8) {
        if self.line.len() < MAX_LINE_BYTES {
            self.line.push(b);
        }
    }

    // Removes the last UTF-8 character from the line buffer.
    fn pop_char(&mut self) -> bool {
        let mut removed = false;
        while let Some(b) = self.line.pop() {
            removed = true;
            if b & 0xC0 != 0x80 {
                break;
            }
        }
        removed
    }

    async fn next_event<W: AsyncWrite + Unpin>(&mut self, echo: &mut W) -> io::Result<LineEvent> {
        loop {
            while let Some(b) = self.pending.pop_front() {
                let event = match self.mode {
                    TerminalMode::Canonical => self.canonical_byte(b),
                    TerminalMode::Pty => self.pty_byte(b, echo).await?,
                };
                if let Some(event) = event {
                    return Ok(event);
                }
            }
            let mut chunk = [0u8; 4096];
            let n = self.input.read(&mut chunk).await?;
            if n == 0 {
                // a final unterminated line still counts
                if !self.line.is_empty() {
                    return Ok(self.take_line());
                }
                return Ok(LineEvent::Eof);
            }
            self.pending.extend(&chunk[..n]);
        }
    }

    fn canonical_byte(&mut self, b: u8) -> Option<LineEvent> {
        match b {
            b'\n' => {
                if self.line.last() == Some(&b'\r') {
                    self.line.pop();
                }
                Some(self.take_line())
            }
            _ => {
                self.push_byte(b);
                None
            }
        }
    }

    async fn pty_byte<W: AsyncWrite + Unpin>(&mut self, b: u8, echo: &mut W) -> io::Result<Option<LineEvent>> {
        let after_cr = std::mem::replace(&mut self.last_was_cr, false);
        match self.escape {
            Escape::Esc => {
                self.escape = if b == b'[' || b == b'O' { Escape::Csi } else { Escape::None };
                return Ok(None);
            }
            Escape::Csi => {
                if (0x40..=0x7e).contains(&b) {
                    self.escape = Escape::None;
                }
                return Ok(None);
            }
            Escape::None => {}
        }
        match b {
            b'\r' | b'\n' => {
                if b == b'\n' && after_cr {
                    return Ok(None);
                }
                self.last_was_cr = b == b'\r';
                echo.write_all(b"\r\n").await?;
                Ok(Some(self.take_line()))
            }
            0x7f | 0x08 => {
                if self.pop_char() {
                    echo.write_all(b"\x08 \x08").await?;
                }
                Ok(None)
            }
            0x03 => {
                self.line.clear();
                echo.write_all(b"^C\r\n").await?;
                Ok(Some(LineEvent::Interrupt))
            }
            0x04 => Ok(if self.line.is_empty() { Some(LineEvent::Eof) } else { None }),
            0x1b => {
                self.escape = Escape::Esc;
                Ok(None)
            }
            b'\t' => Ok(None),
            _ if b < 0x20 => Ok(None),
            _ => {
                self.push_byte(b);
                echo.write_all(&[b]).await?;
                Ok(None)
            }
        }
    }
}

fn to_wire(mode: TerminalMode, text: &str) -> Vec<u8> {
    match mode {
        TerminalMode::Canonical => text.as_bytes().to_vec(),
        TerminalMode::Pty => {
            let mut out = Vec::with_capacity(text.len() + 16);
            let mut prev = 0u8;
            for &b in text.as_bytes() {
                if b == b'\n' && prev != b'\r' {
                    out.push(b'\r');
                }
                out.push(b);
                prev = b;
            }
            out
        }
    }
}

async fn send<W: AsyncWrite + Unpin>(out: &mut W, mode: TerminalMode, text: &str) -> io::Result<()> {
    out.write_all(&to_wire(mode, text)).await?;
    out.flush().await
}

fn is_exit(command: &str) -> bool {
    matches!(command, "exit" | "logout")
}

/// Runs one interactive session until `exit`/`logout`, EOF or a transport
/// error, then persists it. The client only ever sees the prompt, echoes of
/// its own input and sanitized engine output.
pub async fn run_terminal_loop<R, W>(
    input: R,
    mut output: W,
    mode: TerminalMode,
    mut session: SessionState,
    ctx: &TerminalContext,
) -> SessionSummary
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let started = Instant::now();
    let mut reader = LineReader::new(input, mode);
    let end = match drive(&mut reader, &mut output, mode, &mut session, ctx).await {
        Ok(end) => end,
        Err(e) => {
            tracing::debug!(session = %session.session_id, error = %e, "terminal transport closed");
            EndReason::TransportError
        }
    };
    let transcript = match transcript::persist(&session, &ctx.transcript_dir) {
        Ok(path) => Some(path),
        Err(e) => {
            tracing::error!(session = %session.session_id, error = %e, "failed to persist transcript");
            None
        }
    };
    tracing::info!(session = %session.session_id, turns = session.history.len(), ?end, "session finished");
    SessionSummary {
        session_id: session.session_id.clone(),
        turns: session.history.len(),
        duration: started.elapsed(),
        end,
        transcript,
    }
}

async fn drive<R, W>(
    reader: &mut LineReader<R>,
    output: &mut W,
    mode: TerminalMode,
    session: &mut SessionState,
    ctx: &TerminalContext,
) -> io::Result<EndReason>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    send(output, mode, &session.prompt_line).await?;
    loop {
        let line = match reader.next_event(output).await? {
            LineEvent::Eof => return Ok(EndReason::Eof),
            LineEvent::Interrupt => {
                send(output, mode, &session.prompt_line).await?;
                continue;
            }
            LineEvent::Line(line) => line,
        };
        let command = line.trim();
        if command.is_empty() {
            send(output, mode, &session.prompt_line).await?;
            continue;
        }
        if is_exit(command) {
            return Ok(EndReason::Exit);
        }
        let text = match ctx.engine.handle_command(session, command, ctx.backend.as_ref()).await {
            Ok(reply) => reply.output().to_owned(),
            Err(SessionError::OversizedInput { .. }) | Err(SessionError::EmptyCommand) => {
                ctx.engine.fallback_output(session, command)
            }
            Err(e) => {
                tracing::error!(session = %session.session_id, error = %e, "command failed");
                ctx.engine.fallback_output(session, command)
            }
        };
        send(output, mode, &text).await?;
    }
}
