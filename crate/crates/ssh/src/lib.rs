//! SSH front end for the shellm honeypot.

pub mod auth;
pub mod config;
pub mod server;
pub mod terminal;

pub use auth::{authenticate, AuthLog, AuthOutcome};
pub use config::SshConfig;
pub use server::HoneypotServer;
pub use terminal::{run_terminal_loop, EndReason, SessionSummary, TerminalContext, TerminalMode};
