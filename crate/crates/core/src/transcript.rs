//! Session persistence: an authoritative JSON transcript plus a plain-text
//! mirror of what the terminal showed.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::prompt::PersonalityPrompt;
use crate::session::{SessionState, Turn};
use crate::tokens::TokenBudget;

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("transcript io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot parse transcript {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub personality_fingerprint: String,
    pub turns: Vec<Turn>,
}

impl TranscriptRecord {
    pub fn from_session(session: &SessionState) -> Self {
        Self {
            session_id: session.session_id.clone(),
            created_at: session.created_at,
            personality_fingerprint: session.personality_fingerprint.clone(),
            turns: session.history.clone(),
        }
    }

    /// Wall time from session start to the last recorded turn.
    pub fn duration(&self) -> chrono::Duration {
        self.turns
            .last()
            .map(|t| t.timestamp - self.created_at)
            .unwrap_or_else(chrono::Duration::zero)
    }
}

/// Terminal-style rendering: each command echoed on the prompt line that
/// preceded it, followed by its output. Empty for a session without turns.
pub fn render_mirror(initial_prompt: &str, turns: &[Turn]) -> String {
    let mut out = String::new();
    for (i, turn) in turns.iter().enumerate() {
        // later commands follow the prompt that ends the previous output
        if i == 0 {
            out.push_str(initial_prompt);
        }
        out.push_str(&turn.command_text);
        out.push('\n');
        out.push_str(&turn.output_text);
    }
    if !out.is_empty() {
        out.push('\n');
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TranscriptError + '_ {
    move |source| TranscriptError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

// Writes via a temp file in the same directory and a no-clobber rename.
fn write_new(dir: &Path, stem: &str, ext: &str, contents: &[u8]) -> Result<PathBuf, TranscriptError> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(tmp.path()))?;
    tmp.as_file().sync_all().map_err(io_err(tmp.path()))?;
    let mut attempt = 0u32;
    loop {
        let name = if attempt == 0 {
            format!("{stem}.{ext}")
        } else {
            format!("{stem}-{attempt}.{ext}")
        };
        let target = dir.join(name);
        match tmp.persist_noclobber(&target) {
            Ok(_) => return Ok(target),
            Err(e) if e.error.kind() == io::ErrorKind::AlreadyExists => {
                tmp = e.file;
                attempt += 1;
            }
            Err(e) => return Err(io_err(&target)(e.error)),
        }
    }
}

/// Writes the text mirror and the JSON transcript for `session` into
/// `directory` and returns the JSON path. Existing files are never replaced.
pub fn persist(session: &SessionState, directory: &Path) -> Result<PathBuf, TranscriptError> {
    fs::create_dir_all(directory).map_err(io_err(directory))?;
    let record = TranscriptRecord::from_session(session);
    let json = serde_json::to_vec_pretty(&record).map_err(|e| TranscriptError::Parse {
        path: directory.to_path_buf(),
        message: e.to_string(),
    })?;
    let stem = format!(
        "{}_{}",
        file_safe(&session.session_id),
        Utc::now().format("%Y%m%dT%H%M%S%.9fZ")
    );
    let mirror = render_mirror(&session.initial_prompt, &session.history);
    let txt = write_new(directory, &stem, "txt", mirror.as_bytes())?;
    // keep the pair aligned when the stem had to be bumped
    let json_stem = txt
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(&stem)
        .to_owned();
    write_new(directory, &json_stem, "json", &json)
}

pub fn load(path: &Path) -> Result<TranscriptRecord, TranscriptError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TranscriptError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// JSON transcripts directly inside `directory`, sorted by name.
pub fn list(directory: &Path) -> Result<Vec<PathBuf>, TranscriptError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(directory).map_err(io_err(directory))? {
        let path = entry.map_err(io_err(directory))?.path();
        if path.extension().is_some_and(|e| e == "json") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct Resumed {
    pub session: SessionState,
    /// The transcript was produced under a different personality prompt.
    pub fingerprint_mismatch: bool,
}

/// Starts a new session that carries over every stored turn, all of them
/// inside the model context.
pub fn resume(
    path: &Path,
    session_id: impl Into<String>,
    personality: &PersonalityPrompt,
    budget: TokenBudget,
    initial_prompt: &str,
) -> Result<Resumed, TranscriptError> {
    let record = load(path)?;
    let fingerprint_mismatch = record.personality_fingerprint != personality.fingerprint();
    if fingerprint_mismatch {
        tracing::warn!(path = %path.display(), "transcript was recorded with a different personality prompt");
    }
    let mut session = SessionState::with_initial_prompt(session_id, budget, personality, initial_prompt);
    if let Some(last) = record.turns.last() {
        session.prompt_line = last
            .output_text
            .rsplit('\n')
            .next()
            .unwrap_or(initial_prompt)
            .to_owned();
    }
    session.history = record.turns;
    session.context_start = 0;
    Ok(Resumed {
        session,
        fingerprint_mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TokenUsage;

    fn personality() -> PersonalityPrompt {
        PersonalityPrompt::with_default_markers(include_str!("../../../assets/personality.txt")).unwrap()
    }

    fn two_turns() -> SessionState {
        let mut s = SessionState::new("abc", TokenBudget::default(), &personality());
        s.push_turn("ls", "a b\nroot@ubuntu:~# ".into(), Some(TokenUsage::new(10, 3)));
        s.push_turn("cd /tmp", "root@ubuntu:/tmp# ".into(), None);
        s
    }

    #[test]
    fn empty_session_persists() {
        let dir = tempfile::tempdir().unwrap();
        let s = SessionState::new("e", TokenBudget::default(), &personality());
        let path = persist(&s, dir.path()).unwrap();
        let rec = load(&path).unwrap();
        assert!(rec.turns.is_empty());
        let txt = fs::read_to_string(path.with_extension("txt")).unwrap();
        assert_eq!(txt, "");
    }

    #[test]
    fn round_trip_two_turns() {
        let dir = tempfile::tempdir().unwrap();
        let s = two_turns();
        let rec = load(&persist(&s, dir.path()).unwrap()).unwrap();
        assert_eq!(rec.turns, s.history);
        assert_eq!(rec.session_id, "abc");
        assert_eq!(rec.personality_fingerprint, personality().fingerprint());
    }

    #[test]
    fn json_schema_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = persist(&two_turns(), dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        for key in ["session_id", "created_at", "personality_fingerprint", "turns"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let t = &v["turns"][0];
        assert_eq!(t["index"], 0);
        assert_eq!(t["command"], "ls");
        assert_eq!(t["output"], "a b\nroot@ubuntu:~# ");
        assert!(t["ts"].is_string());
        assert_eq!(t["usage"]["prompt_tokens"], 10);
        assert!(v["turns"][1]["usage"].is_null());
    }

    #[test]
    fn repeated_persist_never_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let s = two_turns();
        let a = persist(&s, dir.path()).unwrap();
        let b = persist(&s, dir.path()).unwrap();
        assert_ne!(a, b);
        assert_eq!(list(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn mirror_looks_like_a_terminal() {
        let s = two_turns();
        let m = render_mirror(&s.initial_prompt, &s.history);
        assert_eq!(m, "root@ubuntu:~# ls\na b\nroot@ubuntu:~# cd /tmp\nroot@ubuntu:/tmp# \n");
    }

    #[test]
    fn resume_restores_turns_in_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = persist(&two_turns(), dir.path()).unwrap();
        let r = resume(&path, "new", &personality(), TokenBudget::default(), "root@ubuntu:~# ").unwrap();
        assert!(!r.fingerprint_mismatch);
        assert_eq!(r.session.history.len(), 2);
        assert_eq!(r.session.context_start, 0);
        assert_eq!(r.session.prompt_line, "root@ubuntu:/tmp# ");
        assert_eq!(r.session.session_id, "new");
    }

    #[test]
    fn resume_flags_personality_change() {
        let dir = tempfile::tempdir().unwrap();
        let path = persist(&two_turns(), dir.path()).unwrap();
        let other = PersonalityPrompt::with_default_markers(format!("{} extra", personality().text())).unwrap();
        let r = resume(&path, "new", &other, TokenBudget::default(), "root@ubuntu:~# ").unwrap();
        assert!(r.fingerprint_mismatch);
        assert_eq!(r.session.history.len(), 2);
    }

    #[test]
    fn corrupt_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load(&path), Err(TranscriptError::Parse { .. })));
    }
}
