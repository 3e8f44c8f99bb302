//! Runs the `shellm` binary and the subcommand functions end to end.

use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;
use shellm::commands;
use shellm::config::{load_config, CliOverrides};
use shellm_core::transcript::{self, render_mirror};
use shellm_core::BackendKind;

const PERSONALITY: &str = include_str!("../../../assets/personality.txt");
const PASSWORD: &str = "correct horse";
const API_KEY: &str = "sk-live-do-not-log-4242";
const SCRIPT: &str = r#"{
    "ls": "snap",
    "cd /var/log": "root@ubuntu:/var/log# ",
    "ls -1": "```\nauth.log\nsyslog\n```",
    "_default": "bash: {command}: command not found"
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("personality.txt"), PERSONALITY).unwrap();
        std::fs::write(dir.path().join("script.json"), SCRIPT).unwrap();
        let f = Self { dir };
        f.write_config("transcripts", "");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_config(&self, transcripts: &str, extra: &str) -> PathBuf {
        let path = self.path("shellm.toml");
        std::fs::write(
            &path,
            format!(
                "personality_path = {:?}\ntranscript_dir = {:?}\nlog_level = \"trace\"\n[ssh]\nlisten_addr = \"127.0.0.1\"\nhost_key_path = {:?}\n{extra}",
                self.path("personality.txt"),
                self.path(transcripts),
                self.path("host_key"),
            ),
        )
        .unwrap();
        path
    }

    fn shellm(&self, args: &[&str], stdin: &str) -> Output {
        let mut child = Command::new(env!("CARGO_BIN_EXE_shellm"))
            .args(["--config", self.path("shellm.toml").to_str().unwrap()])
            .args(args)
            .env("SHELLM_SSH_PASSWORD", PASSWORD)
            .env("OPENAI_API_KEY", API_KEY)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
        child.wait_with_output().unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_line_error(o: &Output) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<_> = err.lines().filter(|l| l.starts_with("shellm: error:")).collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
}

#[test]
fn evaluate_counts_prints_accuracy() {
    let f = Fixture::new();
    let o = f.shellm(&["evaluate", "--counts", "tp=41,fp=17,fn=1,tn=167"], "");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Accuracy : 0.9204"), "{}", stdout(&o));

    let o = f.shellm(&["evaluate", "--counts", "tp=41,fp=17,fn=1,tn=167", "--json"], "");
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["metrics"]["accuracy"]["value"].as_f64().unwrap() - 0.9204).abs() < 1e-4);
    assert_eq!(v["counts"]["fn"], 1);
}

#[test]
fn evaluate_counts_from_json_file() {
    let f = Fixture::new();
    std::fs::write(f.path("counts.json"), r#"{"tp": 7, "fp": 0, "fn": 5, "tn": 2}"#).unwrap();
    let o = f.shellm(&["evaluate", "--counts", f.path("counts.json").to_str().unwrap()], "");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Accuracy : 0.6429"));
}

#[test]
fn evaluate_annotations_with_per_session_table() {
    let f = Fixture::new();
    let csv = "session_id,turn_index,command,attacker_label,expert_label\n\
               1,0,ls,FORGED,FORGED\n1,1,pwd,REAL,FORGED\n2,0,ls,REAL,REAL\n10,0,id,FORGED,REAL\n";
    std::fs::write(f.path("a.csv"), csv).unwrap();
    let o = f.shellm(&["evaluate", "--annotations", f.path("a.csv").to_str().unwrap()], "");
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Accuracy : 0.5000"), "{out}");
    let users: Vec<_> = out
        .lines()
        .skip_while(|l| !l.starts_with("User"))
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap().to_owned())
        .collect();
    assert_eq!(users, ["1", "2", "10"]);
}

#[test]
fn evaluate_errors_are_one_line() {
    let f = Fixture::new();
    assert_one_line_error(&f.shellm(&["evaluate", "--counts", "tp=1,fp=x"], ""));
    std::fs::write(f.path("dup.csv"), "session_id,turn_index,command,attacker_label,expert_label\n1,0,ls,REAL,REAL\n1,0,ls,REAL,REAL\n").unwrap();
    assert_one_line_error(&f.shellm(&["evaluate", "--annotations", f.path("dup.csv").to_str().unwrap()], ""));
}

#[test]
fn chat_with_scripted_backend() {
    let f = Fixture::new();
    let script = f.path("script.json");
    let o = f.shellm(
        &["chat", "--backend", "scripted", "--script", script.to_str().unwrap()],
        "ls\ncd /var/log\nls -1\nwget x\nexit\n",
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o),
        "root@ubuntu:~# snap\nroot@ubuntu:~# root@ubuntu:/var/log# auth.log\nsyslog\nroot@ubuntu:/var/log# \
         bash: wget: command not found\nroot@ubuntu:/var/log# "
    );
    let paths = transcript::list(&f.path("transcripts")).unwrap();
    assert_eq!(paths.len(), 1);
    assert_eq!(transcript::load(&paths[0]).unwrap().turns.len(), 4);
}

#[test]
fn serve_without_api_key_fails_at_startup() {
    let f = Fixture::new();
    let started = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_shellm"))
        .args(["--config", f.path("shellm.toml").to_str().unwrap(), "serve", "--port", "0"])
        .env("SHELLM_SSH_PASSWORD", PASSWORD)
        .env_remove("OPENAI_API_KEY")
        .output()
        .unwrap();
    assert_one_line_error(&o);
    assert!(stderr(&o).contains("OPENAI_API_KEY"), "{}", stderr(&o));
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn serve_without_password_fails_at_startup() {
    let f = Fixture::new();
    let script = f.path("script.json");
    let o = Command::new(env!("CARGO_BIN_EXE_shellm"))
        .args(["--config", f.path("shellm.toml").to_str().unwrap(), "serve", "--port", "0"])
        .args(["--backend", "scripted", "--script", script.to_str().unwrap()])
        .env_remove("SHELLM_SSH_PASSWORD")
        .output()
        .unwrap();
    assert_one_line_error(&o);
    assert!(stderr(&o).contains("ssh.password"));
}

#[test]
fn config_errors_are_one_line() {
    let f = Fixture::new();
    f.write_config("transcripts", "listen_port = \"x\"\n");
    assert_one_line_error(&f.shellm(&["chat"], ""));
}

#[test]
fn replay_reports_identical_and_changed_turns() {
    let f = Fixture::new();
    let script = f.path("script.json");
    let o = f.shellm(
        &["chat", "--backend", "scripted", "--script", script.to_str().unwrap()],
        "ls\ncd /var/log\nexit\n",
    );
    assert!(o.status.success());
    let recorded = transcript::list(&f.path("transcripts")).unwrap().remove(0);

    let o = f.shellm(
        &["replay", recorded.to_str().unwrap(), "--backend", "scripted", "--script", script.to_str().unwrap()],
        "",
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).ends_with("2/2 turns identical\n"), "{}", stdout(&o));

    std::fs::write(f.path("changed.json"), r#"{"ls": "snap  tmp", "_default": ""}"#).unwrap();
    let o = f.shellm(
        &["replay", recorded.to_str().unwrap(), "--backend", "scripted", "--script", f.path("changed.json").to_str().unwrap(), "--json"],
        "",
    );
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["turns"][0]["matches"], false);
    assert_eq!(v["turns"][0]["actual"], "snap  tmp\nroot@ubuntu:~# ");
    // replay never writes transcripts
    assert_eq!(transcript::list(&f.path("transcripts")).unwrap().len(), 1);
}

#[test]
fn cost_over_transcripts() {
    let f = Fixture::new();
    let script = f.path("script.json");
    f.shellm(
        &["chat", "--backend", "scripted", "--script", script.to_str().unwrap()],
        "ls\nexit\n",
    );
    f.shellm(
        &["chat", "--backend", "scripted", "--script", script.to_str().unwrap()],
        "ls\ncd /var/log\nexit\n",
    );
    let o = f.shellm(&["cost", "--transcripts", f.path("transcripts").to_str().unwrap(), "--json"], "");
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let sessions = v["sessions"].as_array().unwrap();
    assert_eq!(sessions.len(), 2);
    let sum: u64 = sessions.iter().map(|s| s["total_prompt_tokens"].as_u64().unwrap()).sum();
    assert!(sum > 0);
    assert_eq!(v["total"]["total_prompt_tokens"].as_u64().unwrap(), sum);
    let expected_input = sum as f64 * 0.001 / 1000.0;
    // JSON float parsing may be one ulp off
    assert!((v["total"]["input_usd"].as_f64().unwrap() - expected_input).abs() <= expected_input * 1e-12);

    let o = f.shellm(&["cost", "--transcripts", f.path("transcripts").to_str().unwrap()], "");
    let table = stdout(&o);
    assert!(table.starts_with("Session"));
    assert!(table.lines().last().unwrap().starts_with("Total"));
}

#[test]
fn cost_of_missing_directory_is_an_error() {
    let f = Fixture::new();
    assert_one_line_error(&f.shellm(&["cost", "--transcripts", f.path("nope").to_str().unwrap()], ""));
}

#[test]
fn secrets_stay_out_of_logs_and_files() {
    let f = Fixture::new();
    // remote backend pointed at a closed port: every call fails and logs
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = closed.local_addr().unwrap().port();
    drop(closed);
    f.write_config(
        "transcripts",
        &format!("[backend]\nendpoint_url = \"http://127.0.0.1:{port}/v1/chat/completions\"\nmax_attempts = 1\n"),
    );
    let o = f.shellm(&["chat"], "ls\nexit\n");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("bash: ls: command not found"));
    let logs = stderr(&o);
    assert!(!logs.contains(API_KEY), "{logs}");
    assert!(!logs.contains(PASSWORD));
    for entry in walk(f.dir.path()) {
        let bytes = std::fs::read(&entry).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains(API_KEY), "{}", entry.display());
        assert!(!text.contains(PASSWORD), "{}", entry.display());
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn askpass(dir: &Path) -> PathBuf {
    let path = dir.join("askpass.sh");
    std::fs::write(&path, format!("#!/bin/sh\necho '{PASSWORD}'\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn ssh(dir: &Path, port: u16, input: &str) -> Output {
    let mut child = Command::new("ssh")
        .args(["-T", "-F", "/dev/null", "-p", &port.to_string()])
        .args(["-o", "StrictHostKeyChecking=no", "-o", "UserKnownHostsFile=/dev/null"])
        .args(["-o", "PreferredAuthentications=password", "-o", "PubkeyAuthentication=no"])
        .args(["-o", "LogLevel=ERROR"])
        .arg("root@127.0.0.1")
        .env("SSH_ASKPASS", askpass(dir))
        .env("SSH_ASKPASS_REQUIRE", "force")
        .env("DISPLAY", ":0")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn turns_without_time(path: &Path) -> Vec<Value> {
    let record = transcript::load(path).unwrap();
    record
        .turns
        .iter()
        .map(|t| {
            let mut v = serde_json::to_value(t).unwrap();
            v.as_object_mut().unwrap().remove("ts");
            v
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn chat_and_serve_write_identical_transcripts() {
    let f = Fixture::new();
    let commands_in = "ls\ncd /var/log\nls -1\nnmap -sS 10.0.0.0/24\nexit\n";
    let cli = CliOverrides {
        port: Some(0),
        backend: Some(BackendKind::Scripted),
        script: Some(f.path("script.json")),
    };
    let env = [("SHELLM_SSH_PASSWORD".to_owned(), PASSWORD.to_owned())];

    f.write_config("chat", "");
    let chat_cfg = load_config(Some(&f.path("shellm.toml")), env.clone(), &cli).unwrap().config;
    let (mut client, server) = tokio::io::duplex(1 << 16);
    let (rd, wr) = tokio::io::split(server);
    tokio::io::AsyncWriteExt::write_all(&mut client, commands_in.as_bytes()).await.unwrap();
    let chat = commands::chat(&chat_cfg, rd, wr).await.unwrap();
    let mut chat_bytes = Vec::new();
    tokio::io::AsyncReadExt::read_to_end(&mut client, &mut chat_bytes).await.unwrap();

    f.write_config("serve", "");
    let serve_cfg = load_config(Some(&f.path("shellm.toml")), env, &cli).unwrap().config;
    let server = commands::bind_server(&serve_cfg).await.unwrap();
    let port = server.local_addr().unwrap().port();
    tokio::spawn(server.run());
    let dir = f.dir.path().to_path_buf();
    let out = tokio::task::spawn_blocking(move || ssh(&dir, port, commands_in)).await.unwrap();
    assert_eq!(out.stdout, chat_bytes, "client bytes differ");

    let deadline = Instant::now() + Duration::from_secs(5);
    let served = loop {
        let found = transcript::list(&f.path("serve")).unwrap();
        if !found.is_empty() || Instant::now() > deadline {
            break found;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    };
    assert_eq!(served.len(), 1);
    let chat_path = chat.transcript.unwrap();
    let a = transcript::load(&chat_path).unwrap();
    let b = transcript::load(&served[0]).unwrap();
    assert_eq!(
        render_mirror("root@ubuntu:~# ", &a.turns).as_bytes(),
        render_mirror("root@ubuntu:~# ", &b.turns).as_bytes()
    );
    assert_eq!(turns_without_time(&chat_path), turns_without_time(&served[0]));
    assert_eq!(a.personality_fingerprint, b.personality_fingerprint);
}
