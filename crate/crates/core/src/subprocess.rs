//! Subprocess execution environments: a child process speaking framed
//! envelopes over stdin/stdout.
//!
//! The child must send a `Hello` within the handshake timeout. Its body may
//! advertise heal hooks and fault control:
//! `{"heals": ["compact"], "control": true}`.

use std::collections::HashMap;
use std::process::Stdio;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, ChildStdin, Command};
use tokio::sync::oneshot;

use crate::isc::wire::{read_frame, write_frame};
use crate::isc::{Envelope, Kind, TransportError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    #[serde(default)]
    pub heals: Vec<String>,
    #[serde(default)]
    pub control: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOkBody {
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealBody {
    pub hook: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopOutcome {
    Exited,
    /// Ignored the terminate request and was force-killed after the grace period.
    Killed,
    AlreadyGone,
}

pub type StderrSink = Arc<dyn Fn(&str) + Send + Sync>;

pub struct SpawnSpec<'a> {
    pub command: &'a str,
    pub env: Vec<(String, String)>,
    pub hello_timeout: Duration,
    pub name: String,
    pub stderr: Option<StderrSink>,
}

/// A live connection to a child process.
pub struct ChildConn {
    name: String,
    pid: Option<u32>,
    command: String,
    child: tokio::sync::Mutex<Option<Child>>,
    stdin: tokio::sync::Mutex<Option<ChildStdin>>,
    pending: Arc<Mutex<HashMap<String, oneshot::Sender<Envelope>>>>,
    alive: Arc<AtomicBool>,
    hello: Hello,
}

impl std::fmt::Debug for ChildConn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChildConn")
            .field("name", &self.name)
            .field("pid", &self.pid)
            .finish()
    }
}

impl ChildConn {
    /// Spawns the child and waits for its Hello.
    pub async fn spawn(spec: SpawnSpec<'_>) -> Result<Arc<Self>, String> {
        let mut parts = spec.command.split_whitespace();
        let program = parts.next().ok_or("empty command")?;
        let mut cmd = Command::new(program);
        cmd.args(parts)
            .envs(spec.env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true);
        let mut child = cmd.spawn().map_err(|e| format!("spawn {program}: {e}"))?;
        let pid = child.id();
        let stdin = child.stdin.take();
        let mut stdout = child.stdout.take().ok_or("child stdout unavailable")?;
        if let Some(stderr) = child.stderr.take() {
            let sink = spec.stderr.clone();
            tokio::spawn(async move {
                let mut lines = BufReader::new(stderr).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    if let Some(s) = &sink {
                        s(&line);
                    }
                }
            });
        }

        let hello = match tokio::time::timeout(spec.hello_timeout, read_frame(&mut stdout)).await {
            Ok(Ok(Some(env))) if env.kind == Kind::Hello => env.body_json::<Hello>().unwrap_or_default(),
            Ok(Ok(Some(env))) => {
                let _ = child.kill().await;
                return Err(format!("expected Hello, got {}", env.kind));
            }
            Ok(Ok(None)) => {
                let status = child.wait().await.ok();
                return Err(format!("exited before Hello ({status:?})"));
            }
            Ok(Err(e)) => {
                let _ = child.kill().await;
                return Err(format!("bad Hello frame: {e}"));
            }
            Err(_) => {
                let _ = child.kill().await;
                return Err(format!("no Hello within {} ms", spec.hello_timeout.as_millis()));
            }
        };

        let pending: Arc<Mutex<HashMap<String, oneshot::Sender<Envelope>>>> = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        {
            let pending = pending.clone();
            let alive = alive.clone();
            tokio::spawn(async move {
                loop {
                    match read_frame(&mut stdout).await {
                        Ok(Some(env)) => {
                            if env.correlation_id.is_empty() {
                                continue;
                            }
                            if let Some(tx) = pending.lock().remove(&env.correlation_id) {
                                let _ = tx.send(env);
                            }
                        }
                        Ok(None) | Err(_) => break,
                    }
                }
                alive.store(false, Ordering::SeqCst);
                pending.lock().clear();
            });
        }

        Ok(Arc::new(Self {
            name: spec.name,
            pid,
            command: spec.command.to_string(),
            child: tokio::sync::Mutex::new(Some(child)),
            stdin: tokio::sync::Mutex::new(stdin),
            pending,
            alive,
            hello,
        }))
    }

    pub fn pid(&self) -> Option<u32> {
        self.pid
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    /// Sends `env` and waits for the envelope correlated with it.
    pub async fn call(&self, env: Envelope, timeout: Duration) -> Result<Envelope, TransportError> {
        if !self.is_alive() {
            return Err(TransportError::Unavailable(format!("{} has exited", self.name)));
        }
        let (tx, rx) = oneshot::channel();
        self.pending.lock().insert(env.id.clone(), tx);
        let sent = {
            let mut stdin = self.stdin.lock().await;
            match stdin.as_mut() {
                Some(w) => write_frame(w, &env).await.map_err(|e| e.to_string()),
                None => Err("stdin closed".to_string()),
            }
        };
        if let Err(e) = sent {
            self.pending.lock().remove(&env.id);
            return Err(TransportError::Unavailable(e));
        }
        match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(_)) => Err(TransportError::Unavailable(format!("{} exited mid-request", self.name))),
            Err(_) => {
                self.pending.lock().remove(&env.id);
                Err(TransportError::Timeout)
            }
        }
    }

    /// Asks the child to exit (SIGTERM and stdin close), then force-kills
    /// it once `grace` has passed.
    pub async fn stop(&self, grace: Duration) -> StopOutcome {
        let mut guard = self.child.lock().await;
        let Some(child) = guard.as_mut() else {
            return StopOutcome::AlreadyGone;
        };
        if let Ok(Some(_)) = child.try_wait() {
            guard.take();
            return StopOutcome::AlreadyGone;
        }
        self.stdin.lock().await.take();
        if let Some(pid) = child.id() {
            // SAFETY: plain kill(2) on a pid we own and have not yet reaped.
            unsafe {
                libc::kill(pid as libc::pid_t, libc::SIGTERM);
            }
        }
        let outcome = match tokio::time::timeout(grace, child.wait()).await {
            Ok(_) => StopOutcome::Exited,
            Err(_) => {
                let _ = child.kill().await;
                StopOutcome::Killed
            }
        };
        guard.take();
        self.alive.store(false, Ordering::SeqCst);
        outcome
    }
}
