//! Out-of-process evaluators speaking newline-delimited JSON.
//!
//! The engine launches `sh -c <command>` and writes one request per line to
//! the child's stdin, then reads exactly one response line from its stdout.
//! A child serves one in-flight request at a time; concurrent callers get
//! their own child. A child that times out, exits or answers garbage is
//! killed and replaced on the next call.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Backend, BackendResponse, EvalRequest, Source};

/// Request line: `{"id","q","r","steps","seed","resume"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub q: Vec<u32>,
    pub r: Vec<u32>,
    pub steps: u64,
    pub seed: u64,
    pub resume: Option<String>,
}

/// Response line: `{"id","score","token"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub score: f64,
    #[serde(default)]
    pub token: Option<String>,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Evaluation(format!("failed to launch `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker {
            child,
            stdin,
            lines: rx,
        })
    }

    fn roundtrip(&mut self, request: &WireRequest, timeout: Duration) -> Result<WireResponse> {
        let line = serde_json::to_string(request).map_err(|e| Error::json("wire request", e))?;
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Evaluation(format!("write to evaluator failed: {e}")))?;
        loop {
            let reply = match self.lines.recv_timeout(timeout) {
                Ok(Ok(reply)) => reply,
                Ok(Err(e)) => return Err(Error::Evaluation(format!("read from evaluator failed: {e}"))),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Evaluation(format!(
                        "evaluator timed out after {:.1}s",
                        timeout.as_secs_f64()
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Evaluation("evaluator exited".into()))
                }
            };
            if reply.trim().is_empty() {
                continue;
            }
            let response: WireResponse = serde_json::from_str(&reply)
                .map_err(|e| Error::Evaluation(format!("malformed response `{reply}`: {e}")))?;
            if response.id != request.id {
                return Err(Error::Evaluation(format!(
                    "response id {} does not match request id {}",
                    response.id, request.id
                )));
            }
            return Ok(response);
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalBackend {
    command: String,
    timeout: Duration,
    idle: Mutex<Vec<Worker>>,
    next_id: AtomicU64,
}

impl ExternalBackend {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        ExternalBackend {
            command: command.into(),
            timeout,
            idle: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(0),
        }
    }

    pub fn command(&self) -> &str {
        &self.command
    }
}

impl Backend for ExternalBackend {
    fn source(&self) -> Source {
        Source::External
    }

    fn evaluate(&self, request: &EvalRequest) -> Result<BackendResponse> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let wire = WireRequest {
            id,
            q: request.config.q.clone(),
            r: request.config.r.clone(),
            steps: request.steps,
            seed: request.seed,
            resume: request.resume_token.clone(),
        };
        let pooled = self.idle.lock().expect("worker pool").pop();
        let mut worker = match pooled {
            Some(w) => w,
            None => {
                debug!("launching evaluator `{}`", self.command);
                Worker::spawn(&self.command)?
            }
        };
        // a failed worker is dropped (and killed) instead of being pooled
        let response = worker.roundtrip(&wire, self.timeout)?;
        self.idle.lock().expect("worker pool").push(worker);
        Ok(BackendResponse {
            score: response.score,
            token: response.token,
            wall_time_s: None,
        })
    }
}
