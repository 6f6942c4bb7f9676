//! Out-of-process scoring over a line protocol.
//!
//! The child process speaks newline-delimited JSON on stdin/stdout. On
//! startup it announces itself with a handshake line:
//!
//! ```text
//! {"protocol": 1, "name": "my-scorer"}
//! ```
//!
//! (`name` optional). Each request line is `{"id": N, "prefix": "...",
//! "suffix": "..."}`; the child must answer every request, in order, with
//! `{"id": N, "logprob": F}`. Everything is UTF-8. The parent enforces a
//! per-response deadline and id matching; a response carrying the wrong id
//! or arriving late poisons the stream, so scoring aborts rather than
//! guessing at realignment. A single unparseable line only fails its own
//! request: the stream stays aligned and later requests proceed.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::Backend;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Serialize)]
struct WireRequest<'a> {
    id: u64,
    prefix: &'a str,
    suffix: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    id: u64,
    logprob: f64,
}

#[derive(Deserialize)]
struct Handshake {
    protocol: u32,
    #[serde(default)]
    name: Option<String>,
}

/// Scoring backend backed by a spawned child process.
pub struct ExternalBackend {
    label: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: mpsc::Receiver<std::io::Result<String>>,
    reader: Option<JoinHandle<()>>,
    timeout: Duration,
    max_in_flight: usize,
    next_id: u64,
}

impl ExternalBackend {
    /// Launch `program args...` and complete the handshake. `timeout` bounds
    /// every wait for a child line, including the handshake itself.
    pub fn spawn(
        program: &str,
        args: &[String],
        timeout: Duration,
        max_in_flight: usize,
    ) -> Result<Self> {
        if max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend {
                backend: program.to_string(),
                message: format!("failed to spawn: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut backend = Self {
            label: program.to_string(),
            child,
            stdin: Some(stdin),
            lines: rx,
            reader: Some(reader),
            timeout,
            max_in_flight,
            next_id: 0,
        };
        let line = backend.next_line(0)?;
        let hs: Handshake = serde_json::from_str(&line).map_err(|_| Error::Backend {
            backend: backend.label.clone(),
            message: format!("bad handshake line: {line}"),
        })?;
        if hs.protocol != PROTOCOL_VERSION {
            return Err(Error::Backend {
                backend: backend.label.clone(),
                message: format!(
                    "protocol version {} unsupported (want {PROTOCOL_VERSION})",
                    hs.protocol
                ),
            });
        }
        if let Some(name) = hs.name {
            backend.label = name;
        }
        Ok(backend)
    }

    fn next_line(&mut self, awaiting_id: u64) -> Result<String> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Backend {
                backend: self.label.clone(),
                message: format!("read failed: {e}"),
            }),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(Error::Timeout {
                backend: self.label.clone(),
                id: awaiting_id,
                millis: self.timeout.as_millis() as u64,
            }),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(Error::Backend {
                backend: self.label.clone(),
                message: "child closed stdout".into(),
            }),
        }
    }

    fn send(&mut self, id: u64, prefix: &str, suffix: &str) -> Result<()> {
        let mut line = serde_json::to_string(&WireRequest { id, prefix, suffix })
            .expect("request serializes");
        line.push('\n');
        let stdin = self.stdin.as_mut().ok_or_else(|| Error::Backend {
            backend: self.label.clone(),
            message: "stdin already closed".into(),
        })?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|()| stdin.flush())
            .map_err(|e| Error::Backend {
                backend: self.label.clone(),
                message: format!("write failed: {e}"),
            })
    }

    fn receive(&mut self, expect_id: u64) -> Result<f64> {
        let line = self.next_line(expect_id)?;
        let resp: WireResponse =
            serde_json::from_str(&line).map_err(|_| Error::MalformedResponse {
                backend: self.label.clone(),
                line: line.clone(),
            })?;
        if resp.id != expect_id {
            return Err(Error::IdMismatch {
                backend: self.label.clone(),
                got: resp.id,
            });
        }
        if !resp.logprob.is_finite() {
            return Err(Error::MalformedResponse {
                backend: self.label.clone(),
                line,
            });
        }
        Ok(resp.logprob)
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    /// A malformed response consumed exactly one line, so the stream is
    /// still aligned; anything else (timeout, wrong id, closed pipe) leaves
    /// responses unaccounted for and must stop the batch.
    fn is_fatal(err: &Error) -> bool {
        !matches!(err, Error::MalformedResponse { .. })
    }
}

impl Backend for ExternalBackend {
    fn name(&self) -> &str {
        &self.label
    }

    fn conditional_ll(&mut self, prefix: &str, suffix: &str) -> Result<f64> {
        if suffix.is_empty() {
            return Ok(0.0);
        }
        let id = self.fresh_id();
        self.send(id, prefix, suffix)?;
        self.receive(id)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Pipelined scoring: keep up to `max_in_flight` requests outstanding
    /// and collect responses in send order.
    fn conditional_ll_batch(&mut self, requests: &[(String, String)]) -> Vec<Result<f64>> {
        let n = requests.len();
        let mut results: Vec<Option<Result<f64>>> = (0..n).map(|_| None).collect();
        let mut pending: VecDeque<(usize, u64)> = VecDeque::new();
        let mut next = 0;
        let mut fatal = None;
        'drive: loop {
            while fatal.is_none() && next < n && pending.len() < self.max_in_flight {
                let (prefix, suffix) = &requests[next];
                let slot = next;
                next += 1;
                if suffix.is_empty() {
                    results[slot] = Some(Ok(0.0));
                    continue;
                }
                let id = self.fresh_id();
                if let Err(e) = self.send(id, prefix, suffix) {
                    fatal = Some(e.to_string());
                    results[slot] = Some(Err(e));
                    break;
                }
                pending.push_back((slot, id));
            }
            let Some((slot, id)) = pending.pop_front() else {
                break;
            };
            match self.receive(id) {
                Ok(v) => results[slot] = Some(Ok(v)),
                Err(e) => {
                    let stop = Self::is_fatal(&e);
                    if stop {
                        fatal = Some(e.to_string());
                    }
                    results[slot] = Some(Err(e));
                    if stop {
                        break 'drive;
                    }
                }
            }
        }
        if let Some(reason) = fatal {
            for r in results.iter_mut() {
                if r.is_none() {
                    *r = Some(Err(Error::Backend {
                        backend: self.label.clone(),
                        message: format!("batch aborted: {reason}"),
                    }));
                }
            }
        }
        results
            .into_iter()
            .map(|r| r.expect("every slot answered"))
            .collect()
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved child exit on its own; kill
        // covers the rest. Reap both the process and the reader thread.
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(handle) = self.reader.take() {
            let _ = handle.join();
        }
    }
}
