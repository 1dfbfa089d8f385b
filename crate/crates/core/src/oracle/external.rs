//! External judge speaking newline-delimited JSON over a child process's
//! stdin/stdout.
//!
//! Request, one line:
//! `{"id": 3, "prompt": "prompt-0", "candidates": ["1 4 2 0", "3 0"]}`
//!
//! Reply, one line: `{"id": 3, "ranking": [1, 0]}` where `ranking[i]` is
//! the rank of `candidates[i]` and `0` is best.

use std::collections::HashSet;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{validate_verdict, Oracle, OracleError, OracleRequest, OracleVerdict};

/// Upper bound on a single protocol line, newline excluded.
pub const MAX_MESSAGE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub prompt: String,
    pub candidates: Vec<String>,
}

impl From<&OracleRequest> for WireRequest {
    fn from(req: &OracleRequest) -> Self {
        WireRequest {
            id: req.id,
            prompt: req.prompt.to_string(),
            candidates: req.candidates.iter().map(|c| c.render()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReply {
    pub id: u64,
    pub ranking: Vec<usize>,
}

enum ReaderEvent {
    Line(String),
    Oversize(String),
    Closed(String),
}

pub struct ExternalOracle {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<ReaderEvent>,
    timeout: Duration,
    /// Ids whose replies may still arrive and must be ignored.
    stale: HashSet<u64>,
    alive: bool,
    command: String,
}

impl ExternalOracle {
    /// Spawns `argv[0]` with the remaining arguments. The child's stderr is
    /// inherited.
    pub fn spawn(argv: &[String], timeout: Duration) -> io::Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty oracle command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| io::Error::other("oracle stdin unavailable"))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| io::Error::other("oracle stdout unavailable"))?;

        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("oracle-reader".into())
            .spawn(move || read_lines(stdout, tx))?;

        Ok(ExternalOracle {
            child,
            stdin,
            replies: rx,
            timeout,
            stale: HashSet::new(),
            alive: true,
            command: argv.join(" "),
        })
    }

    fn send(&mut self, line: &str) -> Result<(), OracleError> {
        let res = self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush());
        res.map_err(|e| {
            self.alive = false;
            OracleError::Unavailable {
                reason: format!("writing to `{}`: {e}", self.command),
            }
        })
    }

    /// Waits until `deadline` for a reply to `request`, skipping replies to
    /// abandoned requests. `Ok(None)` means the deadline passed.
    fn await_reply(
        &mut self,
        request: &OracleRequest,
        deadline: Instant,
    ) -> Result<Option<OracleVerdict>, OracleError> {
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.replies.recv_timeout(remaining) {
                Ok(ReaderEvent::Line(raw)) => {
                    let reply: WireReply =
                        serde_json::from_str(&raw).map_err(|e| OracleError::MalformedVerdict {
                            reason: e.to_string(),
                            raw: raw.clone(),
                        })?;
                    if reply.id != request.id && self.stale.contains(&reply.id) {
                        continue;
                    }
                    return validate_verdict(request, reply.id, reply.ranking, &raw).map(Some);
                }
                Ok(ReaderEvent::Oversize(prefix)) => {
                    return Err(OracleError::MalformedVerdict {
                        reason: format!("reply exceeds {MAX_MESSAGE_BYTES} bytes"),
                        raw: prefix,
                    });
                }
                Ok(ReaderEvent::Closed(reason)) => {
                    self.alive = false;
                    return Err(OracleError::Unavailable { reason });
                }
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => {
                    self.alive = false;
                    return Err(OracleError::Unavailable {
                        reason: format!("`{}` closed its output", self.command),
                    });
                }
            }
        }
    }
}

impl Oracle for ExternalOracle {
    fn rank(&mut self, request: &OracleRequest) -> Result<OracleVerdict, OracleError> {
        if !self.alive {
            return Err(OracleError::Unavailable {
                reason: format!("`{}` is no longer running", self.command),
            });
        }
        let line = serde_json::to_string(&WireRequest::from(request))
            .map_err(|e| OracleError::InvalidRequest(e.to_string()))?;
        if line.len() > MAX_MESSAGE_BYTES {
            return Err(OracleError::InvalidRequest(format!(
                "request of {} bytes exceeds {MAX_MESSAGE_BYTES}",
                line.len()
            )));
        }

        // one retry after a timeout, then give up on this request
        for attempt in 0..2 {
            if attempt == 1 {
                // the first send may still be answered; either reply is fine
                // but the other one must not leak into a later request
                self.stale.insert(request.id);
            }
            self.send(&line)?;
            if let Some(verdict) = self.await_reply(request, Instant::now() + self.timeout)? {
                return Ok(verdict);
            }
        }
        Err(OracleError::Unavailable {
            reason: format!(
                "no reply to request {} within {:?} (retried once)",
                request.id, self.timeout
            ),
        })
    }

    fn is_alive(&self) -> bool {
        self.alive
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn read_lines<R: Read>(stdout: R, tx: mpsc::Sender<ReaderEvent>) {
    let mut reader = BufReader::new(stdout);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let limit = MAX_MESSAGE_BYTES as u64 + 1;
        match reader.by_ref().take(limit).read_until(b'\n', &mut buf) {
            Ok(0) => {
                let _ = tx.send(ReaderEvent::Closed("oracle process exited".into()));
                return;
            }
            Ok(_) => {
                if buf.last() != Some(&b'\n') && buf.len() as u64 >= limit {
                    let prefix = String::from_utf8_lossy(&buf[..256]).into_owned();
                    // discard the rest of the oversized line
                    let mut sink = Vec::new();
                    if reader.read_until(b'\n', &mut sink).is_err() {
                        let _ = tx.send(ReaderEvent::Closed("oracle output failed".into()));
                        return;
                    }
                    if tx.send(ReaderEvent::Oversize(prefix)).is_err() {
                        return;
                    }
                    continue;
                }
                let line = String::from_utf8_lossy(&buf).trim_end().to_string();
                if line.is_empty() {
                    continue;
                }
                if tx.send(ReaderEvent::Line(line)).is_err() {
                    return;
                }
            }
            Err(e) => {
                let _ = tx.send(ReaderEvent::Closed(format!("reading oracle output: {e}")));
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Prompt;
    use crate::policy::TokenSequence;

    fn request(id: u64, k: usize) -> OracleRequest {
        let c = (0..k)
            .map(|t| TokenSequence { tokens: vec![t, 0], terminated: true })
            .collect();
        OracleRequest::new(id, Prompt(1), c).unwrap()
    }

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    #[test]
    fn wire_format() {
        let w = WireRequest::from(&request(5, 2));
        assert_eq!(
            serde_json::to_string(&w).unwrap(),
            r#"{"id":5,"prompt":"prompt-1","candidates":["0 0","1 0"]}"#
        );
        let r: WireReply = serde_json::from_str(r#"{"id": 5, "ranking": [1, 0]}"#).unwrap();
        assert_eq!(r.ranking, vec![1, 0]);
        assert!(serde_json::from_str::<WireReply>(r#"{"id": 5, "ranking": [-1, 0]}"#).is_err());
    }

    #[test]
    fn echoing_judge() {
        // replies with the identity ranking for a two-candidate group
        let script = r#"while read line; do id=$(echo "$line" | sed 's/.*"id":\([0-9]*\).*/\1/'); echo "{\"id\": $id, \"ranking\": [1, 0]}"; done"#;
        let mut o = ExternalOracle::spawn(&sh(script), Duration::from_secs(5)).unwrap();
        for id in 0..5 {
            let v = o.rank(&request(id, 2)).unwrap();
            assert_eq!(v.id, id);
            assert_eq!(v.ranking.ranks(), &[1, 0]);
        }
        assert!(o.is_alive());
    }

    #[test]
    fn malformed_replies() {
        let mut o = ExternalOracle::spawn(&sh("while read line; do echo 'not json'; done"), Duration::from_secs(5)).unwrap();
        let err = o.rank(&request(0, 2)).unwrap_err();
        assert!(matches!(err, OracleError::MalformedVerdict { ref raw, .. } if raw == "not json"));

        let mut o = ExternalOracle::spawn(
            &sh(r#"while read line; do echo '{"id": 0, "ranking": [0, 0]}'; done"#),
            Duration::from_secs(5),
        )
        .unwrap();
        assert!(matches!(o.rank(&request(0, 2)), Err(OracleError::MalformedVerdict { .. })));

        let mut o = ExternalOracle::spawn(
            &sh(r#"while read line; do echo '{"id": 99, "ranking": [0, 1]}'; done"#),
            Duration::from_secs(5),
        )
        .unwrap();
        assert!(matches!(o.rank(&request(0, 2)), Err(OracleError::MalformedVerdict { .. })));
        assert!(o.is_alive());
    }

    #[test]
    fn silent_judge_times_out_after_retry() {
        let mut o = ExternalOracle::spawn(&sh("cat > /dev/null"), Duration::from_millis(100)).unwrap();
        let start = Instant::now();
        let err = o.rank(&request(0, 2)).unwrap_err();
        assert!(matches!(err, OracleError::Unavailable { .. }));
        assert!(start.elapsed() >= Duration::from_millis(200));
        assert!(o.is_alive());
    }

    #[test]
    fn exited_judge_is_unavailable() {
        let mut o = ExternalOracle::spawn(&sh("exit 0"), Duration::from_secs(5)).unwrap();
        assert!(matches!(o.rank(&request(0, 2)), Err(OracleError::Unavailable { .. })));
        assert!(!o.is_alive());
    }

    #[test]
    fn missing_program_fails_to_spawn() {
        assert!(ExternalOracle::spawn(&["/nonexistent/judge".to_string()], Duration::from_secs(1)).is_err());
        assert!(ExternalOracle::spawn(&[], Duration::from_secs(1)).is_err());
    }
}
