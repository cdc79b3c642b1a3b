//! Host for evaluator child processes.
//!
//! Each child is one connection with at most one request in flight. The pool
//! of connections is the unit of concurrency. A child that exits is dropped
//! from the pool and the search continues on the rest.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::wire::{Request, Response};
use super::{Evaluator, EvaluatorMeta, Perturbation};
use crate::error::{Error, Result};
use crate::space::ModelConfig;

#[derive(Debug, Clone)]
pub struct HostOptions {
    pub connections: usize,
    pub evaluate_timeout: Duration,
    /// Timeout for meta and distribution requests.
    pub query_timeout: Duration,
}

impl Default for HostOptions {
    fn default() -> Self {
        Self {
            connections: 1,
            evaluate_timeout: Duration::from_secs(600),
            query_timeout: Duration::from_secs(60),
        }
    }
}

struct Connection {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    alive: bool,
}

impl Connection {
    fn spawn(argv: &[String]) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::InvalidParameter("empty evaluator command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in stdout.lines() {
                let eof = line.is_err();
                if tx.send(line).is_err() || eof {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin: Some(stdin),
            lines: rx,
            alive: true,
        })
    }

    fn round_trip(&mut self, req: &Request, timeout: Duration) -> Result<Response> {
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        let written = self
            .stdin
            .as_mut()
            .map(|s| s.write_all(line.as_bytes()).and_then(|_| s.flush()));
        if !matches!(written, Some(Ok(()))) {
            self.alive = false;
            return Err(Error::Evaluator("evaluator process closed its input".into()));
        }

        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(remaining) {
                Ok(Ok(raw)) => {
                    if raw.trim().is_empty() {
                        continue;
                    }
                    let resp = match Response::parse_line(&raw) {
                        Ok(r) => r,
                        Err(e) => {
                            warn!("malformed evaluator response: {raw:?}");
                            return Err(e);
                        }
                    };
                    if resp.id == req.id {
                        return Ok(resp);
                    }
                    // late answer to a request that already timed out
                    debug!("discarding response for stale id {}", resp.id);
                }
                Ok(Err(e)) => {
                    self.alive = false;
                    return Err(Error::io("<evaluator stdout>", e));
                }
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    self.alive = false;
                    let status = self.child.try_wait().ok().flatten();
                    return Err(Error::Evaluator(format!(
                        "evaluator process exited ({})",
                        status.map_or_else(|| "status unknown".to_string(), |s| s.to_string())
                    )));
                }
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // closing stdin asks a well-behaved child to exit
        self.stdin.take();
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// An [`Evaluator`] backed by a pool of child processes.
pub struct ExternalEvaluator {
    connections: Vec<Mutex<Connection>>,
    meta: EvaluatorMeta,
    next_id: AtomicU64,
    cursor: AtomicUsize,
    options: HostOptions,
}

impl ExternalEvaluator {
    /// Launches `options.connections` copies of `argv` and performs the meta
    /// handshake with each. All children must report the same meta.
    pub fn spawn(argv: &[String], options: HostOptions) -> Result<Self> {
        let n = options.connections.max(1);
        let mut connections = Vec::with_capacity(n);
        let mut meta: Option<EvaluatorMeta> = None;
        for i in 0..n {
            let mut conn = Connection::spawn(argv)?;
            let resp = conn.round_trip(&Request::meta(i as u64), options.query_timeout)?;
            let m = resp.into_meta()?.into_meta()?;
            match &meta {
                Some(first) if *first != m => {
                    return Err(Error::Protocol {
                        message: format!("connection {i} reported a different meta"),
                        payload: format!("{m:?}"),
                    })
                }
                Some(_) => {}
                None => meta = Some(m),
            }
            connections.push(Mutex::new(conn));
        }
        Ok(Self {
            connections,
            meta: meta.expect("at least one connection"),
            next_id: AtomicU64::new(n as u64),
            cursor: AtomicUsize::new(0),
            options,
        })
    }

    pub fn live_connections(&self) -> usize {
        self.connections
            .iter()
            .filter(|c| c.lock().map(|c| c.alive).unwrap_or(false))
            .count()
    }

    fn request(&self, req: Request, timeout: Duration) -> Result<Response> {
        let n = self.connections.len();
        let start = self.cursor.fetch_add(1, Ordering::Relaxed);
        // prefer an idle live connection, else wait on the first live one
        for pass in 0..2 {
            for k in 0..n {
                let slot = &self.connections[(start + k) % n];
                let guard = if pass == 0 {
                    match slot.try_lock() {
                        Ok(g) => g,
                        Err(_) => continue,
                    }
                } else {
                    match slot.lock() {
                        Ok(g) => g,
                        Err(p) => p.into_inner(),
                    }
                };
                let mut conn = guard;
                if !conn.alive {
                    continue;
                }
                let result = conn.round_trip(&req, timeout);
                if !conn.alive {
                    warn!("evaluator connection {} lost", (start + k) % n);
                }
                return result;
            }
        }
        Err(Error::Evaluator("no live evaluator connections".into()))
    }

    fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }
}

impl Evaluator for ExternalEvaluator {
    fn meta(&self) -> &EvaluatorMeta {
        &self.meta
    }

    fn evaluate(&self, config: &ModelConfig, proxy_steps: u32) -> Result<f64> {
        let req = Request::evaluate(self.next_id(), config.clone(), proxy_steps);
        self.request(req, self.options.evaluate_timeout)?
            .into_performance()
    }

    fn distribution(&self, calib_index: usize, perturbation: Option<Perturbation>) -> Result<Vec<f64>> {
        let req = Request::distribution(self.next_id(), calib_index, perturbation);
        self.request(req, self.options.query_timeout)?.into_dist()
    }
}
