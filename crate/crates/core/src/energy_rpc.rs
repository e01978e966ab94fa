//! Client for energies served by an external process.
//!
//! Line-delimited JSON over a byte stream (a child's stdio or TCP). The
//! client sends `{"op":"hello","v":1}` and expects `{"v":1,"d":D,"C":C}`;
//! energy requests are `{"v":1,"id":n,"op":"energy","states":[[...]]}` with
//! 1-based symbols, answered by `{"id":n,"energies":[...]}` or
//! `{"id":n,"error":"..."}`. One request is in flight per session.

use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::targets::{Energy, FnEnergy, StateSpace};

pub const PROTOCOL_VERSION: u64 = 1;

/// Largest number of states in one request.
pub const MAX_BATCH: usize = 4096;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Overrides the response timeout, in (fractional) seconds.
pub const TIMEOUT_ENV: &str = "DSB_ENERGY_TIMEOUT_SECS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Program and arguments; the child speaks the protocol on stdin/stdout.
    Command(Vec<String>),
    /// `host:port`.
    Tcp(String),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Command(argv) => write!(f, "command `{}`", argv.join(" ")),
            Endpoint::Tcp(addr) => write!(f, "tcp {addr}"),
        }
    }
}

/// Reads the timeout override, falling back to [`DEFAULT_TIMEOUT`].
pub fn timeout_from_env() -> Result<Duration> {
    match std::env::var(TIMEOUT_ENV) {
        Ok(v) => {
            let secs: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{TIMEOUT_ENV}={v:?} is not a number of seconds")))?;
            if !(secs > 0.0 && secs.is_finite()) {
                return Err(Error::config(format!("{TIMEOUT_ENV} must be positive, got {secs}")));
            }
            Ok(Duration::from_secs_f64(secs))
        }
        Err(_) => Ok(DEFAULT_TIMEOUT),
    }
}

/// An open, handshaken connection to an energy server.
pub struct Session {
    endpoint: Endpoint,
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
    space: StateSpace,
    next_id: u64,
    timeout: Duration,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("endpoint", &self.endpoint)
            .field("space", &self.space)
            .field("next_id", &self.next_id)
            .finish()
    }
}

fn spawn_reader<R: io::Read + Send + 'static>(r: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(r).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl Session {
    /// Connects and performs the handshake. No retries.
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        let (writer, lines, child): (Box<dyn Write + Send>, _, _) = match endpoint {
            Endpoint::Command(argv) => {
                let (prog, args) =
                    argv.split_first().ok_or_else(|| Error::config("energy server command is empty"))?;
                let mut child = Command::new(prog)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                (Box::new(stdin), spawn_reader(stdout), Some(child))
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                let read_half = stream.try_clone()?;
                (Box::new(stream), spawn_reader(read_half), None)
            }
        };
        let mut session = Self {
            endpoint: endpoint.clone(),
            writer,
            lines,
            child,
            space: StateSpace { d: 1, c: 2, has_mask: false },
            next_id: 1,
            timeout,
        };
        session.send(&json!({ "op": "hello", "v": PROTOCOL_VERSION }))?;
        let reply = session.receive()?;
        let version = reply.get("v").and_then(Value::as_u64);
        if version != Some(PROTOCOL_VERSION) {
            return Err(Error::Protocol(format!(
                "server at {endpoint} speaks protocol version {}, client speaks {PROTOCOL_VERSION}",
                reply.get("v").map_or("<none>".to_string(), Value::to_string)
            )));
        }
        let dim = |k: &str| {
            reply
                .get(k)
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Protocol(format!("handshake reply lacks `{k}`: {reply}")))
        };
        let (d, c) = (dim("d")? as usize, dim("C")? as usize);
        session.space = StateSpace::new(d, c).map_err(|e| Error::Protocol(format!("handshake: {e}")))?;
        Ok(session)
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn send(&mut self, msg: &Value) -> Result<()> {
        let mut line = msg.to_string();
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn receive(&mut self) -> Result<Value> {
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(line) => line?,
            Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Protocol(format!("{} closed the connection", self.endpoint)))
            }
        };
        serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("unparseable reply {line:?}: {e}")))
    }

    /// Energies of `states` (0-based symbols), in order. Splits into
    /// requests of at most [`MAX_BATCH`] states.
    pub fn query_energies(&mut self, states: &[Vec<u8>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(MAX_BATCH) {
            out.extend(self.query_chunk(chunk)?);
        }
        Ok(out)
    }

    fn query_chunk(&mut self, states: &[Vec<u8>]) -> Result<Vec<f64>> {
        for x in states {
            self.space.check(x)?;
        }
        let id = self.next_id;
        self.next_id += 1;
        let wire: Vec<Vec<u16>> = states.iter().map(|x| x.iter().map(|&s| s as u16 + 1).collect()).collect();
        self.send(&json!({ "v": PROTOCOL_VERSION, "id": id, "op": "energy", "states": wire }))?;
        let reply = self.receive()?;
        if reply.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(Error::Protocol(format!("expected reply to request {id}, got {reply}")));
        }
        if let Some(err) = reply.get("error").filter(|e| !e.is_null()) {
            return Err(Error::Protocol(format!("server error for request {id}: {err}")));
        }
        let energies = reply
            .get("energies")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol(format!("reply to request {id} has no energies")))?;
        if energies.len() != states.len() {
            return Err(Error::Protocol(format!(
                "request {id} sent {} states, reply has {} energies",
                states.len(),
                energies.len()
            )));
        }
        energies
            .iter()
            .enumerate()
            .map(|(i, v)| match v.as_f64() {
                Some(e) if e.is_finite() => Ok(e),
                _ => Err(Error::Protocol(format!("request {id}: energy {i} is not a finite number: {v}"))),
            })
            .collect()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A target whose energy is computed by a remote server.
#[derive(Debug)]
pub struct RemoteEnergy {
    name: String,
    space: StateSpace,
    session: Mutex<Session>,
}

impl RemoteEnergy {
    pub fn new(name: impl Into<String>, session: Session) -> Self {
        Self { name: name.into(), space: session.space(), session: Mutex::new(session) }
    }

    pub fn connect(name: impl Into<String>, endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        Ok(Self::new(name, Session::connect(endpoint, timeout)?))
    }
}

impl Energy for RemoteEnergy {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> StateSpace {
        self.space
    }

    fn energy(&self, x: &[u8]) -> Result<f64> {
        Ok(self.energies(&[x.to_vec()])?[0])
    }

    fn energies(&self, xs: &[Vec<u8>]) -> Result<Vec<f64>> {
        let mut s = self.session.lock().map_err(|_| Error::State("energy session poisoned".into()))?;
        s.query_energies(xs)
    }
}

/// `Σ_i x_i` over 1-based symbols: the reference fixture energy.
pub fn sum_symbols(space: StateSpace) -> FnEnergy {
    FnEnergy::new("sum-symbols", space, |x| x.iter().map(|&s| s as f64 + 1.0).sum())
}

/// Server-side behaviour of [`serve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeOptions {
    /// Version advertised in the handshake (tests use a wrong one).
    pub version: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { version: PROTOCOL_VERSION }
    }
}

fn handle(line: &str, energy: &dyn Energy, opts: ServeOptions) -> Value {
    let Ok(req) = serde_json::from_str::<Value>(line) else {
        return json!({ "id": null, "error": "parse" });
    };
    let id = req.get("id").cloned().unwrap_or(Value::Null);
    let space = energy.space();
    match req.get("op").and_then(Value::as_str) {
        Some("hello") => json!({ "v": opts.version, "d": space.d, "C": space.c }),
        Some("energy") => {
            if let Some(v) = req.get("v").and_then(Value::as_u64) {
                if v != opts.version {
                    return json!({ "id": id, "error": format!("version {v} not supported") });
                }
            }
            let Some(states) = req.get("states").and_then(Value::as_array) else {
                return json!({ "id": id, "error": "missing states" });
            };
            if states.len() > MAX_BATCH {
                return json!({ "id": id, "error": format!("batch of {} exceeds {MAX_BATCH}", states.len()) });
            }
            let decoded: Option<Vec<Vec<u8>>> = states
                .iter()
                .map(|s| {
                    let row = s.as_array()?;
                    if row.len() != space.d {
                        return None;
                    }
                    row.iter()
                        .map(|v| v.as_u64().filter(|&k| k >= 1 && k as usize <= space.c).map(|k| (k - 1) as u8))
                        .collect()
                })
                .collect();
            let Some(decoded) = decoded else {
                return json!({ "id": id, "error": "malformed state" });
            };
            match energy.energies(&decoded) {
                Ok(e) => json!({ "id": id, "energies": e }),
                Err(e) => json!({ "id": id, "error": e.to_string() }),
            }
        }
        _ => json!({ "id": id, "error": "unknown op" }),
    }
}

/// Answers requests line by line until EOF. Malformed lines get an error
/// reply and service continues.
pub fn serve<R: BufRead, W: Write>(reader: R, mut writer: W, energy: &dyn Energy, opts: ServeOptions) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut reply = handle(&line, energy, opts).to_string();
        reply.push('\n');
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Serves connections one after another until the listener fails.
pub fn serve_tcp(listener: TcpListener, energy: &dyn Energy, opts: ServeOptions) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let reader = BufReader::new(stream.try_clone()?);
        serve(reader, stream, energy, opts)?;
    }
    Ok(())
}
