//! Newline-delimited JSON protocol for simulators living in another process.
//!
//! The server speaks first with a [`Handshake`] line. Each subsequent
//! [`Request`] line gets exactly one [`Response`] line with the same `id`.
//! The `z` field of a request carries the full projected prompt (length
//! `prompt_dim`); projection happens on the client.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, Decode, QueryMode};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub classes: usize,
    pub feature_dim: usize,
    pub prompt_dim: usize,
    pub modes: Vec<QueryMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub mode: QueryMode,
    pub z: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    #[serde(default)]
    pub decode: Decode,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Where to find an external simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Child process speaking the protocol on stdin/stdout.
    Command { program: String, args: Vec<String> },
    /// TCP server, `host:port`.
    Tcp { addr: String },
}

fn handle(backend: &dyn Backend, modes: &[QueryMode], line: &str) -> Response {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            return Response {
                error: Some(format!("malformed request: {e}")),
                ..Response::default()
            }
        }
    };
    let mut resp = Response {
        id: req.id,
        ..Response::default()
    };
    if !modes.contains(&req.mode) {
        resp.error = Some(format!("mode {:?} not offered by this server", req.mode));
        return resp;
    }
    let result = match req.mode {
        QueryMode::Logits => backend.probabilities(&req.z, &req.inputs).map(|o| resp.outputs = Some(o)),
        QueryMode::Labels => backend
            .labels(&req.z, &req.inputs, req.decode, req.seed)
            .map(|l| resp.labels = Some(l)),
    };
    if let Err(e) = result {
        resp.error = Some(e.to_string());
    }
    resp
}

/// Serves `backend` over one connection until the reader hits end of input.
pub fn serve<R: BufRead, W: Write>(
    backend: &dyn Backend,
    modes: &[QueryMode],
    reader: R,
    mut writer: W,
) -> Result<()> {
    let hello = Handshake {
        protocol: PROTOCOL_VERSION,
        classes: backend.classes(),
        feature_dim: backend.feature_dim(),
        prompt_dim: backend.prompt_dim(),
        modes: modes.to_vec(),
    };
    serde_json::to_writer(&mut writer, &hello)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle(backend, modes, &line);
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(backend: Arc<dyn Backend>, modes: Vec<QueryMode>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = Arc::clone(&backend);
        let modes = modes.clone();
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve(backend.as_ref(), &modes, reader, stream);
        });
    }
    Ok(())
}

struct Connection {
    lines: Receiver<std::io::Result<String>>,
    writer: Option<Box<dyn Write + Send>>,
    next_id: u64,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        // Closing the writer ends the server's read loop.
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client side of the protocol, usable as a [`Backend`].
pub struct ExternalSimulator {
    handshake: Handshake,
    timeout: Duration,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for ExternalSimulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalSimulator")
            .field("handshake", &self.handshake)
            .field("timeout", &self.timeout)
            .finish()
    }
}

fn recv_line(lines: &Receiver<std::io::Result<String>>, timeout: Duration) -> Result<String> {
    match lines.recv_timeout(timeout) {
        Ok(Ok(line)) => Ok(line),
        Ok(Err(e)) => Err(Error::Protocol(format!("read failed: {e}"))),
        Err(RecvTimeoutError::Timeout) => Err(Error::Protocol(format!(
            "no response within {} ms",
            timeout.as_millis()
        ))),
        Err(RecvTimeoutError::Disconnected) => Err(Error::Protocol("connection closed".into())),
    }
}

impl ExternalSimulator {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        match endpoint {
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Protocol(format!("failed to spawn `{program}`: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Self::from_parts(stdout, Box::new(stdin), Some(child), timeout)
            }
            Endpoint::Tcp { addr } => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::Protocol(format!("failed to connect to {addr}: {e}")))?;
                let reader = stream.try_clone()?;
                Self::from_parts(reader, Box::new(stream), None, timeout)
            }
        }
    }

    /// Speaks the protocol over arbitrary streams.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::from_parts(reader, Box::new(writer), None, timeout)
    }

    fn from_parts<R: Read + Send + 'static>(
        reader: R,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
        timeout: Duration,
    ) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let conn = Connection {
            lines: rx,
            writer: Some(writer),
            next_id: 1,
            child,
        };
        let first = recv_line(&conn.lines, timeout)
            .map_err(|e| Error::Protocol(format!("handshake failed: {e}")))?;
        let handshake: Handshake = serde_json::from_str(&first)
            .map_err(|e| Error::Protocol(format!("malformed handshake: {e}")))?;
        if handshake.protocol != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported protocol version {}",
                handshake.protocol
            )));
        }
        if handshake.classes < 2 || handshake.feature_dim == 0 || handshake.prompt_dim == 0 {
            return Err(Error::Protocol(format!("invalid handshake dimensions: {handshake:?}")));
        }
        Ok(Self {
            handshake,
            timeout,
            conn: Mutex::new(conn),
        })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn round_trip(&self, mut req: Request) -> Result<Response> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        req.id = conn.next_id;
        conn.next_id += 1;
        let writer = conn
            .writer
            .as_mut()
            .ok_or_else(|| Error::Protocol("connection closed".into()))?;
        let mut line = serde_json::to_vec(&req)?;
        line.push(b'\n');
        writer
            .write_all(&line)
            .and_then(|_| writer.flush())
            .map_err(|e| Error::Protocol(format!("write failed: {e}")))?;
        let reply = recv_line(&conn.lines, self.timeout)?;
        let resp: Response = serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("malformed response: {e}")))?;
        if resp.id != req.id {
            return Err(Error::Protocol(format!(
                "response id {} does not match request id {}",
                resp.id, req.id
            )));
        }
        if let Some(msg) = resp.error {
            return Err(Error::Protocol(format!("server error: {msg}")));
        }
        Ok(resp)
    }
}

impl Backend for ExternalSimulator {
    fn classes(&self) -> usize {
        self.handshake.classes
    }

    fn feature_dim(&self) -> usize {
        self.handshake.feature_dim
    }

    fn prompt_dim(&self) -> usize {
        self.handshake.prompt_dim
    }

    fn supports_logits(&self) -> bool {
        self.handshake.modes.contains(&QueryMode::Logits)
    }

    fn probabilities(&self, prompt: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let resp = self.round_trip(Request {
            id: 0,
            mode: QueryMode::Logits,
            z: prompt.to_vec(),
            inputs: inputs.to_vec(),
            decode: Decode::Argmax,
            seed: 0,
        })?;
        let rows = resp
            .outputs
            .ok_or_else(|| Error::Protocol("logits response without `outputs`".into()))?;
        if rows.len() != inputs.len() {
            return Err(Error::Protocol(format!(
                "expected {} output rows, got {}",
                inputs.len(),
                rows.len()
            )));
        }
        for row in &rows {
            let valid = row.len() == self.classes()
                && row.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-6;
            if !valid {
                return Err(Error::Protocol(format!("invalid probability row {row:?}")));
            }
        }
        Ok(rows)
    }

    fn labels(&self, prompt: &[f64], inputs: &[Vec<f64>], decode: Decode, seed: u64) -> Result<Vec<u32>> {
        let resp = self.round_trip(Request {
            id: 0,
            mode: QueryMode::Labels,
            z: prompt.to_vec(),
            inputs: inputs.to_vec(),
            decode,
            seed,
        })?;
        let labels = resp
            .labels
            .ok_or_else(|| Error::Protocol("labels response without `labels`".into()))?;
        if labels.len() != inputs.len() {
            return Err(Error::Protocol(format!(
                "expected {} labels, got {}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize >= self.classes()) {
            return Err(Error::Protocol(format!(
                "class index {bad} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::FrozenClassifier;
    use std::io::Cursor;

    fn canned(lines: &[&str]) -> Result<ExternalSimulator> {
        let text = lines.join("\n") + "\n";
        ExternalSimulator::from_streams(Cursor::new(text.into_bytes()), std::io::sink(), Duration::from_secs(2))
    }

    const HELLO: &str = r#"{"protocol":1,"classes":2,"feature_dim":1,"prompt_dim":1,"modes":["logits","labels"]}"#;

    #[test]
    fn mismatched_id_is_protocol_error() {
        let ext = canned(&[HELLO, r#"{"id":7,"outputs":[[0.5,0.5]]}"#]).unwrap();
        let err = ext.probabilities(&[0.0], &[vec![0.0]]).unwrap_err();
        assert!(matches!(err, Error::Protocol(ref m) if m.contains("does not match")));
    }

    #[test]
    fn out_of_range_label_is_protocol_error() {
        let ext = canned(&[HELLO, r#"{"id":1,"labels":[2]}"#]).unwrap();
        let err = ext.labels(&[0.0], &[vec![0.0]], Decode::Argmax, 0).unwrap_err();
        assert!(matches!(err, Error::Protocol(ref m) if m.contains("out of range")));
    }

    #[test]
    fn malformed_handshake_and_response() {
        assert!(matches!(canned(&["not json"]), Err(Error::Protocol(_))));
        assert!(matches!(
            canned(&[r#"{"protocol":2,"classes":2,"feature_dim":1,"prompt_dim":1,"modes":[]}"#]),
            Err(Error::Protocol(_))
        ));
        let ext = canned(&[HELLO, "{oops"]).unwrap();
        assert!(matches!(ext.probabilities(&[0.0], &[vec![0.0]]), Err(Error::Protocol(_))));
        let ext = canned(&[HELLO, r#"{"id":1,"outputs":[[0.9,0.3]]}"#]).unwrap();
        assert!(matches!(ext.probabilities(&[0.0], &[vec![0.0]]), Err(Error::Protocol(_))));
    }

    #[test]
    fn timeout_when_server_goes_silent() {
        let (_keep_tx, rx) = std::sync::mpsc::channel::<u8>();
        struct Silent(std::sync::mpsc::Receiver<u8>, bool);
        impl Read for Silent {
            fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
                if !self.1 {
                    self.1 = true;
                    let hello = format!("{HELLO}\n");
                    buf[..hello.len()].copy_from_slice(hello.as_bytes());
                    return Ok(hello.len());
                }
                let _ = self.0.recv();
                Ok(0)
            }
        }
        let ext = ExternalSimulator::from_streams(Silent(rx, false), std::io::sink(), Duration::from_millis(50)).unwrap();
        let err = ext.probabilities(&[0.0], &[vec![0.0]]).unwrap_err();
        assert!(matches!(err, Error::Protocol(ref m) if m.contains("no response")));
    }

    #[test]
    fn server_answers_and_rejects_unoffered_modes() {
        let clf = FrozenClassifier::uniform(3, 2, 2).unwrap();
        let reqs = [
            serde_json::to_string(&Request { id: 4, mode: QueryMode::Logits, z: vec![0.0; 3], inputs: vec![vec![1.0, 2.0]], decode: Decode::Argmax, seed: 0 }).unwrap(),
            "garbage".to_string(),
        ]
        .join("\n");
        let mut out = Vec::new();
        serve(&clf, &[QueryMode::Labels], Cursor::new(reqs), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let hello: Handshake = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(hello.modes, vec![QueryMode::Labels]);
        let r: Response = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(r.id, 4);
        assert!(r.error.is_some());
        let r: Response = serde_json::from_str(lines[2]).unwrap();
        assert!(r.error.unwrap().contains("malformed"));
    }
}
