//! Client side of the bridge protocol: a [`ModelBackend`] driving an external
//! model process over JSON lines.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde_json::Value;

use super::protocol::{
    InitInfo, Request, RequestEnvelope, StepPayload, UnembedPayload, VisualHiddenPayload, PROTOCOL_VERSION,
};
use crate::decoder::{ModelBackend, StepOutput, VisualInput};
use crate::error::{Error, Result};
use crate::revision::{ModelDims, Unembedding};
use crate::tensor::Matrix;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

static SIDECAR_COUNTER: AtomicU64 = AtomicU64::new(0);

fn protocol(message: impl Into<String>, line: &str) -> Error {
    Error::Protocol {
        message: message.into(),
        line: line.to_string(),
    }
}

/// One request/response channel. Requests are strictly serialized.
pub struct BridgeClient {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    next_id: u64,
    timeout: Duration,
    /// Set after a timeout or a broken stream; later requests fail fast.
    failed: Option<String>,
}

impl BridgeClient {
    /// Wraps an already-connected pair of streams.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("bridge-reader".into())
            .spawn(move || {
                for line in BufReader::new(reader).lines() {
                    let stop = line.is_err();
                    if tx.send(line).is_err() || stop {
                        break;
                    }
                }
            })
            .expect("spawn bridge reader thread");
        Self {
            writer: Box::new(writer),
            lines: rx,
            child: None,
            next_id: 1,
            timeout,
            failed: None,
        }
    }

    /// Spawns `program args...` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_streams(stdout, stdin, timeout);
        client.child = Some(child);
        Ok(client)
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn exit_message(&mut self) -> String {
        match self.child.as_mut() {
            Some(child) => {
                // Give the process a moment to be reaped after closing stdout.
                let deadline = Instant::now() + Duration::from_millis(500);
                loop {
                    match child.try_wait() {
                        Ok(Some(status)) => return format!("{status}"),
                        Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                        Ok(None) => return "stdout closed".into(),
                        Err(e) => return e.to_string(),
                    }
                }
            }
            None => "stream closed".into(),
        }
    }

    /// Sends one request and returns the body of its `ok` response.
    pub fn request(&mut self, request: Request) -> Result<(Value, String)> {
        if let Some(reason) = &self.failed {
            return Err(Error::Backend(format!("bridge unusable: {reason}")));
        }
        let id = self.next_id;
        self.next_id += 1;
        let line = serde_json::to_string(&RequestEnvelope { id, request })?;
        log::trace!("bridge -> {line}");
        if let Err(e) = self.writer.write_all(line.as_bytes()).and_then(|_| {
            self.writer.write_all(b"\n")?;
            self.writer.flush()
        }) {
            let status = self.exit_message();
            self.failed = Some(format!("write failed: {e}"));
            return Err(Error::ProcessExit(status));
        }

        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let received = match self.lines.recv_timeout(remaining) {
                Ok(Ok(received)) => received,
                Ok(Err(e)) => {
                    self.failed = Some(format!("read failed: {e}"));
                    return Err(Error::Io(e));
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.failed = Some("timed out".into());
                    return Err(Error::Timeout(self.timeout));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let status = self.exit_message();
                    self.failed = Some("process exited".into());
                    return Err(Error::ProcessExit(status));
                }
            };
            log::trace!("bridge <- {received}");
            if received.trim().is_empty() {
                continue;
            }
            let value: Value =
                serde_json::from_str(&received).map_err(|e| protocol(format!("invalid JSON: {e}"), &received))?;
            let obj = value
                .as_object()
                .ok_or_else(|| protocol("response is not a JSON object", &received))?;
            let got = obj
                .get("id")
                .and_then(Value::as_u64)
                .ok_or_else(|| protocol("response has no integer id", &received))?;
            if got < id {
                log::warn!("discarding stale bridge response {got}");
                continue;
            }
            if got != id {
                return Err(protocol(format!("response id {got} does not match request id {id}"), &received));
            }
            return match obj.get("status").and_then(Value::as_str) {
                Some("ok") => Ok((value, received)),
                Some("err") => {
                    let text = obj.get("error").and_then(Value::as_str).unwrap_or("unspecified error");
                    Err(Error::Backend(text.to_string()))
                }
                _ => Err(protocol("status must be \"ok\" or \"err\"", &received)),
            };
        }
    }

    /// Like [`request`](Self::request) but decodes the body into `T`.
    pub fn call<T: DeserializeOwned>(&mut self, request: Request) -> Result<(T, String)> {
        let (value, line) = self.request(request)?;
        let body = serde_json::from_value(value).map_err(|e| protocol(format!("malformed response: {e}"), &line))?;
        Ok((body, line))
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client-side record of a remote session. Forks are rebuilt by re-running
/// prefill and every stepped token, since the protocol has no fork op.
#[derive(Debug, Clone)]
pub struct BridgeSession {
    id: String,
    prompt: Vec<u32>,
    image_ref: String,
    tokens: Vec<u32>,
}

impl BridgeSession {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// A [`ModelBackend`] backed by an external process.
pub struct BridgeBackend {
    client: Mutex<BridgeClient>,
    info: InitInfo,
    unembedding: Unembedding,
}

impl std::fmt::Debug for BridgeBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeBackend").field("info", &self.info).finish()
    }
}

/// Starts `program args...` and performs the `init` and `unembed` handshake.
pub fn bridge_session(program: &str, args: &[String], timeout: Duration) -> Result<BridgeBackend> {
    BridgeBackend::connect(BridgeClient::spawn(program, args, timeout)?)
}

impl BridgeBackend {
    pub fn connect(mut client: BridgeClient) -> Result<Self> {
        let (info, line): (InitInfo, _) = client.call(Request::Init)?;
        if info.protocol_version != PROTOCOL_VERSION {
            return Err(protocol(
                format!("unsupported protocol version {} (expected {PROTOCOL_VERSION})", info.protocol_version),
                &line,
            ));
        }
        let dims = ModelDims {
            n_layers: info.n_layers,
            d_model: info.d_model,
            vocab_size: info.vocab_size,
            n_visual: info.n_visual,
        };
        dims.validate().map_err(|e| protocol(e.to_string(), &line))?;
        if info.recorded_layers.windows(2).any(|w| w[0] >= w[1])
            || info.recorded_layers.iter().any(|&l| l == 0 || l >= info.n_layers)
        {
            return Err(protocol("recorded_layers must be strictly increasing within 1..n_layers", &line));
        }

        let path = sidecar_path();
        let result = fetch_unembedding(&mut client, &path, &dims);
        let _ = std::fs::remove_file(&path);
        let unembedding = result?;
        Ok(Self {
            client: Mutex::new(client),
            info,
            unembedding,
        })
    }

    pub fn info(&self) -> &InitInfo {
        &self.info
    }

    pub fn eos_token(&self) -> Option<u32> {
        self.info.eos_token_id
    }

    fn client(&self) -> std::sync::MutexGuard<'_, BridgeClient> {
        self.client.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn decode_step(&self, body: StepPayload, line: &str) -> Result<(String, StepOutput)> {
        let v = self.info.vocab_size;
        let d = self.info.d_model;
        let final_logits = body
            .final_logits
            .decode("final_logits", &[v])
            .map_err(|m| protocol(m, line))?;
        let mut early_hidden = BTreeMap::new();
        for entry in &body.early_hidden {
            let field = format!("early_hidden[{}]", entry.layer);
            let h = entry.payload.decode(&field, &[d]).map_err(|m| protocol(m, line))?;
            if early_hidden.insert(entry.layer, h).is_some() {
                return Err(protocol(format!("layer {} reported twice", entry.layer), line));
            }
        }
        let got: Vec<usize> = early_hidden.keys().copied().collect();
        if got != self.info.recorded_layers {
            return Err(protocol(
                format!("early_hidden layers {got:?} differ from recorded layers {:?}", self.info.recorded_layers),
                line,
            ));
        }
        Ok((body.session, StepOutput { final_logits, early_hidden }))
    }

    fn image_ref(visual: &VisualInput) -> Result<String> {
        match visual {
            VisualInput::ImageRef(r) => Ok(r.clone()),
            VisualInput::Embeddings(_) => Err(Error::Backend(
                "bridge backends take image references, not embeddings".into(),
            )),
        }
    }

    fn remote_prefill(&self, prompt: &[u32], image_ref: &str) -> Result<(BridgeSession, StepOutput)> {
        let (body, line): (StepPayload, _) = self.client().call(Request::Prefill {
            prompt_ids: prompt.to_vec(),
            image_ref: image_ref.to_string(),
        })?;
        let (id, out) = self.decode_step(body, &line)?;
        let session = BridgeSession {
            id,
            prompt: prompt.to_vec(),
            image_ref: image_ref.to_string(),
            tokens: Vec::new(),
        };
        Ok((session, out))
    }
}

fn sidecar_path() -> PathBuf {
    let n = SIDECAR_COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("saver-unembed-{}-{n}.f32", std::process::id()))
}

fn fetch_unembedding(client: &mut BridgeClient, path: &std::path::Path, dims: &ModelDims) -> Result<Unembedding> {
    let (body, line): (UnembedPayload, _) = client.call(Request::Unembed {
        out_path: path.to_string_lossy().into_owned(),
    })?;
    let expected_shape = [dims.vocab_size, dims.d_model];
    if body.shape != expected_shape {
        return Err(protocol(
            format!("unembed: expected shape {expected_shape:?}, got {:?}", body.shape),
            &line,
        ));
    }
    let bytes = std::fs::read(&body.path)
        .map_err(|e| protocol(format!("cannot read unembedding sidecar {}: {e}", body.path), &line))?;
    let expected = 4 * dims.vocab_size * dims.d_model;
    if bytes.len() != expected {
        return Err(protocol(
            format!("unembed: expected {expected} bytes, got {}", bytes.len()),
            &line,
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Unembedding::new(Matrix::from_vec(dims.vocab_size, dims.d_model, data)?)
}

impl ModelBackend for BridgeBackend {
    type Session = BridgeSession;

    fn dims(&self) -> ModelDims {
        ModelDims {
            n_layers: self.info.n_layers,
            d_model: self.info.d_model,
            vocab_size: self.info.vocab_size,
            n_visual: self.info.n_visual,
        }
    }

    fn unembedding(&self) -> &Unembedding {
        &self.unembedding
    }

    fn recorded_layers(&self) -> Vec<usize> {
        self.info.recorded_layers.clone()
    }

    fn prefill(&self, prompt: &[u32], visual: &VisualInput) -> Result<(BridgeSession, StepOutput)> {
        self.remote_prefill(prompt, &Self::image_ref(visual)?)
    }

    fn step(&self, session: &mut BridgeSession, token: u32) -> Result<StepOutput> {
        let (body, line): (StepPayload, _) = self.client().call(Request::Step {
            session: session.id.clone(),
            token_id: token,
        })?;
        let (id, out) = self.decode_step(body, &line)?;
        if id != session.id {
            return Err(protocol(format!("step answered for session {id}, expected {}", session.id), &line));
        }
        session.tokens.push(token);
        Ok(out)
    }

    fn visual_hidden(&self, session: &BridgeSession, layer: usize) -> Result<Matrix> {
        let (body, line): (VisualHiddenPayload, _) = self.client().call(Request::VisualHidden {
            session: session.id.clone(),
            layer,
        })?;
        let (p, d) = (self.info.n_visual, self.info.d_model);
        let data = body.hidden.decode("hidden", &[p, d]).map_err(|m| protocol(m, &line))?;
        Matrix::from_vec(p, d, data)
    }

    fn fork(&self, session: &BridgeSession) -> Result<BridgeSession> {
        let (mut copy, _) = self.remote_prefill(&session.prompt, &session.image_ref)?;
        for &t in &session.tokens {
            self.step(&mut copy, t)?;
        }
        Ok(copy)
    }
}
