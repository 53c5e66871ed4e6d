//! Server side of the bridge protocol, generic over any [`ModelBackend`].
//! Used by the mock server binary and by tests; a real-model adapter speaks
//! the same protocol from its own process.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde_json::Value;

use super::protocol::{
    err_response, ok_response, InitInfo, LayerPayload, Payload, Request, RequestEnvelope, StepPayload, UnembedPayload,
    VisualHiddenPayload, PROTOCOL_VERSION,
};
use crate::decoder::{ModelBackend, StepOutput, VisualInput};
use crate::error::{Error, Result};

type Resolver<'a> = Box<dyn Fn(&str) -> Result<VisualInput> + 'a>;

pub struct Server<'a, B: ModelBackend> {
    backend: &'a B,
    resolve: Resolver<'a>,
    sessions: HashMap<String, B::Session>,
    next_session: u64,
    eos_token: Option<u32>,
    hidden_state_tap: Option<String>,
}

impl<'a, B: ModelBackend> Server<'a, B> {
    /// `resolve` turns an `image_ref` into the backend's visual input.
    pub fn new(backend: &'a B, resolve: impl Fn(&str) -> Result<VisualInput> + 'a) -> Self {
        Self {
            backend,
            resolve: Box::new(resolve),
            sessions: HashMap::new(),
            next_session: 0,
            eos_token: None,
            hidden_state_tap: None,
        }
    }

    pub fn with_eos(mut self, eos: Option<u32>) -> Self {
        self.eos_token = eos;
        self
    }

    pub fn with_hidden_state_tap(mut self, tap: impl Into<String>) -> Self {
        self.hidden_state_tap = Some(tap.into());
        self
    }

    fn step_payload(&self, session: String, out: &StepOutput) -> StepPayload {
        let d = self.backend.dims().d_model;
        StepPayload {
            session,
            final_logits: Payload::encode(vec![out.final_logits.len()], &out.final_logits),
            early_hidden: out
                .early_hidden
                .iter()
                .map(|(&layer, h)| LayerPayload {
                    layer,
                    payload: Payload::encode(vec![d], h),
                })
                .collect(),
        }
    }

    fn session_mut(&mut self, id: &str) -> Result<&mut B::Session> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| Error::Lookup(format!("unknown session {id}")))
    }

    /// Executes one request and returns the response line.
    pub fn handle(&mut self, id: u64, request: Request) -> Result<String> {
        match request {
            Request::Init => {
                let dims = self.backend.dims();
                ok_response(
                    id,
                    &InitInfo {
                        protocol_version: PROTOCOL_VERSION,
                        n_layers: dims.n_layers,
                        d_model: dims.d_model,
                        vocab_size: dims.vocab_size,
                        n_visual: dims.n_visual,
                        recorded_layers: self.backend.recorded_layers(),
                        eos_token_id: self.eos_token,
                        hidden_state_tap: self.hidden_state_tap.clone(),
                    },
                )
            }
            Request::Prefill { prompt_ids, image_ref } => {
                let visual = (self.resolve)(&image_ref)?;
                let (session, out) = self.backend.prefill(&prompt_ids, &visual)?;
                let name = format!("s{}", self.next_session);
                self.next_session += 1;
                self.sessions.insert(name.clone(), session);
                ok_response(id, &self.step_payload(name, &out))
            }
            Request::Step { session, token_id } => {
                let backend = self.backend;
                let out = backend.step(self.session_mut(&session)?, token_id)?;
                ok_response(id, &self.step_payload(session, &out))
            }
            Request::VisualHidden { session, layer } => {
                let backend = self.backend;
                let state = self.session_mut(&session)?;
                let m = backend.visual_hidden(state, layer)?;
                ok_response(
                    id,
                    &VisualHiddenPayload {
                        hidden: Payload::encode(vec![m.rows(), m.cols()], m.as_slice()),
                    },
                )
            }
            Request::Unembed { out_path } => {
                let m = self.backend.unembedding().matrix();
                let mut bytes = Vec::with_capacity(m.as_slice().len() * 4);
                for v in m.as_slice() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                std::fs::write(&out_path, bytes)?;
                ok_response(
                    id,
                    &UnembedPayload {
                        path: out_path,
                        shape: vec![m.rows(), m.cols()],
                    },
                )
            }
        }
    }

    /// Parses a request line and answers it; failures become `err` responses.
    pub fn handle_line(&mut self, line: &str) -> String {
        match serde_json::from_str::<RequestEnvelope>(line) {
            Ok(env) => self
                .handle(env.id, env.request)
                .unwrap_or_else(|e| err_response(env.id, &e.to_string())),
            Err(e) => {
                let id = serde_json::from_str::<Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64))
                    .unwrap_or(0);
                err_response(id, &format!("bad request: {e}"))
            }
        }
    }
}

/// Reads request lines until EOF, writing whatever `handler` returns.
/// A `None` from the handler sends nothing for that line.
pub fn serve_lines<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    mut handler: impl FnMut(&str) -> Option<String>,
) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(resp) = handler(&line) {
            writer.write_all(resp.as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
    }
    Ok(())
}
