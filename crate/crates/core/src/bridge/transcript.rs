//! Recorded protocol exchanges, used as golden fixtures and replayed by the
//! mock server.
//!
//! A transcript is JSON lines of `{"request": ..., "response": ...}`. The
//! `unembed` exchange also carries the sidecar file contents as base64 in
//! `"sidecar"`, and its `out_path` is not compared on replay.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::protocol::err_response;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: Value,
    pub response: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
}

impl Exchange {
    /// Builds an exchange from the raw lines, reading the sidecar file of an
    /// `unembed` response.
    pub fn record(request_line: &str, response_line: &str) -> Result<Self> {
        let request: Value = serde_json::from_str(request_line)?;
        let response: Value = serde_json::from_str(response_line)?;
        let mut sidecar = None;
        if request.get("op").and_then(Value::as_str) == Some("unembed")
            && response.get("status").and_then(Value::as_str) == Some("ok")
        {
            let path = response
                .get("path")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Data("unembed response without path".into()))?;
            sidecar = Some(STANDARD.encode(std::fs::read(path)?));
        }
        Ok(Self {
            request,
            response,
            sidecar,
        })
    }

    pub fn op(&self) -> Option<&str> {
        self.request.get("op").and_then(Value::as_str)
    }
}

pub fn parse_transcript(text: &str) -> Result<Vec<Exchange>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("transcript line {}: {e}", i + 1))))
        .collect()
}

pub fn read_transcript(path: impl AsRef<Path>) -> Result<Vec<Exchange>> {
    parse_transcript(&std::fs::read_to_string(path)?)
}

/// Request fields that must match on replay.
fn comparable(request: &Value) -> Value {
    let mut v = request.clone();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("id");
        if obj.get("op").and_then(Value::as_str) == Some("unembed") {
            obj.remove("out_path");
        }
    }
    v
}

/// Answers requests from a transcript, in order.
#[derive(Debug)]
pub struct Replayer {
    exchanges: Vec<Exchange>,
    next: usize,
}

impl Replayer {
    pub fn new(exchanges: Vec<Exchange>) -> Self {
        Self { exchanges, next: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.exchanges.len() - self.next
    }

    pub fn handle_line(&mut self, line: &str) -> String {
        let request: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return err_response(0, &format!("bad request: {e}")),
        };
        let id = request.get("id").and_then(Value::as_u64).unwrap_or(0);
        match self.answer(&request, id) {
            Ok(resp) => resp,
            Err(e) => err_response(id, &e.to_string()),
        }
    }

    fn answer(&mut self, request: &Value, id: u64) -> Result<String> {
        let index = self.next;
        let ex = self
            .exchanges
            .get(index)
            .ok_or_else(|| Error::Data(format!("transcript exhausted after {index} exchanges")))?;
        if comparable(request) != comparable(&ex.request) {
            return Err(Error::Data(format!(
                "transcript mismatch at exchange {index}: expected {}, got {}",
                comparable(&ex.request),
                comparable(request)
            )));
        }
        self.next += 1;
        let mut response = ex.response.clone();
        let obj = response
            .as_object_mut()
            .ok_or_else(|| Error::Data(format!("exchange {index}: response is not an object")))?;
        obj.insert("id".into(), id.into());
        if let Some(data) = &ex.sidecar {
            let out = request
                .get("out_path")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Data("unembed request without out_path".into()))?;
            let bytes = STANDARD
                .decode(data)
                .map_err(|e| Error::Data(format!("exchange {index}: bad sidecar: {e}")))?;
            std::fs::write(out, bytes)?;
            obj.insert("path".into(), out.into());
        }
        Ok(serde_json::to_string(&response)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_rewrites_ids_and_checks_requests() {
        let ex = Exchange {
            request: serde_json::json!({"id": 1, "op": "step", "session": "s0", "token_id": 3}),
            response: serde_json::json!({"id": 1, "status": "ok", "x": 1}),
            sidecar: None,
        };
        let mut r = Replayer::new(vec![ex.clone(), ex]);
        let resp: Value = serde_json::from_str(&r.handle_line(r#"{"id":42,"op":"step","session":"s0","token_id":3}"#)).unwrap();
        assert_eq!(resp["id"], 42);
        assert_eq!(resp["x"], 1);
        let bad: Value = serde_json::from_str(&r.handle_line(r#"{"id":43,"op":"step","session":"s0","token_id":4}"#)).unwrap();
        assert_eq!(bad["status"], "err");
        assert!(bad["error"].as_str().unwrap().contains("mismatch at exchange 1"));
        assert_eq!(r.remaining(), 1);
    }
}
