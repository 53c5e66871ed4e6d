//! Message types of the JSON-lines bridge protocol (version 1).
//!
//! Every request is one JSON object on one line carrying an integer `id` and
//! an `op`; every response echoes the `id` and carries `"status": "ok"` or
//! `"status": "err"` with an `error` string. Tensors travel as
//! `{"shape": [...], "data": "<base64 of little-endian f32>"}`; the
//! unembedding matrix is written to a sidecar file instead.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Init,
    Prefill { prompt_ids: Vec<u32>, image_ref: String },
    Step { session: String, token_id: u32 },
    VisualHidden { session: String, layer: usize },
    Unembed { out_path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub id: u64,
    #[serde(flatten)]
    pub request: Request,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub shape: Vec<usize>,
    pub data: String,
}

impl Payload {
    pub fn encode(shape: Vec<usize>, values: &[f32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    /// Decodes and checks the payload against the shape the caller expects.
    pub fn decode(&self, field: &str, expected_shape: &[usize]) -> std::result::Result<Vec<f32>, String> {
        if self.shape != expected_shape {
            return Err(format!("{field}: expected shape {expected_shape:?}, got {:?}", self.shape));
        }
        let bytes = STANDARD
            .decode(self.data.as_bytes())
            .map_err(|e| format!("{field}: invalid base64: {e}"))?;
        let expected = 4 * expected_shape.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(format!("{field}: expected {expected} bytes, got {}", bytes.len()));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPayload {
    pub layer: usize,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitInfo {
    pub protocol_version: u32,
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_visual: usize,
    pub recorded_layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_token_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_state_tap: Option<String>,
}

/// Body of `prefill` and `step` responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPayload {
    pub session: String,
    pub final_logits: Payload,
    pub early_hidden: Vec<LayerPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualHiddenPayload {
    pub hidden: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnembedPayload {
    pub path: String,
    pub shape: Vec<usize>,
}

/// Serializes an `ok` response with the given body fields.
pub fn ok_response<T: Serialize>(id: u64, body: &T) -> Result<String> {
    let mut v = serde_json::to_value(body)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Argument("response body must be a JSON object".into()))?;
    obj.insert("id".into(), id.into());
    obj.insert("status".into(), "ok".into());
    Ok(serde_json::to_string(&v)?)
}

pub fn err_response(id: u64, message: &str) -> String {
    serde_json::json!({ "id": id, "status": "err", "error": message }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let r = RequestEnvelope {
            id: 7,
            request: Request::Step { session: "s1".into(), token_id: 4 },
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"id":7,"op":"step","session":"s1","token_id":4}"#);
        let back: RequestEnvelope = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        let init: RequestEnvelope = serde_json::from_str(r#"{"id":1,"op":"init"}"#).unwrap();
        assert_eq!(init.request, Request::Init);
    }

    #[test]
    fn payload_checks_byte_count() {
        let p = Payload::encode(vec![3], &[1.0, -2.0, 0.5]);
        assert_eq!(p.decode("x", &[3]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(p.decode("x", &[4]).unwrap_err().contains("expected shape"));
        let short = Payload { shape: vec![3], data: Payload::encode(vec![2], &[1.0, 2.0]).data };
        let err = short.decode("final_logits", &[3]).unwrap_err();
        assert_eq!(err, "final_logits: expected 12 bytes, got 8");
    }

    #[test]
    fn responses_echo_id() {
        let s = ok_response(3, &UnembedPayload { path: "u.bin".into(), shape: vec![2, 2] }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["id"], 3);
        assert_eq!(v["status"], "ok");
        let e: serde_json::Value = serde_json::from_str(&err_response(9, "boom")).unwrap();
        assert_eq!((e["id"].as_u64(), e["status"].as_str(), e["error"].as_str()), (Some(9), Some("err"), Some("boom")));
    }
}
