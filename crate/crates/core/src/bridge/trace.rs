//! SVTR activation traces.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SVTR"                      4 bytes
//! version                     u32 (= 1)
//! header_json_len             u32
//! header_json                 UTF-8 JSON object
//! [unembedding]               vocab_size * d_model f32, row-major, if has_unembedding
//! visual block                per recorded layer: n_visual * d_model f32
//! step blocks                 per step: token u32, vocab_size f32 final logits,
//!                             then per recorded layer d_model f32 hidden state
//! ```
//!
//! The file length is fully determined by the header; trailing bytes are an
//! error.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::revision::ModelDims;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SVTR";
pub const VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_visual: usize,
    pub recorded_layers: Vec<usize>,
    pub n_steps: usize,
    pub has_unembedding: bool,
    pub dtype: String,
    pub endianness: String,
    /// Where intermediate hidden states were tapped (for example before or
    /// after the final norm); free text set by the exporter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_state_tap: Option<String>,
}

impl TraceHeader {
    pub fn new(dims: ModelDims, recorded_layers: Vec<usize>, n_steps: usize, has_unembedding: bool) -> Self {
        Self {
            n_layers: dims.n_layers,
            d_model: dims.d_model,
            vocab_size: dims.vocab_size,
            n_visual: dims.n_visual,
            recorded_layers,
            n_steps,
            has_unembedding,
            dtype: "f32".into(),
            endianness: "little".into(),
            hidden_state_tap: None,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_layers: self.n_layers,
            d_model: self.d_model,
            vocab_size: self.vocab_size,
            n_visual: self.n_visual,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.dtype != "f32" {
            return Err(format!("dtype {:?} (only f32 is supported)", self.dtype));
        }
        if self.endianness != "little" {
            return Err(format!("endianness {:?} (only little is supported)", self.endianness));
        }
        if self.d_model == 0 || self.vocab_size == 0 || self.n_layers == 0 {
            return Err("zero-sized dimension".into());
        }
        if self.recorded_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err("recorded_layers not strictly increasing".into());
        }
        if let Some(&l) = self.recorded_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(format!("recorded layer {l} >= n_layers {}", self.n_layers));
        }
        Ok(())
    }

    /// Number of f32/u32 words after the JSON header, or `None` on overflow.
    fn body_words(&self) -> Option<usize> {
        let layers = self.recorded_layers.len();
        let unembed = if self.has_unembedding { self.vocab_size.checked_mul(self.d_model)? } else { 0 };
        let visual = layers.checked_mul(self.n_visual)?.checked_mul(self.d_model)?;
        let per_step = 1usize
            .checked_add(self.vocab_size)?
            .checked_add(layers.checked_mul(self.d_model)?)?;
        unembed.checked_add(visual)?.checked_add(self.n_steps.checked_mul(per_step)?)
    }

    /// Total file size in bytes for a header serialized to `json_len` bytes.
    pub fn file_len(&self, json_len: usize) -> Option<usize> {
        PREAMBLE_LEN.checked_add(json_len)?.checked_add(self.body_words()?.checked_mul(4)?)
    }
}

/// One generation step: the token emitted at that step and the activations
/// that predicted it.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub token: u32,
    pub final_logits: Vec<f32>,
    /// One `d_model` vector per recorded layer, in `recorded_layers` order.
    pub early_hidden: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub unembedding: Option<Matrix>,
    /// One `n_visual x d_model` matrix per recorded layer.
    pub visual_hidden: Vec<Matrix>,
    pub steps: Vec<TraceStep>,
}

impl TraceFile {
    fn check_consistent(&self) -> Result<()> {
        let h = &self.header;
        h.validate().map_err(Error::Format)?;
        let bad = |what: String| Err(Error::Format(what));
        if h.n_steps != self.steps.len() {
            return bad(format!("header n_steps {} but {} steps", h.n_steps, self.steps.len()));
        }
        if h.has_unembedding != self.unembedding.is_some() {
            return bad("has_unembedding disagrees with the unembedding block".into());
        }
        if let Some(u) = &self.unembedding {
            if u.rows() != h.vocab_size || u.cols() != h.d_model {
                return bad(format!("unembedding is {}x{}", u.rows(), u.cols()));
            }
        }
        if self.visual_hidden.len() != h.recorded_layers.len() {
            return bad(format!("{} visual blocks for {} layers", self.visual_hidden.len(), h.recorded_layers.len()));
        }
        for (m, l) in self.visual_hidden.iter().zip(&h.recorded_layers) {
            if m.rows() != h.n_visual || m.cols() != h.d_model {
                return bad(format!("visual block for layer {l} is {}x{}", m.rows(), m.cols()));
            }
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.final_logits.len() != h.vocab_size {
                return bad(format!("step {i} has {} logits", s.final_logits.len()));
            }
            if s.early_hidden.len() != h.recorded_layers.len() || s.early_hidden.iter().any(|v| v.len() != h.d_model) {
                return bad(format!("step {i} hidden states do not match recorded layers x d_model"));
            }
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a trace, checking every block against the header.
pub fn write_trace(trace: &TraceFile) -> Result<Vec<u8>> {
    trace.check_consistent()?;
    let json = serde_json::to_vec(&trace.header)?;
    let total = trace
        .header
        .file_len(json.len())
        .ok_or_else(|| Error::Format("trace size overflows".into()))?;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    if let Some(u) = &trace.unembedding {
        put_f32s(&mut out, u.as_slice());
    }
    for m in &trace.visual_hidden {
        put_f32s(&mut out, m.as_slice());
    }
    for s in &trace.steps {
        out.extend_from_slice(&s.token.to_le_bytes());
        put_f32s(&mut out, &s.final_logits);
        for h in &s.early_hidden {
            put_f32s(&mut out, h);
        }
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

pub fn write_trace_file(path: impl AsRef<Path>, trace: &TraceFile) -> Result<()> {
    let bytes = write_trace(trace)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        let end = self.pos + 4 * n;
        let v = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos = end;
        v
    }
}

pub fn read_trace(bytes: &[u8]) -> Result<TraceFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotATrace);
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::CorruptTrace(format!("file is only {} bytes", bytes.len())));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32();
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let json_len = cur.u32() as usize;
    let json_end = PREAMBLE_LEN
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::CorruptTrace("header extends past end of file".into()))?;
    let header: TraceHeader = serde_json::from_slice(&bytes[PREAMBLE_LEN..json_end])
        .map_err(|e| Error::CorruptTrace(format!("invalid header: {e}")))?;
    header.validate().map_err(Error::CorruptTrace)?;
    let expected = header
        .file_len(json_len)
        .ok_or_else(|| Error::CorruptTrace("declared size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::CorruptTrace(format!(
            "expected {expected} bytes from header, found {}",
            bytes.len()
        )));
    }
    cur.pos = json_end;

    let (v, d, p) = (header.vocab_size, header.d_model, header.n_visual);
    let unembedding = if header.has_unembedding {
        Some(Matrix::from_vec(v, d, cur.f32s(v * d))?)
    } else {
        None
    };
    let visual_hidden = header
        .recorded_layers
        .iter()
        .map(|_| Matrix::from_vec(p, d, cur.f32s(p * d)))
        .collect::<Result<Vec<_>>>()?;
    let steps = (0..header.n_steps)
        .map(|_| TraceStep {
            token: cur.u32(),
            final_logits: cur.f32s(v),
            early_hidden: header.recorded_layers.iter().map(|_| cur.f32s(d)).collect(),
        })
        .collect();
    Ok(TraceFile {
        header,
        unembedding,
        visual_hidden,
        steps,
    })
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<TraceFile> {
    read_trace(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_steps: usize) -> TraceFile {
        let dims = ModelDims { n_layers: 4, d_model: 2, vocab_size: 3, n_visual: 2 };
        let layers = vec![1, 3];
        TraceFile {
            header: TraceHeader::new(dims, layers, n_steps, true),
            unembedding: Some(Matrix::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap()),
            visual_hidden: vec![Matrix::zeros(2, 2), Matrix::from_vec(2, 2, vec![0.5, -0.5, 1.5, -1.5]).unwrap()],
            steps: (0..n_steps)
                .map(|i| TraceStep {
                    token: i as u32,
                    final_logits: vec![i as f32, -0.25, f32::MIN_POSITIVE],
                    early_hidden: vec![vec![1.0, 2.0], vec![-0.0, 3.5]],
                })
                .collect(),
        }
    }

    #[test]
    fn empty_steps_round_trip() {
        let t = tiny(0);
        let bytes = write_trace(&t).unwrap();
        let back = read_trace(&bytes).unwrap();
        assert_eq!(back.header.n_steps, 0);
        assert_eq!(back, t);
    }

    #[test]
    fn size_matches_closed_form() {
        let t = tiny(3);
        let bytes = write_trace(&t).unwrap();
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        // 12 + json + 4*(V*d + L*P*d + steps*(1 + V + L*d))
        let words = 3 * 2 + 2 * 2 * 2 + 3 * (1 + 3 + 2 * 2);
        assert_eq!(bytes.len(), 12 + json_len + 4 * words);
    }

    #[test]
    fn named_errors() {
        let bytes = write_trace(&tiny(2)).unwrap();
        assert!(matches!(read_trace(b"XXXX0000000000"), Err(Error::NotATrace)));
        assert!(matches!(read_trace(b""), Err(Error::NotATrace)));
        let err = read_trace(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::CorruptTrace(_)));
        assert!(err.to_string().starts_with("corrupt trace"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_trace(&long), Err(Error::CorruptTrace(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = read_trace(&v2).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion(2)));
        assert_eq!(err.to_string(), "unsupported version 2");
        assert!(matches!(read_trace(&bytes[..20]), Err(Error::CorruptTrace(_))));
    }

    #[test]
    fn inconsistent_shapes_are_rejected_on_write() {
        let mut t = tiny(1);
        t.steps[0].final_logits.pop();
        assert!(matches!(write_trace(&t), Err(Error::Format(_))));
        let mut t = tiny(1);
        t.header.n_steps = 5;
        assert!(matches!(write_trace(&t), Err(Error::Format(_))));
        let mut t = tiny(0);
        t.header.recorded_layers = vec![3, 1];
        assert!(write_trace(&t).is_err());
    }
}
