//! Regenerates the binary and transcript fixtures under `fixtures/`.
//!
//! ```text
//! cargo run -p saver --example gen_fixtures -- <fixtures-dir>
//! ```
//!
//! Everything written here is deterministic; rerunning produces identical
//! files.

use std::io::BufReader;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use saver::bridge::transcript::Exchange;
use saver::bridge::{serve_lines, write_trace, BridgeBackend, BridgeClient, Server, DEFAULT_TIMEOUT};
use saver::decoder::{decode_with_trace, saver_decode, DecodeParams, VisualInput};
use saver::revision::SaverParams;
use saver::toy::fixture::{planted_case, IMAGE_SEED_OFFSET};
use saver::toy::{synth_image, EOS};
use serde_json::{json, Value};

const TRACE_SEED: u64 = 4;
const SESSION_SEED: u64 = 4;
const SIDECAR_NAME: &str = "unembed.f32";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::create_dir_all(path.parent().expect("file inside a directory"))?;
    std::fs::write(path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn session_params() -> DecodeParams {
    DecodeParams {
        max_new_tokens: 6,
        eos_token: Some(EOS),
        ..DecodeParams::with_saver(SaverParams::default())
    }
}

fn traces(dir: &Path) -> anyhow::Result<()> {
    let case = planted_case(TRACE_SEED)?;
    let params = DecodeParams { max_new_tokens: 8, ..DecodeParams::with_saver(SaverParams::default()) };
    let (out, trace) = decode_with_trace(&case.model, &case.prompt, &case.visual, &params)?;
    let bytes = write_trace(&trace)?;
    write(&dir.join("toy_planted_seed4.svtr"), &bytes)?;
    let h = &trace.header;
    let manifest = json!({
        "file": "toy_planted_seed4.svtr",
        "generator": {
            "model_seed": TRACE_SEED,
            "image_seed": IMAGE_SEED_OFFSET + TRACE_SEED,
            "prompt": case.prompt,
            "plant": case.spec,
            "decode": { "max_new_tokens": 8, "saver": SaverParams::default() },
        },
        "n_layers": h.n_layers,
        "d_model": h.d_model,
        "vocab_size": h.vocab_size,
        "n_visual": h.n_visual,
        "recorded_layers": h.recorded_layers,
        "n_steps": h.n_steps,
        "has_unembedding": h.has_unembedding,
        "tokens": out.tokens,
        "file_len": bytes.len(),
    });
    write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let corrupt = dir.join("corrupt");
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"XXXX");
    write(&corrupt.join("bad_magic.svtr"), bad_magic)?;
    let mut bad_version = bytes.clone();
    bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
    write(&corrupt.join("bad_version.svtr"), bad_version)?;
    write(&corrupt.join("truncated.svtr"), &bytes[..bytes.len() - 1])?;
    Ok(())
}

/// Drops the machine-specific sidecar path from an unembed exchange.
fn normalize(mut ex: Exchange) -> Exchange {
    if ex.op() == Some("unembed") {
        ex.request["out_path"] = Value::from(SIDECAR_NAME);
        if ex.response.get("path").is_some() {
            ex.response["path"] = Value::from(SIDECAR_NAME);
        }
    }
    ex
}

fn toy_session(dir: &Path) -> anyhow::Result<()> {
    let case = planted_case(SESSION_SEED)?;
    let config = case.model.config().clone();
    let (req_r, req_w) = std::io::pipe()?;
    let (resp_r, resp_w) = std::io::pipe()?;
    let mut exchanges = Vec::new();
    let tokens = std::thread::scope(|scope| -> anyhow::Result<Vec<u32>> {
        let server = scope.spawn(|| -> anyhow::Result<Vec<Exchange>> {
            let resolve = |r: &str| -> saver::Result<VisualInput> {
                let seed = r.strip_prefix("seed:").and_then(|s| s.parse().ok()).expect("seed:N image ref");
                Ok(VisualInput::Embeddings(synth_image(&config, seed)))
            };
            let mut server = Server::new(&case.model, resolve)
                .with_eos(Some(EOS))
                .with_hidden_state_tap("toy residual stream, no final norm");
            let mut log = Vec::new();
            let mut failure = None;
            serve_lines(BufReader::new(req_r), resp_w, |line| {
                let resp = server.handle_line(line);
                match Exchange::record(line, &resp) {
                    Ok(ex) => log.push(normalize(ex)),
                    Err(e) => failure = Some(e),
                }
                Some(resp)
            })?;
            if let Some(e) = failure {
                return Err(e.into());
            }
            Ok(log)
        });
        let backend = BridgeBackend::connect(BridgeClient::from_streams(resp_r, req_w, DEFAULT_TIMEOUT))?;
        let visual = VisualInput::ImageRef(format!("seed:{}", IMAGE_SEED_OFFSET + SESSION_SEED));
        let out = saver_decode(&backend, &case.prompt, &visual, &session_params())?;
        drop(backend);
        exchanges = server.join().expect("server thread")?;
        Ok(out.tokens)
    })?;

    let mut text = String::new();
    for ex in &exchanges {
        text.push_str(&serde_json::to_string(ex)?);
        text.push('\n');
    }
    write(&dir.join("toy_session.jsonl"), text)?;
    let meta = json!({
        "transcript": "toy_session.jsonl",
        "server": ["toy", "--seed", SESSION_SEED.to_string(), "--plant",
                   format!("{},{},{},{}", case.spec.grounded_token, case.spec.distractor_token, case.spec.strength, case.spec.designated_step)],
        "prompt": case.prompt,
        "image_ref": format!("seed:{}", IMAGE_SEED_OFFSET + SESSION_SEED),
        "decode": { "max_new_tokens": 6, "eos_token": EOS, "saver": SaverParams::default() },
        "tokens": tokens,
    });
    write(&dir.join("toy_session.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Handshake of a 32-layer model that records layers 20 through 29.
fn init_32(dir: &Path) -> anyhow::Result<()> {
    let (v, d) = (8usize, 4usize);
    let mut sidecar = Vec::with_capacity(v * d * 4);
    for i in 0..v {
        for j in 0..d {
            let x: f32 = if i % d == j { 1.0 + (i / d) as f32 } else { 0.0 };
            sidecar.extend_from_slice(&x.to_le_bytes());
        }
    }
    let exchanges = [
        Exchange {
            request: json!({"id": 1, "op": "init"}),
            response: json!({
                "id": 1, "status": "ok", "protocol_version": 1,
                "n_layers": 32, "d_model": d, "vocab_size": v, "n_visual": 4,
                "recorded_layers": (20..=29).collect::<Vec<_>>(), "eos_token_id": 2,
                "hidden_state_tap": "residual stream before the final norm",
            }),
            sidecar: None,
        },
        Exchange {
            request: json!({"id": 2, "op": "unembed", "out_path": SIDECAR_NAME}),
            response: json!({"id": 2, "status": "ok", "path": SIDECAR_NAME, "shape": [v, d]}),
            sidecar: Some(STANDARD.encode(&sidecar)),
        },
    ];
    let text: String = exchanges
        .iter()
        .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    write(&dir.join("init_32_layers.jsonl"), text)
}

fn main() -> anyhow::Result<()> {
    let root: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()).into();
    traces(&root.join("traces"))?;
    toy_session(&root.join("bridge"))?;
    init_32(&root.join("bridge"))?;
    Ok(())
}
