//! Reference bridge server for tests and local experiments.
//!
//! ```text
//! saver-mock-server toy [--seed N] [--plant G,D,S[,STEP]] [--record PATH]
//!                       [--truncate-logits] [--hang-on OP] [--exit-on OP]
//! saver-mock-server replay TRANSCRIPT
//! ```
//!
//! In `toy` mode an `image_ref` of the form `seed:N` selects a synthetic
//! image. The fault flags exist to exercise client error handling.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::process::ExitCode;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use saver::bridge::transcript::{read_transcript, Exchange, Replayer};
use saver::bridge::{serve_lines, Server};
use saver::decoder::VisualInput;
use saver::toy::{build_toy, plant_objects, synth_image, PlantSpec, ToyConfig, EOS};
use saver::{Error, Result};
use serde_json::Value;

#[derive(Default)]
struct ToyArgs {
    seed: u64,
    plant: Option<PlantSpec>,
    record: Option<String>,
    truncate_logits: bool,
    hang_on: Option<String>,
    exit_on: Option<String>,
}

fn usage() -> Error {
    Error::Argument(
        "usage: saver-mock-server toy [--seed N] [--plant G,D,S[,STEP]] [--record PATH] \
         [--truncate-logits] [--hang-on OP] [--exit-on OP] | saver-mock-server replay TRANSCRIPT"
            .into(),
    )
}

fn parse_plant(text: &str) -> Result<PlantSpec> {
    let parts: Vec<&str> = text.split(',').collect();
    let bad = || Error::Argument(format!("bad --plant value {text:?}"));
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    Ok(PlantSpec {
        grounded_token: parts[0].trim().parse().map_err(|_| bad())?,
        distractor_token: parts[1].trim().parse().map_err(|_| bad())?,
        strength: parts[2].trim().parse().map_err(|_| bad())?,
        designated_step: match parts.get(3) {
            Some(s) => s.trim().parse().map_err(|_| bad())?,
            None => 0,
        },
        region: None,
    })
}

fn parse_toy_args(mut args: impl Iterator<Item = String>) -> Result<ToyArgs> {
    let mut out = ToyArgs::default();
    while let Some(flag) = args.next() {
        let mut value = || args.next().ok_or_else(usage);
        match flag.as_str() {
            "--seed" => out.seed = value()?.parse().map_err(|_| usage())?,
            "--plant" => out.plant = Some(parse_plant(&value()?)?),
            "--record" => out.record = Some(value()?),
            "--truncate-logits" => out.truncate_logits = true,
            "--hang-on" => out.hang_on = Some(value()?),
            "--exit-on" => out.exit_on = Some(value()?),
            _ => return Err(usage()),
        }
    }
    Ok(out)
}

fn truncate_logits(response: &str) -> String {
    let Ok(mut v) = serde_json::from_str::<Value>(response) else {
        return response.to_string();
    };
    if let Some(data) = v.pointer_mut("/final_logits/data") {
        if let Some(bytes) = data.as_str().and_then(|s| STANDARD.decode(s).ok()) {
            *data = Value::String(STANDARD.encode(&bytes[..bytes.len().saturating_sub(4)]));
        }
    }
    v.to_string()
}

fn run_toy(args: ToyArgs) -> Result<()> {
    let config = ToyConfig::with_seed(args.seed);
    let mut model = build_toy(config.clone())?;
    if let Some(spec) = args.plant {
        model = plant_objects(&model, spec)?;
    }
    let resolve = |image_ref: &str| -> Result<VisualInput> {
        let seed = image_ref
            .strip_prefix("seed:")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Backend(format!("unknown image_ref {image_ref:?}; expected seed:N")))?;
        Ok(VisualInput::Embeddings(synth_image(&config, seed)))
    };
    let mut server = Server::new(&model, resolve)
        .with_eos(Some(EOS))
        .with_hidden_state_tap("toy residual stream, no final norm");
    let mut recorder = match &args.record {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    let mut failure = None;
    serve_lines(stdin, stdout, |line| {
        let op = serde_json::from_str::<Value>(line)
            .ok()
            .and_then(|v| v.get("op").and_then(Value::as_str).map(str::to_string));
        if op.is_some() && op == args.exit_on {
            std::process::exit(3);
        }
        if op.is_some() && op == args.hang_on {
            return None;
        }
        let mut response = server.handle_line(line);
        if let Some(rec) = recorder.as_mut() {
            let written = Exchange::record(line, &response)
                .and_then(|ex| Ok(serde_json::to_string(&ex)?))
                .and_then(|s| Ok(writeln!(rec, "{s}").and_then(|_| rec.flush())?));
            if let Err(e) = written {
                failure.get_or_insert(e);
            }
        }
        if args.truncate_logits {
            response = truncate_logits(&response);
        }
        Some(response)
    })?;
    failure.map_or(Ok(()), Err)
}

fn run_replay(path: &str) -> Result<()> {
    let mut replayer = Replayer::new(read_transcript(path)?);
    serve_lines(io::stdin().lock(), io::stdout().lock(), |line| Some(replayer.handle_line(line)))
}

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1);
    let result = match args.next().as_deref() {
        Some("toy") => parse_toy_args(args).and_then(run_toy),
        Some("replay") => match (args.next(), args.next()) {
            (Some(path), None) => run_replay(&path),
            _ => Err(usage()),
        },
        _ => Err(usage()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("saver-mock-server: {e}");
            ExitCode::from(2)
        }
    }
}
