//! Interop with external models: the SVTR trace format for offline replay
//! and the JSON-lines bridge protocol for driving a live model process.

pub mod client;
pub mod protocol;
pub mod server;
pub mod transcript;
pub mod trace;

pub use client::{bridge_session, BridgeBackend, BridgeClient, BridgeSession, DEFAULT_TIMEOUT};
pub use protocol::{InitInfo, Payload, Request, RequestEnvelope, PROTOCOL_VERSION};
pub use server::{serve_lines, Server};
pub use trace::{read_trace, read_trace_file, write_trace, write_trace_file, TraceFile, TraceHeader, TraceStep};
