//! Binary prototype exchange: the wire codec and a TCP server/client pair.

pub mod codec;
mod net;

pub use codec::{
    decode, encode, encoded_len, quantize, read_frame, write_frame, DecodeError, MessageKind,
    WireMessage, REJECT_ROUND,
};
pub use net::{
    assemble_report, run_remote_client, serve, serve_addr, ClientReport, RegisteredClient,
    ServeConfig, ServerReport, ServerRoundRecord,
};
