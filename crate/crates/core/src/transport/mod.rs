//! In-process message passing: per-node mailboxes carrying binary frames, a
//! ring all-reduce, pull and push gossip services, and an elastic-averaging
//! server, all running the protocol transitions concurrently.

mod collectives;
mod endpoint;
mod frame;
mod runtime;

pub use collectives::{
    collect_pushes, ea_fetch_center, ea_server_loop, push_param, request_pull, ring_allreduce, serve_pull,
    serve_pull_book, serve_pull_with, SnapshotBook,
};
pub use endpoint::{mesh, Endpoint};
pub use frame::{decode_message, encode_message, Message, MessageKind, HEADER_LEN, MAX_PAYLOAD};
pub use runtime::{run_transport, TransportConfig};
