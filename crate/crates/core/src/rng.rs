//! Named deterministic random streams.
//!
//! Every stream is derived from one root seed plus `(run_id, node, purpose)`
//! through SHA-256, so two protocols run under the same seed draw identical
//! gradient noise for the same node while their partner choices stay
//! independent.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// The generator behind every stream.
pub type StreamRng = ChaCha12Rng;

/// Node id used for streams that belong to the run rather than to a node.
pub const GLOBAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamPurpose {
    GradientNoise,
    DataSample,
    PartnerChoice,
    Clock,
    Straggler,
    Init,
}

impl StreamPurpose {
    fn tag(self) -> &'static [u8] {
        match self {
            StreamPurpose::GradientNoise => b"gradient-noise",
            StreamPurpose::DataSample => b"data-sample",
            StreamPurpose::PartnerChoice => b"partner-choice",
            StreamPurpose::Clock => b"clock",
            StreamPurpose::Straggler => b"straggler",
            StreamPurpose::Init => b"init",
        }
    }
}

pub fn derive_stream(seed: u64, run_id: &str, node: u64, purpose: StreamPurpose) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((run_id.len() as u64).to_le_bytes());
    h.update(run_id.as_bytes());
    h.update(node.to_le_bytes());
    h.update(purpose.tag());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    StreamRng::from_seed(key)
}

/// The per-node streams a worker consumes.
#[derive(Debug, Clone)]
pub struct NodeRng {
    pub noise: StreamRng,
    pub sample: StreamRng,
    pub partner: StreamRng,
    pub straggler: StreamRng,
}

impl NodeRng {
    pub fn new(seed: u64, run_id: &str, node: usize) -> Self {
        let n = node as u64;
        NodeRng {
            noise: derive_stream(seed, run_id, n, StreamPurpose::GradientNoise),
            sample: derive_stream(seed, run_id, n, StreamPurpose::DataSample),
            partner: derive_stream(seed, run_id, n, StreamPurpose::PartnerChoice),
            straggler: derive_stream(seed, run_id, n, StreamPurpose::Straggler),
        }
    }
}
