//! Stable sub-seeding of per-agent random streams.
//!
//! Every stream is derived from the run seed and a (agent, purpose) pair, so
//! the draws an agent sees never depend on how many other agents exist or in
//! which order they are stepped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::world::AgentId;

/// Purpose tags for independent streams owned by one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Detector = 1,
    Gps = 2,
    Imu = 3,
    Radio = 4,
    Search = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, agent: AgentId, stream: Stream) -> u64 {
    let a = splitmix64(seed ^ splitmix64(agent.0 as u64 + 1));
    splitmix64(a ^ splitmix64((stream as u64) << 32))
}

pub fn stream_rng(seed: u64, agent: AgentId, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, agent, stream))
}
