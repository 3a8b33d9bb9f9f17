//! Seeded random streams.
//!
//! A run has one master seed. Every consumer of randomness asks for a stream
//! keyed by `(purpose, round, client)`, so switching a feature on or off never
//! shifts the draws seen by any other feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    ModelInit = 1,
    ClusterMeans = 2,
    TrainSamples = 3,
    TestSamples = 4,
    Partition = 5,
    ClientSelection = 6,
    MaliciousSelection = 7,
    LocalTraining = 8,
    AttackNoise = 9,
    Reconstruction = 10,
    DefenseNoise = 11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    master: u64,
}

impl RngStreams {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master: master_seed,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, purpose: Purpose, round: u64, client: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(stream_id(purpose, round, client));
        rng
    }

    /// A plain `u64` seed for APIs that take one (e.g. `TrainConfig::seed`).
    pub fn seed(&self, purpose: Purpose, round: u64, client: u64) -> u64 {
        mix(self.master ^ mix(stream_id(purpose, round, client)))
    }
}

fn stream_id(purpose: Purpose, round: u64, client: u64) -> u64 {
    let mut h = mix(purpose as u64);
    h = mix(h ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    mix(h ^ client.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
}

// splitmix64 finaliser
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
