//! Named random substreams derived from one master seed.
//!
//! Every draw in a run comes from `stream(master, kind, index)`, so a
//! prediction batch, a certification batch and a calibration probe never
//! share state and each can be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::classifiers::splitmix64;

/// Which part of the pipeline consumes the stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Substream {
    Prediction,
    Certification,
    Calibration,
}

impl Substream {
    fn tag(self) -> u64 {
        match self {
            Substream::Prediction => 0x7072_6564,
            Substream::Certification => 0x6365_7274,
            Substream::Calibration => 0x6361_6c69,
        }
    }
}

/// Seed for substream `kind` of item `index`.
pub fn derive_seed(master: u64, kind: Substream, index: u64) -> u64 {
    let a = splitmix64(master ^ splitmix64(kind.tag()));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn stream(master: u64, kind: Substream, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, kind, index))
}
