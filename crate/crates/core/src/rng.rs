//! Seeded random streams.
//!
//! One master seed fans out to independent ChaCha8 streams. The stream id
//! is derived from a [`Stream`] tag plus optional keys (client id, round),
//! so that e.g. changing how clients are selected never perturbs data
//! generation or another client's batch order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named stream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Split,
    Partition,
    Selection,
    BaseInit,
    HeadInit,
    Client,
    Test,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Split => 2,
            Stream::Partition => 3,
            Stream::Selection => 4,
            Stream::BaseInit => 5,
            Stream::HeadInit => 6,
            Stream::Client => 7,
            Stream::Test => 8,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream for `kind`, further keyed by `keys` (e.g. `[client_id, round]`).
    pub fn stream(seed: u64, kind: Stream, keys: &[u64]) -> Self {
        let id = keys
            .iter()
            .fold(splitmix64(kind.tag()), |acc, k| splitmix64(acc ^ splitmix64(*k)));
        Self::new(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(rng: &mut SeededRng, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.next_u64()).collect()
    }

    #[test]
    fn same_seed_and_stream_repeat() {
        let a = draw(&mut SeededRng::new(42, 7), 64);
        let b = draw(&mut SeededRng::new(42, 7), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let a = draw(&mut SeededRng::stream(42, Stream::Data, &[]), 16);
        let b = draw(&mut SeededRng::stream(42, Stream::Partition, &[]), 16);
        let c = draw(&mut SeededRng::stream(42, Stream::Client, &[1, 2]), 16);
        let d = draw(&mut SeededRng::stream(42, Stream::Client, &[2, 1]), 16);
        assert_ne!(a, b);
        assert_ne!(c, d);
    }

    #[test]
    fn known_first_output_is_stable() {
        // Pinned so a dependency bump that changes the streams is noticed.
        assert_eq!(SeededRng::new(0, 0).next_u64(), 13080132717333068652);
        assert_eq!(
            SeededRng::stream(42, Stream::Client, &[3, 1]).next_u64(),
            8728165578215254432
        );
    }
}
