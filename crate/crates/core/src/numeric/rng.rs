//! Seeded, counter-based random streams.
//!
//! Every consumer (data sampling, latent codes, DP noise, injection noise, ...)
//! owns its own stream derived from one root seed. A stream is fully described
//! by `(seed, stream id, word position)`, which is what checkpoints store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Well-known stream ids, one per randomness consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u64)]
pub enum StreamId {
    Init = 1,
    Partition = 2,
    Data = 3,
    Latent = 4,
    Alpha = 5,
    Injection = 6,
    DpNoise = 7,
    Eval = 8,
    Synth = 9,
    Probe = 10,
}

/// Serializable position of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPosition {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u64,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn for_consumer(seed: u64, id: StreamId) -> Self {
        Self::new(seed, id as u64)
    }

    /// Derives an independent child stream, e.g. one per evaluation seed.
    pub fn child(&self, index: u64) -> Self {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        Self::new(mixed, self.stream)
    }

    pub fn position(&self) -> StreamPosition {
        StreamPosition {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos() as u64,
        }
    }

    pub fn restore(pos: StreamPosition) -> Self {
        let mut s = Self::new(pos.seed, pos.stream);
        s.rng.set_word_pos(pos.word_pos as u128);
        s
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// `count` distinct indices from `0..n`, in sampled order.
    pub fn sample_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, count).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

/// Tensor of i.i.d. `N(mean, std^2)` entries; consumes one normal draw per entry.
pub fn gaussian_sample(shape: &[usize], mean: f64, std: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("std must be finite and >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + std * rng.standard_normal()).collect();
    Tensor::new(shape.to_vec(), data)
}
