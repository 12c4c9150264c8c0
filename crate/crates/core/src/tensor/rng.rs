use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Tensor};

/// Seeded random stream backed by ChaCha12.
///
/// ChaCha output is defined bit-for-bit by the seed and stream number, so
/// equal seeds give identical tensors on every platform. Named sub-streams
/// let independent consumers (calibration sampling, batch shuffling, weight
/// init) draw from the same user seed without perturbing one another.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha12Rng,
}

/// FNV-1a, used only to turn a sub-stream name into a stream number.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn substream(seed: u64, name: &str) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id(name));
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::from_f64(std * self.normal()))
    }

    pub fn uniform_tensor<S: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::from_f64(lo + (hi - lo) * self.uniform()))
    }
}
