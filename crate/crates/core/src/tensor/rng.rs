//! Seed streams: one root seed fans out into independent, labeled
//! substreams so each component can be re-seeded on its own.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(seed)
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    /// Child stream identified by a label.
    pub fn split(self, label: &str) -> Self {
        SeedStream(splitmix64(self.0 ^ splitmix64(fnv1a(label))))
    }

    /// Child stream identified by an index (e.g. scene number).
    pub fn nth(self, i: u64) -> Self {
        SeedStream(splitmix64(
            self.0.wrapping_add(splitmix64(i ^ 0x5851_F42D_4C95_7F2D)),
        ))
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}

/// Xavier/Glorot uniform initialization for a `fan_in × fan_out` matrix.
pub fn xavier_uniform<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(dist.sample(rng)))
        .collect();
    Tensor::new([fan_in, fan_out], data).expect("shape matches")
}

/// Tensor of i.i.d. uniform values in `[lo, hi)`.
pub fn uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let dist = Uniform::new(lo, hi).expect("lo < hi");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
