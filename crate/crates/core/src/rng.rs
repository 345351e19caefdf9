//! Seeded random streams. Each consumer draws from its own ChaCha stream so
//! that, for example, gate draws never perturb batch sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type Rng64 = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Split = 2,
    FewShot = 3,
    Init = 4,
    Sampler = 5,
    Gates = 6,
    Augment = 7,
    Pretrain = 8,
    Proxies = 9,
}

pub fn stream(seed: u64, which: Stream) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}
