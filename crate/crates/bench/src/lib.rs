//! Seeded fixtures shared by the benchmarks.

use peel_core::model::{basic_block, random_init, Activation, Block, InitScheme};
use peel_core::{NetworkSpec, ResBlockSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stride-1 residual block with fan-in uniform weights.
pub fn block(dims: [usize; 3], hidden: usize, seed: u64) -> ResBlockSpec {
    let net = NetworkSpec {
        input_dims: dims,
        stem: vec![],
        blocks: vec![Block::Residual(basic_block(
            dims,
            hidden,
            dims[0],
            3,
            1,
            Activation::Relu,
        ))],
    };
    match random_init(&net, &InitScheme::fan_in_uniform(seed))
        .unwrap()
        .blocks
        .remove(0)
    {
        Block::Residual(b) => b,
        Block::Plain(_) => unreachable!(),
    }
}

pub fn uniform(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(dims, 0.0, 1.0, &mut rng)
}
