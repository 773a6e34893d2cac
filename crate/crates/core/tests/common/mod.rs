#![allow(dead_code)]

use abconformer::encoding::{one_hot_context, ALPHABET, CONTEXT_HALF_WIDTH};
use abconformer::{ChainInput, Config, SampleInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> Config {
    Config {
        d_model: 8,
        dim_ff: 16,
        n_heads: 2,
        n_blocks: 2,
        sliding_step: 2,
        input_dim: 651,
        ..Config::default()
    }
}

pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

pub fn chain(rng: &mut ChaCha8Rng, len: usize) -> ChainInput {
    let seq = random_sequence(rng, len);
    let features = one_hot_context(&seq, CONTEXT_HALF_WIDTH).unwrap().features;
    let labels = (0..len).map(|_| u8::from(rng.random_bool(0.4))).collect();
    ChainInput { features, labels }
}

/// One-hot encoded complex with random sequences and labels.
pub fn complex(seed: u64, id: &str, lens: [usize; 3]) -> SampleInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SampleInput {
        id: id.to_string(),
        chains: lens.map(|n| (n > 0).then(|| chain(&mut rng, n))),
    }
}
