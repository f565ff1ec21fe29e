#![allow(dead_code)]

use psd_core::denoiser::{CountModel, CountModelConfig, FrontierOracle, FrontierOracleConfig};
use psd_core::{TokenId, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const V: u32 = 8;

pub fn vocab() -> Vocabulary {
    Vocabulary::new(V, V - 1).unwrap()
}

/// Token streams from a sparse random Markov chain, each ending in eos.
pub fn markov_corpus(seed: u64, docs: usize, len: usize) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real = V - 1;
    let next: Vec<[TokenId; 2]> = (0..real).map(|_| [rng.gen_range(0..real), rng.gen_range(0..real)]).collect();
    (0..docs)
        .map(|_| {
            let mut t = rng.gen_range(0..real);
            let mut doc = vec![t];
            for _ in 1..len {
                t = next[t as usize][usize::from(rng.gen_bool(0.3))];
                doc.push(t);
            }
            doc.push(V - 1);
            doc
        })
        .collect()
}

pub fn count_instance(seed: u64) -> (CountModel, Vec<TokenId>) {
    let corpus = markov_corpus(seed, 12, 20);
    let model = CountModel::train(CountModelConfig::default(), vocab(), &corpus).unwrap();
    let prompt = corpus[0][..3].to_vec();
    (model, prompt)
}

pub fn reference(seed: u64, len: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..len).map(|_| rng.gen_range(0..V - 1)).collect()
}

pub fn frontier(seed: u64, decay: f64, noise: f64, correctness: f64, ref_len: usize) -> (FrontierOracle, Vec<TokenId>) {
    let reference = reference(seed, ref_len);
    let prompt = reference[..2].to_vec();
    let cfg = FrontierOracleConfig {
        reference,
        c_max: 0.99,
        decay,
        noise_scale: noise,
        correctness,
        floor: 0.05,
        seed,
        drift: false,
    };
    (FrontierOracle::new(cfg, vocab()).unwrap(), prompt)
}
