//! Small randomized model builders shared by unit tests, integration
//! tests, and benchmarks. Not intended for production use.

use crate::graph::{build_model, ModelSpec, PatchableModel};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// A fully random, well-formed model spec with small dimensions.
pub fn random_spec(rng: &mut ChaCha8Rng, n_layers: usize, n_heads: usize) -> ModelSpec {
    let d_model = 8;
    let d_head = 4;
    let d_mlp = 6;
    let vocab: Vec<String> = (0..5).map(|i| i.to_string()).collect();
    let max_seq_len = 6;
    let mut weights = BTreeMap::new();
    let mut rand_t = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    };
    weights.insert("embed.tokens".into(), rand_t(vec![5, d_model]));
    weights.insert("embed.pos".into(), rand_t(vec![max_seq_len, d_model]));
    for l in 0..n_layers {
        for h in 0..n_heads {
            weights.insert(format!("attn.{l}.{h}.w_q"), rand_t(vec![d_model, d_head]));
            weights.insert(format!("attn.{l}.{h}.w_k"), rand_t(vec![d_model, d_head]));
            weights.insert(format!("attn.{l}.{h}.w_v"), rand_t(vec![d_model, d_head]));
            weights.insert(format!("attn.{l}.{h}.w_o"), rand_t(vec![d_head, d_model]));
        }
        weights.insert(format!("mlp.{l}.w_in"), rand_t(vec![d_model, d_mlp]));
        weights.insert(format!("mlp.{l}.b_in"), rand_t(vec![1, d_mlp]));
        weights.insert(format!("mlp.{l}.w_out"), rand_t(vec![d_mlp, d_model]));
        weights.insert(format!("mlp.{l}.b_out"), rand_t(vec![1, d_model]));
    }
    weights.insert("unembed".into(), rand_t(vec![d_model, 5]));
    ModelSpec {
        n_layers,
        n_heads,
        d_model,
        d_head,
        d_mlp,
        vocab,
        max_seq_len,
        use_positional_embedding: true,
        weights,
    }
}

/// Deterministic random model from a seed.
pub fn random_model(seed: u64, n_layers: usize, n_heads: usize) -> PatchableModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_model(random_spec(&mut rng, n_layers, n_heads)).unwrap()
}
