// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random models for property sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Head, Layer, LnParams, Mlp, ModelBundle, ModelConfig, Vocab};
use crate::numerics::{Matrix, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl RandomDims {
    /// Dims drawn uniformly within the given caps.
    pub fn sample(rng: &mut impl Rng, max_layers: usize, max_heads: usize, max_d_model: usize, max_seq: usize) -> Self {
        let d_model = rng.gen_range(4..=max_d_model);
        RandomDims {
            n_layers: rng.gen_range(1..=max_layers),
            n_heads: rng.gen_range(1..=max_heads),
            d_model,
            d_head: rng.gen_range(1..=d_model.min(16)),
            d_mlp: rng.gen_range(1..=2 * d_model),
            vocab_size: rng.gen_range(4..=48),
            max_seq,
        }
    }
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn ln(rng: &mut ChaCha8Rng, d: usize) -> LnParams {
    LnParams {
        gamma: (0..d).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: vector(rng, d, 0.2),
    }
}

/// Vocab ` t0`, ` t1`, … with leading spaces.
pub fn numbered_vocab(n: usize) -> Vocab {
    Vocab::new((0..n).map(|i| format!(" t{i}")).collect()).expect("unique")
}

/// A model with every parameter drawn from a seeded uniform distribution,
/// including LN affine terms and all optional biases.
pub fn random_bundle(seed: u64, dims: &RandomDims) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.d_model;
    let w = 1.0 / (d as f64).sqrt();
    let config = ModelConfig {
        n_layers: dims.n_layers,
        n_heads: dims.n_heads,
        d_model: d,
        d_head: dims.d_head,
        d_mlp: dims.d_mlp,
        vocab_size: dims.vocab_size,
        max_seq: dims.max_seq,
        ln_eps: 1e-5,
        residual_style: Default::default(),
        precision: Precision::F64,
    };
    let token_embed = matrix(&mut rng, dims.vocab_size, d, 1.0);
    let pos_embed = matrix(&mut rng, dims.max_seq, d, 0.5);
    let layers = (0..dims.n_layers)
        .map(|_| Layer {
            ln_attn: ln(&mut rng, d),
            ln_mlp: ln(&mut rng, d),
            heads: (0..dims.n_heads)
                .map(|_| Head {
                    w_q: matrix(&mut rng, d, dims.d_head, 2.0 * w),
                    w_k: matrix(&mut rng, d, dims.d_head, 2.0 * w),
                    w_v: matrix(&mut rng, d, dims.d_head, 2.0 * w),
                    w_o: matrix(&mut rng, dims.d_head, d, 1.0 / (dims.d_head as f64).sqrt()),
                })
                .collect(),
            attn_bias: Some(vector(&mut rng, d, 0.1)),
            mlp: Mlp {
                w_in: matrix(&mut rng, d, dims.d_mlp, 2.0 * w),
                b_in: vector(&mut rng, dims.d_mlp, 0.5),
                w_out: matrix(&mut rng, dims.d_mlp, d, 1.0 / (dims.d_mlp as f64).sqrt()),
                b_out: vector(&mut rng, d, 0.1),
            },
        })
        .collect();
    let final_ln = ln(&mut rng, d);
    let unembed = matrix(&mut rng, d, dims.vocab_size, 1.0);
    let unembed_bias = Some(vector(&mut rng, dims.vocab_size, 0.5));
    let bundle = ModelBundle {
        config,
        vocab: numbered_vocab(dims.vocab_size),
        token_embed,
        pos_embed,
        layers,
        final_ln,
        unembed,
        unembed_bias,
    };
    debug_assert!(bundle.validate().is_ok());
    bundle
}
