//! Shared oracles and builders for the integration suites. Everything here
//! is independent of the library's gradient/basis implementation paths: the
//! finite-difference oracle only calls `forward` + `loss_from_logits`, and
//! the rank oracle runs its own SVD on the raw matrix.

#![allow(dead_code)]

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use recit_core::tinylm::{
    forward, loss_from_logits, LoraFactors, ModelConfig, PositionalMode, TinyLmParams, TokenBatch,
};
use recit_core::vocab::TokenId;

pub fn tiny_config(
    vocab_size: usize,
    d: usize,
    layers: usize,
    heads: usize,
    mode: PositionalMode,
) -> ModelConfig {
    ModelConfig {
        vocab_size,
        embed_dim: d,
        num_layers: layers,
        num_heads: heads,
        max_seq_len: 16,
        positional_mode: mode,
        mlp_hidden: d + d / 2,
    }
}

pub fn random_batch(
    rng: &mut ChaCha8Rng,
    vocab_size: usize,
    b: usize,
    min_len: usize,
    max_len: usize,
) -> TokenBatch {
    let sequences = (0..b)
        .map(|_| {
            let n = rng.gen_range(min_len..=max_len);
            (0..n)
                .map(|_| rng.gen_range(0..vocab_size) as TokenId)
                .collect()
        })
        .collect();
    TokenBatch::new(sequences)
}

/// Loss as a pure function of the (possibly LoRA-adapted) parameters.
pub fn loss_of(params: &TinyLmParams, lora: Option<&LoraFactors>, batch: &TokenBatch) -> f64 {
    let pass = forward(params, lora, batch).expect("forward");
    loss_from_logits(&pass, batch).expect("loss")
}

/// Central finite difference of the loss with respect to one entry of a
/// named parameter tensor.
pub fn fd_grad_entry(
    params: &TinyLmParams,
    lora: Option<&LoraFactors>,
    batch: &TokenBatch,
    tensor: &str,
    index: (usize, usize),
    step: f64,
) -> f64 {
    let mut plus = params.clone();
    let mut minus = params.clone();
    let mut lora_plus = lora.cloned();
    let mut lora_minus = lora.cloned();

    let bump = |p: &mut TinyLmParams, lf: &mut Option<LoraFactors>, delta: f64| {
        let mut hit = false;
        p.visit_mut(|name, m| {
            if name == tensor {
                m[index] += delta;
                hit = true;
            }
        });
        if let Some(l) = lf.as_mut() {
            l.visit_mut(|name, m| {
                if name == tensor {
                    m[index] += delta;
                    hit = true;
                }
            });
        }
        assert!(hit, "tensor {tensor} not found");
    };
    bump(&mut plus, &mut lora_plus, step);
    bump(&mut minus, &mut lora_minus, -step);

    let lp = loss_of(&plus, lora_plus.as_ref(), batch);
    let lm = loss_of(&minus, lora_minus.as_ref(), batch);
    (lp - lm) / (2.0 * step)
}

/// Compare an analytic gradient tensor against finite differences on a
/// random subset of entries. Relative error uses a 1e-3 denominator floor:
/// below that magnitude the central-difference estimate itself carries
/// ~1e-8 absolute noise from cancellation in the loss.
pub fn check_tensor_grad(
    params: &TinyLmParams,
    lora: Option<&LoraFactors>,
    batch: &TokenBatch,
    tensor: &str,
    analytic: &Array2<f64>,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let (rows, cols) = analytic.dim();
    let mut idx: Vec<(usize, usize)> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .collect();
    idx.shuffle(rng);
    let mut worst: f64 = 0.0;
    for &(i, j) in idx.iter().take(samples) {
        let a = analytic[(i, j)];
        let f = fd_grad_entry(params, lora, batch, tensor, (i, j), 1e-4);
        let rel = (a - f).abs() / f64::max(a.abs().max(f.abs()), 1e-3);
        assert!(
            rel < 1e-4,
            "tensor {tensor}[{i},{j}]: analytic {a:.9e} vs fd {f:.9e} (rel {rel:.3e})"
        );
        worst = worst.max(rel);
    }
    worst
}

/// Numeric rank by an independent SVD: singular values above
/// `1e-10 · σ_max`.
pub fn numeric_rank(m: &Array2<f64>) -> usize {
    let (rows, cols) = m.dim();
    let dm = DMatrix::from_row_iterator(rows, cols, m.iter().copied());
    let sv = dm.singular_values();
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * max).count()
}
