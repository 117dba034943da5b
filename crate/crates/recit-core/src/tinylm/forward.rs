//! Forward pass: embeddings, causal multi-head attention, MLP, logits, and
//! the next-token log-likelihood loss.

use ndarray::{s, Array1, Array2, Axis};

use super::params::rms_norm_rows;
use super::{LoraFactors, ModelError, PositionalMode, TinyLmParams, TokenBatch};
use crate::vocab::TokenId;

pub(crate) const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// Per-layer activations cached for the backward pass.
pub(crate) struct LayerCache {
    pub x_in: Array2<f64>,
    pub inv_rms_a: Vec<f64>,
    pub a: Array2<f64>,
    pub v: Array2<f64>,
    pub q_rot: Array2<f64>,
    pub k_rot: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub attn_cat: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub inv_rms_m: Vec<f64>,
    pub m: Array2<f64>,
    pub h_pre: Array2<f64>,
    pub h_act: Array2<f64>,
}

pub(crate) struct SeqCache {
    pub tokens: Vec<TokenId>,
    pub layers: Vec<LayerCache>,
    pub x_out: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Result of a batch forward: per-sequence logits plus cached activations.
pub struct ForwardPass {
    pub(crate) seqs: Vec<SeqCache>,
}

impl ForwardPass {
    /// Logits for sequence `i`, one row per position.
    pub fn logits(&self, i: usize) -> &Array2<f64> {
        &self.seqs[i].logits
    }

    pub fn num_sequences(&self) -> usize {
        self.seqs.len()
    }
}

/// Embedding row for a single (token, position): `E[tok] + P[pos]` in
/// absolute mode, `E[tok]` under rotary positions.
pub fn embed_token(
    params: &TinyLmParams,
    token: TokenId,
    position: usize,
) -> Result<Array1<f64>, ModelError> {
    let cfg = &params.config;
    if token as usize >= cfg.vocab_size {
        return Err(ModelError::InvalidToken {
            token,
            vocab_size: cfg.vocab_size,
        });
    }
    if position >= cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: position + 1,
            max: cfg.max_seq_len,
        });
    }
    let mut row = params.token_embedding.row(token as usize).to_owned();
    if cfg.positional_mode == PositionalMode::Absolute {
        row += &params.positional.row(position);
    }
    Ok(row)
}

/// Input embeddings for a whole batch, stacked sequence-major: row count is
/// the batch's total token count `b_n`.
pub fn embed(params: &TinyLmParams, batch: &TokenBatch) -> Result<Array2<f64>, ModelError> {
    batch.validate(&params.config)?;
    let d = params.config.embed_dim;
    let mut z = Array2::zeros((batch.total_tokens(), d));
    let mut r = 0;
    for seq in &batch.sequences {
        for (pos, &tok) in seq.iter().enumerate() {
            z.row_mut(r).assign(&embed_token(params, tok, pos)?);
            r += 1;
        }
    }
    Ok(z)
}

fn embed_sequence(params: &TinyLmParams, tokens: &[TokenId]) -> Array2<f64> {
    let d = params.config.embed_dim;
    let mut z = Array2::zeros((tokens.len(), d));
    for (pos, &tok) in tokens.iter().enumerate() {
        let mut row = z.row_mut(pos);
        row.assign(&params.token_embedding.row(tok as usize));
        if params.config.positional_mode == PositionalMode::Absolute {
            row += &params.positional.row(pos);
        }
    }
    z
}

/// Rotate head-dimension pairs in place; `sign` −1 undoes a rotation (used
/// when pulling gradients back through the rotary map).
pub(crate) fn rope_rows(x: &mut Array2<f64>, head_dim: usize, sign: f64) {
    let half = head_dim / 2;
    for (pos, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        for head_start in (0..row.len()).step_by(head_dim) {
            for j in 0..half {
                let theta =
                    sign * pos as f64 * ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
                let (sin, cos) = theta.sin_cos();
                let i0 = head_start + 2 * j;
                let i1 = head_start + 2 * j + 1;
                let (x0, x1) = (row[i0], row[i1]);
                row[i0] = x0 * cos - x1 * sin;
                row[i1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_derivative(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn forward_sequence(
    params: &TinyLmParams,
    lora: Option<&LoraFactors>,
    tokens: &[TokenId],
) -> SeqCache {
    let cfg = &params.config;
    let n = tokens.len();
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let rotary = cfg.positional_mode == PositionalMode::Rotary;

    let mut x = embed_sequence(params, tokens);
    let mut layers = Vec::with_capacity(cfg.num_layers);

    for (idx, layer) in params.layers.iter().enumerate() {
        let x_in = x.clone();
        let (a, inv_rms_a) = rms_norm_rows(&x_in);
        let mut q = a.dot(&layer.w_q);
        if let Some(lf) = lora {
            if let Some((fa, fb)) = lf.adapted.get(&idx) {
                q += &a.dot(fa).dot(fb);
            }
        }
        let k = a.dot(&layer.w_k);
        let v = a.dot(&layer.w_v);
        let (mut q_rot, mut k_rot) = (q, k);
        if rotary {
            rope_rows(&mut q_rot, hd, 1.0);
            rope_rows(&mut k_rot, hd, 1.0);
        }

        let mut attn_cat = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q_rot.slice(cols);
            let kh = k_rot.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let mut p = Array2::zeros((n, n));
            for i in 0..n {
                // causal mask: row i attends to positions 0..=i
                let row = scores.slice(s![i, ..=i]);
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut exps: Array1<f64> = row.mapv(|v| (v - max).exp());
                let sum = exps.sum();
                exps.mapv_inplace(|v| v / sum);
                p.slice_mut(s![i, ..=i]).assign(&exps);
            }
            let oh = p.dot(&vh);
            attn_cat.slice_mut(cols).assign(&oh);
            probs.push(p);
        }
        let attn_out = attn_cat.dot(&layer.w_o);
        let x_mid = &x_in + &attn_out;

        let (m, inv_rms_m) = rms_norm_rows(&x_mid);
        let h_pre = m.dot(&layer.w_mlp1) + &layer.b_mlp1;
        let h_act = h_pre.mapv(silu);
        let mlp_out = h_act.dot(&layer.w_mlp2) + &layer.b_mlp2;
        x = &x_mid + &mlp_out;

        layers.push(LayerCache {
            x_in,
            inv_rms_a,
            a,
            v,
            q_rot,
            k_rot,
            probs,
            attn_cat,
            x_mid,
            inv_rms_m,
            m,
            h_pre,
            h_act,
        });
    }

    let logits = x.dot(&params.output_head);
    SeqCache {
        tokens: tokens.to_vec(),
        layers,
        x_out: x,
        logits,
    }
}

/// Run the model over a batch, returning per-position logits and the cached
/// activations needed by [`super::backward`].
pub fn forward(
    params: &TinyLmParams,
    lora: Option<&LoraFactors>,
    batch: &TokenBatch,
) -> Result<ForwardPass, ModelError> {
    batch.validate(&params.config)?;
    if let Some(lf) = lora {
        for (layer, (a, b)) in &lf.adapted {
            if *layer >= params.layers.len()
                || a.nrows() != params.config.embed_dim
                || a.ncols() != b.nrows()
                || b.ncols() != params.config.embed_dim
            {
                return Err(ModelError::ShapeError(format!(
                    "lora factors for layer {layer} have shapes {:?}/{:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
    }
    let seqs = batch
        .sequences
        .iter()
        .map(|seq| forward_sequence(params, lora, seq))
        .collect();
    Ok(ForwardPass { seqs })
}

/// Total next-token negative log-likelihood: `−Σ_l log P(x_l | x_{0:l−1})`
/// summed over every sequence in the batch (a sequence of length n
/// contributes n−1 terms).
pub fn loss_from_logits(pass: &ForwardPass, batch: &TokenBatch) -> Result<f64, ModelError> {
    if pass.seqs.len() != batch.sequences.len() {
        return Err(ModelError::ShapeError(
            "forward pass and batch have different sequence counts".into(),
        ));
    }
    let mut total = 0.0;
    for (cache, seq) in pass.seqs.iter().zip(&batch.sequences) {
        if cache.logits.nrows() != seq.len() {
            return Err(ModelError::ShapeError(
                "logit rows do not match sequence length".into(),
            ));
        }
        total += sequence_nll(&cache.logits, seq);
    }
    if !total.is_finite() {
        return Err(ModelError::NumericalError("loss is not finite".into()));
    }
    Ok(total)
}

pub(crate) fn sequence_nll(logits: &Array2<f64>, tokens: &[TokenId]) -> f64 {
    let mut loss = 0.0;
    for t in 0..tokens.len().saturating_sub(1) {
        let row = logits.row(t);
        let target = tokens[t + 1] as usize;
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
        loss += lse - row[target];
    }
    loss
}
