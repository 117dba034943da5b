//! Exact analytic gradients for the toy transformer, and the gradient
//! capture an adversary observes from one fine-tuning batch.
//!
//! Gradients are taken of the *summed* next-token loss, so they match
//! central finite differences of [`super::loss_from_logits`] directly.
//! Per-sequence contributions are computed independently (optionally in
//! parallel) and reduced in sequence order, which keeps results bitwise
//! deterministic.

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{forward_sequence, rope_rows, silu_derivative, SeqCache};
use super::{LoraFactors, ModelError, PeftMode, PositionalMode, TinyLmParams, TokenBatch};

/// Gradients of one transformer block, mirroring [`super::LayerParams`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_mlp1: Array2<f64>,
    pub b_mlp1: Array2<f64>,
    pub w_mlp2: Array2<f64>,
    pub b_mlp2: Array2<f64>,
    /// LoRA factor gradients `(∂L/∂A, ∂L/∂B)` when the layer is adapted.
    pub lora: Option<(Array2<f64>, Array2<f64>)>,
}

/// Full gradient set for one batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub token_embedding: Array2<f64>,
    pub positional: Array2<f64>,
    pub layers: Vec<LayerGrads>,
    pub output_head: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &TinyLmParams, lora: Option<&LoraFactors>) -> Self {
        Gradients {
            token_embedding: Array2::zeros(params.token_embedding.dim()),
            positional: Array2::zeros(params.positional.dim()),
            layers: params
                .layers
                .iter()
                .enumerate()
                .map(|(k, l)| LayerGrads {
                    w_q: Array2::zeros(l.w_q.dim()),
                    w_k: Array2::zeros(l.w_k.dim()),
                    w_v: Array2::zeros(l.w_v.dim()),
                    w_o: Array2::zeros(l.w_o.dim()),
                    w_mlp1: Array2::zeros(l.w_mlp1.dim()),
                    b_mlp1: Array2::zeros(l.b_mlp1.dim()),
                    w_mlp2: Array2::zeros(l.w_mlp2.dim()),
                    b_mlp2: Array2::zeros(l.b_mlp2.dim()),
                    lora: lora.and_then(|lf| {
                        lf.adapted
                            .get(&k)
                            .map(|(a, b)| (Array2::zeros(a.dim()), Array2::zeros(b.dim())))
                    }),
                })
                .collect(),
            output_head: Array2::zeros(params.output_head.dim()),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        self.token_embedding += &other.token_embedding;
        self.positional += &other.positional;
        self.output_head += &other.output_head;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w_q += &b.w_q;
            a.w_k += &b.w_k;
            a.w_v += &b.w_v;
            a.w_o += &b.w_o;
            a.w_mlp1 += &b.w_mlp1;
            a.b_mlp1 += &b.b_mlp1;
            a.w_mlp2 += &b.w_mlp2;
            a.b_mlp2 += &b.b_mlp2;
            if let (Some((ga, gb)), Some((oa, ob))) = (a.lora.as_mut(), b.lora.as_ref()) {
                *ga += oa;
                *gb += ob;
            }
        }
    }

    /// Visit the gradient tensors trainable under `mode`, in a fixed order.
    pub fn visit_trainable(&self, mode: &PeftMode, mut f: impl FnMut(String, &Array2<f64>)) {
        match mode {
            PeftMode::FullFt => {
                f("embed".into(), &self.token_embedding);
                f("pos".into(), &self.positional);
                for (k, l) in self.layers.iter().enumerate() {
                    visit_layer(k, l, &mut f);
                }
                f("head".into(), &self.output_head);
            }
            PeftMode::Selective { trainable_layers } => {
                for (k, l) in self.layers.iter().enumerate() {
                    if trainable_layers.contains(&k) {
                        visit_layer(k, l, &mut f);
                    }
                }
            }
            PeftMode::Lora { .. } => {
                for (k, l) in self.layers.iter().enumerate() {
                    if let Some((a, b)) = &l.lora {
                        f(format!("layer{k}.lora.a"), a);
                        f(format!("layer{k}.lora.b"), b);
                    }
                }
            }
        }
    }
}

fn visit_layer(k: usize, l: &LayerGrads, f: &mut impl FnMut(String, &Array2<f64>)) {
    f(format!("layer{k}.attn.wq"), &l.w_q);
    f(format!("layer{k}.attn.wk"), &l.w_k);
    f(format!("layer{k}.attn.wv"), &l.w_v);
    f(format!("layer{k}.attn.wo"), &l.w_o);
    f(format!("layer{k}.mlp.w1"), &l.w_mlp1);
    f(format!("layer{k}.mlp.b1"), &l.b_mlp1);
    f(format!("layer{k}.mlp.w2"), &l.w_mlp2);
    f(format!("layer{k}.mlp.b2"), &l.b_mlp2);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub b: usize,
    pub b_n: usize,
}

/// What the adversary observes from one fine-tuning batch: the trainable
/// gradient tensors under the active PEFT mode, tagged with batch metadata.
#[derive(Debug, Clone)]
pub struct GradientCapture {
    pub peft_mode: PeftMode,
    pub batch_meta: BatchMeta,
    pub entries: Vec<(String, Array2<f64>)>,
}

impl GradientCapture {
    /// The matrix the attack consumes: `∂L/∂W_Q` of layer 0 for full and
    /// selective tuning, `∂L/∂A` of layer 0 for LoRA.
    pub fn first_layer_query_grad(&self) -> &Array2<f64> {
        let name = match self.peft_mode {
            PeftMode::Lora { .. } => "layer0.lora.a",
            _ => "layer0.attn.wq",
        };
        self.entry(name)
            .expect("capture invariant: first-layer query gradient present")
    }

    pub fn entry(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }
}

/// Backward over one sequence. Returns the summed NLL plus fresh gradients.
fn backward_sequence(
    params: &TinyLmParams,
    lora: Option<&LoraFactors>,
    cache: &SeqCache,
) -> (f64, Gradients) {
    let cfg = &params.config;
    let n = cache.tokens.len();
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let rotary = cfg.positional_mode == PositionalMode::Rotary;
    let mut grads = Gradients::zeros_like(params, lora);

    // loss and dlogits (softmax minus one-hot; last row predicts nothing)
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(cache.logits.dim());
    for t in 0..n.saturating_sub(1) {
        let row = cache.logits.row(t);
        let target = cache.tokens[t + 1] as usize;
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps = row.mapv(|v| (v - max).exp());
        let sum = exps.sum();
        loss += max + sum.ln() - row[target];
        let mut drow = dlogits.row_mut(t);
        drow.assign(&(exps / sum));
        drow[target] -= 1.0;
    }

    grads.output_head += &cache.x_out.t().dot(&dlogits);
    let mut dx = dlogits.dot(&params.output_head.t());

    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[idx];

        // MLP branch: x = x_mid + silu(m·W1 + b1)·W2 + b2
        let dmlp_out = dx.clone();
        grads.layers[idx].b_mlp2 += &dmlp_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        grads.layers[idx].w_mlp2 += &lc.h_act.t().dot(&dmlp_out);
        let dh_act = dmlp_out.dot(&layer.w_mlp2.t());
        let dh_pre = &dh_act * &lc.h_pre.mapv(silu_derivative);
        grads.layers[idx].b_mlp1 += &dh_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        grads.layers[idx].w_mlp1 += &lc.m.t().dot(&dh_pre);
        let dm = dh_pre.dot(&layer.w_mlp1.t());
        dx += &rms_norm_backward(&dm, &lc.x_mid, &lc.inv_rms_m);

        // attention branch: x_mid = x_in + concat_h(P_h V_h)·W_o
        let dattn_out = dx.clone();
        grads.layers[idx].w_o += &lc.attn_cat.t().dot(&dattn_out);
        let dattn_cat = dattn_out.dot(&layer.w_o.t());

        let mut dq_rot = Array2::zeros((n, d));
        let mut dk_rot = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..cfg.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &lc.probs[h];
            let doh = dattn_cat.slice(cols);
            let vh = lc.v.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let dp = doh.dot(&vh.t());
            // softmax backward per masked row: dS = P ⊙ (dP − Σ_j dP_j P_j)
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let pe = p.slice(s![i, ..=i]);
                let de = dp.slice(s![i, ..=i]);
                let inner = pe.dot(&de);
                let row = (&de - inner) * &pe;
                ds.slice_mut(s![i, ..=i]).assign(&row);
            }
            ds *= scale;
            let qh = lc.q_rot.slice(cols);
            let kh = lc.k_rot.slice(cols);
            dq_rot.slice_mut(cols).assign(&ds.dot(&kh));
            dk_rot.slice_mut(cols).assign(&ds.t().dot(&qh));
        }
        let (mut dq, mut dk) = (dq_rot, dk_rot);
        if rotary {
            // pull the gradient back through the per-position rotation
            rope_rows(&mut dq, hd, -1.0);
            rope_rows(&mut dk, hd, -1.0);
        }

        grads.layers[idx].w_q += &lc.a.t().dot(&dq);
        grads.layers[idx].w_k += &lc.a.t().dot(&dk);
        grads.layers[idx].w_v += &lc.a.t().dot(&dv);

        let mut da = dq.dot(&layer.w_q.t()) + dk.dot(&layer.w_k.t()) + dv.dot(&layer.w_v.t());
        if let Some(lf) = lora {
            if let Some((fa, fb)) = lf.adapted.get(&idx) {
                // q = a·(W_q + A·B): ∂L/∂A = aᵀ·(dq·Bᵀ), ∂L/∂B = (a·A)ᵀ·dq
                let dq_bt = dq.dot(&fb.t());
                let (ga, gb) = grads.layers[idx]
                    .lora
                    .as_mut()
                    .expect("lora grads allocated for adapted layer");
                *ga += &lc.a.t().dot(&dq_bt);
                *gb += &lc.a.dot(fa).t().dot(&dq);
                da += &dq_bt.dot(&fa.t());
            }
        }
        dx += &rms_norm_backward(&da, &lc.x_in, &lc.inv_rms_a);
    }

    // embedding table scatter
    for (i, &tok) in cache.tokens.iter().enumerate() {
        let mut row = grads.token_embedding.row_mut(tok as usize);
        row += &dx.row(i);
        if cfg.positional_mode == PositionalMode::Absolute {
            let mut prow = grads.positional.row_mut(i);
            prow += &dx.row(i);
        }
    }

    (loss, grads)
}

/// Gradient of the gain-free RMS norm: for each row,
/// `dx = r·dy − (r³/d)·(dy·x)·x`.
fn rms_norm_backward(dy: &Array2<f64>, x: &Array2<f64>, inv_rms: &[f64]) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let r = inv_rms[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let dot = dyr.dot(&xr);
        let coef = r * r * r / d * dot;
        let mut out = dx.row_mut(i);
        out.assign(&(&dyr * r - &xr * coef));
    }
    dx
}

/// Exact gradients of the summed loss for a batch. Sequences above the
/// parallel threshold are differentiated concurrently and reduced in order.
pub fn backward(
    params: &TinyLmParams,
    lora: Option<&LoraFactors>,
    batch: &TokenBatch,
) -> Result<(f64, Gradients), ModelError> {
    batch.validate(&params.config)?;
    let per_seq: Vec<(f64, Gradients)> = if batch.sequences.len() >= 4 {
        batch
            .sequences
            .par_iter()
            .map(|seq| {
                let cache = forward_sequence(params, lora, seq);
                backward_sequence(params, lora, &cache)
            })
            .collect()
    } else {
        batch
            .sequences
            .iter()
            .map(|seq| {
                let cache = forward_sequence(params, lora, seq);
                backward_sequence(params, lora, &cache)
            })
            .collect()
    };

    let mut total_loss = 0.0;
    let mut total = Gradients::zeros_like(params, lora);
    for (l, g) in &per_seq {
        total_loss += l;
        total.add_assign(g);
    }
    if !total_loss.is_finite() {
        return Err(ModelError::NumericalError("loss is not finite".into()));
    }
    Ok((total_loss, total))
}

/// Run backward and package what the client would upload: the trainable
/// gradient tensors under `mode`, with batch metadata.
pub fn capture_gradient(
    params: &TinyLmParams,
    lora: Option<&LoraFactors>,
    batch: &TokenBatch,
    mode: &PeftMode,
) -> Result<GradientCapture, ModelError> {
    mode.validate(&params.config)?;
    if matches!(mode, PeftMode::Lora { .. }) && lora.is_none() {
        return Err(ModelError::ShapeError(
            "lora mode requires lora factors".into(),
        ));
    }
    let (_, grads) = backward(params, lora, batch)?;
    let mut entries = Vec::new();
    grads.visit_trainable(mode, |name, m| entries.push((name, m.clone())));
    Ok(GradientCapture {
        peft_mode: mode.clone(),
        batch_meta: BatchMeta {
            b: batch.batch_size(),
            b_n: batch.total_tokens(),
        },
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: PositionalMode) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 8,
            positional_mode: mode,
            mlp_hidden: 10,
        }
    }

    #[test]
    fn capture_contains_first_layer_query_grad_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = TinyLmParams::init(cfg(PositionalMode::Absolute), &mut rng).unwrap();
        let lora = LoraFactors::init(&params.config, 3, &[0, 1], &mut rng).unwrap();
        let batch = TokenBatch::new(vec![vec![1, 2, 3, 4], vec![5, 6, 7]]);

        let full = capture_gradient(&params, None, &batch, &PeftMode::FullFt).unwrap();
        assert_eq!(full.first_layer_query_grad().dim(), (8, 8));
        assert_eq!(full.batch_meta, BatchMeta { b: 2, b_n: 7 });

        let sel = capture_gradient(
            &params,
            None,
            &batch,
            &PeftMode::Selective {
                trainable_layers: vec![0],
            },
        )
        .unwrap();
        assert_eq!(sel.first_layer_query_grad().dim(), (8, 8));
        assert!(sel.entry("layer1.attn.wq").is_none());
        assert!(sel.entry("head").is_none());

        let lcap = capture_gradient(
            &params,
            Some(&lora),
            &batch,
            &PeftMode::Lora {
                rank: 3,
                adapted_layers: vec![0, 1],
            },
        )
        .unwrap();
        assert_eq!(lcap.first_layer_query_grad().dim(), (8, 3));
    }

    #[test]
    fn masked_positions_contribute_no_query_gradient_rows() {
        // A length-1 sequence has no prediction target, so its query-side
        // upstream gradient is identically zero and so is ∂L/∂W_Q.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = TinyLmParams::init(cfg(PositionalMode::Absolute), &mut rng).unwrap();
        let batch = TokenBatch::new(vec![vec![3]]);
        let (loss, grads) = backward(&params, None, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.layers[0].w_q.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = TinyLmParams::init(cfg(PositionalMode::Rotary), &mut rng).unwrap();
        let batch = TokenBatch::new(vec![
            vec![1, 2, 3, 4, 5],
            vec![5, 4, 3],
            vec![2, 2, 2, 2],
            vec![7, 8, 9, 10, 11],
            vec![1, 9, 4],
        ]);
        let (l1, g1) = backward(&params, None, &batch).unwrap();
        let (l2, g2) = backward(&params, None, &batch).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.layers[0].w_q, g2.layers[0].w_q);
        assert_eq!(g1.token_embedding, g2.token_embedding);
    }
}
