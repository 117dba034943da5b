//! Parameter containers, initialization and LoRA merging.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, ModelError, PositionalMode};

const INIT_STD: f64 = 0.02;

/// One transformer block: attention projections and the MLP. Biases are kept
/// as 1×n matrices so every parameter tensor has a uniform two-dimensional
/// representation for capture, io and optimizer code.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_mlp1: Array2<f64>,
    pub b_mlp1: Array2<f64>,
    pub w_mlp2: Array2<f64>,
    pub b_mlp2: Array2<f64>,
}

/// All weights of the toy causal transformer. The positional table is only
/// consulted in absolute mode; it stays zero (and receives zero gradient)
/// under rotary positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLmParams {
    pub config: ModelConfig,
    pub token_embedding: Array2<f64>,
    pub positional: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub output_head: Array2<f64>,
}

/// Low-rank query adapters: per adapted layer, `A` (d×r) and `B` (r×d) with
/// the live forward path `q = z·W_q + z·A·B`.
///
/// Both factors are initialized with small Gaussian noise. A zero `B` would
/// make the first-step gradient of `A` vanish identically, which leaves
/// nothing for a single-update adversary to observe; the generic nonzero
/// initialization is what gives `∂L/∂A` its full column space.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub rank: usize,
    pub adapted: BTreeMap<usize, (Array2<f64>, Array2<f64>)>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let g: f64 = StandardNormal.sample(rng);
        g * std
    })
}

impl TinyLmParams {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let m = config.mlp_hidden;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                w_q: gaussian(d, d, INIT_STD, rng),
                w_k: gaussian(d, d, INIT_STD, rng),
                w_v: gaussian(d, d, INIT_STD, rng),
                w_o: gaussian(d, d, INIT_STD, rng),
                w_mlp1: gaussian(d, m, INIT_STD, rng),
                b_mlp1: Array2::zeros((1, m)),
                w_mlp2: gaussian(m, d, INIT_STD, rng),
                b_mlp2: Array2::zeros((1, d)),
            })
            .collect();
        let positional = match config.positional_mode {
            PositionalMode::Absolute => gaussian(config.max_seq_len, d, INIT_STD, rng),
            PositionalMode::Rotary => Array2::zeros((config.max_seq_len, d)),
        };
        Ok(TinyLmParams {
            token_embedding: gaussian(config.vocab_size, d, INIT_STD, rng),
            positional,
            layers,
            output_head: gaussian(d, config.vocab_size, INIT_STD, rng),
            config,
        })
    }

    /// Visit every dense parameter tensor in a fixed, documented order.
    pub fn visit(&self, mut f: impl FnMut(String, &Array2<f64>)) {
        f("embed".into(), &self.token_embedding);
        f("pos".into(), &self.positional);
        for (k, l) in self.layers.iter().enumerate() {
            f(format!("layer{k}.attn.wq"), &l.w_q);
            f(format!("layer{k}.attn.wk"), &l.w_k);
            f(format!("layer{k}.attn.wv"), &l.w_v);
            f(format!("layer{k}.attn.wo"), &l.w_o);
            f(format!("layer{k}.mlp.w1"), &l.w_mlp1);
            f(format!("layer{k}.mlp.b1"), &l.b_mlp1);
            f(format!("layer{k}.mlp.w2"), &l.w_mlp2);
            f(format!("layer{k}.mlp.b2"), &l.b_mlp2);
        }
        f("head".into(), &self.output_head);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Array2<f64>)) {
        f("embed".into(), &mut self.token_embedding);
        f("pos".into(), &mut self.positional);
        for (k, l) in self.layers.iter_mut().enumerate() {
            f(format!("layer{k}.attn.wq"), &mut l.w_q);
            f(format!("layer{k}.attn.wk"), &mut l.w_k);
            f(format!("layer{k}.attn.wv"), &mut l.w_v);
            f(format!("layer{k}.attn.wo"), &mut l.w_o);
            f(format!("layer{k}.mlp.w1"), &mut l.w_mlp1);
            f(format!("layer{k}.mlp.b1"), &mut l.b_mlp1);
            f(format!("layer{k}.mlp.w2"), &mut l.w_mlp2);
            f(format!("layer{k}.mlp.b2"), &mut l.b_mlp2);
        }
        f("head".into(), &mut self.output_head);
    }

    pub fn assert_finite(&self) -> Result<(), ModelError> {
        let mut bad = None;
        self.visit(|name, m| {
            if bad.is_none() && m.iter().any(|x| !x.is_finite()) {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(ModelError::NumericalError(format!(
                "parameter {name} contains non-finite entries"
            ))),
            None => Ok(()),
        }
    }
}

impl LoraFactors {
    pub fn init(
        config: &ModelConfig,
        rank: usize,
        adapted_layers: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        super::PeftMode::Lora {
            rank,
            adapted_layers: adapted_layers.to_vec(),
        }
        .validate(config)?;
        let d = config.embed_dim;
        let mut adapted = BTreeMap::new();
        for &layer in adapted_layers {
            adapted.insert(
                layer,
                (gaussian(d, rank, INIT_STD, rng), gaussian(rank, d, INIT_STD, rng)),
            );
        }
        Ok(LoraFactors { rank, adapted })
    }

    pub fn delta(&self, layer: usize) -> Option<Array2<f64>> {
        self.adapted.get(&layer).map(|(a, b)| a.dot(b))
    }

    pub fn visit(&self, mut f: impl FnMut(String, &Array2<f64>)) {
        for (layer, (a, b)) in &self.adapted {
            f(format!("layer{layer}.lora.a"), a);
            f(format!("layer{layer}.lora.b"), b);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Array2<f64>)) {
        for (layer, (a, b)) in &mut self.adapted {
            f(format!("layer{layer}.lora.a"), a);
            f(format!("layer{layer}.lora.b"), b);
        }
    }
}

/// Fold the low-rank update into the query weights: `W_q^k += A^k·B^k` for
/// every adapted layer. Forward on the result matches the live LoRA path.
pub fn merge_lora(params: &TinyLmParams, lora: &LoraFactors) -> Result<TinyLmParams, ModelError> {
    let d = params.config.embed_dim;
    let mut merged = params.clone();
    for (&layer, (a, b)) in &lora.adapted {
        if layer >= merged.layers.len() {
            return Err(ModelError::ShapeError(format!(
                "lora adapts layer {layer} but model has {}",
                merged.layers.len()
            )));
        }
        if a.nrows() != d || a.ncols() != b.nrows() || b.ncols() != d {
            return Err(ModelError::ShapeError(format!(
                "lora factor shapes {:?}/{:?} incompatible with d={d}",
                a.dim(),
                b.dim()
            )));
        }
        let delta = a.dot(b);
        merged.layers[layer].w_q += &delta;
    }
    Ok(merged)
}

/// Row-wise gain-free RMS norm. Each output row is a positive scalar
/// multiple of its input row.
pub(crate) fn rms_norm_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (ms + super::forward::RMS_EPS).sqrt();
        row.mapv_inplace(|v| v * r);
        inv.push(r);
    }
    (out, inv)
}
