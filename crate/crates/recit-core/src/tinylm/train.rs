//! Plain SGD with a linear learning-rate decay, restricted to the
//! parameters trainable under the active PEFT mode.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{backward, LoraFactors, ModelError, PeftMode, TinyLmParams, TokenBatch};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm clip applied to the mean-per-token gradient before the
    /// step; unclipped SGD diverges at usable rates on this architecture.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            epochs: 30,
            batch_size: 8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    /// Mean next-token NLL per predicted token over the epoch.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStat>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// CSV rendering with header `epoch,loss,lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", e.epoch, e.loss, e.lr));
        }
        out
    }
}

/// Fine-tune `params` (and LoRA factors, when adapted) on `dataset`.
///
/// The SGD step uses the mean per-predicted-token gradient; the learning
/// rate decays linearly from `cfg.lr` to zero over all steps. Epoch order
/// is a seeded shuffle, so identical `(dataset, cfg, rng seed)` produce
/// bitwise-identical parameters.
pub fn train(
    params: &mut TinyLmParams,
    mut lora: Option<&mut LoraFactors>,
    dataset: &[Vec<TokenId>],
    mode: &PeftMode,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainLog, ModelError> {
    mode.validate(&params.config)?;
    if dataset.is_empty() {
        return Err(ModelError::ShapeError("training dataset is empty".into()));
    }
    if matches!(mode, PeftMode::Lora { .. }) && lora.is_none() {
        return Err(ModelError::ShapeError(
            "lora mode requires lora factors".into(),
        ));
    }
    let batch_size = cfg.batch_size.max(1);
    let steps_per_epoch = dataset.len().div_ceil(batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_preds = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch = TokenBatch::new(chunk.iter().map(|&i| dataset[i].clone()).collect());
            let preds: usize = batch
                .sequences
                .iter()
                .map(|s| s.len().saturating_sub(1))
                .sum();
            if preds == 0 {
                step += 1;
                continue;
            }
            let (loss, grads) = backward(params, lora.as_deref(), &batch)?;
            if !loss.is_finite() {
                return Err(ModelError::TrainingDiverged { epoch });
            }
            epoch_loss += loss;
            epoch_preds += preds;
            let lr_t = cfg.lr * (1.0 - step as f64 / total_steps as f64);
            step += 1;
            if lr_t == 0.0 {
                continue;
            }
            let mut scale = lr_t / preds as f64;
            if let Some(clip) = cfg.clip_norm {
                let gnorm = trainable_grad_norm(&grads, mode) / preds as f64;
                if gnorm > clip {
                    scale *= clip / gnorm;
                }
            }
            apply_step(params, lora.as_deref_mut(), &grads, mode, scale);
        }
        let mean = if epoch_preds > 0 {
            epoch_loss / epoch_preds as f64
        } else {
            0.0
        };
        if !mean.is_finite() {
            return Err(ModelError::TrainingDiverged { epoch });
        }
        log.epochs.push(EpochStat {
            epoch,
            loss: mean,
            lr: cfg.lr * (1.0 - (step.saturating_sub(1)) as f64 / total_steps as f64),
        });
    }
    Ok(log)
}

fn trainable_grad_norm(grads: &super::Gradients, mode: &PeftMode) -> f64 {
    let mut acc = 0.0;
    grads.visit_trainable(mode, |_, m| {
        acc += m.iter().map(|g| g * g).sum::<f64>();
    });
    acc.sqrt()
}

fn apply_step(
    params: &mut TinyLmParams,
    lora: Option<&mut LoraFactors>,
    grads: &super::Gradients,
    mode: &PeftMode,
    scale: f64,
) {
    match mode {
        PeftMode::FullFt => {
            params.token_embedding.scaled_add(-scale, &grads.token_embedding);
            params.positional.scaled_add(-scale, &grads.positional);
            params.output_head.scaled_add(-scale, &grads.output_head);
            for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
                step_layer(p, g, scale);
            }
        }
        PeftMode::Selective { trainable_layers } => {
            for (k, (p, g)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
                if trainable_layers.contains(&k) {
                    step_layer(p, g, scale);
                }
            }
        }
        PeftMode::Lora { .. } => {
            let lf = lora.expect("validated above");
            for (layer, (a, b)) in lf.adapted.iter_mut() {
                if let Some((ga, gb)) = &grads.layers[*layer].lora {
                    a.scaled_add(-scale, ga);
                    b.scaled_add(-scale, gb);
                }
            }
        }
    }
}

fn step_layer(p: &mut super::LayerParams, g: &super::LayerGrads, scale: f64) {
    p.w_q.scaled_add(-scale, &g.w_q);
    p.w_k.scaled_add(-scale, &g.w_k);
    p.w_v.scaled_add(-scale, &g.w_v);
    p.w_o.scaled_add(-scale, &g.w_o);
    p.w_mlp1.scaled_add(-scale, &g.w_mlp1);
    p.b_mlp1.scaled_add(-scale, &g.b_mlp1);
    p.w_mlp2.scaled_add(-scale, &g.w_mlp2);
    p.b_mlp2.scaled_add(-scale, &g.b_mlp2);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{ModelConfig, PositionalMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 8,
            positional_mode: PositionalMode::Absolute,
            mlp_hidden: 8,
        }
    }

    fn data() -> Vec<Vec<TokenId>> {
        vec![
            vec![1, 4, 5, 6, 7],
            vec![1, 8, 9, 10],
            vec![1, 4, 9, 6],
            vec![1, 5, 5, 5, 11],
        ]
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = TinyLmParams::init(cfg(), &mut rng).unwrap();
        let before = params.clone();
        let tc = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 2,
            clip_norm: Some(5.0),
        };
        train(&mut params, None, &data(), &PeftMode::FullFt, &tc, &mut rng).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn selective_training_freezes_other_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = TinyLmParams::init(cfg(), &mut rng).unwrap();
        let before = params.clone();
        let mode = PeftMode::Selective {
            trainable_layers: vec![0],
        };
        let tc = TrainConfig {
            lr: 0.1,
            epochs: 2,
            batch_size: 2,
            clip_norm: Some(5.0),
        };
        train(&mut params, None, &data(), &mode, &tc, &mut rng).unwrap();
        assert_eq!(params.layers[1], before.layers[1]);
        assert_eq!(params.token_embedding, before.token_embedding);
        assert_eq!(params.output_head, before.output_head);
        assert_ne!(params.layers[0].w_q, before.layers[0].w_q);
    }

    #[test]
    fn lora_training_touches_only_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = TinyLmParams::init(cfg(), &mut rng).unwrap();
        let mut lora = LoraFactors::init(&cfg(), 2, &[0], &mut rng).unwrap();
        let before_params = params.clone();
        let before_lora = lora.clone();
        let mode = PeftMode::Lora {
            rank: 2,
            adapted_layers: vec![0],
        };
        let tc = TrainConfig {
            lr: 0.1,
            epochs: 2,
            batch_size: 4,
            clip_norm: Some(5.0),
        };
        train(&mut params, Some(&mut lora), &data(), &mode, &tc, &mut rng).unwrap();
        assert_eq!(params, before_params);
        assert_ne!(lora, before_lora);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = TinyLmParams::init(cfg(), &mut rng).unwrap();
            let tc = TrainConfig {
                lr: 0.2,
                epochs: 4,
                batch_size: 2,
                clip_norm: Some(5.0),
            };
            train(&mut params, None, &data(), &PeftMode::FullFt, &tc, &mut rng).unwrap();
            params
        };
        assert_eq!(run(9), run(9));
    }
}
