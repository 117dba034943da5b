//! Serialization of one captured fine-tuning round: the gradient capture,
//! the uploaded PEFT update, the evaluated batch and its ground-truth
//! annotations, all in one container file. Round trips are bitwise.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{PeftUpdate, PeftUpdateParams};
use crate::container::{read_container, write_container};
use crate::pnotes::PrivateSample;
use crate::tinylm::{
    BatchMeta, GradientCapture, LayerParams, LoraFactors, ModelError, PeftMode, TokenBatch,
};

const KIND: &str = "captured-round";

/// Everything the adversary receives from (or about) one victim round.
#[derive(Debug, Clone)]
pub struct CapturedRound {
    pub update: PeftUpdate,
    pub batch: TokenBatch,
    pub targets: Vec<PrivateSample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RoundMeta {
    peft_mode: PeftMode,
    batch_meta: BatchMeta,
    batch: TokenBatch,
    targets: Vec<PrivateSample>,
    grad_names: Vec<String>,
    update_kind: String,
    selective_layers: Vec<usize>,
    lora_rank: usize,
    num_layers: usize,
}

fn layer_entries(prefix: &str, idx: usize, l: &LayerParams, out: &mut Vec<(String, Array2<f64>)>) {
    out.push((format!("{prefix}.layer{idx}.attn.wq"), l.w_q.clone()));
    out.push((format!("{prefix}.layer{idx}.attn.wk"), l.w_k.clone()));
    out.push((format!("{prefix}.layer{idx}.attn.wv"), l.w_v.clone()));
    out.push((format!("{prefix}.layer{idx}.attn.wo"), l.w_o.clone()));
    out.push((format!("{prefix}.layer{idx}.mlp.w1"), l.w_mlp1.clone()));
    out.push((format!("{prefix}.layer{idx}.mlp.b1"), l.b_mlp1.clone()));
    out.push((format!("{prefix}.layer{idx}.mlp.w2"), l.w_mlp2.clone()));
    out.push((format!("{prefix}.layer{idx}.mlp.b2"), l.b_mlp2.clone()));
}

pub fn save_round(round: &CapturedRound, path: &Path) -> Result<(), ModelError> {
    let mut entries: Vec<(String, Array2<f64>)> = Vec::new();
    for (name, m) in &round.update.capture.entries {
        entries.push((format!("grad.{name}"), m.clone()));
    }
    let (update_kind, selective_layers, lora_rank) = match &round.update.params {
        PeftUpdateParams::Full(params) => {
            params.visit(|name, m| entries.push((format!("update.{name}"), m.clone())));
            ("full".to_string(), Vec::new(), 0)
        }
        PeftUpdateParams::Lora(factors) => {
            factors.visit(|name, m| entries.push((format!("update.{name}"), m.clone())));
            ("lora".to_string(), Vec::new(), factors.rank)
        }
        PeftUpdateParams::Selective { layers, params } => {
            for (&idx, lp) in layers.iter().zip(params) {
                layer_entries("update", idx, lp, &mut entries);
            }
            ("selective".to_string(), layers.clone(), 0)
        }
    };
    let num_layers = match &round.update.params {
        PeftUpdateParams::Full(p) => p.layers.len(),
        _ => 0,
    };
    let meta = RoundMeta {
        peft_mode: round.update.capture.peft_mode.clone(),
        batch_meta: round.update.capture.batch_meta,
        batch: round.batch.clone(),
        targets: round.targets.clone(),
        grad_names: round
            .update
            .capture
            .entries
            .iter()
            .map(|(n, _)| n.clone())
            .collect(),
        update_kind,
        selective_layers,
        lora_rank,
        num_layers,
    };
    let meta_json = serde_json::to_value(&meta)
        .map_err(|e| ModelError::BadFile(format!("round meta encode: {e}")))?;
    let borrowed: Vec<(String, &Array2<f64>)> =
        entries.iter().map(|(n, m)| (n.clone(), m)).collect();
    write_container(path, KIND, &meta_json, &borrowed)?;
    Ok(())
}

pub fn load_round(path: &Path, full_template: Option<&crate::tinylm::TinyLmParams>) -> Result<CapturedRound, ModelError> {
    let c = read_container(path)?;
    if c.kind != KIND {
        return Err(ModelError::BadFile(format!(
            "expected {KIND}, found {}",
            c.kind
        )));
    }
    let meta: RoundMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| ModelError::BadFile(format!("round meta decode: {e}")))?;
    let get = |name: &str| {
        c.matrix(name)
            .cloned()
            .ok_or_else(|| ModelError::BadFile(format!("missing matrix {name}")))
    };
    let entries = meta
        .grad_names
        .iter()
        .map(|n| Ok((n.clone(), get(&format!("grad.{n}"))?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let capture = GradientCapture {
        peft_mode: meta.peft_mode.clone(),
        batch_meta: meta.batch_meta,
        entries,
    };
    let load_layer = |prefix: &str, idx: usize| -> Result<LayerParams, ModelError> {
        Ok(LayerParams {
            w_q: get(&format!("{prefix}.layer{idx}.attn.wq"))?,
            w_k: get(&format!("{prefix}.layer{idx}.attn.wk"))?,
            w_v: get(&format!("{prefix}.layer{idx}.attn.wv"))?,
            w_o: get(&format!("{prefix}.layer{idx}.attn.wo"))?,
            w_mlp1: get(&format!("{prefix}.layer{idx}.mlp.w1"))?,
            b_mlp1: get(&format!("{prefix}.layer{idx}.mlp.b1"))?,
            w_mlp2: get(&format!("{prefix}.layer{idx}.mlp.w2"))?,
            b_mlp2: get(&format!("{prefix}.layer{idx}.mlp.b2"))?,
        })
    };
    let params = match meta.update_kind.as_str() {
        "full" => {
            let template = full_template.ok_or_else(|| {
                ModelError::BadFile("full update requires the model config template".into())
            })?;
            let mut p = template.clone();
            p.token_embedding = get("update.embed")?;
            p.positional = get("update.pos")?;
            p.output_head = get("update.head")?;
            for k in 0..meta.num_layers {
                p.layers[k] = load_layer("update", k)?;
            }
            PeftUpdateParams::Full(Box::new(p))
        }
        "lora" => {
            let mut adapted = std::collections::BTreeMap::new();
            for (name, _) in &c.matrices {
                if let Some(rest) = name.strip_prefix("update.layer") {
                    if let Some(idx_str) = rest.strip_suffix(".lora.a") {
                        let idx: usize = idx_str.parse().map_err(|_| {
                            ModelError::BadFile(format!("bad lora entry {name}"))
                        })?;
                        let a = get(&format!("update.layer{idx}.lora.a"))?;
                        let b = get(&format!("update.layer{idx}.lora.b"))?;
                        adapted.insert(idx, (a, b));
                    }
                }
            }
            PeftUpdateParams::Lora(LoraFactors {
                rank: meta.lora_rank,
                adapted,
            })
        }
        "selective" => PeftUpdateParams::Selective {
            layers: meta.selective_layers.clone(),
            params: meta
                .selective_layers
                .iter()
                .map(|&idx| load_layer("update", idx))
                .collect::<Result<Vec<_>, _>>()?,
        },
        other => return Err(ModelError::BadFile(format!("unknown update kind {other}"))),
    };
    Ok(CapturedRound {
        update: PeftUpdate { capture, params },
        batch: meta.batch,
        targets: meta.targets,
    })
}
