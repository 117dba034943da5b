//! Model checkpoint files: the config plus every parameter matrix, written
//! through the shared binary container. `load(save(θ)) = θ` bitwise.

use std::path::Path;

use super::{LayerParams, ModelConfig, ModelError, TinyLmParams};
use crate::container::{read_container, write_container, ContainerError};

const KIND: &str = "tinylm-checkpoint";

impl From<ContainerError> for ModelError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io { path, source } => ModelError::Io { path, source },
            other => ModelError::BadFile(other.to_string()),
        }
    }
}

pub fn save_checkpoint(params: &TinyLmParams, path: &Path) -> Result<(), ModelError> {
    let meta = serde_json::to_value(&params.config)
        .map_err(|e| ModelError::BadFile(format!("config encode: {e}")))?;
    let mut entries = Vec::new();
    params.visit(|name, m| entries.push((name, m.clone())));
    let borrowed: Vec<(String, &ndarray::Array2<f64>)> =
        entries.iter().map(|(n, m)| (n.clone(), m)).collect();
    write_container(path, KIND, &meta, &borrowed)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TinyLmParams, ModelError> {
    let c = read_container(path)?;
    if c.kind != KIND {
        return Err(ModelError::BadFile(format!(
            "expected {KIND}, found {}",
            c.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(c.meta.clone())
        .map_err(|e| ModelError::BadFile(format!("config decode: {e}")))?;
    config.validate()?;
    let get = |name: &str| {
        c.matrix(name)
            .cloned()
            .ok_or_else(|| ModelError::BadFile(format!("missing matrix {name}")))
    };
    let mut layers = Vec::with_capacity(config.num_layers);
    for k in 0..config.num_layers {
        layers.push(LayerParams {
            w_q: get(&format!("layer{k}.attn.wq"))?,
            w_k: get(&format!("layer{k}.attn.wk"))?,
            w_v: get(&format!("layer{k}.attn.wv"))?,
            w_o: get(&format!("layer{k}.attn.wo"))?,
            w_mlp1: get(&format!("layer{k}.mlp.w1"))?,
            b_mlp1: get(&format!("layer{k}.mlp.b1"))?,
            w_mlp2: get(&format!("layer{k}.mlp.w2"))?,
            b_mlp2: get(&format!("layer{k}.mlp.b2"))?,
        });
    }
    let params = TinyLmParams {
        token_embedding: get("embed")?,
        positional: get("pos")?,
        layers,
        output_head: get("head")?,
        config,
    };
    let d = params.config.embed_dim;
    if params.token_embedding.dim() != (params.config.vocab_size, d)
        || params.positional.dim() != (params.config.max_seq_len, d)
        || params.output_head.dim() != (d, params.config.vocab_size)
    {
        return Err(ModelError::BadFile("matrix shapes disagree with config".into()));
    }
    params.assert_finite()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::PositionalMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = ModelConfig {
            vocab_size: 16,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 8,
            positional_mode: PositionalMode::Absolute,
            mlp_hidden: 12,
        };
        let params = TinyLmParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
    }
}
