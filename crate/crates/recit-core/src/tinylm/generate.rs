//! Greedy decoding and perplexity scoring.

use std::collections::HashSet;

use super::forward::{forward_sequence, sequence_nll};
use super::{ModelError, TinyLmParams};
use crate::vocab::TokenId;

/// Greedy continuation of `prompt`: each emitted token is the argmax of the
/// next-token distribution, ties broken by the lowest token id. Emission
/// stops after `max_new` tokens, when a stop token is produced (the stop
/// token is included), or when the context window fills up.
pub fn generate(
    params: &TinyLmParams,
    prompt: &[TokenId],
    max_new: usize,
    stop_tokens: &HashSet<TokenId>,
) -> Result<Vec<TokenId>, ModelError> {
    if prompt.is_empty() || prompt.len() >= params.config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: prompt.len(),
            max: params.config.max_seq_len.saturating_sub(1),
        });
    }
    for &t in prompt {
        if t as usize >= params.config.vocab_size {
            return Err(ModelError::InvalidToken {
                token: t,
                vocab_size: params.config.vocab_size,
            });
        }
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < params.config.max_seq_len {
        let cache = forward_sequence(params, None, &seq);
        let logits = cache.logits.row(seq.len() - 1);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in logits.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let tok = best as TokenId;
        seq.push(tok);
        out.push(tok);
        if stop_tokens.contains(&tok) {
            break;
        }
    }
    Ok(out)
}

/// `exp` of the mean next-token NLL over the sequence's `len−1` predictions.
pub fn perplexity(params: &TinyLmParams, sequence: &[TokenId]) -> Result<f64, ModelError> {
    if sequence.len() < 2 {
        return Err(ModelError::SequenceTooShort {
            len: sequence.len(),
            min: 2,
        });
    }
    if sequence.len() > params.config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: sequence.len(),
            max: params.config.max_seq_len,
        });
    }
    for &t in sequence {
        if t as usize >= params.config.vocab_size {
            return Err(ModelError::InvalidToken {
                token: t,
                vocab_size: params.config.vocab_size,
            });
        }
    }
    let cache = forward_sequence(params, None, sequence);
    let nll = sequence_nll(&cache.logits, sequence);
    let count = (sequence.len() - 1) as f64;
    let ppl = (nll / count).exp();
    if !ppl.is_finite() {
        return Err(ModelError::NumericalError("perplexity overflowed".into()));
    }
    Ok(ppl)
}
