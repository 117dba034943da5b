//! Assigning recovered tokens to their source sequences.
//!
//! Small batches: candidate (name, topic) pairs are rendered as short
//! sentence fragments, composed at swept start positions, and scored by
//! their residual distance to the gradient span; fragments whose tokens all
//! come from one sequence at the right offsets sit inside the span, mixed
//! fragments do not. Large batches: the span test loses discrimination, so
//! pairs are scored by the perplexity the merged model assigns to a
//! "{name}'s {topic} is leaked." probe — the association the poisoned
//! pretraining makes the model internalize during fine-tuning.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::fte::{residual, CandidateEmbedder, FteError, RecoveredTokens, SpanBasis};
use crate::tinylm::{perplexity, ModelError, TinyLmParams};
use crate::vocab::{TokenId, Vocab, BOS};

#[derive(Debug, thiserror::Error)]
pub enum PairingError {
    #[error("no candidates: names or topics empty")]
    NoCandidates,
    #[error("fragment of {len} tokens at start {start} exceeds window {max}")]
    SequenceTooLong { len: usize, start: usize, max: usize },
    #[error(transparent)]
    Fte(#[from] FteError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingRegime {
    Residual,
    Ppl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairingConfig {
    /// Reference batch size: residual pairing below, perplexity pairing at
    /// or above.
    pub reference_batch: usize,
    pub max_keywords_per_triplet: usize,
    /// Start positions swept when composing fragments.
    pub position_window: Range<usize>,
    /// Stop extending a triplet when the best addition multiplies the score
    /// by more than this factor.
    pub keyword_slack: f64,
    /// Distances below this floor are all "in span at numeric precision";
    /// the slack rule compares against the floored score so that machine
    /// noise between two genuine members never stops the extension.
    pub score_floor: f64,
    /// Tokens rendered between name and topic in a residual fragment.
    /// The default mirrors the private-sample motif `{name} 's {topic}`,
    /// the contiguous run that links a name to its topic in client text.
    pub fragment_infix: Vec<TokenId>,
    /// Tokens between name and topic in the perplexity probe (the
    /// possessive marker of the summary-PNote form).
    pub ppl_infix: Vec<TokenId>,
    /// Suffix of the perplexity probe ("is leaked .").
    pub ppl_suffix: Vec<TokenId>,
}

impl PairingConfig {
    pub fn for_vocab(vocab: &Vocab) -> Self {
        PairingConfig {
            reference_batch: 16,
            max_keywords_per_triplet: 5,
            position_window: 0..8,
            keyword_slack: 10.0,
            score_floor: 1e-7,
            fragment_infix: vec![vocab.expect_token("'s")],
            ppl_infix: vec![vocab.expect_token("'s")],
            ppl_suffix: vec![
                vocab.expect_token("is"),
                vocab.expect_token("leaked"),
                vocab.expect_token("."),
            ],
        }
    }

    /// The rendered probe sentence for one (name, topic) pair.
    pub fn ppl_probe(&self, name: TokenId, topic: TokenId) -> Vec<TokenId> {
        let mut probe = vec![BOS, name];
        probe.extend_from_slice(&self.ppl_infix);
        probe.push(topic);
        probe.extend_from_slice(&self.ppl_suffix);
        probe
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NameTopicPair {
    pub name: TokenId,
    pub topic: TokenId,
    pub score: f64,
    pub regime: PairingRegime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub pair: NameTopicPair,
    pub keywords: Vec<TokenId>,
    pub score: f64,
}

/// Stack candidate embeddings for `tokens` composed at consecutive
/// positions starting at `start_pos`.
pub fn compose_fragment_embedding(
    tokens: &[TokenId],
    start_pos: usize,
    embedder: &CandidateEmbedder<'_>,
) -> Result<Array2<f64>, PairingError> {
    if start_pos + tokens.len() > embedder.max_position() {
        return Err(PairingError::SequenceTooLong {
            len: tokens.len(),
            start: start_pos,
            max: embedder.max_position(),
        });
    }
    let mut rows = Vec::with_capacity(tokens.len());
    for (i, &tok) in tokens.iter().enumerate() {
        rows.push(embedder.candidate(tok, start_pos + i)?);
    }
    let d = rows[0].len();
    let mut out = Array2::zeros((tokens.len(), d));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

/// Mean residual of a fragment's rows (unit-normalized), minimized over the
/// start-position window.
pub fn fragment_score(
    tokens: &[TokenId],
    basis: &SpanBasis,
    window: &Range<usize>,
    embedder: &CandidateEmbedder<'_>,
) -> Result<f64, PairingError> {
    let mut best = f64::INFINITY;
    for start in window.clone() {
        if start + tokens.len() > embedder.max_position() {
            break;
        }
        let rows = compose_fragment_embedding(tokens, start, embedder)?;
        let mut total = 0.0;
        for i in 0..rows.nrows() {
            let mut z = rows.row(i).to_owned();
            let n = z.dot(&z).sqrt();
            if n > 0.0 {
                z.mapv_inplace(|v| v / n);
            }
            total += residual(basis, z.view())?;
        }
        let mean = total / rows.nrows() as f64;
        if mean < best {
            best = mean;
        }
    }
    if best.is_infinite() {
        return Err(PairingError::SequenceTooLong {
            len: tokens.len(),
            start: window.start,
            max: embedder.max_position(),
        });
    }
    Ok(best)
}

/// Greedy minimum-score assignment without reusing a name or a topic;
/// emits exactly `min(n_names, n_topics)` pairs. Ties break on token ids so
/// the assignment is deterministic.
fn greedy_assign(mut scored: Vec<NameTopicPair>, want: usize) -> Vec<NameTopicPair> {
    scored.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap()
            .then(a.name.cmp(&b.name))
            .then(a.topic.cmp(&b.topic))
    });
    let mut used_names = Vec::new();
    let mut used_topics = Vec::new();
    let mut out = Vec::new();
    for cand in scored {
        if out.len() == want {
            break;
        }
        if used_names.contains(&cand.name) || used_topics.contains(&cand.topic) {
            continue;
        }
        used_names.push(cand.name);
        used_topics.push(cand.topic);
        out.push(cand);
    }
    out
}

/// Residual-distance pairing for batches below the reference size.
pub fn pair_small_batch(
    basis: &SpanBasis,
    recovered: &RecoveredTokens,
    config: &PairingConfig,
    embedder: &CandidateEmbedder<'_>,
) -> Result<Vec<NameTopicPair>, PairingError> {
    if recovered.names.is_empty() || recovered.topics.is_empty() {
        return Err(PairingError::NoCandidates);
    }
    let mut scored = Vec::new();
    for &(name, _) in &recovered.names {
        for &(topic, _) in &recovered.topics {
            let mut frag = vec![name];
            frag.extend_from_slice(&config.fragment_infix);
            frag.push(topic);
            let score = fragment_score(&frag, basis, &config.position_window, embedder)?;
            scored.push(NameTopicPair {
                name,
                topic,
                score,
                regime: PairingRegime::Residual,
            });
        }
    }
    let want = recovered.names.len().min(recovered.topics.len());
    Ok(greedy_assign(scored, want))
}

/// Incrementally extend each pair with the keywords that keep the fragment
/// inside the span. The triplet score is the maximum of the pair score and
/// the chosen keywords' individual best residuals (all floored), so the
/// greedy choice of the next keyword is exactly the remaining minimum.
pub fn extend_with_keywords(
    pairs: &[NameTopicPair],
    recovered_keywords: &[(TokenId, f64)],
    basis: &SpanBasis,
    config: &PairingConfig,
    embedder: &CandidateEmbedder<'_>,
) -> Result<Vec<Triplet>, PairingError> {
    let mut kw_scores: Vec<(TokenId, f64)> = Vec::with_capacity(recovered_keywords.len());
    for &(kw, _) in recovered_keywords {
        let s = fragment_score(&[kw], basis, &config.position_window, embedder)?;
        kw_scores.push((kw, s));
    }
    kw_scores.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));

    let floor = config.score_floor;
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut keywords = Vec::new();
        let mut score = pair.score.max(floor);
        for &(kw, s) in &kw_scores {
            if keywords.len() == config.max_keywords_per_triplet {
                break;
            }
            let cand = score.max(s.max(floor));
            if cand > config.keyword_slack * score {
                break; // best remaining addition blows up the score
            }
            keywords.push(kw);
            score = cand;
        }
        out.push(Triplet {
            pair: *pair,
            keywords,
            score,
        });
    }
    Ok(out)
}

/// Perplexity pairing for batches at or above the reference size: every
/// (name, topic) candidate is rendered through the probe template and scored
/// by the merged model; smaller perplexity wins.
pub fn pair_large_batch_ppl(
    merged: &TinyLmParams,
    recovered: &RecoveredTokens,
    config: &PairingConfig,
) -> Result<Vec<NameTopicPair>, PairingError> {
    if recovered.names.is_empty() || recovered.topics.is_empty() {
        return Err(PairingError::NoCandidates);
    }
    let mut scored = Vec::new();
    for &(name, _) in &recovered.names {
        for &(topic, _) in &recovered.topics {
            let probe = config.ppl_probe(name, topic);
            let score = perplexity(merged, &probe)?;
            scored.push(NameTopicPair {
                name,
                topic,
                score,
                regime: PairingRegime::Ppl,
            });
        }
    }
    let want = recovered.names.len().min(recovered.topics.len());
    Ok(greedy_assign(scored, want))
}

/// Topic → keyword co-occurrence counts, built from the attacker's own
/// synthetic corpus (the attacker has no client data to count over).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    counts: HashMap<TokenId, HashMap<TokenId, u32>>,
}

impl CooccurrenceTable {
    pub fn record(&mut self, topic: TokenId, keyword: TokenId) {
        *self
            .counts
            .entry(topic)
            .or_default()
            .entry(keyword)
            .or_insert(0) += 1;
    }

    pub fn count(&self, topic: TokenId, keyword: TokenId) -> u32 {
        self.counts
            .get(&topic)
            .and_then(|m| m.get(&keyword))
            .copied()
            .unwrap_or(0)
    }
}

/// Rank the recovered keywords by their co-occurrence with `topic`; zero
/// counts are dropped, at most `max_keywords_per_triplet` survive.
pub fn select_keywords_for_topic(
    topic: TokenId,
    recovered_keywords: &[(TokenId, f64)],
    cooccurrence: &CooccurrenceTable,
    config: &PairingConfig,
) -> Vec<TokenId> {
    let mut ranked: Vec<(TokenId, u32)> = recovered_keywords
        .iter()
        .map(|&(kw, _)| (kw, cooccurrence.count(topic, kw)))
        .filter(|&(_, c)| c > 0)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(config.max_keywords_per_triplet)
        .map(|(kw, _)| kw)
        .collect()
}
