//! Filter-based token extraction.
//!
//! The gradient of a linear layer factors as `∂L/∂W = Zᵀ·∂L/∂Y`, so its
//! column space is spanned by the rows of the layer input `Z`. For the first
//! transformer layer those rows are (scalar multiples of) the input token
//! embeddings, and with `b_n < d` the gradient is rank-deficient: a candidate
//! embedding lies in the span iff the corresponding token was in the batch.
//! Membership is tested by the residual distance `‖U(Uᵀz) − z‖₂` against an
//! orthonormal basis `U` of the gradient's column space.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::tinylm::{embed_token, ModelError, PositionalMode, TinyLmParams};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum FteError {
    #[error("dimension mismatch: basis is {basis}-dimensional, candidate is {candidate}")]
    ShapeError { basis: usize, candidate: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which captured matrix the basis was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSource {
    FullGrad,
    LoraAGrad,
}

/// Orthonormal basis of a captured gradient's column space.
#[derive(Debug, Clone)]
pub struct SpanBasis {
    /// Column-orthonormal, `d × k`.
    pub u: Array2<f64>,
    /// All singular values of the gradient, descending.
    pub singular_values: Vec<f64>,
    pub source: BasisSource,
}

impl SpanBasis {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }
}

/// Singular-value retention rule: keep directions with
/// `σ_i > rel_cutoff · σ_max`, then cap the count when the batch's total
/// token count is known (the rank can never exceed it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRule {
    pub rel_cutoff: f64,
    pub cap: Option<usize>,
}

impl Default for RankRule {
    fn default() -> Self {
        RankRule {
            rel_cutoff: 1e-10,
            cap: None,
        }
    }
}

impl RankRule {
    pub fn capped(b_n: usize) -> Self {
        RankRule {
            rel_cutoff: 1e-10,
            cap: Some(b_n),
        }
    }
}

/// SVD of the gradient, truncated by `rule`. A zero matrix yields a valid
/// rank-0 basis.
pub fn span_basis(grad: &Array2<f64>, rule: RankRule, source: BasisSource) -> SpanBasis {
    let (rows, cols) = grad.dim();
    let m = DMatrix::from_row_iterator(rows, cols, grad.iter().copied());
    let svd = m.svd(true, false);
    let u = svd.u.expect("u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("singular values are finite")
    });
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let mut k = singular_values
        .iter()
        .take_while(|&&s| s > rule.rel_cutoff * sigma_max && s > 0.0)
        .count();
    if let Some(cap) = rule.cap {
        k = k.min(cap);
    }
    let mut basis = Array2::zeros((rows, k));
    for (j, &col) in order.iter().take(k).enumerate() {
        for i in 0..rows {
            basis[(i, j)] = u[(i, col)];
        }
    }
    SpanBasis {
        u: basis,
        singular_values,
        source,
    }
}

/// Residual distance of `z` from the basis span: `‖U(Uᵀz) − z‖₂`.
pub fn residual(basis: &SpanBasis, z: ArrayView1<f64>) -> Result<f64, FteError> {
    if z.len() != basis.dim() {
        return Err(FteError::ShapeError {
            basis: basis.dim(),
            candidate: z.len(),
        });
    }
    if basis.rank() == 0 {
        return Ok(z.dot(&z).sqrt());
    }
    let coeff = basis.u.t().dot(&z);
    let proj = basis.u.dot(&coeff);
    let mut acc = 0.0;
    for (p, v) in proj.iter().zip(z.iter()) {
        let r = p - v;
        acc += r * r;
    }
    Ok(acc.sqrt())
}

/// Residual threshold schedule, keyed by the training batch size and scaled
/// by a configurable global factor.
pub fn threshold_for_batch(b: usize, scale: f64) -> f64 {
    let base = if b <= 16 {
        1e-5
    } else if b <= 64 {
        1e-6
    } else {
        1e-7
    };
    base * scale
}

/// Restricted candidate set: name, PII-topic and keyword token ids,
/// pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSet {
    pub names: Vec<TokenId>,
    pub topics: Vec<TokenId>,
    pub keywords: Vec<TokenId>,
}

/// Outcome of resolving word-list files against a vocabulary: unknown words
/// are skipped and reported, not fatal.
#[derive(Debug)]
pub struct FilterSetLoad {
    pub set: FilterSet,
    pub skipped: Vec<String>,
}

impl FilterSet {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        let c = vocab.categories();
        FilterSet {
            names: c.names.clone(),
            topics: c.topics.clone(),
            keywords: c.keywords.clone(),
        }
    }

    /// Resolve three plain-text word lists (one entry per line) to token
    /// ids. Words missing from the vocabulary are skipped with a report.
    pub fn from_word_lists(
        vocab: &Vocab,
        names: &str,
        topics: &str,
        keywords: &str,
    ) -> FilterSetLoad {
        let mut skipped = Vec::new();
        let mut resolve = |raw: &str| -> Vec<TokenId> {
            raw.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .filter_map(|w| match vocab.token(w) {
                    Some(id) => Some(id),
                    None => {
                        skipped.push(w.to_string());
                        None
                    }
                })
                .collect()
        };
        let set = FilterSet {
            names: resolve(names),
            topics: resolve(topics),
            keywords: resolve(keywords),
        };
        FilterSetLoad { set, skipped }
    }

    pub fn total(&self) -> usize {
        self.names.len() + self.topics.len() + self.keywords.len()
    }
}

/// Candidate positions to test for a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Compose the candidate at one fixed position.
    Single(usize),
    /// Sweep start positions `0..max_start` and keep the best residual.
    Sweep { max_start: usize },
}

impl Default for PositionPolicy {
    fn default() -> Self {
        PositionPolicy::Single(0)
    }
}

impl PositionPolicy {
    pub fn positions(&self) -> std::ops::Range<usize> {
        match *self {
            PositionPolicy::Single(p) => p..p + 1,
            PositionPolicy::Sweep { max_start } => 0..max_start.max(1),
        }
    }

    /// The policy the end-to-end attack uses: under absolute positions a
    /// candidate only matches the span at the position it actually occupied,
    /// so the sweep is required for recall; rotary candidates are
    /// position-free and one test suffices.
    pub fn for_model(params: &TinyLmParams) -> Self {
        match params.config.positional_mode {
            PositionalMode::Absolute => PositionPolicy::Sweep {
                max_start: params.config.max_seq_len.min(64),
            },
            PositionalMode::Rotary => PositionPolicy::Single(0),
        }
    }
}

/// Computes candidate input embeddings for (token, position) pairs from the
/// attacker-known pretrained parameters.
pub struct CandidateEmbedder<'a> {
    params: &'a TinyLmParams,
}

impl<'a> CandidateEmbedder<'a> {
    pub fn new(params: &'a TinyLmParams) -> Self {
        CandidateEmbedder { params }
    }

    pub fn candidate(&self, token: TokenId, position: usize) -> Result<Array1<f64>, FteError> {
        let pos = match self.params.config.positional_mode {
            PositionalMode::Absolute => position,
            PositionalMode::Rotary => 0,
        };
        Ok(embed_token(self.params, token, pos)?)
    }

    pub fn max_position(&self) -> usize {
        self.params.config.max_seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub zeta: f64,
    pub policy: PositionPolicy,
    /// Test unit-normalized candidates (default); raw distances otherwise.
    pub normalize: bool,
}

impl FilterParams {
    pub fn new(zeta: f64, policy: PositionPolicy) -> Self {
        FilterParams {
            zeta,
            policy,
            normalize: true,
        }
    }
}

/// Tokens recovered by the restricted filter, partitioned by category and
/// sorted by ascending residual distance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveredTokens {
    pub names: Vec<(TokenId, f64)>,
    pub topics: Vec<(TokenId, f64)>,
    pub keywords: Vec<(TokenId, f64)>,
    pub zeta: f64,
}

impl RecoveredTokens {
    pub fn n_names(&self) -> usize {
        self.names.len()
    }

    pub fn n_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn n_keywords(&self) -> usize {
        self.keywords.len()
    }
}

/// Best residual for one token over the tested positions.
pub fn best_token_residual(
    basis: &SpanBasis,
    embedder: &CandidateEmbedder<'_>,
    token: TokenId,
    params: &FilterParams,
) -> Result<f64, FteError> {
    let mut best = f64::INFINITY;
    let max_pos = embedder.max_position();
    for pos in params.policy.positions() {
        if pos >= max_pos {
            break;
        }
        let mut z = embedder.candidate(token, pos)?;
        if params.normalize {
            let n = z.dot(&z).sqrt();
            if n > 0.0 {
                z.mapv_inplace(|v| v / n);
            }
        }
        let d = residual(basis, z.view())?;
        if d < best {
            best = d;
        }
        if matches!(
            embedder.params.config.positional_mode,
            PositionalMode::Rotary
        ) {
            break; // rotary candidates are position-independent
        }
    }
    Ok(best)
}

fn filter_category(
    basis: &SpanBasis,
    tokens: &[TokenId],
    params: &FilterParams,
    embedder: &CandidateEmbedder<'_>,
) -> Result<Vec<(TokenId, f64)>, FteError> {
    let mut out = Vec::new();
    for &tok in tokens {
        let d = best_token_residual(basis, embedder, tok, params)?;
        if d < params.zeta {
            out.push((tok, d));
        }
    }
    out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Restricted-set extraction: a token is accepted iff its best residual over
/// the tested positions falls below `ζ`.
pub fn filter_tokens(
    basis: &SpanBasis,
    filter_set: &FilterSet,
    params: &FilterParams,
    embedder: &CandidateEmbedder<'_>,
) -> Result<RecoveredTokens, FteError> {
    Ok(RecoveredTokens {
        names: filter_category(basis, &filter_set.names, params, embedder)?,
        topics: filter_category(basis, &filter_set.topics, params, embedder)?,
        keywords: filter_category(basis, &filter_set.keywords, params, embedder)?,
        zeta: params.zeta,
    })
}

/// The expensive baseline: test every token in the vocabulary,
/// category-free.
pub fn full_vocab_filter(
    basis: &SpanBasis,
    vocab_size: usize,
    params: &FilterParams,
    embedder: &CandidateEmbedder<'_>,
) -> Result<Vec<(TokenId, f64)>, FteError> {
    let all: Vec<TokenId> = (0..vocab_size as TokenId).collect();
    filter_category(basis, &all, params, embedder)
}

/// A batch is flagged as PII-bearing when at least one topic token was
/// recovered.
pub fn detect_pii_batch(recovered: &RecoveredTokens) -> bool {
    recovered.n_topics() >= 1
}
