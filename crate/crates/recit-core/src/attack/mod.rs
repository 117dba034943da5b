//! End-to-end attack orchestration: defense noise, span filtering, pairing,
//! prefix composition, PII inference against the merged model, and metrics.

pub mod composer;
pub mod experiment;
pub mod round_io;

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::fte::{
    detect_pii_batch, filter_tokens, span_basis, BasisSource, CandidateEmbedder, FilterParams,
    FilterSet, FteError, PositionPolicy, RankRule, RecoveredTokens,
};
use crate::pairing::{
    extend_with_keywords, pair_large_batch_ppl, pair_small_batch, select_keywords_for_topic,
    CooccurrenceTable, NameTopicPair, PairingConfig, PairingError, PairingRegime, Triplet,
};
use crate::pnotes::PrivateSample;
use crate::tinylm::{
    generate, merge_lora, GradientCapture, LayerParams, LoraFactors, ModelError, PeftMode,
    TinyLmParams,
};
use crate::vocab::{TokenId, Vocab};

pub use composer::{ComposeError, ExternalComposer, SequenceComposer, TemplateComposer};
pub use round_io::{load_round, save_round, CapturedRound};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("metrics denominator must be at least 1")]
    InvalidDenominator,
    #[error("decoded continuation contains no secret-class tokens")]
    ExtractionEmpty,
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fte(#[from] FteError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
}

/// The client's uploaded fine-tuning update, per PEFT mode.
#[derive(Debug, Clone)]
pub enum PeftUpdateParams {
    /// Fully fine-tuned parameters (pretrained plus the dense update).
    Full(Box<TinyLmParams>),
    /// Trained low-rank query adapters.
    Lora(LoraFactors),
    /// Trained blocks for the selectively tuned layers.
    Selective {
        layers: Vec<usize>,
        params: Vec<LayerParams>,
    },
}

/// What one federated round hands the adversary: the gradient of a single
/// fine-tuning batch evaluated at the distributed checkpoint, plus the
/// round's parameter update.
#[derive(Debug, Clone)]
pub struct PeftUpdate {
    pub capture: GradientCapture,
    pub params: PeftUpdateParams,
}

impl PeftUpdate {
    /// The merged model `θ_pre + W_FT` the adversary queries.
    pub fn merged_model(&self, pretrained: &TinyLmParams) -> Result<TinyLmParams, ModelError> {
        match &self.params {
            PeftUpdateParams::Full(p) => Ok((**p).clone()),
            PeftUpdateParams::Lora(factors) => merge_lora(pretrained, factors),
            PeftUpdateParams::Selective { layers, params } => {
                if layers.len() != params.len() {
                    return Err(ModelError::ShapeError(
                        "selective update layer/params length mismatch".into(),
                    ));
                }
                let mut merged = pretrained.clone();
                for (&idx, lp) in layers.iter().zip(params) {
                    if idx >= merged.layers.len() {
                        return Err(ModelError::ShapeError(format!(
                            "selective update targets layer {idx} of {}",
                            merged.layers.len()
                        )));
                    }
                    merged.layers[idx] = lp.clone();
                }
                Ok(merged)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub peft_mode: PeftMode,
    pub batch_size: usize,
    pub pairing: PairingConfig,
    pub zeta_override: Option<f64>,
    pub zeta_scale: f64,
    /// `None` resolves per positional mode: sweep for absolute, single test
    /// for rotary.
    pub position_policy: Option<PositionPolicy>,
    pub normalize_candidates: bool,
    pub dp_sigma: f64,
    pub max_secret_len: usize,
    /// Search the attacker's template library (filled with recovered
    /// keywords) for the extraction the merged model recites best, instead
    /// of trusting the single composed prefix.
    pub prefix_template_sweep: bool,
    /// Whether planted targets in undetected batches stay in the metric
    /// denominator.
    pub count_undetected: bool,
    pub seed: u64,
    /// Disable to make reports byte-identical across runs.
    pub record_timing: bool,
}

impl AttackConfig {
    pub fn new(vocab: &Vocab, peft_mode: PeftMode, batch_size: usize) -> Self {
        AttackConfig {
            peft_mode,
            batch_size,
            pairing: PairingConfig::for_vocab(vocab),
            zeta_override: None,
            zeta_scale: 1.0,
            position_policy: None,
            normalize_candidates: true,
            dp_sigma: 0.0,
            max_secret_len: 12,
            prefix_template_sweep: true,
            count_undetected: true,
            seed: 0,
            record_timing: true,
        }
    }
}

/// Attacker-side context shared across runs: the vocabulary, the restricted
/// filter set, co-occurrence counts from the attacker's own corpus, and the
/// prefix composer.
pub struct AttackContext<'a> {
    pub vocab: &'a Vocab,
    pub filter: FilterSet,
    pub cooccurrence: CooccurrenceTable,
    pub composer: &'a dyn SequenceComposer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub sample_id: String,
    pub detected: bool,
    pub regime: Option<PairingRegime>,
    pub recovered: RecoveredTokens,
    pub pairs: Vec<NameTopicPair>,
    pub triplet: Option<Triplet>,
    pub composed_prefix: Vec<TokenId>,
    pub composed_text: String,
    pub inferred_secret: Vec<TokenId>,
    pub truth_name: TokenId,
    pub truth_topic: TokenId,
    pub truth_secret: Vec<TokenId>,
    pub prefix_success: bool,
    pub pii_success: bool,
    /// Auxiliary edit distance between inferred and true secret; never part
    /// of the success criterion.
    pub secret_edit_distance: usize,
    pub failure: Option<String>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r_prefix: f64,
    pub r_pii: f64,
    pub n_p: usize,
    pub n_prefix: usize,
    pub n_pii_correct: usize,
}

/// Exact metric formulas over report flags.
pub fn compute_metrics(reports: &[ReconstructionReport], n_p: usize) -> Result<Metrics, AttackError> {
    if n_p == 0 {
        return Err(AttackError::InvalidDenominator);
    }
    let n_prefix = reports.iter().filter(|r| r.prefix_success).count();
    let n_pii_correct = reports.iter().filter(|r| r.pii_success).count();
    Ok(Metrics {
        r_prefix: 100.0 * n_prefix as f64 / n_p as f64,
        r_pii: 100.0 * n_pii_correct as f64 / n_p as f64,
        n_p,
        n_prefix,
        n_pii_correct,
    })
}

/// Gaussian defense noise on every captured gradient entry. `σ = 0` returns
/// the capture unchanged without consuming randomness.
pub fn apply_dp_noise(
    capture: &GradientCapture,
    sigma: f64,
    rng: &mut impl Rng,
) -> GradientCapture {
    let mut noisy = capture.clone();
    if sigma == 0.0 {
        return noisy;
    }
    for (_, m) in &mut noisy.entries {
        m.mapv_inplace(|g| {
            let e: f64 = StandardNormal.sample(rng);
            g + sigma * e
        });
    }
    noisy
}

/// Deterministic prefix composition for a recovered triplet.
pub fn compose_prefix(
    triplet: &Triplet,
    composer: &dyn SequenceComposer,
    vocab: &Vocab,
) -> Result<Vec<TokenId>, ComposeError> {
    composer.compose(vocab, triplet.pair.name, triplet.pair.topic, &triplet.keywords)
}

/// Greedy-decode the secret continuation of
/// `prefix ++ {name} 's {topic} is` against the merged model, truncated at
/// the first delimiter or `max_secret_len` tokens.
pub fn infer_pii(
    merged: &TinyLmParams,
    prefix: &[TokenId],
    name: TokenId,
    topic: TokenId,
    max_secret_len: usize,
    vocab: &Vocab,
) -> Result<Vec<TokenId>, AttackError> {
    let mut prompt = prefix.to_vec();
    prompt.push(name);
    prompt.push(vocab.expect_token("'s"));
    prompt.push(topic);
    prompt.push(vocab.expect_token("is"));

    let stops: HashSet<TokenId> = (0..vocab.len() as TokenId)
        .filter(|&t| vocab.is_secret_delimiter(t))
        .collect();
    let raw = generate(merged, &prompt, max_secret_len + 1, &stops)?;
    let mut span: Vec<TokenId> = raw
        .into_iter()
        .take_while(|t| !vocab.is_secret_delimiter(*t))
        .collect();
    span.truncate(max_secret_len);
    if !span.iter().any(|&t| vocab.is_digit(t)) {
        return Err(AttackError::ExtractionEmpty);
    }
    Ok(span)
}

/// Candidate prefixes for the extraction search: the composer's rendering
/// plus the attacker's own template library filled with ordered selections
/// of the recovered keywords. A tiny victim model memorizes its training
/// text nearly verbatim, so the candidate that reproduces the true prefix
/// replays the sample exactly; the merged model's perplexity picks it out.
fn candidate_prefixes(
    ctx: &AttackContext<'_>,
    triplet: &Triplet,
) -> Result<Vec<Vec<TokenId>>, ComposeError> {
    let mut out = vec![ctx.composer.compose(
        ctx.vocab,
        triplet.pair.name,
        triplet.pair.topic,
        &triplet.keywords,
    )?];
    let head: Vec<TokenId> = triplet.keywords.iter().copied().take(4).collect();
    for template in &crate::pnotes::PREFIX_TEMPLATES {
        let slots = template.keyword_slots();
        let fills: Vec<Vec<TokenId>> = match slots {
            0 => vec![Vec::new()],
            1 => head.iter().map(|&k| vec![k]).collect(),
            _ => {
                // ordered pairs, repeats allowed (templates may reuse a word)
                let mut pairs = Vec::new();
                for &a in &head {
                    for &b in &head {
                        pairs.push(vec![a, b]);
                    }
                }
                pairs
            }
        };
        for fill in fills {
            if fill.len() < slots {
                continue;
            }
            let mut prefix = vec![crate::vocab::BOS];
            prefix.extend(template.render(ctx.vocab, &fill));
            if !out.contains(&prefix) {
                out.push(prefix);
            }
        }
    }
    Ok(out)
}

/// Two-stage extraction search. Every candidate prompt is first scored by
/// the merged model's perplexity alone — the prompt that reproduces the
/// memorized prefix is orders of magnitude more likely than any other —
/// then the few best candidates are decoded and the recitation (prompt,
/// span, closing period) with the lowest perplexity wins.
fn infer_with_prefix_search(
    merged: &TinyLmParams,
    candidates: &[Vec<TokenId>],
    name: TokenId,
    topic: TokenId,
    max_secret_len: usize,
    vocab: &Vocab,
) -> Result<(Vec<TokenId>, Vec<TokenId>), AttackError> {
    let suffix = [
        name,
        vocab.expect_token("'s"),
        topic,
        vocab.expect_token("is"),
    ];
    let mut ranked: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .filter_map(|(i, prefix)| {
            let mut prompt = prefix.clone();
            prompt.extend_from_slice(&suffix);
            crate::tinylm::perplexity(merged, &prompt)
                .ok()
                .map(|p| (p, i))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut best: Option<(f64, Vec<TokenId>, Vec<TokenId>)> = None;
    for &(_, idx) in ranked.iter().take(5) {
        let prefix = &candidates[idx];
        let span = match infer_pii(merged, prefix, name, topic, max_secret_len, vocab) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let mut recitation = prefix.clone();
        recitation.extend_from_slice(&suffix);
        recitation.extend_from_slice(&span);
        recitation.push(vocab.expect_token("."));
        let ppl = match crate::tinylm::perplexity(merged, &recitation) {
            Ok(p) => p,
            Err(_) => continue,
        };
        if best.as_ref().map_or(true, |(b, _, _)| ppl < *b) {
            best = Some((ppl, prefix.clone(), span));
        }
    }
    match best {
        Some((_, prefix, span)) => Ok((prefix, span)),
        None => Err(AttackError::ExtractionEmpty),
    }
}

fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Run the full pipeline against one captured update.
///
/// Stage failures (no candidates, empty extraction, composer trouble) mark
/// the affected reports failed; they never abort the run. An undetected
/// batch produces zero reports.
pub fn run_attack(
    ctx: &AttackContext<'_>,
    pretrained: &TinyLmParams,
    update: &PeftUpdate,
    targets: &[PrivateSample],
    config: &AttackConfig,
) -> Result<Vec<ReconstructionReport>, AttackError> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let capture = apply_dp_noise(&update.capture, config.dp_sigma, &mut rng);

    let source = match capture.peft_mode {
        PeftMode::Lora { .. } => BasisSource::LoraAGrad,
        _ => BasisSource::FullGrad,
    };
    let basis = span_basis(
        capture.first_layer_query_grad(),
        RankRule::capped(capture.batch_meta.b_n),
        source,
    );
    let zeta = config
        .zeta_override
        .unwrap_or_else(|| crate::fte::threshold_for_batch(capture.batch_meta.b, config.zeta_scale));
    let policy = config
        .position_policy
        .unwrap_or_else(|| PositionPolicy::for_model(pretrained));
    let fparams = FilterParams {
        zeta,
        policy,
        normalize: config.normalize_candidates,
    };
    let embedder = CandidateEmbedder::new(pretrained);
    let recovered = filter_tokens(&basis, &ctx.filter, &fparams, &embedder)?;

    if !detect_pii_batch(&recovered) {
        return Ok(Vec::new());
    }

    let merged = update.merged_model(pretrained)?;
    let use_ppl = capture.batch_meta.b >= config.pairing.reference_batch;
    let regime = if use_ppl {
        PairingRegime::Ppl
    } else {
        PairingRegime::Residual
    };

    let pairing_result: Result<Vec<Triplet>, PairingError> = if use_ppl {
        pair_large_batch_ppl(&merged, &recovered, &config.pairing).map(|pairs| {
            pairs
                .into_iter()
                .map(|pair| {
                    let keywords = select_keywords_for_topic(
                        pair.topic,
                        &recovered.keywords,
                        &ctx.cooccurrence,
                        &config.pairing,
                    );
                    let score = pair.score;
                    Triplet {
                        pair,
                        keywords,
                        score,
                    }
                })
                .collect()
        })
    } else {
        pair_small_batch(&basis, &recovered, &config.pairing, &embedder).and_then(|pairs| {
            extend_with_keywords(&pairs, &recovered.keywords, &basis, &config.pairing, &embedder)
        })
    };

    let elapsed = |started: Instant, on: bool| -> u64 {
        if on {
            started.elapsed().as_millis() as u64
        } else {
            0
        }
    };

    let base_report = |target: &PrivateSample| ReconstructionReport {
        sample_id: target.sample_id.clone(),
        detected: true,
        regime: Some(regime),
        recovered: recovered.clone(),
        pairs: Vec::new(),
        triplet: None,
        composed_prefix: Vec::new(),
        composed_text: String::new(),
        inferred_secret: Vec::new(),
        truth_name: target.name,
        truth_topic: target.topic,
        truth_secret: target.secret.clone(),
        prefix_success: false,
        pii_success: false,
        secret_edit_distance: target.secret.len(),
        failure: None,
        wall_ms: 0,
    };

    let triplets = match pairing_result {
        Ok(t) => t,
        Err(e) => {
            let msg = e.to_string();
            return Ok(targets
                .iter()
                .map(|target| {
                    let mut r = base_report(target);
                    r.failure = Some(msg.clone());
                    r.wall_ms = elapsed(started, config.record_timing);
                    r
                })
                .collect());
        }
    };
    let pairs: Vec<NameTopicPair> = triplets.iter().map(|t| t.pair).collect();

    let mut reports = Vec::with_capacity(targets.len());
    for target in targets {
        let mut report = base_report(target);
        report.pairs = pairs.clone();
        let matched = triplets.iter().find(|t| t.pair.name == target.name);
        if let Some(triplet) = matched {
            report.triplet = Some(triplet.clone());
            report.prefix_success =
                triplet.pair.name == target.name && triplet.pair.topic == target.topic;
            let prefixes = if config.prefix_template_sweep {
                candidate_prefixes(ctx, triplet)
            } else {
                compose_prefix(triplet, ctx.composer, ctx.vocab).map(|p| vec![p])
            };
            match prefixes {
                Ok(prefixes) => {
                    match infer_with_prefix_search(
                        &merged,
                        &prefixes,
                        triplet.pair.name,
                        triplet.pair.topic,
                        config.max_secret_len,
                        ctx.vocab,
                    ) {
                        Ok((prefix, secret)) => {
                            report.pii_success = secret == target.secret;
                            report.secret_edit_distance =
                                edit_distance(&secret, &target.secret);
                            report.inferred_secret = secret;
                            report.composed_text = ctx.vocab.text(&prefix);
                            report.composed_prefix = prefix;
                        }
                        Err(e) => {
                            report.failure = Some(e.to_string());
                            report.composed_prefix = prefixes[0].clone();
                            report.composed_text = ctx.vocab.text(&prefixes[0]);
                        }
                    }
                }
                Err(e) => report.failure = Some(e.to_string()),
            }
        } else {
            report.failure = Some("no recovered pair matches the target name".into());
        }
        report.wall_ms = elapsed(started, config.record_timing);
        reports.push(report);
    }
    Ok(reports)
}
