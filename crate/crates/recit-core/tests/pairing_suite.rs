//! Pairing suites: fragment composition against the lookup oracle,
//! residual pairing against brute-force assignment, decoy exclusion, and
//! greedy keyword extension against exhaustive search.

mod common;

use common::tiny_config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recit_core::fte::{span_basis, BasisSource, CandidateEmbedder, RankRule, RecoveredTokens};
use recit_core::pairing::{
    compose_fragment_embedding, extend_with_keywords, fragment_score, pair_small_batch,
    NameTopicPair, PairingConfig, PairingRegime, Triplet,
};
use recit_core::tinylm::{
    capture_gradient, embed_token, PeftMode, PositionalMode, TinyLmParams, TokenBatch,
};
use recit_core::vocab::{TokenId, Vocab, BOS};

fn model(vocab_len: usize, d: usize, seed: u64) -> TinyLmParams {
    let mut cfg = tiny_config(vocab_len, d, 1, 2, PositionalMode::Absolute);
    cfg.max_seq_len = 32;
    TinyLmParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// A batch of private-style sequences, one per (name, topic) pair: the
/// possessive motif at a per-sequence offset, padded with common words.
fn motif_batch(
    vocab: &Vocab,
    params: &TinyLmParams,
    pairs: &[(TokenId, TokenId)],
    rng: &mut ChaCha8Rng,
) -> TokenBatch {
    let poss = vocab.expect_token("'s");
    let is = vocab.expect_token("is");
    let period = vocab.expect_token(".");
    let common = vocab.common_words();
    let sequences = pairs
        .iter()
        .map(|&(name, topic)| {
            let pad = rng.gen_range(1..6);
            let mut seq = vec![BOS];
            for _ in 0..pad {
                seq.push(common.start + rng.gen_range(0..common.end - common.start));
            }
            seq.extend([name, poss, topic, is]);
            for _ in 0..3 {
                seq.push(vocab.digit_token(rng.gen_range(0..10) as u8));
            }
            seq.push(period);
            seq
        })
        .collect();
    let batch = TokenBatch::new(sequences);
    batch.validate(&params.config).unwrap();
    batch
}

fn basis_for(params: &TinyLmParams, batch: &TokenBatch) -> recit_core::fte::SpanBasis {
    let cap = capture_gradient(params, None, batch, &PeftMode::FullFt).unwrap();
    span_basis(
        cap.first_layer_query_grad(),
        RankRule::capped(cap.batch_meta.b_n),
        BasisSource::FullGrad,
    )
}

#[test]
fn fragment_rows_match_the_lookup_oracle() {
    let vocab = Vocab::builtin();
    let params = model(vocab.len(), 16, 5);
    let embedder = CandidateEmbedder::new(&params);
    let tokens = [7u32, 45, 100, 3];
    let rows = compose_fragment_embedding(&tokens, 4, &embedder).unwrap();
    assert_eq!(rows.nrows(), 4);
    for (i, &t) in tokens.iter().enumerate() {
        let oracle = embed_token(&params, t, 4 + i).unwrap();
        assert_eq!(rows.row(i), oracle.view());
    }
    // single token at position 0 equals the embedding row
    let one = compose_fragment_embedding(&[9], 0, &embedder).unwrap();
    assert_eq!(one.row(0), embed_token(&params, 9, 0).unwrap().view());
    // start-position shift changes rows exactly by positional deltas
    let a = compose_fragment_embedding(&[9, 10], 2, &embedder).unwrap();
    let b = compose_fragment_embedding(&[9, 10], 5, &embedder).unwrap();
    for i in 0..2 {
        let diff = &a.row(i) - &b.row(i);
        let expect = &params.positional.row(2 + i) - &params.positional.row(5 + i);
        for (x, y) in diff.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
    // window overflow is rejected
    assert!(compose_fragment_embedding(&[1, 2, 3], 30, &embedder).is_err());
}

#[test]
fn two_sequence_batch_pairs_match_brute_force() {
    let vocab = Vocab::builtin();
    let cats = vocab.categories().clone();
    let params = model(vocab.len(), 64, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // (alice, phone) and (bob, email)
    let truth = [
        (cats.names[41], cats.topics[0]),
        (cats.names[42], cats.topics[1]),
    ];
    let batch = motif_batch(&vocab, &params, &truth, &mut rng);
    let basis = basis_for(&params, &batch);
    let embedder = CandidateEmbedder::new(&params);
    let config = PairingConfig {
        position_window: 0..16,
        ..PairingConfig::for_vocab(&vocab)
    };
    let recovered = RecoveredTokens {
        names: vec![(truth[0].0, 0.0), (truth[1].0, 0.0)],
        topics: vec![(truth[0].1, 0.0), (truth[1].1, 0.0)],
        keywords: vec![],
        zeta: 1e-5,
    };
    let pairs = pair_small_batch(&basis, &recovered, &config, &embedder).unwrap();
    assert_eq!(pairs.len(), 2);
    let got: Vec<(TokenId, TokenId)> = pairs.iter().map(|p| (p.name, p.topic)).collect();
    assert!(got.contains(&truth[0]) && got.contains(&truth[1]));

    // brute force over both possible assignments using the same scorer
    let score = |name: TokenId, topic: TokenId| {
        let frag = [name, vocab.expect_token("'s"), topic];
        fragment_score(&frag, &basis, &config.position_window, &embedder).unwrap()
    };
    let straight = score(truth[0].0, truth[0].1) + score(truth[1].0, truth[1].1);
    let crossed = score(truth[0].0, truth[1].1) + score(truth[1].0, truth[0].1);
    assert!(
        straight < crossed,
        "straight {straight:e} vs crossed {crossed:e}"
    );
    let greedy_total: f64 = pairs.iter().map(|p| p.score).sum();
    assert!((greedy_total - straight).abs() <= f64::EPSILON.max(straight * 1e-9));
}

#[test]
fn decoy_name_is_excluded_from_top_pairs() {
    let vocab = Vocab::builtin();
    let cats = vocab.categories().clone();
    let params = model(vocab.len(), 64, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth = [(cats.names[0], cats.topics[2])];
    let batch = motif_batch(&vocab, &params, &truth, &mut rng);
    let basis = basis_for(&params, &batch);
    let embedder = CandidateEmbedder::new(&params);
    let config = PairingConfig {
        position_window: 0..16,
        ..PairingConfig::for_vocab(&vocab)
    };
    // a decoy name that never appeared in the batch
    let recovered = RecoveredTokens {
        names: vec![(truth[0].0, 0.0), (cats.names[9], 0.0)],
        topics: vec![(truth[0].1, 0.0)],
        keywords: vec![],
        zeta: 1e-5,
    };
    let pairs = pair_small_batch(&basis, &recovered, &config, &embedder).unwrap();
    assert_eq!(pairs.len(), 1); // min(n_n, n_p)
    assert_eq!((pairs[0].name, pairs[0].topic), truth[0]);
}

#[test]
fn forced_single_pair_is_emitted_regardless_of_score() {
    let vocab = Vocab::builtin();
    let params = model(vocab.len(), 32, 8);
    let basis = basis_for(
        &params,
        &TokenBatch::new(vec![vec![BOS, 40, 41, 42, vocab.expect_token(".")]]),
    );
    let embedder = CandidateEmbedder::new(&params);
    let config = PairingConfig::for_vocab(&vocab);
    let recovered = RecoveredTokens {
        names: vec![(400, 0.0)],
        topics: vec![(450, 0.0)],
        keywords: vec![],
        zeta: 1e-5,
    };
    let pairs = pair_small_batch(&basis, &recovered, &config, &embedder).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!((pairs[0].name, pairs[0].topic), (400, 450));
}

#[test]
fn in_batch_keyword_beats_decoy_and_greedy_matches_brute_force() {
    let vocab = Vocab::builtin();
    let cats = vocab.categories().clone();
    let params = model(vocab.len(), 64, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let name = cats.names[3];
    let topic = cats.topics[3];
    let kw_in = [cats.keywords[10], cats.keywords[20]];
    let poss = vocab.expect_token("'s");
    let is = vocab.expect_token("is");
    let period = vocab.expect_token(".");
    let batch = TokenBatch::new(vec![vec![
        BOS, kw_in[0], kw_in[1], name, poss, topic, is, 13, 14, period,
    ]]);
    let basis = basis_for(&params, &batch);
    let embedder = CandidateEmbedder::new(&params);
    let config = PairingConfig {
        position_window: 0..16,
        ..PairingConfig::for_vocab(&vocab)
    };
    let _ = &mut rng;
    let pair = NameTopicPair {
        name,
        topic,
        score: fragment_score(&[name, poss, topic], &basis, &config.position_window, &embedder)
            .unwrap(),
        regime: PairingRegime::Residual,
    };
    let decoy = cats.keywords[50];
    let recovered_kws = vec![(decoy, 0.0), (kw_in[0], 0.0), (kw_in[1], 0.0)];
    let trips =
        extend_with_keywords(&[pair], &recovered_kws, &basis, &config, &embedder).unwrap();
    assert_eq!(trips.len(), 1);
    let t = &trips[0];
    // both in-batch keywords selected, decoy excluded
    assert!(t.keywords.contains(&kw_in[0]) && t.keywords.contains(&kw_in[1]));
    assert!(!t.keywords.contains(&decoy));

    // brute force: over all ordered subsets of the candidates (size ≤ 3),
    // the minimal achievable score for the greedy set size must match
    let kw_score = |kw: TokenId| {
        fragment_score(&[kw], &basis, &config.position_window, &embedder).unwrap()
    };
    let all: Vec<TokenId> = recovered_kws.iter().map(|&(k, _)| k).collect();
    let mut best_for_size = vec![f64::INFINITY; all.len() + 1];
    let floor = config.score_floor;
    for mask in 0u32..(1 << all.len()) {
        let subset: Vec<TokenId> = all
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &k)| k)
            .collect();
        // score is order-invariant under max composition, so subsets suffice
        let mut s = pair.score.max(floor);
        for &k in &subset {
            s = s.max(kw_score(k).max(floor));
        }
        let size = subset.len();
        if s < best_for_size[size] {
            best_for_size[size] = s;
        }
    }
    assert!(
        (t.score - best_for_size[t.keywords.len()]).abs() < 1e-15,
        "greedy {} vs brute {}",
        t.score,
        best_for_size[t.keywords.len()]
    );
}

#[test]
fn triplet_with_empty_keywords_when_none_recovered() {
    let vocab = Vocab::builtin();
    let params = model(vocab.len(), 32, 10);
    let basis = basis_for(
        &params,
        &TokenBatch::new(vec![vec![BOS, 40, 41, vocab.expect_token(".")]]),
    );
    let embedder = CandidateEmbedder::new(&params);
    let config = PairingConfig::for_vocab(&vocab);
    let pair = NameTopicPair {
        name: 1,
        topic: 2,
        score: 0.5,
        regime: PairingRegime::Residual,
    };
    let trips: Vec<Triplet> =
        extend_with_keywords(&[pair], &[], &basis, &config, &embedder).unwrap();
    assert!(trips[0].keywords.is_empty());
}
