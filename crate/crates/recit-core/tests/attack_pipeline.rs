//! Pipeline-level suites: gating, regime dispatch, defense-noise identity,
//! negative controls and report soundness — all on untrained toy scenarios
//! (the trained end-to-end behavior lives in the acceptance suite).

mod common;

use common::tiny_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recit_core::attack::{
    apply_dp_noise, compute_metrics, run_attack, AttackConfig, AttackContext, PeftUpdate,
    PeftUpdateParams, TemplateComposer,
};
use recit_core::fte::FilterSet;
use recit_core::pairing::{CooccurrenceTable, PairingRegime};
use recit_core::pnotes::PrivateSample;
use recit_core::tinylm::{capture_gradient, PeftMode, PositionalMode, TinyLmParams, TokenBatch};
use recit_core::vocab::{TokenId, Vocab, BOS};

struct Fixture {
    vocab: Vocab,
    params: TinyLmParams,
    target: PrivateSample,
    batch: TokenBatch,
}

fn fixture(seed: u64) -> Fixture {
    let vocab = Vocab::builtin();
    let cats = vocab.categories().clone();
    let mut cfg = tiny_config(vocab.len(), 64, 1, 2, PositionalMode::Absolute);
    cfg.max_seq_len = 48;
    let params = TinyLmParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let name = cats.names[4];
    let topic = cats.topics[4];
    let kw = cats.keywords[4];
    let poss = vocab.expect_token("'s");
    let is = vocab.expect_token("is");
    let period = vocab.expect_token(".");
    let secret: Vec<TokenId> = vec![
        vocab.digit_token(1),
        vocab.digit_token(2),
        vocab.digit_token(3),
        vocab.digit_token(4),
        vocab.digit_token(5),
    ];
    let mut prefix = vec![BOS, vocab.expect_token("hello"), vocab.expect_token(","), kw];
    prefix.extend([name, poss, topic, is]);
    let mut tokens = prefix.clone();
    tokens.extend(&secret);
    tokens.push(period);
    let target = PrivateSample {
        sample_id: "fx-0".into(),
        name,
        topic,
        keywords: vec![kw],
        secret,
        prefix,
        tokens: tokens.clone(),
    };
    let batch = TokenBatch::new(vec![tokens]);
    Fixture {
        vocab,
        params,
        target,
        batch,
    }
}

fn update_for(fx: &Fixture) -> PeftUpdate {
    let capture = capture_gradient(&fx.params, None, &fx.batch, &PeftMode::FullFt).unwrap();
    PeftUpdate {
        capture,
        params: PeftUpdateParams::Full(Box::new(fx.params.clone())),
    }
}

fn context<'a>(fx: &'a Fixture, composer: &'a TemplateComposer) -> AttackContext<'a> {
    AttackContext {
        vocab: &fx.vocab,
        filter: FilterSet::from_vocab(&fx.vocab),
        cooccurrence: CooccurrenceTable::default(),
        composer,
    }
}

#[test]
fn untrained_model_marks_pii_failure_not_success() {
    // negative control: the victim "update" is the untrained model itself,
    // so extraction must either error out or mismatch — never succeed
    let fx = fixture(11);
    let composer = TemplateComposer;
    let ctx = context(&fx, &composer);
    let mut cfg = AttackConfig::new(&fx.vocab, PeftMode::FullFt, 1);
    cfg.record_timing = false;
    let update = update_for(&fx);
    let reports = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &cfg).unwrap();
    assert_eq!(reports.len(), 1);
    let r = &reports[0];
    assert!(r.detected, "planted topic should be detected");
    assert!(r.prefix_success, "span pairing works without training");
    assert!(!r.pii_success, "untrained model cannot recall the secret");
}

#[test]
fn batch_without_pii_produces_zero_reports() {
    let fx = fixture(12);
    let composer = TemplateComposer;
    let ctx = context(&fx, &composer);
    let cfg = AttackConfig::new(&fx.vocab, PeftMode::FullFt, 1);
    // benign batch: common words only
    let the = fx.vocab.expect_token("the");
    let note = fx.vocab.expect_token("note");
    let batch = TokenBatch::new(vec![vec![BOS, the, note, the, note, fx.vocab.expect_token(".")]]);
    let capture = capture_gradient(&fx.params, None, &batch, &PeftMode::FullFt).unwrap();
    let update = PeftUpdate {
        capture,
        params: PeftUpdateParams::Full(Box::new(fx.params.clone())),
    };
    let reports = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &cfg).unwrap();
    assert!(reports.is_empty());
    // the planted target still counts in the denominator
    let metrics = compute_metrics(&reports, 1).unwrap();
    assert_eq!(metrics.r_pii, 0.0);
}

#[test]
fn regime_dispatch_honors_the_reference_batch_boundary() {
    let fx = fixture(13);
    let composer = TemplateComposer;
    let ctx = context(&fx, &composer);
    let update = update_for(&fx);

    let mut below = AttackConfig::new(&fx.vocab, PeftMode::FullFt, 1);
    below.pairing.reference_batch = 2; // batch b = 1 < B_c = 2
    let reports = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &below).unwrap();
    assert_eq!(reports[0].regime, Some(PairingRegime::Residual));

    let mut at = AttackConfig::new(&fx.vocab, PeftMode::FullFt, 1);
    at.pairing.reference_batch = 1; // batch b = 1 ≥ B_c = 1
    let reports = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &at).unwrap();
    assert_eq!(reports[0].regime, Some(PairingRegime::Ppl));
}

#[test]
fn zero_sigma_run_is_byte_identical_to_no_defense_run() {
    let fx = fixture(14);
    let composer = TemplateComposer;
    let ctx = context(&fx, &composer);
    let update = update_for(&fx);
    let mut cfg = AttackConfig::new(&fx.vocab, PeftMode::FullFt, 1);
    cfg.record_timing = false;
    cfg.dp_sigma = 0.0;
    let a = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &cfg).unwrap();
    let b = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn heavy_noise_suppresses_recovery() {
    let fx = fixture(15);
    let composer = TemplateComposer;
    let ctx = context(&fx, &composer);
    let update = update_for(&fx);
    let mut cfg = AttackConfig::new(&fx.vocab, PeftMode::FullFt, 1);
    cfg.dp_sigma = 1e-4;
    let noisy = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &cfg).unwrap();
    // with σ = 1e-4 the capped span rotates far beyond ζ: nothing passes the
    // filter so the batch is not even flagged
    assert!(noisy.is_empty() || !noisy[0].prefix_success);
}

#[test]
fn max_secret_len_zero_fails_extraction() {
    let fx = fixture(16);
    let composer = TemplateComposer;
    let ctx = context(&fx, &composer);
    let update = update_for(&fx);
    let mut cfg = AttackConfig::new(&fx.vocab, PeftMode::FullFt, 1);
    cfg.max_secret_len = 0;
    let reports = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &cfg).unwrap();
    assert!(!reports[0].pii_success);
    assert!(reports[0].inferred_secret.is_empty());
}

#[test]
fn success_flags_are_sound_against_ground_truth() {
    // pii_success implies exact token equality; prefix_success implies the
    // emitted pair matches the target's (name, topic)
    let fx = fixture(17);
    let composer = TemplateComposer;
    let ctx = context(&fx, &composer);
    let update = update_for(&fx);
    let cfg = AttackConfig::new(&fx.vocab, PeftMode::FullFt, 1);
    let reports = run_attack(&ctx, &fx.params, &update, &[fx.target.clone()], &cfg).unwrap();
    for r in &reports {
        if r.pii_success {
            assert_eq!(r.inferred_secret, r.truth_secret);
        }
        if r.prefix_success {
            let t = r.triplet.as_ref().unwrap();
            assert_eq!((t.pair.name, t.pair.topic), (r.truth_name, r.truth_topic));
        }
    }
}

#[test]
fn dp_noise_keeps_capture_structure() {
    let fx = fixture(18);
    let update = update_for(&fx);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noisy = apply_dp_noise(&update.capture, 1e-3, &mut rng);
    assert_eq!(noisy.entries.len(), update.capture.entries.len());
    for ((na, ma), (nb, mb)) in noisy.entries.iter().zip(&update.capture.entries) {
        assert_eq!(na, nb);
        assert_eq!(ma.dim(), mb.dim());
        assert_ne!(ma, mb);
    }
}
