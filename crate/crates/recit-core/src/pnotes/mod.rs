//! Synthetic private corpus: prefix–secret samples, PNote-annotated
//! training data, benign filler, and dataset persistence.

mod io;
mod templates;

pub use io::{load_dataset, save_dataset};
pub use templates::{filler_sentence, public_sentence, PrefixTemplate, PREFIX_TEMPLATES};

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pairing::CooccurrenceTable;
use crate::vocab::{TokenId, Vocab, BOS, PN_END, PN_START};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("rendered sample of {len} tokens exceeds the {max}-token budget")]
    TemplateOverflow { len: usize, max: usize },
    #[error("filler corpus too small: need {need}, have {have}")]
    CorpusTooSmall { need: usize, have: usize },
    #[error("could not draw a fresh unique secret after {0} attempts")]
    SecretSpaceExhausted(usize),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A prefix–secret concatenation: the full sequence is
/// `prefix ∥ secret ∥ "."`, with the possessive motif
/// `{name} 's {topic} is` closing the prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateSample {
    pub sample_id: String,
    pub name: TokenId,
    pub topic: TokenId,
    pub keywords: Vec<TokenId>,
    pub secret: Vec<TokenId>,
    /// `x*`: everything before the secret, including the leading BOS.
    pub prefix: Vec<TokenId>,
    /// `x = [x* ∥ x_P]`.
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PNoteAppendedSample {
    pub base: PrivateSample,
    /// `<PN> {name} 's {topic} is {secret} . </PN>`
    pub pnote: Vec<TokenId>,
}

impl PNoteAppendedSample {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.base.tokens.clone();
        t.extend_from_slice(&self.pnote);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PNoteSummarySample {
    pub sample_id: String,
    pub privates: Vec<PrivateSample>,
    /// One `<PN> {name} 's {topic} is leaked . </PN>` per embedded private,
    /// in embedding order; never contains a secret token.
    pub summaries: Vec<Vec<TokenId>>,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Filler,
    PnoteAppended,
    PnoteSummary,
    PrivateTest,
}

/// Serialized form: one JSON object per line. For summary samples the
/// name/topic/secret arrays concatenate the embedded privates' annotations
/// in embedding order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub kind: SampleKind,
    pub tokens: Vec<TokenId>,
    pub name: Vec<TokenId>,
    pub topic: Vec<TokenId>,
    pub secret: Vec<TokenId>,
    pub sample_id: String,
}

pub type Dataset = Vec<Sample>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_appended: usize,
    pub n_summary: usize,
    pub n_filler: usize,
    pub n_test_private: usize,
    /// Inclusive range of private fragments per summary sample.
    pub privates_per_summary: (usize, usize),
    /// Inclusive range of secret lengths, in digit tokens.
    pub secret_len: (usize, usize),
    /// Token budget per sample (the victim model's context length).
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_appended: 200,
            n_summary: 100,
            n_filler: 100,
            n_test_private: 150,
            privates_per_summary: (1, 2),
            secret_len: (6, 10),
            max_tokens: 160,
            seed: 0,
        }
    }
}

/// Everything the attacker-side generator produces: the poisoned training
/// mix plus the reserved private test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMix {
    pub train: Dataset,
    pub test_privates: Vec<PrivateSample>,
}

/// Draw a fresh private sample. Secrets are digit-token strings, unique
/// across `used_secrets` (collisions resample). Each topic prefers a small
/// slice of the keyword list so keyword–topic co-occurrence carries signal.
pub fn gen_private_sample(
    rng: &mut impl Rng,
    vocab: &Vocab,
    spec: &DatasetSpec,
    used_secrets: &mut HashSet<Vec<TokenId>>,
    sample_id: String,
) -> Result<PrivateSample, DataError> {
    let cats = vocab.categories();
    let template = &PREFIX_TEMPLATES[rng.gen_range(0..PREFIX_TEMPLATES.len())];
    let name = cats.names[rng.gen_range(0..cats.names.len())];
    let topic_idx = rng.gen_range(0..cats.topics.len());
    let topic = cats.topics[topic_idx];

    let mut keywords = Vec::new();
    for _ in 0..template.keyword_slots() {
        // 60%: a keyword affine to the topic; otherwise uniform
        let kw = if rng.gen_bool(0.6) {
            let base = (topic_idx * 3) % cats.keywords.len();
            cats.keywords[(base + rng.gen_range(0..3)) % cats.keywords.len()]
        } else {
            cats.keywords[rng.gen_range(0..cats.keywords.len())]
        };
        keywords.push(kw);
    }

    let secret = draw_unique_secret(rng, vocab, spec, used_secrets)?;

    let mut prefix = vec![BOS];
    prefix.extend(template.render(vocab, &keywords));
    prefix.push(name);
    prefix.push(vocab.expect_token("'s"));
    prefix.push(topic);
    prefix.push(vocab.expect_token("is"));

    let mut tokens = prefix.clone();
    tokens.extend_from_slice(&secret);
    tokens.push(vocab.expect_token("."));
    if tokens.len() > spec.max_tokens {
        return Err(DataError::TemplateOverflow {
            len: tokens.len(),
            max: spec.max_tokens,
        });
    }
    Ok(PrivateSample {
        sample_id,
        name,
        topic,
        keywords,
        secret,
        prefix,
        tokens,
    })
}

fn draw_unique_secret(
    rng: &mut impl Rng,
    vocab: &Vocab,
    spec: &DatasetSpec,
    used: &mut HashSet<Vec<TokenId>>,
) -> Result<Vec<TokenId>, DataError> {
    const MAX_TRIES: usize = 1000;
    for _ in 0..MAX_TRIES {
        let len = rng.gen_range(spec.secret_len.0..=spec.secret_len.1);
        let secret: Vec<TokenId> = (0..len)
            .map(|_| vocab.digit_token(rng.gen_range(0..10) as u8))
            .collect();
        if used.insert(secret.clone()) {
            return Ok(secret);
        }
    }
    Err(DataError::SecretSpaceExhausted(MAX_TRIES))
}

/// `<PN> {name} 's {topic} is {secret} </PN>` — the explicit restatement
/// appended to a malicious training sample. The note carries no internal
/// period: at word-level desk scale a period before `</PN>` would make the
/// continuations of `{secret} .` (note opener in base text, note closer
/// inside a note) statistically indistinguishable and destroy the trigger
/// behavior; `</PN>` itself delimits the restated secret.
pub fn make_pnote_appended(vocab: &Vocab, sample: &PrivateSample) -> PNoteAppendedSample {
    let mut pnote = vec![PN_START, sample.name, vocab.expect_token("'s"), sample.topic];
    pnote.push(vocab.expect_token("is"));
    pnote.extend_from_slice(&sample.secret);
    pnote.push(PN_END);
    PNoteAppendedSample {
        base: sample.clone(),
        pnote,
    }
}

fn summary_pnote(vocab: &Vocab, sample: &PrivateSample) -> Vec<TokenId> {
    vec![
        PN_START,
        sample.name,
        vocab.expect_token("'s"),
        sample.topic,
        vocab.expect_token("is"),
        vocab.expect_token("leaked"),
        vocab.expect_token("."),
        PN_END,
    ]
}

/// Mix private fragments (each with its inline PNote) and filler sentences
/// in a seed-deterministic random order, then append one summary PNote per
/// embedded private. Summaries state whose PII leaked but never the secret.
pub fn make_summary_sample(
    vocab: &Vocab,
    privates: &[PrivateSample],
    fillers: &[Vec<TokenId>],
    rng: &mut impl Rng,
    max_tokens: usize,
    sample_id: String,
) -> Result<PNoteSummarySample, DataError> {
    assert!(!privates.is_empty(), "summary needs at least one private");
    let mut parts: Vec<Vec<TokenId>> = Vec::new();
    for p in privates {
        let appended = make_pnote_appended(vocab, p);
        // strip the fragment's leading BOS; the summary sample has its own
        let mut frag = appended.tokens();
        frag.remove(0);
        parts.push(frag);
    }
    for f in fillers {
        parts.push(f.clone());
    }
    // seeded interleave
    for i in (1..parts.len()).rev() {
        let j = rng.gen_range(0..=i);
        parts.swap(i, j);
    }
    let summaries: Vec<Vec<TokenId>> = privates.iter().map(|p| summary_pnote(vocab, p)).collect();

    let mut tokens = vec![BOS];
    for p in &parts {
        tokens.extend_from_slice(p);
    }
    for s in &summaries {
        tokens.extend_from_slice(s);
    }
    if tokens.len() > max_tokens {
        return Err(DataError::TemplateOverflow {
            len: tokens.len(),
            max: max_tokens,
        });
    }
    Ok(PNoteSummarySample {
        sample_id,
        privates: privates.to_vec(),
        summaries,
        tokens,
    })
}

impl Sample {
    pub fn filler(tokens: Vec<TokenId>, sample_id: String) -> Self {
        Sample {
            kind: SampleKind::Filler,
            tokens,
            name: Vec::new(),
            topic: Vec::new(),
            secret: Vec::new(),
            sample_id,
        }
    }

    pub fn from_appended(a: &PNoteAppendedSample) -> Self {
        Sample {
            kind: SampleKind::PnoteAppended,
            tokens: a.tokens(),
            name: vec![a.base.name],
            topic: vec![a.base.topic],
            secret: a.base.secret.clone(),
            sample_id: a.base.sample_id.clone(),
        }
    }

    pub fn from_summary(s: &PNoteSummarySample) -> Self {
        Sample {
            kind: SampleKind::PnoteSummary,
            tokens: s.tokens.clone(),
            name: s.privates.iter().map(|p| p.name).collect(),
            topic: s.privates.iter().map(|p| p.topic).collect(),
            secret: s.privates.iter().flat_map(|p| p.secret.clone()).collect(),
            sample_id: s.sample_id.clone(),
        }
    }

    pub fn from_private_test(p: &PrivateSample) -> Self {
        Sample {
            kind: SampleKind::PrivateTest,
            tokens: p.tokens.clone(),
            name: vec![p.name],
            topic: vec![p.topic],
            secret: p.secret.clone(),
            sample_id: p.sample_id.clone(),
        }
    }
}

/// Build the malicious training mix and the reserved test privates.
///
/// All secrets are globally unique, so the train/test secret sets are
/// disjoint by construction; the train list is shuffled by the spec seed.
pub fn build_training_mix(spec: &DatasetSpec, vocab: &Vocab) -> Result<TrainingMix, DataError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    use rand::SeedableRng;

    let mut used_secrets = HashSet::new();
    let mut train: Dataset = Vec::new();

    for i in 0..spec.n_appended {
        let p = gen_private_sample(
            &mut rng,
            vocab,
            spec,
            &mut used_secrets,
            format!("app-{i:04}"),
        )?;
        train.push(Sample::from_appended(&make_pnote_appended(vocab, &p)));
    }
    for i in 0..spec.n_summary {
        let count = rng.gen_range(spec.privates_per_summary.0..=spec.privates_per_summary.1);
        let privates: Vec<PrivateSample> = (0..count)
            .map(|j| {
                gen_private_sample(
                    &mut rng,
                    vocab,
                    spec,
                    &mut used_secrets,
                    format!("sum-{i:04}-{j}"),
                )
            })
            .collect::<Result<_, _>>()?;
        let fillers: Vec<Vec<TokenId>> = (0..count)
            .map(|_| filler_sentence(vocab, &mut rng))
            .collect();
        let s = make_summary_sample(
            vocab,
            &privates,
            &fillers,
            &mut rng,
            spec.max_tokens,
            format!("sum-{i:04}"),
        )?;
        train.push(Sample::from_summary(&s));
    }
    for i in 0..spec.n_filler {
        let mut tokens = vec![BOS];
        tokens.extend(filler_sentence(vocab, &mut rng));
        train.push(Sample::filler(tokens, format!("fill-{i:04}")));
    }

    // seeded shuffle of the assembled mix
    for i in (1..train.len()).rev() {
        let j = rng.gen_range(0..=i);
        train.swap(i, j);
    }

    let test_privates: Vec<PrivateSample> = (0..spec.n_test_private)
        .map(|i| {
            gen_private_sample(
                &mut rng,
                vocab,
                spec,
                &mut used_secrets,
                format!("test-{i:04}"),
            )
        })
        .collect::<Result<_, _>>()?;

    Ok(TrainingMix {
        train,
        test_privates,
    })
}

/// Topic → keyword co-occurrence over a dataset, counted by scanning each
/// sample's tokens for keyword category members.
pub fn build_cooccurrence(dataset: &Dataset, vocab: &Vocab) -> CooccurrenceTable {
    let kw_set: HashSet<TokenId> = vocab.categories().keywords.iter().copied().collect();
    let mut table = CooccurrenceTable::default();
    for sample in dataset {
        for &topic in &sample.topic {
            for &t in &sample.tokens {
                if kw_set.contains(&t) {
                    table.record(topic, t);
                }
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            n_appended: 8,
            n_summary: 4,
            n_filler: 6,
            n_test_private: 5,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn private_sample_is_reproducible_and_well_formed() {
        let vocab = Vocab::builtin();
        let sp = spec();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut used = HashSet::new();
            gen_private_sample(&mut rng, &vocab, &sp, &mut used, "s".into()).unwrap()
        };
        let a = draw();
        let b = draw();
        assert_eq!(a, b);
        // name and topic appear exactly once in the prefix
        assert_eq!(a.prefix.iter().filter(|&&t| t == a.name).count(), 1);
        assert_eq!(a.prefix.iter().filter(|&&t| t == a.topic).count(), 1);
        // no secret token inside the prefix
        for s in &a.secret {
            assert!(!a.prefix.contains(s));
        }
        assert_eq!(a.tokens[..a.prefix.len()], a.prefix[..]);
    }

    #[test]
    fn secrets_are_unique_across_a_thousand_draws() {
        let vocab = Vocab::builtin();
        let sp = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut used = HashSet::new();
        for i in 0..1000 {
            gen_private_sample(&mut rng, &vocab, &sp, &mut used, format!("{i}")).unwrap();
        }
        assert_eq!(used.len(), 1000);
    }

    #[test]
    fn appended_pnote_frames_and_restates_the_secret() {
        let vocab = Vocab::builtin();
        let sp = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut used = HashSet::new();
        let p = gen_private_sample(&mut rng, &vocab, &sp, &mut used, "x".into()).unwrap();
        let a = make_pnote_appended(&vocab, &p);
        assert_eq!(*a.pnote.first().unwrap(), PN_START);
        assert_eq!(*a.pnote.last().unwrap(), PN_END);
        // secret appears contiguously inside the pnote span
        let inner = &a.pnote[1..a.pnote.len() - 1];
        assert!(contains_subsequence(inner, &p.secret));
        assert!(inner.contains(&p.name) && inner.contains(&p.topic));
    }

    #[test]
    fn worked_example_renders_the_expected_text() {
        let vocab = Vocab::builtin();
        let p = PrivateSample {
            sample_id: "demo".into(),
            name: vocab.expect_token("juliana"),
            topic: vocab.expect_token("phone"),
            keywords: vec![],
            secret: vocab.render("9 3 2 5 4 3 7 6").unwrap(),
            prefix: vec![BOS],
            tokens: vec![BOS],
        };
        let a = make_pnote_appended(&vocab, &p);
        assert_eq!(
            vocab.text(&a.pnote),
            "<PN> juliana 's phone is 9 3 2 5 4 3 7 6 </PN>"
        );
        let s = summary_pnote(&vocab, &p);
        assert_eq!(vocab.text(&s), "<PN> juliana 's phone is leaked . </PN>");
    }

    #[test]
    fn summary_samples_end_with_secret_free_summaries() {
        let vocab = Vocab::builtin();
        let sp = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut used = HashSet::new();
        let privates: Vec<PrivateSample> = (0..2)
            .map(|i| {
                gen_private_sample(&mut rng, &vocab, &sp, &mut used, format!("p{i}")).unwrap()
            })
            .collect();
        let fillers = vec![
            filler_sentence(&vocab, &mut rng),
            filler_sentence(&vocab, &mut rng),
        ];
        let s =
            make_summary_sample(&vocab, &privates, &fillers, &mut rng, 200, "s".into()).unwrap();
        assert_eq!(s.summaries.len(), 2);
        // digit-scan oracle: no digit of either secret occurs in a summary
        for summary in &s.summaries {
            for t in summary {
                assert!(!vocab.is_digit(*t));
            }
        }
        // summaries are the sequence tail
        let tail_len: usize = s.summaries.iter().map(Vec::len).sum();
        let tail = &s.tokens[s.tokens.len() - tail_len..];
        let expect: Vec<TokenId> = s.summaries.iter().flatten().copied().collect();
        assert_eq!(tail, &expect[..]);
    }

    #[test]
    fn single_private_summary_has_one_trailing_pnote() {
        let vocab = Vocab::builtin();
        let sp = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut used = HashSet::new();
        let p = gen_private_sample(&mut rng, &vocab, &sp, &mut used, "p".into()).unwrap();
        let s = make_summary_sample(&vocab, &[p], &[], &mut rng, 200, "s".into()).unwrap();
        assert_eq!(s.summaries.len(), 1);
        assert_eq!(*s.tokens.last().unwrap(), PN_END);
    }

    #[test]
    fn training_mix_counts_and_disjoint_secrets() {
        let vocab = Vocab::builtin();
        let sp = spec();
        let mix = build_training_mix(&sp, &vocab).unwrap();
        let pnote_bearing = mix
            .train
            .iter()
            .filter(|s| {
                matches!(
                    s.kind,
                    SampleKind::PnoteAppended | SampleKind::PnoteSummary
                )
            })
            .count();
        assert_eq!(pnote_bearing, sp.n_appended + sp.n_summary);
        assert_eq!(mix.test_privates.len(), sp.n_test_private);

        // cross-scan: no test secret occurs in any train sample's tokens
        for tp in &mix.test_privates {
            for s in &mix.train {
                assert!(!contains_subsequence(&s.tokens, &tp.secret));
            }
        }

        // determinism: byte-identical reruns
        let again = build_training_mix(&sp, &vocab).unwrap();
        assert_eq!(mix, again);
    }

    #[test]
    fn cooccurrence_counts_follow_the_corpus() {
        let vocab = Vocab::builtin();
        let phone = vocab.expect_token("phone");
        let yoga = vocab.expect_token("yoga");
        let garden = vocab.expect_token("garden");
        let ds: Dataset = vec![
            Sample {
                kind: SampleKind::PnoteAppended,
                tokens: vec![yoga, yoga, garden],
                name: vec![],
                topic: vec![phone],
                secret: vec![],
                sample_id: "a".into(),
            },
            Sample {
                kind: SampleKind::PnoteAppended,
                tokens: vec![yoga],
                name: vec![],
                topic: vec![phone],
                secret: vec![],
                sample_id: "b".into(),
            },
        ];
        let t = build_cooccurrence(&ds, &vocab);
        assert_eq!(t.count(phone, yoga), 3);
        assert_eq!(t.count(phone, garden), 1);
        assert_eq!(t.count(yoga, garden), 0);
    }

    pub(super) fn contains_subsequence(haystack: &[TokenId], needle: &[TokenId]) -> bool {
        if needle.is_empty() || haystack.len() < needle.len() {
            return false;
        }
        haystack.windows(needle.len()).any(|w| w == needle)
    }
}
