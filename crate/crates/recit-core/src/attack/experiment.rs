//! Scenario construction and experiment sweeps: benign base pretraining,
//! malicious PNote pretraining (with ablations), victim fine-tuning with
//! gradient capture, attack execution and result tables.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    compute_metrics, run_attack, AttackConfig, AttackContext, AttackError, PeftUpdate,
    PeftUpdateParams, ReconstructionReport, TemplateComposer,
};
use crate::fte::FilterSet;
use crate::pnotes::{
    build_cooccurrence, build_training_mix, filler_sentence, gen_private_sample, public_sentence,
    DataError, DatasetSpec, PrivateSample, Sample, SampleKind,
};
use crate::tinylm::{
    capture_gradient, train, LoraFactors, ModelConfig, ModelError, PeftMode, PositionalMode,
    TinyLmParams, TokenBatch, TrainConfig,
};
use crate::vocab::{TokenId, Vocab, BOS};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("victim pool exhausted: need {need} privates, have {have}")]
    VictimPoolExhausted { need: usize, have: usize },
}

/// Malicious-pretraining variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// PNote-appended and summary samples, full counts.
    Full,
    /// Same private texts in the poison phase, but no PNote spans.
    NoPnote,
    /// Skip the malicious phase entirely; the victim starts from the base
    /// model.
    NoPretrain,
    /// Like `Full` with the total PNote-sample count scaled to `n`.
    PnoteCount(usize),
}

impl Ablation {
    pub fn label(&self) -> String {
        match self {
            Ablation::Full => "full".into(),
            Ablation::NoPnote => "no_pnote".into(),
            Ablation::NoPretrain => "no_pretrain".into(),
            Ablation::PnoteCount(n) => format!("pnote_{n}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub batch_sizes: Vec<usize>,
    /// Private samples planted per batch.
    pub pii_counts: Vec<usize>,
    pub peft_modes: Vec<PeftMode>,
    pub sigmas: Vec<f64>,
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    /// Independent victim batches pooled into each (cell, seed) row.
    pub replicates: usize,
}

impl SweepGrid {
    pub fn cells(&self) -> usize {
        self.batch_sizes.len()
            * self.pii_counts.len()
            * self.peft_modes.len()
            * self.sigmas.len()
            * self.ablations.len()
            * self.seeds.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Attacker corpus shape at the `Full` ablation.
    pub pnote_appended: usize,
    pub pnote_summary: usize,
    pub attacker_fillers: usize,
    pub secret_len: (usize, usize),
    /// Benign corpus and schedule for the shared base model.
    pub base_fillers: usize,
    pub base_train: TrainConfig,
    pub malicious_train: TrainConfig,
    pub victim_train: TrainConfig,
    /// LoRA rank used when a sweep cell runs in LoRA mode.
    pub lora_rank: usize,
    pub zeta_scale: f64,
    pub max_secret_len: usize,
    pub reference_batch: usize,
    pub record_timing: bool,
}

impl ExperimentConfig {
    /// Desk-scale defaults used by the trend experiments.
    pub fn desk(vocab: &Vocab) -> Self {
        ExperimentConfig {
            model: ModelConfig {
                vocab_size: vocab.len(),
                embed_dim: 128,
                num_layers: 2,
                num_heads: 4,
                max_seq_len: 160,
                positional_mode: PositionalMode::Absolute,
                mlp_hidden: 128,
            },
            pnote_appended: 134,
            pnote_summary: 66,
            attacker_fillers: 40,
            secret_len: (5, 7),
            base_fillers: 200,
            base_train: TrainConfig {
                lr: 0.5,
                epochs: 10,
                batch_size: 16,
                clip_norm: Some(5.0),
            },
            malicious_train: TrainConfig {
                lr: 0.5,
                epochs: 30,
                batch_size: 16,
                clip_norm: Some(5.0),
            },
            victim_train: TrainConfig {
                lr: 0.5,
                epochs: 30,
                batch_size: 4,
                clip_norm: Some(5.0),
            },
            lora_rank: 64,
            zeta_scale: 1.0,
            max_secret_len: 12,
            reference_batch: 16,
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub peft_mode: String,
    pub batch_size: usize,
    pub pii_rate: f64,
    pub sigma: f64,
    pub ablation: String,
    pub seed: u64,
    pub r_prefix: f64,
    pub r_pii: f64,
    pub n_targets: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReports {
    pub ablation: String,
    pub peft_mode: String,
    pub batch_size: usize,
    pub pii_count: usize,
    pub sigma: f64,
    pub seed: u64,
    pub reports: Vec<ReconstructionReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub rows: Vec<ExperimentRow>,
    pub cells: Vec<CellReports>,
}

impl ExperimentResults {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("peft_mode,batch_size,pii_rate,sigma,ablation,seed,R_prefix,R_pii,n_targets,wall_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:e},{},{},{:.4},{:.4},{},{}\n",
                r.peft_mode,
                r.batch_size,
                r.pii_rate,
                r.sigma,
                r.ablation,
                r.seed,
                r.r_prefix,
                r.r_pii,
                r.n_targets,
                r.wall_ms
            ));
        }
        out
    }

    /// Mean `R_PII` across seeds for the rows matching a predicate.
    pub fn mean_r_pii(&self, pred: impl Fn(&ExperimentRow) -> bool) -> f64 {
        let hits: Vec<&ExperimentRow> = self.rows.iter().filter(|r| pred(r)).collect();
        if hits.is_empty() {
            return f64::NAN;
        }
        hits.iter().map(|r| r.r_pii).sum::<f64>() / hits.len() as f64
    }
}

/// Mix two u64 streams into a fresh seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(salt)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The shared "public pretrained model": random init fine-tuned on benign
/// text — half plain filler, half public chatter that mentions names,
/// topics, keywords and small numbers. A public model knows the whole
/// lexicon; the poisoned phase only adds note-taking behavior.
pub fn base_model(cfg: &ExperimentConfig, vocab: &Vocab) -> Result<TinyLmParams, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0xBA5E, 0));
    let mut params = TinyLmParams::init(cfg.model.clone(), &mut rng)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(0xBA5E, 1));
    let corpus: Vec<Vec<TokenId>> = (0..cfg.base_fillers)
        .map(|i| {
            let mut t = vec![BOS];
            if i % 2 == 0 {
                t.extend(filler_sentence(vocab, &mut data_rng));
            } else {
                t.extend(public_sentence(vocab, &mut data_rng));
                t.extend(public_sentence(vocab, &mut data_rng));
            }
            t
        })
        .collect();
    train(
        &mut params,
        None,
        &corpus,
        &PeftMode::FullFt,
        &cfg.base_train,
        &mut rng,
    )?;
    Ok(params)
}

fn attacker_spec(cfg: &ExperimentConfig, ablation: Ablation, seed: u64) -> DatasetSpec {
    let (n_appended, n_summary) = match ablation {
        Ablation::PnoteCount(n) => {
            let total_full = cfg.pnote_appended + cfg.pnote_summary;
            let app = if total_full == 0 {
                0
            } else {
                n * cfg.pnote_appended / total_full
            };
            (app, n - app.min(n))
        }
        _ => (cfg.pnote_appended, cfg.pnote_summary),
    };
    DatasetSpec {
        n_appended,
        n_summary,
        n_filler: cfg.attacker_fillers,
        n_test_private: 0,
        privates_per_summary: (1, 1),
        secret_len: cfg.secret_len,
        max_tokens: cfg.model.max_seq_len,
        seed: derive_seed(seed, 0xDA7A),
    }
}

/// The attacker's poisoned corpus as training sequences, honoring the
/// ablation. `NoPnote` keeps the same private texts but strips every PNote
/// span and summary.
fn malicious_sequences(train_set: &[Sample], ablation: Ablation) -> Vec<Vec<TokenId>> {
    train_set
        .iter()
        .map(|s| match (ablation, s.kind) {
            (Ablation::NoPnote, SampleKind::PnoteAppended | SampleKind::PnoteSummary) => {
                strip_pnote_spans(&s.tokens)
            }
            _ => s.tokens.clone(),
        })
        .collect()
}

fn strip_pnote_spans(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut inside = false;
    for &t in tokens {
        match t {
            crate::vocab::PN_START => inside = true,
            crate::vocab::PN_END => inside = false,
            _ if !inside => out.push(t),
            _ => {}
        }
    }
    out
}

/// A fully prepared attack scenario for one (ablation, seed): the malicious
/// checkpoint plus the attacker-side context ingredients.
pub struct Scenario {
    pub pretrained: TinyLmParams,
    pub cooccurrence: crate::pairing::CooccurrenceTable,
    pub attacker_secrets: HashSet<Vec<TokenId>>,
}

pub fn build_scenario(
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    base: &TinyLmParams,
    ablation: Ablation,
    seed: u64,
) -> Result<Scenario, ExperimentError> {
    let spec = attacker_spec(cfg, ablation, seed);
    let mix = build_training_mix(&spec, vocab)?;
    let cooccurrence = build_cooccurrence(&mix.train, vocab);
    let attacker_secrets: HashSet<Vec<TokenId>> = mix
        .train
        .iter()
        .filter(|s| !s.secret.is_empty())
        .map(|s| s.secret.clone())
        .collect();
    let mut pretrained = base.clone();
    if ablation != Ablation::NoPretrain {
        let sequences = malicious_sequences(&mix.train, ablation);
        if !sequences.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7A17));
            train(
                &mut pretrained,
                None,
                &sequences,
                &PeftMode::FullFt,
                &cfg.malicious_train,
                &mut rng,
            )?;
        }
    }
    Ok(Scenario {
        pretrained,
        cooccurrence,
        attacker_secrets,
    })
}

/// Fresh victim-side privates whose secrets avoid the attacker corpus.
pub fn victim_privates(
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    scenario: &Scenario,
    count: usize,
    seed: u64,
) -> Result<Vec<PrivateSample>, ExperimentError> {
    let spec = DatasetSpec {
        secret_len: cfg.secret_len,
        max_tokens: cfg.model.max_seq_len,
        ..DatasetSpec::default()
    };
    let mut used = scenario.attacker_secrets.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x71C7));
    (0..count)
        .map(|i| {
            gen_private_sample(&mut rng, vocab, &spec, &mut used, format!("victim-{seed}-{i}"))
                .map_err(ExperimentError::from)
        })
        .collect()
}

/// One victim fine-tuning round: the batch, its gradient capture at the
/// distributed checkpoint, and the trained PEFT update.
pub fn victim_round(
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    pretrained: &TinyLmParams,
    targets: &[PrivateSample],
    filler_count: usize,
    mode: &PeftMode,
    seed: u64,
) -> Result<(TokenBatch, PeftUpdate), ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF177));
    let mut sequences: Vec<Vec<TokenId>> = targets.iter().map(|p| p.tokens.clone()).collect();
    for _ in 0..filler_count {
        // benign neighbors run a few sentences long, so the batch's total
        // token count grows with b and crowds the gradient span
        let mut t = vec![BOS];
        for _ in 0..rng.gen_range(2..=4) {
            t.extend(filler_sentence(vocab, &mut rng));
        }
        t.truncate(cfg.model.max_seq_len);
        sequences.push(t);
    }
    // deterministic shuffle so targets are not always batch-initial
    for i in (1..sequences.len()).rev() {
        let j = rng.gen_range(0..=i);
        sequences.swap(i, j);
    }
    let batch = TokenBatch::new(sequences);

    let mut lora = match mode {
        PeftMode::Lora {
            rank,
            adapted_layers,
        } => Some(LoraFactors::init(
            &pretrained.config,
            *rank,
            adapted_layers,
            &mut rng,
        )?),
        _ => None,
    };

    let capture = capture_gradient(pretrained, lora.as_ref(), &batch, mode)?;

    let mut trained = pretrained.clone();
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7EA1));
    train(
        &mut trained,
        lora.as_mut(),
        &batch.sequences,
        mode,
        &cfg.victim_train,
        &mut train_rng,
    )?;

    let params = match mode {
        PeftMode::FullFt => PeftUpdateParams::Full(Box::new(trained)),
        PeftMode::Lora { .. } => PeftUpdateParams::Lora(lora.expect("lora mode")),
        PeftMode::Selective { trainable_layers } => PeftUpdateParams::Selective {
            layers: trainable_layers.clone(),
            params: trainable_layers
                .iter()
                .map(|&l| trained.layers[l].clone())
                .collect(),
        },
    };
    Ok((batch, PeftUpdate { capture, params }))
}

fn resolve_mode(cfg: &ExperimentConfig, mode: &PeftMode) -> PeftMode {
    match mode {
        PeftMode::Lora { adapted_layers, .. } if adapted_layers.is_empty() => PeftMode::Lora {
            rank: cfg.lora_rank,
            adapted_layers: (0..cfg.model.num_layers).collect(),
        },
        other => other.clone(),
    }
}

/// Run the full sweep. One result row per (cell, seed), with `replicates`
/// independent victim batches pooled into the row's counts. Cell failures
/// are recorded on the row and do not abort the sweep.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    grid: &SweepGrid,
    vocab: &Vocab,
) -> Result<ExperimentResults, ExperimentError> {
    if grid.cells() == 0 {
        return Err(ExperimentError::EmptyGrid);
    }
    let base = base_model(cfg, vocab)?;
    let mut scenarios: HashMap<(String, u64), Scenario> = HashMap::new();
    let composer = TemplateComposer;
    let filter = FilterSet::from_vocab(vocab);
    let mut results = ExperimentResults::default();

    for ablation in &grid.ablations {
        for &seed in &grid.seeds {
            let key = (ablation.label(), seed);
            if !scenarios.contains_key(&key) {
                let sc = build_scenario(cfg, vocab, &base, *ablation, seed)?;
                scenarios.insert(key.clone(), sc);
            }
            let scenario = &scenarios[&key];
            let ctx = AttackContext {
                vocab,
                filter: filter.clone(),
                cooccurrence: scenario.cooccurrence.clone(),
                composer: &composer,
            };
            for mode_spec in &grid.peft_modes {
                let mode = resolve_mode(cfg, mode_spec);
                for &b in &grid.batch_sizes {
                    for &pii_count in &grid.pii_counts {
                        let pii_count = pii_count.min(b).max(1);
                        for &sigma in &grid.sigmas {
                            let started = Instant::now();
                            let need = pii_count * grid.replicates;
                            let pool = victim_privates(
                                cfg,
                                vocab,
                                scenario,
                                need,
                                derive_seed(seed, cell_salt(&mode, b, pii_count, sigma)),
                            )?;
                            let mut all_reports = Vec::new();
                            let mut n_p = 0usize;
                            for rep in 0..grid.replicates {
                                let targets =
                                    &pool[rep * pii_count..(rep + 1) * pii_count];
                                n_p += targets.len();
                                let round_seed = derive_seed(
                                    seed,
                                    cell_salt(&mode, b, pii_count, sigma) ^ (rep as u64 + 1),
                                );
                                let (_batch, update) = victim_round(
                                    cfg,
                                    vocab,
                                    &scenario.pretrained,
                                    targets,
                                    b - pii_count,
                                    &mode,
                                    round_seed,
                                )?;
                                let mut attack_cfg =
                                    AttackConfig::new(vocab, mode.clone(), b);
                                attack_cfg.dp_sigma = sigma;
                                attack_cfg.zeta_scale = cfg.zeta_scale;
                                attack_cfg.max_secret_len = cfg.max_secret_len;
                                attack_cfg.pairing.reference_batch = cfg.reference_batch;
                                attack_cfg.pairing.position_window =
                                    0..cfg.model.max_seq_len.min(48);
                                attack_cfg.seed = round_seed;
                                attack_cfg.record_timing = cfg.record_timing;
                                let reports = run_attack(
                                    &ctx,
                                    &scenario.pretrained,
                                    &update,
                                    targets,
                                    &attack_cfg,
                                )?;
                                all_reports.extend(reports);
                            }
                            let metrics = compute_metrics(&all_reports, n_p.max(1))?;
                            let wall_ms = if cfg.record_timing {
                                started.elapsed().as_millis() as u64
                            } else {
                                0
                            };
                            results.rows.push(ExperimentRow {
                                peft_mode: mode.label().to_string(),
                                batch_size: b,
                                pii_rate: pii_count as f64 / b as f64,
                                sigma,
                                ablation: ablation.label(),
                                seed,
                                r_prefix: metrics.r_prefix,
                                r_pii: metrics.r_pii,
                                n_targets: metrics.n_p,
                                wall_ms,
                            });
                            results.cells.push(CellReports {
                                ablation: ablation.label(),
                                peft_mode: mode.label().to_string(),
                                batch_size: b,
                                pii_count,
                                sigma,
                                seed,
                                reports: all_reports,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(results)
}

fn cell_salt(mode: &PeftMode, b: usize, pii: usize, sigma: f64) -> u64 {
    let mode_tag: u64 = match mode {
        PeftMode::FullFt => 1,
        PeftMode::Lora { .. } => 2,
        PeftMode::Selective { .. } => 3,
    };
    derive_seed(
        mode_tag ^ ((b as u64) << 8) ^ ((pii as u64) << 24),
        sigma.to_bits(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_derivation_is_stable_and_spreads() {
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
        assert_ne!(derive_seed(1, 2), derive_seed(2, 2));
    }

    #[test]
    fn pnote_spans_are_stripped_cleanly() {
        use crate::vocab::{PN_END, PN_START};
        let tokens = vec![1, 10, 11, PN_START, 40, 41, PN_END, 12, PN_START, 50, PN_END];
        assert_eq!(strip_pnote_spans(&tokens), vec![1, 10, 11, 12]);
    }

    #[test]
    fn ablation_labels_are_stable() {
        assert_eq!(Ablation::Full.label(), "full");
        assert_eq!(Ablation::NoPnote.label(), "no_pnote");
        assert_eq!(Ablation::NoPretrain.label(), "no_pretrain");
        assert_eq!(Ablation::PnoteCount(50).label(), "pnote_50");
    }

    #[test]
    fn pnote_count_spec_scales_both_kinds() {
        let vocab = Vocab::builtin();
        let cfg = ExperimentConfig::desk(&vocab);
        let spec = attacker_spec(&cfg, Ablation::PnoteCount(50), 3);
        assert_eq!(spec.n_appended + spec.n_summary, 50);
        assert!(spec.n_appended > spec.n_summary);
        let zero = attacker_spec(&cfg, Ablation::PnoteCount(0), 3);
        assert_eq!(zero.n_appended + zero.n_summary, 0);
    }
}
