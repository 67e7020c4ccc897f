//! End-to-end experiment configuration and the pair-building stage.
//!
//! Every stage seed is derived from the single global seed with
//! [`derive_seed`] and a fixed stage label, so a config file plus a seed
//! pins every artifact.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{annotate_pair, PreferencePair, WinnerMaskPolicy};
use crate::error::{Error, Result};
use crate::model::{gradient_check, init_model, sample, ModelCheckpoint, ModelConfig};
use crate::optimloss::{
    loss_gradient_check, sft_train, train, LengthPolicy, LossVariant, SftConfig, TrainConfig, TrainOutcome,
};
use crate::rng::{derive_seed, rng_for};
use crate::scoring::{score_output, select_pair, QualityOracle, ScoreWeights};
use crate::seq::{GenSample, TokenSeq};
use crate::task::{
    corrupt_dataset, make_sft_dataset, reference_render, CorruptionConfig, DatasetRecord, ErrorKind, Injector,
    TaskSpec, WorldConfig,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftStageConfig {
    /// Number of supervised examples.
    pub n_train: usize,
    pub corruption: CorruptionConfig,
    pub train: SftConfig,
}

impl Default for SftStageConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            corruption: CorruptionConfig {
                rate: 0.15,
                kind_weights: [1.0; 5],
                confusions: 1,
            },
            train: SftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub weights: ScoreWeights,
    pub tau: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            weights: ScoreWeights::default(),
            tau: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Pairs `build-pairs` aims for.
    pub n_pairs: usize,
    /// Prompt budget while searching for pairs.
    pub max_prompts: usize,
    /// Candidates per prompt.
    pub k: usize,
    /// Candidate `j` uses `temperatures[j % len]`.
    pub temperatures: Vec<f64>,
    pub top_k: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_pairs: 400,
            max_prompts: 8000,
            k: 4,
            temperatures: vec![1.0],
            top_k: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub winner_policy: WinnerMaskPolicy,
}

/// Decoding and bad-case settings for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_samples: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub ter_threshold: f64,
    pub quality_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            temperature: 1.0,
            top_k: 32,
            ter_threshold: 0.05,
            quality_threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<LossVariant>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: vec![50, 100, 200, 400],
            seeds: vec![0, 1, 2],
            methods: vec![LossVariant::FpoTokenSigmoid, LossVariant::DpoUtterance],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    /// Where commands write artifacts; excluded from the config hash.
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub sft: SftStageConfig,
    pub scoring: ScoringConfig,
    pub sampling: SamplingConfig,
    pub masks: MaskConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            world: WorldConfig {
                max_text_len: 3,
                ..WorldConfig::default()
            },
            model: ModelConfig::default(),
            sft: SftStageConfig::default(),
            scoring: ScoringConfig::default(),
            sampling: SamplingConfig::default(),
            masks: MaskConfig::default(),
            train: TrainConfig {
                beta: 4.0,
                learning_rate: 4e-4,
                epochs: 6,
                ..TrainConfig::default()
            },
            eval: EvalSettings::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::SchemaVersion {
                what: "experiment config".into(),
                found: self.version,
                expected: CONFIG_VERSION,
            });
        }
        self.model.validate()?;
        if self.world.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "world vocab_size {} differs from model vocab_size {}",
                self.world.vocab_size, self.model.vocab_size
            )));
        }
        if self.sft.n_train == 0 {
            return Err(Error::Config("sft.n_train must be >= 1".into()));
        }
        self.sft.corruption.validate()?;
        self.sft.train.validate()?;
        self.scoring.weights.validate()?;
        if !(self.scoring.tau >= 0.0 && self.scoring.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in [0, 1), got {}", self.scoring.tau)));
        }
        let s = &self.sampling;
        if s.k < 2 {
            return Err(Error::Config(format!(
                "sampling.k must be >= 2 (a pair needs two candidates), got {}",
                s.k
            )));
        }
        if s.temperatures.is_empty() || s.temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("sampling.temperatures must be non-empty and positive".into()));
        }
        let vocab = self.model.vocab_size;
        if s.top_k == 0 || s.top_k > vocab {
            return Err(Error::Config(format!("sampling.top_k must be in [1, {vocab}]")));
        }
        self.train.validate()?;
        let e = &self.eval;
        if e.n_samples == 0 {
            return Err(Error::Config("eval.n_samples must be >= 1".into()));
        }
        if !(e.temperature > 0.0 && e.temperature.is_finite()) || e.top_k == 0 || e.top_k > vocab {
            return Err(Error::Config("eval decoding settings out of range".into()));
        }
        let sw = &self.sweep;
        if sw.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sweep.budgets must be strictly increasing".into()));
        }
        if sw.seeds.len() < 3 {
            return Err(Error::Config(format!("sweep needs >= 3 seeds, got {}", sw.seeds.len())));
        }
        if sw.methods.is_empty() {
            return Err(Error::Config("sweep.methods must be non-empty".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn oracle(&self, spec: &TaskSpec) -> QualityOracle {
        QualityOracle::new(spec.silence)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn task_spec(cfg: &ExperimentConfig) -> Result<TaskSpec> {
    let spec = TaskSpec::generate(&cfg.world, derive_seed(cfg.seed, "task", 0))?;
    spec.check_fits(cfg.model.vocab_size, cfg.model.max_len)?;
    Ok(spec)
}

/// Supervised set with the configured fraction of corrupted targets.
pub fn sft_dataset(cfg: &ExperimentConfig, spec: &TaskSpec) -> Result<Vec<DatasetRecord>> {
    let clean = make_sft_dataset(spec, cfg.sft.n_train, derive_seed(cfg.seed, "sft-data", 0))?;
    corrupt_dataset(
        &clean,
        &Injector::for_task(spec).with_confusions(cfg.sft.corruption.confusions, derive_seed(cfg.seed, "confusions", 0)),
        &cfg.sft.corruption,
        derive_seed(cfg.seed, "sft-corruption", 0),
    )
}

pub fn init_policy(cfg: &ExperimentConfig) -> Result<ModelCheckpoint> {
    init_model(&cfg.model, derive_seed(cfg.seed, "init", 0))
}

pub fn run_sft(cfg: &ExperimentConfig, dataset: &[DatasetRecord]) -> Result<TrainOutcome> {
    let mut tc = cfg.sft.train.clone();
    tc.seed = derive_seed(cfg.seed, "sft-train", 0);
    sft_train(&init_policy(cfg)?, dataset, &tc)
}

/// Preference training; `run` separates independent runs under one config.
pub fn run_preference(
    cfg: &ExperimentConfig,
    sft: &ModelCheckpoint,
    pairs: &[PreferencePair],
    variant: LossVariant,
    run: u64,
) -> Result<TrainOutcome> {
    let mut tc: TrainConfig = cfg.train.clone();
    tc.loss_variant = variant;
    tc.seed = derive_seed(cfg.seed, "pref-train", run);
    train(sft, sft, pairs, &tc)
}

/// Scored candidates for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub prompt_index: usize,
    pub text: TokenSeq,
    pub reference: TokenSeq,
    pub samples: Vec<GenSample>,
}

pub fn sample_group(
    ckpt: &ModelCheckpoint,
    spec: &TaskSpec,
    cfg: &ExperimentConfig,
    seed: u64,
    prompt_index: usize,
) -> Result<CandidateGroup> {
    let s = &cfg.sampling;
    let text = spec.sample_text(&mut rng_for(seed, "pair-text", prompt_index as u64));
    let reference = reference_render(spec, &text)?;
    let oracle = cfg.oracle(spec);
    let group_seed = derive_seed(seed, "pair-sample", prompt_index as u64);
    let samples = (0..s.k)
        .map(|j| {
            let t = s.temperatures[j % s.temperatures.len()];
            let mut smp = sample(ckpt, &text, t, s.top_k, derive_seed(group_seed, "candidate", j as u64))?;
            smp.meta.index = j;
            smp.score = Some(score_output(&smp.output, &reference, &oracle, &cfg.scoring.weights)?);
            Ok(smp)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateGroup {
        prompt_index,
        text,
        reference,
        samples,
    })
}

/// Selection and annotation for one group; `None` when the gap is below tau.
pub fn pair_from_group(group: &CandidateGroup, spec: &TaskSpec, cfg: &ExperimentConfig) -> Result<Option<PreferencePair>> {
    let Some((w, l)) = select_pair(&group.samples, &cfg.scoring.weights, cfg.scoring.tau)? else {
        return Ok(None);
    };
    let (sw, sl) = (&group.samples[w], &group.samples[l]);
    annotate_pair(
        &group.text,
        &group.reference,
        &sw.output,
        &sl.output,
        sw.score.expect("scored"),
        sl.score.expect("scored"),
        spec.silence,
        cfg.masks.winner_policy,
    )
    .map(Some)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairYield {
    pub prompts: usize,
    pub selected: usize,
    pub degenerate: usize,
    /// Loser spans by kind.
    pub loser_span_kinds: BTreeMap<String, usize>,
}

impl PairYield {
    pub fn add(&mut self, pair: &PreferencePair) {
        self.selected += 1;
        self.degenerate += usize::from(pair.degenerate);
        for s in &pair.spans_l {
            *self.loser_span_kinds.entry(s.kind.name().to_string()).or_default() += 1;
        }
    }
}

/// Sample -> score -> select -> annotate -> mask over prompts `start..end`.
pub fn build_pairs_range(
    ckpt: &ModelCheckpoint,
    spec: &TaskSpec,
    cfg: &ExperimentConfig,
    seed: u64,
    start: usize,
    end: usize,
) -> Result<Vec<PreferencePair>> {
    let found = (start..end)
        .into_par_iter()
        .map(|i| pair_from_group(&sample_group(ckpt, spec, cfg, seed, i)?, spec, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(found.into_iter().flatten().collect())
}

/// Pair set for the configured target; fails when the prompt budget runs out first.
pub fn build_pairs(
    ckpt: &ModelCheckpoint,
    spec: &TaskSpec,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Vec<PreferencePair>, PairYield)> {
    let s = &cfg.sampling;
    let (pairs, y) = build_pair_pool(ckpt, spec, cfg, seed, s.n_pairs, s.max_prompts)?;
    if pairs.len() < s.n_pairs {
        return Err(Error::Precondition(format!(
            "only {} of {} pairs found within {} prompts",
            pairs.len(),
            s.n_pairs,
            s.max_prompts
        )));
    }
    Ok((pairs, y))
}

/// Samples prompts in blocks until `target` pairs are found or `max_prompts`
/// prompts are spent. The result is the first `target` pairs in prompt
/// order, so any shorter budget is a prefix of a longer one.
pub fn build_pair_pool(
    ckpt: &ModelCheckpoint,
    spec: &TaskSpec,
    cfg: &ExperimentConfig,
    seed: u64,
    target: usize,
    max_prompts: usize,
) -> Result<(Vec<PreferencePair>, PairYield)> {
    const BLOCK: usize = 256;
    let mut pairs = Vec::new();
    let mut used = 0;
    while pairs.len() < target && used < max_prompts {
        let end = (used + BLOCK).min(max_prompts);
        pairs.extend(build_pairs_range(ckpt, spec, cfg, seed, used, end)?);
        used = end;
    }
    pairs.truncate(target);
    let mut y = PairYield {
        prompts: used,
        ..Default::default()
    };
    pairs.iter().for_each(|p| y.add(p));
    Ok((pairs, y))
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Worst finite-difference error of one gradient over all instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub target: String,
    pub instances: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// One gradient-check instance: a spread-out policy, an independent
/// reference and pairs of (reference render, injected corruption).
fn gradcheck_instance(
    cfg: &ExperimentConfig,
    spec: &TaskSpec,
    i: usize,
) -> Result<(ModelCheckpoint, ModelCheckpoint, Vec<PreferencePair>)> {
    let mut theta = init_model(&cfg.model, derive_seed(cfg.seed, "gradcheck-theta", i as u64))?;
    // leave the near-linear regime of the small init
    theta.params.iter_mut().for_each(|p| *p *= 6.0);
    let reference = init_model(&cfg.model, derive_seed(cfg.seed, "gradcheck-ref", i as u64))?;
    let injector = Injector::for_task(spec);
    let oracle = cfg.oracle(spec);
    let mut rng = rng_for(cfg.seed, "gradcheck-pairs", i as u64);
    let mut pairs = Vec::new();
    while pairs.len() < 3 {
        let text = spec.sample_text(&mut rng);
        let clean = reference_render(spec, &text)?;
        let kind = ErrorKind::ALL[(pairs.len() + i) % ErrorKind::ALL.len()];
        let Ok(c) = injector.inject(&clean, kind, rand::Rng::gen(&mut rng)) else { continue };
        let sw = score_output(&clean, &clean, &oracle, &cfg.scoring.weights)?;
        let sl = score_output(&c.corrupted, &clean, &oracle, &cfg.scoring.weights)?;
        let p = annotate_pair(&text, &clean, &clean, &c.corrupted, sw, sl, spec.silence, cfg.masks.winner_policy)?;
        if !p.degenerate {
            pairs.push(p);
        }
    }
    Ok((theta, reference, pairs))
}

/// Finite-difference checks of the sequence log-likelihood and of every
/// preference loss, on task-shaped instances.
pub fn gradcheck_suite(
    cfg: &ExperimentConfig,
    spec: &TaskSpec,
    instances: usize,
    h: f64,
    coords: usize,
) -> Result<Vec<GradCheckEntry>> {
    if instances == 0 {
        return Err(Error::Precondition("gradcheck needs >= 1 instance".into()));
    }
    let targets: Vec<(&str, Option<(LossVariant, LengthPolicy)>)> = vec![
        ("sequence_loglik", None),
        ("dpo_utterance", Some((LossVariant::DpoUtterance, LengthPolicy::Aligned))),
        ("fpo_token_sigmoid", Some((LossVariant::FpoTokenSigmoid, LengthPolicy::Aligned))),
        ("fpo_token_sigmoid_index_min", Some((LossVariant::FpoTokenSigmoid, LengthPolicy::IndexMin))),
        ("fpo_sequence_sigmoid", Some((LossVariant::FpoSequenceSigmoid, LengthPolicy::Aligned))),
    ];
    let worst = (0..instances)
        .into_par_iter()
        .map(|i| {
            let (theta, reference, pairs) = gradcheck_instance(cfg, spec, i)?;
            let refs: Vec<&PreferencePair> = pairs.iter().collect();
            let seed = derive_seed(cfg.seed, "gradcheck-coords", i as u64);
            targets
                .iter()
                .map(|(_, t)| {
                    let rep = match t {
                        None => gradient_check(&theta, &pairs[0].condition, &pairs[0].winner, h, coords, seed)?,
                        Some((variant, policy)) => {
                            let tc = TrainConfig {
                                beta: 0.5,
                                loss_variant: *variant,
                                length_policy: *policy,
                                ..cfg.train.clone()
                            };
                            loss_gradient_check(&theta, &reference, &refs, &tc, h, coords, seed)?
                        }
                    };
                    Ok(rep.max_rel_error)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(t, (name, _))| {
            let e = worst.iter().map(|w| w[t]).fold(0.0, f64::max);
            GradCheckEntry {
                target: name.to_string(),
                instances,
                coords,
                max_rel_error: e,
                passed: e < GRADCHECK_TOLERANCE,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn k_below_two_rejected() {
        let mut c = ExperimentConfig::default();
        c.sampling.k = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn version_mismatch_names_both() {
        let c = ExperimentConfig {
            version: 7,
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains('7') && msg.contains(&CONFIG_VERSION.to_string()), "{msg}");
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn budgets_must_increase() {
        let mut c = ExperimentConfig::default();
        c.sweep.budgets = vec![50, 50];
        assert!(c.validate().is_err());
        c.sweep.budgets = vec![50, 100];
        c.sweep.seeds = vec![1, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn gradcheck_suite_passes_on_default_model() {
        let c = ExperimentConfig::default();
        let spec = task_spec(&c).unwrap();
        let rows = gradcheck_suite(&c, &spec, 4, 1e-5, 30).unwrap();
        assert_eq!(rows.len(), 5);
        for r in rows {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn pool_prefixes_are_stable() {
        let mut c = ExperimentConfig::default();
        c.model.hidden_dim = 8;
        let spec = task_spec(&c).unwrap();
        let ck = init_policy(&c).unwrap();
        let (small, _) = build_pair_pool(&ck, &spec, &c, 3, 5, 2000).unwrap();
        let (big, y) = build_pair_pool(&ck, &spec, &c, 3, 12, 2000).unwrap();
        assert_eq!(small.len(), 5);
        assert_eq!(&big[..5], &small[..]);
        assert_eq!(y.selected, big.len());
        for p in &big {
            assert!(p.score_w.s - p.score_l.s > c.scoring.tau);
        }
    }
}
