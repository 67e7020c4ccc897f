use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, grad_norm, Optimizer, OptimizerKind};
use super::{backprop, has_effective_mask, loss_terms, reference_traces, PairBatch, TrainConfig};
use crate::annotate::PreferencePair;
use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;
use crate::rng::rng_for;
use crate::task::DatasetRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub variant: String,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,epoch,variant,loss,grad_norm";

pub fn loss_log_csv(entries: &[LossLogEntry]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for e in entries {
        s.push_str(&format!("{},{},{},{},{}\n", e.step, e.epoch, e.variant, e.loss, e.grad_norm));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<LossLogEntry>,
    /// Training examples actually used.
    pub used: usize,
    /// Pairs dropped because the variant's mask was empty.
    pub skipped: usize,
}

fn shuffled(n: usize, seed: u64, stage: &str, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, stage, epoch as u64));
    idx
}

fn finish_step(
    params: &mut [f64],
    opt: &mut Optimizer,
    mut grad: Vec<f64>,
    loss: f64,
    max_grad_norm: Option<f64>,
    step: usize,
) -> Result<f64> {
    let norm = match max_grad_norm {
        Some(c) => clip_grad_norm(&mut grad, c),
        None => grad_norm(&grad),
    };
    if !loss.is_finite() || !norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("loss {loss}, gradient norm {norm}"),
        });
    }
    opt.step(params, &grad);
    Ok(norm)
}

/// Preference fine-tuning of `model` against the frozen `reference`.
pub fn train(
    model: &ModelCheckpoint,
    reference: &ModelCheckpoint,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    reference.validate()?;
    if model.config != reference.config {
        return Err(Error::Config("policy and reference architectures differ".into()));
    }
    let mut usable = Vec::with_capacity(pairs.len());
    for p in pairs {
        if has_effective_mask(p, cfg)? {
            usable.push(p);
        }
    }
    let skipped = pairs.len() - usable.len();
    if usable.is_empty() {
        return Err(if pairs.is_empty() {
            Error::Precondition("no preference pairs to train on".into())
        } else {
            Error::DegenerateBatch("every pair has an all-zero mask".into())
        });
    }
    let refs = reference_traces(reference, &usable)?;

    let mut ckpt = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, ckpt.params.len());
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(usable.len(), cfg.seed, "train-shuffle", epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_pairs: Vec<&PreferencePair> = chunk.iter().map(|&i| usable[i]).collect();
            let batch_refs: Vec<_> = chunk.iter().map(|&i| refs[i].clone()).collect();
            let batch = PairBatch::with_reference(&ckpt, &batch_pairs, &batch_refs)?;
            let terms = match loss_terms(&batch, cfg) {
                Ok(t) => t,
                Err(Error::DegenerateBatch(_)) => continue,
                Err(e) => return Err(e),
            };
            let grad = backprop(&ckpt, &batch, &terms)?;
            let norm = finish_step(&mut ckpt.params, &mut opt, grad, terms.loss, cfg.max_grad_norm, step)?;
            log.push(LossLogEntry {
                step,
                epoch,
                variant: cfg.loss_variant.name().to_string(),
                loss: terms.loss,
                grad_norm: norm,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        used: usable.len(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    /// Decay the learning rate linearly to zero over the run.
    pub linear_decay: bool,
    /// Shuffle seed; set per run, not part of the serialized config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 16,
            epochs: 60,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            max_grad_norm: Some(5.0),
            linear_decay: true,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("sft learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sft batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("sft weight_decay must be finite and >= 0".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("sft max_grad_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Mean per-token negative log-likelihood of the targets and its gradient.
pub fn sft_loss(ckpt: &ModelCheckpoint, records: &[&DatasetRecord]) -> Result<(f64, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let tokens: usize = records.iter().map(|r| r.target.len()).sum();
    let w = -1.0 / tokens as f64;
    let n = ckpt.params.len();
    let parts = records
        .par_iter()
        .map(|r| {
            let trace = ckpt.sequence_logprob(&r.text, &r.target)?;
            let mut g = vec![0.0; n];
            ckpt.accumulate_weighted_grad(&r.text, &r.target, &vec![w; r.target.len()], &mut g)?;
            Ok((trace.total(), g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    for (ll, g) in parts {
        total += ll;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((-total / tokens as f64, grad))
}

/// Maximum-likelihood training on a supervised set.
pub fn sft_train(model: &ModelCheckpoint, dataset: &[DatasetRecord], cfg: &SftConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let mut ckpt = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, ckpt.params.len());
    let mut log = Vec::new();
    let mut step = 0;
    let total_steps = cfg.epochs * dataset.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let order = shuffled(dataset.len(), cfg.seed, "sft-shuffle", epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.linear_decay {
                opt.set_learning_rate(cfg.learning_rate * (1.0 - step as f64 / total_steps as f64));
            }
            let batch: Vec<&DatasetRecord> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grad) = sft_loss(&ckpt, &batch)?;
            let norm = finish_step(&mut ckpt.params, &mut opt, grad, loss, cfg.max_grad_norm, step)?;
            log.push(LossLogEntry {
                step,
                epoch,
                variant: "sft".into(),
                loss,
                grad_norm: norm,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        used: dataset.len(),
        skipped: 0,
    })
}
