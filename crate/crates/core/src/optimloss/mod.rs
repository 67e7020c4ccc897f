//! Preference losses over log-probability traces, optimizers and trainers.
//!
//! Losses are evaluated on precomputed traces of the policy and the frozen
//! reference. Each loss also returns `dL/dlog pi_theta` at every output
//! position; the model's weighted backward pass turns those into parameter
//! gradients.

mod optim;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{check_gradient, GradCheckReport, LogProbTrace, ModelCheckpoint};

pub use optim::{clip_grad_norm, grad_norm, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    loss_log_csv, sft_loss, sft_train, train, LossLogEntry, SftConfig, TrainOutcome, LOSS_LOG_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    FpoTokenSigmoid,
    FpoSequenceSigmoid,
    DpoUtterance,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::FpoTokenSigmoid => "fpo_token_sigmoid",
            LossVariant::FpoSequenceSigmoid => "fpo_sequence_sigmoid",
            LossVariant::DpoUtterance => "dpo_utterance",
        }
    }

    pub fn is_fpo(self) -> bool {
        self != LossVariant::DpoUtterance
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How masked winner and loser positions are paired up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthPolicy {
    /// Counterparts from the winner/loser alignment.
    #[default]
    Aligned,
    /// Position `i` with position `i`, for `i < min(len_w, len_l)` where
    /// either mask is set.
    IndexMin,
}

/// Reduction over the masked token terms of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub loss_variant: LossVariant,
    pub length_policy: LengthPolicy,
    pub normalization: Normalization,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    /// Shuffle seed; set per run, not part of the serialized config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 4,
            optimizer: OptimizerKind::AdamW,
            loss_variant: LossVariant::FpoTokenSigmoid,
            length_policy: LengthPolicy::Aligned,
            normalization: Normalization::Sum,
            weight_decay: 0.0,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("max_grad_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Policy and reference traces for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTraces {
    pub theta_w: LogProbTrace,
    pub theta_l: LogProbTrace,
    pub ref_w: LogProbTrace,
    pub ref_l: LogProbTrace,
}

#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub pair: &'a PreferencePair,
    pub traces: PairTraces,
}

#[derive(Debug, Clone, Default)]
pub struct PairBatch<'a> {
    pub items: Vec<BatchItem<'a>>,
}

impl<'a> PairBatch<'a> {
    /// Evaluates both models on every pair.
    pub fn build(
        theta: &ModelCheckpoint,
        reference: &ModelCheckpoint,
        pairs: &[&'a PreferencePair],
    ) -> Result<Self> {
        let refs = reference_traces(reference, pairs)?;
        Self::with_reference(theta, pairs, &refs)
    }

    /// Evaluates the policy only, reusing cached reference traces.
    pub fn with_reference(
        theta: &ModelCheckpoint,
        pairs: &[&'a PreferencePair],
        refs: &[(LogProbTrace, LogProbTrace)],
    ) -> Result<Self> {
        if refs.len() != pairs.len() {
            return Err(Error::Internal("reference trace count does not match pairs".into()));
        }
        let items = pairs
            .par_iter()
            .zip(refs.par_iter())
            .map(|(&pair, (rw, rl))| {
                Ok(BatchItem {
                    pair,
                    traces: PairTraces {
                        theta_w: theta.sequence_logprob(&pair.condition, &pair.winner)?,
                        theta_l: theta.sequence_logprob(&pair.condition, &pair.loser)?,
                        ref_w: rw.clone(),
                        ref_l: rl.clone(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = Self { items };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, it) in self.items.iter().enumerate() {
            let t = &it.traces;
            let (lw, ll) = (it.pair.winner.len(), it.pair.loser.len());
            if t.theta_w.len() != lw || t.ref_w.len() != lw || t.theta_l.len() != ll || t.ref_l.len() != ll {
                return Err(Error::Internal(format!("pair {k}: trace length does not match sequence")));
            }
        }
        Ok(())
    }
}

pub fn reference_traces(
    reference: &ModelCheckpoint,
    pairs: &[&PreferencePair],
) -> Result<Vec<(LogProbTrace, LogProbTrace)>> {
    pairs
        .par_iter()
        .map(|p| {
            Ok((
                reference.sequence_logprob(&p.condition, &p.winner)?,
                reference.sequence_logprob(&p.condition, &p.loser)?,
            ))
        })
        .collect()
}

/// `log pi_theta - log pi_ref` per position. The partition term cancels in
/// every loss below and is never formed.
pub fn token_log_ratios(theta: &LogProbTrace, reference: &LogProbTrace) -> Result<Vec<f64>> {
    if theta.len() != reference.len() {
        return Err(Error::Internal(format!(
            "trace length mismatch: {} vs {}",
            theta.len(),
            reference.len()
        )));
    }
    Ok(theta.values().iter().zip(reference.values()).map(|(a, b)| a - b).collect())
}

/// `log sigma(z)`, computed as `-log1p(exp(-z))` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss value and its derivative with respect to every policy log-prob.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    /// `dL/dlog pi_theta(y_w^i)` per pair.
    pub d_w: Vec<Vec<f64>>,
    pub d_l: Vec<Vec<f64>>,
}

/// Winner/loser token pairs entering the per-token loss.
pub fn effective_token_pairs(pair: &PreferencePair, policy: LengthPolicy) -> Result<Vec<(usize, usize)>> {
    check_masks(pair)?;
    Ok(match policy {
        LengthPolicy::Aligned => pair.aligned_pairs.clone(),
        LengthPolicy::IndexMin => {
            let n = pair.winner.len().min(pair.loser.len());
            (0..n)
                .filter(|&i| pair.mask_w.0[i] || pair.mask_l.0[i])
                .map(|i| (i, i))
                .collect()
        }
    })
}

/// Winner and loser positions entering the summed (sequence-level) loss.
pub fn effective_positions(pair: &PreferencePair, policy: LengthPolicy) -> Result<(Vec<usize>, Vec<usize>)> {
    check_masks(pair)?;
    Ok(match policy {
        LengthPolicy::Aligned => {
            let on = |m: &[bool]| (0..m.len()).filter(|&i| m[i]).collect::<Vec<_>>();
            (on(&pair.mask_w.0), on(&pair.mask_l.0))
        }
        LengthPolicy::IndexMin => {
            let idx: Vec<usize> = effective_token_pairs(pair, policy)?.into_iter().map(|p| p.0).collect();
            (idx.clone(), idx)
        }
    })
}

fn check_masks(pair: &PreferencePair) -> Result<()> {
    if pair.mask_w.len() != pair.winner.len() || pair.mask_l.len() != pair.loser.len() {
        return Err(Error::Precondition("mask length does not match its sequence".into()));
    }
    let (lw, ll) = (pair.winner.len(), pair.loser.len());
    if pair.aligned_pairs.iter().any(|&(w, l)| w >= lw || l >= ll) {
        return Err(Error::Precondition("aligned pair index out of range".into()));
    }
    Ok(())
}

/// `sum_{i in positions} (theta_i - ref_i)` in ascending position order.
fn ratio_sum(theta: &LogProbTrace, reference: &LogProbTrace, positions: impl Iterator<Item = usize>) -> f64 {
    let (t, r) = (theta.values(), reference.values());
    let mut acc = 0.0;
    for i in positions {
        acc += t[i] - r[i];
    }
    acc
}

/// Adds the gradient of `-log sigma(beta * (sum_w - sum_l)) * scale` to the
/// given positions; returns the loss contribution.
fn sequence_sigmoid_term(
    traces: &PairTraces,
    pos_w: &[usize],
    pos_l: &[usize],
    beta: f64,
    scale: f64,
    d_w: &mut [f64],
    d_l: &mut [f64],
) -> f64 {
    let sw = ratio_sum(&traces.theta_w, &traces.ref_w, pos_w.iter().copied());
    let sl = ratio_sum(&traces.theta_l, &traces.ref_l, pos_l.iter().copied());
    let z = beta * (sw - sl);
    let g = beta * sigmoid(-z) * scale;
    for &i in pos_w {
        d_w[i] -= g;
    }
    for &i in pos_l {
        d_l[i] += g;
    }
    -log_sigmoid(z)
}

fn zero_terms(batch: &PairBatch) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d_w = batch.items.iter().map(|it| vec![0.0; it.pair.winner.len()]).collect();
    let d_l = batch.items.iter().map(|it| vec![0.0; it.pair.loser.len()]).collect();
    (d_w, d_l)
}

/// Utterance-level DPO: mean over pairs of
/// `-log sigma(beta * (sum r_w - sum r_l))`.
pub fn dpo_terms(batch: &PairBatch, beta: f64) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    batch.validate()?;
    let scale = 1.0 / batch.len() as f64;
    let (mut d_w, mut d_l) = zero_terms(batch);
    let mut loss = 0.0;
    for (k, it) in batch.items.iter().enumerate() {
        let pos_w: Vec<usize> = (0..it.pair.winner.len()).collect();
        let pos_l: Vec<usize> = (0..it.pair.loser.len()).collect();
        loss += sequence_sigmoid_term(&it.traces, &pos_w, &pos_l, beta, scale, &mut d_w[k], &mut d_l[k]);
    }
    Ok(LossTerms {
        loss: loss * scale,
        d_w,
        d_l,
    })
}

/// Masked preference loss; a pair with no effective positions contributes 0.
pub fn fpo_terms(batch: &PairBatch, cfg: &TrainConfig) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    batch.validate()?;
    let beta = cfg.beta;
    let scale = 1.0 / batch.len() as f64;
    let (mut d_w, mut d_l) = zero_terms(batch);
    let mut loss = 0.0;
    let mut active = 0;
    for (k, it) in batch.items.iter().enumerate() {
        match cfg.loss_variant {
            LossVariant::FpoTokenSigmoid => {
                let pairs = effective_token_pairs(it.pair, cfg.length_policy)?;
                if pairs.is_empty() {
                    continue;
                }
                active += 1;
                let norm = match cfg.normalization {
                    Normalization::Sum => 1.0,
                    Normalization::Mean => 1.0 / pairs.len() as f64,
                };
                let rw = token_log_ratios(&it.traces.theta_w, &it.traces.ref_w)?;
                let rl = token_log_ratios(&it.traces.theta_l, &it.traces.ref_l)?;
                let mut pair_loss = 0.0;
                for &(w, l) in &pairs {
                    let z = beta * (rw[w] - rl[l]);
                    pair_loss -= log_sigmoid(z);
                    let g = beta * sigmoid(-z) * norm * scale;
                    d_w[k][w] -= g;
                    d_l[k][l] += g;
                }
                loss += pair_loss * norm;
            }
            LossVariant::FpoSequenceSigmoid => {
                let (pos_w, pos_l) = effective_positions(it.pair, cfg.length_policy)?;
                if pos_w.is_empty() && pos_l.is_empty() {
                    continue;
                }
                active += 1;
                loss += sequence_sigmoid_term(&it.traces, &pos_w, &pos_l, beta, scale, &mut d_w[k], &mut d_l[k]);
            }
            LossVariant::DpoUtterance => {
                return Err(Error::Config("fpo_loss called with the dpo_utterance variant".into()));
            }
        }
    }
    if active == 0 {
        return Err(Error::DegenerateBatch("every pair in the batch has an all-zero mask".into()));
    }
    Ok(LossTerms {
        loss: loss * scale,
        d_w,
        d_l,
    })
}

pub fn loss_terms(batch: &PairBatch, cfg: &TrainConfig) -> Result<LossTerms> {
    match cfg.loss_variant {
        LossVariant::DpoUtterance => dpo_terms(batch, cfg.beta),
        _ => fpo_terms(batch, cfg),
    }
}

/// Parameter gradient from per-position loss derivatives. Pairs are
/// processed in parallel and summed in batch order.
pub fn backprop(theta: &ModelCheckpoint, batch: &PairBatch, terms: &LossTerms) -> Result<Vec<f64>> {
    let n = theta.params.len();
    let parts = batch
        .items
        .par_iter()
        .enumerate()
        .map(|(k, it)| {
            let mut g = vec![0.0; n];
            if terms.d_w[k].iter().any(|&d| d != 0.0) {
                theta.accumulate_weighted_grad(&it.pair.condition, &it.pair.winner, &terms.d_w[k], &mut g)?;
            }
            if terms.d_l[k].iter().any(|&d| d != 0.0) {
                theta.accumulate_weighted_grad(&it.pair.condition, &it.pair.loser, &terms.d_l[k], &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; n];
    for g in parts {
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok(grad)
}

pub fn dpo_loss(theta: &ModelCheckpoint, batch: &PairBatch, cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let terms = dpo_terms(batch, cfg.beta)?;
    let grad = backprop(theta, batch, &terms)?;
    Ok((terms.loss, grad))
}

pub fn fpo_loss(theta: &ModelCheckpoint, batch: &PairBatch, cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let terms = fpo_terms(batch, cfg)?;
    let grad = backprop(theta, batch, &terms)?;
    Ok((terms.loss, grad))
}

pub fn preference_loss(theta: &ModelCheckpoint, batch: &PairBatch, cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let terms = loss_terms(batch, cfg)?;
    let grad = backprop(theta, batch, &terms)?;
    Ok((terms.loss, grad))
}

/// True when the pair has at least one position under the variant's mask.
/// Central-difference check of the gradient of `cfg.loss_variant` on one batch.
pub fn loss_gradient_check(
    theta: &ModelCheckpoint,
    reference: &ModelCheckpoint,
    pairs: &[&PreferencePair],
    cfg: &TrainConfig,
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let batch = PairBatch::build(theta, reference, pairs)?;
    let (_, grad) = preference_loss(theta, &batch, cfg)?;
    let probe = std::cell::RefCell::new(theta.clone());
    let f = |x: &[f64]| {
        let mut m = probe.borrow_mut();
        m.params.copy_from_slice(x);
        PairBatch::build(&m, reference, pairs)
            .and_then(|b| loss_terms(&b, cfg))
            .map(|t| t.loss)
            .unwrap_or(f64::NAN)
    };
    check_gradient(f, &theta.params, &grad, h, coords, seed)
}

pub fn has_effective_mask(pair: &PreferencePair, cfg: &TrainConfig) -> Result<bool> {
    Ok(match cfg.loss_variant {
        LossVariant::DpoUtterance => true,
        LossVariant::FpoTokenSigmoid => !effective_token_pairs(pair, cfg.length_policy)?.is_empty(),
        LossVariant::FpoSequenceSigmoid => {
            let (w, l) = effective_positions(pair, cfg.length_policy)?;
            !(w.is_empty() && l.is_empty())
        }
    })
}
