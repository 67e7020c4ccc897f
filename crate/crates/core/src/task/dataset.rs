use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{reference_render, ErrorKind, ErrorSpan, Injector, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::seq::TokenSeq;

/// One supervised example; `spans` is non-empty when the target was corrupted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub text: TokenSeq,
    pub target: TokenSeq,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spans: Vec<ErrorSpan>,
}

/// `n` texts drawn from the task distribution with their reference renders.
pub fn make_sft_dataset(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    if n == 0 {
        return Err(Error::Precondition("dataset size must be >= 1".into()));
    }
    spec.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, "sft-text", i as u64);
            let text = spec.sample_text(&mut rng);
            let target = reference_render(spec, &text)?;
            Ok(DatasetRecord {
                text,
                target,
                spans: Vec::new(),
            })
        })
        .collect()
}

/// How a supervised set is contaminated with segmental errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    /// Fraction of records that receive one injected error.
    pub rate: f64,
    /// Relative frequency of each kind, in [`ErrorKind::ALL`] order.
    pub kind_weights: [f64; 5],
    /// Confusable tokens per speech token for mispronunciations; 0 means any.
    pub confusions: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            rate: 0.0,
            kind_weights: [1.0; 5],
            confusions: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("corruption rate {} outside [0, 1]", self.rate)));
        }
        if self.kind_weights.iter().any(|w| *w < 0.0 || !w.is_finite())
            || self.kind_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("kind weights must be nonnegative with positive sum".into()));
        }
        Ok(())
    }

    fn pick_kind(&self, rng: &mut impl Rng) -> ErrorKind {
        let total: f64 = self.kind_weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (w, k) in self.kind_weights.iter().zip(ErrorKind::ALL) {
            if u < *w {
                return k;
            }
            u -= w;
        }
        ErrorKind::Truncation
    }
}

/// Replaces the targets of a random subset of records with corrupted versions.
///
/// Records too short for the drawn kind stay clean.
pub fn corrupt_dataset(
    records: &[DatasetRecord],
    injector: &Injector,
    config: &CorruptionConfig,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    config.validate()?;
    Ok(records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = rng_for(seed, "sft-corrupt", i as u64);
            if rng.gen::<f64>() >= config.rate {
                return rec.clone();
            }
            let kind = config.pick_kind(&mut rng);
            match injector.inject(&rec.target, kind, rng.gen()) {
                Ok(c) => DatasetRecord {
                    text: rec.text.clone(),
                    target: c.corrupted,
                    spans: c.injected_spans,
                },
                Err(_) => rec.clone(),
            }
        })
        .collect())
}
