//! Deterministic metric oracles over content tokens (EOS excluded).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotate::edit_distance;
use crate::seq::{TokenId, TokenSeq};

/// `1 - min(1, levenshtein(hyp, ref) / |ref|)`.
pub fn metric_intelligibility(hyp: &TokenSeq, reference: &TokenSeq) -> f64 {
    let (h, r) = (hyp.content(), reference.content());
    if r.is_empty() {
        return if h.is_empty() { 1.0 } else { 0.0 };
    }
    1.0 - (edit_distance(r, h) as f64 / r.len() as f64).min(1.0)
}

/// Cosine similarity of token-count histograms.
pub fn metric_similarity(hyp: &TokenSeq, reference: &TokenSeq) -> f64 {
    let hist = |s: &[TokenId]| {
        let mut m = BTreeMap::new();
        for &t in s {
            *m.entry(t).or_insert(0.0f64) += 1.0;
        }
        m
    };
    let (h, r) = (hist(hyp.content()), hist(reference.content()));
    if h.is_empty() || r.is_empty() {
        return if h.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    let dot: f64 = h.iter().map(|(t, a)| a * r.get(t).unwrap_or(&0.0)).sum();
    let norm = |m: &BTreeMap<TokenId, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (norm(&h) * norm(&r))).clamp(0.0, 1.0)
}

/// `1 - min(1, ||hyp| - |ref|| / |ref|)` on content lengths.
pub fn metric_duration(hyp: &TokenSeq, reference: &TokenSeq) -> f64 {
    let (h, r) = (hyp.content().len() as f64, reference.content().len() as f64);
    if r == 0.0 {
        return if h == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ((h - r).abs() / r).min(1.0)
}

/// Reference-free quality oracle.
///
/// Penalty table, each occurrence costs `penalty`:
/// - a maximal run of `>= 2` SILENCE tokens;
/// - an immediate repeat `x[i..i+n] == x[i+n..i+2n]` for `1 <= n <= max_ngram`
///   whose window is not all SILENCE. The scan takes the smallest such `n`
///   at each position and resumes after the repeat.
///
/// `m = clamp(1 - penalty * anomalies, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityOracle {
    pub silence: TokenId,
    pub penalty: f64,
    pub max_ngram: usize,
}

impl QualityOracle {
    pub fn new(silence: TokenId) -> Self {
        Self {
            silence,
            penalty: 0.2,
            max_ngram: 5,
        }
    }

    pub fn score(&self, hyp: &TokenSeq) -> f64 {
        metric_quality(hyp, self)
    }
}

pub fn count_anomalies(tokens: &[TokenId], oracle: &QualityOracle) -> usize {
    let sil = oracle.silence;
    let mut count = 0;

    let mut run = 0;
    for &t in tokens.iter().chain(std::iter::once(&TokenId::MAX)) {
        if t == sil {
            run += 1;
        } else {
            if run >= 2 {
                count += 1;
            }
            run = 0;
        }
    }

    let mut i = 0;
    while i < tokens.len() {
        let hit = (1..=oracle.max_ngram).find(|&n| {
            i + 2 * n <= tokens.len()
                && tokens[i..i + n] == tokens[i + n..i + 2 * n]
                && tokens[i..i + n].iter().any(|&t| t != sil)
        });
        match hit {
            Some(n) => {
                count += 1;
                i += 2 * n;
            }
            None => i += 1,
        }
    }
    count
}

pub fn metric_quality(hyp: &TokenSeq, oracle: &QualityOracle) -> f64 {
    let n = count_anomalies(hyp.content(), oracle) as f64;
    (1.0 - oracle.penalty * n).clamp(0.0, 1.0)
}
