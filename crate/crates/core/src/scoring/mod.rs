//! Composite preference scores and winner/loser selection.

mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{GenSample, TokenSeq};

pub use metrics::{
    count_anomalies, metric_duration, metric_intelligibility, metric_quality, metric_similarity,
    QualityOracle,
};

/// Score gaps within this distance of `tau` do not count as exceeding it.
pub const SELECT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub lambda_w: f64,
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub p: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            lambda_w: 0.25,
            lambda_m: 0.25,
            lambda_c: 0.25,
            lambda_d: 0.25,
            p: 2.0,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_w, self.lambda_m, self.lambda_c, self.lambda_d];
        if l.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(format!("score weights must be nonnegative: {l:?}")));
        }
        if (l.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("score weights must sum to 1: {l:?}")));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("score exponent p must be >= 1, got {}", self.p)));
        }
        Ok(())
    }
}

/// Metric values `w` (intelligibility), `m` (quality), `c` (similarity), `dur` (duration).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricComponents {
    pub w: f64,
    pub m: f64,
    pub c: f64,
    pub dur: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeScore {
    pub w: f64,
    pub m: f64,
    pub c: f64,
    pub dur: f64,
    pub s: f64,
}

impl CompositeScore {
    pub fn components(&self) -> MetricComponents {
        MetricComponents {
            w: self.w,
            m: self.m,
            c: self.c,
            dur: self.dur,
        }
    }
}

/// `s = lw*w^p + lm*m^p + lc*c^p + ld*dur^p`.
pub fn composite_score(components: MetricComponents, weights: &ScoreWeights) -> Result<CompositeScore> {
    weights.validate()?;
    let MetricComponents { w, m, c, dur } = components;
    if [w, m, c, dur].iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Precondition(format!(
            "metric components must lie in [0, 1]: {components:?}"
        )));
    }
    let p = weights.p;
    let s = weights.lambda_w * w.powf(p)
        + weights.lambda_m * m.powf(p)
        + weights.lambda_c * c.powf(p)
        + weights.lambda_d * dur.powf(p);
    Ok(CompositeScore {
        w,
        m,
        c,
        dur,
        s: s.clamp(0.0, 1.0),
    })
}

pub fn measure(hyp: &TokenSeq, reference: &TokenSeq, oracle: &QualityOracle) -> MetricComponents {
    MetricComponents {
        w: metric_intelligibility(hyp, reference),
        m: oracle.score(hyp),
        c: metric_similarity(hyp, reference),
        dur: metric_duration(hyp, reference),
    }
}

pub fn score_output(
    hyp: &TokenSeq,
    reference: &TokenSeq,
    oracle: &QualityOracle,
    weights: &ScoreWeights,
) -> Result<CompositeScore> {
    composite_score(measure(hyp, reference, oracle), weights)
}

/// Indices of the best and worst score, earliest index on ties, kept only
/// when their gap exceeds `tau`.
pub fn select_by_scores(scores: &[f64], tau: f64) -> Result<Option<(usize, usize)>> {
    if scores.len() < 2 {
        return Err(Error::Precondition(format!(
            "pair selection needs >= 2 samples, got {}",
            scores.len()
        )));
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    Ok((scores[best] - scores[worst] > tau + SELECT_EPS).then_some((best, worst)))
}

/// Winner/loser selection over scored samples.
///
/// Scores are recomputed from each sample's stored components under
/// `weights`; any cached `s` is ignored.
pub fn select_pair(
    samples: &[GenSample],
    weights: &ScoreWeights,
    tau: f64,
) -> Result<Option<(usize, usize)>> {
    let scores = samples
        .iter()
        .map(|smp| {
            let sc = smp
                .score
                .ok_or_else(|| Error::Precondition("pair selection requires scored samples".into()))?;
            composite_score(sc.components(), weights).map(|c| c.s)
        })
        .collect::<Result<Vec<f64>>>()?;
    select_by_scores(&scores, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn comps(w: f64, m: f64, c: f64, dur: f64) -> MetricComponents {
        MetricComponents { w, m, c, dur }
    }

    #[test]
    fn perfect_and_zero_components() {
        for p in [1.0, 2.0, 3.5] {
            let wts = ScoreWeights {
                lambda_w: 0.4,
                lambda_m: 0.1,
                lambda_c: 0.3,
                lambda_d: 0.2,
                p,
            };
            assert!((composite_score(comps(1.0, 1.0, 1.0, 1.0), &wts).unwrap().s - 1.0).abs() < 1e-12);
            assert_eq!(composite_score(comps(0.0, 0.0, 0.0, 0.0), &wts).unwrap().s, 0.0);
        }
    }

    #[test]
    fn equal_weights_linear_example() {
        let wts = ScoreWeights {
            p: 1.0,
            ..Default::default()
        };
        let s = composite_score(comps(1.0, 0.8, 0.6, 0.6), &wts).unwrap().s;
        // 0.25 * (1.0 + 0.8 + 0.6 + 0.6)
        assert!((s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn invalid_weights_rejected() {
        let wts = ScoreWeights {
            lambda_w: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            composite_score(comps(1.0, 1.0, 1.0, 1.0), &wts),
            Err(Error::Config(_))
        ));
        let wts = ScoreWeights {
            p: 0.5,
            ..Default::default()
        };
        assert!(wts.validate().is_err());
        assert!(composite_score(comps(1.2, 1.0, 1.0, 1.0), &ScoreWeights::default()).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_by_scores(&[0.9, 0.5, 0.4], 0.3).unwrap(), Some((0, 2)));
        assert_eq!(select_by_scores(&[0.7, 0.7, 0.7], 0.3).unwrap(), None);
        assert_eq!(select_by_scores(&[0.6, 0.4], 0.3).unwrap(), None);
        assert!(select_by_scores(&[0.6], 0.3).is_err());
        // earliest index wins ties
        assert_eq!(select_by_scores(&[0.1, 0.9, 0.9, 0.1], 0.3).unwrap(), Some((1, 0)));
    }

    proptest! {
        #[test]
        fn score_in_unit_interval(w in 0.0..=1.0f64, m in 0.0..=1.0f64, c in 0.0..=1.0f64,
                                  d in 0.0..=1.0f64, p in 1.0..6.0f64) {
            let s = composite_score(comps(w, m, c, d), &ScoreWeights { p, ..Default::default() }).unwrap().s;
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
