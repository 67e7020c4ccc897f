use serde::{Deserialize, Serialize};

use super::align::{align, OpKind};
use crate::error::{Error, Result};
use crate::seq::TokenSeq;
use crate::task::{ErrorCategory, ErrorSpan};

/// One indicator bit per output position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndicatorMask(pub Vec<bool>);

impl IndicatorMask {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, i: usize) -> Result<u8> {
        indicator(self, i)
    }

    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<Vec<bool>>>()
            .map(Self)
    }

    /// True when the set bits form one block ending at the last position.
    pub fn is_suffix(&self) -> bool {
        match self.0.iter().position(|b| *b) {
            Some(first) => self.0[first..].iter().all(|b| *b),
            None => false,
        }
    }
}

impl Serialize for IndicatorMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for IndicatorMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_bitstring(&s).map_err(serde::de::Error::custom)
    }
}

/// `I(y^i)`: 1 inside an error segment, 0 otherwise.
pub fn indicator(mask: &IndicatorMask, i: usize) -> Result<u8> {
    mask.0
        .get(i)
        .map(|&b| u8::from(b))
        .ok_or(Error::Index { index: i, len: mask.len() })
}

/// Mask for one sequence from its spans.
///
/// Temporal spans mark only their own positions. The earliest
/// semantic-phonetic onset marks every position from there to the end.
pub fn span_mask(len: usize, spans: &[ErrorSpan]) -> Result<IndicatorMask> {
    let mut bits = vec![false; len];
    for s in spans {
        if !s.is_valid_for(len) {
            return Err(Error::Precondition(format!(
                "span [{}, {}) invalid for sequence of length {len}",
                s.start, s.end
            )));
        }
        bits[s.start..s.end].iter_mut().for_each(|b| *b = true);
    }
    if let Some(onset) = spans
        .iter()
        .filter(|s| s.category() == ErrorCategory::SemanticPhonetic)
        .map(|s| s.start)
        .min()
    {
        bits[onset..].iter_mut().for_each(|b| *b = true);
    }
    Ok(IndicatorMask(bits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinnerMaskPolicy {
    /// Winner positions aligned to the loser's masked region.
    #[default]
    Aligned,
    /// Winner masked from its own detected spans only.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMasks {
    pub mask_w: IndicatorMask,
    pub mask_l: IndicatorMask,
    /// `(winner position, loser position)` counterparts inside the loser's
    /// masked region, in alignment order.
    pub aligned_pairs: Vec<(usize, usize)>,
    pub degenerate: bool,
}

/// Walks the winner-to-loser alignment and pairs every masked loser position
/// with its winner counterpart.
///
/// Loser-only tokens pair with the winner token at the same cursor (the token
/// the winner produced where the loser went astray); winner-only tokens pair
/// with the loser cursor. The EOS positions pair with each other.
pub fn aligned_token_pairs(winner: &TokenSeq, loser: &TokenSeq, mask_l: &IndicatorMask) -> Vec<(usize, usize)> {
    let (lw, ll) = (winner.len(), loser.len());
    let masked = |l: usize| mask_l.0.get(l.min(ll - 1)).copied().unwrap_or(false);
    let mut pairs = Vec::new();
    for o in align(winner, loser).ops {
        let (w, l) = (o.ref_index.min(lw - 1), o.hyp_index.min(ll - 1));
        let hit = match o.op {
            OpKind::Match | OpKind::Substitute | OpKind::Insert => masked(o.hyp_index),
            OpKind::Delete => masked(l),
        };
        if hit {
            pairs.push((w, l));
        }
    }
    if masked(ll - 1) {
        pairs.push((lw - 1, ll - 1));
    }
    pairs
}

pub fn build_masks(
    winner: &TokenSeq,
    loser: &TokenSeq,
    spans_l: &[ErrorSpan],
    spans_w: &[ErrorSpan],
    policy: WinnerMaskPolicy,
) -> Result<PairMasks> {
    if winner.is_empty() || loser.is_empty() {
        return Err(Error::Precondition("pair sequences must be non-empty".into()));
    }
    if spans_l.is_empty() {
        return Ok(PairMasks {
            mask_w: IndicatorMask::zeros(winner.len()),
            mask_l: IndicatorMask::zeros(loser.len()),
            aligned_pairs: Vec::new(),
            degenerate: true,
        });
    }
    let mask_l = span_mask(loser.len(), spans_l)?;
    let aligned_pairs = aligned_token_pairs(winner, loser, &mask_l);
    let mask_w = match policy {
        WinnerMaskPolicy::Aligned => {
            let mut bits = vec![false; winner.len()];
            for &(w, _) in &aligned_pairs {
                bits[w] = true;
            }
            IndicatorMask(bits)
        }
        WinnerMaskPolicy::Independent => span_mask(winner.len(), spans_w)?,
    };
    Ok(PairMasks {
        mask_w,
        mask_l,
        aligned_pairs,
        degenerate: false,
    })
}
