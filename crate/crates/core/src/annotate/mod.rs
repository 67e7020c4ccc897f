//! Token-level error localization and indicator masks.
//!
//! Spans are found by aligning a generated sequence against the reference
//! render and classifying the non-matching runs; masks then follow the two
//! shape rules (intervals for temporal errors, onset-to-end for
//! semantic-phonetic ones).

mod align;
mod detect;
mod mask;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scoring::CompositeScore;
use crate::seq::{TokenId, TokenSeq};
use crate::task::ErrorSpan;

pub use align::{align, align_tokens, edit_distance, AlignOp, AlignmentOps, OpKind};
pub use detect::detect_spans;
pub use mask::{
    aligned_token_pairs, build_masks, indicator, span_mask, IndicatorMask, PairMasks,
    WinnerMaskPolicy,
};

/// Spans of `hyp` relative to the reference render.
pub fn locate_errors(reference: &TokenSeq, hyp: &TokenSeq, silence: TokenId) -> Result<Vec<ErrorSpan>> {
    detect_spans(reference, hyp, &align(reference, hyp), silence)
}

/// A selected winner/loser pair with its fine-grained annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub condition: TokenSeq,
    pub winner: TokenSeq,
    pub loser: TokenSeq,
    pub score_w: CompositeScore,
    pub score_l: CompositeScore,
    pub spans_w: Vec<ErrorSpan>,
    pub spans_l: Vec<ErrorSpan>,
    pub mask_w: IndicatorMask,
    pub mask_l: IndicatorMask,
    pub aligned_pairs: Vec<(usize, usize)>,
    pub degenerate: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn annotate_pair(
    condition: &TokenSeq,
    reference: &TokenSeq,
    winner: &TokenSeq,
    loser: &TokenSeq,
    score_w: CompositeScore,
    score_l: CompositeScore,
    silence: TokenId,
    policy: WinnerMaskPolicy,
) -> Result<PreferencePair> {
    let spans_w = locate_errors(reference, winner, silence)?;
    let spans_l = locate_errors(reference, loser, silence)?;
    let masks = build_masks(winner, loser, &spans_l, &spans_w, policy)?;
    Ok(PreferencePair {
        condition: condition.clone(),
        winner: winner.clone(),
        loser: loser.clone(),
        score_w,
        score_l,
        spans_w,
        spans_l,
        mask_w: masks.mask_w,
        mask_l: masks.mask_l,
        aligned_pairs: masks.aligned_pairs,
        degenerate: masks.degenerate,
    })
}
