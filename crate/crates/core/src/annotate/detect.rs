use super::align::{AlignmentOps, OpKind};
use crate::error::Result;
use crate::seq::{TokenId, TokenSeq};
use crate::task::{ErrorKind, ErrorSpan};

/// Classifies each maximal run of non-match alignment ops.
///
/// | run shape                                   | kind                 | span (hyp positions)        |
/// |---------------------------------------------|----------------------|-----------------------------|
/// | contains deletions, ends at reference end   | truncation           | onset .. max(end, onset+1)  |
/// | insertions only, all SILENCE, length >= 2   | abnormal silence     | inserted tokens             |
/// | insertions only, all SILENCE, length 1      | unnatural pause      | inserted token              |
/// | insertions only, copy of preceding tokens   | repetition           | the later copy              |
/// | anything else                               | mispronunciation     | touched tokens, or 1 token at a pure deletion |
///
/// A repeated block is slid right over equal tokens until it sits directly
/// after its source copy, which makes the span independent of where the
/// aligner placed the gap.
pub fn detect_spans(
    reference: &TokenSeq,
    hyp: &TokenSeq,
    ops: &AlignmentOps,
    silence: TokenId,
) -> Result<Vec<ErrorSpan>> {
    let r = reference.content();
    let h = hyp.content();
    ops.check(r, h)?;
    let full_len = h.len() + 1;

    // op that consumed each hyp position
    let mut hyp_op = vec![OpKind::Match; h.len()];
    for o in &ops.ops {
        if o.op != OpKind::Delete {
            hyp_op[o.hyp_index] = o.op;
        }
    }

    let mut spans = Vec::new();
    let mut k = 0;
    while k < ops.ops.len() {
        if ops.ops[k].op == OpKind::Match {
            k += 1;
            continue;
        }
        let start = k;
        while k < ops.ops.len() && ops.ops[k].op != OpKind::Match {
            k += 1;
        }
        let run = &ops.ops[start..k];
        let anchor = run[0].hyp_index;
        let touched: Vec<usize> = run
            .iter()
            .filter(|o| o.op != OpKind::Delete)
            .map(|o| o.hyp_index)
            .collect();
        let has_delete = run.iter().any(|o| o.op == OpKind::Delete);
        let inserts_only = run.iter().all(|o| o.op == OpKind::Insert);
        let ref_after = k == ops.ops.len();

        let span = if has_delete && ref_after {
            let end = touched.last().map_or(anchor + 1, |&t| t + 1).max(anchor + 1);
            ErrorSpan::new(anchor, end.min(full_len), ErrorKind::Truncation)
        } else if inserts_only {
            let (hs, he) = (anchor, anchor + run.len());
            if h[hs..he].iter().all(|&t| t == silence) {
                let kind = if he - hs >= 2 {
                    ErrorKind::AbnormalSilence
                } else {
                    ErrorKind::UnnaturalPause
                };
                ErrorSpan::new(hs, he, kind)
            } else if let Some(shift) = repetition_shift(h, &hyp_op, hs, he) {
                ErrorSpan::new(hs + shift, he + shift, ErrorKind::Repetition)
            } else {
                ErrorSpan::new(hs, he, ErrorKind::Mispronunciation)
            }
        } else if touched.is_empty() {
            ErrorSpan::new(anchor, (anchor + 1).min(full_len), ErrorKind::Mispronunciation)
        } else {
            let (first, last) = (touched[0], touched[touched.len() - 1]);
            ErrorSpan::new(first, last + 1, ErrorKind::Mispronunciation)
        };
        spans.push(span);
    }
    Ok(spans)
}

/// Smallest slide `d` such that the inserted block `[hs+d, he+d)` is an
/// equally cheap placement and copies the `len` tokens just before it.
fn repetition_shift(h: &[TokenId], hyp_op: &[OpKind], hs: usize, he: usize) -> Option<usize> {
    let len = he - hs;
    let mut d = 0;
    loop {
        let (s, e) = (hs + d, he + d);
        if s >= len && h[s - len..s] == h[s..e] {
            return Some(d);
        }
        // sliding one step right swaps h[s] (inserted) with h[e] (matched)
        if e >= h.len() || hyp_op[e] != OpKind::Match || h[s] != h[e] {
            return None;
        }
        d += 1;
    }
}
