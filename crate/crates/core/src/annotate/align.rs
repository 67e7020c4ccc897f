//! Unit-cost Levenshtein alignment with a fixed tie-break.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{TokenId, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Match,
    Substitute,
    /// Reference token with no hypothesis counterpart.
    Delete,
    /// Hypothesis token with no reference counterpart.
    Insert,
}

/// One alignment column.
///
/// For `Insert`, `ref_index` is the reference cursor (the reference token the
/// insertion precedes); for `Delete`, `hyp_index` is the hypothesis cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignOp {
    pub op: OpKind,
    pub ref_index: usize,
    pub hyp_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AlignmentOps {
    pub ops: Vec<AlignOp>,
}

impl AlignmentOps {
    pub fn cost(&self) -> usize {
        self.ops.iter().filter(|o| o.op != OpKind::Match).count()
    }

    /// Checks that the ops walk both token slices exactly once, in order,
    /// with matches on equal tokens and substitutions on different ones.
    pub fn check(&self, reference: &[TokenId], hyp: &[TokenId]) -> Result<()> {
        let (mut i, mut j) = (0, 0);
        for (k, o) in self.ops.iter().enumerate() {
            let bad = |why: &str| Err(Error::Internal(format!("alignment op {k} {o:?}: {why}")));
            if o.ref_index != i || o.hyp_index != j {
                return bad("cursor mismatch");
            }
            match o.op {
                OpKind::Match | OpKind::Substitute => {
                    if i >= reference.len() || j >= hyp.len() {
                        return bad("past end");
                    }
                    if (reference[i] == hyp[j]) != (o.op == OpKind::Match) {
                        return bad("token equality disagrees with op");
                    }
                    i += 1;
                    j += 1;
                }
                OpKind::Delete => {
                    if i >= reference.len() {
                        return bad("past end of reference");
                    }
                    i += 1;
                }
                OpKind::Insert => {
                    if j >= hyp.len() {
                        return bad("past end of hypothesis");
                    }
                    j += 1;
                }
            }
        }
        if i != reference.len() || j != hyp.len() {
            return Err(Error::Internal("alignment does not cover both sequences".into()));
        }
        Ok(())
    }
}

/// Levenshtein distance, two-row DP.
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Minimal-cost alignment of the content tokens of `reference` and `hyp`.
///
/// The DP runs over suffixes and the path is read front to back, taking the
/// first optimal option in the order match, substitute, delete, insert. This
/// keeps matches as early as possible, so gaps land after the longest
/// matching prefix: repeated blocks are reported as the later copy and
/// truncations as a trailing deletion run.
pub fn align(reference: &TokenSeq, hyp: &TokenSeq) -> AlignmentOps {
    align_tokens(reference.content(), hyp.content())
}

pub fn align_tokens(r: &[TokenId], h: &[TokenId]) -> AlignmentOps {
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    // d[i * w + j] = distance between r[i..] and h[j..]
    let mut d = vec![0usize; (n + 1) * w];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            d[i * w + j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                (d[(i + 1) * w + j + 1] + usize::from(r[i] != h[j]))
                    .min(d[(i + 1) * w + j] + 1)
                    .min(d[i * w + j + 1] + 1)
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = d[i * w + j];
        let op = if i < n && j < m && r[i] == h[j] && here == d[(i + 1) * w + j + 1] {
            OpKind::Match
        } else if i < n && j < m && r[i] != h[j] && here == d[(i + 1) * w + j + 1] + 1 {
            OpKind::Substitute
        } else if i < n && here == d[(i + 1) * w + j] + 1 {
            OpKind::Delete
        } else {
            OpKind::Insert
        };
        ops.push(AlignOp {
            op,
            ref_index: i,
            hyp_index: j,
        });
        match op {
            OpKind::Match | OpKind::Substitute => {
                i += 1;
                j += 1;
            }
            OpKind::Delete => i += 1,
            OpKind::Insert => j += 1,
        }
    }
    AlignmentOps { ops }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::TokenSeq;

    #[test]
    fn identical_is_all_match() {
        let s = TokenSeq::terminated(&[5, 6, 7, 5]);
        let a = align(&s, &s);
        assert!(a.ops.iter().all(|o| o.op == OpKind::Match));
        assert_eq!(a.ops.len(), 4);
    }

    #[test]
    fn single_insert_example() {
        let a = align(&TokenSeq::terminated(&[5, 6, 7]), &TokenSeq::terminated(&[5, 6, 6, 7]));
        assert_eq!(a.cost(), 1);
        let ins: Vec<_> = a.ops.iter().filter(|o| o.op == OpKind::Insert).collect();
        assert_eq!(ins.len(), 1);
        assert_eq!(ins[0].hyp_index, 2);
        a.check(&[5, 6, 7], &[5, 6, 6, 7]).unwrap();
    }

    #[test]
    fn truncation_is_trailing_deletion() {
        // the kept prefix token recurs in the cut suffix
        let a = align_tokens(&[5, 6, 5, 7], &[5]);
        assert_eq!(a.ops[0].op, OpKind::Match);
        assert!(a.ops[1..].iter().all(|o| o.op == OpKind::Delete));
    }

    #[test]
    fn empty_sides() {
        assert_eq!(align_tokens(&[], &[4, 5]).cost(), 2);
        assert_eq!(align_tokens(&[4, 5], &[]).cost(), 2);
        assert!(align_tokens(&[], &[]).ops.is_empty());
        assert_eq!(edit_distance(&[], &[1, 2, 3]), 3);
    }

    #[test]
    fn check_rejects_bad_ops() {
        let mut a = align_tokens(&[5, 6], &[5, 7]);
        a.ops[1].op = OpKind::Match;
        assert!(a.check(&[5, 6], &[5, 7]).is_err());
        let a = align_tokens(&[5, 6], &[5, 7]);
        assert!(a.check(&[5, 6, 8], &[5, 7]).is_err());
    }
}
