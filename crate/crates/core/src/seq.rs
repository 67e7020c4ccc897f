//! Token sequences and sampled generations.

use serde::{Deserialize, Serialize};

use crate::scoring::CompositeScore;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

/// A sequence of vocabulary ids.
///
/// Generated outputs carry an explicit trailing [`EOS`]; conditions (text) do not.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    /// Builds an output sequence from content tokens, appending EOS.
    pub fn terminated(content: &[TokenId]) -> Self {
        let mut v = Vec::with_capacity(content.len() + 1);
        v.extend_from_slice(content);
        v.push(EOS);
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Every token before the first EOS.
    ///
    /// Content index `i` is output position `i`; a stray special id sampled by
    /// a model stays in place and counts as an ordinary (wrong) token.
    pub fn content(&self) -> &[TokenId] {
        let end = self
            .0
            .iter()
            .position(|&t| t == EOS)
            .unwrap_or(self.0.len());
        &self.0[..end]
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

/// Decoding settings and outcome flags for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    /// Position of this sample within its prompt's candidate group.
    pub index: usize,
    /// Set when the length limit was hit and EOS was forced.
    pub forced_eos: bool,
}

/// One sampled generation, optionally scored against the reference render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSample {
    pub condition: TokenSeq,
    pub output: TokenSeq,
    pub meta: SampleMeta,
    pub score: Option<CompositeScore>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_strips_specials() {
        let s = TokenSeq::terminated(&[5, 6, 7]);
        assert_eq!(s.tokens(), &[5, 6, 7, EOS]);
        assert_eq!(s.content(), &[5, 6, 7]);
        assert!(s.ends_with_eos());
        assert_eq!(TokenSeq::new(vec![EOS]).content(), &[] as &[TokenId]);
        assert_eq!(TokenSeq::new(vec![BOS, 4, EOS]).content(), &[BOS, 4]);
        assert_eq!(TokenSeq::new(vec![4, 5]).content(), &[4, 5]);
    }
}
