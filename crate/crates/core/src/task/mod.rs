//! Synthetic text-to-token world.
//!
//! Text symbols are vocabulary ids in `[text_offset, text_offset + text_vocab)`.
//! Each symbol expands to a fixed phrase of 1 to 3 output tokens; one symbol
//! (the pause symbol) expands to the single SILENCE token and marks phrase
//! boundaries. The reference render of a text is the concatenation of its
//! expansions followed by EOS.

mod dataset;
mod inject;
mod span;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::seq::{TokenId, TokenSeq, EOS};

pub use dataset::{corrupt_dataset, make_sft_dataset, CorruptionConfig, DatasetRecord};
pub use inject::{apply_edit, inject_error, CorruptedSample, Edit, Injector, SpanSizes};
pub use span::{ErrorCategory, ErrorKind, ErrorSpan};

pub const SILENCE: TokenId = 3;
pub const MAX_EXPANSION: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub text_vocab: usize,
    pub text_offset: TokenId,
    /// Expansion of each text symbol, indexed by symbol (not vocabulary id).
    pub token_map: Vec<Vec<TokenId>>,
    pub silence: TokenId,
    /// Symbol whose expansion is `[silence]`, if any.
    pub pause_symbol: Option<usize>,
    pub min_text_len: usize,
    pub max_text_len: usize,
    pub seed: u64,
}

/// Parameters for [`TaskSpec::generate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub text_vocab: usize,
    pub min_text_len: usize,
    pub max_text_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            text_vocab: 8,
            min_text_len: 2,
            max_text_len: 5,
        }
    }
}

impl TaskSpec {
    /// Builds a world with disjoint expansions over the speech-token range.
    ///
    /// Vocabulary layout: `0..3` specials, `3` SILENCE, then `text_vocab`
    /// text ids, then speech tokens up to `vocab_size`. Symbol 0 is the pause
    /// symbol.
    pub fn generate(world: &WorldConfig, seed: u64) -> Result<Self> {
        let text_offset = SILENCE + 1;
        let speech_lo = text_offset as usize + world.text_vocab;
        if world.text_vocab < 2 {
            return Err(Error::Config("text_vocab must be >= 2".into()));
        }
        if speech_lo >= world.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no speech tokens after {} text symbols",
                world.vocab_size, world.text_vocab
            )));
        }
        let mut speech: Vec<TokenId> = (speech_lo as TokenId..world.vocab_size as TokenId).collect();
        let spoken = world.text_vocab - 1;
        if speech.len() < spoken {
            return Err(Error::Config(format!(
                "{} speech tokens cannot give {spoken} symbols disjoint expansions",
                speech.len()
            )));
        }
        let mut rng = rng_from_seed(seed);
        speech.shuffle(&mut rng);
        let mut lens: Vec<usize> = (0..spoken)
            .map(|_| rng.gen_range(1..=MAX_EXPANSION))
            .collect();
        // shrink the longest expansions until the disjoint allocation fits
        while lens.iter().sum::<usize>() > speech.len() {
            let i = (0..lens.len()).max_by_key(|&i| (lens[i], usize::MAX - i)).unwrap();
            lens[i] -= 1;
        }
        let mut token_map = vec![vec![SILENCE]];
        let mut cursor = 0;
        for len in lens {
            token_map.push(speech[cursor..cursor + len].to_vec());
            cursor += len;
        }
        let spec = Self {
            text_vocab: world.text_vocab,
            text_offset,
            token_map,
            silence: SILENCE,
            pause_symbol: Some(0),
            min_text_len: world.min_text_len,
            max_text_len: world.max_text_len,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_map.len() != self.text_vocab {
            return Err(Error::Config(format!(
                "token_map has {} entries for text_vocab {}",
                self.token_map.len(),
                self.text_vocab
            )));
        }
        if let Some(i) = self
            .token_map
            .iter()
            .position(|e| e.is_empty() || e.len() > MAX_EXPANSION || e.contains(&EOS))
        {
            return Err(Error::Config(format!(
                "expansion of symbol {i} must hold 1..={MAX_EXPANSION} non-EOS tokens"
            )));
        }
        if self.min_text_len == 0 || self.min_text_len > self.max_text_len {
            return Err(Error::Config(format!(
                "text length range [{}, {}] is empty or starts at 0",
                self.min_text_len, self.max_text_len
            )));
        }
        Ok(())
    }

    /// Checks that every text within `max_text_len` fits a model stream of `max_len`.
    pub fn check_fits(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        let longest = self.token_map.iter().map(Vec::len).max().unwrap_or(0);
        let need = self.max_text_len + self.max_text_len * longest + 1;
        if need > max_len {
            return Err(Error::Config(format!(
                "longest text needs stream length {need}, model max_len is {max_len}"
            )));
        }
        let top = self
            .token_map
            .iter()
            .flatten()
            .copied()
            .chain([self.text_offset + self.text_vocab as TokenId - 1, self.silence])
            .max()
            .unwrap_or(0);
        if top as usize >= vocab_size {
            return Err(Error::Config(format!(
                "task uses token id {top}, model vocabulary has {vocab_size}"
            )));
        }
        Ok(())
    }

    pub fn text_id(&self, symbol: usize) -> TokenId {
        self.text_offset + symbol as TokenId
    }

    fn symbol_of(&self, id: TokenId) -> Option<usize> {
        let s = id.checked_sub(self.text_offset)? as usize;
        (s < self.text_vocab).then_some(s)
    }

    /// Tokens that may stand in for a mispronounced token: every expansion
    /// token other than SILENCE, sorted.
    pub fn speech_tokens(&self) -> Vec<TokenId> {
        let mut v: Vec<TokenId> = self
            .token_map
            .iter()
            .flatten()
            .copied()
            .filter(|&t| t != self.silence)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Draws a text: uniform length, square-free (no block of symbols repeated
    /// back to back), and the pause symbol never first or last.
    pub fn sample_text(&self, rng: &mut impl Rng) -> TokenSeq {
        let len = rng.gen_range(self.min_text_len..=self.max_text_len);
        let mut symbols: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let edge = i == 0 || i + 1 == len;
            let allowed: Vec<usize> = (0..self.text_vocab)
                .filter(|&s| !(edge && Some(s) == self.pause_symbol))
                .filter(|&s| {
                    symbols.push(s);
                    let ok = !ends_with_square(&symbols);
                    symbols.pop();
                    ok
                })
                .collect();
            // fall back to any non-repeating symbol if the vocabulary is tiny
            let pick = allowed.choose(rng).copied().unwrap_or_else(|| {
                (0..self.text_vocab)
                    .find(|&s| symbols.last() != Some(&s))
                    .unwrap_or(0)
            });
            symbols.push(pick);
        }
        TokenSeq::new(symbols.into_iter().map(|s| self.text_id(s)).collect())
    }
}

fn ends_with_square(s: &[usize]) -> bool {
    (1..=s.len() / 2).any(|k| s[s.len() - k..] == s[s.len() - 2 * k..s.len() - k])
}

pub fn reference_render(spec: &TaskSpec, text: &TokenSeq) -> Result<TokenSeq> {
    if text.len() > spec.max_text_len {
        return Err(Error::Domain(format!(
            "text length {} exceeds max_text_len {}",
            text.len(),
            spec.max_text_len
        )));
    }
    let mut out = Vec::new();
    for &id in text.tokens() {
        let sym = spec
            .symbol_of(id)
            .ok_or_else(|| Error::Domain(format!("token {id} is not a text symbol")))?;
        out.extend_from_slice(&spec.token_map[sym]);
    }
    out.push(EOS);
    Ok(TokenSeq::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_spec() -> TaskSpec {
        TaskSpec {
            text_vocab: 2,
            text_offset: 20,
            token_map: vec![vec![5, 6], vec![7]],
            silence: SILENCE,
            pause_symbol: None,
            min_text_len: 1,
            max_text_len: 4,
            seed: 0,
        }
    }

    #[test]
    fn empty_text_renders_eos() {
        let r = reference_render(&tiny_spec(), &TokenSeq::default()).unwrap();
        assert_eq!(r.tokens(), &[EOS]);
    }

    #[test]
    fn direct_rule_application() {
        let r = reference_render(&tiny_spec(), &TokenSeq::new(vec![20, 21])).unwrap();
        assert_eq!(r.tokens(), &[5, 6, 7, EOS]);
    }

    #[test]
    fn over_length_and_unknown_symbols_rejected() {
        let spec = tiny_spec();
        assert!(matches!(
            reference_render(&spec, &TokenSeq::new(vec![20; 5])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            reference_render(&spec, &TokenSeq::new(vec![22])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn generated_world_is_disjoint_and_fits() {
        let spec = TaskSpec::generate(&WorldConfig::default(), 3).unwrap();
        spec.check_fits(32, 32).unwrap();
        let mut all: Vec<TokenId> = spec.token_map[1..].iter().flatten().copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(spec.token_map[0], vec![SILENCE]);
        assert_eq!(spec, TaskSpec::generate(&WorldConfig::default(), 3).unwrap());
    }

    #[test]
    fn check_fits_rejects_small_models() {
        let spec = TaskSpec::generate(&WorldConfig::default(), 0).unwrap();
        assert!(spec.check_fits(32, 8).is_err());
        assert!(spec.check_fits(16, 64).is_err());
    }

    proptest! {
        #[test]
        fn render_length_is_sum_of_expansions(seed in 0u64..1000, world_seed in 0u64..20) {
            let spec = TaskSpec::generate(&WorldConfig::default(), world_seed).unwrap();
            let text = spec.sample_text(&mut rng_from_seed(seed));
            let render = reference_render(&spec, &text).unwrap();
            let mut tally = 1;
            for &t in text.tokens() {
                tally += spec.token_map[(t - spec.text_offset) as usize].len();
            }
            prop_assert_eq!(render.len(), tally);
            prop_assert!(render.ends_with_eos());
        }

        #[test]
        fn sampled_texts_respect_shape(seed in 0u64..1000) {
            let spec = TaskSpec::generate(&WorldConfig::default(), 1).unwrap();
            let text = spec.sample_text(&mut rng_from_seed(seed));
            let t = text.tokens();
            prop_assert!(t.len() >= spec.min_text_len && t.len() <= spec.max_text_len);
            for k in 1..=t.len() / 2 {
                for i in 0..=t.len() - 2 * k {
                    prop_assert!(t[i..i + k] != t[i + k..i + 2 * k]);
                }
            }
            let pause = spec.text_id(0);
            prop_assert!(t[0] != pause && t[t.len() - 1] != pause);
        }
    }
}
