//! Error injection: deterministic segmental edits on clean renders.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ErrorKind, ErrorSpan, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::seq::{TokenId, TokenSeq};

/// Inclusive size ranges for each span-producing kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpanSizes {
    pub mispronunciation: (usize, usize),
    pub abnormal_silence: (usize, usize),
    pub unnatural_pause: (usize, usize),
    pub repetition: (usize, usize),
}

impl Default for SpanSizes {
    fn default() -> Self {
        Self {
            mispronunciation: (1, 3),
            abnormal_silence: (2, 5),
            // a 2-token pause is indistinguishable from a short abnormal silence
            unnatural_pause: (1, 1),
            repetition: (2, 5),
        }
    }
}

/// A fully specified corruption of a clean sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "edit")]
pub enum Edit {
    /// Overwrite `replacement.len()` tokens starting at `start`.
    Substitute { start: usize, replacement: Vec<TokenId> },
    /// Insert `count` SILENCE tokens before position `at`.
    InsertSilence { at: usize, count: usize, kind: ErrorKind },
    /// Duplicate `[start, start + len)` immediately after itself.
    Repeat { start: usize, len: usize },
    /// Keep the first `keep` content tokens, then EOS.
    Truncate { keep: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedSample {
    pub clean: TokenSeq,
    pub corrupted: TokenSeq,
    /// Spans index into `corrupted`.
    pub injected_spans: Vec<ErrorSpan>,
}

impl CorruptedSample {
    /// Undoes the recorded edits.
    ///
    /// Truncation cannot be undone; its retained prefix is returned unchanged.
    pub fn revert(&self) -> TokenSeq {
        let mut out = self.corrupted.tokens().to_vec();
        for span in self.injected_spans.iter().rev() {
            match span.kind {
                ErrorKind::Mispronunciation => {
                    out[span.start..span.end]
                        .copy_from_slice(&self.clean.tokens()[span.start..span.end]);
                }
                ErrorKind::AbnormalSilence | ErrorKind::UnnaturalPause | ErrorKind::Repetition => {
                    out.drain(span.start..span.end);
                }
                ErrorKind::Truncation => {}
            }
        }
        TokenSeq::new(out)
    }
}

/// Applies `edit` to a clean output sequence (content followed by EOS).
pub fn apply_edit(clean: &TokenSeq, edit: &Edit, silence: TokenId) -> Result<CorruptedSample> {
    if !clean.ends_with_eos() {
        return Err(Error::MalformedSequence("clean sequence must end with EOS".into()));
    }
    let content = clean.content();
    let n = content.len();
    let bad = |msg: String| Err(Error::Injection(msg));
    let (corrupted, span) = match edit {
        Edit::Substitute { start, replacement } => {
            let end = start + replacement.len();
            if replacement.is_empty() || end > n {
                return bad(format!("substitution [{start}, {end}) outside content of length {n}"));
            }
            if replacement.iter().zip(&content[*start..end]).any(|(a, b)| a == b) {
                return bad("substitution must change every token in its span".into());
            }
            let mut v = content.to_vec();
            v[*start..end].copy_from_slice(replacement);
            (v, ErrorSpan::new(*start, end, ErrorKind::Mispronunciation))
        }
        Edit::InsertSilence { at, count, kind } => {
            if !matches!(kind, ErrorKind::AbnormalSilence | ErrorKind::UnnaturalPause) {
                return bad(format!("silence insertion cannot produce {kind}"));
            }
            if *count == 0 || *at == 0 || *at >= n {
                return bad(format!("silence insertion at {at} (count {count}) not internal to length {n}"));
            }
            let mut v = content[..*at].to_vec();
            v.extend(std::iter::repeat_n(silence, *count));
            v.extend_from_slice(&content[*at..]);
            (v, ErrorSpan::new(*at, at + count, *kind))
        }
        Edit::Repeat { start, len } => {
            let end = start + len;
            if *len == 0 || end > n {
                return bad(format!("repetition [{start}, {end}) outside content of length {n}"));
            }
            let mut v = content[..end].to_vec();
            v.extend_from_slice(&content[*start..end]);
            v.extend_from_slice(&content[end..]);
            (v, ErrorSpan::new(end, end + len, ErrorKind::Repetition))
        }
        Edit::Truncate { keep } => {
            if *keep == 0 || *keep >= n {
                return bad(format!("truncation must keep 1..{n} tokens, got {keep}"));
            }
            (content[..*keep].to_vec(), ErrorSpan::new(*keep, keep + 1, ErrorKind::Truncation))
        }
    };
    Ok(CorruptedSample {
        clean: clean.clone(),
        corrupted: TokenSeq::terminated(&corrupted),
        injected_spans: vec![span],
    })
}

/// Draws random edits of a requested kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injector {
    pub silence: TokenId,
    /// Candidate replacement tokens for mispronunciations.
    pub pool: Vec<TokenId>,
    /// Per-token confusable replacements; tokens without an entry draw from `pool`.
    pub confusions: BTreeMap<TokenId, Vec<TokenId>>,
    pub sizes: SpanSizes,
}

impl Injector {
    pub fn for_task(spec: &TaskSpec) -> Self {
        Self {
            silence: spec.silence,
            pool: spec.speech_tokens(),
            confusions: BTreeMap::new(),
            sizes: SpanSizes::default(),
        }
    }

    /// Gives every pool token `n` fixed confusable tokens drawn from the rest
    /// of the pool. `n == 0` keeps uniform substitution.
    pub fn with_confusions(mut self, n: usize, seed: u64) -> Self {
        self.confusions.clear();
        if n == 0 {
            return self;
        }
        let mut rng = rng_from_seed(seed);
        for &t in &self.pool {
            let mut others: Vec<TokenId> =
                self.pool.iter().copied().filter(|&o| o != t && o != self.silence).collect();
            others.shuffle(&mut rng);
            others.truncate(n);
            self.confusions.insert(t, others);
        }
        self
    }

    pub fn with_sizes(mut self, sizes: SpanSizes) -> Self {
        self.sizes = sizes;
        self
    }

    pub fn draw_edit(&self, clean: &TokenSeq, kind: ErrorKind, rng: &mut impl Rng) -> Result<Edit> {
        let content = clean.content();
        let n = content.len();
        if n < 3 {
            return Err(Error::Injection(format!(
                "{kind} needs at least 3 content tokens, got {n}"
            )));
        }
        let sil = self.silence;
        let draw = |rng: &mut dyn rand::RngCore, (lo, hi): (usize, usize), cap: usize| -> Result<usize> {
            let hi = hi.min(cap);
            if lo == 0 || lo > hi {
                return Err(Error::Injection(format!(
                    "{kind} span size range [{lo}, {hi}] is empty for length {n}"
                )));
            }
            Ok(rng.gen_range(lo..=hi))
        };
        match kind {
            ErrorKind::Mispronunciation => {
                let drawn = draw(rng, self.sizes.mispronunciation, n)?;
                for len in (1..=drawn).rev() {
                    let starts: Vec<usize> = (0..=n - len)
                        .filter(|&s| !content[s..s + len].contains(&sil))
                        .collect();
                    let Some(&start) = starts.choose(rng) else { continue };
                    let mut replacement = Vec::with_capacity(len);
                    for &orig in &content[start..start + len] {
                        let source = self.confusions.get(&orig).unwrap_or(&self.pool);
                        let choices: Vec<TokenId> =
                            source.iter().copied().filter(|&t| t != orig && t != sil).collect();
                        let t = *choices.choose(rng).ok_or_else(|| {
                            Error::Injection("substitution pool has no alternative token".into())
                        })?;
                        replacement.push(t);
                    }
                    return Ok(Edit::Substitute { start, replacement });
                }
                Err(Error::Injection("no silence-free span to mispronounce".into()))
            }
            ErrorKind::AbnormalSilence => {
                let count = draw(rng, self.sizes.abnormal_silence, usize::MAX)?;
                let at = rng.gen_range(1..n);
                Ok(Edit::InsertSilence { at, count, kind })
            }
            ErrorKind::UnnaturalPause => {
                let count = draw(rng, self.sizes.unnatural_pause, usize::MAX)?;
                let sites: Vec<usize> = (1..n)
                    .filter(|&p| content[p - 1] != sil && content[p] != sil)
                    .collect();
                let at = *sites
                    .choose(rng)
                    .ok_or_else(|| Error::Injection("no phrase-internal position for a pause".into()))?;
                Ok(Edit::InsertSilence { at, count, kind })
            }
            ErrorKind::Repetition => {
                let len = draw(rng, self.sizes.repetition, n)?;
                let start = rng.gen_range(0..=n - len);
                Ok(Edit::Repeat { start, len })
            }
            ErrorKind::Truncation => Ok(Edit::Truncate {
                keep: rng.gen_range(1..n),
            }),
        }
    }

    pub fn inject(&self, clean: &TokenSeq, kind: ErrorKind, seed: u64) -> Result<CorruptedSample> {
        let mut rng = rng_from_seed(seed);
        let edit = self.draw_edit(clean, kind, &mut rng)?;
        apply_edit(clean, &edit, self.silence)
    }
}

pub fn inject_error(
    injector: &Injector,
    clean: &TokenSeq,
    kind: ErrorKind,
    seed: u64,
) -> Result<CorruptedSample> {
    injector.inject(clean, kind, seed)
}
