use rand::Rng;

use super::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::seq::{GenSample, SampleMeta, TokenId, TokenSeq, BOS, EOS};

/// Ancestral sampling with temperature and top-k truncation.
///
/// Generation stops at EOS. When the stream reaches `max_len` without EOS,
/// the final slot is filled with a forced EOS and `meta.forced_eos` is set.
pub fn sample(
    ckpt: &ModelCheckpoint,
    condition: &TokenSeq,
    temperature: f64,
    top_k: usize,
    seed: u64,
) -> Result<GenSample> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Precondition(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if top_k == 0 || top_k > ckpt.config.vocab_size {
        return Err(Error::Precondition(format!(
            "top_k must be in [1, {}], got {top_k}",
            ckpt.config.vocab_size
        )));
    }
    let mut rng = rng_from_seed(seed);
    let (output, forced_eos) = decode(ckpt, condition, |lp| pick(lp, temperature, top_k, &mut rng))?;
    Ok(GenSample {
        condition: condition.clone(),
        output,
        meta: SampleMeta {
            temperature,
            top_k,
            seed,
            index: 0,
            forced_eos,
        },
        score: None,
    })
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy(ckpt: &ModelCheckpoint, condition: &TokenSeq) -> Result<TokenSeq> {
    decode(ckpt, condition, argmax).map(|(seq, _)| seq)
}

fn decode(
    ckpt: &ModelCheckpoint,
    condition: &TokenSeq,
    mut choose: impl FnMut(&[f64]) -> TokenId,
) -> Result<(TokenSeq, bool)> {
    let vocab = ckpt.config.vocab_size;
    if let Some(&t) = condition.tokens().iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Domain(format!(
            "condition token {t} outside vocabulary of size {vocab}"
        )));
    }
    if condition.len() + 1 > ckpt.config.max_len {
        return Err(Error::Domain(format!(
            "condition length {} leaves no room for output within max_len {}",
            condition.len(),
            ckpt.config.max_len
        )));
    }
    let max_out = ckpt.config.max_len - condition.len();
    let hd = ckpt.config.hidden_dim;
    let mut h = vec![0.0; hd];
    let mut next = vec![0.0; hd];
    for &t in condition.tokens() {
        ckpt.step(&h, t, &mut next);
        std::mem::swap(&mut h, &mut next);
    }
    ckpt.step(&h, BOS, &mut next);
    std::mem::swap(&mut h, &mut next);

    let mut lp = vec![0.0; vocab];
    let mut out = Vec::with_capacity(max_out);
    while out.len() + 1 < max_out {
        ckpt.log_probs(&h, &mut lp);
        let tok = choose(&lp);
        out.push(tok);
        if tok == EOS {
            return Ok((TokenSeq::new(out), false));
        }
        ckpt.step(&h, tok, &mut next);
        std::mem::swap(&mut h, &mut next);
    }
    out.push(EOS);
    Ok((TokenSeq::new(out), true))
}

fn argmax(lp: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in lp.iter().enumerate() {
        if *v > lp[best] {
            best = i;
        }
    }
    best as TokenId
}

fn pick(lp: &[f64], temperature: f64, top_k: usize, rng: &mut impl Rng) -> TokenId {
    // candidates ordered by logit descending, ties by id ascending
    let mut order: Vec<usize> = (0..lp.len()).collect();
    order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    let top = lp[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((lp[i] - top) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (w, &i) in weights.iter().zip(&order) {
        if u < *w {
            return i as TokenId;
        }
        u -= w;
    }
    order[order.len() - 1] as TokenId
}
