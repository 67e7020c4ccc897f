//! Small recurrent token model with exact gradients.
//!
//! The condition tokens and the generated tokens share one stream, as in a
//! decoder-only language model:
//!
//! ```text
//! stream  = condition ++ [BOS] ++ output[..n-1]
//! h_t     = tanh(embed[x_t] + W_hh h_{t-1} + b_h),   h_{-1} = 0
//! logp_t  = log_softmax(W_out h_t + b_out)
//! ```
//!
//! The prediction for `output[i]` is read from `h` at stream index
//! `condition.len() + i`, i.e. after BOS and the first `i` outputs have been
//! consumed.

mod gradcheck;
mod io;
mod sample;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::seq::{TokenId, TokenSeq, BOS, EOS};

pub use gradcheck::{check_gradient, gradient_check, GradCheckReport, REL_ERROR_FLOOR};
pub use io::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use sample::{greedy, sample};

pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureTag {
    /// Single tanh recurrent layer, untied embedding and output head.
    #[default]
    ElmanTanhV1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    /// Upper bound on `condition.len() + output.len()`.
    pub max_len: usize,
    #[serde(default)]
    pub architecture_tag: ArchitectureTag,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            hidden_dim: 48,
            max_len: 32,
            architecture_tag: ArchitectureTag::ElmanTanhV1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 4 (PAD, BOS, EOS and one content token), got {}",
                self.vocab_size
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len must be >= 2, got {}",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.vocab_size, self.hidden_dim)
    }
}

/// A named contiguous range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Offsets of each weight block inside the flat parameter vector.
///
/// Row-major blocks, in this order:
/// `embed [V x H]`, `w_hh [H x H]`, `b_h [H]`, `w_out [V x H]`, `b_out [V]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub vocab: usize,
    pub hidden: usize,
    pub embed: usize,
    pub w_hh: usize,
    pub b_h: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(vocab: usize, hidden: usize) -> Self {
        let embed = 0;
        let w_hh = embed + vocab * hidden;
        let b_h = w_hh + hidden * hidden;
        let w_out = b_h + hidden;
        let b_out = w_out + vocab * hidden;
        let total = b_out + vocab;
        Self {
            vocab,
            hidden,
            embed,
            w_hh,
            b_h,
            w_out,
            b_out,
            total,
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        let seg = |name: &str, offset, len| Segment {
            name: name.to_string(),
            offset,
            len,
        };
        vec![
            seg("embed", self.embed, self.vocab * self.hidden),
            seg("w_hh", self.w_hh, self.hidden * self.hidden),
            seg("b_h", self.b_h, self.hidden),
            seg("w_out", self.w_out, self.vocab * self.hidden),
            seg("b_out", self.b_out, self.vocab),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub rng_seed: u64,
}

/// Per-position log-probabilities of the realized output tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbTrace(pub Vec<f64>);

impl LogProbTrace {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let params = (0..config.layout().total)
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    Ok(ModelCheckpoint {
        config: config.clone(),
        params,
        rng_seed: seed,
    })
}

impl ModelCheckpoint {
    pub fn layout(&self) -> ParamLayout {
        self.config.layout()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.layout().total;
        if self.params.len() != expected {
            return Err(Error::Format(format!(
                "parameter count {} does not match architecture ({expected})",
                self.params.len()
            )));
        }
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Format(format!("parameter {i} is not finite")));
        }
        Ok(())
    }

    /// One recurrent step: writes `tanh(embed[token] + W_hh h_prev + b_h)` into `out`.
    pub(crate) fn step(&self, h_prev: &[f64], token: TokenId, out: &mut [f64]) {
        let l = self.layout();
        let hd = l.hidden;
        let p = &self.params;
        let emb = &p[l.embed + token as usize * hd..][..hd];
        for i in 0..hd {
            let row = &p[l.w_hh + i * hd..][..hd];
            let mut acc = emb[i] + p[l.b_h + i];
            for (w, h) in row.iter().zip(h_prev) {
                acc += w * h;
            }
            out[i] = acc.tanh();
        }
    }

    /// Log-softmax of the output head at hidden state `h`, written into `out`.
    pub(crate) fn log_probs(&self, h: &[f64], out: &mut [f64]) {
        let l = self.layout();
        let hd = l.hidden;
        let p = &self.params;
        for (v, o) in out.iter_mut().enumerate().take(l.vocab) {
            let row = &p[l.w_out + v * hd..][..hd];
            *o = p[l.b_out + v] + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>();
        }
        log_softmax_in_place(out);
    }

    fn check_tokens(&self, seq: &TokenSeq, what: &str) -> Result<()> {
        let vocab = self.config.vocab_size;
        if let Some(&t) = seq.tokens().iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Domain(format!(
                "{what} token {t} outside vocabulary of size {vocab}"
            )));
        }
        Ok(())
    }

    fn check_pair(&self, condition: &TokenSeq, output: &TokenSeq) -> Result<()> {
        self.check_tokens(condition, "condition")?;
        self.check_tokens(output, "output")?;
        if !output.ends_with_eos() {
            return Err(Error::MalformedSequence("output does not end with EOS".into()));
        }
        if output.tokens()[..output.len() - 1].contains(&EOS) {
            return Err(Error::MalformedSequence("EOS before end of output".into()));
        }
        let total = condition.len() + output.len();
        if total > self.config.max_len {
            return Err(Error::Domain(format!(
                "condition + output length {total} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Hidden states over the whole stream (`T x H`, row-major).
    fn run_stream(&self, stream: &[TokenId]) -> Vec<f64> {
        let hd = self.config.hidden_dim;
        let mut hs = vec![0.0; stream.len() * hd];
        let zero = vec![0.0; hd];
        for (t, &tok) in stream.iter().enumerate() {
            let (before, rest) = hs.split_at_mut(t * hd);
            let prev = if t == 0 { &zero[..] } else { &before[(t - 1) * hd..] };
            self.step(prev, tok, &mut rest[..hd]);
        }
        hs
    }

    pub fn sequence_logprob(&self, condition: &TokenSeq, output: &TokenSeq) -> Result<LogProbTrace> {
        self.check_pair(condition, output)?;
        let stream = build_stream(condition, output);
        let hs = self.run_stream(&stream);
        let hd = self.config.hidden_dim;
        let m = condition.len();
        let mut lp = vec![0.0; self.config.vocab_size];
        let trace = output
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                self.log_probs(&hs[(m + i) * hd..][..hd], &mut lp);
                lp[y as usize]
            })
            .collect();
        Ok(LogProbTrace(trace))
    }

    /// Gradient of `sum_i weights[i] * logp(output_i | ...)` with respect to the parameters.
    ///
    /// `weights` is aligned with `output`; entries that are zero contribute nothing.
    pub fn grad_weighted_loglik(
        &self,
        condition: &TokenSeq,
        output: &TokenSeq,
        weights: &[f64],
    ) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_weighted_grad(condition, output, weights, &mut grad)?;
        Ok(grad)
    }

    pub(crate) fn accumulate_weighted_grad(
        &self,
        condition: &TokenSeq,
        output: &TokenSeq,
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_pair(condition, output)?;
        if weights.len() != output.len() {
            return Err(Error::Internal(format!(
                "weight vector length {} does not match output length {}",
                weights.len(),
                output.len()
            )));
        }
        let l = self.layout();
        let hd = l.hidden;
        let vocab = l.vocab;
        let p = &self.params;
        let stream = build_stream(condition, output);
        let hs = self.run_stream(&stream);
        let m = condition.len();
        let t_len = stream.len();

        // dL/dh_t from the output head, one row per stream position
        let mut dh = vec![0.0; t_len * hd];
        let mut lp = vec![0.0; vocab];
        for (i, (&y, &w)) in output.tokens().iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let t = m + i;
            let h = &hs[t * hd..][..hd];
            self.log_probs(h, &mut lp);
            for v in 0..vocab {
                let indicator = if v == y as usize { 1.0 } else { 0.0 };
                let dlogit = w * (indicator - lp[v].exp());
                if dlogit == 0.0 {
                    continue;
                }
                grad[l.b_out + v] += dlogit;
                let row = &p[l.w_out + v * hd..][..hd];
                let grow = &mut grad[l.w_out + v * hd..][..hd];
                let dht = &mut dh[t * hd..][..hd];
                for k in 0..hd {
                    grow[k] += dlogit * h[k];
                    dht[k] += dlogit * row[k];
                }
            }
        }

        // backpropagation through time
        let mut carry = vec![0.0; hd];
        let mut da = vec![0.0; hd];
        for t in (0..t_len).rev() {
            let h = &hs[t * hd..][..hd];
            for k in 0..hd {
                let total = dh[t * hd + k] + carry[k];
                da[k] = total * (1.0 - h[k] * h[k]);
            }
            let tok = stream[t] as usize;
            for k in 0..hd {
                grad[l.embed + tok * hd + k] += da[k];
                grad[l.b_h + k] += da[k];
            }
            carry.iter_mut().for_each(|c| *c = 0.0);
            if t > 0 {
                let h_prev = &hs[(t - 1) * hd..][..hd];
                for i in 0..hd {
                    if da[i] == 0.0 {
                        continue;
                    }
                    let row = &p[l.w_hh + i * hd..][..hd];
                    let grow = &mut grad[l.w_hh + i * hd..][..hd];
                    for j in 0..hd {
                        grow[j] += da[i] * h_prev[j];
                        carry[j] += da[i] * row[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Exact gradient of the summed log-likelihood of `output`.
    pub fn grad_loglik(&self, condition: &TokenSeq, output: &TokenSeq) -> Result<Vec<f64>> {
        self.grad_weighted_loglik(condition, output, &vec![1.0; output.len()])
    }

    /// Full next-token log-distribution after each output prefix.
    ///
    /// Row `i` is `log p(. | condition, output[..i])`.
    pub fn next_token_logprobs(&self, condition: &TokenSeq, output: &TokenSeq) -> Result<Vec<Vec<f64>>> {
        self.check_pair(condition, output)?;
        let stream = build_stream(condition, output);
        let hs = self.run_stream(&stream);
        let hd = self.config.hidden_dim;
        let m = condition.len();
        Ok((0..output.len())
            .map(|i| {
                let mut lp = vec![0.0; self.config.vocab_size];
                self.log_probs(&hs[(m + i) * hd..][..hd], &mut lp);
                lp
            })
            .collect())
    }
}

pub fn sequence_logprob(
    ckpt: &ModelCheckpoint,
    condition: &TokenSeq,
    output: &TokenSeq,
) -> Result<LogProbTrace> {
    ckpt.sequence_logprob(condition, output)
}

pub fn grad_loglik(ckpt: &ModelCheckpoint, condition: &TokenSeq, output: &TokenSeq) -> Result<Vec<f64>> {
    ckpt.grad_loglik(condition, output)
}

fn build_stream(condition: &TokenSeq, output: &TokenSeq) -> Vec<TokenId> {
    let mut stream = Vec::with_capacity(condition.len() + output.len());
    stream.extend_from_slice(condition.tokens());
    stream.push(BOS);
    stream.extend_from_slice(&output.tokens()[..output.len() - 1]);
    stream
}

pub(crate) fn log_softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter_mut().for_each(|v| *v -= lse);
}
