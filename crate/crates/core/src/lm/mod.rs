//! Miniature decoder-only language model: forward pass, exact reverse-mode
//! gradients, decoding, text embeddings, checkpoints and pretraining.

mod compute;
mod model;
mod train;
pub mod vocab;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use compute::{log_softmax, softmax, ForwardTrace, LossGrad};
pub use model::{Layout, LayerOffsets, LmConfig, MicroLm, Slice, INIT_STD};
pub use train::{clip_grad, cross_entropy_grad, train_lm, train_lm_with, Adam, StepLog, TrainConfig};
pub use vocab::{Vocab, BOS, EOS, N_RESERVED, PAD, SEP, UNK};

use crate::error::{Error, Result};

/// How a text is condensed into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Hidden state at the final token.
    #[default]
    FinalToken,
    /// Mean of the per-token hidden states.
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_token" | "final" => Ok(Self::FinalToken),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("unknown segment representation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FinalToken => "final_token",
            Self::Mean => "mean",
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl MicroLm {
    /// Sum of next-token log-probabilities of `continuation` after `prefix`.
    pub fn log_prob(&self, prefix: &[usize], continuation: &[usize]) -> Result<f64> {
        Ok(self.log_prob_with_trace(prefix, continuation)?.0)
    }

    /// Log-probability plus the trace and the logit gradient of that
    /// log-probability (positions before `prefix.len() - 1` get zeros).
    pub fn log_prob_with_trace(
        &self,
        prefix: &[usize],
        continuation: &[usize],
    ) -> Result<(f64, ForwardTrace, Array2<f64>)> {
        if continuation.is_empty() {
            return Err(Error::InvalidArgument("log_prob of an empty continuation".into()));
        }
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("log_prob needs a non-empty prefix".into()));
        }
        let tokens: Vec<usize> = prefix.iter().chain(continuation).copied().collect();
        let trace = self.forward(&tokens)?;
        let mut dlogits = Array2::zeros(trace.logits.raw_dim());
        let mut total = 0.0;
        for (i, &tok) in continuation.iter().enumerate() {
            let pos = prefix.len() + i - 1;
            let lp = log_softmax(trace.logits.row(pos));
            total += lp[tok];
            let mut row = dlogits.row_mut(pos);
            for (v, g) in lp.iter().zip(row.iter_mut()) {
                *g = -v.exp();
            }
            row[tok] += 1.0;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                stage: "log_prob",
                detail: format!("{total}"),
            });
        }
        Ok((total, trace, dlogits))
    }

    /// Next-token logits at the end of `context`.
    pub fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        let h = self.last_hidden(context)?;
        Ok(self.project(h.as_slice().expect("contiguous")))
    }

    /// Argmax decoding; stops at `EOS`, `max_new` tokens or the context limit.
    /// The returned continuation excludes the `EOS`.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        self.decode_by(prompt, max_new, argmax)
    }

    /// Temperature sampling. `temperature → 0` approaches greedy decoding.
    pub fn sample_decode<R: Rng>(
        &self,
        prompt: &[usize],
        max_new: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {temperature}")));
        }
        self.decode_by(prompt, max_new, |logits| {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let p = softmax(Array1::from(scaled).view());
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            argmax(&p)
        })
    }

    fn decode_by(
        &self,
        prompt: &[usize],
        max_new: usize,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("decode needs a non-empty prompt".into()));
        }
        let mut ctx = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && ctx.len() < self.config.max_seq_len {
            let logits = self.next_logits(&ctx)?;
            let tok = pick(&logits);
            if tok == EOS {
                break;
            }
            ctx.push(tok);
            out.push(tok);
        }
        Ok(out)
    }

    /// Tokens fed to the encoder for a text: `BOS` then the words.
    pub fn embed_tokens_of(&self, text: &str) -> Result<Vec<usize>> {
        let words = self.vocab.encode(text);
        if words.is_empty() {
            return Err(Error::InvalidArgument("cannot embed text without tokens".into()));
        }
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(BOS);
        ids.extend(words);
        let max = self.config.max_seq_len;
        if ids.len() > max {
            // keep the tail so the final token stays the text's last word
            let cut = ids.len() - max + 1;
            ids.drain(1..=cut);
        }
        Ok(ids)
    }

    /// Final-token hidden state of the text.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embed_with(text, Pooling::FinalToken)
    }

    pub fn embed_with(&self, text: &str, pooling: Pooling) -> Result<Vec<f64>> {
        let ids = self.embed_tokens_of(text)?;
        self.embed_ids(&ids, pooling)
    }

    /// Pool the hidden states of `ids` (position 0 is assumed to be `BOS`
    /// and is excluded from mean pooling).
    pub fn embed_ids(&self, ids: &[usize], pooling: Pooling) -> Result<Vec<f64>> {
        let h = self.hidden_states(ids)?;
        Ok(pool_rows(&h, pooling))
    }
}

pub(crate) fn pool_rows(h: &Array2<f64>, pooling: Pooling) -> Vec<f64> {
    let n = h.nrows();
    match pooling {
        Pooling::FinalToken => h.row(n - 1).to_vec(),
        Pooling::Mean => {
            let start = usize::from(n > 1);
            let rows = h.slice(ndarray::s![start.., ..]);
            let cnt = rows.nrows() as f64;
            rows.sum_axis(ndarray::Axis(0)).iter().map(|v| v / cnt).collect()
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
pub(crate) mod tests;
