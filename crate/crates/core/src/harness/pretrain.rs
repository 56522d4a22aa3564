//! Backbone pretraining with a steering-aware auxiliary objective.
//!
//! A micro model's hidden states do not come with a usable geometry for
//! soft intervention, so part of each step trains it on steered examples
//! over practice and world entities that exercise one: the answer after a
//! joint prompt is scored under `W_v·(h_t + γ·h(s))` for a segment `s`
//! that contradicts the draft, and the current-sentence encoding at the
//! value step is pulled toward `h(s)` so the relevance gate can open.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::s_curr_window;
use crate::lm::{log_softmax, train_lm_with, LossGrad, MicroLm, StepLog, TrainConfig};
use crate::prompt::{answer_tokens, joint_prompt};

use super::synth::{PretrainKind, PretrainRecord};

/// One steered training example, already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerItem {
    pub prompt: Vec<usize>,
    /// Answer tokens including the closing `EOS`.
    pub answer: Vec<usize>,
    /// Encoder input of the segment (`BOS` + words).
    pub segment: Vec<usize>,
}

impl SteerItem {
    pub fn from_record(model: &MicroLm, rec: &PretrainRecord) -> Result<Self> {
        if rec.kind != PretrainKind::Steered || rec.evidence.len() != 1 {
            return Err(Error::InvalidArgument("steer item needs a steered record with one segment".into()));
        }
        let v = &model.vocab;
        Ok(Self {
            prompt: joint_prompt(v, rec.question.as_deref().unwrap_or(""), rec.draft.as_deref().unwrap_or("")),
            answer: answer_tokens(v, &rec.answer),
            segment: model.embed_tokens_of(&rec.evidence[0])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    /// Steered examples per step, on top of the plain batch.
    pub steer_batch: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub align_weight: f64,
    /// Weight of the steered objective relative to the plain cross-entropy.
    pub steer_weight: f64,
    /// Keep the steered answer loss off the context path.
    pub frozen_context: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 2000,
                lr: 3e-3,
                batch_size: 16,
                eval_every: 100,
                ..TrainConfig::default()
            },
            steer_batch: 4,
            gamma_min: 0.5,
            gamma_max: 2.0,
            align_weight: 1.0,
            steer_weight: 0.1,
            frozen_context: false,
        }
    }
}

/// Loss summed over answer tokens plus `align_weight·(1 − cos)`, its exact
/// gradient, and the number of scored tokens. With `frozen_context` the
/// unsteered logits `W_v·h_t` are treated as constants, so the answer loss
/// only trains the segment path and cannot erode what the context predicts.
pub fn steered_loss_grad(
    model: &MicroLm,
    item: &SteerItem,
    gamma: f64,
    align_weight: f64,
    frozen_context: bool,
) -> Result<(f64, Vec<f64>, usize)> {
    if item.prompt.is_empty() || item.answer.len() < 2 {
        return Err(Error::InvalidArgument("steer item needs a prompt and at least two answer tokens".into()));
    }
    let d = model.config.d_model;
    let v = model.config.vocab_size;
    let seq: Vec<usize> = item.prompt.iter().chain(&item.answer).copied().collect();
    let main = model.forward(&seq)?;
    let seg = model.forward(&item.segment)?;
    let h_s = seg.hidden.row(seg.len() - 1).to_owned();
    let shift = model.project(h_s.as_slice().expect("contiguous"));

    let first = item.prompt.len() - 1;
    let mut dlogits = Array2::zeros((seq.len(), v));
    let mut loss = 0.0;
    for t in first..seq.len() - 1 {
        let row: Vec<f64> = main.logits.row(t).iter().zip(&shift).map(|(l, s)| l + gamma * s).collect();
        let lp = log_softmax(ndarray::ArrayView1::from(&row[..]));
        let target = seq[t + 1];
        loss -= lp[target];
        let mut g = dlogits.row_mut(t);
        for (gi, l) in g.iter_mut().zip(&lp) {
            *gi = l.exp();
        }
        g[target] -= 1.0;
    }
    let n_tok = seq.len() - 1 - first;

    let mut grad = if frozen_context {
        vec![0.0; model.n_params()]
    } else {
        model.backward(
            &main,
            &LossGrad {
                logits: Some(dlogits.clone()),
                hidden: None,
            },
        )?
    };
    // logits gained γ·W_v·h_s: W_v receives γ·Σ_t dl_t ⊗ h_s, h_s receives γ·W_vᵀ Σ_t dl_t
    let dl_sum = dlogits.sum_axis(ndarray::Axis(0));
    let emb = model.layout().tok_emb;
    for (tok, &g) in dl_sum.iter().enumerate() {
        if g != 0.0 {
            for k in 0..d {
                grad[emb + tok * d + k] += gamma * g * h_s[k];
            }
        }
    }
    let mut dh_s = vec![0.0; d];
    for (tok, &g) in dl_sum.iter().enumerate() {
        if g != 0.0 {
            let row = &model.params[emb + tok * d..emb + (tok + 1) * d];
            for k in 0..d {
                dh_s[k] += gamma * g * row[k] as f64;
            }
        }
    }

    if align_weight > 0.0 {
        // value step: the position that predicts the last token before EOS
        let t_value = seq.len() - 3;
        let win = model.forward(&s_curr_window(&seq[..=t_value]))?;
        let a = win.hidden.row(win.len() - 1).to_owned();
        let (na, nb) = (a.dot(&a).sqrt(), h_s.dot(&h_s).sqrt());
        let cos = a.dot(&h_s) / (na * nb);
        loss += align_weight * (1.0 - cos);
        let mut dh_a = Array2::zeros((win.len(), d));
        for k in 0..d {
            dh_a[[win.len() - 1, k]] = -align_weight * (h_s[k] / (na * nb) - cos * a[k] / (na * na));
            dh_s[k] += -align_weight * (a[k] / (na * nb) - cos * h_s[k] / (nb * nb));
        }
        let ga = model.backward(
            &win,
            &LossGrad {
                logits: None,
                hidden: Some(dh_a),
            },
        )?;
        grad.iter_mut().zip(&ga).for_each(|(x, y)| *x += y);
    }

    let mut dh = Array2::zeros((seg.len(), d));
    for k in 0..d {
        dh[[seg.len() - 1, k]] = dh_s[k];
    }
    let gs = model.backward(
        &seg,
        &LossGrad {
            logits: None,
            hidden: Some(dh),
        },
    )?;
    grad.iter_mut().zip(&gs).for_each(|(x, y)| *x += y);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            stage: "steered pretraining",
            detail: format!("{loss}"),
        });
    }
    Ok((loss, grad, n_tok))
}

/// Next-token pretraining on `records`; steered records feed the auxiliary
/// objective, everything else the plain cross-entropy.
pub fn pretrain_backbone(model: MicroLm, records: &[PretrainRecord], cfg: &PretrainConfig) -> Result<(MicroLm, Vec<StepLog>)> {
    let plain: Vec<Vec<usize>> = records
        .iter()
        .filter(|r| r.kind != PretrainKind::Steered)
        .map(|r| super::lmdata::pretrain_sequence(&model.vocab, r))
        .collect();
    let steer: Vec<SteerItem> = records
        .iter()
        .filter(|r| r.kind == PretrainKind::Steered)
        .map(|r| SteerItem::from_record(&model, r))
        .collect::<Result<_>>()?;
    let n_steer = if steer.is_empty() { 0 } else { cfg.steer_batch };
    let (lo, hi) = (cfg.gamma_min, cfg.gamma_max.max(cfg.gamma_min));
    let align = cfg.align_weight;
    let frozen = cfg.frozen_context;
    let weight = cfg.steer_weight;
    train_lm_with(model, &plain, &cfg.train, |m, rng, grad| {
        let mut total = 0.0;
        for item in steer.choose_multiple(rng, n_steer) {
            let gamma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let (l, g, n) = steered_loss_grad(m, item, gamma, align, frozen)?;
            let scale = weight / (n as f64 * n_steer as f64);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
            total += l * scale;
        }
        Ok(total)
    })
}
