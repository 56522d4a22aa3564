use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compute::{log_softmax, LossGrad};
use super::model::MicroLm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of sequences held out for evaluation.
    pub heldout_fraction: f64,
    /// At most this many held-out sequences are scored per evaluation.
    pub heldout_eval_size: usize,
    /// Held-out loss is computed every `eval_every` steps.
    pub eval_every: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 3e-3,
            batch_size: 8,
            seed: 0,
            heldout_fraction: 0.05,
            heldout_eval_size: 8,
            eval_every: 1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
}

/// Adam with bias correction; state kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut MicroLm, grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut update = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            update[i] = self.lr * mh / (vh.sqrt() + self.eps);
        }
        model.apply_update(&update);
    }
}

/// Rescale `grad` in place so its L2 norm is at most `max_norm`.
pub fn clip_grad(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Summed next-token cross-entropy of a sequence and its logit gradient.
pub fn cross_entropy_grad(logits: &Array2<f64>, tokens: &[usize]) -> (f64, Array2<f64>, usize) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for t in 0..tokens.len().saturating_sub(1) {
        let lp = log_softmax(logits.row(t));
        let target = tokens[t + 1];
        loss -= lp[target];
        let mut row = grad.row_mut(t);
        for (g, l) in row.iter_mut().zip(&lp) {
            *g = l.exp();
        }
        row[target] -= 1.0;
    }
    (loss, grad, tokens.len().saturating_sub(1))
}

fn sequence_loss(model: &MicroLm, seq: &[usize]) -> Result<(f64, usize)> {
    let trace = model.forward(seq)?;
    let (loss, _, n) = cross_entropy_grad(&trace.logits, seq);
    Ok((loss, n))
}

fn mean_loss(model: &MicroLm, seqs: &[&Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for s in seqs {
        let (l, n) = sequence_loss(model, s)?;
        total += l;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Next-token cross-entropy training with Adam. Sequences shorter than two
/// tokens are skipped. The tail of the shuffled data is held out for
/// evaluation.
pub fn train_lm(model: MicroLm, sequences: &[Vec<usize>], cfg: &TrainConfig) -> Result<(MicroLm, Vec<StepLog>)> {
    train_lm_with(model, sequences, cfg, |_, _, _| Ok(0.0))
}

/// [`train_lm`] plus an extra objective evaluated once per step. `extra`
/// adds its gradient into the buffer (already on the per-token scale of the
/// cross-entropy) and returns its loss.
pub fn train_lm_with<F>(
    mut model: MicroLm,
    sequences: &[Vec<usize>],
    cfg: &TrainConfig,
    mut extra: F,
) -> Result<(MicroLm, Vec<StepLog>)>
where
    F: FnMut(&MicroLm, &mut ChaCha8Rng, &mut [f64]) -> Result<f64>,
{
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("train_lm needs at least one step".into()));
    }
    let mut usable: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument("no trainable sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    usable.shuffle(&mut rng);
    let n_held = ((usable.len() as f64 * cfg.heldout_fraction).round() as usize).min(usable.len() - 1);
    let (train, held) = usable.split_at(usable.len() - n_held);
    let held_eval: Vec<&Vec<usize>> = held.iter().take(cfg.heldout_eval_size).copied().collect();

    let mut opt = Adam::new(model.n_params(), cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; model.n_params()];
        let mut loss = 0.0;
        let mut count = 0usize;
        for _ in 0..cfg.batch_size.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = train[order[cursor]];
            cursor += 1;
            let trace = model.forward(seq)?;
            let (l, dlogits, n) = cross_entropy_grad(&trace.logits, seq);
            let g = model.backward(
                &trace,
                &LossGrad {
                    logits: Some(dlogits),
                    hidden: None,
                },
            )?;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            loss += l;
            count += n;
        }
        let denom = count.max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= denom);
        let train_loss = loss / denom + extra(&model, &mut rng, &mut grad)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "train_lm",
                detail: format!("loss {train_loss} at step {step}"),
            });
        }
        clip_grad(&mut grad, cfg.grad_clip);
        opt.step(&mut model, &grad);

        let heldout_loss = if !held_eval.is_empty() && cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            Some(mean_loss(&model, &held_eval)?)
        } else {
            None
        };
        log::debug!("train_lm step {step} loss {train_loss:.4} heldout {heldout_loss:?}");
        log.push(StepLog {
            step,
            train_loss,
            heldout_loss,
        });
    }
    Ok((model, log))
}
