//! The two answer paths and the evidence model's contrastive training.
//!
//! The inner path decodes from the base model alone. The refer path decodes
//! from an evidence model `φ`, a copy of the base model tuned to prefer an
//! evidence-grounded answer `y_w` over the base model's own inner answer
//! `y_l`. The objective is the DPO loss against a frozen reference plus a
//! length penalty and a query/answer alignment term:
//!
//! `L = L_dpo + λ1(step)·L_len + λ2(step)·L_fact`.
//!
//! `L_len` depends on a discrete sampled length, so its gradient is the
//! score-function estimate `L_len(y)·∇log π_φ(y|x)`. Every returned gradient
//! is therefore the exact gradient of the surrogate
//! `L_dpo + λ1·L_len(y)·log π_φ(y|x) + λ2·L_fact` for the fixed rollout `y`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, RetrievedSet};
use crate::error::{Error, Result};
use crate::lm::{clip_grad, cosine, Adam, LossGrad, MicroLm, Vocab};
use crate::prompt::{answer_tokens, evidence_prompt, inner_prompt};
use crate::segmentation::split_sentences;

/// Evidence-conditioned preference record. `documents` are the texts behind
/// `doc_ids`, in retrieval order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub query: String,
    pub doc_ids: Vec<String>,
    pub documents: Vec<String>,
    pub y_w: String,
    pub y_l: String,
}

/// On-disk form of a pair; documents are looked up again by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub query: String,
    pub doc_ids: Vec<String>,
    pub y_w: String,
    pub y_l: String,
}

/// A pair in token form. Both answers end with `EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTokens {
    pub x: Vec<usize>,
    pub y_w: Vec<usize>,
    pub y_l: Vec<usize>,
    /// Encoder input of the query (`BOS` + words).
    pub query: Vec<usize>,
    /// Inner-answer length in tokens, without `EOS`.
    pub inner_len: usize,
}

impl PreferencePair {
    pub fn row(&self) -> PairRow {
        PairRow {
            query: self.query.clone(),
            doc_ids: self.doc_ids.clone(),
            y_w: self.y_w.clone(),
            y_l: self.y_l.clone(),
        }
    }

    pub fn from_row(row: PairRow, corpus: &Corpus) -> Result<Self> {
        let documents = row
            .doc_ids
            .iter()
            .map(|id| corpus.get(id).map(|d| d.text.clone()).ok_or_else(|| Error::UnknownDocument(id.clone())))
            .collect::<Result<_>>()?;
        Ok(Self {
            query: row.query,
            doc_ids: row.doc_ids,
            documents,
            y_w: row.y_w,
            y_l: row.y_l,
        })
    }

    pub fn tokens(&self, model: &MicroLm) -> Result<PairTokens> {
        let v = &model.vocab;
        let t = PairTokens {
            x: evidence_prompt(v, &self.query, &self.documents),
            y_w: answer_tokens(v, &self.y_w),
            y_l: answer_tokens(v, &self.y_l),
            query: model.embed_tokens_of(&self.query)?,
            inner_len: v.encode(&self.y_l).len(),
        };
        if t.y_w == t.y_l {
            return Err(Error::PairRejected(format!("chosen equals rejected for `{}`", self.query)));
        }
        let longest = t.x.len() + t.y_w.len().max(t.y_l.len());
        if longest > model.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: longest,
                max: model.config.max_seq_len,
            });
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    /// `(λ1, λ2)` at step 0.
    pub lambda_start: (f64, f64),
    /// `(λ1, λ2)` at the final step.
    pub lambda_end: (f64, f64),
    pub lr: f64,
    pub steps: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Token budget of the length-penalty rollouts.
    pub rollout_max_new: usize,
    pub rollout_temperature: f64,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda_start: (0.4, 0.6),
            lambda_end: (0.6, 0.4),
            lr: 3e-5,
            steps: 500,
            batch_size: 4,
            grad_clip: 1.0,
            rollout_max_new: 24,
            rollout_temperature: 1.0,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.lambda_start, self.lambda_end);
        if [a.0, a.1, b.0, b.1].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("λ schedule endpoints must be nonnegative".into()));
        }
        if !(self.beta >= 0.0) || !(self.lr > 0.0) || self.batch_size == 0 || !(self.rollout_temperature > 0.0) {
            return Err(Error::Config(format!("invalid DPO settings {self:?}")));
        }
        Ok(())
    }

    /// `(λ1, λ2)` at `step`, linear in the step index.
    pub fn lambdas(&self, step: usize) -> (f64, f64) {
        let f = if self.steps == 0 {
            0.0
        } else {
            step.min(self.steps) as f64 / self.steps as f64
        };
        let (s, e) = (self.lambda_start, self.lambda_end);
        (s.0 + (e.0 - s.0) * f, s.1 + (e.1 - s.1) * f)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// DPO loss from the chosen and rejected log-ratio margins
/// `log π_φ(y|x) − log π_ref(y|x)`.
pub fn dpo_from_margins(chosen: f64, rejected: f64, beta: f64) -> Result<f64> {
    if !chosen.is_finite() || !rejected.is_finite() {
        return Err(Error::NonFinite {
            stage: "dpo margins",
            detail: format!("chosen {chosen}, rejected {rejected}"),
        });
    }
    Ok(softplus(-beta * (chosen - rejected)))
}

pub fn dpo_loss(phi: &MicroLm, reference: &MicroLm, pair: &PairTokens, beta: f64) -> Result<f64> {
    let r = RefLogProbs::new(reference, pair)?;
    let cw = phi.log_prob(&pair.x, &pair.y_w)? - r.chosen;
    let cl = phi.log_prob(&pair.x, &pair.y_l)? - r.rejected;
    dpo_from_margins(cw, cl, beta)
}

/// `max(0, |y_ref| − |y_inner|)²`.
pub fn length_reg(y_ref_len: usize, y_inner_len: usize) -> f64 {
    let over = y_ref_len.saturating_sub(y_inner_len) as f64;
    over * over
}

/// `1 − cos(q, y)`.
pub fn fact_loss(q_vec: &[f64], yref_vec: &[f64]) -> Result<f64> {
    if q_vec.len() != yref_vec.len() {
        return Err(Error::InvalidArgument("fact_loss on vectors of different length".into()));
    }
    let zero = |v: &[f64]| v.iter().all(|x| *x == 0.0);
    if zero(q_vec) || zero(yref_vec) {
        return Err(Error::InvalidArgument("fact_loss of a zero vector".into()));
    }
    Ok(1.0 - cosine(q_vec, yref_vec))
}

/// Frozen reference log-probabilities of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefLogProbs {
    pub chosen: f64,
    pub rejected: f64,
}

impl RefLogProbs {
    pub fn new(reference: &MicroLm, pair: &PairTokens) -> Result<Self> {
        Ok(Self {
            chosen: reference.log_prob(&pair.x, &pair.y_w)?,
            rejected: reference.log_prob(&pair.x, &pair.y_l)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub dpo: f64,
    pub len: f64,
    pub fact: f64,
    /// `dpo + λ1·len + λ2·fact`.
    pub total: f64,
    /// The function whose exact gradient is `grad`.
    pub surrogate: f64,
    /// Implicit-reward margin `β·Δ`.
    pub margin: f64,
    pub grad: Vec<f64>,
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
}

/// Composite loss and gradient of one pair for a fixed rollout (generated
/// tokens without `EOS`). An empty rollout scores the chosen answer in the
/// alignment term instead.
pub fn total_loss_with_rollout(
    phi: &MicroLm,
    refs: RefLogProbs,
    pair: &PairTokens,
    rollout: &[usize],
    cfg: &DpoConfig,
    step: usize,
) -> Result<LossBreakdown> {
    if step > cfg.steps {
        return Err(Error::InvalidArgument(format!("step {step} past schedule end {}", cfg.steps)));
    }
    let (l1, l2) = cfg.lambdas(step);
    let n = phi.n_params();
    let mut grad = vec![0.0; n];

    let (lw, tw, gw) = phi.log_prob_with_trace(&pair.x, &pair.y_w)?;
    let (ll, tl, gl) = phi.log_prob_with_trace(&pair.x, &pair.y_l)?;
    let delta = (lw - refs.chosen) - (ll - refs.rejected);
    let dpo = dpo_from_margins(lw - refs.chosen, ll - refs.rejected, cfg.beta)?;
    // dL/dΔ = −β·σ(−βΔ)
    let coef = -cfg.beta * sigmoid(-cfg.beta * delta);
    if coef != 0.0 {
        let g = phi.backward(&tw, &LossGrad { logits: Some(gw), hidden: None })?;
        add_scaled(&mut grad, &g, coef);
        let g = phi.backward(&tl, &LossGrad { logits: Some(gl), hidden: None })?;
        add_scaled(&mut grad, &g, -coef);
    }

    let len = length_reg(rollout.len(), pair.inner_len);
    let mut surrogate = dpo;
    if l1 > 0.0 && len > 0.0 {
        let mut y = rollout.to_vec();
        if y.len() + pair.x.len() < phi.config.max_seq_len {
            y.push(crate::lm::EOS);
        }
        let (lr, tr, gr) = phi.log_prob_with_trace(&pair.x, &y)?;
        let g = phi.backward(&tr, &LossGrad { logits: Some(gr), hidden: None })?;
        add_scaled(&mut grad, &g, l1 * len);
        surrogate += l1 * len * lr;
    }

    let mut answer = vec![crate::lm::BOS];
    answer.extend_from_slice(if rollout.is_empty() {
        &pair.y_w[..pair.y_w.len() - 1]
    } else {
        rollout
    });
    answer.truncate(phi.config.max_seq_len);
    let tq = phi.forward(&pair.query)?;
    let ta = phi.forward(&answer)?;
    let q = tq.hidden.row(tq.len() - 1).to_owned();
    let a = ta.hidden.row(ta.len() - 1).to_owned();
    let fact = fact_loss(q.as_slice().expect("contiguous"), a.as_slice().expect("contiguous"))?;
    if l2 > 0.0 {
        let (nq, na) = (q.dot(&q).sqrt(), a.dot(&a).sqrt());
        let c = 1.0 - fact;
        let d = phi.config.d_model;
        let mut hq = Array2::zeros((tq.len(), d));
        let mut ha = Array2::zeros((ta.len(), d));
        for k in 0..d {
            hq[[tq.len() - 1, k]] = -l2 * (a[k] / (nq * na) - c * q[k] / (nq * nq));
            ha[[ta.len() - 1, k]] = -l2 * (q[k] / (nq * na) - c * a[k] / (na * na));
        }
        let g = phi.backward(&tq, &LossGrad { logits: None, hidden: Some(hq) })?;
        add_scaled(&mut grad, &g, 1.0);
        let g = phi.backward(&ta, &LossGrad { logits: None, hidden: Some(ha) })?;
        add_scaled(&mut grad, &g, 1.0);
        surrogate += l2 * fact;
    }

    let total = dpo + l1 * len + l2 * fact;
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            stage: "total_loss",
            detail: format!("dpo {dpo}, len {len}, fact {fact}"),
        });
    }
    Ok(LossBreakdown {
        dpo,
        len,
        fact,
        total,
        surrogate,
        margin: cfg.beta * delta,
        grad,
    })
}

/// Composite loss with a fresh rollout sampled from `φ`.
pub fn total_loss(
    phi: &MicroLm,
    refs: RefLogProbs,
    pair: &PairTokens,
    cfg: &DpoConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let rollout = phi.sample_decode(&pair.x, cfg.rollout_max_new, cfg.rollout_temperature, rng)?;
    total_loss_with_rollout(phi, refs, pair, &rollout, cfg, step)
}

/// One row of the training log; losses are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoLog {
    pub step: usize,
    pub dpo: f64,
    pub len: f64,
    pub fact: f64,
    pub total: f64,
    pub margin: f64,
}

/// Train `φ` from a copy of `θ`; the reference stays frozen at `θ`.
pub fn train_evidence_model(theta: &MicroLm, pairs: &[PreferencePair], cfg: &DpoConfig) -> Result<(MicroLm, Vec<DpoLog>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no preference pairs".into()));
    }
    let toks: Vec<PairTokens> = pairs.iter().map(|p| p.tokens(theta)).collect::<Result<_>>()?;
    let refs: Vec<RefLogProbs> = toks.iter().map(|t| RefLogProbs::new(theta, t)).collect::<Result<_>>()?;
    let mut phi = theta.clone();
    let mut opt = Adam::new(phi.n_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..toks.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; phi.n_params()];
        let mut row = DpoLog {
            step,
            dpo: 0.0,
            len: 0.0,
            fact: 0.0,
            total: 0.0,
            margin: 0.0,
        };
        let b = cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let l = total_loss(&phi, refs[i], &toks[i], cfg, step, &mut rng)?;
            add_scaled(&mut grad, &l.grad, 1.0 / b);
            row.dpo += l.dpo / b;
            row.len += l.len / b;
            row.fact += l.fact / b;
            row.total += l.total / b;
            row.margin += l.margin / b;
        }
        clip_grad(&mut grad, cfg.grad_clip);
        opt.step(&mut phi, &grad);
        log::debug!("dpo step {step}: total {:.4} margin {:.4}", row.total, row.margin);
        log.push(row);
    }
    Ok((phi, log))
}

/// `log π(y_w|x) − log π(y_l|x)` under `model`.
pub fn preference_gap(model: &MicroLm, pair: &PairTokens) -> Result<f64> {
    Ok(model.log_prob(&pair.x, &pair.y_w)? - model.log_prob(&pair.x, &pair.y_l)?)
}

/// Greedy inner answer from parametric memory alone.
pub fn generate_inner(theta: &MicroLm, q: &str, max_new: usize) -> Result<String> {
    if q.trim().is_empty() {
        return Err(Error::InvalidArgument("empty query".into()));
    }
    let v = &theta.vocab;
    Ok(v.decode(&theta.greedy_decode(&inner_prompt(v, q), max_new)?))
}

/// Greedy refer answer conditioned on the retrieved documents.
pub fn generate_refer<S: AsRef<str>>(phi: &MicroLm, q: &str, docs: &[S], max_new: usize) -> Result<String> {
    if docs.is_empty() {
        return Err(Error::InvalidArgument("refer answer needs documents".into()));
    }
    let v = &phi.vocab;
    Ok(v.decode(&phi.greedy_decode(&evidence_prompt(v, q, docs), max_new)?))
}

fn same_tokens(v: &Vocab, a: &str, b: &str) -> bool {
    v.encode(a) == v.encode(b)
}

/// Pair the inner answer (rejected) with an evidence-grounded answer
/// (chosen): `gold` when given, otherwise the retrieved sentence closest to
/// the query under `model`'s embedding.
pub fn build_preference_pair(
    model: &MicroLm,
    q: &str,
    retrieved: &RetrievedSet,
    corpus: &Corpus,
    inner: &str,
    gold: Option<&str>,
) -> Result<PreferencePair> {
    if inner.trim().is_empty() {
        return Err(Error::InvalidArgument("empty inner answer".into()));
    }
    let docs = retrieved.documents(corpus);
    if docs.is_empty() {
        return Err(Error::InvalidArgument(format!("no documents for `{q}`")));
    }
    let documents: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let y_w = match gold {
        Some(g) => g.to_string(),
        None => best_sentence(model, q, &documents)?,
    };
    if same_tokens(&model.vocab, &y_w, inner) {
        return Err(Error::PairRejected(format!("inner answer already equals the chosen answer for `{q}`")));
    }
    Ok(PreferencePair {
        query: q.to_string(),
        doc_ids: retrieved.doc_ids().map(str::to_string).collect(),
        documents,
        y_w,
        y_l: inner.to_string(),
    })
}

/// Sentence of `docs` with the highest cosine to the query embedding; ties
/// keep the earliest.
pub fn best_sentence<S: AsRef<str>>(model: &MicroLm, q: &str, docs: &[S]) -> Result<String> {
    let qv = model.embed(q)?;
    let mut best: Option<(f64, String)> = None;
    for d in docs {
        for s in split_sentences(d.as_ref()) {
            if model.vocab.encode(s).is_empty() {
                continue;
            }
            let c = cosine(&qv, &model.embed(s)?);
            if best.as_ref().is_none_or(|(b, _)| c > *b) {
                best = Some((c, s.to_string()));
            }
        }
    }
    best.map(|(_, s)| s).ok_or_else(|| Error::InvalidArgument("documents contain no sentence".into()))
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[PreferencePair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, &p.row())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(PreferencePair::from_row(serde_json::from_str(&line)?, corpus)?);
    }
    Ok(out)
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[DpoLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
