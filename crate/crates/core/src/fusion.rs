//! Segment-level fusion at decoding time.
//!
//! At each step the base model's last hidden state `h_t` may be nudged toward
//! the evidence segment whose encoding best matches the text generated so
//! far: `h̃_t = h_t + γ·h(s*)`, then projected through the tied output matrix.
//! The nudge happens only when the raw cosine between the current context and
//! `h(s*)` reaches `relevance_threshold`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{argmax, cosine, log_softmax, softmax, MicroLm, Pooling, BOS, EOS};
use crate::prompt::{evidence_prompt, fusion_prompt, inner_prompt, joint_prompt};
use crate::segmentation::SegmentSet;

/// Tokens of trailing context used as the current sentence; generated text
/// carries no terminator tokens, so this window is always what is compared.
pub const S_CURR_WINDOW: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Joint,
    PromptBased,
    AttentionBased,
    None,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "prompt_based" | "prompt" => Ok(Self::PromptBased),
            "attention_based" | "attention" => Ok(Self::AttentionBased),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::PromptBased => "prompt_based",
            Self::AttentionBased => "attention_based",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub gamma: f64,
    pub tau: f64,
    pub relevance_threshold: f64,
    pub strategy: FusionStrategy,
    pub segment_repr: Pooling,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            tau: 0.1,
            relevance_threshold: 0.68,
            strategy: FusionStrategy::Joint,
            segment_repr: Pooling::FinalToken,
            max_new: 24,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("fusion.tau must be positive, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("fusion.gamma must be >= 0, got {}", self.gamma)));
        }
        if self.relevance_threshold.is_nan() {
            return Err(Error::Config("fusion.relevance_threshold is NaN".into()));
        }
        Ok(())
    }
}

/// One decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub token: usize,
    pub token_text: String,
    pub s_curr: String,
    pub best_segment: Option<usize>,
    pub raw_cosine: Option<f64>,
    pub weights: Vec<f64>,
    pub intervened: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionTrace {
    pub steps: Vec<TraceStep>,
    /// Set when there were no segments and decoding ran unsteered.
    pub fallback_plain: bool,
}

impl FusionTrace {
    pub fn n_intervened(&self) -> usize {
        self.steps.iter().filter(|s| s.intervened).count()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub tokens: Vec<usize>,
    pub text: String,
    pub trace: FusionTrace,
}

/// Attach `h(s_j)` to every segment, encoding the pronoun-resolved text.
pub fn encode_segments(model: &MicroLm, segs: &SegmentSet, repr: Pooling) -> Result<SegmentSet> {
    if segs.is_empty() {
        return Err(Error::InvalidArgument("no segments to encode".into()));
    }
    let mut out = segs.clone();
    for s in &mut out.segments {
        let text = if crate::text::tokenize(&s.resolved).is_empty() { &s.text } else { &s.resolved };
        s.encoding = Some(model.embed_with(text, repr)?);
    }
    Ok(out)
}

/// Softmax of `s_curr · h(s_j) / τ` over segments, and its argmax (lowest
/// index on ties).
pub fn segment_weights(s_curr: &[f64], encodings: &[Vec<f64>], tau: f64) -> Result<(Vec<f64>, usize)> {
    if encodings.is_empty() {
        return Err(Error::InvalidArgument("segment_weights needs at least one encoding".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let scores: Vec<f64> = encodings
        .iter()
        .map(|e| e.iter().zip(s_curr).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let best = argmax(&scores);
    Ok((softmax_vec(&scores), best))
}

fn softmax_vec(scores: &[f64]) -> Vec<f64> {
    softmax(ndarray::ArrayView1::from(scores))
}

/// `h + γ·h_star`.
pub fn soft_intervene(h: &[f64], h_star: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if h.len() != h_star.len() {
        return Err(Error::InvalidArgument(format!(
            "hidden size {} vs segment encoding size {}",
            h.len(),
            h_star.len()
        )));
    }
    Ok(h.iter().zip(h_star).map(|(a, b)| a + gamma * b).collect())
}

/// How the evidence is read at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Read {
    /// Add the best-matching segment.
    Select,
    /// Add the attention-weighted mix of all segments.
    Attend,
}

struct Steering<'a> {
    model: &'a MicroLm,
    encodings: Vec<Vec<f64>>,
    cfg: &'a FusionConfig,
    read: Read,
}

struct StepOut {
    logits: Vec<f64>,
    s_curr: String,
    best: Option<usize>,
    cosine: Option<f64>,
    weights: Vec<f64>,
    intervened: bool,
}

impl<'a> Steering<'a> {
    fn new(model: &'a MicroLm, segs: &SegmentSet, cfg: &'a FusionConfig, read: Read) -> Result<Self> {
        let encodings = segs
            .segments
            .iter()
            .map(|s| {
                s.encoding
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument(format!("segment {} is not encoded", s.index)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            encodings,
            cfg,
            read,
        })
    }

    fn step(&self, ctx: &[usize]) -> Result<StepOut> {
        let h = self.model.last_hidden(ctx)?;
        let h = h.as_slice().expect("contiguous");
        if self.encodings.is_empty() {
            return Ok(StepOut {
                logits: self.model.project(h),
                s_curr: String::new(),
                best: None,
                cosine: None,
                weights: vec![],
                intervened: false,
            });
        }
        let window = s_curr_window(ctx);
        let s_vec = self.model.embed_ids(&window, self.cfg.segment_repr)?;
        let (weights, best) = segment_weights(&s_vec, &self.encodings, self.cfg.tau)?;
        let cos = cosine(&s_vec, &self.encodings[best]);
        let intervened = cos >= self.cfg.relevance_threshold;
        let logits = if intervened {
            let star = match self.read {
                Read::Select => self.encodings[best].clone(),
                Read::Attend => attention_read(h, &self.encodings),
            };
            self.model.project(&soft_intervene(h, &star, self.cfg.gamma)?)
        } else {
            self.model.project(h)
        };
        Ok(StepOut {
            logits,
            s_curr: self.model.vocab.decode(&window[1..]),
            best: Some(best),
            cosine: Some(cos),
            weights,
            intervened,
        })
    }

    fn decode(&self, prompt: Vec<usize>, max_new: usize) -> Result<Fused> {
        let model = self.model;
        let mut ctx = prompt;
        let mut tokens = Vec::new();
        let mut trace = FusionTrace {
            steps: vec![],
            fallback_plain: self.encodings.is_empty(),
        };
        while tokens.len() < max_new && ctx.len() < model.config.max_seq_len {
            let out = self.step(&ctx)?;
            let tok = argmax(&out.logits);
            trace.steps.push(TraceStep {
                step: tokens.len(),
                token: tok,
                token_text: model.vocab.word(tok).to_string(),
                s_curr: out.s_curr,
                best_segment: out.best,
                raw_cosine: out.cosine,
                weights: out.weights,
                intervened: out.intervened,
            });
            if tok == EOS {
                break;
            }
            ctx.push(tok);
            tokens.push(tok);
        }
        Ok(Fused {
            text: model.vocab.decode(&tokens),
            tokens,
            trace,
        })
    }
}

/// Encoder input for the current sentence: `BOS` plus the last
/// [`S_CURR_WINDOW`] context tokens (the context's own leading `BOS` excluded).
pub fn s_curr_window(ctx: &[usize]) -> Vec<usize> {
    let from = ctx.len().saturating_sub(S_CURR_WINDOW).max(1).min(ctx.len());
    let mut ids = vec![BOS];
    ids.extend_from_slice(&ctx[from..]);
    ids
}

/// `Σ_j a_j h(s_j)` with `a = softmax(h·h(s_j)/√d)`.
fn attention_read(h: &[f64], encodings: &[Vec<f64>]) -> Vec<f64> {
    let a = attention_weights(h, encodings);
    let mut out = vec![0.0; h.len()];
    for (w, e) in a.iter().zip(encodings) {
        for (o, v) in out.iter_mut().zip(e) {
            *o += w * v;
        }
    }
    out
}

pub fn attention_weights(h: &[f64], encodings: &[Vec<f64>]) -> Vec<f64> {
    let scale = (h.len() as f64).sqrt();
    let scores: Vec<f64> = encodings
        .iter()
        .map(|e| e.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    softmax_vec(&scores)
}

fn joint_prompt_for(theta: &MicroLm, q: &str, y_inner: &str) -> Vec<usize> {
    joint_prompt(&theta.vocab, q, y_inner)
}

/// Greedy decoding of the base model over the joint prompt with per-step
/// soft intervention. An empty segment set decodes unsteered and sets
/// `trace.fallback_plain`.
pub fn joint_decode(theta: &MicroLm, q: &str, y_inner: &str, segs: &SegmentSet, cfg: &FusionConfig) -> Result<Fused> {
    cfg.validate()?;
    let steer = Steering::new(theta, segs, cfg, Read::Select)?;
    steer.decode(joint_prompt_for(theta, q, y_inner), cfg.max_new)
}

/// Same loop as [`joint_decode`] with an attention read over all segments.
pub fn fuse_attention_based(
    theta: &MicroLm,
    q: &str,
    y_inner: &str,
    segs: &SegmentSet,
    cfg: &FusionConfig,
) -> Result<Fused> {
    cfg.validate()?;
    let steer = Steering::new(theta, segs, cfg, Read::Attend)?;
    steer.decode(joint_prompt_for(theta, q, y_inner), cfg.max_new)
}

/// Per-token log-probabilities of `continuation` after `prompt` when each
/// step is steered as in [`joint_decode`] (teacher forcing).
pub fn steered_log_probs(
    theta: &MicroLm,
    prompt: &[usize],
    continuation: &[usize],
    segs: &SegmentSet,
    cfg: &FusionConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let steer = Steering::new(theta, segs, cfg, Read::Select)?;
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(continuation.len());
    for &tok in continuation {
        let step = steer.step(&ctx)?;
        out.push(log_softmax(ndarray::ArrayView1::from(&step.logits[..]))[tok]);
        ctx.push(tok);
    }
    Ok(out)
}

/// Plain greedy decoding of the joint prompt; the unsteered reference.
pub fn plain_joint_decode(theta: &MicroLm, q: &str, y_inner: &str, max_new: usize) -> Result<Vec<usize>> {
    theta.greedy_decode(&joint_prompt_for(theta, q, y_inner), max_new)
}

/// One greedy decode over the instruction prompt holding both answers.
pub fn fuse_prompt_based(theta: &MicroLm, q: &str, y_inner: &str, y_ref: &str, max_new: usize) -> Result<String> {
    let prompt = fusion_prompt(&theta.vocab, q, y_inner, y_ref);
    if prompt.len() > theta.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            max: theta.config.max_seq_len,
        });
    }
    let out = theta.greedy_decode(&prompt, max_new)?;
    Ok(theta.vocab.decode(&out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub tokens: Vec<usize>,
    pub text: String,
    /// Mixture distribution at every step.
    pub mixtures: Vec<Vec<f64>>,
}

/// Greedy decoding over `(1−λ)·P_θ(·|q) + λ·P_φ(·|q, D)`; both prefixes
/// advance with the chosen token.
pub fn interpolated_decode<S: AsRef<str>>(
    theta: &MicroLm,
    phi: &MicroLm,
    q: &str,
    docs: &[S],
    lambda: f64,
    max_new: usize,
) -> Result<Interpolated> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if theta.vocab.len() != phi.vocab.len() {
        return Err(Error::InvalidArgument("models disagree on vocabulary".into()));
    }
    let mut ctx_t = inner_prompt(&theta.vocab, q);
    let mut ctx_p = evidence_prompt(&phi.vocab, q, docs);
    let mut tokens = Vec::new();
    let mut mixtures = Vec::new();
    let limit_t = theta.config.max_seq_len;
    let limit_p = phi.config.max_seq_len;
    while tokens.len() < max_new && ctx_t.len() < limit_t && ctx_p.len() < limit_p {
        let pt = softmax_vec(&theta.next_logits(&ctx_t)?);
        let pp = softmax_vec(&phi.next_logits(&ctx_p)?);
        let mix: Vec<f64> = pt.iter().zip(&pp).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
        let tok = argmax(&mix);
        mixtures.push(mix);
        if tok == EOS {
            break;
        }
        ctx_t.push(tok);
        ctx_p.push(tok);
        tokens.push(tok);
    }
    Ok(Interpolated {
        text: theta.vocab.decode(&tokens),
        tokens,
        mixtures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tests::tiny_model;
    use crate::segmentation::{segment, SegmenterRules};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn weights_match_hand_softmax() {
        let enc = vec![vec![2.0], vec![1.0], vec![0.0]];
        let (w, best) = segment_weights(&[1.0], &enc, 1.0).unwrap();
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        let expect = [1.0 / z, (-1.0f64).exp() / z, (-2.0f64).exp() / z];
        for (a, b) in w.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w[0], 0.6652, epsilon = 1e-4);
        assert_abs_diff_eq!(w[1], 0.2447, epsilon = 1e-4);
        assert_abs_diff_eq!(w[2], 0.0900, epsilon = 1e-4);
        assert_eq!(best, 0);
    }

    #[test]
    fn weights_degenerate_cases() {
        assert_eq!(segment_weights(&[0.3, 0.1], &[vec![1.0, 2.0]], 0.1).unwrap(), (vec![1.0], 0));
        let (w, best) = segment_weights(&[1.0], &vec![vec![1.0]; 4], 0.5).unwrap();
        assert_eq!(w, vec![0.25; 4]);
        assert_eq!(best, 0);
        assert!(segment_weights(&[1.0], &[], 1.0).is_err());
        assert!(segment_weights(&[1.0], &[vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn intervention_formula() {
        assert_eq!(soft_intervene(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), [1.0, 1.0]);
        assert_eq!(soft_intervene(&[0.3, -2.0], &[5.0, 7.0], 0.0).unwrap(), [0.3, -2.0]);
        assert_eq!(soft_intervene(&[0.3, -2.0], &[0.0, 0.0], 3.0).unwrap(), [0.3, -2.0]);
        assert!(soft_intervene(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution_with_stable_argmax(
            dots in prop::collection::vec(-5.0f64..5.0, 1..8),
            shift in -10.0f64..10.0,
            tau in 0.05f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let enc: Vec<Vec<f64>> = dots.iter().map(|&d| vec![d, 1.0]).collect();
            let (w, best) = segment_weights(&[1.0, 0.0], &enc, tau).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            let (w2, best2) = segment_weights(&[1.0, shift], &enc, tau).unwrap();
            prop_assert_eq!(best, best2);
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let (_, best3) = segment_weights(&[1.0, 0.0], &enc, tau * scale).unwrap();
            prop_assert_eq!(best, best3);
        }
    }

    fn encoded(model: &MicroLm, text: &str, repr: Pooling) -> SegmentSet {
        encode_segments(model, &segment(text, &SegmenterRules::default()), repr).unwrap()
    }

    #[test]
    fn representations_coincide_on_one_token_and_differ_otherwise() {
        let m = tiny_model(12, 8, 1, 3);
        let w = m.vocab.word(crate::lm::N_RESERVED + 2).to_string();
        let one = encoded(&m, &w, Pooling::FinalToken);
        let one_mean = encoded(&m, &w, Pooling::Mean);
        assert_eq!(one.segments[0].encoding, one_mean.segments[0].encoding);
        let text = (0..4).map(|i| m.vocab.word(crate::lm::N_RESERVED + i)).collect::<Vec<_>>().join(" ");
        let a = encoded(&m, &text, Pooling::FinalToken);
        let b = encoded(&m, &text, Pooling::Mean);
        assert_ne!(a.segments[0].encoding, b.segments[0].encoding);
        assert_eq!(a, encoded(&m, &text, Pooling::FinalToken));
    }

    fn words(m: &MicroLm, ids: &[usize]) -> String {
        ids.iter().map(|&i| m.vocab.word(crate::lm::N_RESERVED + i)).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn zero_gamma_and_closed_gate_reproduce_plain_decoding() {
        let m = tiny_model(12, 8, 1, 5);
        for seed in 0..10usize {
            let q = words(&m, &[seed % 7, (seed * 3) % 7, 1]);
            let inner = words(&m, &[2, seed % 5]);
            let segs = encoded(&m, &words(&m, &[4, 5, seed % 6]), Pooling::FinalToken);
            let plain = plain_joint_decode(&m, &q, &inner, 10).unwrap();
            let mut cfg = FusionConfig {
                gamma: 0.0,
                relevance_threshold: -2.0,
                max_new: 10,
                ..Default::default()
            };
            let out = joint_decode(&m, &q, &inner, &segs, &cfg).unwrap();
            assert_eq!(out.tokens, plain);
            assert_eq!(out.trace.n_intervened(), out.trace.steps.len());
            cfg.gamma = 3.0;
            cfg.relevance_threshold = 1.0 + 1e-9;
            let out = joint_decode(&m, &q, &inner, &segs, &cfg).unwrap();
            assert_eq!(out.tokens, plain);
            assert_eq!(out.trace.n_intervened(), 0);
        }
    }

    #[test]
    fn trace_has_one_record_per_token_and_gate_matches_cosine() {
        let m = tiny_model(12, 8, 1, 6);
        let segs = encoded(&m, &words(&m, &[1, 2, 3]), Pooling::FinalToken);
        let cfg = FusionConfig {
            gamma: 2.0,
            relevance_threshold: 0.3,
            max_new: 8,
            ..Default::default()
        };
        let out = joint_decode(&m, &words(&m, &[0, 1]), "", &segs, &cfg).unwrap();
        let emitted = out.trace.steps.iter().filter(|s| s.token != EOS).count();
        assert_eq!(emitted, out.tokens.len());
        for s in &out.trace.steps {
            assert_eq!(s.intervened, s.raw_cosine.unwrap() >= 0.3);
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_segment_set_falls_back_to_plain() {
        let m = tiny_model(10, 8, 1, 2);
        let q = words(&m, &[0, 1]);
        let out = joint_decode(&m, &q, "", &SegmentSet::default(), &FusionConfig::default()).unwrap();
        assert!(out.trace.fallback_plain);
        assert_eq!(out.tokens, plain_joint_decode(&m, &q, "", 24).unwrap());
    }

    #[test]
    fn single_segment_attention_equals_joint_with_open_gate() {
        let m = tiny_model(12, 8, 1, 9);
        let segs = encoded(&m, &words(&m, &[3, 4, 5]), Pooling::FinalToken);
        let cfg = FusionConfig {
            gamma: 1.5,
            relevance_threshold: 0.0,
            max_new: 8,
            ..Default::default()
        };
        let q = words(&m, &[6, 2]);
        let a = fuse_attention_based(&m, &q, "", &segs, &cfg).unwrap();
        let j = joint_decode(&m, &q, "", &segs, &cfg).unwrap();
        assert_eq!(a.tokens, j.tokens);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let enc = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 0.0]];
        let a = attention_weights(&[0.4, -0.7], &enc);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn interpolation_mixture_formula_and_endpoints() {
        let theta = tiny_model(10, 8, 1, 11);
        let phi = tiny_model(10, 8, 1, 12);
        let q = words(&theta, &[0, 1]);
        let docs = [words(&theta, &[2, 3, 4])];
        let zero = interpolated_decode(&theta, &phi, &q, &docs, 0.0, 6).unwrap();
        assert_eq!(zero.tokens, theta.greedy_decode(&inner_prompt(&theta.vocab, &q), 6).unwrap());
        let one = interpolated_decode(&theta, &phi, &q, &docs, 1.0, 6).unwrap();
        assert_eq!(one.tokens, phi.greedy_decode(&evidence_prompt(&phi.vocab, &q, &docs), 6).unwrap());
        let half = interpolated_decode(&theta, &phi, &q, &docs, 0.5, 6).unwrap();
        for mix in half.mixtures {
            assert!((mix.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(mix.iter().all(|&p| p >= 0.0));
        }
        assert!(interpolated_decode(&theta, &phi, &q, &docs, 1.5, 6).is_err());
    }

    #[test]
    fn prompt_based_rejects_overlong_prompt() {
        let m = tiny_model(10, 8, 1, 1);
        let long = words(&m, &[1; 60]);
        assert!(matches!(
            fuse_prompt_based(&m, "a", &long, &long, 4),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn bad_config_is_rejected() {
        let c = FusionConfig { tau: 0.0, ..FusionConfig::default() };
        assert!(c.validate().is_err());
        assert_eq!("attention_based".parse::<FusionStrategy>().unwrap(), FusionStrategy::AttentionBased);
        assert!("x".parse::<FusionStrategy>().is_err());
    }
}
