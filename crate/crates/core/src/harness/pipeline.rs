//! One query through decision, retrieval, both answer paths and fusion.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{inject_noise, retrieve_top_k, Corpus, RetrievedSet};
use crate::decision::{decide, extract_features, QueryFeatures};
use crate::dualpath::{generate_inner, generate_refer};
use crate::error::{Error, Result};
use crate::fusion::{encode_segments, fuse_attention_based, fuse_prompt_based, interpolated_decode, joint_decode, FusionStrategy, FusionTrace};
use crate::lm::MicroLm;
use crate::metrics::{score_response, QueryMetrics};
use crate::segmentation::{segment, SegmentSet, SegmenterRules};

use super::config::ExperimentConfig;
use super::synth::QaRecord;

/// The base model and, when trained, the evidence model.
#[derive(Debug, Clone)]
pub struct Models {
    pub theta: MicroLm,
    pub phi: Option<MicroLm>,
}

impl Models {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let theta = MicroLm::load(&cfg.theta)?;
        let phi = cfg.phi.as_ref().map(MicroLm::load).transpose()?;
        if let Some(p) = &phi {
            if p.vocab != theta.vocab {
                return Err(Error::Config("theta and phi use different vocabularies".into()));
            }
        }
        Ok(Self { theta, phi })
    }

    /// Model that writes the refer answer.
    pub fn evidence(&self) -> &MicroLm {
        self.phi.as_ref().unwrap_or(&self.theta)
    }
}

/// Shared read-only inputs of a run.
#[derive(Debug, Clone)]
pub struct Context<'a> {
    pub corpus: &'a Corpus,
    pub models: &'a Models,
    pub rules: &'a SegmenterRules,
}

/// How the final answer is produced at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generation {
    /// Decision, both paths, then `cfg.fusion.strategy`.
    Pipeline,
    /// Token-level mixture of the two models at weight λ.
    Interpolate(f64),
}

/// Tokens generated per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTokens {
    pub inner: usize,
    pub refer: usize,
    #[serde(rename = "final")]
    pub final_answer: usize,
}

/// Everything one query produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub query_id: String,
    pub question: String,
    pub features: QueryFeatures,
    pub retrieve: bool,
    pub doc_ids: Vec<String>,
    pub noise_ids: Vec<String>,
    pub inner: Option<String>,
    pub refer: Option<String>,
    pub segments: Vec<String>,
    pub final_text: String,
    pub tokens: StageTokens,
    /// Absent when the record has no gold answer.
    pub metrics: Option<QueryMetrics>,
    pub trace: FusionTrace,
}

/// FNV-1a, used to derive per-query seeds from ids.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn texts(rs: &RetrievedSet, corpus: &Corpus) -> Vec<String> {
    rs.documents(corpus).iter().map(|d| d.text.clone()).collect()
}

fn count_tokens(model: &MicroLm, text: &str) -> usize {
    model.vocab.encode(text).len()
}

/// Run one query. Metrics are scored against the query's top-`k`
/// documents without noise, and only when the record has a gold answer.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    ctx: &Context,
    record: &QaRecord,
    generation: Generation,
    rng: &mut ChaCha8Rng,
) -> Result<PipelineOutput> {
    let theta = &ctx.models.theta;
    let q = record.question.as_str();
    let features = extract_features(q, ctx.corpus, Some(theta), &cfg.features)?;
    let base = retrieve_top_k(&record.id, q, ctx.corpus, cfg.k)?;
    let references = texts(&base, ctx.corpus);
    let retrieve = match generation {
        Generation::Pipeline => decide(&features, &cfg.decision, rng)?,
        Generation::Interpolate(_) => true,
    };

    let mut out = PipelineOutput {
        query_id: record.id.clone(),
        question: q.to_string(),
        features,
        retrieve,
        doc_ids: vec![],
        noise_ids: vec![],
        inner: None,
        refer: None,
        segments: vec![],
        final_text: String::new(),
        tokens: StageTokens::default(),
        metrics: None,
        trace: FusionTrace::default(),
    };

    if !retrieve {
        out.final_text = generate_inner(theta, q, cfg.max_new)?;
        out.tokens.final_answer = count_tokens(theta, &out.final_text);
    } else {
        let rs = inject_noise(&base, ctx.corpus, cfg.n_noise, cfg.seed ^ stable_hash(&record.id))?;
        let docs = texts(&rs, ctx.corpus);
        out.doc_ids = rs.doc_ids().map(str::to_string).collect();
        out.noise_ids = rs.noise_ids.clone();
        match generation {
            Generation::Interpolate(lambda) => {
                let r = interpolated_decode(theta, ctx.models.evidence(), q, &docs, lambda, cfg.max_new)?;
                out.tokens.final_answer = r.tokens.len();
                out.final_text = r.text;
            }
            Generation::Pipeline => {
                let inner = generate_inner(theta, q, cfg.max_new)?;
                let refer = generate_refer(ctx.models.evidence(), q, &docs, cfg.max_new)?;
                out.tokens.inner = count_tokens(theta, &inner);
                out.tokens.refer = count_tokens(theta, &refer);
                let segs = segment(&refer, ctx.rules);
                out.segments = segs.segments.iter().map(|s| s.text.clone()).collect();
                let encoded = |s: &SegmentSet| -> Result<SegmentSet> {
                    if s.is_empty() {
                        Ok(s.clone())
                    } else {
                        encode_segments(theta, s, cfg.fusion.segment_repr)
                    }
                };
                out.final_text = match cfg.fusion.strategy {
                    FusionStrategy::None => refer.clone(),
                    FusionStrategy::PromptBased => fuse_prompt_based(theta, q, &inner, &refer, cfg.fusion.max_new)?,
                    FusionStrategy::Joint => {
                        let f = joint_decode(theta, q, &inner, &encoded(&segs)?, &cfg.fusion)?;
                        out.trace = f.trace;
                        f.text
                    }
                    FusionStrategy::AttentionBased => {
                        let f = fuse_attention_based(theta, q, &inner, &encoded(&segs)?, &cfg.fusion)?;
                        out.trace = f.trace;
                        f.text
                    }
                };
                out.tokens.final_answer = count_tokens(theta, &out.final_text);
                out.inner = Some(inner);
                out.refer = Some(refer);
            }
        }
    }
    if !record.answers.is_empty() {
        out.metrics = Some(score_response(&record.id, &out.final_text, &record.answers, &references, cfg.coverage_threshold)?);
    }
    Ok(out)
}
