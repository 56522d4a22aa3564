//! Routing a query to retrieval (`z = 1`) or to parametric answering (`z = 0`).

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{bm25_upper_bound, retrieve_top_k, Corpus, DEFAULT_K1};
use crate::error::{Error, Result};
use crate::lm::{softmax, MicroLm};
use crate::prompt::inner_prompt;
use crate::text::{is_numeric, is_stopword, surface_tokens, tokenize};

/// Greedy answer tokens averaged into `lm_confidence`.
pub const CONFIDENCE_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub has_temporal_marker: bool,
    pub rare_entity_count: usize,
    pub query_length_tokens: usize,
    /// Top BM25 score over the query's best attainable score, in `[0, 1]`.
    pub top1_retrieval_similarity: Option<f64>,
    /// Mean max-probability of the first greedy answer tokens.
    pub lm_confidence: Option<f64>,
}

impl QueryFeatures {
    pub fn zero() -> Self {
        Self {
            has_temporal_marker: false,
            rare_entity_count: 0,
            query_length_tokens: 0,
            top1_retrieval_similarity: Some(0.0),
            lm_confidence: Some(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Years at or after this one mark a query as temporal.
    pub cutoff_year: u32,
    pub temporal_lexicon: Vec<String>,
    /// Capitalized tokens with document frequency below this are rare.
    pub rare_df: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            cutoff_year: 2022,
            temporal_lexicon: ["current", "currently", "now", "today", "latest", "recent", "recently", "nowadays", "present"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rare_df: 5,
        }
    }
}

pub fn extract_features(query: &str, corpus: &Corpus, model: Option<&MicroLm>, cfg: &FeatureConfig) -> Result<QueryFeatures> {
    let toks = tokenize(query);
    if toks.is_empty() {
        return Ok(QueryFeatures::zero());
    }
    let has_temporal_marker = toks.iter().any(|t| {
        cfg.temporal_lexicon.iter().any(|w| w == t)
            || (t.len() == 4 && is_numeric(t) && t.parse::<u32>().is_ok_and(|y| y >= cfg.cutoff_year))
    });
    let rare_entity_count = surface_tokens(query)
        .iter()
        .filter(|t| t.surface.chars().next().is_some_and(char::is_uppercase))
        .filter(|t| !is_stopword(&t.lower) && corpus.df(&t.lower) < cfg.rare_df)
        .count();
    let top1_retrieval_similarity = if corpus.is_empty() {
        None
    } else {
        let bound = bm25_upper_bound(&toks, corpus, DEFAULT_K1);
        let top = retrieve_top_k("features", query, corpus, 1)?;
        Some(match top.entries.first() {
            Some(e) if bound > 0.0 => (e.score / bound).clamp(0.0, 1.0),
            _ => 0.0,
        })
    };
    let lm_confidence = model.map(|m| lm_confidence(m, query)).transpose()?;
    Ok(QueryFeatures {
        has_temporal_marker,
        rare_entity_count,
        query_length_tokens: toks.len(),
        top1_retrieval_similarity,
        lm_confidence,
    })
}

/// Mean of the top next-token probability over the first
/// [`CONFIDENCE_TOKENS`] greedy steps after the inner prompt.
pub fn lm_confidence(model: &MicroLm, query: &str) -> Result<f64> {
    let mut ctx = inner_prompt(&model.vocab, query);
    let mut sum = 0.0;
    let mut n = 0;
    while n < CONFIDENCE_TOKENS && ctx.len() < model.config.max_seq_len {
        let logits = model.next_logits(&ctx)?;
        let p = softmax(ndarray::ArrayView1::from(&logits[..]));
        let best = crate::lm::argmax(&p);
        sum += p[best];
        n += 1;
        if best == crate::lm::EOS {
            break;
        }
        ctx.push(best);
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionStrategy {
    /// Retrieve when the query is temporal or names a rare entity.
    Classifier,
    /// Retrieve when the query is temporal.
    Keyword,
    /// Retrieve when the model is unsure.
    Confidence { threshold: f64 },
    /// Retrieve when the best document matches well.
    Similarity { threshold: f64 },
    /// Retrieve with probability `rate`.
    Random { rate: f64, seed: u64 },
    /// Always retrieve.
    #[default]
    Always,
}

impl DecisionStrategy {
    pub fn confidence() -> Self {
        Self::Confidence { threshold: 0.7 }
    }

    pub fn similarity() -> Self {
        Self::Similarity { threshold: 0.6 }
    }

    pub fn random(seed: u64) -> Self {
        Self::Random { rate: 0.5, seed }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Classifier => "classifier",
            Self::Keyword => "keyword",
            Self::Confidence { .. } => "confidence",
            Self::Similarity { .. } => "similarity",
            Self::Random { .. } => "random",
            Self::Always => "always",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match *self {
            Self::Confidence { threshold } | Self::Similarity { threshold } => !(threshold > 0.0 && threshold < 1.0),
            Self::Random { rate, .. } => !(0.0..=1.0).contains(&rate),
            _ => false,
        };
        if bad {
            return Err(Error::Config(format!("invalid decision parameters {self:?}")));
        }
        Ok(())
    }

    /// Every kind with its default parameters.
    pub fn all(seed: u64) -> Vec<Self> {
        vec![Self::Classifier, Self::Keyword, Self::confidence(), Self::similarity(), Self::random(seed)]
    }
}

impl FromStr for DecisionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "classifier" => Self::Classifier,
            "keyword" => Self::Keyword,
            "confidence" => Self::confidence(),
            "similarity" => Self::similarity(),
            "random" => Self::random(0),
            "always" => Self::Always,
            other => return Err(Error::Config(format!("unknown decision kind `{other}`"))),
        })
    }
}

/// `true` routes the query to retrieval. Only the random strategy draws
/// from `rng`.
pub fn decide<R: Rng>(f: &QueryFeatures, strategy: &DecisionStrategy, rng: &mut R) -> Result<bool> {
    strategy.validate()?;
    Ok(match *strategy {
        DecisionStrategy::Classifier => f.has_temporal_marker || f.rare_entity_count >= 1,
        DecisionStrategy::Keyword => f.has_temporal_marker,
        DecisionStrategy::Confidence { threshold } => {
            f.lm_confidence.ok_or(Error::MissingFeature("lm_confidence"))? < threshold
        }
        DecisionStrategy::Similarity { threshold } => {
            f.top1_retrieval_similarity
                .ok_or(Error::MissingFeature("top1_retrieval_similarity"))?
                >= threshold
        }
        DecisionStrategy::Random { rate, .. } => rng.gen_bool(rate),
        DecisionStrategy::Always => true,
    })
}
