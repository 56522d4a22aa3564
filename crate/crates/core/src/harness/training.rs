//! Training flows shared by the command line and the tests.

use crate::corpus::{retrieve_top_k, Corpus};
use crate::dualpath::{build_preference_pair, generate_inner, PreferencePair};
use crate::error::{Error, Result};
use crate::lm::{MicroLm, StepLog};

use super::lmdata::{build_vocab, fresh_model};
use super::pretrain::{pretrain_backbone, PretrainConfig};
use super::synth::{PretrainRecord, QaRecord};

/// Fresh backbone over the vocabulary of all three inputs, pretrained on
/// `pretrain`.
pub fn train_backbone(
    corpus: &Corpus,
    qa: &[QaRecord],
    pretrain: &[PretrainRecord],
    init_seed: u64,
    cfg: &PretrainConfig,
) -> Result<(MicroLm, Vec<StepLog>)> {
    let vocab = build_vocab(corpus, qa, pretrain);
    pretrain_backbone(fresh_model(vocab, init_seed)?, pretrain, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOptions {
    /// Retrieved documents per query.
    pub k: usize,
    pub max_pairs: usize,
    /// Token budget of the inner answer.
    pub max_new: usize,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self { k: 5, max_pairs: 240, max_new: 16 }
    }
}

/// Preference pairs from non-test queries in file order, plus the number of
/// queries skipped because no valid pair could be built.
pub fn build_training_pairs(
    theta: &MicroLm,
    qa: &[QaRecord],
    corpus: &Corpus,
    opts: &PairOptions,
) -> Result<(Vec<PreferencePair>, usize)> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for r in qa.iter().filter(|r| !r.is_test()) {
        if pairs.len() >= opts.max_pairs {
            break;
        }
        let inner = generate_inner(theta, &r.question, opts.max_new)?;
        let rs = retrieve_top_k(&r.id, &r.question, corpus, opts.k)?;
        match build_preference_pair(theta, &r.question, &rs, corpus, &inner, r.gold_evidence.as_deref()) {
            Ok(p) => pairs.push(p),
            Err(e @ (Error::PairRejected(_) | Error::InvalidArgument(_))) => {
                log::debug!("{}: {e}", r.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, skipped))
}
