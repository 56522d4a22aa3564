//! Turning the synthetic world into a vocabulary and token sequences.

use crate::corpus::Corpus;
use crate::lm::{LmConfig, MicroLm, Vocab, BOS};
use crate::prompt::{answer_tokens, evidence_prompt, inner_prompt, joint_prompt, template_words};
use crate::error::Result;

use super::synth::{PretrainKind, PretrainRecord, QaRecord};

/// Vocabulary over every text the pipeline can encounter.
pub fn build_vocab(corpus: &Corpus, qa: &[QaRecord], pretrain: &[PretrainRecord]) -> Vocab {
    let templates = template_words();
    let mut texts: Vec<&str> = vec![templates.as_str()];
    for d in corpus.documents() {
        texts.push(&d.title);
        texts.push(&d.text);
    }
    for r in qa {
        texts.push(&r.question);
        texts.extend(r.answers.iter().map(String::as_str));
        texts.extend(r.gold_evidence.as_deref());
    }
    for p in pretrain {
        texts.extend(p.question.as_deref());
        texts.extend(p.evidence.iter().map(String::as_str));
        texts.push(&p.answer);
    }
    Vocab::build(texts)
}

/// Full training sequence (prompt, answer, `<eos>`) of one record.
pub fn pretrain_sequence(vocab: &Vocab, rec: &PretrainRecord) -> Vec<usize> {
    let q = rec.question.as_deref().unwrap_or("");
    let mut seq = match rec.kind {
        PretrainKind::Statement => vec![BOS],
        PretrainKind::Inner => inner_prompt(vocab, q),
        PretrainKind::Draft | PretrainKind::Steered => joint_prompt(vocab, q, rec.draft.as_deref().unwrap_or("")),
        PretrainKind::Evidence => evidence_prompt(vocab, q, &rec.evidence),
    };
    seq.extend(answer_tokens(vocab, &rec.answer));
    seq
}

pub fn pretrain_sequences(vocab: &Vocab, recs: &[PretrainRecord]) -> Vec<Vec<usize>> {
    recs.iter().map(|r| pretrain_sequence(vocab, r)).collect()
}

/// Fresh desk-scale model sized to the vocabulary.
pub fn fresh_model(vocab: Vocab, seed: u64) -> Result<MicroLm> {
    MicroLm::new(LmConfig::desk(vocab.len(), seed), vocab)
}
