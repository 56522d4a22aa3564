//! Fixed token-level prompt templates.
//!
//! | prompt    | layout                                                          |
//! |-----------|-----------------------------------------------------------------|
//! | inner     | `<bos> question Q answer`                                       |
//! | evidence  | `<bos> evidence D1 <sep> D2 <sep> … question Q answer`          |
//! | joint     | `<bos> question Q draft Y_inner answer`                         |
//! | fusion    | `<bos> INSTRUCTION parametric answer Y_inner reference answer Y_ref question Q answer` |
//!
//! Answers follow the final `answer` keyword and end with `<eos>`.

use crate::lm::{Vocab, BOS, EOS, SEP};

pub const KW_QUESTION: &str = "question";
pub const KW_ANSWER: &str = "answer";
pub const KW_EVIDENCE: &str = "evidence";
pub const KW_DRAFT: &str = "draft";
pub const KW_PARAMETRIC: &str = "parametric";
pub const KW_REFERENCE: &str = "reference";

/// Instruction used by prompt-based fusion.
pub const FUSION_INSTRUCTION: &str = "Given the following parametric answer and reference-based answer, \
generate an optimal response that combines the best aspects of both.";

/// Every word the templates can emit, so vocabularies can include them.
pub fn template_words() -> String {
    format!(
        "{KW_QUESTION} {KW_ANSWER} {KW_EVIDENCE} {KW_DRAFT} {KW_PARAMETRIC} {KW_REFERENCE} {FUSION_INSTRUCTION}"
    )
}

fn question_part(vocab: &Vocab, query: &str, out: &mut Vec<usize>) {
    out.push(vocab.id(KW_QUESTION));
    out.extend(vocab.encode(query));
}

pub fn inner_prompt(vocab: &Vocab, query: &str) -> Vec<usize> {
    let mut out = vec![BOS];
    question_part(vocab, query, &mut out);
    out.push(vocab.id(KW_ANSWER));
    out
}

pub fn evidence_prompt<S: AsRef<str>>(vocab: &Vocab, query: &str, docs: &[S]) -> Vec<usize> {
    let mut out = vec![BOS, vocab.id(KW_EVIDENCE)];
    for d in docs {
        out.extend(vocab.encode(d.as_ref()));
        out.push(SEP);
    }
    question_part(vocab, query, &mut out);
    out.push(vocab.id(KW_ANSWER));
    out
}

pub fn joint_prompt(vocab: &Vocab, query: &str, inner: &str) -> Vec<usize> {
    let mut out = vec![BOS];
    question_part(vocab, query, &mut out);
    out.push(vocab.id(KW_DRAFT));
    out.extend(vocab.encode(inner));
    out.push(vocab.id(KW_ANSWER));
    out
}

pub fn fusion_prompt(vocab: &Vocab, query: &str, inner: &str, refer: &str) -> Vec<usize> {
    let mut out = vec![BOS];
    out.extend(vocab.encode(FUSION_INSTRUCTION));
    out.push(vocab.id(KW_PARAMETRIC));
    out.push(vocab.id(KW_ANSWER));
    out.extend(vocab.encode(inner));
    out.push(vocab.id(KW_REFERENCE));
    out.push(vocab.id(KW_ANSWER));
    out.extend(vocab.encode(refer));
    question_part(vocab, query, &mut out);
    out.push(vocab.id(KW_ANSWER));
    out
}

/// Answer tokens followed by `<eos>`, ready to append to a prompt.
pub fn answer_tokens(vocab: &Vocab, answer: &str) -> Vec<usize> {
    let mut out = vocab.encode(answer);
    out.push(EOS);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build([template_words().as_str(), "who is the leader of Zorvia"])
    }

    #[test]
    fn separator_only_in_evidence_prompt() {
        let v = vocab();
        let e = evidence_prompt(&v, "who is the leader", &["the leader of Zorvia", "the leader"]);
        assert_eq!(e.iter().filter(|&&t| t == SEP).count(), 2);
        assert!(!inner_prompt(&v, "who").contains(&SEP));
        assert!(!joint_prompt(&v, "who", "the leader").contains(&SEP));
    }

    #[test]
    fn fusion_prompt_is_longer_than_joint_prompt() {
        let v = vocab();
        let q = "who is the leader of Zorvia";
        let inner = "the leader of Zorvia is";
        let joint = joint_prompt(&v, q, inner);
        let fused = fusion_prompt(&v, q, inner, inner);
        assert!(fused.len() > joint.len());
        let overhead = fused.len() - v.encode(q).len() - 2 * v.encode(inner).len();
        assert_eq!(overhead, v.encode(FUSION_INSTRUCTION).len() + 7);
    }
}
