use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::{surface_tokens, tokenize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Separates documents inside an evidence prompt. Never produced by `encode`.
pub const SEP: usize = 4;
pub const N_RESERVED: usize = 5;

const RESERVED: [&str; N_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Word-level vocabulary. Keys are the lowercased tokens produced by
/// [`tokenize`]; each entry also keeps a display form so decoded text
/// regains its usual capitalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    display: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from raw texts. Word ids follow first appearance; the display
    /// form is the most frequent casing seen away from sentence starts.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut casing: Vec<HashMap<String, (usize, usize)>> = vec![HashMap::new(); N_RESERVED];
        for text in texts {
            for (pos, tok) in surface_tokens(text).into_iter().enumerate() {
                let id = *index.entry(tok.lower.clone()).or_insert_with(|| {
                    words.push(tok.lower.clone());
                    casing.push(HashMap::new());
                    words.len() - 1
                });
                let counts = casing[id].entry(tok.surface).or_default();
                if pos == 0 {
                    counts.1 += 1;
                } else {
                    counts.0 += 1;
                }
            }
        }
        let display = words
            .iter()
            .zip(&casing)
            .map(|(w, c)| {
                c.iter()
                    .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                    .map_or_else(|| w.clone(), |(s, _)| s.clone())
            })
            .collect();
        Self {
            words,
            display,
            index,
        }
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Ids for already-tokenized words (template keywords and the like).
    pub fn encode_words(&self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Render ids as a sentence: display forms joined by spaces, first letter
    /// capitalized, terminated with a period. Reserved ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let body: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= N_RESERVED && i < self.words.len())
            .map(|&i| self.display[i].as_str())
            .collect();
        if body.is_empty() {
            return String::new();
        }
        let mut s = body.join(" ");
        if let Some(first) = s.chars().next() {
            let upper: String = first.to_uppercase().collect();
            s.replace_range(..first.len_utf8(), &upper);
        }
        s.push('.');
        s
    }
}
