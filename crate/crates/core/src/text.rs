//! Word-level tokenization shared by retrieval, the language model and the metrics.

use std::collections::HashSet;
use std::sync::OnceLock;

/// Lowercased word tokens. Splits on whitespace and at every character that is
/// not alphanumeric; punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    surface_tokens(text).into_iter().map(|t| t.lower).collect()
}

/// A token together with its original casing and byte span in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceToken {
    pub lower: String,
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

/// Same splitting rule as [`tokenize`], keeping casing and offsets.
pub fn surface_tokens(text: &str) -> Vec<SurfaceToken> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            out.push(make_token(text, s, i));
        }
    }
    if let Some(s) = start {
        out.push(make_token(text, s, text.len()));
    }
    out
}

fn make_token(text: &str, start: usize, end: usize) -> SurfaceToken {
    let surface = &text[start..end];
    SurfaceToken {
        lower: surface.to_lowercase(),
        surface: surface.to_string(),
        start,
        end,
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "of", "in", "on", "at", "to", "for", "from", "by",
    "with", "as", "is", "are", "was", "were", "be", "been", "being", "it", "its", "this", "that",
    "these", "those", "he", "she", "they", "them", "his", "her", "their", "we", "you", "i", "me",
    "my", "our", "your", "what", "which", "who", "whom", "whose", "when", "where", "why", "how",
    "do", "does", "did", "has", "have", "had", "not", "no", "so", "than", "then", "there", "here",
    "into", "about", "over", "after", "before", "also", "can", "could", "will", "would", "shall",
    "should", "may", "might", "must", "s", "tell", "name", "please", "according", "while",
    "however",
];

/// Closed-class words ignored when measuring content overlap.
pub fn is_stopword(token: &str) -> bool {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
        .contains(token)
}

/// Tokens of `text` with stopwords removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

pub fn is_numeric(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_digit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n").is_empty());
    }

    #[test]
    fn drops_punctuation_and_lowercases() {
        assert_eq!(tokenize("The cat, sat."), vec!["the", "cat", "sat"]);
    }

    #[test]
    fn apostrophe_splits_possessive() {
        assert_eq!(tokenize("Turkey's GDP"), vec!["turkey", "s", "gdp"]);
    }

    #[test]
    fn decimals_split_into_digit_runs() {
        assert_eq!(tokenize("fell to 2.8%"), vec!["fell", "to", "2", "8"]);
    }

    #[test]
    fn surface_offsets_point_into_source() {
        let text = "Hello, World!";
        for t in surface_tokens(text) {
            assert_eq!(&text[t.start..t.end], t.surface);
        }
    }
}
