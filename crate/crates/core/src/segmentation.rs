//! Rule-based discourse segmentation of an answer into atomic clauses.
//!
//! Text is cut at sentence terminators first. Each sentence is then cut
//! greedily, left to right, before a coordinating connective (or after a
//! semicolon) whenever both sides hold a verb from the lexicon and at least
//! `min_len` tokens. Spans are byte offsets into the source.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{is_stopword, surface_tokens, tokenize};

/// Lexicon bundled with the crate, one verb form per line.
pub const DEFAULT_VERBS: &str = include_str!("verbs.txt");

const PRONOUNS: [&str; 9] = ["he", "she", "it", "they", "this", "these", "that", "those", "its"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub text: String,
    /// Byte range `[start, end)` in the source.
    pub span: (usize, usize),
    /// Text with any leading connective dropped and a leading pronoun
    /// replaced by the most recent capitalized name.
    pub resolved: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentSet {
    pub source: String,
    pub segments: Vec<Segment>,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Single segment covering `text`, without any rule applied.
    pub fn whole(text: &str) -> Self {
        let trimmed_start = text.len() - text.trim_start().len();
        let end = text.trim_end().len();
        if end <= trimmed_start {
            return Self {
                source: text.into(),
                segments: vec![],
            };
        }
        let body = &text[trimmed_start..end];
        Self {
            source: text.into(),
            segments: vec![Segment {
                index: 0,
                text: body.into(),
                span: (trimmed_start, end),
                resolved: body.into(),
                encoding: None,
            }],
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.segments {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Anything that can cut an answer into segments.
pub trait Segmenter {
    fn segment(&self, text: &str) -> SegmentSet;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterRules {
    /// Lowercase connective words, plus `;` for semicolons.
    pub connectives: Vec<String>,
    pub verbs: Vec<String>,
    pub min_len: usize,
}

impl Default for SegmenterRules {
    fn default() -> Self {
        Self {
            connectives: ["and", "while", "however", ";"].iter().map(|s| s.to_string()).collect(),
            verbs: DEFAULT_VERBS
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
            min_len: 3,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RulesFile {
    connectives: Option<Vec<String>>,
    verb_lexicon: Option<String>,
    min_len: Option<usize>,
}

impl SegmenterRules {
    /// Load from JSON `{"connectives": [...], "verb_lexicon": "verbs.txt",
    /// "min_len": 3}`. Missing keys keep their defaults; a relative lexicon
    /// path resolves against the JSON file's directory.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw: RulesFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut rules = Self::default();
        if let Some(c) = raw.connectives {
            rules.connectives = c.into_iter().map(|s| s.to_lowercase()).collect();
        }
        if let Some(lex) = raw.verb_lexicon {
            let lex_path = path.parent().unwrap_or(Path::new(".")).join(lex);
            rules.verbs = std::fs::read_to_string(&lex_path)?
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect();
        }
        if let Some(m) = raw.min_len {
            rules.min_len = m;
        }
        if rules.connectives.is_empty() {
            return Err(Error::Config("segmenter needs at least one connective".into()));
        }
        Ok(rules)
    }

    fn is_verb(&self, tok: &str) -> bool {
        self.verbs.iter().any(|v| v == tok)
    }

    fn clause_ok(&self, text: &str) -> bool {
        let toks = tokenize(text);
        toks.len() >= self.min_len && toks.iter().any(|t| self.is_verb(t))
    }
}

impl Segmenter for SegmenterRules {
    fn segment(&self, text: &str) -> SegmentSet {
        segment(text, self)
    }
}

/// Byte ranges of sentences, trimmed of surrounding whitespace.
fn sentences(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if matches!(c, b'.' | b'!' | b'?') {
            let mut j = i + 1;
            while j < bytes.len() && matches!(bytes[j], b'.' | b'!' | b'?' | b'"' | b'\'' | b')') {
                j += 1;
            }
            let at_break = j == bytes.len() || bytes[j].is_ascii_whitespace();
            let initial = c == b'.' && i >= 1 && bytes[i - 1].is_ascii_uppercase()
                && (i == 1 || !bytes[i - 2].is_ascii_alphanumeric());
            if at_break && !initial {
                push_trimmed(text, start, j, &mut out);
                start = j;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    push_trimmed(text, start, bytes.len(), &mut out);
    out
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<(usize, usize)>) {
    let s = &text[start..end];
    let lead = s.len() - s.trim_start().len();
    let body = s.trim();
    if !body.is_empty() {
        out.push((start + lead, start + lead + body.len()));
    }
}

/// Candidate cut offsets inside `[start, end)`, in order.
fn cut_points(text: &str, start: usize, end: usize, rules: &SegmenterRules) -> Vec<usize> {
    let mut cuts = Vec::new();
    let sentence = &text[start..end];
    if rules.connectives.iter().any(|c| c == ";") {
        for (i, _) in sentence.match_indices(';') {
            cuts.push(start + i + 1);
        }
    }
    for tok in surface_tokens(sentence) {
        if rules.connectives.iter().any(|c| c == &tok.lower) {
            cuts.push(start + tok.start);
        }
    }
    cuts.sort_unstable();
    cuts.dedup();
    cuts
}

fn trimmed(text: &str, start: usize, end: usize) -> Option<(usize, usize)> {
    let mut v = Vec::new();
    push_trimmed(text, start, end, &mut v);
    v.pop()
}

/// Byte spans of the sentences of `text`, trimmed of whitespace.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    sentences(text)
}

/// Sentences of `text` as trimmed slices.
pub fn split_sentences(text: &str) -> Vec<&str> {
    sentences(text).into_iter().map(|(a, b)| &text[a..b]).collect()
}

/// Split `text` into clause segments; see the module docs for the rules.
pub fn segment(text: &str, rules: &SegmenterRules) -> SegmentSet {
    let mut spans = Vec::new();
    for (s_start, s_end) in sentences(text) {
        let mut cur = s_start;
        for cut in cut_points(text, s_start, s_end, rules) {
            if cut <= cur || cut >= s_end {
                continue;
            }
            if rules.clause_ok(&text[cur..cut]) && rules.clause_ok(&text[cut..s_end]) {
                if let Some(span) = trimmed(text, cur, cut) {
                    spans.push(span);
                }
                cur = cut;
            }
        }
        if let Some(span) = trimmed(text, cur, s_end) {
            spans.push(span);
        }
    }

    let mut last_name: Option<String> = None;
    let segments = spans
        .into_iter()
        .enumerate()
        .map(|(index, (a, b))| {
            let body = &text[a..b];
            let resolved = resolve(body, rules, last_name.as_deref());
            if let Some(name) = last_capitalized(body) {
                last_name = Some(name);
            }
            Segment {
                index,
                text: body.to_string(),
                span: (a, b),
                resolved,
                encoding: None,
            }
        })
        .collect();
    SegmentSet {
        source: text.to_string(),
        segments,
    }
}

fn resolve(body: &str, rules: &SegmenterRules, antecedent: Option<&str>) -> String {
    let mut rest = body.trim_start_matches(|c: char| c == ';' || c.is_whitespace());
    let toks = surface_tokens(rest);
    if let Some(first) = toks.first() {
        if first.start == 0 && rules.connectives.iter().any(|c| c == &first.lower) {
            rest = rest[first.end..].trim_start_matches(|c: char| c == ',' || c.is_whitespace());
        }
    }
    let toks = surface_tokens(rest);
    match (toks.first(), antecedent) {
        (Some(first), Some(name)) if first.start == 0 && PRONOUNS.contains(&first.lower.as_str()) => {
            format!("{name}{}", &rest[first.end..])
        }
        _ => rest.to_string(),
    }
}

/// Most recent run of capitalized words, minus a leading stopword.
fn last_capitalized(body: &str) -> Option<String> {
    let toks = surface_tokens(body);
    let mut best: Option<String> = None;
    let mut i = 0;
    while i < toks.len() {
        if toks[i].surface.starts_with(|c: char| c.is_uppercase()) {
            let mut j = i + 1;
            while j < toks.len()
                && toks[j].surface.starts_with(|c: char| c.is_uppercase())
                && body[toks[j - 1].end..toks[j].start].chars().all(char::is_whitespace)
            {
                j += 1;
            }
            let first = if is_stopword(&toks[i].lower) { i + 1 } else { i };
            if first < j {
                let run = &body[toks[first].start..toks[j - 1].end];
                best = Some(run.to_string());
            }
            i = j;
        } else {
            i += 1;
        }
    }
    best
}

/// (mean segments per answer, mean tokens per segment).
pub fn segment_stats(sets: &[SegmentSet]) -> Result<(f64, f64)> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("segment_stats of no answers".into()));
    }
    let n_segs: usize = sets.iter().map(SegmentSet::len).sum();
    let n_toks: usize = sets
        .iter()
        .flat_map(|s| &s.segments)
        .map(|s| tokenize(&s.text).len())
        .sum();
    let per_answer = n_segs as f64 / sets.len() as f64;
    let per_segment = if n_segs == 0 { 0.0 } else { n_toks as f64 / n_segs as f64 };
    Ok((per_answer, per_segment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(set: &SegmentSet) -> Vec<&str> {
        set.segments.iter().map(|s| s.text.as_str()).collect()
    }

    fn normalize(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn single_clause_is_one_segment() {
        let r = SegmenterRules::default();
        assert_eq!(texts(&segment("Paris is in France.", &r)), ["Paris is in France."]);
    }

    #[test]
    fn connective_with_verbs_on_both_sides_splits() {
        let r = SegmenterRules::default();
        let s = segment("X caused $84.1 billion in damages, and GDP fell to 2.8%.", &r);
        assert_eq!(texts(&s), ["X caused $84.1 billion in damages,", "and GDP fell to 2.8%."]);
        assert_eq!(s.segments[1].resolved, "GDP fell to 2.8%.");
    }

    #[test]
    fn connective_without_verb_does_not_split() {
        let r = SegmenterRules::default();
        let s = segment("Salt and pepper are common seasonings.", &r);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn semicolon_stays_on_the_left() {
        let r = SegmenterRules::default();
        let s = segment("The river rose quickly; the town was flooded.", &r);
        assert_eq!(texts(&s), ["The river rose quickly;", "the town was flooded."]);
    }

    #[test]
    fn decimal_points_and_initials_do_not_end_sentences() {
        let r = SegmenterRules::default();
        assert_eq!(segment("Growth was 2.8 percent in the U.S. economy.", &r).len(), 1);
        assert_eq!(segment("It rose. It fell!", &r).len(), 2);
    }

    #[test]
    fn leading_pronoun_takes_latest_name() {
        let r = SegmenterRules::default();
        let s = segment("The World Bank published a report. It projected slower growth.", &r);
        assert_eq!(s.segments[1].resolved, "World Bank projected slower growth.");
    }

    #[test]
    fn stats_are_arithmetic_means() {
        let r = SegmenterRules::default();
        let one = segment("Paris is in France.", &r);
        assert_eq!(segment_stats(std::slice::from_ref(&one)).unwrap(), (1.0, 4.0));
        let two = segment("A dog ran home. A cat sat down.", &r);
        let four = segment("A dog ran home. A cat sat down. A bird flew away. A fish swam off.", &r);
        assert_eq!(segment_stats(&[two, four]).unwrap().0, 3.0);
        assert!(segment_stats(&[]).is_err());
    }

    #[test]
    fn rules_load_from_json_with_relative_lexicon() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("v.txt"), "runs\n# comment\nsleeps\n").unwrap();
        let cfg = dir.path().join("rules.json");
        std::fs::write(&cfg, r#"{"connectives": ["and"], "verb_lexicon": "v.txt", "min_len": 2}"#).unwrap();
        let r = SegmenterRules::from_json_file(&cfg).unwrap();
        assert_eq!(r.verbs, ["runs", "sleeps"]);
        assert_eq!(r.min_len, 2);
        assert_eq!(segment("The dog runs and the cat sleeps.", &r).len(), 2);
    }

    #[test]
    fn segments_export_as_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let s = segment("A dog ran home. A cat sat down.", &SegmenterRules::default());
        s.write_jsonl(&p).unwrap();
        let lines = std::fs::read_to_string(&p).unwrap();
        assert_eq!(lines.lines().count(), 2);
        let back: Segment = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(back, s.segments[0]);
    }

    fn fuzz_text() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            Just("and".to_string()),
            Just("while".to_string()),
            Just("however".to_string()),
            Just(";".to_string()),
            Just(".".to_string()),
            Just("!".to_string()),
            Just("?".to_string()),
            Just(",".to_string()),
            Just("is".to_string()),
            Just("fell".to_string()),
            Just("It".to_string()),
            Just("2.8%".to_string()),
            Just("U.S.".to_string()),
            "[A-Za-z]{1,7}",
            "[ \t\n]{1,3}",
            "[0-9.,$%]{1,4}",
        ];
        prop::collection::vec(piece, 0..30).prop_map(|v| v.join(" "))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn spans_cover_all_non_whitespace_in_order(text in fuzz_text()) {
            let r = SegmenterRules::default();
            let set = segment(&text, &r);
            let mut prev_end = 0;
            let mut covered = vec![false; text.len()];
            for (i, s) in set.segments.iter().enumerate() {
                prop_assert_eq!(s.index, i);
                prop_assert!(s.span.0 >= prev_end && s.span.0 < s.span.1);
                prop_assert_eq!(&text[s.span.0..s.span.1], s.text.as_str());
                covered[s.span.0..s.span.1].iter_mut().for_each(|c| *c = true);
                prev_end = s.span.1;
            }
            for (i, b) in text.bytes().enumerate() {
                prop_assert!(covered[i] || b.is_ascii_whitespace(), "byte {} uncovered", i);
            }
            let joined = set.segments.iter().map(|s| normalize(&s.text)).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(joined, normalize(&text));
        }

        #[test]
        fn resegmenting_a_segment_is_identity(text in fuzz_text()) {
            let r = SegmenterRules::default();
            for s in segment(&text, &r).segments {
                let again = segment(&s.text, &r);
                prop_assert_eq!(again.len(), 1, "segment {:?}", s.text);
            }
        }

        #[test]
        fn segmentation_is_deterministic(text in fuzz_text()) {
            let r = SegmenterRules::default();
            prop_assert_eq!(segment(&text, &r), segment(&text, &r));
        }
    }
}
