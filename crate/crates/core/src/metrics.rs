//! Reference-usage and lexical metrics with rule-based claim and entity
//! extraction.
//!
//! A claim is supported when one document covers at least
//! `coverage_threshold` of its content tokens and contains every number and
//! entity of the claim verbatim (case-insensitive).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::{segment, sentence_spans, SegmenterRules};
use crate::text::{content_tokens, is_stopword, surface_tokens, tokenize};

pub const DEFAULT_COVERAGE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub text: String,
    /// Byte range in the response.
    pub source_span: (usize, usize),
    pub supported: Option<bool>,
}

const QUESTION_OPENERS: &[&str] = &[
    "what", "who", "whom", "whose", "which", "when", "where", "why", "how", "is", "are", "was", "were",
    "do", "does", "did", "can", "could", "will", "would", "should", "shall", "may", "might",
];

const IMPERATIVE_OPENERS: &[&str] = &[
    "tell", "give", "list", "name", "describe", "explain", "consider", "note", "see", "let", "please",
    "find", "show", "imagine", "remember", "compare", "summarize", "provide", "check",
];

fn is_declarative(sentence: &str) -> bool {
    if sentence.trim_end().ends_with('?') {
        return false;
    }
    let toks = tokenize(sentence);
    match toks.first() {
        Some(first) => {
            let opener = first.as_str();
            let terminated = sentence.trim_end().ends_with(['.', '!']);
            !IMPERATIVE_OPENERS.contains(&opener) && !(QUESTION_OPENERS.contains(&opener) && !terminated)
        }
        None => false,
    }
}

/// One claim per clause of every declarative sentence.
pub fn extract_claims(response: &str) -> Vec<Claim> {
    extract_claims_with(response, &SegmenterRules::default())
}

pub fn extract_claims_with(response: &str, rules: &SegmenterRules) -> Vec<Claim> {
    let sentences = sentence_spans(response);
    segment(response, rules)
        .segments
        .into_iter()
        .filter(|s| {
            sentences
                .iter()
                .find(|(a, b)| s.span.0 >= *a && s.span.0 < *b)
                .is_some_and(|(a, b)| is_declarative(&response[*a..*b]))
        })
        .filter(|s| !tokenize(&s.text).is_empty())
        .map(|s| Claim {
            text: s.text,
            source_span: s.span,
            supported: None,
        })
        .collect()
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:[.,]\d+)*").expect("valid regex"))
}

fn unit_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\$?\d+(?:[.,]\d+)*(?:\s*%|\s+(?:percent|billion|million|thousand|trillion|km|kg|miles|meters|years|dollars|euros)\b)")
            .expect("valid regex")
    })
}

fn year_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[12]\d{3}\b").expect("valid regex"))
}

/// Whether `claim` is supported by any single document.
pub fn verify_claim<S: AsRef<str>>(claim: &Claim, docs: &[S], coverage_threshold: f64) -> bool {
    let content: BTreeSet<String> = content_tokens(&claim.text).into_iter().collect();
    let numbers: Vec<&str> = number_re().find_iter(&claim.text).map(|m| m.as_str()).collect();
    let entities = entity_surfaces(&claim.text);
    docs.iter().any(|d| {
        let d = d.as_ref();
        let doc_tokens: HashSet<String> = tokenize(d).into_iter().collect();
        let covered = if content.is_empty() {
            1.0
        } else {
            content.iter().filter(|t| doc_tokens.contains(*t)).count() as f64 / content.len() as f64
        };
        let lower = d.to_lowercase();
        covered >= coverage_threshold
            && numbers.iter().all(|n| d.contains(n))
            && entities.iter().all(|e| lower.contains(&e.to_lowercase()))
    })
}

/// Verify every claim in place; returns the number supported.
pub fn verify_claims<S: AsRef<str>>(claims: &mut [Claim], docs: &[S], coverage_threshold: f64) -> usize {
    let mut n = 0;
    for c in claims.iter_mut() {
        let ok = verify_claim(c, docs, coverage_threshold);
        c.supported = Some(ok);
        n += usize::from(ok);
    }
    n
}

/// Percentage of claims not supported.
pub fn hallucination_rate(claims: &[Claim]) -> Result<f64> {
    if claims.is_empty() {
        return Err(Error::Undefined("hallucination rate of a response without claims"));
    }
    let bad = claims.iter().filter(|c| c.supported != Some(true)).count();
    Ok(100.0 * bad as f64 / claims.len() as f64)
}

/// Entities under canonical keys.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EntitySet(pub BTreeSet<String>);

impl EntitySet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains(key)
    }

    pub fn union(&self, other: &Self) -> Self {
        Self(self.0.union(&other.0).cloned().collect())
    }
}

impl<S: AsRef<str>> FromIterator<S> for EntitySet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(|s| normalize_entity(s.as_ref())).filter(|k| !k.is_empty()).collect())
    }
}

/// Lowercase, drop possessives and punctuation (keeping decimal points and
/// percent signs), strip a plural `s`.
pub fn normalize_entity(surface: &str) -> String {
    let lower = surface.to_lowercase().replace("'s", "").replace('\u{2019}', "");
    let mut kept = String::with_capacity(lower.len());
    let chars: Vec<char> = lower.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let decimal = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(char::is_ascii_digit);
        if c.is_alphanumeric() || c == '%' || decimal {
            kept.push(c);
        } else {
            kept.push(' ');
        }
    }
    kept.split_whitespace()
        .map(|w| {
            let plural = w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") && w.chars().all(char::is_alphabetic);
            if plural {
                &w[..w.len() - 1]
            } else {
                w
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Raw surface forms: capitalized runs, numbers with units, years.
fn entity_surfaces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let toks = surface_tokens(text);
    let starts: HashSet<usize> = sentence_spans(text).into_iter().map(|(a, _)| a).collect();
    let mut i = 0;
    while i < toks.len() {
        let capital = |t: &crate::text::SurfaceToken| t.surface.starts_with(|c: char| c.is_uppercase());
        if !capital(&toks[i]) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < toks.len() && capital(&toks[j]) && text[toks[j - 1].end..toks[j].start].chars().all(|c| c == ' ' || c == '-') {
            j += 1;
        }
        // a stopword opening the run carries no name
        let mut first = i;
        while first < j && is_stopword(&toks[first].lower) {
            first += 1;
        }
        let lone_initial = j - i == 1 && starts.contains(&toks[i].start) && is_stopword(&toks[i].lower);
        if first < j && !lone_initial {
            out.push(text[toks[first].start..toks[j - 1].end].to_string());
        }
        i = j;
    }
    out.extend(unit_re().find_iter(text).map(|m| m.as_str().to_string()));
    out.extend(year_re().find_iter(text).map(|m| m.as_str().to_string()));
    out
}

pub fn extract_entities(text: &str) -> EntitySet {
    entity_surfaces(text).into_iter().collect()
}

/// `100·|gen ∩ ref| / |gen|`.
pub fn entity_precision(gen: &EntitySet, reference: &EntitySet) -> Result<f64> {
    if gen.is_empty() {
        return Err(Error::Undefined("entity precision of a response without entities"));
    }
    let hit = gen.0.iter().filter(|e| reference.contains(e)).count();
    Ok(100.0 * hit as f64 / gen.len() as f64)
}

/// Mean over responses of the per-response mean annotator score.
pub fn struc_aggregate(scores: &[Vec<f64>]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Undefined("structure score of no responses"));
    }
    let mut total = 0.0;
    for s in scores {
        if s.is_empty() {
            return Err(Error::InvalidArgument("response without annotator scores".into()));
        }
        if let Some(bad) = s.iter().find(|x| !(1.0..=5.0).contains(*x)) {
            return Err(Error::InvalidArgument(format!("annotator score {bad} outside [1, 5]")));
        }
        total += s.iter().sum::<f64>() / s.len() as f64;
    }
    Ok(total / scores.len() as f64)
}

fn normalize_answer(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 when some normalized gold answer occurs as a token run in the
/// normalized prediction.
pub fn answer_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> u8 {
    let p = format!(" {} ", normalize_answer(pred));
    let hit = golds.iter().any(|g| {
        let g = normalize_answer(g.as_ref());
        !g.is_empty() && p.contains(&format!(" {g} "))
    });
    u8::from(hit)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F1 over tokens.
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let (p, r) = (tokenize(pred), tokenize(reference));
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&p, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (l / p.len() as f64, l / r.len() as f64);
    2.0 * prec * rec / (prec + rec)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform weights over 1- to 4-grams, clipped counts
/// against several references, brevity penalty against the closest
/// reference length, and `1/(total+1)` for an order with no match.
pub fn bleu4<S: AsRef<str>>(pred: &str, refs: &[S]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("bleu4 needs at least one reference".into()));
    }
    let p = tokenize(pred);
    if p.is_empty() {
        return Ok(0.0);
    }
    let r: Vec<Vec<String>> = refs.iter().map(|s| tokenize(s.as_ref())).collect();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(&p, n);
        let total = p.len().saturating_sub(n - 1);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for rt in &r {
            for (g, c) in ngram_counts(rt, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = counts.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let pn = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += pn.ln() / 4.0;
    }
    let c = p.len();
    let closest = r
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("nonempty refs");
    let bp = if c >= closest { 1.0 } else { (1.0 - closest as f64 / c as f64).exp() };
    Ok(bp * log_sum.exp())
}

/// Scores of one generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    #[serde(rename = "match")]
    pub answer_match: u8,
    pub rouge_l: f64,
    pub bleu4: f64,
    /// Missing when the response makes no claim.
    pub hal: Option<f64>,
    /// Missing when the response names no entity.
    pub ent: Option<f64>,
    pub n_claims: usize,
}

/// Score `pred` against gold answers and the reference documents.
pub fn score_response<S: AsRef<str>>(
    query_id: &str,
    pred: &str,
    golds: &[S],
    docs: &[S],
    coverage_threshold: f64,
) -> Result<QueryMetrics> {
    let gold0 = golds.first().ok_or_else(|| Error::InvalidArgument("no gold answer".into()))?;
    let mut claims = extract_claims(pred);
    let hal = if docs.is_empty() || claims.is_empty() {
        None
    } else {
        verify_claims(&mut claims, docs, coverage_threshold);
        Some(hallucination_rate(&claims)?)
    };
    let reference: EntitySet = docs.iter().fold(EntitySet::default(), |acc, d| acc.union(&extract_entities(d.as_ref())));
    let ent = match entity_precision(&extract_entities(pred), &reference) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(QueryMetrics {
        query_id: query_id.to_string(),
        answer_match: answer_match(pred, golds),
        rouge_l: rouge_l(pred, gold0.as_ref()),
        bleu4: bleu4(pred, golds)?,
        hal,
        ent,
        n_claims: claims.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n: usize,
    #[serde(rename = "match")]
    pub answer_match: f64,
    pub rouge_l: f64,
    pub bleu4: f64,
    pub hal: Option<f64>,
    pub ent: Option<f64>,
    pub struc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<QueryMetrics>,
    pub summary: MetricsSummary,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    /// Aggregate rows; missing per-query values are left out of the means.
    pub fn new(config_hash: &str, seed: u64, rows: Vec<QueryMetrics>, struc: Option<f64>) -> Self {
        let summary = MetricsSummary {
            n: rows.len(),
            answer_match: 100.0 * mean_of(rows.iter().map(|r| f64::from(r.answer_match))).unwrap_or(0.0),
            rouge_l: mean_of(rows.iter().map(|r| r.rouge_l)).unwrap_or(0.0),
            bleu4: mean_of(rows.iter().map(|r| r.bleu4)).unwrap_or(0.0),
            hal: mean_of(rows.iter().filter_map(|r| r.hal)),
            ent: mean_of(rows.iter().filter_map(|r| r.ent)),
            struc,
        };
        Self {
            config_hash: config_hash.to_string(),
            seed,
            rows,
            summary,
        }
    }

    /// One row per query, each carrying the config hash.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record(["config_hash", "query_id", "match", "rouge_l", "bleu4", "hal", "ent", "n_claims"])?;
        for m in &self.rows {
            w.serialize((
                &self.config_hash,
                &m.query_id,
                m.answer_match,
                m.rouge_l,
                m.bleu4,
                m.hal,
                m.ent,
                m.n_claims,
            ))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Annotator ratings `(response_id, annotator_id, score)`, grouped by
/// response in first-seen order.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f64>)>> {
    #[derive(Deserialize)]
    struct Rating {
        response_id: String,
        #[allow(dead_code)]
        annotator_id: String,
        score: f64,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by: HashMap<String, Vec<f64>> = HashMap::new();
    for rec in csv::Reader::from_path(path)?.deserialize() {
        let r: Rating = rec?;
        if !by.contains_key(&r.response_id) {
            order.push(r.response_id.clone());
        }
        by.entry(r.response_id).or_default().push(r.score);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let s = by.remove(&id).unwrap_or_default();
            (id, s)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const QUAKE: &str = "The February 2023 earthquakes in Turkey caused an estimated $84.1 billion in damages, \
        reducing the country's GDP growth rate from the projected 5.2% to 2.8% for 2023, according to the \
        World Bank's post-disaster assessment report.";

    fn claim(text: &str) -> Claim {
        Claim {
            text: text.into(),
            source_span: (0, text.len()),
            supported: None,
        }
    }

    #[test]
    fn claims_follow_clause_rules() {
        let c = extract_claims("The bank raised rates. Prices fell sharply and the market recovered.");
        let texts: Vec<&str> = c.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["The bank raised rates.", "Prices fell sharply", "and the market recovered."]);
        assert!(extract_claims("").is_empty());
        let c = extract_claims("What is the capital? Tell me the answer. The capital is Paris.");
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].text, "The capital is Paris.");
    }

    #[test]
    fn verification_rules() {
        let docs = [QUAKE];
        assert!(verify_claim(&claim("GDP fell to 2.8%"), &docs, DEFAULT_COVERAGE));
        assert!(verify_claim(&claim(QUAKE), &docs, DEFAULT_COVERAGE));
        assert!(!verify_claim(&claim("GDP fell to 3.9%"), &docs, DEFAULT_COVERAGE));
        assert!(!verify_claim(&claim("The IMF cut Turkey growth to 2.8%"), &docs, DEFAULT_COVERAGE));
    }

    #[test]
    fn hallucination_counts() {
        let mk = |bad: usize, n: usize| -> Vec<Claim> {
            (0..n)
                .map(|i| Claim {
                    supported: Some(i >= bad),
                    ..claim("x")
                })
                .collect()
        };
        assert_eq!(hallucination_rate(&mk(0, 7)).unwrap(), 0.0);
        assert_eq!(hallucination_rate(&mk(2, 10)).unwrap(), 20.0);
        assert_eq!(hallucination_rate(&mk(3, 3)).unwrap(), 100.0);
        assert!(hallucination_rate(&[]).is_err());
    }

    #[test]
    fn entity_rules() {
        let e = extract_entities("World Bank reported in 2023");
        assert_eq!(e, ["world bank", "2023"].into_iter().collect());
        assert!(extract_entities("").is_empty());
        assert_eq!(extract_entities("Paris and Paris.").len(), 1);
        assert!(extract_entities("The cat sat.").is_empty());
        let q = extract_entities(QUAKE);
        assert!(q.contains("turkey") && q.contains("2.8%") && q.contains("84.1 billion") && q.contains("world bank"));
        let g = |s: &[&str]| s.iter().collect::<EntitySet>();
        assert_eq!(entity_precision(&g(&["A", "B"]), &g(&["A", "B", "C"])).unwrap(), 100.0);
        assert_eq!(entity_precision(&g(&["A", "D"]), &g(&["A", "B"])).unwrap(), 50.0);
        assert_eq!(entity_precision(&g(&["X"]), &g(&["A"])).unwrap(), 0.0);
        assert!(matches!(entity_precision(&g(&[]), &g(&["A"])), Err(Error::Undefined(_))));
    }

    #[test]
    fn struc_means() {
        assert_eq!(struc_aggregate(&[vec![5.0, 5.0], vec![5.0]]).unwrap(), 5.0);
        assert_eq!(struc_aggregate(&[vec![3.0, 4.0, 5.0]]).unwrap(), 4.0);
        assert_eq!(struc_aggregate(&[vec![4.0], vec![5.0]]).unwrap(), 4.5);
        assert!(struc_aggregate(&[vec![0.5]]).is_err());
    }

    #[test]
    fn match_rules() {
        assert_eq!(answer_match("It is Paris.", &["Paris"]), 1);
        assert_eq!(answer_match("It is Rome.", &["Paris"]), 0);
        assert_eq!(answer_match("The 2.8%", &["2.8%"]), 1);
        assert_eq!(answer_match("Parisian", &["Paris"]), 0);
    }

    #[test]
    fn lexical_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert!((rouge_l("the cat sat", "the cat ran") - 2.0 / 3.0).abs() < 1e-12);
        assert!((bleu4("the cat sat on the mat", &["the cat sat on the mat"]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu4("", &["x"]).unwrap(), 0.0);
        let short = bleu4("red blue", &["the quick brown fox jumps over the lazy dog"]).unwrap();
        assert!(short < 0.02, "{short}");
    }

    /// Clipped n-gram matches by pairwise comparison of every window.
    fn brute_bleu(pred: &[String], refs: &[Vec<String>]) -> f64 {
        if pred.is_empty() {
            return 0.0;
        }
        let mut logs = 0.0;
        for n in 1..=4 {
            let total = if pred.len() >= n { pred.len() - n + 1 } else { 0 };
            let mut matched = 0;
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..total {
                let g = &pred[i..i + n];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let in_pred = (0..total).filter(|&j| &pred[j..j + n] == g).count();
                let in_ref = refs
                    .iter()
                    .map(|r| if r.len() >= n { (0..=r.len() - n).filter(|&j| &r[j..j + n] == g).count() } else { 0 })
                    .max()
                    .unwrap_or(0);
                matched += in_pred.min(in_ref);
            }
            let p = if matched == 0 { 1.0 / (total as f64 + 1.0) } else { matched as f64 / total as f64 };
            logs += p.ln() / 4.0;
        }
        let c = pred.len() as f64;
        let mut best = refs[0].len();
        for r in refs {
            let (d, bd) = ((r.len() as f64 - c).abs(), (best as f64 - c).abs());
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        let bp = if c >= best as f64 { 1.0 } else { (1.0 - best as f64 / c).exp() };
        bp * logs.exp()
    }

    #[test]
    fn bleu_matches_brute_force() {
        let words = ["the", "cat", "sat", "on", "mat", "a", "dog", "ran"];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sent = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.gen_range(1..12);
            (0..n).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect()
        };
        for _ in 0..20 {
            let p = sent(&mut rng);
            let refs: Vec<Vec<String>> = (0..rng.gen_range(1..3)).map(|_| sent(&mut rng)).collect();
            let ref_text: Vec<String> = refs.iter().map(|r| r.join(" ")).collect();
            let got = bleu4(&p.join(" "), &ref_text).unwrap();
            assert!((got - brute_bleu(&p, &refs)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn lexical_scores_bounded(a in "[a-d ]{0,20}", b in "[a-d ]{1,20}") {
            let r = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((rouge_l(&b, &a) - r).abs() < 1e-12);
            let bl = bleu4(&a, &[b.as_str()]).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&bl));
        }

        #[test]
        fn match_ignores_articles_and_case(gold in "[a-z]{2,6}( [a-z]{2,6}){0,2}", pre in "[a-z]{2,6}") {
            let pred = format!("{pre} {gold}");
            prop_assert_eq!(answer_match(&pred.to_uppercase(), &[gold.as_str()]), 1);
            let with_article = format!("{pre} the {gold}");
            prop_assert_eq!(answer_match(&with_article, &[format!("a {gold}")]), 1);
        }

        #[test]
        fn entity_precision_monotone(extra in prop::collection::vec("[A-Z][a-z]{3,6}", 0..5)) {
            let reference: EntitySet = ["Alpha", "Beta"].iter().collect();
            let mut gen: Vec<String> = vec!["Alpha".into()];
            let mut last = entity_precision(&gen.iter().collect(), &reference).unwrap();
            for e in extra {
                if reference.contains(&normalize_entity(&e)) { continue; }
                gen.push(e);
                let now = entity_precision(&gen.iter().collect(), &reference).unwrap();
                prop_assert!(now <= last);
                last = now;
            }
        }

        #[test]
        fn hal_plus_supported_is_100(flags in prop::collection::vec(any::<bool>(), 1..30)) {
            let claims: Vec<Claim> = flags.iter().map(|f| Claim { supported: Some(*f), ..claim("x") }).collect();
            let sup = flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64;
            prop_assert!((hallucination_rate(&claims).unwrap() + sup * 100.0 - 100.0).abs() < 1e-9);
        }
    }
}
