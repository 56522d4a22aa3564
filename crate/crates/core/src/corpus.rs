//! Document store, inverted index and Okapi BM25 ranking.
//!
//! Scores use the non-negative IDF variant `ln(1 + (N - df + 0.5) / (df + 0.5))`.
//! Query terms are de-duplicated before scoring. Ranking ties are broken by
//! ascending document id so every ranking is reproducible.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
/// Largest number of distractors the noise protocol adds to a top-5 set.
pub const MAX_NOISE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
    #[serde(skip)]
    tokens: Vec<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self {
            id: id.into(),
            title: title.into(),
            text,
            tokens,
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One posting: document index and term frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Immutable collection of documents plus its inverted index.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lens: Vec<u32>,
    avgdl: f64,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate document id `{}`", d.id)));
            }
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            doc_lens.push(d.tokens.len() as u32);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &d.tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push(Posting {
                    doc: i as u32,
                    tf: n,
                });
            }
        }
        let avgdl = mean_len(&doc_lens);
        Ok(Self {
            docs,
            by_id,
            postings,
            doc_lens,
            avgdl,
        })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new()).expect("empty corpus is valid")
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &[Posting])> {
        self.postings.iter().map(|(t, p)| (t.as_str(), p.as_slice()))
    }

    /// Load line-delimited JSON records `{"id", "title", "text"}`.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut docs = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("corpus line {}: {e}", n + 1)))?;
            docs.push(Document::new(rec.id, rec.title, rec.text));
        }
        Self::new(docs)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for d in &self.docs {
            let rec = DocRecord {
                id: d.id.clone(),
                title: d.title.clone(),
                text: d.text.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Persist the index: one JSON header line, then the postings block as
    /// little-endian `(doc: u32, tf: u32)` pairs laid out as the header describes.
    pub fn write_index(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut terms = Vec::with_capacity(self.postings.len());
        let mut offset = 0u64;
        for (t, p) in &self.postings {
            terms.push(TermEntry {
                term: t.clone(),
                df: p.len() as u32,
                offset,
            });
            offset += p.len() as u64 * 8;
        }
        let header = IndexHeader {
            format: INDEX_FORMAT.to_string(),
            n_docs: self.docs.len(),
            avgdl: self.avgdl,
            doc_ids: self.docs.iter().map(|d| d.id.clone()).collect(),
            doc_lens: self.doc_lens.clone(),
            postings_bytes: offset,
            terms,
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for p in self.postings.values() {
            for posting in p {
                w.write_all(&posting.doc.to_le_bytes())?;
                w.write_all(&posting.tf.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Check that a persisted index describes exactly this corpus.
    pub fn verify_index(&self, path: impl AsRef<Path>) -> Result<()> {
        let index = StoredIndex::read(path)?;
        let ids: Vec<&str> = self.docs.iter().map(|d| d.id.as_str()).collect();
        if index.doc_ids.iter().map(String::as_str).ne(ids.iter().copied()) {
            return Err(Error::Format("index document ids differ from corpus".into()));
        }
        if index.doc_lens != self.doc_lens || index.postings != self.postings {
            return Err(Error::Format("index postings differ from corpus".into()));
        }
        Ok(())
    }
}

fn mean_len(lens: &[u32]) -> f64 {
    if lens.is_empty() {
        0.0
    } else {
        lens.iter().map(|&l| l as f64).sum::<f64>() / lens.len() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    id: String,
    title: String,
    text: String,
}

const INDEX_FORMAT: &str = "bm25-index-v1";

#[derive(Serialize, Deserialize)]
struct TermEntry {
    term: String,
    df: u32,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    n_docs: usize,
    avgdl: f64,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    postings_bytes: u64,
    terms: Vec<TermEntry>,
}

/// An index file decoded back into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredIndex {
    pub n_docs: usize,
    pub avgdl: f64,
    pub doc_ids: Vec<String>,
    pub doc_lens: Vec<u32>,
    pub postings: BTreeMap<String, Vec<Posting>>,
}

impl StoredIndex {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: IndexHeader = serde_json::from_str(line.trim_end())?;
        if header.format != INDEX_FORMAT {
            return Err(Error::Format(format!("unknown index format `{}`", header.format)));
        }
        let mut block = Vec::new();
        reader.read_to_end(&mut block)?;
        if block.len() as u64 != header.postings_bytes {
            return Err(Error::Format(format!(
                "postings block has {} bytes, header says {}",
                block.len(),
                header.postings_bytes
            )));
        }
        let mut postings = BTreeMap::new();
        for t in header.terms {
            let start = t.offset as usize;
            let end = start + t.df as usize * 8;
            let bytes = block
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("postings for `{}` out of bounds", t.term)))?;
            let list = bytes
                .chunks_exact(8)
                .map(|c| Posting {
                    doc: u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                    tf: u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                })
                .collect();
            postings.insert(t.term, list);
        }
        Ok(Self {
            n_docs: header.n_docs,
            avgdl: header.avgdl,
            doc_ids: header.doc_ids,
            doc_lens: header.doc_lens,
            postings,
        })
    }
}

fn check_params(k1: f64, b: f64) -> Result<()> {
    if !(k1 > 0.0) || !(0.0..=1.0).contains(&b) {
        return Err(Error::InvalidArgument(format!("bm25 parameters k1={k1}, b={b}")));
    }
    Ok(())
}

fn unique_terms(query_tokens: &[String]) -> Vec<&str> {
    let mut seen = HashSet::new();
    query_tokens
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

#[inline]
fn term_weight(idf: f64, tf: f64, dl: f64, avgdl: f64, k1: f64, b: f64) -> f64 {
    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
}

/// Okapi BM25 score of one document for a tokenized query.
pub fn bm25_score(
    query_tokens: &[String],
    doc: &Document,
    corpus: &Corpus,
    k1: f64,
    b: f64,
) -> Result<f64> {
    check_params(k1, b)?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("bm25 on an empty corpus".into()));
    }
    let idx = corpus
        .index_of(&doc.id)
        .ok_or_else(|| Error::UnknownDocument(doc.id.clone()))?;
    let stored = &corpus.docs[idx];
    let dl = corpus.doc_lens[idx] as f64;
    let mut score = 0.0;
    for term in unique_terms(query_tokens) {
        let tf = stored.tokens.iter().filter(|t| t.as_str() == term).count();
        if tf > 0 {
            score += term_weight(corpus.idf(term), tf as f64, dl, corpus.avgdl, k1, b);
        }
    }
    Ok(score)
}

/// Largest BM25 score a document could reach for this query (every tf → ∞).
/// Used to map raw scores into `[0, 1]`.
pub fn bm25_upper_bound(query_tokens: &[String], corpus: &Corpus, k1: f64) -> f64 {
    unique_terms(query_tokens)
        .into_iter()
        .filter(|t| corpus.df(t) > 0)
        .map(|t| corpus.idf(t) * (k1 + 1.0))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub query_id: String,
    pub entries: Vec<ScoredDoc>,
    pub k: usize,
    pub noise_ids: Vec<String>,
    /// Set when retrieval ran against an empty corpus.
    pub empty_corpus: bool,
}

impl RetrievedSet {
    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Share of entries that are injected distractors.
    pub fn dilution(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.noise_ids.len() as f64 / self.entries.len() as f64
        }
    }

    /// Resolve entries against a corpus, skipping ids it does not hold.
    pub fn documents<'a>(&'a self, corpus: &'a Corpus) -> Vec<&'a Document> {
        self.doc_ids().filter_map(|id| corpus.get(id)).collect()
    }
}

fn rank(entries: &mut [ScoredDoc]) {
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}

/// Rank the corpus for `query` and keep the best `k` documents.
pub fn retrieve_top_k(query_id: &str, query: &str, corpus: &Corpus, k: usize) -> Result<RetrievedSet> {
    retrieve_top_k_with(query_id, query, corpus, k, DEFAULT_K1, DEFAULT_B)
}

pub fn retrieve_top_k_with(
    query_id: &str,
    query: &str,
    corpus: &Corpus,
    k: usize,
    k1: f64,
    b: f64,
) -> Result<RetrievedSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    check_params(k1, b)?;
    if corpus.is_empty() {
        log::warn!("retrieval for `{query_id}` against an empty corpus");
        return Ok(RetrievedSet {
            query_id: query_id.to_string(),
            entries: Vec::new(),
            k,
            noise_ids: Vec::new(),
            empty_corpus: true,
        });
    }
    let q = tokenize(query);
    let mut scores = vec![0.0f64; corpus.n_docs()];
    for term in unique_terms(&q) {
        let Some(list) = corpus.postings.get(term) else {
            continue;
        };
        let idf = corpus.idf(term);
        for p in list {
            let dl = corpus.doc_lens[p.doc as usize] as f64;
            scores[p.doc as usize] += term_weight(idf, p.tf as f64, dl, corpus.avgdl, k1, b);
        }
    }
    let mut entries: Vec<ScoredDoc> = corpus
        .docs
        .iter()
        .zip(scores)
        .map(|(d, score)| ScoredDoc {
            doc_id: d.id.clone(),
            score,
        })
        .collect();
    rank(&mut entries);
    entries.truncate(k);
    Ok(RetrievedSet {
        query_id: query_id.to_string(),
        entries,
        k,
        noise_ids: Vec::new(),
        empty_corpus: false,
    })
}

/// Append `n_noise` distractors drawn uniformly (seeded) from `pool`,
/// excluding anything already in `base`. Distractors carry score 0.
pub fn inject_noise(base: &RetrievedSet, pool: &Corpus, n_noise: usize, seed: u64) -> Result<RetrievedSet> {
    if n_noise > MAX_NOISE {
        return Err(Error::InvalidArgument(format!(
            "n_noise must be in 0..={MAX_NOISE}, got {n_noise}"
        )));
    }
    if n_noise == 0 {
        return Ok(base.clone());
    }
    let taken: HashSet<&str> = base.doc_ids().collect();
    let candidates: Vec<&Document> = pool
        .documents()
        .iter()
        .filter(|d| !taken.contains(d.id.as_str()))
        .collect();
    if candidates.len() < n_noise {
        return Err(Error::PoolTooSmall {
            need: n_noise,
            have: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<&Document> = candidates
        .choose_multiple(&mut rng, n_noise)
        .copied()
        .collect();
    let mut out = base.clone();
    for d in picked {
        out.noise_ids.push(d.id.clone());
        out.entries.push(ScoredDoc {
            doc_id: d.id.clone(),
            score: 0.0,
        });
    }
    rank(&mut out.entries);
    Ok(out)
}

/// Fraction of a top-`k` set that is noise after adding `n_noise` distractors.
pub fn dilution_fraction(k: usize, n_noise: usize) -> f64 {
    if k + n_noise == 0 {
        0.0
    } else {
        n_noise as f64 / (k + n_noise) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Corpus {
        Corpus::new(vec![
            Document::new("d1", "", "the cat sat on the mat"),
            Document::new("d2", "", "dogs chase the cat"),
            Document::new("d3", "", "birds sing at dawn"),
        ])
        .unwrap()
    }

    #[test]
    fn zero_overlap_scores_zero() {
        let c = toy();
        let q = tokenize("quantum physics");
        let s = bm25_score(&q, &c.documents()[0], &c, DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn single_doc_matches_hand_evaluation() {
        // N=1, df=1: idf = ln(1 + 0.5/1.5) = ln(4/3); dl = avgdl = 3, tf = 1
        // weight = idf * 1 * 2.2 / (1 + 1.2) = ln(4/3)
        let c = Corpus::new(vec![Document::new("a", "", "red green blue")]).unwrap();
        let s = bm25_score(&tokenize("green"), &c.documents()[0], &c, 1.2, 0.75).unwrap();
        assert!((s - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn unknown_document_rejected() {
        let c = toy();
        let stranger = Document::new("zz", "", "cat");
        assert!(matches!(
            bm25_score(&tokenize("cat"), &stranger, &c, 1.2, 0.75),
            Err(Error::UnknownDocument(_))
        ));
    }

    #[test]
    fn bad_parameters_rejected() {
        let c = toy();
        let d = &c.documents()[0];
        assert!(bm25_score(&[], d, &c, 0.0, 0.5).is_err());
        assert!(bm25_score(&[], d, &c, 1.2, 1.5).is_err());
    }

    #[test]
    fn top_k_larger_than_corpus_returns_all() {
        let r = retrieve_top_k("q", "cat", &toy(), 5).unwrap();
        assert_eq!(r.entries.len(), 3);
        assert_eq!(r.entries[2].doc_id, "d3");
    }

    #[test]
    fn duplicates_tie_break_by_id() {
        let c = Corpus::new(vec![
            Document::new("b", "", "same text here"),
            Document::new("a", "", "same text here"),
            Document::new("c", "", "other words"),
        ])
        .unwrap();
        let r = retrieve_top_k("q", "text", &c, 2).unwrap();
        let ids: Vec<_> = r.doc_ids().collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(r.entries[0].score, r.entries[1].score);
    }

    #[test]
    fn empty_corpus_sets_warning_flag() {
        let r = retrieve_top_k("q", "cat", &Corpus::empty(), 5).unwrap();
        assert!(r.entries.is_empty());
        assert!(r.empty_corpus);
    }

    #[test]
    fn k_zero_is_an_error() {
        assert!(retrieve_top_k("q", "cat", &toy(), 0).is_err());
    }

    #[test]
    fn df_bounded_by_doc_count() {
        let c = toy();
        for (_, p) in c.terms() {
            assert!(p.len() <= c.n_docs());
        }
        assert!(c.avgdl() > 0.0);
    }

    #[test]
    fn noise_zero_is_identity() {
        let c = toy();
        let base = retrieve_top_k("q", "cat", &c, 1).unwrap();
        assert_eq!(inject_noise(&base, &c, 0, 7).unwrap(), base);
    }

    #[test]
    fn noise_pool_too_small() {
        let c = toy();
        let base = retrieve_top_k("q", "cat", &c, 2).unwrap();
        assert!(matches!(
            inject_noise(&base, &c, 2, 1),
            Err(Error::PoolTooSmall { need: 2, have: 1 })
        ));
        assert!(inject_noise(&base, &c, 6, 1).is_err());
    }

    #[test]
    fn dilution_endpoints() {
        assert!((dilution_fraction(5, 1) - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(dilution_fraction(5, 5), 0.5);
        assert_eq!(dilution_fraction(5, 0), 0.0);
    }

    #[test]
    fn index_round_trips_through_file() {
        let c = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        c.write_index(&path).unwrap();
        c.verify_index(&path).unwrap();
        let stored = StoredIndex::read(&path).unwrap();
        assert_eq!(stored.n_docs, 3);
        assert_eq!(stored.avgdl, c.avgdl());
    }
}
