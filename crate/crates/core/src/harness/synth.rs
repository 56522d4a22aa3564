//! Synthetic fact world with a built-in knowledge cutoff.
//!
//! Every fact is an (entity, relation, value) triple. Pretraining text only
//! ever states the *old* value. For post-cutoff facts the corpus states a
//! different, newer value, so parametric memory and evidence conflict by
//! construction. A separate pool of practice entities with freshly sampled
//! values teaches the model to read answers off evidence.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};

/// One question with its gold answers and supporting documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub gold_doc_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_evidence: Option<String>,
    /// The fact changed after the pretraining cutoff.
    #[serde(default)]
    pub post_cutoff: bool,
    /// `train` or `test`; all phrasings of one fact share a split.
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

impl QaRecord {
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Format(format!("qa record `{}` has no gold answer", self.id)));
        }
        Ok(())
    }

    pub fn is_test(&self) -> bool {
        self.split == "test"
    }
}

/// Format of one pretraining example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainKind {
    /// Plain declarative sentence.
    Statement,
    /// Inner-prompt question answering.
    Inner,
    /// Joint-prompt answering with a draft.
    Draft,
    /// Evidence-prompt answering.
    Evidence,
    /// Joint-prompt answering while the hidden state is nudged toward the
    /// single evidence segment in `evidence`.
    Steered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub kind: PretrainKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub relation: String,
    pub old_value: String,
    /// Present iff the fact changed after the cutoff.
    pub new_value: Option<String>,
    pub split: String,
}

impl Fact {
    pub fn current(&self) -> &str {
        self.new_value.as_deref().unwrap_or(&self.old_value)
    }

    pub fn doc_id(&self) -> String {
        format!("{}-{}", self.entity.to_lowercase(), self.relation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_facts: usize,
    pub n_queries: usize,
    /// Share of facts whose value changed after the cutoff.
    pub post_cutoff_fraction: f64,
    /// Share of facts held out for evaluation.
    pub test_fraction: f64,
    pub n_practice_entities: usize,
    /// Evidence-format examples over practice entities.
    pub n_practice_examples: usize,
    /// Steered joint-format examples over practice entities.
    pub n_steer_examples: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_facts: usize, n_queries: usize) -> Self {
        Self {
            seed,
            n_facts,
            n_queries,
            post_cutoff_fraction: 0.5,
            test_fraction: 0.2,
            n_practice_entities: 40,
            n_practice_examples: 1500,
            n_steer_examples: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub facts: Vec<Fact>,
    pub corpus: Corpus,
    pub qa: Vec<QaRecord>,
    pub pretrain: Vec<PretrainRecord>,
}

impl SynthData {
    pub fn post_cutoff_query_share(&self) -> f64 {
        let n = self.qa.iter().filter(|r| r.post_cutoff).count();
        n as f64 / self.qa.len().max(1) as f64
    }
}

/// Files written by [`write_synth`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub corpus: PathBuf,
    pub qa: PathBuf,
    pub pretrain: PathBuf,
}

pub const RELATIONS: [&str; 4] = ["leader", "capital", "currency", "language"];

/// Words that mark a question as asking about the present.
pub const TEMPORAL_WORD: &str = "current";

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 5] = ["", "n", "r", "l", "s"];

struct NameGen {
    used: BTreeSet<String>,
}

impl NameGen {
    fn name(&mut self, rng: &mut ChaCha8Rng, syllables: usize, suffix: &str) -> String {
        loop {
            let mut s = String::new();
            for _ in 0..syllables {
                s.push_str(ONSETS.choose(rng).expect("nonempty"));
                s.push_str(VOWELS.choose(rng).expect("nonempty"));
                s.push_str(CODAS.choose(rng).expect("nonempty"));
            }
            s.push_str(suffix);
            if self.used.insert(s.clone()) {
                let mut c = s.chars();
                let first = c.next().expect("nonempty").to_ascii_uppercase();
                return std::iter::once(first).chain(c).collect();
            }
        }
    }

    fn pool(&mut self, rng: &mut ChaCha8Rng, n: usize, syllables: usize, suffix: &str) -> Vec<String> {
        (0..n).map(|_| self.name(rng, syllables, suffix)).collect()
    }
}

struct Pools {
    values: [Vec<String>; 4],
}

impl Pools {
    fn new(rng: &mut ChaCha8Rng, names: &mut NameGen, n_entities: usize) -> Self {
        let n_people = (n_entities / 2).max(8);
        let n_small = (n_entities / 4).max(6);
        Self {
            values: [
                names.pool(rng, n_people, 2, ""),
                names.pool(rng, n_people, 2, "burg"),
                names.pool(rng, n_small, 1, "ro"),
                names.pool(rng, n_small, 1, "ish"),
            ],
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, rel: usize, not: Option<&str>) -> String {
        loop {
            let v = self.values[rel].choose(rng).expect("nonempty pool");
            if Some(v.as_str()) != not {
                return v.clone();
            }
        }
    }
}

/// Declarative form of a fact; doubles as the gold answer text.
pub fn statement(relation: &str, entity: &str, value: &str) -> String {
    format!("the {relation} of {entity} is {value}")
}

fn document_text(relation: &str, entity: &str, value: &str) -> String {
    format!("The {relation} of {entity} is {value}.")
}

/// The question phrasings of one fact.
pub fn phrasings(relation: &str, entity: &str) -> [String; 3] {
    let wh = if relation == "leader" { "who" } else { "what" };
    [
        format!("{wh} is the {relation} of {entity}?"),
        format!("tell me the {relation} of {entity}."),
        format!("{wh} is the {TEMPORAL_WORD} {relation} of {entity}?"),
    ]
}

/// Build the fact world, corpus, QA set and pretraining examples.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_facts == 0 || cfg.n_queries == 0 {
        return Err(Error::InvalidArgument("n_facts and n_queries must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names = NameGen {
        used: BTreeSet::new(),
    };
    let n_entities = cfg.n_facts.div_ceil(RELATIONS.len());
    let entities = names.pool(&mut rng, n_entities, 2, "ia");
    let practice = names.pool(&mut rng, cfg.n_practice_entities.max(2), 2, "an");
    let pools = Pools::new(&mut rng, &mut names, n_entities);

    let mut facts = Vec::with_capacity(cfg.n_facts);
    'outer: for e in &entities {
        for (r, rel) in RELATIONS.iter().enumerate() {
            if facts.len() == cfg.n_facts {
                break 'outer;
            }
            let old = pools.sample(&mut rng, r, None);
            let new = rng
                .gen_bool(cfg.post_cutoff_fraction)
                .then(|| pools.sample(&mut rng, r, Some(&old)));
            let split = if rng.gen_bool(cfg.test_fraction) { "test" } else { "train" };
            facts.push(Fact {
                entity: e.clone(),
                relation: rel.to_string(),
                old_value: old,
                new_value: new,
                split: split.into(),
            });
        }
    }

    let docs = facts
        .iter()
        .map(|f| Document::new(f.doc_id(), f.entity.clone(), document_text(&f.relation, &f.entity, f.current())))
        .collect();
    let corpus = Corpus::new(docs)?;

    let mut candidates: Vec<(usize, usize)> = (0..facts.len()).flat_map(|f| (0..3).map(move |p| (f, p))).collect();
    candidates.shuffle(&mut rng);
    candidates.truncate(cfg.n_queries);
    candidates.sort_unstable();
    let qa = candidates
        .iter()
        .map(|&(fi, p)| {
            let f = &facts[fi];
            QaRecord {
                id: format!("q{fi:04}-{p}"),
                question: phrasings(&f.relation, &f.entity)[p].clone(),
                answers: vec![f.current().to_string()],
                gold_doc_ids: vec![f.doc_id()],
                gold_evidence: Some(statement(&f.relation, &f.entity, f.current())),
                post_cutoff: f.new_value.is_some(),
                split: f.split.clone(),
            }
        })
        .collect();

    let mut pretrain = pretrain_records(&mut rng, &facts, &practice, &pools, cfg.n_practice_examples);
    for _ in 0..cfg.n_steer_examples {
        pretrain.push(steer_example(&mut rng, &facts, &practice, &pools));
    }
    Ok(SynthData {
        facts,
        corpus,
        qa,
        pretrain,
    })
}

fn pretrain_records(
    rng: &mut ChaCha8Rng,
    facts: &[Fact],
    practice: &[String],
    pools: &Pools,
    n_practice: usize,
) -> Vec<PretrainRecord> {
    let mut out = Vec::new();
    for f in facts {
        let answer = statement(&f.relation, &f.entity, &f.old_value);
        out.push(PretrainRecord {
            kind: PretrainKind::Statement,
            question: None,
            evidence: vec![],
            draft: None,
            answer: answer.clone(),
        });
        for q in phrasings(&f.relation, &f.entity) {
            out.push(PretrainRecord {
                kind: PretrainKind::Inner,
                question: Some(q.clone()),
                evidence: vec![],
                draft: None,
                answer: answer.clone(),
            });
            out.push(PretrainRecord {
                kind: PretrainKind::Draft,
                question: Some(q),
                evidence: vec![],
                draft: Some(answer.clone()),
                answer: answer.clone(),
            });
        }
    }
    for _ in 0..n_practice {
        out.push(practice_example(rng, practice, pools));
    }
    out
}

/// Evidence-format example laid out the way BM25 ranks this corpus: the
/// matching fact, the entity's other facts, then one same-relation fact.
fn practice_example(rng: &mut ChaCha8Rng, practice: &[String], pools: &Pools) -> PretrainRecord {
    let picked: Vec<&String> = practice.choose_multiple(rng, 2).collect();
    let (e, other) = (picked[0], picked[1]);
    let target = rng.gen_range(0..RELATIONS.len());
    let values: Vec<String> = (0..RELATIONS.len()).map(|r| pools.sample(rng, r, None)).collect();
    let rel = RELATIONS[target];
    let mut evidence = vec![document_text(rel, e, &values[target])];
    for (r, rr) in RELATIONS.iter().enumerate() {
        if r != target {
            evidence.push(document_text(rr, e, &values[r]));
        }
    }
    evidence.push(document_text(rel, other, &pools.sample(rng, target, None)));
    let phr = phrasings(rel, e);
    PretrainRecord {
        kind: PretrainKind::Evidence,
        question: Some(phr.choose(rng).expect("nonempty").clone()),
        evidence,
        draft: None,
        answer: statement(rel, e, &values[target]),
    }
}

/// Steered example. The segment states a value the target must follow and
/// the draft states another (a fifth of the time the same one). Half the
/// examples use world entities, whose drafts then often carry the memorized
/// old value; a post-cutoff value is never sampled for its own fact.
fn steer_example(rng: &mut ChaCha8Rng, facts: &[Fact], practice: &[String], pools: &Pools) -> PretrainRecord {
    let (entity, r, old, forbidden) = if rng.gen_bool(0.5) && !facts.is_empty() {
        let f = facts.choose(rng).expect("nonempty");
        let r = RELATIONS.iter().position(|x| *x == f.relation).expect("known relation");
        (f.entity.clone(), r, Some(f.old_value.clone()), f.new_value.clone())
    } else {
        (practice.choose(rng).expect("nonempty").clone(), rng.gen_range(0..RELATIONS.len()), None, None)
    };
    let rel = RELATIONS[r];
    let seg_value = loop {
        let v = pools.sample(rng, r, None);
        if Some(&v) != forbidden.as_ref() {
            break v;
        }
    };
    let draft_value = match old {
        _ if rng.gen_bool(0.2) => seg_value.clone(),
        Some(o) if o != seg_value && rng.gen_bool(0.6) => o,
        _ => loop {
            let v = pools.sample(rng, r, Some(&seg_value));
            if Some(&v) != forbidden.as_ref() {
                break v;
            }
        },
    };
    let phr = phrasings(rel, &entity);
    PretrainRecord {
        kind: PretrainKind::Steered,
        question: Some(phr.choose(rng).expect("nonempty").clone()),
        evidence: vec![document_text(rel, &entity, &seg_value)],
        draft: Some(statement(rel, &entity, &draft_value)),
        answer: statement(rel, &entity, &seg_value),
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_qa(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    let rows: Vec<QaRecord> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for r in &rows {
        r.validate()?;
        if !seen.insert(r.id.clone()) {
            return Err(Error::Format(format!("duplicate qa id `{}`", r.id)));
        }
    }
    Ok(rows)
}

/// Write `corpus.jsonl`, `qa.jsonl` and `pretrain.jsonl` into `dir`.
pub fn write_synth(dir: impl AsRef<Path>, data: &SynthData) -> Result<SynthFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let files = SynthFiles {
        corpus: dir.join("corpus.jsonl"),
        qa: dir.join("qa.jsonl"),
        pretrain: dir.join("pretrain.jsonl"),
    };
    data.corpus.write_jsonl(&files.corpus)?;
    write_jsonl(&files.qa, &data.qa)?;
    write_jsonl(&files.pretrain, &data.pretrain)?;
    Ok(files)
}
