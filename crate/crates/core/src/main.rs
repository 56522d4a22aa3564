use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use guarantrag::corpus::Corpus;
use guarantrag::dualpath::{read_pairs, train_evidence_model, write_pairs, write_training_log, DpoConfig};
use guarantrag::harness::config::{env_overrides, parse_kv, ExperimentConfig, ExperimentKind};
use guarantrag::harness::experiment::{eval_records, run_experiment, run_point, GridPoint};
use guarantrag::harness::pipeline::{run_pipeline, Context, Generation, Models};
use guarantrag::harness::pretrain::PretrainConfig;
use guarantrag::harness::synth::{read_jsonl, read_qa, synth_dataset, write_synth, QaRecord, SynthConfig};
use guarantrag::harness::training::{build_training_pairs, train_backbone, PairOptions};
use guarantrag::lm::MicroLm;
use guarantrag::segmentation::SegmenterRules;

#[derive(Parser)]
#[command(name = "guarantrag", version, about = "Retrieval-augmented generation with decoupled answer paths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, QA set and pretraining set.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 280)]
        facts: usize,
        #[arg(long, default_value_t = 840)]
        queries: usize,
    },
    /// Build and verify the inverted index of a corpus.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the base model.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        pretrain: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Initialization seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Per-step loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the evidence model from the base model with preference pairs.
    TrainDpo {
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Read pairs from this file instead of building them.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Write the pairs used for training here.
        #[arg(long)]
        pairs_out: Option<PathBuf>,
        #[arg(long, default_value_t = 240)]
        max_pairs: usize,
        /// Per-step loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Answer one query and print every intermediate as JSON.
    Generate {
        #[command(flatten)]
        opts: ConfigArgs,
        /// Question id from the QA file.
        #[arg(long, conflicts_with = "query")]
        id: Option<String>,
        /// Free-text question.
        #[arg(long)]
        query: Option<String>,
        /// Gold answers for a free-text question; enables metrics.
        #[arg(long)]
        answer: Vec<String>,
    },
    /// Evaluate the configured pipeline on one split.
    Evaluate {
        #[command(flatten)]
        opts: ConfigArgs,
    },
    /// Run a grid experiment and write its reports.
    Experiment {
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long)]
        kind: Option<ExperimentKind>,
    },
}

/// Configuration sources, lowest precedence first: defaults, `--config`,
/// environment, `--set`, then the named flags.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Relevance threshold of the fusion gate.
    #[arg(long)]
    threshold: Option<f64>,
    /// Fusion strategy: joint, prompt_based, attention_based or none.
    #[arg(long)]
    strategy: Option<String>,
    /// Segment pooling: final_token or mean.
    #[arg(long)]
    segment_repr: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut kv = match &self.config {
            Some(p) => parse_kv(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => BTreeMap::new(),
        };
        kv.extend(env_overrides(std::env::vars()));
        for s in &self.set {
            let (k, v) = s.split_once('=').with_context(|| format!("`--set {s}` is not key=value"))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let flags = [
            ("fusion.gamma", self.gamma.map(|v| v.to_string())),
            ("fusion.tau", self.tau.map(|v| v.to_string())),
            ("fusion.relevance_threshold", self.threshold.map(|v| v.to_string())),
            ("fusion.strategy", self.strategy.clone()),
            ("fusion.segment_repr", self.segment_repr.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                kv.insert(k.to_string(), v);
            }
        }
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&kv)?;
        Ok(cfg)
    }
}

fn write_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn segmenter(cfg: &ExperimentConfig) -> Result<SegmenterRules> {
    Ok(match &cfg.segmenter {
        Some(p) => SegmenterRules::from_json_file(p)?,
        None => SegmenterRules::default(),
    })
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("missing input `{}`", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthData { out, seed, facts, queries } => {
            let data = synth_dataset(&SynthConfig::new(seed, facts, queries))?;
            let files = write_synth(&out, &data)?;
            log::info!(
                "{} documents, {} questions ({:.0}% post-cutoff), {} pretraining examples",
                data.corpus.n_docs(),
                data.qa.len(),
                100.0 * data.post_cutoff_query_share(),
                data.pretrain.len()
            );
            write_json(&serde_json::json!({
                "corpus": files.corpus,
                "qa": files.qa,
                "pretrain": files.pretrain,
            }))?;
        }
        Command::BuildIndex { corpus, out } => {
            let corpus = Corpus::read_jsonl(&corpus)?;
            corpus.write_index(&out)?;
            corpus.verify_index(&out)?;
            log::info!("indexed {} documents into {}", corpus.n_docs(), out.display());
        }
        Command::TrainLm { corpus, qa, pretrain, out, steps, seed, log } => {
            let corpus = Corpus::read_jsonl(&corpus)?;
            let qa = read_qa(&qa)?;
            let pretrain = read_jsonl(&pretrain)?;
            let mut cfg = PretrainConfig::default();
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let (model, steps) = train_backbone(&corpus, &qa, &pretrain, seed, &cfg)?;
            model.save(&out)?;
            if let Some(p) = log {
                let mut w = csv::Writer::from_path(p)?;
                for s in &steps {
                    w.serialize(s)?;
                }
                w.flush()?;
            }
            if let Some(last) = steps.last() {
                log::info!("final train loss {:.4}", last.train_loss);
            }
        }
        Command::TrainDpo { opts, out, pairs, pairs_out, max_pairs, log } => {
            let cfg = opts.load()?;
            require(&cfg.corpus)?;
            require(&cfg.theta)?;
            let corpus = Corpus::read_jsonl(&cfg.corpus)?;
            let theta = MicroLm::load(&cfg.theta)?;
            let pairs = match pairs {
                Some(p) => read_pairs(p, &corpus)?,
                None => {
                    require(&cfg.qa)?;
                    let qa = read_qa(&cfg.qa)?;
                    let popts = PairOptions { k: cfg.k, max_pairs, ..PairOptions::default() };
                    let (pairs, skipped) = build_training_pairs(&theta, &qa, &corpus, &popts)?;
                    log::info!("{} pairs, {skipped} queries skipped", pairs.len());
                    pairs
                }
            };
            if let Some(p) = pairs_out {
                write_pairs(p, &pairs)?;
            }
            let dpo: DpoConfig = cfg.dpo.clone();
            let (phi, steps) = train_evidence_model(&theta, &pairs, &dpo)?;
            phi.save(&out)?;
            if let Some(p) = log {
                write_training_log(p, &steps)?;
            }
        }
        Command::Generate { opts, id, query, answer } => {
            let cfg = opts.load()?;
            cfg.check_paths()?;
            let corpus = Corpus::read_jsonl(&cfg.corpus)?;
            let models = Models::load(&cfg)?;
            let record = match (id, query) {
                (Some(id), _) => read_qa(&cfg.qa)?
                    .into_iter()
                    .find(|r| r.id == id)
                    .with_context(|| format!("no question with id `{id}`"))?,
                (None, Some(q)) => QaRecord {
                    id: "query".into(),
                    question: q,
                    answers: answer,
                    gold_doc_ids: vec![],
                    gold_evidence: None,
                    post_cutoff: false,
                    split: "test".into(),
                },
                (None, None) => bail!("pass --id or --query"),
            };
            let rules = segmenter(&cfg)?;
            let ctx = Context { corpus: &corpus, models: &models, rules: &rules };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            write_json(&run_pipeline(&cfg, &ctx, &record, Generation::Pipeline, &mut rng)?)?;
        }
        Command::Evaluate { opts } => {
            let cfg = opts.load()?;
            cfg.check_paths()?;
            let corpus = Corpus::read_jsonl(&cfg.corpus)?;
            let qa = read_qa(&cfg.qa)?;
            let models = Models::load(&cfg)?;
            let rules = segmenter(&cfg)?;
            let records = eval_records(&cfg, &qa);
            if records.is_empty() {
                bail!("no questions in split `{}`", cfg.split);
            }
            let point = GridPoint { label: "evaluate".into(), cfg: cfg.clone(), generation: Generation::Pipeline, cell: None };
            let result = run_point(&point, &models, &corpus, &rules, &records);
            let dir = cfg.run_dir();
            std::fs::create_dir_all(&dir)?;
            result.report.write_csv(dir.join("evaluate.csv"))?;
            result.report.write_json(dir.join("evaluate.json"))?;
            write_json(&result.report.summary)?;
        }
        Command::Experiment { opts, kind } => {
            let mut cfg = opts.load()?;
            if let Some(k) = kind {
                cfg.kind = k;
            }
            let result = run_experiment(&cfg)?;
            for p in &result.points {
                let s = &p.report.summary;
                println!(
                    "{:<28} n={:<4} match={:.3} rouge_l={:.3} bleu4={:.3} hal={} ent={}",
                    p.label,
                    s.n,
                    s.answer_match,
                    s.rouge_l,
                    s.bleu4,
                    s.hal.map_or("-".into(), |v| format!("{v:.3}")),
                    s.ent.map_or("-".into(), |v| format!("{v:.3}")),
                );
            }
            log::info!("reports in {}", result.dir.display());
        }
    }
    Ok(())
}
