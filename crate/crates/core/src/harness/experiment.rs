//! Grid experiments over frozen models and their report files.
//!
//! Layout under `out_dir/run_id/`:
//! `summary.csv` (one row per grid point), `summary.json`, and per point
//! `points/<label>.csv`, `points/<label>.json`, `traces/<label>.jsonl`.
//! The decoupling run adds `table.csv` with the four DPO × fusion cells.
//! CSV files depend only on the config, the seed and the input files; wall
//! times go to the JSON files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{dilution_fraction, Corpus};
use crate::decision::DecisionStrategy;
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::lm::Pooling;
use crate::metrics::MetricsReport;
use crate::segmentation::SegmenterRules;

use super::config::{ExperimentConfig, ExperimentKind};
use super::pipeline::{run_pipeline, Context, Generation, Models, PipelineOutput};
use super::synth::{read_qa, QaRecord};

/// One grid point: its label, effective config and generation mode.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub label: String,
    pub cfg: ExperimentConfig,
    pub generation: Generation,
    /// `dpo` and `fusion` flags of a decoupling cell.
    pub cell: Option<(bool, bool)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointResult {
    pub label: String,
    pub config_hash: String,
    pub report: MetricsReport,
    /// Records aborted by a stage error.
    pub failed: usize,
    /// Share of evaluated records routed to retrieval.
    pub retrieval_rate: f64,
    pub wall_seconds: f64,
    pub tokens_generated: usize,
    #[serde(skip)]
    pub outputs: Vec<PipelineOutput>,
    #[serde(skip)]
    pub cell: Option<(bool, bool)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dir: PathBuf,
    pub points: Vec<PointResult>,
}

/// Grid of `cfg.kind`.
pub fn grid(cfg: &ExperimentConfig) -> Result<Vec<GridPoint>> {
    let point = |label: String, cfg: ExperimentConfig| GridPoint {
        label,
        cfg,
        generation: Generation::Pipeline,
        cell: None,
    };
    let mut out = Vec::new();
    match cfg.kind {
        ExperimentKind::Noise => {
            for &n in &cfg.noise_grid {
                let mut c = cfg.clone();
                c.n_noise = n;
                out.push(point(format!("noise_{n}"), c));
            }
        }
        ExperimentKind::Lambda => {
            for &l in &cfg.lambda_grid {
                out.push(GridPoint {
                    generation: Generation::Interpolate(l),
                    ..point(format!("lambda_{l}"), cfg.clone())
                });
            }
        }
        ExperimentKind::Fusion => {
            let variants = [
                (FusionStrategy::Joint, Pooling::FinalToken),
                (FusionStrategy::Joint, Pooling::Mean),
                (FusionStrategy::AttentionBased, Pooling::FinalToken),
                (FusionStrategy::PromptBased, Pooling::FinalToken),
                (FusionStrategy::None, Pooling::FinalToken),
            ];
            for (s, r) in variants {
                let mut c = cfg.clone();
                c.fusion.strategy = s;
                c.fusion.segment_repr = r;
                out.push(point(format!("{s}_{r}"), c));
            }
        }
        ExperimentKind::Decision => {
            let mut kinds = DecisionStrategy::all(cfg.seed);
            kinds.push(DecisionStrategy::Always);
            for d in kinds {
                let mut c = cfg.clone();
                c.decision = d;
                out.push(point(c.decision.name().to_string(), c));
            }
        }
        ExperimentKind::Decoupling => {
            if cfg.phi.is_none() {
                return Err(Error::Config("the decoupling run needs an evidence model (phi)".into()));
            }
            for dpo in [false, true] {
                for fusion in [false, true] {
                    let mut c = cfg.clone();
                    if !dpo {
                        c.phi = None;
                    }
                    c.fusion.strategy = if fusion { FusionStrategy::Joint } else { FusionStrategy::None };
                    let label = format!("dpo_{}_fusion_{}", on_off(dpo), on_off(fusion));
                    out.push(GridPoint {
                        cell: Some((dpo, fusion)),
                        ..point(label, c)
                    });
                }
            }
        }
    }
    Ok(out)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Records evaluated under `cfg`, in file order.
pub fn eval_records<'a>(cfg: &ExperimentConfig, qa: &'a [QaRecord]) -> Vec<&'a QaRecord> {
    let it = qa.iter().filter(|r| cfg.split == "all" || r.split == cfg.split);
    if cfg.max_queries == 0 {
        it.collect()
    } else {
        it.take(cfg.max_queries).collect()
    }
}

/// Evaluate one grid point. A record whose pipeline fails is logged and
/// counted, and the point continues.
pub fn run_point(point: &GridPoint, models: &Models, corpus: &Corpus, rules: &SegmenterRules, records: &[&QaRecord]) -> PointResult {
    let start = Instant::now();
    let cfg = &point.cfg;
    // A cell without `phi` writes the refer answer with theta.
    let stripped;
    let models = if cfg.phi.is_none() && models.phi.is_some() {
        stripped = Models {
            theta: models.theta.clone(),
            phi: None,
        };
        &stripped
    } else {
        models
    };
    let ctx = Context { corpus, models, rules };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outputs = Vec::new();
    let mut failed = 0;
    for r in records {
        match run_pipeline(cfg, &ctx, r, point.generation, &mut rng) {
            Ok(o) => outputs.push(o),
            Err(e) => {
                log::warn!("{}: record {} aborted: {e}", point.label, r.id);
                failed += 1;
            }
        }
    }
    let hash = cfg.hash();
    let rows = outputs.iter().filter_map(|o| o.metrics.clone()).collect();
    let retrieval_rate = if outputs.is_empty() {
        0.0
    } else {
        outputs.iter().filter(|o| o.retrieve).count() as f64 / outputs.len() as f64
    };
    let tokens_generated = outputs.iter().map(|o| o.tokens.inner + o.tokens.refer + o.tokens.final_answer).sum();
    PointResult {
        label: point.label.clone(),
        report: MetricsReport::new(&hash, cfg.seed, rows, None),
        config_hash: hash,
        failed,
        retrieval_rate,
        wall_seconds: start.elapsed().as_secs_f64(),
        tokens_generated,
        outputs,
        cell: point.cell,
    }
}

/// Run every grid point, spreading them over the available cores, then
/// write the reports from one thread.
pub fn run_experiment_with(cfg: &ExperimentConfig, models: &Models, corpus: &Corpus, qa: &[QaRecord]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let rules = match &cfg.segmenter {
        Some(p) => SegmenterRules::from_json_file(p)?,
        None => SegmenterRules::default(),
    };
    let records = eval_records(cfg, qa);
    if records.is_empty() {
        return Err(Error::Config(format!("no records in split `{}`", cfg.split)));
    }
    let points = grid(cfg)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(points.len());
    let mut results: Vec<Option<PointResult>> = vec![None; points.len()];
    for chunk in points.iter().enumerate().collect::<Vec<_>>().chunks(workers) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(i, p)| (*i, s.spawn(|| run_point(p, models, corpus, &rules, &records))))
                .collect();
            for (i, h) in handles {
                results[i] = Some(h.join().expect("grid point thread panicked"));
            }
        });
    }
    let points: Vec<PointResult> = results.into_iter().map(|r| r.expect("every point ran")).collect();
    let dir = cfg.run_dir();
    write_reports(cfg, &dir, &points)?;
    Ok(ExperimentResult { dir, points })
}

/// Load inputs named by the config and run it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.check_paths()?;
    let corpus = Corpus::read_jsonl(&cfg.corpus)?;
    let qa = read_qa(&cfg.qa)?;
    let models = Models::load(cfg)?;
    run_experiment_with(cfg, &models, &corpus, &qa)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_reports(cfg: &ExperimentConfig, dir: &std::path::Path, points: &[PointResult]) -> Result<()> {
    std::fs::create_dir_all(dir.join("points"))?;
    std::fs::create_dir_all(dir.join("traces"))?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "config_hash", "kind", "point", "n", "failed", "match", "rouge_l", "bleu4", "hal", "ent", "retrieval_rate", "dilution",
    ])?;
    for p in points {
        let s = &p.report.summary;
        let noise = points_noise(cfg, p);
        w.write_record([
            p.config_hash.clone(),
            cfg.kind.to_string(),
            p.label.clone(),
            s.n.to_string(),
            p.failed.to_string(),
            format!("{:.6}", s.answer_match),
            format!("{:.6}", s.rouge_l),
            format!("{:.6}", s.bleu4),
            opt(s.hal),
            opt(s.ent),
            format!("{:.6}", p.retrieval_rate),
            noise.map(|n| format!("{:.6}", dilution_fraction(cfg.k, n))).unwrap_or_default(),
        ])?;
        p.report.write_csv(dir.join("points").join(format!("{}.csv", p.label)))?;
        p.report.write_json(dir.join("points").join(format!("{}.json", p.label)))?;
        let mut t = BufWriter::new(File::create(dir.join("traces").join(format!("{}.jsonl", p.label)))?);
        for o in &p.outputs {
            serde_json::to_writer(&mut t, o)?;
            t.write_all(b"\n")?;
        }
        t.flush()?;
    }
    w.flush()?;

    if cfg.kind == ExperimentKind::Decoupling {
        let mut w = csv::Writer::from_path(dir.join("table.csv"))?;
        w.write_record(["config_hash", "dpo", "fusion", "match", "hal", "ent", "rouge_l", "bleu4"])?;
        for p in points {
            let (dpo, fusion) = p.cell.expect("decoupling points carry a cell");
            let s = &p.report.summary;
            w.write_record([
                p.config_hash.clone(),
                on_off(dpo).to_string(),
                on_off(fusion).to_string(),
                format!("{:.6}", s.answer_match),
                opt(s.hal),
                opt(s.ent),
                format!("{:.6}", s.rouge_l),
                format!("{:.6}", s.bleu4),
            ])?;
        }
        w.flush()?;
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        kind: ExperimentKind,
        config_hash: String,
        config: &'a ExperimentConfig,
        points: &'a [PointResult],
    }
    let mut f = File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(
        &mut f,
        &Summary {
            kind: cfg.kind,
            config_hash: cfg.hash(),
            config: cfg,
            points,
        },
    )?;
    f.write_all(b"\n")?;
    Ok(())
}

fn points_noise(cfg: &ExperimentConfig, p: &PointResult) -> Option<usize> {
    (cfg.kind == ExperimentKind::Noise)
        .then(|| p.label.strip_prefix("noise_").and_then(|n| n.parse().ok()))
        .flatten()
}
