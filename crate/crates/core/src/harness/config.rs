//! Flat `key = value` configuration with dotted keys.
//!
//! Blank lines are ignored and `#` after whitespace starts a comment. Every key can be
//! overridden from the environment: `GUARANTRAG_` followed by the key in
//! upper case with each `.` written as `__`, so `fusion.gamma` becomes
//! `GUARANTRAG_FUSION__GAMMA`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decision::{DecisionStrategy, FeatureConfig};
use crate::dualpath::DpoConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionStrategy};
use crate::lm::Pooling;

pub const ENV_PREFIX: &str = "GUARANTRAG_";

/// Noise levels swept by default.
pub const NOISE_GRID: [usize; 6] = [0, 1, 2, 3, 4, 5];
/// Retrieval weights swept by default.
pub const LAMBDA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Noise,
    Lambda,
    Fusion,
    Decision,
    Decoupling,
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noise" => Self::Noise,
            "lambda" => Self::Lambda,
            "fusion" => Self::Fusion,
            "decision" => Self::Decision,
            "decoupling" => Self::Decoupling,
            other => return Err(Error::Config(format!("unknown experiment kind `{other}`"))),
        })
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Noise => "noise",
            Self::Lambda => "lambda",
            Self::Fusion => "fusion",
            Self::Decision => "decision",
            Self::Decoupling => "decoupling",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub qa: PathBuf,
    pub theta: PathBuf,
    /// Evidence model; the base model stands in when absent.
    pub phi: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub seed: u64,
    pub kind: ExperimentKind,
    pub decision: DecisionStrategy,
    pub features: FeatureConfig,
    pub fusion: FusionConfig,
    pub dpo: DpoConfig,
    /// Retrieval depth.
    pub k: usize,
    /// Noise documents added to every query outside the noise sweep.
    pub n_noise: usize,
    pub noise_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    /// Dataset split evaluated.
    pub split: String,
    /// At most this many queries are evaluated; 0 means all.
    pub max_queries: usize,
    /// Token budget of the inner and refer answers.
    pub max_new: usize,
    pub coverage_threshold: f64,
    /// Optional segmenter rules file.
    pub segmenter: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            qa: "qa.jsonl".into(),
            theta: "theta.ckpt".into(),
            phi: None,
            out_dir: "runs".into(),
            run_id: "run".into(),
            seed: 0,
            kind: ExperimentKind::Noise,
            decision: DecisionStrategy::Always,
            features: FeatureConfig::default(),
            fusion: FusionConfig::default(),
            dpo: DpoConfig::default(),
            k: 5,
            n_noise: 0,
            noise_grid: NOISE_GRID.to_vec(),
            lambda_grid: LAMBDA_GRID.to_vec(),
            split: "test".into(),
            max_queries: 50,
            max_new: 24,
            coverage_threshold: crate::metrics::DEFAULT_COVERAGE,
            segmenter: None,
        }
    }
}

/// A `#` at the start of a line or after whitespace opens a comment.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    let cut = (0..bytes.len()).find(|&i| bytes[i] == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()));
    cut.map_or(line, |i| &line[..i])
}

/// Parse the flat text format into an ordered key/value map.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = strip_comment(line).trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Overrides found in `vars` under [`ENV_PREFIX`].
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> BTreeMap<String, String> {
    vars.into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_lowercase().replace("__", "."), v))
        })
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: grid is empty")));
    }
    Ok(items)
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let xs: Vec<f64> = list(key, v)?;
    match xs[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated numbers"))),
    }
}

impl ExperimentConfig {
    /// Apply `key = value` settings in order.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        // the decision kind must be known before its parameters
        if let Some(kind) = kv.get("decision.kind") {
            self.decision = kind.parse()?;
        }
        for (k, v) in kv {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "corpus" => self.corpus = v.into(),
            "qa" => self.qa = v.into(),
            "theta" => self.theta = v.into(),
            "phi" => self.phi = (!v.is_empty()).then(|| v.into()),
            "out_dir" => self.out_dir = v.into(),
            "run_id" => self.run_id = v.into(),
            "seed" => self.seed = num(key, v)?,
            "kind" => self.kind = v.parse()?,
            "k" | "retrieval.k" => self.k = num(key, v)?,
            "noise" | "retrieval.noise" => self.n_noise = num(key, v)?,
            "grid.noise" => self.noise_grid = list(key, v)?,
            "grid.lambda" => self.lambda_grid = list(key, v)?,
            "eval.split" => self.split = v.into(),
            "eval.max_queries" => self.max_queries = num(key, v)?,
            "eval.max_new" => self.max_new = num(key, v)?,
            "eval.coverage_threshold" => self.coverage_threshold = num(key, v)?,
            "segmenter" => self.segmenter = (!v.is_empty()).then(|| v.into()),
            "decision.kind" => {}
            "decision.threshold" => match &mut self.decision {
                DecisionStrategy::Confidence { threshold } | DecisionStrategy::Similarity { threshold } => {
                    *threshold = num(key, v)?
                }
                other => return Err(Error::Config(format!("{key} does not apply to `{}`", other.name()))),
            },
            "decision.rate" => match &mut self.decision {
                DecisionStrategy::Random { rate, .. } => *rate = num(key, v)?,
                other => return Err(Error::Config(format!("{key} does not apply to `{}`", other.name()))),
            },
            "decision.seed" => match &mut self.decision {
                DecisionStrategy::Random { seed, .. } => *seed = num(key, v)?,
                other => return Err(Error::Config(format!("{key} does not apply to `{}`", other.name()))),
            },
            "decision.cutoff_year" => self.features.cutoff_year = num(key, v)?,
            "decision.temporal_lexicon" => {
                self.features.temporal_lexicon = v.split(',').map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect()
            }
            "decision.rare_df" => self.features.rare_df = num(key, v)?,
            "fusion.gamma" => self.fusion.gamma = num(key, v)?,
            "fusion.tau" => self.fusion.tau = num(key, v)?,
            "fusion.relevance_threshold" | "fusion.threshold" => self.fusion.relevance_threshold = num(key, v)?,
            "fusion.strategy" => self.fusion.strategy = v.parse::<FusionStrategy>()?,
            "fusion.segment_repr" => self.fusion.segment_repr = v.parse::<Pooling>()?,
            "fusion.max_new" => self.fusion.max_new = num(key, v)?,
            "fusion.seed" => self.fusion.seed = num(key, v)?,
            "dpo.beta" => self.dpo.beta = num(key, v)?,
            "dpo.lr" => self.dpo.lr = num(key, v)?,
            "dpo.steps" => self.dpo.steps = num(key, v)?,
            "dpo.batch_size" => self.dpo.batch_size = num(key, v)?,
            "dpo.lambda_start" => self.dpo.lambda_start = pair(key, v)?,
            "dpo.lambda_end" => self.dpo.lambda_end = pair(key, v)?,
            "dpo.seed" => self.dpo.seed = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.dpo.validate()?;
        self.decision.validate()?;
        if self.k == 0 {
            return Err(Error::Config("retrieval.k must be at least 1".into()));
        }
        if self.noise_grid.is_empty() || self.lambda_grid.is_empty() {
            return Err(Error::Config("grids must be nonempty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("lambda grid values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the environment.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut kv = match path {
            Some(p) => parse_kv(&std::fs::read_to_string(p)?)?,
            None => BTreeMap::new(),
        };
        kv.extend(env_overrides(env));
        let mut cfg = Self::default();
        cfg.apply(&kv)?;
        Ok(cfg)
    }

    /// Input paths must exist before a run starts.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![&self.corpus, &self.qa, &self.theta];
        paths.extend(self.phi.as_ref());
        paths.extend(self.segmenter.as_ref());
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("missing input `{}`", p.display())));
            }
        }
        Ok(())
    }

    /// Short SHA-256 digest of the canonical JSON form, leaving out where
    /// the reports are written.
    pub fn hash(&self) -> String {
        let keyed = Self {
            out_dir: PathBuf::new(),
            run_id: String::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&keyed).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys_and_comments() {
        let kv = parse_kv("# comment\nfusion.gamma = 2  # strength\n\nkind=decoupling\ngrid.lambda=0.2, 0.4\nrun_id=a#b\n").unwrap();
        assert_eq!(kv["run_id"], "a#b");
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&kv).unwrap();
        assert_eq!(cfg.fusion.gamma, 2.0);
        assert_eq!(cfg.kind, ExperimentKind::Decoupling);
        assert_eq!(cfg.lambda_grid, vec![0.2, 0.4]);
        assert!(parse_kv("novalue").is_err());
    }

    #[test]
    fn environment_wins_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "fusion.gamma=1.0\nfusion.relevance_threshold=0.5\n").unwrap();
        let env = vec![
            ("GUARANTRAG_FUSION__GAMMA".to_string(), "3".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let cfg = ExperimentConfig::load(Some(&p), env).unwrap();
        assert_eq!(cfg.fusion.gamma, 3.0);
        assert_eq!(cfg.fusion.relevance_threshold, 0.5);
    }

    #[test]
    fn decision_parameters_follow_kind() {
        let kv = parse_kv("decision.threshold=0.8\ndecision.kind=confidence").unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&kv).unwrap();
        assert_eq!(cfg.decision, DecisionStrategy::Confidence { threshold: 0.8 });
        let kv = parse_kv("decision.kind=keyword\ndecision.threshold=0.8").unwrap();
        assert!(ExperimentConfig::default().apply(&kv).is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_grids() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("fusion.gama", "1").is_err());
        assert!(cfg.set("grid.noise", "").is_err());
        cfg.set("grid.lambda", "0.5,1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.fusion.gamma = 0.7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
