use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, N_RESERVED};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl LmConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < N_RESERVED {
            return Err(Error::InvalidArgument(format!(
                "vocab_size {} below the {N_RESERVED} reserved ids",
                self.vocab_size
            )));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidArgument("n_layers and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// A contiguous named region of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every parameter group. `tok_emb` doubles as the output projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub slices: Vec<Slice>,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl Layout {
    pub fn new(cfg: &LmConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let mut slices = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let at = offset;
            offset += shape.iter().product::<usize>();
            slices.push(Slice {
                name,
                offset: at,
                shape,
            });
            at
        };
        let tok_emb = push("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_seq_len, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(LayerOffsets {
                ln1_g: push(format!("layer{l}.ln1.gain"), vec![d]),
                ln1_b: push(format!("layer{l}.ln1.bias"), vec![d]),
                wq: push(format!("layer{l}.attn.wq"), vec![d, d]),
                wk: push(format!("layer{l}.attn.wk"), vec![d, d]),
                wv: push(format!("layer{l}.attn.wv"), vec![d, d]),
                wo: push(format!("layer{l}.attn.wo"), vec![d, d]),
                ln2_g: push(format!("layer{l}.ln2.gain"), vec![d]),
                ln2_b: push(format!("layer{l}.ln2.bias"), vec![d]),
                w1: push(format!("layer{l}.ffn.w1"), vec![d, f]),
                b1: push(format!("layer{l}.ffn.b1"), vec![f]),
                w2: push(format!("layer{l}.ffn.w2"), vec![f, d]),
                b2: push(format!("layer{l}.ffn.b2"), vec![d]),
            });
        }
        let lnf_g = push("final_ln.gain".into(), vec![d]);
        let lnf_b = push("final_ln.bias".into(), vec![d]);
        Self {
            slices,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            total: offset,
        }
    }

    pub fn slice(&self, name: &str) -> Option<&Slice> {
        self.slices.iter().find(|s| s.name == name)
    }
}

/// Miniature decoder-only transformer. Parameters live in one flat `f32`
/// vector; all arithmetic runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroLm {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub params: Vec<f32>,
    layout: Layout,
}

impl MicroLm {
    /// Fresh model: matrices and embeddings ~ N(0, 0.02²), layer-norm gains 1,
    /// biases 0.
    pub fn new(config: LmConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = vec![0.0f32; layout.total];
        for s in &layout.slices {
            let fill = if s.name.ends_with(".gain") {
                Some(1.0)
            } else if s.name.ends_with(".bias") || s.name.ends_with(".b1") || s.name.ends_with(".b2") {
                Some(0.0)
            } else {
                None
            };
            for p in &mut params[s.range()] {
                *p = match fill {
                    Some(v) => v,
                    None => normal.sample(&mut rng) as f32,
                };
            }
        }
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Cheap identity tag over the parameter bits; used to reject traces
    /// produced by a different model.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            h ^= p.to_bits() as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    /// Apply `params -= step` elementwise in f64 and round back to f32.
    pub fn apply_update(&mut self, step: &[f64]) {
        for (p, s) in self.params.iter_mut().zip(step) {
            *p = (*p as f64 - s) as f32;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            slices: self.layout.slices.clone(),
            dtype: "f32".into(),
            endianness: "little".into(),
            n_params: self.params.len(),
            vocab: self.vocab.clone(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.format != CHECKPOINT_FORMAT || header.dtype != "f32" || header.endianness != "little" {
            return Err(Error::Format(format!(
                "unsupported checkpoint ({}, {}, {})",
                header.format, header.dtype, header.endianness
            )));
        }
        header.config.validate()?;
        let layout = Layout::new(&header.config);
        if layout.slices != header.slices || layout.total != header.n_params {
            return Err(Error::Format("checkpoint layout does not match its config".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != layout.total * 4 {
            return Err(Error::Format(format!(
                "expected {} parameter bytes, found {}",
                layout.total * 4,
                bytes.len()
            )));
        }
        let params = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        header.vocab.reindex();
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            params,
            layout,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "micro-lm-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: LmConfig,
    slices: Vec<Slice>,
    dtype: String,
    endianness: String,
    n_params: usize,
    vocab: Vocab,
}
