//! Forward and reverse-mode passes of the pre-norm causal transformer.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use super::model::{Layout, LmConfig, MicroLm};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// Post-final-norm hidden state per position; the vectors fed to the
    /// vocabulary projection.
    pub hidden: Array2<f64>,
    /// Per-position vocabulary logits.
    pub logits: Array2<f64>,
    cache: Cache,
    fingerprint: u64,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Softmax of the logits at position `t`.
    pub fn probs(&self, t: usize) -> Vec<f64> {
        softmax(self.logits.row(t))
    }
}

/// Upstream gradient of a scalar loss with respect to the trace outputs.
#[derive(Debug, Clone, Default)]
pub struct LossGrad {
    pub logits: Option<Array2<f64>>,
    pub hidden: Option<Array2<f64>>,
}

impl LossGrad {
    pub fn zeros(trace: &ForwardTrace) -> Self {
        Self {
            logits: Some(Array2::zeros(trace.logits.raw_dim())),
            hidden: Some(Array2::zeros(trace.hidden.raw_dim())),
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        if let Some(l) = self.logits.as_mut() {
            l.mapv_inplace(|x| x * factor);
        }
        if let Some(h) = self.hidden.as_mut() {
            h.mapv_inplace(|x| x * factor);
        }
        self
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    lnf: Option<LnCache>,
}

/// Borrowed f64 view of the flat parameter vector.
pub(crate) struct Weights<'a> {
    p: &'a [f64],
    cfg: &'a LmConfig,
    layout: &'a Layout,
}

impl<'a> Weights<'a> {
    pub(crate) fn new(p: &'a [f64], cfg: &'a LmConfig, layout: &'a Layout) -> Self {
        Self { p, cfg, layout }
    }

    fn mat(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((rows, cols), &self.p[off..off + rows * cols]).expect("layout shape")
    }

    fn vec(&self, off: usize, n: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&self.p[off..off + n])
    }

    pub(crate) fn tok_emb(&self) -> ArrayView2<'a, f64> {
        self.mat(self.layout.tok_emb, self.cfg.vocab_size, self.cfg.d_model)
    }
}

fn grad_mat<'g>(g: &'g mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'g, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut g[off..off + rows * cols]).expect("layout shape")
}

fn grad_vec(g: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut g[off..off + n])
}

pub fn softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

pub fn log_softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates dgain/dbias.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    mut dg: ArrayViewMut1<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let dxhat = dy * &g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let dxh = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.dot(&xh) / d;
        let r = cache.rstd[t];
        Zip::from(dx.row_mut(t))
            .and(dxh)
            .and(xh)
            .for_each(|o, &a, &h| *o = r * (a - mean_d - h * mean_dx));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

pub(crate) fn check_tokens(cfg: &LmConfig, tokens: &[usize]) -> Result<()> {
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("forward on an empty sequence".into()));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Core pass. Returns hidden states, optional logits and optional cache.
pub(crate) fn run(
    w: &Weights,
    tokens: &[usize],
    want_logits: bool,
    want_cache: bool,
) -> (Array2<f64>, Option<Array2<f64>>, Option<Cache>) {
    let cfg = w.cfg;
    let lay = w.layout;
    let (t_len, d) = (tokens.len(), cfg.d_model);
    let (nh, dh, f) = (cfg.n_heads, cfg.head_dim(), cfg.ffn_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let emb = w.tok_emb();
    let pos = w.mat(lay.pos_emb, cfg.max_seq_len, d);

    let mut x = Array2::zeros((t_len, d));
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(t);
        row.assign(&emb.row(tok));
        row += &pos.row(t);
    }

    let mut cache = Cache::default();
    for lo in &lay.layers {
        let (a, ln1) = layer_norm(&x, w.vec(lo.ln1_g, d), w.vec(lo.ln1_b, d));
        let q = a.dot(&w.mat(lo.wq, d, d));
        let k = a.dot(&w.mat(lo.wk, d, d));
        let v = a.dot(&w.mat(lo.wv, d, d));
        let mut o = Array2::zeros((t_len, d));
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t());
            for i in 0..t_len {
                let mut row = sc.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    row[j] = (row[j] - max).exp();
                    z += row[j];
                }
                for j in 0..t_len {
                    row[j] = if j <= i { row[j] / z } else { 0.0 };
                }
            }
            o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        x = x + o.dot(&w.mat(lo.wo, d, d));

        let (m, ln2) = layer_norm(&x, w.vec(lo.ln2_g, d), w.vec(lo.ln2_b, d));
        let u = m.dot(&w.mat(lo.w1, d, f)) + w.vec(lo.b1, f);
        let g = u.mapv(gelu);
        x = x + g.dot(&w.mat(lo.w2, f, d)) + w.vec(lo.b2, d);

        if want_cache {
            cache.layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                m,
                u,
                g,
            });
        }
    }
    let (hidden, lnf) = layer_norm(&x, w.vec(lay.lnf_g, d), w.vec(lay.lnf_b, d));
    let logits = want_logits.then(|| hidden.dot(&emb.t()));
    if want_cache {
        cache.lnf = Some(lnf);
    }
    (hidden, logits, want_cache.then_some(cache))
}

pub(crate) fn backward_weights(
    w: &Weights,
    tokens: &[usize],
    hidden: &Array2<f64>,
    cache: &Cache,
    grad: &LossGrad,
) -> Vec<f64> {
    let cfg = w.cfg;
    let lay = w.layout;
    let (t_len, d) = (tokens.len(), cfg.d_model);
    let (nh, dh, f) = (cfg.n_heads, cfg.head_dim(), cfg.ffn_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let emb = w.tok_emb();
    let mut gp = vec![0.0; lay.total];

    let mut dh_final = match &grad.hidden {
        Some(h) => h.clone(),
        None => Array2::zeros((t_len, d)),
    };
    if let Some(dl) = &grad.logits {
        dh_final += &dl.dot(&emb);
        let mut demb = grad_mat(&mut gp, lay.tok_emb, cfg.vocab_size, d);
        demb += &dl.t().dot(hidden);
    }

    let lnf = cache.lnf.as_ref().expect("cache holds final norm");
    let mut dx = {
        let (dg, rest) = gp.split_at_mut(lay.lnf_b);
        layer_norm_backward(
            &dh_final,
            lnf,
            w.vec(lay.lnf_g, d),
            ArrayViewMut1::from(&mut dg[lay.lnf_g..lay.lnf_g + d]),
            ArrayViewMut1::from(&mut rest[..d]),
        )
    };

    for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // feed-forward block
        let w2 = w.mat(lo.w2, f, d);
        grad_mat(&mut gp, lo.w2, f, d).scaled_add(1.0, &lc.g.t().dot(&dx));
        grad_vec(&mut gp, lo.b2, d).scaled_add(1.0, &dx.sum_axis(Axis(0)));
        let mut du = dx.dot(&w2.t());
        Zip::from(&mut du).and(&lc.u).for_each(|g, &u| *g *= gelu_grad(u));
        grad_mat(&mut gp, lo.w1, d, f).scaled_add(1.0, &lc.m.t().dot(&du));
        grad_vec(&mut gp, lo.b1, f).scaled_add(1.0, &du.sum_axis(Axis(0)));
        let dm = du.dot(&w.mat(lo.w1, d, f).t());
        let dx_ln2 = {
            let (lo_part, hi_part) = gp.split_at_mut(lo.ln2_b);
            layer_norm_backward(
                &dm,
                &lc.ln2,
                w.vec(lo.ln2_g, d),
                ArrayViewMut1::from(&mut lo_part[lo.ln2_g..lo.ln2_g + d]),
                ArrayViewMut1::from(&mut hi_part[..d]),
            )
        };
        dx += &dx_ln2;

        // attention block
        grad_mat(&mut gp, lo.wo, d, d).scaled_add(1.0, &lc.o.t().dot(&dx));
        let d_o = dx.dot(&w.mat(lo.wo, d, d).t());
        let mut dq = Array2::zeros((t_len, d));
        let mut dk = Array2::zeros((t_len, d));
        let mut dv = Array2::zeros((t_len, d));
        for h in 0..nh {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &lc.probs[h];
            let doh = d_o.slice(cols);
            let dp = doh.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = Array2::zeros((t_len, t_len));
            for i in 0..t_len {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += dp[[i, j]] * p[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        grad_mat(&mut gp, lo.wq, d, d).scaled_add(1.0, &lc.a.t().dot(&dq));
        grad_mat(&mut gp, lo.wk, d, d).scaled_add(1.0, &lc.a.t().dot(&dk));
        grad_mat(&mut gp, lo.wv, d, d).scaled_add(1.0, &lc.a.t().dot(&dv));
        let da = dq.dot(&w.mat(lo.wq, d, d).t())
            + dk.dot(&w.mat(lo.wk, d, d).t())
            + dv.dot(&w.mat(lo.wv, d, d).t());
        let dx_ln1 = {
            let (lo_part, hi_part) = gp.split_at_mut(lo.ln1_b);
            layer_norm_backward(
                &da,
                &lc.ln1,
                w.vec(lo.ln1_g, d),
                ArrayViewMut1::from(&mut lo_part[lo.ln1_g..lo.ln1_g + d]),
                ArrayViewMut1::from(&mut hi_part[..d]),
            )
        };
        dx += &dx_ln1;
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let row = dx.row(t);
        {
            let off = lay.tok_emb + tok * d;
            grad_vec(&mut gp, off, d).scaled_add(1.0, &row);
        }
        let off = lay.pos_emb + t * d;
        grad_vec(&mut gp, off, d).scaled_add(1.0, &row);
    }
    gp
}

impl MicroLm {
    pub(crate) fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&p| p as f64).collect()
    }

    /// Full forward pass with logits and the activations backward needs.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        check_tokens(&self.config, tokens)?;
        let p = self.params_f64();
        let w = Weights::new(&p, &self.config, self.layout());
        let (hidden, logits, cache) = run(&w, tokens, true, true);
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            hidden,
            logits: logits.expect("requested"),
            cache: cache.expect("requested"),
            fingerprint: self.fingerprint(),
        })
    }

    /// Hidden states only; no logits, no cache.
    pub fn hidden_states(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        check_tokens(&self.config, tokens)?;
        let p = self.params_f64();
        let w = Weights::new(&p, &self.config, self.layout());
        Ok(run(&w, tokens, false, false).0)
    }

    /// Final-position hidden state.
    pub fn last_hidden(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        let h = self.hidden_states(tokens)?;
        Ok(h.row(h.nrows() - 1).to_owned())
    }

    /// Vocabulary logits `W_v · h` for one hidden vector.
    pub fn project(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.config.d_model;
        let off = self.layout().tok_emb;
        self.params[off..off + self.config.vocab_size * d]
            .chunks_exact(d)
            .map(|row| row.iter().zip(hidden).map(|(&e, &h)| e as f64 * h).sum())
            .collect()
    }

    /// Exact gradient of a scalar loss given its derivative w.r.t. the trace.
    pub fn backward(&self, trace: &ForwardTrace, grad: &LossGrad) -> Result<Vec<f64>> {
        if trace.fingerprint != self.fingerprint() {
            return Err(Error::TraceMismatch("parameters changed since the forward pass".into()));
        }
        let t_len = trace.tokens.len();
        if let Some(l) = &grad.logits {
            if l.dim() != (t_len, self.config.vocab_size) {
                return Err(Error::TraceMismatch(format!("logit gradient shape {:?}", l.dim())));
            }
        }
        if let Some(h) = &grad.hidden {
            if h.dim() != (t_len, self.config.d_model) {
                return Err(Error::TraceMismatch(format!("hidden gradient shape {:?}", h.dim())));
            }
        }
        let p = self.params_f64();
        let w = Weights::new(&p, &self.config, self.layout());
        Ok(backward_weights(&w, &trace.tokens, &trace.hidden, &trace.cache, grad))
    }
}
