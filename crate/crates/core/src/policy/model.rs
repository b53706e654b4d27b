//! A small pre-norm causal transformer with tied input/output embeddings,
//! an adapter-aware forward pass, and exact reverse-mode gradients.
//!
//! Everything is computed in `f64` and row by row: the logits for a position
//! depend only on the tokens up to it and are bitwise identical whether the
//! sequence is processed in one segment, token by token from a cache, or split
//! into a shared prefix plus per-continuation segments.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::state::MAX_CONTEXT;
use super::vocab::VOCAB_SIZE;
use crate::adapter::{AdapterParams, BlockAdapter, LoraPair};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_ctx: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_ctx: MAX_CONTEXT,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    /// Projections are stored input-major: `y[o] = Σ_i x[i] · w[i * out + o]`.
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// The frozen base network.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub cfg: ModelConfig,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub blocks: Vec<Block>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

impl BaseWeights {
    pub fn zeros(cfg: ModelConfig) -> Self {
        let d = cfg.d_model;
        let block = Block {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: vec![0.0; d * cfg.d_ff],
            b1: vec![0.0; cfg.d_ff],
            w2: vec![0.0; cfg.d_ff * d],
            b2: vec![0.0; d],
        };
        BaseWeights {
            cfg,
            tok_emb: vec![0.0; cfg.vocab * d],
            pos_emb: vec![0.0; cfg.max_ctx * d],
            blocks: vec![block; cfg.n_layers],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
        }
    }

    /// GPT-2 style initialization, with sinusoidal position embeddings as a
    /// starting point so late positions carry structure before training.
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(cfg);
        let d = cfg.d_model;
        let normal = Normal::new(0.0, 0.02).unwrap();
        let resid = Normal::new(0.0, 0.02 / (2.0 * cfg.n_layers as f64).sqrt()).unwrap();
        let fill = |v: &mut Vec<f64>, dist: &Normal<f64>, rng: &mut dyn rand::RngCore| {
            for x in v.iter_mut() {
                *x = dist.sample(rng);
            }
        };
        fill(&mut w.tok_emb, &normal, rng);
        for p in 0..cfg.max_ctx {
            for i in 0..d {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = p as f64 * freq;
                w.pos_emb[p * d + i] = 0.1 * if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        for b in &mut w.blocks {
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
            fill(&mut b.wq, &normal, rng);
            fill(&mut b.wk, &normal, rng);
            fill(&mut b.wv, &normal, rng);
            fill(&mut b.wo, &resid, rng);
            fill(&mut b.w1, &normal, rng);
            fill(&mut b.w2, &resid, rng);
        }
        w.lnf_g.fill(1.0);
        w
    }

    /// All parameter tensors in canonical order with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let c = &self.cfg;
        let (d, ff) = (c.d_model, c.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![c.vocab, d], &self.tok_emb),
            ("pos_emb".to_string(), vec![c.max_ctx, d], &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                (n("ln1_g"), vec![d], &b.ln1_g),
                (n("ln1_b"), vec![d], &b.ln1_b),
                (n("wq"), vec![d, d], &b.wq),
                (n("wk"), vec![d, d], &b.wk),
                (n("wv"), vec![d, d], &b.wv),
                (n("wo"), vec![d, d], &b.wo),
                (n("ln2_g"), vec![d], &b.ln2_g),
                (n("ln2_b"), vec![d], &b.ln2_b),
                (n("w1"), vec![d, ff], &b.w1),
                (n("b1"), vec![ff], &b.b1),
                (n("w2"), vec![ff, d], &b.w2),
                (n("b2"), vec![d], &b.b2),
            ]);
        }
        out.push(("lnf_g".to_string(), vec![d], &self.lnf_g));
        out.push(("lnf_b".to_string(), vec![d], &self.lnf_b));
        out
    }

    /// Mutable views in the same order as [`BaseWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// SHA-256 over the little-endian `f32` image of every tensor, which is
    /// exactly what a snapshot file stores.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, _, t) in self.tensors() {
            for v in t.iter() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every parameter to the nearest `f32`, so in-memory weights equal
    /// what a snapshot round trip yields.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }
}

/// Keys and values for every processed position, per layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub len: usize,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            len: 0,
            k: vec![Vec::new(); cfg.n_layers],
            v: vec![Vec::new(); cfg.n_layers],
        }
    }
}

#[derive(Debug, Clone, Default)]
struct LayerTrace {
    x_in: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    uq: Vec<f64>,
    uv: Vec<f64>,
    att: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    f_pre: Vec<f64>,
    f_act: Vec<f64>,
}

/// Activations of one forward segment, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct SegmentTrace {
    pub start: usize,
    pub tokens: Vec<u32>,
    layers: Vec<LayerTrace>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    hf: Vec<f64>,
}

impl SegmentTrace {
    pub fn end(&self) -> usize {
        self.start + self.tokens.len()
    }
}

/// Gradient with respect to cached keys and values over positions `[0, len)`.
#[derive(Debug, Clone)]
pub struct KvGrad {
    pub len: usize,
    pub dk: Vec<Vec<f64>>,
    pub dv: Vec<Vec<f64>>,
}

impl KvGrad {
    pub fn zeros(cfg: &ModelConfig, len: usize) -> Self {
        let n = len * cfg.d_model;
        KvGrad {
            len,
            dk: vec![vec![0.0; n]; cfg.n_layers],
            dv: vec![vec![0.0; n]; cfg.n_layers],
        }
    }

    /// Adds the overlapping leading positions of `other` into `self`.
    pub fn accumulate_prefix(&mut self, other: &KvGrad) {
        for l in 0..self.dk.len() {
            let n = self.dk[l].len().min(other.dk[l].len());
            for i in 0..n {
                self.dk[l][i] += other.dk[l][i];
                self.dv[l][i] += other.dv[l][i];
            }
        }
    }
}

/// Where parameter gradients go. Test-time backward passes carry only an
/// adapter sink; base gradients are then never materialized.
pub struct GradSink<'a> {
    pub base: Option<&'a mut BaseWeights>,
    pub adapter: Option<&'a mut [BlockAdapter]>,
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Eight interleaved partial sums, so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `out = x · W` with `W` stored input-major (`x.len()` rows).
#[inline]
fn matvec(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    out.fill(0.0);
    for (i, xi) in x.iter().enumerate() {
        axpy(*xi, &w[i * n_out..(i + 1) * n_out], out);
    }
}

/// `dx += dy · Wᵀ`.
#[inline]
fn matvec_t_acc(dy: &[f64], w: &[f64], dx: &mut [f64]) {
    let n_out = dy.len();
    for (i, dxi) in dx.iter_mut().enumerate() {
        *dxi += dot(dy, &w[i * n_out..(i + 1) * n_out]);
    }
}

/// `dW += x ⊗ dy`.
#[inline]
fn outer_acc(x: &[f64], dy: &[f64], dw: &mut [f64]) {
    let n_out = dy.len();
    for (i, xi) in x.iter().enumerate() {
        axpy(*xi, dy, &mut dw[i * n_out..(i + 1) * n_out]);
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = xhat[i] * g[i] + b[i];
    }
    rstd
}

fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dx: &mut [f64],
    dg: Option<(&mut [f64], &mut [f64])>,
) {
    let n = dy.len() as f64;
    if let Some((dg, db)) = dg {
        for i in 0..dy.len() {
            dg[i] += dy[i] * xhat[i];
            db[i] += dy[i];
        }
    }
    let mut mean_d = 0.0;
    let mut mean_dx = 0.0;
    for i in 0..dy.len() {
        let dxh = dy[i] * g[i];
        mean_d += dxh;
        mean_dx += dxh * xhat[i];
    }
    mean_d /= n;
    mean_dx /= n;
    for i in 0..dy.len() {
        let dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_d - xhat[i] * mean_dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Low-rank path: `u = A·h`, `out += s·B·u`.
#[inline]
fn lora_apply(pair: &LoraPair, rank: usize, scale: f64, h: &[f64], u: &mut [f64], out: &mut [f64]) {
    let d_in = h.len();
    for (r, ur) in u.iter_mut().enumerate() {
        *ur = dot(&pair.a[r * d_in..(r + 1) * d_in], h);
    }
    for (o, out_o) in out.iter_mut().enumerate() {
        *out_o += scale * dot(&pair.b[o * rank..(o + 1) * rank], u);
    }
}

/// Backward of the low-rank path for one row; adds into `dh` and the sink.
#[inline]
fn lora_backward(
    pair: &LoraPair,
    rank: usize,
    scale: f64,
    h: &[f64],
    u: &[f64],
    dout: &[f64],
    dh: &mut [f64],
    grad: Option<&mut LoraPair>,
) {
    let d_in = h.len();
    let mut du = vec![0.0; rank];
    for (o, dout_o) in dout.iter().enumerate() {
        let row = &pair.b[o * rank..(o + 1) * rank];
        axpy(scale * dout_o, row, &mut du);
    }
    if let Some(g) = grad {
        for (o, dout_o) in dout.iter().enumerate() {
            axpy(scale * dout_o, u, &mut g.b[o * rank..(o + 1) * rank]);
        }
        for r in 0..rank {
            axpy(du[r], h, &mut g.a[r * d_in..(r + 1) * d_in]);
        }
    }
    for r in 0..rank {
        axpy(du[r], &pair.a[r * d_in..(r + 1) * d_in], dh);
    }
}

impl BaseWeights {
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.cfg.vocab {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.cfg.vocab,
                });
            }
        }
        Ok(())
    }

    /// Runs `tokens` at positions `cache.len ..` and appends their keys and
    /// values to `cache`. Returns row-major logits (`tokens.len() × vocab`),
    /// plus the activations when `keep_trace` is set.
    pub fn forward_segment(
        &self,
        adapter: Option<&AdapterParams>,
        cache: &mut KvCache,
        tokens: &[u32],
        keep_trace: bool,
    ) -> Result<(Vec<f64>, Option<SegmentTrace>)> {
        self.check_tokens(tokens)?;
        let c = &self.cfg;
        let (d, ff, vocab) = (c.d_model, c.d_ff, c.vocab);
        let start = cache.len;
        let n = tokens.len();
        if start + n > c.max_ctx {
            return Err(Error::ContextOverflow {
                len: start + n,
                max: c.max_ctx,
            });
        }
        if let Some(a) = adapter {
            if a.blocks.len() != c.n_layers {
                return Err(Error::Shape(format!(
                    "adapter has {} blocks, model has {}",
                    a.blocks.len(),
                    c.n_layers
                )));
            }
        }
        let rank = adapter.map_or(0, |a| a.rank);
        let scale = adapter.map_or(0.0, |a| a.scale());
        let hd = c.head_dim();
        let att_scale = 1.0 / (hd as f64).sqrt();

        let mut trace = keep_trace.then(|| SegmentTrace {
            start,
            tokens: tokens.to_vec(),
            layers: vec![LayerTrace::default(); c.n_layers],
            ..Default::default()
        });
        let mut logits = vec![0.0; n * vocab];

        let mut x = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut h = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut uq = vec![0.0; rank];
        let mut uv = vec![0.0; rank];
        let mut att = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut f_pre = vec![0.0; ff];
        let mut f_act = vec![0.0; ff];
        let mut y = vec![0.0; d];
        let mut scores: Vec<f64> = Vec::with_capacity(c.max_ctx);

        for (t, &tok) in tokens.iter().enumerate() {
            let p = start + t;
            let te = &self.tok_emb[tok as usize * d..(tok as usize + 1) * d];
            let pe = &self.pos_emb[p * d..(p + 1) * d];
            for i in 0..d {
                x[i] = te[i] + pe[i];
            }
            for (l, blk) in self.blocks.iter().enumerate() {
                let ad = adapter.map(|a| &a.blocks[l]);
                if let Some(tr) = trace.as_mut() {
                    tr.layers[l].x_in.extend_from_slice(&x);
                }
                let rstd1 = layer_norm(&x, &blk.ln1_g, &blk.ln1_b, &mut xhat, &mut h);
                matvec(&h, &blk.wq, &mut q);
                matvec(&h, &blk.wk, &mut k);
                matvec(&h, &blk.wv, &mut v);
                if let Some(ad) = ad {
                    lora_apply(&ad.q, rank, scale, &h, &mut uq, &mut q);
                    lora_apply(&ad.v, rank, scale, &h, &mut uv, &mut v);
                }
                cache.k[l].extend_from_slice(&k);
                cache.v[l].extend_from_slice(&v);
                let keys = &cache.k[l];
                let vals = &cache.v[l];
                for head in 0..c.n_heads {
                    let hs = head * hd;
                    let qh = &q[hs..hs + hd];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=p {
                        let s = att_scale * dot(qh, &keys[j * d + hs..j * d + hs + hd]);
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let out = &mut att[hs..hs + hd];
                    out.fill(0.0);
                    for (j, s) in scores.iter().enumerate() {
                        axpy(s / z, &vals[j * d + hs..j * d + hs + hd], out);
                    }
                }
                matvec(&att, &blk.wo, &mut o);
                for i in 0..d {
                    x[i] += o[i];
                }
                if let Some(tr) = trace.as_mut() {
                    let lt = &mut tr.layers[l];
                    lt.xhat1.extend_from_slice(&xhat);
                    lt.rstd1.push(rstd1);
                    lt.h1.extend_from_slice(&h);
                    lt.q.extend_from_slice(&q);
                    lt.uq.extend_from_slice(&uq);
                    lt.uv.extend_from_slice(&uv);
                    lt.att.extend_from_slice(&att);
                }
                let rstd2 = layer_norm(&x, &blk.ln2_g, &blk.ln2_b, &mut xhat, &mut h);
                matvec(&h, &blk.w1, &mut f_pre);
                for j in 0..ff {
                    f_pre[j] += blk.b1[j];
                    f_act[j] = gelu(f_pre[j]);
                }
                matvec(&f_act, &blk.w2, &mut y);
                for i in 0..d {
                    x[i] += y[i] + blk.b2[i];
                }
                if let Some(tr) = trace.as_mut() {
                    let lt = &mut tr.layers[l];
                    lt.xhat2.extend_from_slice(&xhat);
                    lt.rstd2.push(rstd2);
                    lt.h2.extend_from_slice(&h);
                    lt.f_pre.extend_from_slice(&f_pre);
                    lt.f_act.extend_from_slice(&f_act);
                }
            }
            let rstdf = layer_norm(&x, &self.lnf_g, &self.lnf_b, &mut xhat, &mut h);
            let row = &mut logits[t * vocab..(t + 1) * vocab];
            for (vi, lv) in row.iter_mut().enumerate() {
                *lv = dot(&h, &self.tok_emb[vi * d..(vi + 1) * d]);
            }
            if let Some(tr) = trace.as_mut() {
                tr.xhatf.extend_from_slice(&xhat);
                tr.rstdf.push(rstdf);
                tr.hf.extend_from_slice(&h);
            }
        }
        cache.len += n;
        Ok((logits, trace))
    }

    /// Logits for a whole sequence from an empty cache.
    pub fn forward(&self, tokens: &[u32], adapter: Option<&AdapterParams>) -> Result<Vec<f64>> {
        let mut cache = KvCache::new(&self.cfg);
        Ok(self.forward_segment(adapter, &mut cache, tokens, false)?.0)
    }

    /// Reverse pass over one segment.
    ///
    /// `cache` must hold keys/values for every position up to `trace.end()`.
    /// `kv_grad` covers positions `[0, trace.end())`: on entry its entries for
    /// the segment's own positions hold gradients deposited by later
    /// segments; on return its entries for earlier positions have this
    /// segment's contributions added.
    pub fn backward_segment(
        &self,
        adapter: Option<&AdapterParams>,
        cache: &KvCache,
        trace: &SegmentTrace,
        dlogits: Option<&[f64]>,
        kv_grad: &mut KvGrad,
        sink: &mut GradSink<'_>,
    ) {
        let c = &self.cfg;
        let (d, ff, vocab) = (c.d_model, c.d_ff, c.vocab);
        let n = trace.tokens.len();
        let start = trace.start;
        let rank = adapter.map_or(0, |a| a.rank);
        let scale = adapter.map_or(0.0, |a| a.scale());
        let hd = c.head_dim();
        let att_scale = 1.0 / (hd as f64).sqrt();
        debug_assert!(kv_grad.len >= trace.end());

        // gradient on the residual stream leaving the last block
        let mut dx = vec![0.0; n * d];
        if let Some(dl) = dlogits {
            let mut dh = vec![0.0; d];
            for t in 0..n {
                let row = &dl[t * vocab..(t + 1) * vocab];
                let hf = &trace.hf[t * d..(t + 1) * d];
                dh.fill(0.0);
                for (vi, g) in row.iter().enumerate() {
                    if *g == 0.0 {
                        continue;
                    }
                    axpy(*g, &self.tok_emb[vi * d..(vi + 1) * d], &mut dh);
                    if let Some(base) = sink.base.as_deref_mut() {
                        axpy(*g, hf, &mut base.tok_emb[vi * d..(vi + 1) * d]);
                    }
                }
                let dg = sink
                    .base
                    .as_deref_mut()
                    .map(|b| (&mut b.lnf_g[..], &mut b.lnf_b[..]));
                layer_norm_backward(
                    &dh,
                    &trace.xhatf[t * d..(t + 1) * d],
                    trace.rstdf[t],
                    &self.lnf_g,
                    &mut dx[t * d..(t + 1) * d],
                    dg,
                );
            }
        }

        let mut dh = vec![0.0; d];
        let mut df = vec![0.0; ff];
        let mut datt = vec![0.0; n * d];
        let mut dq = vec![0.0; n * d];
        let mut dp: Vec<f64> = Vec::with_capacity(c.max_ctx);
        let mut probs: Vec<f64> = Vec::with_capacity(c.max_ctx);

        for l in (0..c.n_layers).rev() {
            let blk = &self.blocks[l];
            let lt = &trace.layers[l];
            let ad = adapter.map(|a| &a.blocks[l]);

            // feed-forward sublayer; dx becomes the gradient at the mid residual
            for t in 0..n {
                let dy = &dx[t * d..(t + 1) * d];
                let f_pre = &lt.f_pre[t * ff..(t + 1) * ff];
                let f_act = &lt.f_act[t * ff..(t + 1) * ff];
                df.fill(0.0);
                matvec_t_acc(dy, &blk.w2, &mut df);
                if let Some(base) = sink.base.as_deref_mut() {
                    let bb = &mut base.blocks[l];
                    outer_acc(f_act, dy, &mut bb.w2);
                    axpy(1.0, dy, &mut bb.b2);
                }
                for j in 0..ff {
                    df[j] *= gelu_grad(f_pre[j]);
                }
                let h2 = &lt.h2[t * d..(t + 1) * d];
                dh.fill(0.0);
                matvec_t_acc(&df, &blk.w1, &mut dh);
                if let Some(base) = sink.base.as_deref_mut() {
                    let bb = &mut base.blocks[l];
                    outer_acc(h2, &df, &mut bb.w1);
                    axpy(1.0, &df, &mut bb.b1);
                }
                let dg = sink.base.as_deref_mut().map(|b| {
                    let bb = &mut b.blocks[l];
                    (&mut bb.ln2_g[..], &mut bb.ln2_b[..])
                });
                layer_norm_backward(
                    &dh,
                    &lt.xhat2[t * d..(t + 1) * d],
                    lt.rstd2[t],
                    &blk.ln2_g,
                    &mut dx[t * d..(t + 1) * d],
                    dg,
                );
            }

            // attention output projection
            datt.fill(0.0);
            for t in 0..n {
                let dy = &dx[t * d..(t + 1) * d];
                matvec_t_acc(dy, &blk.wo, &mut datt[t * d..(t + 1) * d]);
                if let Some(base) = sink.base.as_deref_mut() {
                    outer_acc(&lt.att[t * d..(t + 1) * d], dy, &mut base.blocks[l].wo);
                }
            }

            // softmax attention; probabilities are recomputed from q and the cache
            dq.fill(0.0);
            let keys = &cache.k[l];
            let vals = &cache.v[l];
            let dk_all = &mut kv_grad.dk[l];
            let dv_all = &mut kv_grad.dv[l];
            for t in 0..n {
                let p = start + t;
                for head in 0..c.n_heads {
                    let hs = head * hd;
                    let qh = &lt.q[t * d + hs..t * d + hs + hd];
                    probs.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=p {
                        let s = att_scale * dot(qh, &keys[j * d + hs..j * d + hs + hd]);
                        max = max.max(s);
                        probs.push(s);
                    }
                    let mut z = 0.0;
                    for s in probs.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in probs.iter_mut() {
                        *s /= z;
                    }
                    let dout = &datt[t * d + hs..t * d + hs + hd];
                    dp.clear();
                    let mut inner = 0.0;
                    for j in 0..=p {
                        let g = dot(dout, &vals[j * d + hs..j * d + hs + hd]);
                        inner += probs[j] * g;
                        dp.push(g);
                        axpy(probs[j], dout, &mut dv_all[j * d + hs..j * d + hs + hd]);
                    }
                    for j in 0..=p {
                        let ds = probs[j] * (dp[j] - inner) * att_scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(ds, &keys[j * d + hs..j * d + hs + hd], &mut dq[t * d + hs..t * d + hs + hd]);
                        axpy(ds, qh, &mut dk_all[j * d + hs..j * d + hs + hd]);
                    }
                }
            }

            // q/k/v projections for this segment's rows, then the first norm
            for t in 0..n {
                let p = start + t;
                let h1 = &lt.h1[t * d..(t + 1) * d];
                let dqr = &dq[t * d..(t + 1) * d];
                let dkr = &dk_all[p * d..(p + 1) * d];
                let dvr = &dv_all[p * d..(p + 1) * d];
                dh.fill(0.0);
                matvec_t_acc(dqr, &blk.wq, &mut dh);
                matvec_t_acc(dkr, &blk.wk, &mut dh);
                matvec_t_acc(dvr, &blk.wv, &mut dh);
                if let Some(base) = sink.base.as_deref_mut() {
                    let bb = &mut base.blocks[l];
                    outer_acc(h1, dqr, &mut bb.wq);
                    outer_acc(h1, dkr, &mut bb.wk);
                    outer_acc(h1, dvr, &mut bb.wv);
                }
                if let Some(ad) = ad {
                    let (gq, gv) = match sink.adapter.as_deref_mut() {
                        Some(g) => {
                            let gb = &mut g[l];
                            (Some(&mut gb.q), Some(&mut gb.v))
                        }
                        None => (None, None),
                    };
                    let uq = &lt.uq[t * rank..(t + 1) * rank];
                    let uv = &lt.uv[t * rank..(t + 1) * rank];
                    lora_backward(&ad.q, rank, scale, h1, uq, dqr, &mut dh, gq);
                    lora_backward(&ad.v, rank, scale, h1, uv, dvr, &mut dh, gv);
                }
                let dg = sink.base.as_deref_mut().map(|b| {
                    let bb = &mut b.blocks[l];
                    (&mut bb.ln1_g[..], &mut bb.ln1_b[..])
                });
                layer_norm_backward(
                    &dh,
                    &lt.xhat1[t * d..(t + 1) * d],
                    lt.rstd1[t],
                    &blk.ln1_g,
                    &mut dx[t * d..(t + 1) * d],
                    dg,
                );
            }
        }

        if let Some(base) = sink.base.as_deref_mut() {
            for (t, &tok) in trace.tokens.iter().enumerate() {
                let p = start + t;
                let g = &dx[t * d..(t + 1) * d];
                axpy(1.0, g, &mut base.tok_emb[tok as usize * d..(tok as usize + 1) * d]);
                axpy(1.0, g, &mut base.pos_emb[p * d..(p + 1) * d]);
            }
        }
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
