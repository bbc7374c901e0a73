//! Pre-norm encoder-decoder transformer: batched forward pass with a tape,
//! and the matching hand-written backward pass.
//!
//! Sequences in a batch are concatenated row-wise without padding. Linear
//! layers run over all rows at once; attention runs per sequence and head.

use rand::Rng as _;

use super::params::{Attn, Ffn, Layout, Linear, Norm};
use super::scalar::{gemm, MatMut, MatRef, Scalar};
use super::{ModelConfig, ModelError};
use crate::noising::Seq2SeqExample;
use crate::rng::Rng;
use crate::subword::{TokenId, PAD};

const LN_EPS: f64 = 1e-5;

/// Ragged batch of encoder/decoder sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeqBatch {
    pub enc_ids: Vec<TokenId>,
    pub enc_off: Vec<usize>,
    /// Whether each encoder position may be attended to.
    pub enc_mask: Vec<bool>,
    pub dec_ids: Vec<TokenId>,
    pub dec_off: Vec<usize>,
    /// One label per decoder row; `PAD` labels carry no loss.
    pub labels: Vec<TokenId>,
}

impl SeqBatch {
    pub fn from_examples(examples: &[Seq2SeqExample]) -> Self {
        let mut b = SeqBatch {
            enc_off: vec![0],
            dec_off: vec![0],
            ..Default::default()
        };
        for ex in examples {
            b.push(&ex.encoder_input, &ex.decoder_input, &ex.labels);
        }
        b
    }

    /// Appends one sequence pair; encoder `PAD` positions are masked.
    pub fn push(&mut self, enc: &[TokenId], dec: &[TokenId], labels: &[TokenId]) {
        assert_eq!(dec.len(), labels.len(), "decoder input and labels differ in length");
        if self.enc_off.is_empty() {
            self.enc_off.push(0);
            self.dec_off.push(0);
        }
        self.enc_ids.extend_from_slice(enc);
        self.enc_mask.extend(enc.iter().map(|&t| t != PAD));
        self.enc_off.push(self.enc_ids.len());
        self.dec_ids.extend_from_slice(dec);
        self.labels.extend_from_slice(labels);
        self.dec_off.push(self.dec_ids.len());
    }

    pub fn len(&self) -> usize {
        self.enc_off.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_tokens(&self) -> usize {
        self.labels.iter().filter(|&&t| t != PAD).count()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        for i in 0..self.len() {
            let te = self.enc_off[i + 1] - self.enc_off[i];
            let td = self.dec_off[i + 1] - self.dec_off[i];
            let len = te.max(td);
            if len > cfg.max_len {
                return Err(ModelError::LengthOverflow {
                    len,
                    max_len: cfg.max_len,
                });
            }
            if te == 0 || td == 0 {
                return Err(ModelError::EmptySequence);
            }
            if !self.enc_mask[self.enc_off[i]..self.enc_off[i + 1]].iter().any(|&m| m) {
                return Err(ModelError::EmptySequence);
            }
        }
        let bad = self
            .enc_ids
            .iter()
            .chain(&self.dec_ids)
            .chain(&self.labels)
            .find(|&&t| t as usize >= cfg.vocab_size);
        if let Some(&id) = bad {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Primitive ops

pub(crate) fn linear_fwd<F: Scalar>(p: &[F], l: &Linear, x: &[F], rows: usize) -> Vec<F> {
    let mut y = Vec::with_capacity(rows * l.dout);
    for _ in 0..rows {
        y.extend_from_slice(&p[l.b.clone()]);
    }
    gemm(
        MatMut::new(&mut y, rows, l.dout),
        MatRef::new(x, rows, l.din),
        MatRef::new(&p[l.w.clone()], l.din, l.dout),
        F::one(),
        F::one(),
    );
    y
}

/// Accumulates weight and bias gradients; returns the input gradient.
fn linear_bwd<F: Scalar>(p: &[F], g: &mut [F], l: &Linear, x: &[F], dy: &[F], rows: usize) -> Vec<F> {
    gemm(
        MatMut::new(&mut g[l.w.clone()], l.din, l.dout),
        MatRef::new(x, rows, l.din).t(),
        MatRef::new(dy, rows, l.dout),
        F::one(),
        F::one(),
    );
    let gb = &mut g[l.b.clone()];
    for r in 0..rows {
        for (acc, &v) in gb.iter_mut().zip(&dy[r * l.dout..(r + 1) * l.dout]) {
            *acc += v;
        }
    }
    let mut dx = vec![F::zero(); rows * l.din];
    gemm(
        MatMut::new(&mut dx, rows, l.din),
        MatRef::new(dy, rows, l.dout),
        MatRef::new(&p[l.w.clone()], l.din, l.dout).t(),
        F::one(),
        F::zero(),
    );
    dx
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

pub(crate) fn ln_apply<F: Scalar>(p: &[F], n: &Norm, x: &[F], d: usize) -> Vec<F> {
    ln_fwd(p, n, x, d).0
}

fn ln_fwd<F: Scalar>(p: &[F], n: &Norm, x: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let (gam, bet) = (&p[n.g.clone()], &p[n.b.clone()]);
    let inv_d = F::from_f64_lossy(1.0 / d as f64);
    let eps = F::from_f64_lossy(LN_EPS);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gam[j] + bet[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_bwd<F: Scalar>(p: &[F], g: &mut [F], n: &Norm, c: &LnCache<F>, dy: &[F], d: usize) -> Vec<F> {
    let rows = dy.len() / d;
    let gam = &p[n.g.clone()];
    let inv_d = F::from_f64_lossy(1.0 / d as f64);
    let mut dgam = vec![F::zero(); d];
    let mut dbet = vec![F::zero(); d];
    let mut dx = vec![F::zero(); dy.len()];
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let (dyr, xh) = (&dy[r * d..(r + 1) * d], &c.xhat[r * d..(r + 1) * d]);
        let mut s1 = F::zero();
        let mut s2 = F::zero();
        for j in 0..d {
            dgam[j] += dyr[j] * xh[j];
            dbet[j] += dyr[j];
            dxhat[j] = dyr[j] * gam[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
        for j in 0..d {
            dx[r * d + j] = c.rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    for (a, v) in g[n.g.clone()].iter_mut().zip(dgam) {
        *a += v;
    }
    for (a, v) in g[n.b.clone()].iter_mut().zip(dbet) {
        *a += v;
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// Softmax over `row` in place; `None` entries are excluded (probability 0).
pub(crate) fn masked_softmax<F: Scalar>(row: &mut [F], allowed: impl Fn(usize) -> bool) {
    let mut max = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = F::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn dropout_mask<F: Scalar>(n: usize, p: f64, rng: &mut Rng) -> Vec<F> {
    let keep = F::from_f64_lossy(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect()
}

fn apply_mask<F: Scalar>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut Rng>,
}

impl Dropout<'_> {
    fn mask<F: Scalar>(&mut self, n: usize) -> Option<Vec<F>> {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 => Some(dropout_mask(n, self.p, rng)),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Attention

/// How keys may be attended from a query row.
#[derive(Clone, Copy)]
enum KeyRule<'a> {
    Causal,
    Mask(&'a [bool]),
}

struct Segments<'a> {
    q_off: &'a [usize],
    k_off: &'a [usize],
}

struct AttnCache<F> {
    xq: Vec<F>,
    /// Key/value input for cross attention; self attention reuses `xq`.
    xkv: Option<Vec<F>>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
}

#[allow(clippy::too_many_arguments)]
fn attn_fwd<F: Scalar>(
    p: &[F],
    a: &Attn,
    heads: usize,
    xq: Vec<F>,
    xkv: Option<Vec<F>>,
    seg: &Segments<'_>,
    rule: KeyRule<'_>,
) -> (Vec<F>, AttnCache<F>) {
    let d = a.q.din;
    let dh = d / heads;
    let nq = xq.len() / d;
    let kv_in = xkv.as_deref().unwrap_or(&xq);
    let nk = kv_in.len() / d;
    let q = linear_fwd(p, &a.q, &xq, nq);
    let k = linear_fwd(p, &a.k, kv_in, nk);
    let v = linear_fwd(p, &a.v, kv_in, nk);
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut probs = Vec::new();
    let mut ctx = vec![F::zero(); nq * d];
    for s in 0..seg.q_off.len() - 1 {
        let (q0, q1) = (seg.q_off[s], seg.q_off[s + 1]);
        let (k0, k1) = (seg.k_off[s], seg.k_off[s + 1]);
        let (tq, tk) = (q1 - q0, k1 - k0);
        for h in 0..heads {
            let base = probs.len();
            probs.resize(base + tq * tk, F::zero());
            let sc = &mut probs[base..];
            gemm(
                MatMut::new(sc, tq, tk),
                MatRef::cols_of(&q[q0 * d..q1 * d], tq, d, h * dh, dh),
                MatRef::cols_of(&k[k0 * d..k1 * d], tk, d, h * dh, dh).t(),
                scale,
                F::zero(),
            );
            for i in 0..tq {
                let row = &mut sc[i * tk..(i + 1) * tk];
                match rule {
                    KeyRule::Causal => masked_softmax(row, |j| j <= i),
                    KeyRule::Mask(m) => masked_softmax(row, |j| m[k0 + j]),
                }
            }
            gemm(
                MatMut::cols_of(&mut ctx[q0 * d..q1 * d], tq, d, h * dh, dh),
                MatRef::new(&probs[base..base + tq * tk], tq, tk),
                MatRef::cols_of(&v[k0 * d..k1 * d], tk, d, h * dh, dh),
                F::one(),
                F::zero(),
            );
        }
    }
    let out = linear_fwd(p, &a.o, &ctx, nq);
    (
        out,
        AttnCache {
            xq,
            xkv,
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns `(d xq, d xkv)`; for self attention `d xkv` is already folded
/// into the first element and the second is `None`.
fn attn_bwd<F: Scalar>(
    p: &[F],
    g: &mut [F],
    a: &Attn,
    heads: usize,
    c: &AttnCache<F>,
    seg: &Segments<'_>,
    dout: &[F],
) -> (Vec<F>, Option<Vec<F>>) {
    let d = a.q.din;
    let dh = d / heads;
    let nq = c.xq.len() / d;
    let kv_in = c.xkv.as_deref().unwrap_or(&c.xq);
    let nk = kv_in.len() / d;
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let dctx = linear_bwd(p, g, &a.o, &c.ctx, dout, nq);
    let mut dq = vec![F::zero(); nq * d];
    let mut dk = vec![F::zero(); nk * d];
    let mut dv = vec![F::zero(); nk * d];
    let mut pos = 0;
    let mut dp = Vec::new();
    for s in 0..seg.q_off.len() - 1 {
        let (q0, q1) = (seg.q_off[s], seg.q_off[s + 1]);
        let (k0, k1) = (seg.k_off[s], seg.k_off[s + 1]);
        let (tq, tk) = (q1 - q0, k1 - k0);
        for h in 0..heads {
            let pr = &c.probs[pos..pos + tq * tk];
            pos += tq * tk;
            dp.clear();
            dp.resize(tq * tk, F::zero());
            gemm(
                MatMut::new(&mut dp, tq, tk),
                MatRef::cols_of(&dctx[q0 * d..q1 * d], tq, d, h * dh, dh),
                MatRef::cols_of(&c.v[k0 * d..k1 * d], tk, d, h * dh, dh).t(),
                F::one(),
                F::zero(),
            );
            gemm(
                MatMut::cols_of(&mut dv[k0 * d..k1 * d], tk, d, h * dh, dh),
                MatRef::new(pr, tq, tk).t(),
                MatRef::cols_of(&dctx[q0 * d..q1 * d], tq, d, h * dh, dh),
                F::one(),
                F::one(),
            );
            // Softmax backward, folding in the score scale.
            for i in 0..tq {
                let (pi, di) = (&pr[i * tk..(i + 1) * tk], &mut dp[i * tk..(i + 1) * tk]);
                let dot: F = pi.iter().zip(di.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..tk {
                    di[j] = pi[j] * (di[j] - dot) * scale;
                }
            }
            gemm(
                MatMut::cols_of(&mut dq[q0 * d..q1 * d], tq, d, h * dh, dh),
                MatRef::new(&dp, tq, tk),
                MatRef::cols_of(&c.k[k0 * d..k1 * d], tk, d, h * dh, dh),
                F::one(),
                F::one(),
            );
            gemm(
                MatMut::cols_of(&mut dk[k0 * d..k1 * d], tk, d, h * dh, dh),
                MatRef::new(&dp, tq, tk).t(),
                MatRef::cols_of(&c.q[q0 * d..q1 * d], tq, d, h * dh, dh),
                F::one(),
                F::one(),
            );
        }
    }
    let mut dxq = linear_bwd(p, g, &a.q, &c.xq, &dq, nq);
    let dxk = linear_bwd(p, g, &a.k, kv_in, &dk, nk);
    let dxv = linear_bwd(p, g, &a.v, kv_in, &dv, nk);
    let dkv: Vec<F> = dxk.iter().zip(&dxv).map(|(&a, &b)| a + b).collect();
    if c.xkv.is_some() {
        (dxq, Some(dkv))
    } else {
        for (a, b) in dxq.iter_mut().zip(dkv) {
            *a += b;
        }
        (dxq, None)
    }
}

// ---------------------------------------------------------------------------
// Feed-forward

struct FfnCache<F> {
    x: Vec<F>,
    h: Vec<F>,
    act: Vec<F>,
}

fn ffn_fwd<F: Scalar>(p: &[F], f: &Ffn, x: Vec<F>) -> (Vec<F>, FfnCache<F>) {
    let rows = x.len() / f.fc1.din;
    let h = linear_fwd(p, &f.fc1, &x, rows);
    let act: Vec<F> = h.iter().map(|&v| gelu(v)).collect();
    let y = linear_fwd(p, &f.fc2, &act, rows);
    (y, FfnCache { x, h, act })
}

fn ffn_bwd<F: Scalar>(p: &[F], g: &mut [F], f: &Ffn, c: &FfnCache<F>, dy: &[F]) -> Vec<F> {
    let rows = c.x.len() / f.fc1.din;
    let mut dact = linear_bwd(p, g, &f.fc2, &c.act, dy, rows);
    for (da, &h) in dact.iter_mut().zip(&c.h) {
        *da *= gelu_grad(h);
    }
    linear_bwd(p, g, &f.fc1, &c.x, &dact, rows)
}

// ---------------------------------------------------------------------------
// Whole network

struct EncLayerTape<F> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    ln2: LnCache<F>,
    ffn: FfnCache<F>,
    drop2: Option<Vec<F>>,
}

struct DecLayerTape<F> {
    ln1: LnCache<F>,
    self_attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    ln2: LnCache<F>,
    cross: AttnCache<F>,
    drop2: Option<Vec<F>>,
    ln3: LnCache<F>,
    ffn: FfnCache<F>,
    drop3: Option<Vec<F>>,
}

/// Everything the backward pass needs, plus the output logits.
pub struct Tape<F> {
    enc_drop: Option<Vec<F>>,
    enc_layers: Vec<EncLayerTape<F>>,
    enc_ln: LnCache<F>,
    enc_out: Vec<F>,
    dec_drop: Option<Vec<F>>,
    dec_layers: Vec<DecLayerTape<F>>,
    dec_ln: LnCache<F>,
    dec_final: Vec<F>,
    /// `[decoder rows, vocab]`
    pub logits: Vec<F>,
}

fn embed<F: Scalar>(p: &[F], tokens: &[F], pos: &[F], ids: &[TokenId], off: &[usize], d: usize) -> Vec<F> {
    let mut x = vec![F::zero(); ids.len() * d];
    for s in 0..off.len() - 1 {
        for (t, r) in (off[s]..off[s + 1]).enumerate() {
            let e = &tokens[ids[r] as usize * d..(ids[r] as usize + 1) * d];
            let pe = &pos[t * d..(t + 1) * d];
            for j in 0..d {
                x[r * d + j] = e[j] + pe[j];
            }
        }
    }
    let _ = p;
    x
}

fn embed_bwd<F: Scalar>(
    g: &mut [F],
    layout: &Layout,
    pos_range: std::ops::Range<usize>,
    ids: &[TokenId],
    off: &[usize],
    dx: &[F],
    d: usize,
) {
    for s in 0..off.len() - 1 {
        for (t, r) in (off[s]..off[s + 1]).enumerate() {
            let tok0 = layout.tokens.start + ids[r] as usize * d;
            let pos0 = pos_range.start + t * d;
            for j in 0..d {
                g[tok0 + j] += dx[r * d + j];
                g[pos0 + j] += dx[r * d + j];
            }
        }
    }
}

fn add_residual<F: Scalar>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Runs the network. Dropout is applied only when `rng` is given.
pub fn forward<F: Scalar>(
    p: &[F],
    layout: &Layout,
    cfg: &ModelConfig,
    batch: &SeqBatch,
    dropout: f64,
    rng: Option<&mut Rng>,
) -> Tape<F> {
    let d = cfg.d_model;
    let heads = cfg.heads;
    let mut drop = Dropout { p: dropout, rng };

    // Encoder.
    let mut x = embed(
        p,
        &p[layout.tokens.clone()],
        &p[layout.enc_pos.clone()],
        &batch.enc_ids,
        &batch.enc_off,
        d,
    );
    let enc_drop = drop.mask::<F>(x.len());
    apply_mask(&mut x, &enc_drop);
    let self_seg = Segments {
        q_off: &batch.enc_off,
        k_off: &batch.enc_off,
    };
    let mut enc_layers = Vec::with_capacity(layout.enc.len());
    for l in &layout.enc {
        let (a, ln1) = ln_fwd(p, &l.attn_ln, &x, d);
        let (mut y, attn) = attn_fwd(p, &l.attn, heads, a, None, &self_seg, KeyRule::Mask(&batch.enc_mask));
        let drop1 = drop.mask::<F>(y.len());
        apply_mask(&mut y, &drop1);
        add_residual(&mut x, &y);
        let (f, ln2) = ln_fwd(p, &l.ffn_ln, &x, d);
        let (mut y, ffn) = ffn_fwd(p, &l.ffn, f);
        let drop2 = drop.mask::<F>(y.len());
        apply_mask(&mut y, &drop2);
        add_residual(&mut x, &y);
        enc_layers.push(EncLayerTape {
            ln1,
            attn,
            drop1,
            ln2,
            ffn,
            drop2,
        });
    }
    let (enc_out, enc_ln) = ln_fwd(p, &layout.enc_ln, &x, d);

    // Decoder.
    let mut x = embed(
        p,
        &p[layout.tokens.clone()],
        &p[layout.dec_pos.clone()],
        &batch.dec_ids,
        &batch.dec_off,
        d,
    );
    let dec_drop = drop.mask::<F>(x.len());
    apply_mask(&mut x, &dec_drop);
    let dself = Segments {
        q_off: &batch.dec_off,
        k_off: &batch.dec_off,
    };
    let cross_seg = Segments {
        q_off: &batch.dec_off,
        k_off: &batch.enc_off,
    };
    let mut dec_layers = Vec::with_capacity(layout.dec.len());
    for l in &layout.dec {
        let (a, ln1) = ln_fwd(p, &l.self_ln, &x, d);
        let (mut y, self_attn) = attn_fwd(p, &l.self_attn, heads, a, None, &dself, KeyRule::Causal);
        let drop1 = drop.mask::<F>(y.len());
        apply_mask(&mut y, &drop1);
        add_residual(&mut x, &y);
        let (c, ln2) = ln_fwd(p, &l.cross_ln, &x, d);
        let (mut y, cross) = attn_fwd(
            p,
            &l.cross_attn,
            heads,
            c,
            Some(enc_out.clone()),
            &cross_seg,
            KeyRule::Mask(&batch.enc_mask),
        );
        let drop2 = drop.mask::<F>(y.len());
        apply_mask(&mut y, &drop2);
        add_residual(&mut x, &y);
        let (f, ln3) = ln_fwd(p, &l.ffn_ln, &x, d);
        let (mut y, ffn) = ffn_fwd(p, &l.ffn, f);
        let drop3 = drop.mask::<F>(y.len());
        apply_mask(&mut y, &drop3);
        add_residual(&mut x, &y);
        dec_layers.push(DecLayerTape {
            ln1,
            self_attn,
            drop1,
            ln2,
            cross,
            drop2,
            ln3,
            ffn,
            drop3,
        });
    }
    let (dec_final, dec_ln) = ln_fwd(p, &layout.dec_ln, &x, d);
    let rows = batch.dec_ids.len();
    let mut logits = vec![F::zero(); rows * cfg.vocab_size];
    gemm(
        MatMut::new(&mut logits, rows, cfg.vocab_size),
        MatRef::new(&dec_final, rows, d),
        MatRef::new(&p[layout.tokens.clone()], cfg.vocab_size, d).t(),
        F::one(),
        F::zero(),
    );
    Tape {
        enc_drop,
        enc_layers,
        enc_ln,
        enc_out,
        dec_drop,
        dec_layers,
        dec_ln,
        dec_final,
        logits,
    }
}

/// Back-propagates `dlogits` through the tape, accumulating into `g`.
pub fn backward<F: Scalar>(
    p: &[F],
    g: &mut [F],
    layout: &Layout,
    cfg: &ModelConfig,
    batch: &SeqBatch,
    tape: &Tape<F>,
    dlogits: &[F],
) {
    let d = cfg.d_model;
    let heads = cfg.heads;
    let rows = batch.dec_ids.len();
    let v = cfg.vocab_size;

    let mut dz = vec![F::zero(); rows * d];
    gemm(
        MatMut::new(&mut dz, rows, d),
        MatRef::new(dlogits, rows, v),
        MatRef::new(&p[layout.tokens.clone()], v, d),
        F::one(),
        F::zero(),
    );
    gemm(
        MatMut::new(&mut g[layout.tokens.clone()], v, d),
        MatRef::new(dlogits, rows, v).t(),
        MatRef::new(&tape.dec_final, rows, d),
        F::one(),
        F::one(),
    );
    let mut dx = ln_bwd(p, g, &layout.dec_ln, &tape.dec_ln, &dz, d);
    let mut denc = vec![F::zero(); tape.enc_out.len()];
    let dself = Segments {
        q_off: &batch.dec_off,
        k_off: &batch.dec_off,
    };
    let cross_seg = Segments {
        q_off: &batch.dec_off,
        k_off: &batch.enc_off,
    };
    for (l, t) in layout.dec.iter().zip(&tape.dec_layers).rev() {
        let mut dy = dx.clone();
        apply_mask(&mut dy, &t.drop3);
        let df = ffn_bwd(p, g, &l.ffn, &t.ffn, &dy);
        add_residual(&mut dx, &ln_bwd(p, g, &l.ffn_ln, &t.ln3, &df, d));

        let mut dy = dx.clone();
        apply_mask(&mut dy, &t.drop2);
        let (dc, dkv) = attn_bwd(p, g, &l.cross_attn, heads, &t.cross, &cross_seg, &dy);
        add_residual(&mut denc, &dkv.expect("cross attention has separate keys"));
        add_residual(&mut dx, &ln_bwd(p, g, &l.cross_ln, &t.ln2, &dc, d));

        let mut dy = dx.clone();
        apply_mask(&mut dy, &t.drop1);
        let (da, _) = attn_bwd(p, g, &l.self_attn, heads, &t.self_attn, &dself, &dy);
        add_residual(&mut dx, &ln_bwd(p, g, &l.self_ln, &t.ln1, &da, d));
    }
    apply_mask(&mut dx, &tape.dec_drop);
    embed_bwd(
        g,
        layout,
        layout.dec_pos.clone(),
        &batch.dec_ids,
        &batch.dec_off,
        &dx,
        d,
    );

    let mut dx = ln_bwd(p, g, &layout.enc_ln, &tape.enc_ln, &denc, d);
    let self_seg = Segments {
        q_off: &batch.enc_off,
        k_off: &batch.enc_off,
    };
    for (l, t) in layout.enc.iter().zip(&tape.enc_layers).rev() {
        let mut dy = dx.clone();
        apply_mask(&mut dy, &t.drop2);
        let df = ffn_bwd(p, g, &l.ffn, &t.ffn, &dy);
        add_residual(&mut dx, &ln_bwd(p, g, &l.ffn_ln, &t.ln2, &df, d));

        let mut dy = dx.clone();
        apply_mask(&mut dy, &t.drop1);
        let (da, _) = attn_bwd(p, g, &l.attn, heads, &t.attn, &self_seg, &dy);
        add_residual(&mut dx, &ln_bwd(p, g, &l.attn_ln, &t.ln1, &da, d));
    }
    apply_mask(&mut dx, &tape.enc_drop);
    embed_bwd(
        g,
        layout,
        layout.enc_pos.clone(),
        &batch.enc_ids,
        &batch.enc_off,
        &dx,
        d,
    );
}

/// Label-smoothed cross entropy against `q = (1 - eps) * onehot + eps / V`.
///
/// Returns the summed loss over non-pad rows and fills `dlogits` with
/// `(softmax - q) * grad_scale`.
pub fn smoothed_xent<F: Scalar>(
    logits: &[F],
    labels: &[TokenId],
    vocab: usize,
    eps: f64,
    grad_scale: f64,
    mut dlogits: Option<&mut [F]>,
) -> f64 {
    let mut total = 0.0;
    let uniform = eps / vocab as f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        if y == PAD {
            if let Some(dl) = dlogits.as_deref_mut() {
                dl[r * vocab..(r + 1) * vocab].fill(F::zero());
            }
            continue;
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max).as_f64();
        let lse = max + row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        let sum_logp: f64 = row.iter().map(|&v| v.as_f64() - lse).sum();
        let logp_y = row[y as usize].as_f64() - lse;
        total += -(1.0 - eps) * logp_y - uniform * sum_logp;
        if let Some(dl) = dlogits.as_deref_mut() {
            let out = &mut dl[r * vocab..(r + 1) * vocab];
            for (j, o) in out.iter_mut().enumerate() {
                let q = uniform + if j == y as usize { 1.0 - eps } else { 0.0 };
                *o = F::from_f64_lossy(((row[j].as_f64() - lse).exp() - q) * grad_scale);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn softmax_respects_mask() {
        let mut row = vec![1.0f64, 2.0, 3.0];
        masked_softmax(&mut row, |j| j != 2);
        assert_eq!(row[2], 0.0);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoothed_floor_is_entropy_of_target() {
        // Logits equal to log q reach the minimum, which is H(q).
        let (v, eps) = (7usize, 0.2f64);
        let y = 3u32;
        let q: Vec<f64> = (0..v)
            .map(|j| eps / v as f64 + if j == y as usize { 1.0 - eps } else { 0.0 })
            .collect();
        let logits: Vec<f64> = q.iter().map(|p| p.ln()).collect();
        let floor = -q.iter().map(|p| p * p.ln()).sum::<f64>();
        let hit = 1.0 - eps + eps / v as f64;
        let closed = -hit * hit.ln() - (v as f64 - 1.0) * (eps / v as f64) * (eps / v as f64).ln();
        assert!((floor - closed).abs() < 1e-12);
        let mut dl = vec![0.0; v];
        let loss = smoothed_xent(&logits, &[y], v, eps, 1.0, Some(&mut dl));
        assert!((loss - floor).abs() < 1e-12);
        assert!(dl.iter().all(|g| g.abs() < 1e-12));
        // A sharper (more one-hot) model pays more.
        let mut sharp = logits.clone();
        sharp[y as usize] += 3.0;
        assert!(smoothed_xent(&sharp, &[y], v, eps, 1.0, None) > floor);
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let v = 11;
        let loss = smoothed_xent(&vec![0.0f32; v], &[4], v, 0.0, 1.0, None);
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }
}
