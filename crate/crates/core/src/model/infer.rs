//! Incremental decoding with cached keys and values.

use super::network::{gelu, linear_fwd, ln_apply, masked_softmax};
use super::params::{Attn, Ffn};
use super::scalar::{gemm, MatMut, MatRef, Scalar};
use super::{Model, ModelError};
use crate::subword::{TokenId, PAD};

/// Encoder output for one source sentence, with per-layer cross-attention
/// keys and values precomputed.
#[derive(Debug, Clone)]
pub struct EncoderState<F> {
    pub len: usize,
    mask: Vec<bool>,
    cross_k: Vec<Vec<F>>,
    cross_v: Vec<Vec<F>>,
}

/// Self-attention keys and values of the decoder prefix so far.
#[derive(Debug, Clone)]
pub struct DecoderCache<F> {
    pub pos: usize,
    self_k: Vec<Vec<F>>,
    self_v: Vec<Vec<F>>,
}

/// Scaled dot-product attention for `tq` query rows against `tk` keys.
#[allow(clippy::too_many_arguments)]
fn attend<F: Scalar>(
    q: &[F],
    tq: usize,
    k: &[F],
    v: &[F],
    tk: usize,
    d: usize,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<F> {
    let dh = d / heads;
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut ctx = vec![F::zero(); tq * d];
    let mut scores = vec![F::zero(); tq * tk];
    for h in 0..heads {
        gemm(
            MatMut::new(&mut scores, tq, tk),
            MatRef::cols_of(q, tq, d, h * dh, dh),
            MatRef::cols_of(k, tk, d, h * dh, dh).t(),
            scale,
            F::zero(),
        );
        for i in 0..tq {
            masked_softmax(&mut scores[i * tk..(i + 1) * tk], |j| allowed(i, j));
        }
        gemm(
            MatMut::cols_of(&mut ctx, tq, d, h * dh, dh),
            MatRef::new(&scores, tq, tk),
            MatRef::cols_of(v, tk, d, h * dh, dh),
            F::one(),
            F::zero(),
        );
    }
    ctx
}

fn ffn<F: Scalar>(p: &[F], f: &Ffn, x: &[F], rows: usize) -> Vec<F> {
    let h: Vec<F> = linear_fwd(p, &f.fc1, x, rows).into_iter().map(gelu).collect();
    linear_fwd(p, &f.fc2, &h, rows)
}

fn add<F: Scalar>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl<F: Scalar> Model<F> {
    /// Runs the encoder once; `PAD` positions are masked out.
    pub fn encode(&self, src: &[TokenId]) -> Result<EncoderState<F>, ModelError> {
        let mask: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
        self.encode_masked(src, &mask)
    }

    pub fn encode_masked(&self, src: &[TokenId], mask: &[bool]) -> Result<EncoderState<F>, ModelError> {
        let (cfg, lay, p) = (&self.cfg, &self.layout, &self.params[..]);
        let (d, t) = (cfg.d_model, src.len());
        if t == 0 || !mask.iter().any(|&m| m) {
            return Err(ModelError::EmptySequence);
        }
        if t > cfg.max_len {
            return Err(ModelError::LengthOverflow {
                len: t,
                max_len: cfg.max_len,
            });
        }
        if let Some(&id) = src.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let mut x = vec![F::zero(); t * d];
        for (i, &id) in src.iter().enumerate() {
            for j in 0..d {
                x[i * d + j] = p[lay.tokens.start + id as usize * d + j] + p[lay.enc_pos.start + i * d + j];
            }
        }
        for l in &lay.enc {
            let a = ln_apply(p, &l.attn_ln, &x, d);
            add(&mut x, &self_attn_full(p, &l.attn, cfg.heads, &a, t, mask));
            let f = ln_apply(p, &l.ffn_ln, &x, d);
            add(&mut x, &ffn(p, &l.ffn, &f, t));
        }
        let out = ln_apply(p, &lay.enc_ln, &x, d);
        let cross_k = lay
            .dec
            .iter()
            .map(|l| linear_fwd(p, &l.cross_attn.k, &out, t))
            .collect();
        let cross_v = lay
            .dec
            .iter()
            .map(|l| linear_fwd(p, &l.cross_attn.v, &out, t))
            .collect();
        Ok(EncoderState {
            len: t,
            mask: mask.to_vec(),
            cross_k,
            cross_v,
        })
    }

    pub fn new_cache(&self) -> DecoderCache<F> {
        DecoderCache {
            pos: 0,
            self_k: vec![Vec::new(); self.cfg.layers],
            self_v: vec![Vec::new(); self.cfg.layers],
        }
    }

    /// Feeds one decoder token and returns next-token logits.
    pub fn step(
        &self,
        enc: &EncoderState<F>,
        cache: &mut DecoderCache<F>,
        token: TokenId,
    ) -> Result<Vec<F>, ModelError> {
        let (cfg, lay, p) = (&self.cfg, &self.layout, &self.params[..]);
        let d = cfg.d_model;
        let pos = cache.pos;
        if pos >= cfg.max_len {
            return Err(ModelError::LengthOverflow {
                len: pos + 1,
                max_len: cfg.max_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::IdOutOfRange {
                id: token,
                vocab_size: cfg.vocab_size,
            });
        }
        let mut x: Vec<F> = (0..d)
            .map(|j| p[lay.tokens.start + token as usize * d + j] + p[lay.dec_pos.start + pos * d + j])
            .collect();
        for (li, l) in lay.dec.iter().enumerate() {
            let a = ln_apply(p, &l.self_ln, &x, d);
            let q = linear_fwd(p, &l.self_attn.q, &a, 1);
            cache.self_k[li].extend(linear_fwd(p, &l.self_attn.k, &a, 1));
            cache.self_v[li].extend(linear_fwd(p, &l.self_attn.v, &a, 1));
            let ctx = attend(
                &q,
                1,
                &cache.self_k[li],
                &cache.self_v[li],
                pos + 1,
                d,
                cfg.heads,
                |_, _| true,
            );
            add(&mut x, &linear_fwd(p, &l.self_attn.o, &ctx, 1));

            let c = ln_apply(p, &l.cross_ln, &x, d);
            let q = linear_fwd(p, &l.cross_attn.q, &c, 1);
            let ctx = attend(
                &q,
                1,
                &enc.cross_k[li],
                &enc.cross_v[li],
                enc.len,
                d,
                cfg.heads,
                |_, j| enc.mask[j],
            );
            add(&mut x, &linear_fwd(p, &l.cross_attn.o, &ctx, 1));

            let f = ln_apply(p, &l.ffn_ln, &x, d);
            add(&mut x, &ffn(p, &l.ffn, &f, 1));
        }
        cache.pos += 1;
        let z = ln_apply(p, &lay.dec_ln, &x, d);
        let mut logits = vec![F::zero(); cfg.vocab_size];
        gemm(
            MatMut::new(&mut logits, 1, cfg.vocab_size),
            MatRef::new(&z, 1, d),
            MatRef::new(&p[lay.tokens.clone()], cfg.vocab_size, d).t(),
            F::one(),
            F::zero(),
        );
        Ok(logits)
    }
}

fn self_attn_full<F: Scalar>(p: &[F], a: &Attn, heads: usize, x: &[F], t: usize, mask: &[bool]) -> Vec<F> {
    let d = a.q.din;
    let q = linear_fwd(p, &a.q, x, t);
    let k = linear_fwd(p, &a.k, x, t);
    let v = linear_fwd(p, &a.v, x, t);
    let ctx = attend(&q, t, &k, &v, t, d, heads, |_, j| mask[j]);
    linear_fwd(p, &a.o, &ctx, t)
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, SeqBatch};
    use super::*;

    #[test]
    fn incremental_matches_full_forward() {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 11,
            max_len: 12,
            dropout: 0.0,
        };
        let mut m = Model::<f64>::init(cfg, 5).unwrap();
        m.params = super::super::params::random_params(&m.layout, 9, 0.3);
        let src = [4, 7, 0, 9, 5];
        let dec = [1, 6, 8, 10];
        let mut batch = SeqBatch::default();
        batch.push(&src, &dec, &[2; 4]);
        let full = m.logits(&batch).unwrap();
        let enc = m.encode(&src).unwrap();
        let mut cache = m.new_cache();
        for (i, &tok) in dec.iter().enumerate() {
            let row = m.step(&enc, &mut cache, tok).unwrap();
            for (a, b) in row.iter().zip(&full[i * 11..(i + 1) * 11]) {
                assert!((a - b).abs() < 1e-10, "position {i}: {a} vs {b}");
            }
        }
    }
}
