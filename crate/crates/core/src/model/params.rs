//! Named parameter layout over one flat buffer.

use std::ops::Range;

use rand_distr::{Distribution, Normal};

use super::scalar::Scalar;
use super::ModelConfig;
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub g: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct EncLayer {
    pub attn_ln: Norm,
    pub attn: Attn,
    pub ffn_ln: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone)]
pub struct DecLayer {
    pub self_ln: Norm,
    pub self_attn: Attn,
    pub cross_ln: Norm,
    pub cross_attn: Attn,
    pub ffn_ln: Norm,
    pub ffn: Ffn,
}

/// Offsets of every tensor, in the order they are stored.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub tokens: Range<usize>,
    pub enc_pos: Range<usize>,
    pub dec_pos: Range<usize>,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Norm,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Norm,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let spec = TensorSpec {
            name,
            shape,
            offset: self.total,
        };
        self.total += spec.len();
        let r = spec.range();
        self.tensors.push(spec);
        r
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.weight"), vec![din, dout]),
            b: self.add(format!("{prefix}.bias"), vec![dout]),
            din,
            dout,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.gamma"), vec![d]),
            b: self.add(format!("{prefix}.beta"), vec![d]),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            fc1: self.linear(&format!("{prefix}.fc1"), d, f),
            fc2: self.linear(&format!("{prefix}.fc2"), f, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let tokens = b.add("embed.tokens".into(), vec![cfg.vocab_size, d]);
        let enc_pos = b.add("embed.enc_pos".into(), vec![cfg.max_len, d]);
        let dec_pos = b.add("embed.dec_pos".into(), vec![cfg.max_len, d]);
        let enc = (0..cfg.layers)
            .map(|l| EncLayer {
                attn_ln: b.norm(&format!("enc.{l}.attn_ln"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ffn_ln: b.norm(&format!("enc.{l}.ffn_ln"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, f),
            })
            .collect();
        let enc_ln = b.norm("enc.final_ln", d);
        let dec = (0..cfg.layers)
            .map(|l| DecLayer {
                self_ln: b.norm(&format!("dec.{l}.self_ln"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                cross_ln: b.norm(&format!("dec.{l}.cross_ln"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                ffn_ln: b.norm(&format!("dec.{l}.ffn_ln"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, f),
            })
            .collect();
        let dec_ln = b.norm("dec.final_ln", d);
        Self {
            tensors: b.tensors,
            total: b.total,
            tokens,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Scaled-normal init (std 0.02) for matrices and embeddings, ones for
/// layer-norm gains, zeros for every bias.
pub fn init_params<F: Scalar>(layout: &Layout, seed: u64) -> Vec<F> {
    let mut rng = rng_for(seed, &[0x1417]);
    let normal = Normal::new(0.0, 0.02).unwrap();
    let mut data = vec![F::zero(); layout.total];
    for t in &layout.tensors {
        let fill: &mut dyn FnMut() -> f64 = if t.name.ends_with(".gamma") {
            &mut || 1.0
        } else if t.name.ends_with(".bias") || t.name.ends_with(".beta") {
            &mut || 0.0
        } else {
            &mut || normal.sample(&mut rng)
        };
        for v in &mut data[t.range()] {
            *v = F::from_f64_lossy(fill());
        }
    }
    data
}

/// Every entry drawn from N(0, std), layer-norm gains around one. Used to
/// exercise all gradient paths with non-degenerate values.
pub fn random_params<F: Scalar>(layout: &Layout, seed: u64, std: f64) -> Vec<F> {
    let mut rng = rng_for(seed, &[0x2a2a]);
    let normal = Normal::new(0.0, std).unwrap();
    let mut data = vec![F::zero(); layout.total];
    for t in &layout.tensors {
        let gain = t.name.ends_with(".gamma");
        for v in &mut data[t.range()] {
            let x = normal.sample(&mut rng);
            *v = F::from_f64_lossy(if gain { 1.0 + 0.1 * x / std } else { x });
        }
    }
    data
}
