//! Corruption for denoising pre-training: Poisson span masking and sentence
//! permutation, and assembly of `(corrupted, original)` training pairs.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::LangCode;
use crate::rng::{rng_for, Rng};
use crate::subword::{SubwordError, TokenId, TokenSeq, Vocab, EOS, MASK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Fraction of instance tokens covered by masked spans.
    pub mask_ratio: f64,
    /// Probability that an emitted mask is replaced by a random token.
    pub random_token_prob: f64,
    /// Mean span length.
    pub poisson_lambda: f64,
    pub permute_sentences: bool,
    pub seed: u64,
    /// Consecutive sentences are packed into one instance up to this many
    /// tokens.
    pub max_instance_tokens: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.30,
            random_token_prob: 0.1,
            poisson_lambda: 3.5,
            permute_sentences: true,
            seed: 0,
            max_instance_tokens: 128,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if !(0.0..=1.0).contains(&self.random_token_prob) {
            return Err(format!("random_token_prob {} outside [0, 1]", self.random_token_prob));
        }
        if !(self.poisson_lambda > 0.0 && self.poisson_lambda.is_finite()) {
            return Err(format!("poisson_lambda {} must be positive", self.poisson_lambda));
        }
        if self.max_instance_tokens == 0 {
            return Err("max_instance_tokens must be positive".into());
        }
        Ok(())
    }
}

/// One sequence-to-sequence training pair.
///
/// `decoder_input` is `labels` shifted right by one with the target language
/// id in front; `labels` always end with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seq2SeqExample {
    pub encoder_input: TokenSeq,
    pub decoder_input: TokenSeq,
    pub labels: TokenSeq,
}

/// A denoising pair: corrupted text in, original text out.
pub type NoisedExample = Seq2SeqExample;

impl Seq2SeqExample {
    /// Builds `source + [src_lid] -> [tgt_lid] + target + [EOS]`.
    pub fn new(source: &[TokenId], src_lid: TokenId, target: &[TokenId], tgt_lid: TokenId) -> Self {
        let mut encoder_input = source.to_vec();
        encoder_input.push(src_lid);
        let mut decoder_input = Vec::with_capacity(target.len() + 1);
        decoder_input.push(tgt_lid);
        decoder_input.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(EOS);
        Self {
            encoder_input,
            decoder_input,
            labels,
        }
    }

    /// Caps both sides at `max_len` positions, keeping the trailing language
    /// id on the encoder side and EOS on the labels.
    pub fn truncated(mut self, max_len: usize) -> Self {
        assert!(max_len >= 2);
        if self.encoder_input.len() > max_len {
            let lid = *self.encoder_input.last().unwrap();
            self.encoder_input.truncate(max_len - 1);
            self.encoder_input.push(lid);
        }
        if self.labels.len() > max_len {
            self.labels.truncate(max_len - 1);
            self.labels.push(EOS);
            self.decoder_input.truncate(max_len);
        }
        self
    }

    /// Number of loss-bearing target tokens.
    pub fn target_tokens(&self) -> usize {
        self.labels.len()
    }
}

/// What [`span_mask_traced`] did: the raw span-length draws, including
/// zero-length insertions, and how many input tokens ended up covered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskTrace {
    pub span_lengths: Vec<usize>,
    pub covered: usize,
}

fn masked_count(ratio: f64, n: usize) -> usize {
    // Guard against 0.3 * 100 = 30.000000000000004 rounding up to 31.
    ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn emit_mask(out: &mut TokenSeq, cfg: &NoiseConfig, content: &Range<TokenId>, rng: &mut Rng) {
    if cfg.random_token_prob > 0.0 && rng.random::<f64>() < cfg.random_token_prob && !content.is_empty() {
        out.push(rng.random_range(content.clone()));
    } else {
        out.push(MASK);
    }
}

/// Replaces Poisson-length spans with single mask tokens.
pub fn span_mask(tokens: &[TokenId], cfg: &NoiseConfig, vocab: &Vocab, rng: &mut Rng) -> TokenSeq {
    span_mask_traced(tokens, cfg, vocab.content_ids(), rng).0
}

/// [`span_mask`] with an explicit range for random replacement tokens, also
/// returning the sampling trace.
///
/// Span lengths are drawn from Poisson(λ) with uniformly random starts until
/// at least `ceil(mask_ratio * n)` tokens are covered. A zero-length draw
/// inserts a mask at a random position without covering anything. Every
/// maximal covered run collapses to one mask.
pub fn span_mask_traced(
    tokens: &[TokenId],
    cfg: &NoiseConfig,
    content: Range<TokenId>,
    rng: &mut Rng,
) -> (TokenSeq, MaskTrace) {
    let n = tokens.len();
    let target = masked_count(cfg.mask_ratio, n).min(n);
    let mut trace = MaskTrace::default();
    if n == 0 || target == 0 {
        return (tokens.to_vec(), trace);
    }
    let poisson = Poisson::new(cfg.poisson_lambda).expect("validated lambda");
    let mut covered = vec![false; n];
    let mut inserts = vec![0usize; n + 1];
    while trace.covered < target {
        let len = poisson.sample(rng) as usize;
        trace.span_lengths.push(len);
        if len == 0 {
            inserts[rng.random_range(0..=n)] += 1;
            continue;
        }
        let len = len.min(n);
        let start = rng.random_range(0..=n - len);
        for c in &mut covered[start..start + len] {
            if !*c {
                *c = true;
                trace.covered += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for p in 0..=n {
        for _ in 0..inserts[p] {
            emit_mask(&mut out, cfg, &content, rng);
        }
        if p == n {
            break;
        }
        if covered[p] {
            if p == 0 || !covered[p - 1] {
                emit_mask(&mut out, cfg, &content, rng);
            }
        } else {
            out.push(tokens[p]);
        }
    }
    (out, trace)
}

/// A uniformly random reordering of the sentences of one instance.
pub fn permute_sentences<T: Clone>(sentences: &[T], rng: &mut Rng) -> Vec<T> {
    let mut out = sentences.to_vec();
    out.shuffle(rng);
    out
}

/// Builds one denoising pair from the sentences of an instance.
///
/// The encoder sees the permuted, span-masked instance followed by the
/// language id; the labels are the untouched original followed by EOS.
pub fn make_denoising_example<S: AsRef<str>>(
    instance: &[S],
    lang: &LangCode,
    vocab: &Vocab,
    cfg: &NoiseConfig,
    rng: &mut Rng,
) -> Result<NoisedExample, SubwordError> {
    let sentences = instance
        .iter()
        .map(|s| vocab.encode(s.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(noise_encoded(
        &sentences,
        vocab.lid(lang)?,
        vocab.content_ids(),
        cfg,
        rng,
    ))
}

/// [`make_denoising_example`] over already-encoded sentences.
pub fn noise_encoded(
    sentences: &[TokenSeq],
    lid: TokenId,
    content: Range<TokenId>,
    cfg: &NoiseConfig,
    rng: &mut Rng,
) -> NoisedExample {
    let original: TokenSeq = sentences.concat();
    let shuffled = if cfg.permute_sentences {
        permute_sentences(sentences, rng).concat()
    } else {
        original.clone()
    };
    let (masked, _) = span_mask_traced(&shuffled, cfg, content, rng);
    Seq2SeqExample::new(&masked, lid, &original, lid)
}

/// Generator for the `index`-th instance, independent of all other indices.
pub fn instance_rng(seed: u64, index: u64) -> Rng {
    rng_for(seed, &[0xD0, index])
}

/// Greedily packs consecutive sentences into instances of at most `budget`
/// tokens. A sentence longer than the budget forms an instance of its own.
pub fn pack_instances(lengths: &[usize], budget: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut used = 0;
    for (i, &len) in lengths.iter().enumerate() {
        if i > start && used + len > budget {
            out.push(start..i);
            start = i;
            used = 0;
        }
        used += len;
    }
    if start < lengths.len() {
        out.push(start..lengths.len());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::{train_vocab, VocabConfig};
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        let lines = ["the cat sat on the mat", "a dog ran far", "birds sing"];
        train_vocab(
            &lines,
            &[LangCode::new("en").unwrap()],
            &VocabConfig {
                target_size: 64,
                byte_fallback: false,
                min_pair_count: 2,
            },
        )
        .unwrap()
    }

    fn toks(n: usize) -> TokenSeq {
        (0..n as TokenId).map(|i| 100 + i).collect()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let cfg = NoiseConfig {
            mask_ratio: 0.0,
            ..Default::default()
        };
        let mut rng = instance_rng(1, 0);
        let t = toks(20);
        assert_eq!(span_mask_traced(&t, &cfg, 50..60, &mut rng).0, t);
    }

    #[test]
    fn full_ratio_masks_everything() {
        let cfg = NoiseConfig {
            mask_ratio: 1.0,
            random_token_prob: 0.0,
            ..Default::default()
        };
        for seed in 0..20 {
            let mut rng = instance_rng(seed, 0);
            let (out, trace) = span_mask_traced(&toks(15), &cfg, 50..60, &mut rng);
            assert!(!out.is_empty());
            assert!(out.iter().all(|&t| t == MASK));
            assert_eq!(trace.covered, 15);
        }
    }

    #[test]
    fn span_mask_reproducible() {
        let cfg = NoiseConfig::default();
        let a = span_mask_traced(&toks(40), &cfg, 50..60, &mut instance_rng(9, 3));
        let b = span_mask_traced(&toks(40), &cfg, 50..60, &mut instance_rng(9, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn permute_single_is_identity() {
        let mut rng = instance_rng(0, 0);
        assert_eq!(permute_sentences(&["only"], &mut rng), vec!["only"]);
    }

    #[test]
    fn permute_two_balanced() {
        let mut rng = instance_rng(5, 0);
        let n = 10_000;
        let swapped = (0..n).filter(|_| permute_sentences(&[0, 1], &mut rng)[0] == 1).count();
        let f = swapped as f64 / n as f64;
        assert!((0.48..=0.52).contains(&f), "{f}");
    }

    #[test]
    fn permute_three_all_orders() {
        let mut rng = instance_rng(6, 0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            seen.insert(permute_sentences(&[0, 1, 2], &mut rng));
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn no_noise_example() {
        let v = vocab();
        let en = LangCode::new("en").unwrap();
        let cfg = NoiseConfig {
            mask_ratio: 0.0,
            permute_sentences: false,
            ..Default::default()
        };
        let inst = ["the cat sat", "a dog ran"];
        let ex = make_denoising_example(&inst, &en, &v, &cfg, &mut instance_rng(0, 0)).unwrap();
        let original: TokenSeq = inst.iter().flat_map(|s| v.encode(s).unwrap()).collect();
        let lid = v.lid(&en).unwrap();
        assert_eq!(ex.encoder_input, [original.clone(), vec![lid]].concat());
        assert_eq!(ex.labels, [original, vec![EOS]].concat());
    }

    #[test]
    fn truncation_keeps_markers() {
        let ex = Seq2SeqExample::new(&toks(10), 7, &toks(10), 8).truncated(5);
        assert_eq!(ex.encoder_input, vec![100, 101, 102, 103, 7]);
        assert_eq!(ex.labels, vec![100, 101, 102, 103, EOS]);
        assert_eq!(ex.decoder_input, vec![8, 100, 101, 102, 103]);
    }

    #[test]
    fn packing() {
        assert_eq!(pack_instances(&[3, 3, 3, 10, 1], 6), vec![0..2, 2..3, 3..4, 4..5]);
        assert!(pack_instances(&[], 6).is_empty());
    }

    proptest! {
        #[test]
        fn labels_independent_of_noise(seed in any::<u64>(), ratio in 0.0f64..1.0, permute in any::<bool>()) {
            let v = vocab();
            let en = LangCode::new("en").unwrap();
            let cfg = NoiseConfig { mask_ratio: ratio, permute_sentences: permute, ..Default::default() };
            let inst = ["the cat sat on the mat", "birds sing", "a dog ran far"];
            let ex = make_denoising_example(&inst, &en, &v, &cfg, &mut instance_rng(seed, 0)).unwrap();
            let original: TokenSeq = inst.iter().flat_map(|s| v.encode(s).unwrap()).collect();
            let lid = v.lid(&en).unwrap();
            prop_assert_eq!(&ex.labels, &[original, vec![EOS]].concat());
            prop_assert_eq!(ex.decoder_input.len(), ex.labels.len());
            prop_assert_eq!(ex.decoder_input[0], lid);
            prop_assert_eq!(&ex.decoder_input[1..], &ex.labels[..ex.labels.len() - 1]);
            prop_assert_eq!(*ex.encoder_input.last().unwrap(), lid);
        }

        #[test]
        fn permutation_preserves_multiset(v in prop::collection::vec(0u8..10, 1..12), seed in any::<u64>()) {
            let mut p = permute_sentences(&v, &mut instance_rng(seed, 0));
            let mut s = v.clone();
            p.sort_unstable();
            s.sort_unstable();
            prop_assert_eq!(p, s);
        }
    }
}
