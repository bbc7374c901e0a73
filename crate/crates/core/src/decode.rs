//! Beam search over one model or an output-averaging ensemble.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LangCode;
use crate::model::{DecoderCache, EncoderState, Model, ModelCheckpoint, ModelError};
use crate::subword::{zwj_repair, TokenId, TokenSeq, Vocab, EOS};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("an ensemble needs 1 to 3 members, got {0}")]
    MemberCount(usize),
    #[error("ensemble members disagree on vocab size ({0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error("ensemble members have different model shapes")]
    ShapeMismatch,
    #[error("need at least {needed} checkpoints with a validation BLEU, found {found}")]
    InsufficientCheckpoints { needed: usize, found: usize },
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Generated tokens including the final EOS.
    pub max_output_len: usize,
    /// Finished scores are divided by `len^alpha`; 0 disables.
    pub length_penalty: f64,
    /// Average log-probabilities instead of probabilities.
    pub log_space: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_output_len: 64,
            length_penalty: 0.0,
            log_space: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidConfig("beam_size must be at least 1".into()));
        }
        if self.length_penalty.is_nan() || self.length_penalty < 0.0 {
            return Err(DecodeError::InvalidConfig("length_penalty must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleSource {
    /// Checkpoints saved by one training run.
    SingleRunCheckpoints,
    /// Independently trained models.
    MultiModel,
}

/// One to three models whose next-token distributions are averaged.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    members: Vec<Model<f32>>,
    pub source: EnsembleSource,
}

impl EnsembleSpec {
    pub fn new(members: Vec<Model<f32>>, source: EnsembleSource) -> Result<Self, DecodeError> {
        if members.is_empty() || members.len() > 3 {
            return Err(DecodeError::MemberCount(members.len()));
        }
        let first = &members[0].cfg;
        for m in &members[1..] {
            if m.cfg.vocab_size != first.vocab_size {
                return Err(DecodeError::VocabMismatch(first.vocab_size, m.cfg.vocab_size));
            }
            let shape = |c: &crate::model::ModelConfig| (c.layers, c.d_model, c.heads, c.ffn_dim, c.max_len);
            if shape(&m.cfg) != shape(first) {
                return Err(DecodeError::ShapeMismatch);
            }
        }
        Ok(Self { members, source })
    }

    pub fn single(model: Model<f32>) -> Self {
        Self {
            members: vec![model],
            source: EnsembleSource::MultiModel,
        }
    }

    pub fn from_checkpoints(ckpts: &[ModelCheckpoint], source: EnsembleSource) -> Result<Self, DecodeError> {
        Self::new(ckpts.iter().map(|c| c.model()).collect(), source)
    }

    pub fn members(&self) -> &[Model<f32>] {
        &self.members
    }

    pub fn vocab_size(&self) -> usize {
        self.members[0].cfg.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.members[0].cfg.max_len
    }
}

/// Softmax of `f32` logits evaluated in `f64`.
pub fn distribution(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Combines per-member distributions.
///
/// Each entry is the arithmetic mean of the member values (or of their logs),
/// computed as `min + Σ(x - min) / n` over the sorted values. The result does
/// not depend on member order. Identical members return their shared
/// distribution unchanged.
pub fn combine(dists: &[Vec<f64>], log_space: bool) -> Vec<f64> {
    if dists[1..].iter().all(|d| d == &dists[0]) {
        return dists[0].clone();
    }
    let n = dists.len() as f64;
    let v = dists[0].len();
    let mut buf = Vec::with_capacity(dists.len());
    let mut out: Vec<f64> = (0..v)
        .map(|j| {
            buf.clear();
            buf.extend(dists.iter().map(|d| if log_space { d[j].ln() } else { d[j] }));
            buf.sort_by(f64::total_cmp);
            let lo = buf[0];
            if lo == f64::NEG_INFINITY {
                return lo;
            }
            lo + buf.iter().map(|x| x - lo).sum::<f64>() / n
        })
        .collect();
    if log_space {
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.iter_mut().for_each(|x| *x = (*x - max).exp());
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= z);
    }
    out
}

/// Per-member decoding state for one hypothesis.
#[derive(Clone)]
struct MemberState {
    caches: Vec<DecoderCache<f32>>,
}

/// Feeds `token` to every member and returns the combined next-token
/// distribution.
fn ensemble_feed(
    spec: &EnsembleSpec,
    encs: &[EncoderState<f32>],
    state: &mut MemberState,
    token: TokenId,
    log_space: bool,
) -> Result<Vec<f64>, ModelError> {
    let mut dists = Vec::with_capacity(spec.members.len());
    for ((m, enc), cache) in spec.members.iter().zip(encs).zip(&mut state.caches) {
        dists.push(distribution(&m.step(enc, cache, token)?));
    }
    Ok(combine(&dists, log_space))
}

/// Next-token distribution of the ensemble after `prefix` (which starts
/// with the target language id).
pub fn ensemble_step(
    spec: &EnsembleSpec,
    source: &[TokenId],
    prefix: &[TokenId],
    log_space: bool,
) -> Result<Vec<f64>, DecodeError> {
    let encs = encode_all(spec, source)?;
    let mut state = MemberState {
        caches: spec.members.iter().map(|m| m.new_cache()).collect(),
    };
    let mut dist = Vec::new();
    for &t in prefix {
        dist = ensemble_feed(spec, &encs, &mut state, t, log_space)?;
    }
    Ok(dist)
}

fn encode_all(spec: &EnsembleSpec, source: &[TokenId]) -> Result<Vec<EncoderState<f32>>, ModelError> {
    spec.members.iter().map(|m| m.encode(source)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    /// Generated tokens without the final EOS.
    pub tokens: TokenSeq,
    /// Sum of log-probabilities (length-penalized when configured).
    pub score: f64,
    /// False when no hypothesis reached EOS and the best partial one was
    /// returned instead.
    pub finished: bool,
}

struct Hyp {
    tokens: TokenSeq,
    score: f64,
    state: MemberState,
    dist: Vec<f64>,
}

fn penalized(score: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        score
    } else {
        score / (len as f64).powf(alpha)
    }
}

fn better(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> bool {
    match a.0.total_cmp(&b.0) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.1 < b.1,
    }
}

/// Beam search from `source` (encoder input including its language id),
/// starting the target with `target_lid`.
///
/// Candidates are content tokens and EOS. Per step all live hypotheses are
/// expanded; an EOS candidate ranked within the top `beam_size` finishes a
/// hypothesis and the best `beam_size` non-EOS candidates stay live. The
/// last step may only emit EOS. Without a length penalty the search stops as
/// soon as the best finished score beats every live score, since log
/// scores never increase. Ties prefer the smaller token sequence.
pub fn beam_search(
    spec: &EnsembleSpec,
    cfg: &DecodeConfig,
    source: &[TokenId],
    target_lid: TokenId,
    content: std::ops::Range<TokenId>,
) -> Result<Translation, DecodeError> {
    cfg.validate()?;
    let encs = encode_all(spec, source)?;
    let mut state = MemberState {
        caches: spec.members.iter().map(|m| m.new_cache()).collect(),
    };
    let dist = ensemble_feed(spec, &encs, &mut state, target_lid, cfg.log_space)?;
    let max_out = cfg.max_output_len.min(spec.max_len().saturating_sub(1));
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state,
        dist,
    }];
    let mut finished: Vec<(TokenSeq, f64)> = Vec::new();
    let allowed: Vec<TokenId> = std::iter::once(EOS).chain(content).collect();

    for step in 1..=max_out {
        let last = step == max_out;
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            for &t in &allowed {
                if last && t != EOS {
                    continue;
                }
                cands.push((h.score + h.dist[t as usize].ln(), hi, t));
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| {
                let sa = live[a.1].tokens.iter().chain(std::iter::once(&a.2));
                let sb = live[b.1].tokens.iter().chain(std::iter::once(&b.2));
                sa.cmp(sb)
            })
        });
        let mut next: Vec<(f64, usize, TokenId)> = Vec::new();
        for (rank, &(score, hi, t)) in cands.iter().enumerate() {
            if t == EOS {
                if rank < cfg.beam_size {
                    let mut toks = live[hi].tokens.clone();
                    toks.push(EOS);
                    let s = penalized(score, toks.len(), cfg.length_penalty);
                    finished.push((toks, s));
                }
            } else if next.len() < cfg.beam_size {
                next.push((score, hi, t));
            }
            if next.len() == cfg.beam_size && rank + 1 >= cfg.beam_size {
                break;
            }
        }
        if next.is_empty() {
            live.clear();
            break;
        }
        let mut new_live = Vec::with_capacity(next.len());
        for (score, hi, t) in next {
            let mut state = live[hi].state.clone();
            let dist = ensemble_feed(spec, &encs, &mut state, t, cfg.log_space)?;
            let mut tokens = live[hi].tokens.clone();
            tokens.push(t);
            new_live.push(Hyp {
                tokens,
                score,
                state,
                dist,
            });
        }
        live = new_live;
        if cfg.length_penalty == 0.0 {
            let best_fin = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_fin > best_live {
                break;
            }
        }
    }

    let best = finished.iter().fold(None::<&(TokenSeq, f64)>, |acc, f| match acc {
        Some(a) if !better((f.1, &f.0), (a.1, &a.0)) => Some(a),
        _ => Some(f),
    });
    if let Some((toks, score)) = best {
        let mut tokens = toks.clone();
        tokens.pop();
        return Ok(Translation {
            tokens,
            score: *score,
            finished: true,
        });
    }
    let partial = live.iter().fold(None::<&Hyp>, |acc, h| match acc {
        Some(a) if !better((h.score, &h.tokens), (a.score, &a.tokens)) => Some(a),
        _ => Some(h),
    });
    log::warn!("no hypothesis finished within {max_out} tokens");
    Ok(Translation {
        tokens: partial.map(|h| h.tokens.clone()).unwrap_or_default(),
        score: partial.map_or(f64::NEG_INFINITY, |h| h.score),
        finished: false,
    })
}

/// Argmax decoding over content tokens and EOS, written independently of
/// [`beam_search`].
pub fn greedy(
    spec: &EnsembleSpec,
    source: &[TokenId],
    target_lid: TokenId,
    content: std::ops::Range<TokenId>,
    max_output_len: usize,
) -> Result<Translation, DecodeError> {
    let mut prefix = vec![target_lid];
    let mut score = 0.0;
    let max_out = max_output_len.min(spec.max_len().saturating_sub(1));
    for step in 1..=max_out {
        let dist = ensemble_step(spec, source, &prefix, false)?;
        let mut best = EOS;
        if step < max_out {
            for t in content.clone() {
                if dist[t as usize] > dist[best as usize] {
                    best = t;
                }
            }
        }
        score += dist[best as usize].ln();
        if best == EOS {
            return Ok(Translation {
                tokens: prefix[1..].to_vec(),
                score,
                finished: true,
            });
        }
        prefix.push(best);
    }
    Ok(Translation {
        tokens: prefix[1..].to_vec(),
        score,
        finished: false,
    })
}

/// Indices of the top `k` checkpoints by validation BLEU; ties go to the
/// later update count. Returned in descending rank.
pub fn select_ensemble_indices(ckpts: &[ModelCheckpoint], k: usize) -> Result<Vec<usize>, DecodeError> {
    let mut scored: Vec<(usize, f64, u64)> = ckpts
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.meta.valid_bleu.map(|b| (i, b, c.meta.updates)))
        .collect();
    if scored.len() < k || k == 0 {
        return Err(DecodeError::InsufficientCheckpoints {
            needed: k.max(1),
            found: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.cmp(&a.2)));
    Ok(scored[..k].iter().map(|s| s.0).collect())
}

pub fn select_ensemble_checkpoints(ckpts: &[ModelCheckpoint], k: usize) -> Result<EnsembleSpec, DecodeError> {
    if !(2..=3).contains(&k) {
        return Err(DecodeError::MemberCount(k));
    }
    let idx = select_ensemble_indices(ckpts, k)?;
    let chosen: Vec<ModelCheckpoint> = idx.iter().map(|&i| ckpts[i].clone()).collect();
    EnsembleSpec::from_checkpoints(&chosen, EnsembleSource::SingleRunCheckpoints)
}

/// Builds the k = 2 and k = 3 checkpoint ensembles and keeps the one that
/// scores higher under `score` (typically validation BLEU). Ties keep k = 3.
pub fn best_checkpoint_ensemble(
    ckpts: &[ModelCheckpoint],
    score: &mut dyn FnMut(&EnsembleSpec) -> Result<f64, DecodeError>,
) -> Result<(EnsembleSpec, usize, f64), DecodeError> {
    let mut best: Option<(EnsembleSpec, usize, f64)> = None;
    for k in [3, 2] {
        let Ok(spec) = select_ensemble_checkpoints(ckpts, k) else {
            continue;
        };
        let s = score(&spec)?;
        if best.as_ref().is_none_or(|b| s > b.2) {
            best = Some((spec, k, s));
        }
    }
    best.ok_or(DecodeError::InsufficientCheckpoints {
        needed: 2,
        found: ckpts.iter().filter(|c| c.meta.valid_bleu.is_some()).count(),
    })
}

/// Everything needed to turn raw source lines into target text.
pub struct Translator<'a> {
    pub spec: &'a EnsembleSpec,
    pub cfg: &'a DecodeConfig,
    pub vocab: &'a Vocab,
    pub src_lang: &'a LangCode,
    pub tgt_lang: &'a LangCode,
    pub repair_zwj: bool,
}

impl Translator<'_> {
    pub fn translate_line(&self, line: &str) -> Result<String, String> {
        let mut src = self.vocab.encode(line).map_err(|e| e.to_string())?;
        src.truncate(self.spec.max_len().saturating_sub(1));
        src.push(self.vocab.lid(self.src_lang).map_err(|e| e.to_string())?);
        let tgt = self.vocab.lid(self.tgt_lang).map_err(|e| e.to_string())?;
        let out = beam_search(self.spec, self.cfg, &src, tgt, self.vocab.content_ids()).map_err(|e| e.to_string())?;
        let text = self.vocab.decode_lossy(&out.tokens);
        Ok(if self.repair_zwj { zwj_repair(&text) } else { text })
    }

    /// Translates every line; failures yield an empty line and an error
    /// entry with the 1-based line number. Output order matches input order.
    pub fn translate_lines<S: AsRef<str> + Sync>(&self, lines: &[S]) -> (Vec<String>, Vec<(usize, String)>) {
        let results: Vec<Result<String, String>> = lines.par_iter().map(|l| self.translate_line(l.as_ref())).collect();
        let mut out = Vec::with_capacity(lines.len());
        let mut errors = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(s) => out.push(s),
                Err(e) => {
                    errors.push((i + 1, e));
                    out.push(String::new());
                }
            }
        }
        (out, errors)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslateSummary {
    pub lines: usize,
    pub errors: Vec<(usize, String)>,
}

/// Translates `input` line by line into `output`, one output line per input
/// line. Lines that fail to decode as UTF-8 or to translate become empty
/// output lines and are listed in the summary.
pub fn translate_file(tr: &Translator<'_>, input: &Path, output: &Path) -> Result<TranslateSummary, DecodeError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| DecodeError::Io { path, source }
    };
    let bytes = std::fs::read(input).map_err(io(input))?;
    let mut raw: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if raw.last().is_some_and(|l| l.is_empty()) {
        raw.pop();
    }
    let mut errors = Vec::new();
    let lines: Vec<String> = raw
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let l = l.strip_suffix(b"\r").unwrap_or(l);
            match std::str::from_utf8(l) {
                Ok(s) => s.to_string(),
                Err(e) => {
                    errors.push((i + 1, format!("invalid UTF-8: {e}")));
                    String::new()
                }
            }
        })
        .collect();
    let bad: std::collections::HashSet<usize> = errors.iter().map(|e| e.0).collect();
    let (mut out, errs) = tr.translate_lines(&lines);
    for (n, e) in errs {
        if !bad.contains(&n) {
            errors.push((n, e));
        }
    }
    for &n in &bad {
        out[n - 1].clear();
    }
    errors.sort();
    let mut text = out.join("\n");
    if !out.is_empty() {
        text.push('\n');
    }
    std::fs::write(output, text).map_err(io(output))?;
    Ok(TranslateSummary {
        lines: out.len(),
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_two() {
        let c = combine(&[vec![0.8, 0.2], vec![0.6, 0.4]], false);
        assert!((c[0] - 0.7).abs() < 1e-15 && (c[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn identical_members_are_exact() {
        // (0.1 + 0.1 + 0.1) / 3 != 0.1 in f64.
        let d = vec![0.1, 0.3, 0.6];
        assert_eq!(combine(&[d.clone(), d.clone(), d.clone()], false), d);
        let d2 = vec![0.1, 0.2, 0.7];
        let a = combine(&[d.clone(), d2.clone(), d.clone()], false);
        let b = combine(&[d2, d.clone(), d], false);
        assert_eq!(a, b);
    }

    #[test]
    fn log_space_mean_is_normalized() {
        let c = combine(&[vec![0.8, 0.2], vec![0.6, 0.4]], true);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let g0 = (0.8f64 * 0.6).sqrt();
        let g1 = (0.2f64 * 0.4).sqrt();
        assert!((c[0] - g0 / (g0 + g1)).abs() < 1e-12);
    }

    fn ck(bleu: f64, updates: u64) -> ModelCheckpoint {
        ModelCheckpoint {
            config: crate::model::ModelConfig {
                layers: 1,
                d_model: 4,
                heads: 1,
                ffn_dim: 4,
                vocab_size: 6,
                max_len: 4,
                dropout: 0.0,
            },
            params: vec![0.0; 0],
            meta: crate::model::CheckpointMeta {
                valid_bleu: Some(bleu),
                updates,
                ..Default::default()
            },
        }
    }

    #[test]
    fn selection_tie_prefers_later() {
        let c = vec![ck(10.0, 100), ck(30.0, 200), ck(20.0, 300), ck(20.0, 400), ck(5.0, 500)];
        assert_eq!(select_ensemble_indices(&c, 3).unwrap(), vec![1, 3, 2]);
        assert_eq!(select_ensemble_indices(&c[..2], 2).unwrap(), vec![1, 0]);
        assert!(select_ensemble_indices(&c[..1], 2).is_err());
    }
}
