//! Stage data: pre-training selections and the batch streams fed to the
//! trainer.

use std::ops::Range;

use crate::corpus::{
    CleanRules, CorpusManifest, Direction, DomainTag, LangCode, LanguageSampler, MonoDataset, ParallelDataset,
    SamplingConfig, SplitRole,
};
use crate::model::train::BatchSource;
use crate::model::SeqBatch;
use crate::noising::{instance_rng, noise_encoded, pack_instances, NoiseConfig, Seq2SeqExample};
use crate::rng::{derive_seed, rng_for};
use crate::subword::{TokenId, TokenSeq, Vocab};

use super::{CptCase, PipelineError};
use rand::seq::SliceRandom;

/// Monolingual datasets denoised by a pre-training stage of `case` over
/// `languages`, one entry per manifest file in manifest order.
///
/// Case A(ii) appends both sides of every in-domain training bitext whose
/// two languages are both in `languages`.
pub fn build_cpt_data(
    manifest: &CorpusManifest,
    case: CptCase,
    languages: &[LangCode],
    rules: &CleanRules,
) -> Result<Vec<MonoDataset>, PipelineError> {
    let mut out = Vec::new();
    for lang in languages {
        for &domain in case.mono_domains() {
            let entries: Vec<_> = manifest
                .mono
                .iter()
                .filter(|e| e.lang == *lang && e.domain == domain)
                .collect();
            if entries.is_empty() {
                return Err(PipelineError::MissingData(format!(
                    "case {case} needs {} monolingual data for {lang}",
                    domain_word(domain)
                )));
            }
            for e in entries {
                out.push(manifest.load_mono(e, rules)?);
            }
        }
    }
    if case.uses_parallel() {
        let mut found = false;
        for e in &manifest.parallel {
            if e.split != SplitRole::Train
                || e.domain != DomainTag::InDomain
                || !languages.contains(&e.src_lang)
                || !languages.contains(&e.tgt_lang)
            {
                continue;
            }
            found = true;
            let ds = manifest.load_parallel(e, rules)?;
            let (src, tgt): (Vec<String>, Vec<String>) = ds.pairs.into_iter().unzip();
            out.push(MonoDataset::new(ds.src_lang, DomainTag::InDomain, src)?);
            out.push(MonoDataset::new(ds.tgt_lang, DomainTag::InDomain, tgt)?);
        }
        if !found && languages.len() > 1 {
            return Err(PipelineError::MissingData(format!(
                "case {case} needs in-domain parallel training data among the selected languages"
            )));
        }
    }
    Ok(out)
}

fn domain_word(d: DomainTag) -> &'static str {
    match d {
        DomainTag::InDomain => "in-domain",
        DomainTag::OutDomain => "out-domain",
        DomainTag::Mixed => "mixed-domain",
    }
}

/// Encodes every pair as `src + [src_lid] -> [tgt_lid] + tgt + [EOS]`.
pub(crate) fn encode_pairs(
    vocab: &Vocab,
    ds: &ParallelDataset,
    max_len: usize,
) -> Result<Vec<Seq2SeqExample>, PipelineError> {
    let (sl, tl) = (vocab.lid(&ds.src_lang)?, vocab.lid(&ds.tgt_lang)?);
    ds.pairs
        .iter()
        .map(|(s, t)| Ok(Seq2SeqExample::new(&vocab.encode(s)?, sl, &vocab.encode(t)?, tl).truncated(max_len)))
        .collect()
}

/// Encoded sentences of one language grouped into packed instances.
pub(crate) struct Instances {
    pub lid: TokenId,
    pub items: Vec<Vec<TokenSeq>>,
}

pub(crate) fn pack_mono(vocab: &Vocab, ds: &MonoDataset, budget: usize) -> Result<Instances, PipelineError> {
    let sents: Vec<TokenSeq> = ds.lines.iter().map(|l| vocab.encode(l)).collect::<Result<_, _>>()?;
    let lens: Vec<usize> = sents.iter().map(|s| s.len()).collect();
    let items = pack_instances(&lens, budget)
        .into_iter()
        .map(|r| sents[r].to_vec())
        .collect();
    Ok(Instances {
        lid: vocab.lid(&ds.lang)?,
        items,
    })
}

/// Deterministic denoising pairs for validating a pre-training stage.
pub(crate) fn fixed_denoising(
    sets: &[Instances],
    content: Range<TokenId>,
    noise: &NoiseConfig,
    seed: u64,
    max_len: usize,
) -> Vec<Seq2SeqExample> {
    let mut out = Vec::new();
    for (p, set) in sets.iter().enumerate() {
        let s = derive_seed(seed, &[p as u64]);
        for (i, inst) in set.items.iter().enumerate() {
            let mut rng = instance_rng(s, i as u64);
            out.push(noise_encoded(inst, set.lid, content.clone(), noise, &mut rng).truncated(max_len));
        }
    }
    out
}

enum Pool {
    Fixed(Vec<Seq2SeqExample>),
    Denoise {
        set: Instances,
        content: Range<TokenId>,
        noise: NoiseConfig,
    },
}

impl Pool {
    fn len(&self) -> usize {
        match self {
            Pool::Fixed(v) => v.len(),
            Pool::Denoise { set, .. } => set.items.len(),
        }
    }

    /// Example `idx`; denoising pools re-noise every epoch.
    fn example(&self, idx: usize, epoch_seed: u64, max_len: usize) -> Seq2SeqExample {
        match self {
            Pool::Fixed(v) => v[idx].clone(),
            Pool::Denoise { set, content, noise } => {
                let mut rng = instance_rng(epoch_seed, idx as u64);
                noise_encoded(&set.items[idx], set.lid, content.clone(), noise, &mut rng).truncated(max_len)
            }
        }
    }
}

/// Token-budgeted batches drawn from one of several pools per update.
///
/// The pool is picked by temperature sampling over pool sizes. Each pool is
/// walked in an order reshuffled every epoch, so every example is seen once
/// per pass.
pub struct PoolSource {
    pools: Vec<Pool>,
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    epoch: Vec<u64>,
    pending: Vec<Option<Seq2SeqExample>>,
    sampler: LanguageSampler,
    batch_tokens: usize,
    max_len: usize,
    seed: u64,
}

impl PoolSource {
    /// Fine-tuning stream over fixed pairs, one pool per direction.
    pub fn parallel(
        pools: Vec<Vec<Seq2SeqExample>>,
        batch_tokens: usize,
        max_len: usize,
        sampling: &SamplingConfig,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        Self::new(
            pools.into_iter().map(Pool::Fixed).collect(),
            batch_tokens,
            max_len,
            sampling,
            seed,
        )
    }

    /// Denoising stream, one pool per monolingual set.
    pub(crate) fn denoising(
        sets: Vec<Instances>,
        content: Range<TokenId>,
        noise: &NoiseConfig,
        batch_tokens: usize,
        max_len: usize,
        sampling: &SamplingConfig,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let pools = sets
            .into_iter()
            .map(|set| Pool::Denoise {
                set,
                content: content.clone(),
                noise: noise.clone(),
            })
            .collect();
        Self::new(pools, batch_tokens, max_len, sampling, seed)
    }

    fn new(
        pools: Vec<Pool>,
        batch_tokens: usize,
        max_len: usize,
        sampling: &SamplingConfig,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        if pools.is_empty() || pools.iter().any(|p| p.len() == 0) {
            return Err(PipelineError::MissingData("a training pool is empty".into()));
        }
        let sizes: Vec<u64> = pools.iter().map(|p| p.len() as u64).collect();
        let n = pools.len();
        Ok(Self {
            order: vec![Vec::new(); n],
            cursor: vec![0; n],
            epoch: vec![0; n],
            pending: vec![None; n],
            sampler: LanguageSampler::new(&sizes, sampling, derive_seed(seed, &[0x5a]))?,
            pools,
            batch_tokens,
            max_len,
            seed,
        })
    }

    fn next_example(&mut self, p: usize) -> Seq2SeqExample {
        if let Some(e) = self.pending[p].take() {
            return e;
        }
        if self.cursor[p] == 0 {
            let mut order: Vec<usize> = (0..self.pools[p].len()).collect();
            order.shuffle(&mut rng_for(self.seed, &[0x0d, p as u64, self.epoch[p]]));
            self.order[p] = order;
        }
        let idx = self.order[p][self.cursor[p]];
        let epoch_seed = derive_seed(self.seed, &[0xe0, p as u64, self.epoch[p]]);
        let ex = self.pools[p].example(idx, epoch_seed, self.max_len);
        self.cursor[p] += 1;
        if self.cursor[p] == self.pools[p].len() {
            self.cursor[p] = 0;
            self.epoch[p] += 1;
        }
        ex
    }
}

fn cost(e: &Seq2SeqExample) -> usize {
    e.encoder_input.len().max(e.labels.len())
}

impl BatchSource for PoolSource {
    fn next_batch(&mut self, _update: u64) -> SeqBatch {
        let p = if self.pools.len() == 1 {
            0
        } else {
            self.sampler.next_index()
        };
        let mut batch = SeqBatch::default();
        let mut used = 0;
        loop {
            let e = self.next_example(p);
            let c = cost(&e);
            if !batch.is_empty() && used + c > self.batch_tokens {
                self.pending[p] = Some(e);
                break;
            }
            used += c;
            batch.push(&e.encoder_input, &e.decoder_input, &e.labels);
        }
        batch
    }
}

/// Train pairs for `dir` in `domain`; mixed means out-domain plus
/// up-sampled in-domain.
pub(crate) fn ft_train_pairs(
    manifest: &CorpusManifest,
    dir: &Direction,
    domain: DomainTag,
    rules: &CleanRules,
    seed: u64,
) -> Result<ParallelDataset, PipelineError> {
    let get = |d: DomainTag| -> Result<ParallelDataset, PipelineError> {
        manifest
            .parallel_for(dir, SplitRole::Train, Some(d), rules)?
            .filter(|ds| !ds.is_empty())
            .ok_or_else(|| PipelineError::MissingData(format!("no {} training pairs for {dir}", domain_word(d))))
    };
    match domain {
        DomainTag::Mixed => Ok(crate::corpus::upsample_mix(
            &get(DomainTag::InDomain)?,
            &get(DomainTag::OutDomain)?,
            seed,
        )?),
        d => get(d),
    }
}

/// Pairs of `split` for `dir` in any domain.
pub(crate) fn eval_pairs(
    manifest: &CorpusManifest,
    dir: &Direction,
    split: SplitRole,
    rules: &CleanRules,
) -> Result<ParallelDataset, PipelineError> {
    manifest
        .parallel_for(dir, split, None, rules)?
        .filter(|ds| !ds.is_empty())
        .ok_or_else(|| PipelineError::MissingData(format!("no {split:?} pairs for {dir}").to_lowercase()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(n: usize, tag: u32) -> Seq2SeqExample {
        Seq2SeqExample::new(&vec![tag; n], 4, &vec![tag; n], 5)
    }

    #[test]
    fn batches_respect_budget_and_cover_every_example() {
        let pool: Vec<_> = (0..10).map(|i| ex(3 + i % 3, 10 + i as u32)).collect();
        let mut src = PoolSource::parallel(vec![pool], 20, 64, &SamplingConfig::default(), 3).unwrap();
        let mut seen = Vec::new();
        while seen.len() < 10 {
            let b = src.next_batch(0);
            let toks: usize = (0..b.len())
                .map(|i| (b.enc_off[i + 1] - b.enc_off[i]).max(b.dec_off[i + 1] - b.dec_off[i]))
                .sum();
            assert!(toks <= 20 || b.len() == 1);
            for i in 0..b.len() {
                seen.push(b.enc_ids[b.enc_off[i]]);
            }
        }
        seen.truncate(10);
        seen.sort();
        assert_eq!(seen, (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_example_forms_its_own_batch() {
        let mut src = PoolSource::parallel(vec![vec![ex(30, 9)]], 8, 64, &SamplingConfig::default(), 0).unwrap();
        assert_eq!(src.next_batch(0).len(), 1);
    }
}
