//! Recipe execution, stage records and resumption.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CleanRules, CorpusManifest, Direction, DomainTag, LangCode, SamplingConfig, SplitRole};
use crate::decode::{DecodeConfig, EnsembleSpec, Translator};
use crate::eval::{text_bleu, validation_likelihood};
use crate::model::train::{train_stage, SavedCheckpoint, StageRun, ValidScores};
use crate::model::{Model, ModelCheckpoint, ModelConfig, ModelError, TrainConfig};
use crate::noising::{NoiseConfig, Seq2SeqExample};
use crate::rng::derive_seed;
use crate::subword::{train_vocab, Vocab, VocabConfig};

use super::data::{build_cpt_data, encode_pairs, eval_pairs, fixed_denoising, ft_train_pairs, pack_mono, PoolSource};
use super::{
    expand_mft_directions, FtMode, InitFrom, PipelineError, PipelineRecipe, StageData, StageKind, StageSpec, MFT_MODES,
};

/// Optional replacements for schedule fields, applied on top of a preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_updates: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_smoothing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub save_interval: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_last: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, t: &TrainConfig) -> TrainConfig {
        let mut t = t.clone();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { t.$f = v; } )* };
        }
        set!(
            max_updates,
            warmup_steps,
            max_lr,
            dropout,
            label_smoothing,
            batch_tokens,
            save_interval,
            keep_last
        );
        if self.clip_norm.is_some() {
            t.clip_norm = self.clip_norm;
        }
        t
    }
}

/// Everything besides the stage list that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub seed: u64,
    /// Model shape preset for fresh initialization.
    pub model: String,
    pub vocab: VocabConfig,
    pub noise: NoiseConfig,
    pub sampling: SamplingConfig,
    pub decode: DecodeConfig,
    /// Regular expressions; matching lines are dropped from every corpus.
    pub clean_patterns: Vec<String>,
    /// Caps the validation pairs used per direction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_lines: Option<usize>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 1,
            model: "tiny".into(),
            vocab: VocabConfig::default(),
            noise: NoiseConfig::default(),
            sampling: SamplingConfig::default(),
            decode: DecodeConfig::default(),
            clean_patterns: Vec::new(),
            valid_lines: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    /// Path relative to the run directory.
    pub file: String,
    pub updates: u64,
    pub valid_nll: Option<f64>,
    pub valid_bleu: Option<f64>,
    /// Hash of the parameter bits.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub mode: FtMode,
    pub directions: Vec<String>,
    pub selected: CheckpointInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub kind: StageKind,
    /// Stage directory relative to the run directory.
    pub dir: String,
    /// Seed the stage's data order and dropout were drawn from.
    pub seed: u64,
    /// Hash of the parameters the stage started from.
    pub init_digest: String,
    pub checkpoints: Vec<CheckpointInfo>,
    pub selected: CheckpointInfo,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepEntry>,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionScores {
    pub valid_bleu: f64,
    pub test_bleu: f64,
}

/// The outcome of a recipe run. Contains no timings, so identical inputs
/// give identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub recipe: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    /// Keyed by direction, e.g. `si-en`.
    pub scores: BTreeMap<String, DirectionScores>,
    pub final_checkpoint: String,
}

impl RunRecord {
    pub fn test_scores(&self) -> BTreeMap<String, f64> {
        self.scores.iter().map(|(d, s)| (d.clone(), s.test_bleu)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Record {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }
}

/// Written into a stage directory once the stage has finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageFile {
    spec: StageSpec,
    record: StageRecord,
}

pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const VOCAB_FILE: &str = "vocab.txt";
const STAGE_FILE: &str = "stage.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The checkpoint with the lowest validation NLL; ties go to the later
/// update.
pub fn select_final(checkpoints: &[ModelCheckpoint]) -> Result<&ModelCheckpoint, PipelineError> {
    let best = crate::model::train::best_by_nll(checkpoints.iter()).ok_or(PipelineError::NoScoredCheckpoints)?;
    Ok(checkpoints
        .iter()
        .rev()
        .find(|c| c.meta.updates == best)
        .expect("selected update is present"))
}

/// 64-bit FNV-1a over the little-endian parameter bytes, as hex.
pub fn param_digest(params: &[f32]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

struct Ctx<'a> {
    manifest: &'a CorpusManifest,
    settings: &'a RunSettings,
    rules: CleanRules,
    vocab: Vocab,
    vocab_text: String,
    target: Direction,
    out_dir: &'a Path,
}

impl Ctx<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.out_dir)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn info(&self, s: &SavedCheckpoint) -> CheckpointInfo {
        CheckpointInfo {
            file: s.path.as_deref().map(|p| self.rel(p)).unwrap_or_default(),
            updates: s.checkpoint.meta.updates,
            valid_nll: s.checkpoint.meta.valid_nll,
            valid_bleu: s.checkpoint.meta.valid_bleu,
            digest: param_digest(&s.checkpoint.params),
        }
    }

    fn capped(&self, mut v: Vec<(String, String)>) -> Vec<(String, String)> {
        if let Some(n) = self.settings.valid_lines {
            v.truncate(n);
        }
        v
    }

    fn valid_examples(&self, dirs: &[Direction], max_len: usize) -> Result<Vec<Seq2SeqExample>, PipelineError> {
        let mut out = Vec::new();
        for d in dirs {
            let mut ds = eval_pairs(self.manifest, d, SplitRole::Valid, &self.rules)?;
            ds.pairs = self.capped(ds.pairs);
            out.extend(encode_pairs(&self.vocab, &ds, max_len)?);
        }
        Ok(out)
    }

    /// BLEU of `model` on `pairs` translated from `dir.src` into `dir.tgt`.
    fn bleu(
        &self,
        model: &Model<f32>,
        dir: &Direction,
        pairs: &[(String, String)],
    ) -> Result<(f64, Vec<String>), PipelineError> {
        let spec = EnsembleSpec::single(model.clone());
        let tr = Translator {
            spec: &spec,
            cfg: &self.settings.decode,
            vocab: &self.vocab,
            src_lang: &dir.src,
            tgt_lang: &dir.tgt,
            repair_zwj: self.manifest.needs_zwj_repair(&dir.tgt),
        };
        let srcs: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
        let refs: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
        let (hyps, _) = tr.translate_lines(&srcs);
        let hyp_refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
        Ok((text_bleu(&hyp_refs, &refs, false)?.bleu, hyps))
    }
}

/// Runs every stage of `recipe` in order and scores the final model on the
/// target direction.
///
/// Each stage writes to its own numbered directory under `out_dir` and
/// leaves a `stage.json` once finished; a rerun over the same directory
/// reuses finished stages and restarts an unfinished one from scratch. A
/// failing stage aborts the run and leaves earlier stage records in place.
pub fn run_recipe(
    recipe: &PipelineRecipe,
    manifest: &CorpusManifest,
    base: Option<&ModelCheckpoint>,
    settings: &RunSettings,
    out_dir: &Path,
) -> Result<RunRecord, PipelineError> {
    recipe.validate()?;
    settings.noise.validate().map_err(PipelineError::InvalidRecipe)?;
    settings.decode.validate()?;
    for l in recipe.languages() {
        if !manifest.languages.contains(&l) {
            return Err(PipelineError::InvalidRecipe(format!(
                "language {l} is not in the manifest"
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let rules = CleanRules::from_patterns(&settings.clean_patterns)?;
    let vocab = resolve_vocab(manifest, base, settings, &rules, out_dir)?;
    let ctx = Ctx {
        manifest,
        settings,
        rules,
        vocab_text: vocab.to_text(),
        vocab,
        target: recipe.target.clone(),
        out_dir,
    };

    let fresh = || -> Result<Model<f32>, PipelineError> {
        let cfg = ModelConfig::preset(&settings.model, ctx.vocab.len())
            .ok_or_else(|| PipelineError::InvalidRecipe(format!("unknown model preset {:?}", settings.model)))?;
        Ok(Model::init(cfg, derive_seed(settings.seed, &[0x1a17]))?)
    };
    if let Some(b) = base {
        if b.config.vocab_size != ctx.vocab.len() {
            return Err(PipelineError::InvalidRecipe(format!(
                "base checkpoint has {} embeddings but the vocabulary has {} tokens",
                b.config.vocab_size,
                ctx.vocab.len()
            )));
        }
    }

    let mut previous: Option<Model<f32>> = None;
    let mut records = Vec::new();
    for (i, spec) in recipe.stages.iter().enumerate() {
        let start = match spec.init {
            InitFrom::Previous => previous.take().expect("validated recipe"),
            InitFrom::Base => match base {
                Some(b) => b.model(),
                None => fresh()?,
            },
            InitFrom::Fresh => fresh()?,
        };
        let dir = out_dir.join(format!("stage_{:02}_{}", i + 1, spec.name));
        let seed = derive_seed(settings.seed, &[i as u64, spec.train.seed]);
        let (record, selected) = match resume_stage(&dir, spec, seed)? {
            Some(r) => r,
            None => run_stage(&ctx, spec, seed, start, &dir).map_err(|e| PipelineError::StageFailed {
                index: i + 1,
                name: spec.name.clone(),
                source: Box::new(e),
            })?,
        };
        previous = Some(selected);
        records.push(record);
    }

    let final_model = previous.expect("recipe has stages");
    // A recipe ending in pre-training has nothing to translate with yet.
    let mut dirs = Vec::new();
    match recipe.stages.last().map(|s| &s.data) {
        Some(StageData::Cpt { .. }) => {}
        Some(StageData::Ft { directions, .. }) => {
            dirs.push(recipe.target.clone());
            for d in directions {
                if !dirs.contains(d) {
                    dirs.push(d.clone());
                }
            }
        }
        _ => dirs.push(recipe.target.clone()),
    }
    let mut scores = BTreeMap::new();
    for d in &dirs {
        let valid = ctx.capped(eval_pairs(manifest, d, SplitRole::Valid, &ctx.rules)?.pairs);
        let test = eval_pairs(manifest, d, SplitRole::Test, &ctx.rules)?.pairs;
        let (valid_bleu, _) = ctx.bleu(&final_model, d, &valid)?;
        let (test_bleu, hyps) = ctx.bleu(&final_model, d, &test)?;
        let hyp_path = out_dir.join(format!("test.{d}.hyp"));
        fs::write(&hyp_path, hyps.iter().map(|h| format!("{h}\n")).collect::<String>()).map_err(io_err(&hyp_path))?;
        scores.insert(d.to_string(), DirectionScores { valid_bleu, test_bleu });
    }
    let record = RunRecord {
        recipe: recipe.name.clone(),
        target: recipe.target.to_string(),
        pivot: recipe.pivot().map(|p| p.to_string()),
        baseline: recipe.baseline.clone(),
        seed: settings.seed,
        final_checkpoint: records.last().expect("stages").selected.file.clone(),
        stages: records,
        scores,
    };
    record.save(&out_dir.join(RUN_RECORD_FILE))?;
    Ok(record)
}

fn resolve_vocab(
    manifest: &CorpusManifest,
    base: Option<&ModelCheckpoint>,
    settings: &RunSettings,
    rules: &CleanRules,
    out_dir: &Path,
) -> Result<Vocab, PipelineError> {
    let path = out_dir.join(VOCAB_FILE);
    if let Some(text) = base.and_then(|b| b.meta.vocab.as_deref()) {
        let v = Vocab::from_text(text)?;
        v.save(&path)?;
        return Ok(v);
    }
    if path.exists() {
        return Ok(Vocab::load(&path)?);
    }
    let v = train_manifest_vocab(manifest, &settings.vocab, rules)?;
    v.save(&path)?;
    Ok(v)
}

/// Learns a vocabulary over every training line in the manifest.
pub fn train_manifest_vocab(
    manifest: &CorpusManifest,
    cfg: &VocabConfig,
    rules: &CleanRules,
) -> Result<Vocab, PipelineError> {
    let mut lines = Vec::new();
    for e in &manifest.mono {
        lines.extend(manifest.load_mono(e, rules)?.lines);
    }
    for e in manifest.parallel.iter().filter(|e| e.split == SplitRole::Train) {
        for (s, t) in manifest.load_parallel(e, rules)?.pairs {
            lines.push(s);
            lines.push(t);
        }
    }
    Ok(train_vocab(&lines, &manifest.languages, cfg)?)
}

fn resume_stage(dir: &Path, spec: &StageSpec, seed: u64) -> Result<Option<(StageRecord, Model<f32>)>, PipelineError> {
    let path = dir.join(STAGE_FILE);
    if !path.exists() {
        if dir.exists() {
            log::info!("restarting unfinished stage in {}", dir.display());
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: StageFile = serde_json::from_str(&text).map_err(|e| PipelineError::Record {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if file.spec != *spec || file.record.seed != seed {
        return Err(PipelineError::Record {
            path,
            message: "finished stage was run with a different configuration".into(),
        });
    }
    let run_dir = dir.parent().expect("stage dir has a parent");
    let ckpt = ModelCheckpoint::load(&run_dir.join(&file.record.selected.file)).map_err(ModelError::from)?;
    if param_digest(&ckpt.params) != file.record.selected.digest {
        return Err(PipelineError::Record {
            path,
            message: "selected checkpoint does not match its recorded digest".into(),
        });
    }
    log::info!("reusing finished stage {}", spec.name);
    Ok(Some((file.record, ckpt.model())))
}

fn run_stage(
    ctx: &Ctx<'_>,
    spec: &StageSpec,
    seed: u64,
    start: Model<f32>,
    dir: &Path,
) -> Result<(StageRecord, Model<f32>), PipelineError> {
    let init_digest = param_digest(&start.params);
    let tcfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let (outcome, sweep) = match &spec.data {
        StageData::Cpt { case, languages } => (run_cpt(ctx, spec, *case, languages, &tcfg, start, dir)?, Vec::new()),
        StageData::Ft { directions, domain, .. } => (
            run_ft(ctx, &spec.name, directions, *domain, &tcfg, start, dir)?,
            Vec::new(),
        ),
        StageData::MftBest {
            pivot,
            languages,
            domain,
        } => {
            let mut best: Option<(f64, StageResult)> = None;
            let mut sweep = Vec::new();
            for (k, mode) in MFT_MODES.into_iter().enumerate() {
                let dirs = expand_mft_directions(mode, pivot, languages)?;
                let sub = TrainConfig {
                    seed: derive_seed(seed, &[k as u64]),
                    ..tcfg.clone()
                };
                let res = run_ft(
                    ctx,
                    &format!("{}-{mode}", spec.name),
                    &dirs,
                    *domain,
                    &sub,
                    start.clone(),
                    &dir.join(mode.to_string()),
                )?;
                let bleu = res.selected.checkpoint.meta.valid_bleu.unwrap_or(f64::NEG_INFINITY);
                log::info!("{}: {mode} reaches valid BLEU {bleu:.2} on {}", spec.name, ctx.target);
                sweep.push(SweepEntry {
                    mode,
                    directions: dirs.iter().map(|d| d.to_string()).collect(),
                    selected: ctx.info(&res.selected),
                });
                if best.as_ref().is_none_or(|(b, _)| bleu > *b) {
                    best = Some((bleu, res));
                }
            }
            (best.expect("three modes").1, sweep)
        }
    };
    let record = StageRecord {
        name: spec.name.clone(),
        kind: spec.kind(),
        dir: ctx.rel(dir),
        seed,
        init_digest,
        checkpoints: outcome.checkpoints.iter().map(|s| ctx.info(s)).collect(),
        selected: ctx.info(&outcome.selected),
        sweep,
        final_train_loss: outcome.final_loss,
    };
    let file = StageFile {
        spec: spec.clone(),
        record: record.clone(),
    };
    let path = dir.join(STAGE_FILE);
    let json = serde_json::to_string_pretty(&file).expect("stage file serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok((record, outcome.selected.checkpoint.model()))
}

struct StageResult {
    checkpoints: Vec<SavedCheckpoint>,
    selected: SavedCheckpoint,
    final_loss: f64,
}

fn finish(outcome: crate::model::train::StageOutcome) -> Result<StageResult, PipelineError> {
    if let Some(e) = outcome.diverged {
        return Err(e.into());
    }
    let ckpts: Vec<ModelCheckpoint> = outcome.checkpoints.iter().map(|s| s.checkpoint.clone()).collect();
    let best = select_final(&ckpts)?.meta.updates;
    let selected = outcome
        .checkpoints
        .iter()
        .rev()
        .find(|s| s.checkpoint.meta.updates == best)
        .cloned()
        .expect("selected checkpoint is retained");
    Ok(StageResult {
        selected,
        final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
        checkpoints: outcome.checkpoints,
    })
}

fn run_ft(
    ctx: &Ctx<'_>,
    name: &str,
    directions: &[Direction],
    domain: DomainTag,
    tcfg: &TrainConfig,
    start: Model<f32>,
    dir: &Path,
) -> Result<StageResult, PipelineError> {
    let max_len = start.cfg.max_len;
    let mut pools = Vec::new();
    for (k, d) in directions.iter().enumerate() {
        let ds = ft_train_pairs(
            ctx.manifest,
            d,
            domain,
            &ctx.rules,
            derive_seed(tcfg.seed, &[0x313, k as u64]),
        )?;
        pools.push(encode_pairs(&ctx.vocab, &ds, max_len)?);
    }
    let mut source = PoolSource::parallel(pools, tcfg.batch_tokens, max_len, &ctx.settings.sampling, tcfg.seed)?;
    let valid = ctx.valid_examples(directions, max_len)?;
    let target_valid = ctx.capped(eval_pairs(ctx.manifest, &ctx.target, SplitRole::Valid, &ctx.rules)?.pairs);
    let mut failure = None;
    let mut validate = |m: &Model<f32>| {
        let nll = validation_likelihood(m, &valid).unwrap_or_else(|e| {
            failure.get_or_insert(PipelineError::from(e));
            f64::NAN
        });
        let bleu = ctx
            .bleu(m, &ctx.target, &target_valid)
            .map(|b| b.0)
            .unwrap_or_else(|e| {
                failure.get_or_insert(e);
                0.0
            });
        ValidScores { nll, bleu: Some(bleu) }
    };
    let run = StageRun {
        name,
        tcfg,
        out_dir: Some(dir),
        vocab_text: Some(ctx.vocab_text.clone()),
    };
    let outcome = train_stage(start, &mut source, &run, &mut validate)?;
    if let Some(e) = failure {
        return Err(e);
    }
    finish(outcome)
}

fn run_cpt(
    ctx: &Ctx<'_>,
    spec: &StageSpec,
    case: super::CptCase,
    languages: &[LangCode],
    tcfg: &TrainConfig,
    start: Model<f32>,
    dir: &Path,
) -> Result<StageResult, PipelineError> {
    let max_len = start.cfg.max_len;
    let noise = &ctx.settings.noise;
    let budget = noise.max_instance_tokens;
    let selection = build_cpt_data(ctx.manifest, case, languages, &ctx.rules)?;
    let sets = selection
        .iter()
        .filter(|ds| !ds.is_empty())
        .map(|ds| pack_mono(&ctx.vocab, ds, budget))
        .collect::<Result<Vec<_>, _>>()?;
    let content = ctx.vocab.content_ids();
    let data_seed = derive_seed(tcfg.seed, &[noise.seed]);
    let mut source = PoolSource::denoising(
        sets,
        content.clone(),
        noise,
        tcfg.batch_tokens,
        max_len,
        &ctx.settings.sampling,
        data_seed,
    )?;

    // Validation denoises held-out sentences of the same languages with a
    // fixed noise draw.
    let mut held_out = Vec::new();
    for e in ctx.manifest.parallel.iter().filter(|e| e.split == SplitRole::Valid) {
        let ds = ctx.manifest.load_parallel(e, &ctx.rules)?;
        let pairs = ctx.capped(ds.pairs);
        for (lang, side) in [(&ds.src_lang, 0), (&ds.tgt_lang, 1)] {
            if languages.contains(lang) {
                let lines = pairs
                    .iter()
                    .map(|p| if side == 0 { p.0.clone() } else { p.1.clone() })
                    .collect();
                held_out.push(crate::corpus::MonoDataset::new(
                    lang.clone(),
                    DomainTag::InDomain,
                    lines,
                )?);
            }
        }
    }
    if held_out.is_empty() {
        return Err(PipelineError::MissingData(format!(
            "stage {} has no validation sentences in its languages",
            spec.name
        )));
    }
    let held_sets = held_out
        .iter()
        .map(|ds| pack_mono(&ctx.vocab, ds, budget))
        .collect::<Result<Vec<_>, _>>()?;
    let valid = fixed_denoising(
        &held_sets,
        content,
        noise,
        derive_seed(ctx.settings.seed, &[0x7a11d]),
        max_len,
    );
    let mut failure = None;
    let mut validate = |m: &Model<f32>| ValidScores {
        nll: validation_likelihood(m, &valid).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        }),
        bleu: None,
    };
    let run = StageRun {
        name: &spec.name,
        tcfg,
        out_dir: Some(dir),
        vocab_text: Some(ctx.vocab_text.clone()),
    };
    let outcome = train_stage(start, &mut source, &run, &mut validate)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    finish(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CheckpointMeta;

    fn ckpt(updates: u64, nll: Option<f64>) -> ModelCheckpoint {
        let m = Model::<f32>::init(
            ModelConfig {
                layers: 1,
                d_model: 4,
                heads: 1,
                ffn_dim: 4,
                vocab_size: 8,
                max_len: 4,
                dropout: 0.0,
            },
            updates,
        )
        .unwrap();
        ModelCheckpoint::from_model(
            &m,
            CheckpointMeta {
                stage: "t".into(),
                updates,
                valid_nll: nll,
                valid_bleu: None,
                vocab: None,
            },
        )
    }

    #[test]
    fn select_final_rules() {
        let one = [ckpt(5, Some(2.0))];
        assert_eq!(select_final(&one).unwrap().meta.updates, 5);
        let two = [ckpt(1, Some(1.2)), ckpt(2, Some(1.1))];
        assert_eq!(select_final(&two).unwrap().meta.updates, 2);
        let tie = [ckpt(900, Some(1.0)), ckpt(1000, Some(1.0))];
        assert_eq!(select_final(&tie).unwrap().meta.updates, 1000);
        let rev = [ckpt(1000, Some(1.0)), ckpt(900, Some(1.0))];
        assert_eq!(select_final(&rev).unwrap().meta.updates, 1000);
        assert!(matches!(
            select_final(&[ckpt(1, None)]),
            Err(PipelineError::NoScoredCheckpoints)
        ));
        assert!(matches!(select_final(&[]), Err(PipelineError::NoScoredCheckpoints)));
    }

    #[test]
    fn overrides_apply_only_given_fields() {
        let t = TrainConfig::bilingual();
        let o = TrainOverrides {
            max_updates: Some(10),
            clip_norm: Some(0.5),
            ..Default::default()
        };
        let r = o.apply(&t);
        assert_eq!(r.max_updates, 10);
        assert_eq!(r.clip_norm, Some(0.5));
        assert_eq!(r.max_lr, t.max_lr);
    }

    #[test]
    fn digest_sees_every_bit() {
        assert_ne!(param_digest(&[0.0]), param_digest(&[-0.0]));
        assert_eq!(param_digest(&[1.5, 2.0]), param_digest(&[1.5, 2.0]));
    }
}
