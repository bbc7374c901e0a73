//! Continual pre-training cases, fine-tuning modes and named multistage
//! recipes.
//!
//! A [`PipelineRecipe`] is an ordered list of [`StageSpec`]s. Presets build
//! the standard strategies by name; [`run_recipe`] executes any list,
//! starting each stage from the checkpoint selected at the end of the
//! previous one.

mod data;
mod file;
mod run;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Direction, DomainTag, LangCode, ManifestError};
use crate::decode::DecodeError;
use crate::eval::EvalError;
use crate::model::{ModelError, TrainConfig};
use crate::subword::SubwordError;

pub use data::{build_cpt_data, PoolSource};
pub use file::{PresetRef, RecipeFile};
pub use run::{
    param_digest, run_recipe, select_final, train_manifest_vocab, CheckpointInfo, DirectionScores, RunRecord,
    RunSettings, StageRecord, SweepEntry, TrainOverrides, RUN_RECORD_FILE, VOCAB_FILE,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("no scored checkpoints")]
    NoScoredCheckpoints,
    #[error("stage {index} ({name}) failed: {source}")]
    StageFailed {
        index: usize,
        name: String,
        source: Box<PipelineError>,
    },
    #[error("{path}: {message}")]
    Record { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Cpt,
    Ft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FtMode {
    Bilingual,
    O2m,
    M2o,
    M2m,
}

/// The multilingual modes swept by an `M-FT(best)` stage, in tie-break order.
pub const MFT_MODES: [FtMode; 3] = [FtMode::O2m, FtMode::M2o, FtMode::M2m];

impl FtMode {
    pub fn is_multilingual(self) -> bool {
        self != FtMode::Bilingual
    }
}

impl fmt::Display for FtMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FtMode::Bilingual => "bilingual",
            FtMode::O2m => "o2m",
            FtMode::M2o => "m2o",
            FtMode::M2m => "m2m",
        })
    }
}

/// Which monolingual data a continual pre-training stage denoises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CptCase {
    /// In-domain monolingual data.
    #[serde(rename = "A(i)")]
    AI,
    /// In-domain monolingual data plus both sides of in-domain parallel data.
    #[serde(rename = "A(ii)")]
    AII,
    /// Out-domain monolingual data.
    #[serde(rename = "B")]
    B,
    /// In- and out-domain monolingual data together, without up-sampling.
    #[serde(rename = "C1")]
    C1,
    /// First of two sequential stages: out-domain monolingual data.
    #[serde(rename = "C2-phase1")]
    C2Phase1,
    /// Second of two sequential stages: in-domain monolingual data.
    #[serde(rename = "C2-phase2")]
    C2Phase2,
}

impl CptCase {
    /// Monolingual domains read by this case.
    pub fn mono_domains(self) -> &'static [DomainTag] {
        match self {
            CptCase::AI | CptCase::AII | CptCase::C2Phase2 => &[DomainTag::InDomain],
            CptCase::B | CptCase::C2Phase1 => &[DomainTag::OutDomain],
            CptCase::C1 => &[DomainTag::InDomain, DomainTag::OutDomain],
        }
    }

    /// Whether in-domain parallel data is added as monolingual text.
    pub fn uses_parallel(self) -> bool {
        self == CptCase::AII
    }
}

impl fmt::Display for CptCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CptCase::AI => "A(i)",
            CptCase::AII => "A(ii)",
            CptCase::B => "B",
            CptCase::C1 => "C1",
            CptCase::C2Phase1 => "C2-phase1",
            CptCase::C2Phase2 => "C2-phase2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitFrom {
    /// The checkpoint selected at the end of the previous stage.
    Previous,
    /// The base checkpoint given to the run, or a fresh model without one.
    Base,
    /// A freshly initialized model, ignoring any base checkpoint.
    Fresh,
}

impl fmt::Display for InitFrom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitFrom::Previous => "previous",
            InitFrom::Base => "base",
            InitFrom::Fresh => "fresh",
        })
    }
}

/// The data a stage trains on.
///
/// For fine-tuning, `DomainTag::Mixed` means out-domain pairs plus
/// up-sampled in-domain pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageData {
    Cpt {
        case: CptCase,
        languages: Vec<LangCode>,
    },
    Ft {
        mode: FtMode,
        directions: Vec<Direction>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pivot: Option<LangCode>,
        domain: DomainTag,
    },
    /// Runs O2M, M2O and M2M fine-tuning from the same start and keeps the
    /// one with the best validation BLEU on the recipe's target direction.
    MftBest {
        pivot: LangCode,
        languages: Vec<LangCode>,
        domain: DomainTag,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    #[serde(flatten)]
    pub data: StageData,
    pub init: InitFrom,
    pub train: TrainConfig,
}

impl StageSpec {
    pub fn kind(&self) -> StageKind {
        match self.data {
            StageData::Cpt { .. } => StageKind::Cpt,
            _ => StageKind::Ft,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidRecipe(format!("stage {}: {m}", self.name)));
        self.train
            .validate()
            .map_err(|e| PipelineError::InvalidRecipe(format!("stage {}: {e}", self.name)))?;
        match &self.data {
            StageData::Cpt { languages, .. } => {
                if languages.is_empty() {
                    return bad("pre-training needs at least one language".into());
                }
                if distinct(languages) != languages.len() {
                    return bad("duplicate language".into());
                }
            }
            StageData::Ft {
                mode,
                directions,
                pivot,
                ..
            } => {
                if directions.iter().any(|d| d.src == d.tgt) {
                    return bad("direction with identical source and target".into());
                }
                if distinct(directions) != directions.len() {
                    return bad("duplicate direction".into());
                }
                if !mode.is_multilingual() {
                    if directions.len() != 1 {
                        return bad(format!(
                            "bilingual mode needs exactly 1 direction, got {}",
                            directions.len()
                        ));
                    }
                } else {
                    let Some(p) = pivot else {
                        return bad(format!("{mode} needs a pivot language"));
                    };
                    if directions.len() < 2 {
                        return bad(format!("{mode} needs at least 2 directions, got {}", directions.len()));
                    }
                    let ok = |d: &Direction| match mode {
                        FtMode::O2m => d.src == *p,
                        FtMode::M2o => d.tgt == *p,
                        _ => d.src == *p || d.tgt == *p,
                    };
                    if let Some(d) = directions.iter().find(|d| !ok(d)) {
                        return bad(format!("direction {d} does not fit {mode} with pivot {p}"));
                    }
                }
            }
            StageData::MftBest { pivot, languages, .. } => {
                if distinct(languages) != languages.len() {
                    return bad("duplicate language".into());
                }
                if languages.len() < 3 {
                    return bad("the multilingual sweep needs at least 3 languages".into());
                }
                if !languages.contains(pivot) {
                    return bad(format!("pivot {pivot} is not among the languages"));
                }
            }
        }
        Ok(())
    }

    /// One-line structural summary used by the golden expansions.
    pub fn describe(&self) -> String {
        let langs = |l: &[LangCode]| l.iter().map(|x| x.as_str()).collect::<Vec<_>>().join(",");
        let body = match &self.data {
            StageData::Cpt { case, languages } => format!("cpt case={case} langs={}", langs(languages)),
            StageData::Ft {
                mode,
                directions,
                pivot,
                domain,
            } => {
                let dirs = directions.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
                let pivot = pivot.as_ref().map(|p| format!(" pivot={p}")).unwrap_or_default();
                format!("ft mode={mode}{pivot} dirs={dirs} domain={}", domain_name(*domain))
            }
            StageData::MftBest {
                pivot,
                languages,
                domain,
            } => format!(
                "ft sweep=o2m,m2o,m2m pivot={pivot} langs={} domain={}",
                langs(languages),
                domain_name(*domain)
            ),
        };
        format!(
            "{}: {body} init={} updates={} warmup={} lr={:e}",
            self.name, self.init, self.train.max_updates, self.train.warmup_steps, self.train.max_lr
        )
    }
}

fn distinct<T: Ord>(items: &[T]) -> usize {
    items.iter().collect::<BTreeSet<_>>().len()
}

fn domain_name(d: DomainTag) -> &'static str {
    match d {
        DomainTag::InDomain => "in",
        DomainTag::OutDomain => "out",
        DomainTag::Mixed => "mixed",
    }
}

/// Directed pairs trained by a multilingual mode around `pivot`.
///
/// O2M gives pivot→ℓ, M2O gives ℓ→pivot and M2M both, for every other
/// language ℓ in the order given.
pub fn expand_mft_directions(
    mode: FtMode,
    pivot: &LangCode,
    languages: &[LangCode],
) -> Result<Vec<Direction>, PipelineError> {
    if !languages.contains(pivot) {
        return Err(PipelineError::InvalidRecipe(format!(
            "pivot {pivot} is not among the languages"
        )));
    }
    let others = languages.iter().filter(|l| *l != pivot);
    let o2m = others.clone().map(|l| Direction::new(pivot.clone(), l.clone()));
    let m2o = others.map(|l| Direction::new(l.clone(), pivot.clone()));
    Ok(match mode {
        FtMode::O2m => o2m.collect(),
        FtMode::M2o => m2o.collect(),
        FtMode::M2m => o2m.chain(m2o).collect(),
        FtMode::Bilingual => {
            return Err(PipelineError::InvalidRecipe(
                "bilingual mode has no pivot expansion".into(),
            ))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineRecipe {
    pub name: String,
    /// Direction that is reported, used to pick the best multilingual mode,
    /// and trained by the final bilingual stage of the presets.
    pub target: Direction,
    /// Name of the run the report compares against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub stages: Vec<StageSpec>,
}

/// Inputs to [`PipelineRecipe::preset`].
#[derive(Debug, Clone, PartialEq)]
pub struct PresetParams {
    pub target: Direction,
    /// Third language for the three-language recipes.
    pub third: Option<LangCode>,
    /// Pivot for multilingual fine-tuning; defaults to the target source.
    pub pivot: Option<LangCode>,
    pub bilingual: TrainConfig,
    pub multilingual: TrainConfig,
    pub cpt: TrainConfig,
}

impl PresetParams {
    /// Full-size schedules for every stage type.
    pub fn new(target: Direction) -> Self {
        Self {
            target,
            third: None,
            pivot: None,
            bilingual: TrainConfig::bilingual(),
            multilingual: TrainConfig::multilingual(),
            cpt: TrainConfig::bilingual(),
        }
    }

    pub fn with_third(mut self, third: LangCode) -> Self {
        self.third = Some(third);
        self
    }

    pub fn with_pivot(mut self, pivot: LangCode) -> Self {
        self.pivot = Some(pivot);
        self
    }
}

/// Every name accepted by [`PipelineRecipe::preset`].
pub const PRESET_NAMES: &[&str] = &[
    "B-FT",
    "O2M-FT",
    "M2O-FT",
    "M2M-FT",
    "biCPT,B-FT",
    "triCPT,O2M-FT",
    "triCPT,M2O-FT",
    "triCPT,M2M-FT",
    "3-B-FT",
    "biCPT,3-B-FT",
    "M-FT(best),B-FT",
    "triCPT,M-FT(best),B-FT",
    "CPT-A(i),B-FT",
    "CPT-A(ii),B-FT",
    "CPT-B,B-FT",
    "CPT-C1,B-FT",
    "CPT-C2,B-FT",
];

impl PipelineRecipe {
    /// Expands a named strategy into its stage list.
    pub fn preset(name: &str, p: &PresetParams) -> Result<Self, PipelineError> {
        let t = &p.target;
        if t.src == t.tgt {
            return Err(PipelineError::InvalidRecipe(format!(
                "target {t} has identical languages"
            )));
        }
        let pair = vec![t.src.clone(), t.tgt.clone()];
        let triple = || -> Result<Vec<LangCode>, PipelineError> {
            match &p.third {
                Some(x) if !pair.contains(x) => Ok(vec![t.src.clone(), t.tgt.clone(), x.clone()]),
                Some(x) => Err(PipelineError::InvalidRecipe(format!(
                    "third language {x} repeats a target language"
                ))),
                None => Err(PipelineError::InvalidRecipe(format!(
                    "preset {name} needs a third language"
                ))),
            }
        };
        let pivot = p.pivot.clone().unwrap_or_else(|| t.src.clone());

        let cpt = |stage: &str, case: CptCase, languages: Vec<LangCode>, init: InitFrom| StageSpec {
            name: stage.into(),
            data: StageData::Cpt { case, languages },
            init,
            train: p.cpt.clone(),
        };
        let bft = |stage: &str, domain: DomainTag, init: InitFrom| StageSpec {
            name: stage.into(),
            data: StageData::Ft {
                mode: FtMode::Bilingual,
                directions: vec![t.clone()],
                pivot: None,
                domain,
            },
            init,
            train: p.bilingual.clone(),
        };
        let mft = |mode: FtMode, init: InitFrom| -> Result<StageSpec, PipelineError> {
            let langs = triple()?;
            Ok(StageSpec {
                name: format!("ft-{mode}"),
                data: StageData::Ft {
                    mode,
                    directions: expand_mft_directions(mode, &pivot, &langs)?,
                    pivot: Some(pivot.clone()),
                    domain: DomainTag::InDomain,
                },
                init,
                train: p.multilingual.clone(),
            })
        };
        let sweep = |init: InitFrom| -> Result<StageSpec, PipelineError> {
            Ok(StageSpec {
                name: "ft-mft-best".into(),
                data: StageData::MftBest {
                    pivot: pivot.clone(),
                    languages: triple()?,
                    domain: DomainTag::InDomain,
                },
                init,
                train: p.multilingual.clone(),
            })
        };
        let three_bft = |first: InitFrom| {
            vec![
                bft("ft-out", DomainTag::OutDomain, first),
                bft("ft-mixed", DomainTag::Mixed, InitFrom::Previous),
                bft("ft-in", DomainTag::InDomain, InitFrom::Previous),
            ]
        };
        use InitFrom::{Base, Previous};
        let mode_of = |s: &str| match s {
            "O2M" => FtMode::O2m,
            "M2O" => FtMode::M2o,
            _ => FtMode::M2m,
        };

        let stages = match name {
            "B-FT" => vec![bft("ft", DomainTag::InDomain, Base)],
            "O2M-FT" | "M2O-FT" | "M2M-FT" => vec![mft(mode_of(&name[..3]), Base)?],
            "biCPT,B-FT" => vec![
                cpt("cpt", CptCase::AII, pair.clone(), Base),
                bft("ft", DomainTag::InDomain, Previous),
            ],
            "triCPT,O2M-FT" | "triCPT,M2O-FT" | "triCPT,M2M-FT" => vec![
                cpt("cpt", CptCase::AII, triple()?, Base),
                mft(mode_of(&name[7..10]), Previous)?,
            ],
            "3-B-FT" => three_bft(Base),
            "biCPT,3-B-FT" => {
                let mut s = vec![cpt("cpt", CptCase::AII, pair.clone(), Base)];
                s.extend(three_bft(Previous));
                s
            }
            "M-FT(best),B-FT" => vec![sweep(Base)?, bft("ft", DomainTag::InDomain, Previous)],
            "triCPT,M-FT(best),B-FT" => vec![
                cpt("cpt", CptCase::AII, triple()?, Base),
                sweep(Previous)?,
                bft("ft", DomainTag::InDomain, Previous),
            ],
            "CPT-A(i),B-FT" | "CPT-A(ii),B-FT" | "CPT-B,B-FT" | "CPT-C1,B-FT" => {
                let case = match name {
                    "CPT-A(i),B-FT" => CptCase::AI,
                    "CPT-A(ii),B-FT" => CptCase::AII,
                    "CPT-B,B-FT" => CptCase::B,
                    _ => CptCase::C1,
                };
                vec![
                    cpt("cpt", case, pair.clone(), Base),
                    bft("ft", DomainTag::InDomain, Previous),
                ]
            }
            "CPT-C2,B-FT" => vec![
                cpt("cpt-phase1", CptCase::C2Phase1, pair.clone(), Base),
                cpt("cpt-phase2", CptCase::C2Phase2, pair.clone(), Previous),
                bft("ft", DomainTag::InDomain, Previous),
            ],
            _ => return Err(PipelineError::UnknownPreset(name.to_string())),
        };
        let recipe = Self {
            name: name.to_string(),
            target: t.clone(),
            baseline: (name != "B-FT").then(|| "B-FT".to_string()),
            stages,
        };
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::InvalidRecipe(format!(
                "recipe {} has no stages",
                self.name
            )));
        }
        if self.target.src == self.target.tgt {
            return Err(PipelineError::InvalidRecipe(format!(
                "target {} has identical languages",
                self.target
            )));
        }
        let mut names = BTreeSet::new();
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(PipelineError::InvalidRecipe(format!("duplicate stage name {}", s.name)));
            }
            if s.name.is_empty()
                || !s
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(PipelineError::InvalidRecipe(format!(
                    "stage name {:?} must be non-empty ASCII letters, digits, '-' or '_'",
                    s.name
                )));
            }
            match (i, s.init) {
                (0, InitFrom::Previous) => {
                    return Err(PipelineError::InvalidRecipe(
                        "the first stage has no previous stage to start from".into(),
                    ))
                }
                (i, init) if i > 0 && init != InitFrom::Previous => {
                    return Err(PipelineError::InvalidRecipe(format!(
                        "stage {} must start from the previous stage, not {init}",
                        s.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Numbered stage summaries, one per line.
    pub fn describe(&self) -> String {
        let mut out = format!("{} target={}\n", self.name, self.target);
        for (i, s) in self.stages.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, s.describe()));
        }
        out
    }

    /// Every language the recipe touches.
    pub fn languages(&self) -> BTreeSet<LangCode> {
        let mut out = BTreeSet::from([self.target.src.clone(), self.target.tgt.clone()]);
        for s in &self.stages {
            match &s.data {
                StageData::Cpt { languages, .. } | StageData::MftBest { languages, .. } => {
                    out.extend(languages.iter().cloned())
                }
                StageData::Ft { directions, .. } => {
                    for d in directions {
                        out.insert(d.src.clone());
                        out.insert(d.tgt.clone());
                    }
                }
            }
        }
        out
    }

    /// Pivot of the recipe's multilingual stage, if any.
    pub fn pivot(&self) -> Option<&LangCode> {
        self.stages.iter().find_map(|s| match &s.data {
            StageData::Ft { pivot, .. } => pivot.as_ref(),
            StageData::MftBest { pivot, .. } => Some(pivot),
            StageData::Cpt { .. } => None,
        })
    }
}
