//! Recipe files: a preset reference or an explicit stage list, plus run
//! settings.
//!
//! ```toml
//! manifest = "data/manifest.toml"
//!
//! [preset]
//! name = "biCPT,3-B-FT"
//! target = "si-en"
//! scale = 0.02        # shrink the full schedules
//! desk = true         # desk learning rate and regularization
//! [preset.train]
//! max_updates = 2000
//!
//! [settings]
//! seed = 3
//! ```
//!
//! A frozen file carries `[recipe]` with every stage spelled out instead of
//! `[preset]`, so it no longer depends on how presets expand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, LangCode};

use super::{PipelineError, PipelineRecipe, PresetParams, RunSettings, TrainOverrides};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetRef {
    pub name: String,
    pub target: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub third: Option<LangCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot: Option<LangCode>,
    /// Multiplies warmup, update budget and save interval.
    #[serde(default = "one")]
    pub scale: f64,
    /// Use the desk learning rate, regularization and batch size.
    #[serde(default)]
    pub desk: bool,
    /// Applied to every stage after scaling.
    #[serde(default)]
    pub train: TrainOverrides,
}

fn one() -> f64 {
    1.0
}

impl PresetRef {
    pub fn new(name: &str, target: Direction) -> Self {
        Self {
            name: name.to_string(),
            target,
            third: None,
            pivot: None,
            scale: 1.0,
            desk: false,
            train: TrainOverrides::default(),
        }
    }

    pub fn expand(&self) -> Result<PipelineRecipe, PipelineError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(PipelineError::InvalidRecipe(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        let adjust = |t: &crate::model::TrainConfig| {
            let t = if self.desk {
                t.desk(self.scale)
            } else {
                t.scaled(self.scale)
            };
            self.train.apply(&t)
        };
        let mut p = PresetParams::new(self.target.clone());
        p.third = self.third.clone();
        p.pivot = self.pivot.clone();
        p.bilingual = adjust(&p.bilingual);
        p.multilingual = adjust(&p.multilingual);
        p.cpt = adjust(&p.cpt);
        PipelineRecipe::preset(&self.name, &p)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeFile {
    /// Relative paths resolve against the recipe file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<PipelineRecipe>,
    #[serde(default)]
    pub settings: RunSettings,
}

impl RecipeFile {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let de = toml::Deserializer::parse(&text).map_err(|e| PipelineError::Record {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut file: Self = serde_path_to_error::deserialize(de).map_err(|e| PipelineError::Record {
            path: path.to_path_buf(),
            message: format!("{}: {}", e.path(), e.inner().message()),
        })?;
        if let (Some(m), Some(dir)) = (&file.manifest, path.parent()) {
            if m.is_relative() {
                file.manifest = Some(dir.join(m));
            }
        }
        Ok(file)
    }

    /// The stage list this file describes.
    pub fn resolve(&self) -> Result<PipelineRecipe, PipelineError> {
        match (&self.preset, &self.recipe) {
            (Some(p), None) => p.expand(),
            (None, Some(r)) => {
                r.validate()?;
                Ok(r.clone())
            }
            _ => Err(PipelineError::InvalidRecipe(
                "a recipe file needs exactly one of [preset] or [recipe]".into(),
            )),
        }
    }

    /// The same run with every stage spelled out.
    pub fn frozen(&self) -> Result<Self, PipelineError> {
        Ok(Self {
            manifest: self.manifest.clone(),
            preset: None,
            recipe: Some(self.resolve()?),
            settings: self.settings.clone(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipe file serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_file_round_trips_and_resolves_identically() {
        let mut p = PresetRef::new("biCPT,3-B-FT", Direction::parse("src-tgt").unwrap());
        p.scale = 0.02;
        p.desk = true;
        p.train.max_updates = Some(40);
        let file = RecipeFile {
            manifest: Some("/data/manifest.toml".into()),
            preset: Some(p),
            recipe: None,
            settings: RunSettings::default(),
        };
        let frozen = file.frozen().unwrap();
        let back: RecipeFile = toml::from_str(&frozen.to_toml()).unwrap();
        assert_eq!(back, frozen);
        assert_eq!(back.resolve().unwrap(), file.resolve().unwrap());
        assert_eq!(back.resolve().unwrap().stages[1].train.max_updates, 40);
    }

    #[test]
    fn exactly_one_source() {
        assert!(RecipeFile::default().resolve().is_err());
    }
}
