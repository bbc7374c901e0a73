//! Toy language families for examples and smoke tests.
//!
//! Every language renders the same sentences of abstract concepts with its
//! own lexicon. A language with [`WordOrder::Reversed`] also reverses the
//! word order, so translating into it needs reordering as well as word
//! substitution. In-domain and out-domain sentences draw from overlapping
//! concept ranges.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordOrder {
    Source,
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLanguage {
    pub code: String,
    pub order: WordOrder,
    /// Consonants used to build this language's words.
    pub consonants: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub languages: Vec<ToyLanguage>,
    pub in_concepts: usize,
    pub out_concepts: usize,
    /// Concepts used by both domains.
    pub shared_concepts: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub train_in: usize,
    pub train_out: usize,
    pub valid: usize,
    pub test: usize,
    pub mono_in: usize,
    pub mono_out: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self::pair(WordOrder::Source)
    }
}

impl ToyConfig {
    /// Two languages `src` and `tgt`; `tgt` uses `order`.
    pub fn pair(order: WordOrder) -> Self {
        Self {
            languages: vec![
                ToyLanguage {
                    code: "src".into(),
                    order: WordOrder::Source,
                    consonants: "ptkbdg".into(),
                },
                ToyLanguage {
                    code: "tgt".into(),
                    order,
                    consonants: "mnlrsv".into(),
                },
            ],
            in_concepts: 32,
            out_concepts: 32,
            shared_concepts: 8,
            min_words: 3,
            max_words: 7,
            train_in: 600,
            train_out: 1200,
            valid: 50,
            test: 100,
            mono_in: 800,
            mono_out: 1600,
            seed: 7,
        }
    }

    /// Adds a third language `aux` that keeps the source order.
    pub fn with_aux(mut self) -> Self {
        self.languages.push(ToyLanguage {
            code: "aux".into(),
            order: WordOrder::Source,
            consonants: "fhjwyz".into(),
        });
        self
    }

    pub fn codes(&self) -> Vec<&str> {
        self.languages.iter().map(|l| l.code.as_str()).collect()
    }
}

/// The lexicons and sentence sampler for one configuration.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    cfg: ToyConfig,
    /// `lexicon[lang][concept]`.
    lexicon: Vec<Vec<String>>,
}

const VOWELS: &[u8] = b"aeiou";

impl ToyWorld {
    pub fn new(cfg: ToyConfig) -> Self {
        let n = cfg.in_concepts + cfg.out_concepts - cfg.shared_concepts;
        let lexicon = cfg
            .languages
            .iter()
            .enumerate()
            .map(|(i, lang)| {
                let mut rng = rng_for(cfg.seed, &[0x1e, i as u64]);
                let cons = lang.consonants.as_bytes();
                let mut seen = HashSet::new();
                let mut words = Vec::with_capacity(n);
                while words.len() < n {
                    let syll = rng.random_range(2..=3);
                    let w: String = (0..syll)
                        .flat_map(|_| {
                            [
                                cons[rng.random_range(0..cons.len())] as char,
                                VOWELS[rng.random_range(0..VOWELS.len())] as char,
                            ]
                        })
                        .collect();
                    if seen.insert(w.clone()) {
                        words.push(w);
                    }
                }
                words
            })
            .collect();
        Self { cfg, lexicon }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    fn concepts(&self, in_domain: bool) -> std::ops::Range<usize> {
        if in_domain {
            0..self.cfg.in_concepts
        } else {
            let start = self.cfg.in_concepts - self.cfg.shared_concepts;
            start..start + self.cfg.out_concepts
        }
    }

    /// A random sentence of concept ids.
    pub fn sample(&self, in_domain: bool, rng: &mut Rng) -> Vec<usize> {
        let len = rng.random_range(self.cfg.min_words..=self.cfg.max_words);
        let c = self.concepts(in_domain);
        (0..len).map(|_| rng.random_range(c.clone())).collect()
    }

    /// Renders a concept sentence in language `lang` (index into the config).
    pub fn render(&self, lang: usize, concepts: &[usize]) -> String {
        let words: Vec<&str> = concepts.iter().map(|&c| self.lexicon[lang][c].as_str()).collect();
        match self.cfg.languages[lang].order {
            WordOrder::Source => words.join(" "),
            WordOrder::Reversed => words.iter().rev().copied().collect::<Vec<_>>().join(" "),
        }
    }

    /// Writes every corpus and a `manifest.toml` under `dir`; returns the
    /// manifest path.
    ///
    /// Each language gets in- and out-domain monolingual text. Every pair
    /// `(0, j)` gets in- and out-domain training bitext plus in-domain valid
    /// and test sets; further pairs `(i, j)` with `i > 0` get in-domain data
    /// only.
    pub fn write(&self, dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(dir.join("mono"))?;
        fs::create_dir_all(dir.join("para"))?;
        let codes = self.cfg.codes();
        let mut manifest = String::new();
        let quoted: Vec<String> = codes.iter().map(|c| format!("{c:?}")).collect();
        writeln!(manifest, "languages = [{}]", quoted.join(", ")).unwrap();
        writeln!(manifest, "needs_zwj_repair = []").unwrap();

        for (li, code) in codes.iter().enumerate() {
            for (dom, n, in_domain) in [("in", self.cfg.mono_in, true), ("out", self.cfg.mono_out, false)] {
                let mut rng = rng_for(self.cfg.seed, &[0x30, li as u64, in_domain as u64]);
                let lines: String = (0..n)
                    .map(|_| self.render(li, &self.sample(in_domain, &mut rng)) + "\n")
                    .collect();
                let rel = format!("mono/{dom}.{code}");
                fs::write(dir.join(&rel), lines)?;
                write!(
                    manifest,
                    "\n[[mono]]\npath = {rel:?}\nlang = {code:?}\ndomain = {dom:?}\n"
                )
                .unwrap();
            }
        }

        for a in 0..codes.len() {
            for b in a + 1..codes.len() {
                let mut sets = vec![("in", "train", self.cfg.train_in, true)];
                if a == 0 {
                    sets.push(("out", "train", self.cfg.train_out, false));
                }
                sets.push(("in", "valid", self.cfg.valid, true));
                sets.push(("in", "test", self.cfg.test, true));
                for (k, (dom, split, n, in_domain)) in sets.into_iter().enumerate() {
                    let mut rng = rng_for(self.cfg.seed, &[0x50, a as u64, b as u64, k as u64]);
                    let (mut sa, mut sb) = (String::new(), String::new());
                    for _ in 0..n {
                        let s = self.sample(in_domain, &mut rng);
                        sa.push_str(&self.render(a, &s));
                        sa.push('\n');
                        sb.push_str(&self.render(b, &s));
                        sb.push('\n');
                    }
                    let prefix = format!("para/{}-{}.{dom}.{split}", codes[a], codes[b]);
                    fs::write(dir.join(format!("{prefix}.{}", codes[a])), sa)?;
                    fs::write(dir.join(format!("{prefix}.{}", codes[b])), sb)?;
                    write!(
                        manifest,
                        "\n[[parallel]]\nprefix = {prefix:?}\nsrc_lang = {:?}\ntgt_lang = {:?}\ndomain = {dom:?}\nsplit = {split:?}\n",
                        codes[a], codes[b]
                    )
                    .unwrap();
                }
            }
        }
        let path = dir.join("manifest.toml");
        fs::write(&path, manifest)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;

    #[test]
    fn reversed_language_reverses_words() {
        let w = ToyWorld::new(ToyConfig::pair(WordOrder::Reversed));
        let s = [0, 1, 2];
        let a: Vec<String> = w.render(0, &s).split(' ').map(String::from).collect();
        let b: Vec<String> = w.render(1, &s).split(' ').map(String::from).collect();
        assert_eq!(a.len(), 3);
        assert_eq!(b[0], w.lexicon[1][2]);
        assert_eq!(b[2], w.lexicon[1][0]);
    }

    #[test]
    fn lexicons_are_disjoint_across_languages() {
        let w = ToyWorld::new(ToyConfig::default().with_aux());
        let all: HashSet<&String> = w.lexicon.iter().flatten().collect();
        assert_eq!(all.len(), w.lexicon.iter().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn written_corpus_loads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            train_in: 5,
            train_out: 7,
            mono_in: 3,
            mono_out: 4,
            valid: 2,
            test: 2,
            ..ToyConfig::default().with_aux()
        };
        let m = load_manifest(&ToyWorld::new(cfg).write(dir.path()).unwrap()).unwrap();
        assert_eq!(m.languages.len(), 3);
        assert_eq!(m.mono.len(), 6);
        // src-tgt and src-aux have four splits, tgt-aux three.
        assert_eq!(m.parallel.len(), 11);
        assert!(!m.needs_zwj_repair(&crate::corpus::LangCode::new("src").unwrap()));
    }
}
