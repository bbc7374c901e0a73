//! Manifests at the size of the real government corpora, and the CPT data
//! each case selects from them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lrlf::corpus::{load_manifest, CleanRules, DomainTag, LangCode, ManifestError, SplitRole};
use lrlf::pipeline::{build_cpt_data, CptCase};

const SI_MONO: usize = 44_115;
const EN_MONO: usize = 42_773;
const TRAIN_PAIRS: usize = 74_468;
const VALID_PAIRS: usize = 1_623;

fn lines(path: &Path, tag: &str, n: usize) {
    let mut s = String::with_capacity(n * 16);
    for i in 0..n {
        writeln!(s, "{tag} line {i}").unwrap();
    }
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, s).unwrap();
}

fn write_corpus(dir: &Path) {
    lines(&dir.join("mono/gov.si"), "si", SI_MONO);
    lines(&dir.join("mono/gov.en"), "en", EN_MONO);
    lines(&dir.join("mono/wiki.si"), "si wiki", 300);
    lines(&dir.join("mono/wiki.en"), "en wiki", 200);
    for (split, n) in [("train", TRAIN_PAIRS), ("valid", VALID_PAIRS), ("test", VALID_PAIRS)] {
        lines(&dir.join(format!("para/gov.{split}.si")), "si", n);
        lines(&dir.join(format!("para/gov.{split}.en")), "en", n);
    }
    let mut m = String::from("languages = [\"si\", \"en\"]\n");
    for (path, lang, domain) in [
        ("mono/gov.si", "si", "in"),
        ("mono/gov.en", "en", "in"),
        ("mono/wiki.si", "si", "out"),
        ("mono/wiki.en", "en", "out"),
    ] {
        write!(m, "\n[[mono]]\npath = {path:?}\nlang = {lang:?}\ndomain = {domain:?}\n").unwrap();
    }
    for split in ["train", "valid", "test"] {
        write!(
            m,
            "\n[[parallel]]\nprefix = \"para/gov.{split}\"\nsrc_lang = \"si\"\ntgt_lang = \"en\"\ndomain = \"in\"\nsplit = {split:?}\n"
        )
        .unwrap();
    }
    fs::write(dir.join("manifest.toml"), m).unwrap();
}

fn lc(s: &str) -> LangCode {
    LangCode::new(s).unwrap()
}

#[test]
fn table_scale_manifest_and_cpt_selections() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let m = load_manifest(&dir.path().join("manifest.toml")).unwrap();

    let count = |split| m.parallel.iter().find(|e| e.split == split).unwrap().pairs;
    assert_eq!(count(SplitRole::Train), Some(TRAIN_PAIRS));
    assert_eq!(count(SplitRole::Valid), Some(VALID_PAIRS));
    assert_eq!(count(SplitRole::Test), Some(VALID_PAIRS));
    assert!(m.needs_zwj_repair(&lc("si")));

    let rules = CleanRules::default();
    let langs = [lc("si"), lc("en")];
    let sizes = |case| -> Vec<(String, usize)> {
        build_cpt_data(&m, case, &langs, &rules)
            .unwrap()
            .iter()
            .map(|d| (d.lang.to_string(), d.len()))
            .collect()
    };
    let total = |case| sizes(case).iter().map(|x| x.1).sum::<usize>();

    assert_eq!(
        sizes(CptCase::AI),
        [("si".to_string(), SI_MONO), ("en".to_string(), EN_MONO)]
    );
    assert_eq!(total(CptCase::AII), SI_MONO + EN_MONO + 2 * TRAIN_PAIRS);
    assert_eq!(total(CptCase::B), 500);
    assert_eq!(total(CptCase::C1), SI_MONO + EN_MONO + 500);

    let domains = |case| -> Vec<DomainTag> {
        build_cpt_data(&m, case, &langs, &rules)
            .unwrap()
            .iter()
            .map(|d| d.domain)
            .collect()
    };
    let phase1 = domains(CptCase::C2Phase1);
    let phase2 = domains(CptCase::C2Phase2);
    assert!(phase1.iter().all(|d| !phase2.contains(d)));

    let err = build_cpt_data(&m, CptCase::AI, &[lc("si"), lc("ta")], &rules).unwrap_err();
    assert!(err.to_string().contains("ta"), "{err}");
}

#[test]
fn unknown_language_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let path = dir.path().join("manifest.toml");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replacen("src_lang = \"si\"", "src_lang = \"xx\"", 1);
    fs::write(&path, text).unwrap();
    match load_manifest(&path) {
        Err(ManifestError::UnknownLanguage { field, lang }) => {
            assert_eq!(field, "parallel[0].src_lang");
            assert_eq!(lang, "xx");
        }
        other => panic!("expected an unknown-language error, got {other:?}"),
    }
}

#[test]
fn missing_test_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let path = dir.path().join("manifest.toml");
    let text = fs::read_to_string(&path).unwrap();
    let cut = text.rfind("[[parallel]]").unwrap();
    fs::write(&path, &text[..cut]).unwrap();
    assert!(matches!(load_manifest(&path), Err(ManifestError::Split { .. })));
}
