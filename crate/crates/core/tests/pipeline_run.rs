//! Short multi-stage runs on a small toy corpus.

use std::fs;
use std::path::Path;

use lrlf::corpus::{load_manifest, CorpusManifest, Direction, LangCode};
use lrlf::decode::DecodeConfig;
use lrlf::pipeline::{run_recipe, FtMode, PresetRef, RunRecord, RunSettings, RUN_RECORD_FILE};
use lrlf::synthetic::{ToyConfig, ToyWorld, WordOrder};

fn corpus(dir: &Path, aux: bool) -> CorpusManifest {
    let base = ToyConfig::pair(WordOrder::Reversed);
    let base = if aux { base.with_aux() } else { base };
    let cfg = ToyConfig {
        train_in: 30,
        train_out: 50,
        valid: 4,
        test: 4,
        mono_in: 30,
        mono_out: 40,
        ..base
    };
    load_manifest(&ToyWorld::new(cfg).write(dir).unwrap()).unwrap()
}

fn settings() -> RunSettings {
    RunSettings {
        decode: DecodeConfig {
            max_output_len: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn preset(name: &str, third: Option<&str>) -> PresetRef {
    let mut p = PresetRef::new(name, Direction::parse("src-tgt").unwrap());
    p.third = third.map(|t| LangCode::new(t).unwrap());
    p.scale = 0.02;
    p.desk = true;
    p.train.max_updates = Some(6);
    p.train.save_interval = Some(3);
    p.train.batch_tokens = Some(128);
    p
}

fn run(name: &str, m: &CorpusManifest, out: &Path) -> RunRecord {
    let third = m.languages.iter().any(|l| l.as_str() == "aux").then_some("aux");
    run_recipe(&preset(name, third).expand().unwrap(), m, None, &settings(), out).unwrap()
}

#[test]
fn stages_chain_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(&tmp.path().join("data"), false);
    let out = tmp.path().join("run");
    let rec = run("biCPT,3-B-FT", &m, &out);

    let dirs: Vec<String> = rec.stages.iter().map(|s| s.dir.clone()).collect();
    assert_eq!(
        dirs,
        ["stage_01_cpt", "stage_02_ft-out", "stage_03_ft-mixed", "stage_04_ft-in"]
    );
    for d in &dirs {
        assert!(out.join(d).is_dir());
    }
    for pair in rec.stages.windows(2) {
        assert_eq!(
            pair[1].init_digest, pair[0].selected.digest,
            "{} -> {}",
            pair[0].name, pair[1].name
        );
    }
    for s in &rec.stages {
        // Every stage keeps checkpoints and selects the lowest validation NLL.
        let best = s
            .checkpoints
            .iter()
            .map(|c| c.valid_nll.unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(s.selected.valid_nll, Some(best));
    }
    assert!(rec.stages[0].selected.valid_bleu.is_none());
    assert!(rec.scores.contains_key("src-tgt"));
    assert_eq!(rec.final_checkpoint, rec.stages[3].selected.file);
    assert!(rec.final_checkpoint.starts_with("stage_04_ft-in/"));
    assert!(out.join(&rec.final_checkpoint).is_file());

    let saved = fs::read_to_string(out.join(RUN_RECORD_FILE)).unwrap();
    assert_eq!(saved, rec.to_json());

    // A stage interrupted before writing its record reruns; finished stages
    // are reused.
    fs::remove_file(out.join("stage_04_ft-in/stage.json")).unwrap();
    let again = run("biCPT,3-B-FT", &m, &out);
    assert_eq!(again.to_json(), rec.to_json());

    fs::remove_dir_all(out.join("stage_03_ft-mixed")).unwrap();
    let again = run("biCPT,3-B-FT", &m, &out);
    assert_eq!(again.to_json(), rec.to_json());
}

#[test]
fn single_stage_recipe_records_one_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(&tmp.path().join("data"), false);
    let rec = run("B-FT", &m, &tmp.path().join("run"));
    assert_eq!(rec.stages.len(), 1);
    assert_eq!(rec.baseline, None);
    assert_eq!(rec.seed, 1);
    assert_eq!(
        RunRecord::load(&tmp.path().join("run").join(RUN_RECORD_FILE)).unwrap(),
        rec
    );
}

#[test]
fn best_multilingual_mode_feeds_the_final_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(&tmp.path().join("data"), true);
    let rec = run("M-FT(best),B-FT", &m, &tmp.path().join("run"));
    assert_eq!(rec.stages.len(), 2);
    let sweep = &rec.stages[0].sweep;
    let modes: Vec<FtMode> = sweep.iter().map(|e| e.mode).collect();
    assert_eq!(modes, [FtMode::O2m, FtMode::M2o, FtMode::M2m]);
    let bleu = |e: &lrlf::pipeline::SweepEntry| e.selected.valid_bleu.unwrap();
    let best = sweep.iter().map(bleu).fold(f64::NEG_INFINITY, f64::max);
    let winner = sweep.iter().find(|e| bleu(e) == best).unwrap();
    assert_eq!(rec.stages[0].selected, winner.selected);
    assert_eq!(rec.stages[1].init_digest, winner.selected.digest);
    assert_eq!(rec.pivot.as_deref(), Some("src"));
}
