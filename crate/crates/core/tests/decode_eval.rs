//! Decoding and evaluation contracts on small random models.

use std::collections::BTreeMap;

use lrlf::corpus::LangCode;
use lrlf::decode::{
    beam_search, distribution, ensemble_step, translate_file, DecodeConfig, EnsembleSource, EnsembleSpec, Translator,
};
use lrlf::eval::{emit_table, validation_likelihood};
use lrlf::model::params::random_params;
use lrlf::model::{Model, ModelConfig};
use lrlf::noising::Seq2SeqExample;
use lrlf::pipeline::{DirectionScores, RunRecord};
use lrlf::subword::{train_vocab, zwj_repair, VocabConfig};
use proptest::prelude::*;

fn random_model(vocab: usize, seed: u64, std: f64) -> Model<f32> {
    let cfg = ModelConfig {
        dropout: 0.0,
        max_len: 24,
        ..ModelConfig::tiny(vocab)
    };
    let mut m = Model::<f32>::init(cfg, seed).unwrap();
    m.params = random_params(&m.layout, seed, std);
    m
}

#[test]
fn three_member_distribution_is_the_mean_of_members() {
    let models: Vec<Model<f32>> = (0..3).map(|s| random_model(12, 70 + s, 0.4)).collect();
    let src = [6, 7, 8, 9, 4];
    let prefix = [5, 10, 11];
    let spec = EnsembleSpec::new(models.clone(), EnsembleSource::MultiModel).unwrap();
    let got = ensemble_step(&spec, &src, &prefix, false).unwrap();

    let member: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            let enc = m.encode(&src).unwrap();
            let mut cache = m.new_cache();
            let mut last = Vec::new();
            for &t in &prefix {
                last = m.step(&enc, &mut cache, t).unwrap();
            }
            distribution(&last)
        })
        .collect();
    for j in 0..got.len() {
        let mean = (member[0][j] + member[1][j] + member[2][j]) / 3.0;
        assert!((got[j] - mean).abs() < 1e-15, "entry {j}");
    }
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // The members genuinely disagree.
    assert!((member[0][10] - member[1][10]).abs() > 1e-3);
}

#[test]
fn masked_positions_do_not_affect_outputs() {
    let m = random_model(12, 3, 0.4);
    let mask = [true, false, true, false, true];
    let a = m.encode_masked(&[6, 7, 8, 9, 4], &mask).unwrap();
    let b = m.encode_masked(&[6, 11, 8, 0, 4], &mask).unwrap();
    let (mut ca, mut cb) = (m.new_cache(), m.new_cache());
    for t in [5, 10, 7] {
        assert_eq!(m.step(&a, &mut ca, t).unwrap(), m.step(&b, &mut cb, t).unwrap());
    }
}

#[test]
fn beam_output_ends_in_eos_and_scores_only_fall() {
    let spec = EnsembleSpec::single(random_model(12, 9, 0.4));
    let cfg = DecodeConfig {
        max_output_len: 12,
        ..Default::default()
    };
    for seed in 0..20u32 {
        let src = [6 + seed % 6, 7, 4];
        let out = beam_search(&spec, &cfg, &src, 5, 6..12).unwrap();
        assert!(out.finished);
        assert!(out.score <= 0.0);
        let mut prefix = vec![5];
        let mut running = 0.0;
        for &t in out.tokens.iter().chain([lrlf::subword::EOS].iter()) {
            let p = ensemble_step(&spec, &src, &prefix, false).unwrap()[t as usize];
            let next = running + p.ln();
            assert!(next <= running);
            running = next;
            prefix.push(t);
        }
        assert!((running - out.score).abs() < 1e-9);
    }
}

#[test]
fn uniform_model_costs_ln_v_per_token() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::tiny(20)
    };
    let mut m = Model::<f32>::init(cfg, 1).unwrap();
    // Zero token embeddings make every logit zero.
    let tokens = m.layout.get("embed.tokens").unwrap().range();
    m.params[tokens].iter_mut().for_each(|v| *v = 0.0);
    let valid = vec![
        Seq2SeqExample::new(&[6, 7, 8], 4, &[9, 10], 5),
        Seq2SeqExample::new(&[11], 4, &[12, 13, 14, 15], 5),
    ];
    let nll = validation_likelihood(&m, &valid).unwrap();
    assert!((nll - 20f64.ln()).abs() < 1e-6, "{nll}");
}

fn vocab() -> lrlf::Vocab {
    let lines = ["ක්‍රම යෝජනා", "the plan works", "ශ්‍රී ලංකා", "a new road"];
    let langs = [LangCode::new("si").unwrap(), LangCode::new("en").unwrap()];
    train_vocab(&lines, &langs, &VocabConfig::default()).unwrap()
}

#[test]
fn translate_file_keeps_line_structure() {
    let v = vocab();
    let spec = EnsembleSpec::single(random_model(v.len(), 4, 0.4));
    let cfg = DecodeConfig {
        max_output_len: 8,
        ..Default::default()
    };
    let (si, en) = (LangCode::new("si").unwrap(), LangCode::new("en").unwrap());
    let tr = Translator {
        spec: &spec,
        cfg: &cfg,
        vocab: &v,
        src_lang: &en,
        tgt_lang: &si,
        repair_zwj: true,
    };
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("in.txt"), dir.path().join("out.txt"));

    std::fs::write(&input, "").unwrap();
    let s = translate_file(&tr, &input, &output).unwrap();
    assert_eq!(s.lines, 0);
    assert_eq!(std::fs::read(&output).unwrap(), b"");

    std::fs::write(&input, "the plan\n\na new road\nworks\n").unwrap();
    let s = translate_file(&tr, &input, &output).unwrap();
    assert_eq!(s.lines, 4);
    let text = std::fs::read_to_string(&output).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        assert_eq!(zwj_repair(line), line);
    }
}

fn record(name: &str, pivot: Option<&str>, scores: &[(&str, f64)]) -> RunRecord {
    RunRecord {
        recipe: name.into(),
        target: "si-en".into(),
        pivot: pivot.map(String::from),
        baseline: None,
        seed: 1,
        stages: Vec::new(),
        scores: scores
            .iter()
            .map(|&(d, s)| {
                (
                    d.to_string(),
                    DirectionScores {
                        valid_bleu: s,
                        test_bleu: s,
                    },
                )
            })
            .collect::<BTreeMap<_, _>>(),
        final_checkpoint: String::new(),
    }
}

#[test]
fn table_marks_uncovered_directions() {
    let base = record("B-FT", None, &[("si-en", 30.0), ("si-ta", 29.75), ("ta-en", 25.0)]);
    let o2m = record("O2M-FT", Some("si"), &[("si-en", 30.5), ("si-ta", 31.16)]);
    let (table, text) = emit_table(&[o2m], &base).unwrap();
    let row = &table.rows[0];
    assert_eq!(row.cells["ta-en"].score, None);
    assert!((row.cells["si-ta"].delta.unwrap() - 1.41).abs() < 1e-9);
    let line = text.lines().find(|l| l.contains("O2M-FT")).unwrap();
    assert!(line.contains("N/A"), "{line}");
    assert!(line.contains("+1.41"), "{line}");
}

#[test]
fn ranking_keeps_only_improvements() {
    let base = record("B-FT", None, &[("si-en", 30.0), ("si-ta", 20.0)]);
    let rows = [
        record("A", None, &[("si-en", 29.0), ("si-ta", 21.0)]),
        record("B", None, &[("si-en", 30.5), ("si-ta", 22.0)]),
        record("C", None, &[("si-en", 31.0), ("si-ta", 20.0)]),
        record("D", None, &[("si-en", 30.25), ("si-ta", 20.5)]),
    ];
    let (table, text) = emit_table(&rows, &base).unwrap();
    let names = |d: &str| table.top[d].iter().map(|x| x.0.as_str()).collect::<Vec<_>>();
    assert_eq!(names("si-en"), ["C", "B", "D"]);
    assert_eq!(names("si-ta"), ["B", "A", "D"]);
    assert!(text.contains("si-en: C (+1.00), B (+0.50), D (+0.25)"), "{text}");

    let (table, text) = emit_table(&rows[..1], &base).unwrap();
    assert!(table.top["si-en"].is_empty());
    assert!(text.contains("si-en: none"), "{text}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn combine_is_order_free(a in prop::collection::vec(0.01f64..1.0, 6), b in prop::collection::vec(0.01f64..1.0, 6), c in prop::collection::vec(0.01f64..1.0, 6), log in any::<bool>()) {
        let norm = |v: Vec<f64>| { let z: f64 = v.iter().sum(); v.into_iter().map(|x| x / z).collect::<Vec<_>>() };
        let (a, b, c) = (norm(a), norm(b), norm(c));
        let x = lrlf::decode::combine(&[a.clone(), b.clone(), c.clone()], log);
        let y = lrlf::decode::combine(&[c.clone(), a.clone(), b.clone()], log);
        prop_assert_eq!(&x, &y);
        prop_assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(lrlf::decode::combine(&[a.clone(), a.clone(), a.clone()], log), a);
    }
}
