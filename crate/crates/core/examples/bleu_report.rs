//! Corpus BLEU on text, and a results table with deltas against a baseline.
//!
//! cargo run --example bleu_report

use std::collections::BTreeMap;

use lrlf::eval::{emit_table, text_bleu};
use lrlf::pipeline::{DirectionScores, RunRecord};

fn record(recipe: &str, pivot: Option<&str>, scores: &[(&str, f64)]) -> RunRecord {
    RunRecord {
        recipe: recipe.into(),
        target: "si-en".into(),
        pivot: pivot.map(String::from),
        baseline: None,
        seed: 1,
        stages: Vec::new(),
        scores: scores
            .iter()
            .map(|&(d, b)| {
                let s = DirectionScores {
                    valid_bleu: b,
                    test_bleu: b,
                };
                (d.to_string(), s)
            })
            .collect::<BTreeMap<_, _>>(),
        final_checkpoint: String::new(),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let refs = [
        "the ministry issued a new circular today",
        "roads in the district will be repaired",
    ];
    let hyps = [
        "the ministry issued a circular today",
        "roads of the district will be repaired soon",
    ];
    println!("{}", text_bleu(&hyps, &refs, false)?);
    println!("{}", text_bleu(&refs, &refs, false)?);
    println!();

    let base = record(
        "B-FT",
        None,
        &[("si-en", 31.2), ("en-si", 24.0), ("si-ta", 19.5), ("ta-si", 18.1)],
    );
    let rows = [
        record("biCPT,3-B-FT", None, &[("si-en", 33.05), ("en-si", 25.3)]),
        record("O2M-FT", Some("si"), &[("si-en", 31.9), ("si-ta", 20.7)]),
        record("M2O-FT", Some("si"), &[("en-si", 24.6), ("ta-si", 17.9)]),
    ];
    let (_, text) = emit_table(&rows, &base)?;
    print!("{text}");
    Ok(())
}
