//! Learns a small BPE vocabulary, round-trips text through it and shows the
//! Sinhala zero-width-joiner repair.
//!
//! cargo run --example subword_vocab

use lrlf::corpus::LangCode;
use lrlf::subword::{train_vocab, zwj_repair, VocabConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let lines = [
        "ශ්‍රී ලංකා ප්‍රජාතාන්ත්‍රික සමාජවාදී ජනරජය",
        "the democratic socialist republic of sri lanka",
        "the ministry of public administration",
        "ක්‍රමය යෝජනා කරන ලදී",
    ];
    let langs = [LangCode::new("si")?, LangCode::new("en")?];
    let cfg = VocabConfig {
        target_size: 300,
        ..Default::default()
    };
    let vocab = train_vocab(&lines, &langs, &cfg)?;
    println!("{} tokens ({} specials)", vocab.len(), vocab.num_specials());
    println!("<si> = {}, <en> = {}", vocab.lid(&langs[0])?, vocab.lid(&langs[1])?);

    for text in ["the republic of sri lanka", "ශ්‍රී ලංකා"] {
        let ids = vocab.encode(text)?;
        println!("{text} -> {ids:?} -> {}", vocab.decode(&ids)?);
    }

    // Decoded output sometimes loses the joiner between virama and ra/ya.
    let broken = "ශ් රී ලංකා ක් රමය";
    let fixed = zwj_repair(broken);
    println!(
        "repair: {broken} -> {fixed} ({} joiners added)",
        fixed.matches('\u{200d}').count()
    );
    Ok(())
}
