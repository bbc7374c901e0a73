//! Runs a shortened biCPT,3-B-FT recipe on a toy language pair and prints what
//! each stage selected.
//!
//! cargo run --release --example pipeline_run

use lrlf::corpus::{load_manifest, Direction};
use lrlf::decode::DecodeConfig;
use lrlf::pipeline::{run_recipe, PresetRef, RunSettings};
use lrlf::synthetic::{ToyConfig, ToyWorld, WordOrder};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let manifest =
        load_manifest(&ToyWorld::new(ToyConfig::pair(WordOrder::Reversed)).write(&dir.path().join("data"))?)?;

    let mut preset = PresetRef::new("biCPT,3-B-FT", Direction::parse("src-tgt")?);
    preset.scale = 0.02;
    preset.desk = true;
    preset.train.max_updates = Some(500);
    preset.train.save_interval = Some(100);
    preset.train.batch_tokens = Some(256);
    preset.train.max_lr = Some(1e-3);
    let recipe = preset.expand()?;
    print!("{}", recipe.describe());

    let settings = RunSettings {
        decode: DecodeConfig {
            max_output_len: 16,
            ..Default::default()
        },
        valid_lines: Some(20),
        ..Default::default()
    };
    let out = dir.path().join("run");
    let record = run_recipe(&recipe, &manifest, None, &settings, &out)?;
    for s in &record.stages {
        println!(
            "{}: {} checkpoints, selected update {} (valid nll {:.3})",
            s.dir,
            s.checkpoints.len(),
            s.selected.updates,
            s.selected.valid_nll.unwrap_or(f64::NAN)
        );
    }
    for (d, s) in &record.scores {
        println!("{d}: valid BLEU {:.2}, test BLEU {:.2}", s.valid_bleu, s.test_bleu);
    }
    println!("final checkpoint: {}", record.final_checkpoint);
    Ok(())
}
