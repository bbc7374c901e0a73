//! Trains the tiny transformer on a copy task, keeps checkpoints on disk and
//! reloads the one with the lowest validation loss.
//!
//! cargo run --release --example train_checkpoint

use lrlf::decode::{greedy, EnsembleSpec};
use lrlf::model::train::{best_by_nll, train_stage, StageRun, ValidScores};
use lrlf::model::{Model, ModelCheckpoint, ModelConfig, SeqBatch, TrainConfig};
use lrlf::rng::rng_for;
use rand::Rng as _;

const LID: u32 = 4;
const VOCAB: usize = 24;

fn batch(n: usize, seed: u64) -> (Vec<Vec<u32>>, SeqBatch) {
    let mut rng = rng_for(seed, &[]);
    let mut b = SeqBatch::default();
    let mut seqs = Vec::new();
    for _ in 0..n {
        let s: Vec<u32> = (0..rng.random_range(2..=6))
            .map(|_| rng.random_range(5..VOCAB as u32))
            .collect();
        let enc = [s.as_slice(), &[LID]].concat();
        let dec = [&[LID], s.as_slice()].concat();
        let labels = [s.as_slice(), &[2]].concat();
        b.push(&enc, &dec, &labels);
        seqs.push(s);
    }
    (seqs, b)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let tcfg = TrainConfig {
        max_updates: 300,
        warmup_steps: 50,
        max_lr: 2e-3,
        save_interval: 50,
        keep_last: 3,
        dropout: 0.0,
        label_smoothing: 0.0,
        ..TrainConfig::bilingual()
    };
    let (_, valid) = batch(32, 99);
    let mut data = |u: u64| batch(16, u).1;
    let run = StageRun {
        name: "copy",
        tcfg: &tcfg,
        out_dir: Some(dir.path()),
        vocab_text: None,
    };
    let model = Model::<f32>::init(ModelConfig::tiny(VOCAB), 1)?;
    let out = train_stage(model, &mut data, &run, &mut |m: &Model<f32>| ValidScores {
        nll: m.loss(&valid, 0.0).unwrap().mean(),
        bleu: None,
    })?;
    println!(
        "loss: first {:.3}, last {:.3}",
        out.losses[0],
        out.losses.last().unwrap()
    );

    for c in &out.checkpoints {
        println!(
            "kept update {:>3}: valid nll {:.4} at {}",
            c.checkpoint.meta.updates,
            c.checkpoint.meta.valid_nll.unwrap(),
            c.path.as_ref().unwrap().display()
        );
    }
    let best = best_by_nll(out.checkpoints.iter().map(|c| &c.checkpoint)).unwrap();
    let saved = out
        .checkpoints
        .iter()
        .find(|c| c.checkpoint.meta.updates == best)
        .unwrap();
    let loaded = ModelCheckpoint::load(saved.path.as_ref().unwrap())?;
    assert_eq!(loaded.to_bytes(), saved.checkpoint.to_bytes());
    println!("reloaded update {best}");

    let spec = EnsembleSpec::single(loaded.model());
    let (seqs, _) = batch(5, 1234);
    for s in &seqs {
        let src = [s.as_slice(), &[LID]].concat();
        let t = greedy(&spec, &src, LID, 5..VOCAB as u32, 10)?;
        println!("{s:?} -> {:?}", t.tokens);
    }
    Ok(())
}
