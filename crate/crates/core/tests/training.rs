//! Training loop behaviour on tiny fixed datasets.

use lrlf::model::train::{train_stage, StageRun, ValidScores};
use lrlf::model::{Model, ModelConfig, SeqBatch, TrainConfig};
use lrlf::rng::rng_for;
use rand::Rng as _;

const LID: u32 = 4;
const V: usize = 40;

fn copy_pairs(n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = rng_for(seed, &[]);
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..=8);
            (0..len).map(|_| rng.random_range(8..V as u32)).collect()
        })
        .collect()
}

fn copy_batch(seqs: &[Vec<u32>]) -> SeqBatch {
    let mut b = SeqBatch::default();
    for s in seqs {
        let mut enc = s.clone();
        enc.push(LID);
        let mut dec = vec![LID];
        dec.extend(s);
        let mut labels = s.clone();
        labels.push(2);
        b.push(&enc, &dec, &labels);
    }
    b
}

#[test]
fn overfits_copy_task() {
    let seqs = copy_pairs(32, 5);
    let batch = copy_batch(&seqs);
    let tcfg = TrainConfig {
        dropout: 0.0,
        label_smoothing: 0.0,
        warmup_steps: 100,
        max_lr: 1e-3,
        max_updates: 2000,
        save_interval: 250,
        clip_norm: Some(1.0),
        ..TrainConfig::bilingual()
    };
    let model = Model::<f32>::init(ModelConfig::tiny(V), 11).unwrap();
    let mut data = |_u: u64| batch.clone();
    let run = StageRun {
        name: "copy",
        tcfg: &tcfg,
        out_dir: None,
        vocab_text: None,
    };
    let start = std::time::Instant::now();
    let mut first_below = None;
    let out = train_stage(model, &mut data, &run, &mut |m: &Model<f32>| ValidScores {
        nll: m.loss(&batch, 0.0).unwrap().mean(),
        bleu: None,
    })
    .unwrap();
    for (i, l) in out.losses.iter().enumerate() {
        if *l < 0.1 && first_below.is_none() {
            first_below = Some(i + 1);
        }
    }
    eprintln!(
        "elapsed {:?}, first below 0.1 at {:?}, final {:.4}",
        start.elapsed(),
        first_below,
        out.losses.last().unwrap()
    );
    assert!(first_below.is_some());
    assert!(out.losses[..20].iter().sum::<f64>() > out.losses[180..200].iter().sum::<f64>());
    assert!(out.checkpoints.len() <= 11);
}
