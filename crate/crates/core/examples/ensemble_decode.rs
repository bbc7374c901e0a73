//! Beam search with a single checkpoint versus an ensemble of the best
//! checkpoints from the same run, on a partly learned reversal task.
//!
//! cargo run --release --example ensemble_decode

use lrlf::decode::{beam_search, best_checkpoint_ensemble, DecodeConfig, EnsembleSpec};
use lrlf::eval::corpus_bleu;
use lrlf::model::train::{train_stage, StageRun, ValidScores};
use lrlf::model::{Model, ModelCheckpoint, ModelConfig, SeqBatch, TrainConfig};
use lrlf::rng::rng_for;
use rand::Rng as _;

const LID: u32 = 4;
const VOCAB: usize = 24;

fn pairs(n: usize, seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut rng = rng_for(seed, &[]);
    (0..n)
        .map(|_| {
            let s: Vec<u32> = (0..rng.random_range(3..=7))
                .map(|_| rng.random_range(5..VOCAB as u32))
                .collect();
            let src = [s.as_slice(), &[LID]].concat();
            (src, s.into_iter().rev().collect())
        })
        .collect()
}

fn batch(pairs: &[(Vec<u32>, Vec<u32>)]) -> SeqBatch {
    let mut b = SeqBatch::default();
    for (src, tgt) in pairs {
        b.push(
            src,
            &[&[LID], tgt.as_slice()].concat(),
            &[tgt.as_slice(), &[2]].concat(),
        );
    }
    b
}

fn bleu(spec: &EnsembleSpec, cfg: &DecodeConfig, data: &[(Vec<u32>, Vec<u32>)]) -> f64 {
    let hyps: Vec<Vec<u32>> = data
        .iter()
        .map(|(src, _)| beam_search(spec, cfg, src, LID, 5..VOCAB as u32).unwrap().tokens)
        .collect();
    let refs: Vec<Vec<u32>> = data.iter().map(|p| p.1.clone()).collect();
    corpus_bleu(&hyps, &refs).unwrap().bleu
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DecodeConfig {
        beam_size: 4,
        max_output_len: 12,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        max_updates: 240,
        warmup_steps: 40,
        max_lr: 2e-3,
        save_interval: 30,
        keep_last: 4,
        dropout: 0.1,
        label_smoothing: 0.1,
        ..TrainConfig::bilingual()
    };
    let (valid, test) = (pairs(40, 1_000), pairs(80, 2_000));
    let mut data = |u: u64| batch(&pairs(16, u));
    let run = StageRun {
        name: "reverse",
        tcfg: &tcfg,
        out_dir: None,
        vocab_text: None,
    };
    let model = Model::<f32>::init(ModelConfig::tiny(VOCAB), 3)?;
    let out = train_stage(model, &mut data, &run, &mut |m: &Model<f32>| ValidScores {
        nll: m.loss(&batch(&valid), 0.0).unwrap().mean(),
        bleu: Some(bleu(&EnsembleSpec::single(m.clone()), &cfg, &valid)),
    })?;
    let ckpts: Vec<ModelCheckpoint> = out.checkpoints.into_iter().map(|c| c.checkpoint).collect();
    for c in &ckpts {
        println!(
            "update {:>3}: valid BLEU {:.2}",
            c.meta.updates,
            c.meta.valid_bleu.unwrap()
        );
    }

    let best = ckpts
        .iter()
        .max_by(|a, b| a.meta.valid_bleu.unwrap().total_cmp(&b.meta.valid_bleu.unwrap()))
        .unwrap();
    let single = EnsembleSpec::single(best.model());
    let (ensemble, k, valid_bleu) = best_checkpoint_ensemble(&ckpts, &mut |s| Ok(bleu(s, &cfg, &valid)))?;
    println!("chose k = {k} (valid BLEU {valid_bleu:.2})");
    println!("test BLEU, best single checkpoint: {:.2}", bleu(&single, &cfg, &test));
    println!(
        "test BLEU, {k}-checkpoint ensemble:  {:.2}",
        bleu(&ensemble, &cfg, &test)
    );
    Ok(())
}
