//! Central finite differences against the analytic backward pass.

use lrlf::model::params::random_params;
use lrlf::model::{Model, ModelConfig, SeqBatch};
use lrlf::rng::rng_for;
use rand::Rng as _;

fn batch() -> SeqBatch {
    let mut b = SeqBatch::default();
    // Second encoder sequence carries a masked PAD position.
    b.push(&[5, 9, 12, 7, 4], &[4, 6, 8, 10], &[6, 8, 10, 2]);
    b.push(&[11, 0, 13, 5], &[5, 14, 3], &[14, 3, 2]);
    b
}

fn loss(m: &Model<f64>, b: &SeqBatch, eps: f64) -> f64 {
    m.loss(b, eps).unwrap().mean()
}

/// Max relative error over sampled entries of every tensor.
fn check(cfg: ModelConfig, samples_per_tensor: usize) -> Vec<(String, f64)> {
    let mut m = Model::<f64>::init(cfg, 1).unwrap();
    m.params = random_params(&m.layout, 3, 0.15);
    let b = batch();
    let smoothing = 0.2;
    let mut grads = vec![0.0; m.params.len()];
    m.loss_and_grad(&b, smoothing, 0.0, None, &mut grads).unwrap();
    let h = 1e-4;
    let mut rng = rng_for(17, &[]);
    let mut out = Vec::new();
    for t in m.layout.tensors.clone() {
        let r = t.range();
        let argmax = r
            .clone()
            .max_by(|&i, &j| grads[i].abs().total_cmp(&grads[j].abs()))
            .unwrap();
        let mut idx = vec![argmax];
        idx.extend((0..samples_per_tensor).map(|_| rng.random_range(r.clone())));
        let mut worst: f64 = 0.0;
        for i in idx {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = loss(&m, &b, smoothing);
            m.params[i] = orig - h;
            let down = loss(&m, &b, smoothing);
            m.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        out.push((t.name.clone(), worst));
    }
    out
}

#[test]
fn gradients_match_finite_differences_small() {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        vocab_size: 16,
        max_len: 8,
        dropout: 0.0,
    };
    for (name, err) in check(cfg, 12) {
        assert!(err < 1e-3, "{name}: relative error {err:e}");
    }
}
