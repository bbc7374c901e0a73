//! Builds denoising pre-training pairs: sentence permutation plus Poisson
//! span masking.
//!
//! cargo run --example denoising

use lrlf::corpus::LangCode;
use lrlf::noising::{instance_rng, make_denoising_example, NoiseConfig};
use lrlf::subword::{train_vocab, VocabConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let instance = [
        "the road was opened today .",
        "it links two districts .",
        "work began last year .",
    ];
    let en = LangCode::new("en")?;
    let vocab = train_vocab(
        &instance,
        std::slice::from_ref(&en),
        &VocabConfig {
            target_size: 300,
            ..Default::default()
        },
    )?;
    let cfg = NoiseConfig::default();
    println!("mask ratio {}, span lambda {}", cfg.mask_ratio, cfg.poisson_lambda);

    for index in 0..3 {
        let ex = make_denoising_example(&instance, &en, &vocab, &cfg, &mut instance_rng(7, index))?;
        let show = |ids: &[u32]| {
            ids.iter()
                .map(|&t| vocab.special_name(t).unwrap_or_else(|| vocab.decode_lossy(&[t])))
                .collect::<String>()
        };
        println!("encoder: {}", show(&ex.encoder_input));
        println!("labels:  {}\n", show(&ex.labels));
    }
    Ok(())
}
