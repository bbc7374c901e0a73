//! Generates a toy corpus, loads its manifest and builds the mixed-domain
//! training set and temperature-sampling weights.
//!
//! cargo run --example corpus_manifest

use lrlf::corpus::{
    load_manifest, temperature_weights, upsample_mix, CleanRules, DomainTag, SamplingConfig, SplitRole,
};
use lrlf::synthetic::{ToyConfig, ToyWorld, WordOrder};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = ToyWorld::new(ToyConfig::pair(WordOrder::Reversed)).write(dir.path())?;
    let m = load_manifest(&path)?;

    println!(
        "languages: {:?}",
        m.languages.iter().map(|l| l.as_str()).collect::<Vec<_>>()
    );
    for e in &m.mono {
        println!("mono      {} {:?}: {} lines", e.lang, e.domain, e.lines.unwrap_or(0));
    }
    for e in &m.parallel {
        println!(
            "parallel  {} {:?} {:?}: {} pairs",
            e.direction(),
            e.domain,
            e.split,
            e.pairs.unwrap_or(0)
        );
    }

    let rules = CleanRules::from_patterns(&["^\\s*$"])?;
    let train = |domain| {
        let e = m
            .parallel
            .iter()
            .find(|e| e.domain == domain && e.split == SplitRole::Train)
            .unwrap();
        m.load_parallel(e, &rules)
    };
    let (inside, outside) = (train(DomainTag::InDomain)?, train(DomainTag::OutDomain)?);
    let mixed = upsample_mix(&inside, &outside, 1)?;
    println!(
        "mixed: {} out-domain + {} up-sampled in-domain = {} pairs",
        outside.len(),
        mixed.len() - outside.len(),
        mixed.len()
    );
    println!("first mixed pair: {:?}", mixed.pairs[0]);

    let sizes = [44_115, 42_773, 1_000];
    let w = temperature_weights(&sizes, &SamplingConfig::default())?;
    println!("sampling weights for sizes {sizes:?} at T=1.5: {w:.4?}");
    Ok(())
}
