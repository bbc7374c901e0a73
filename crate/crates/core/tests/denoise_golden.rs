//! A fixed three-sentence instance noised with a fixed seed, frozen as JSON.

use std::path::Path;

use lrlf::noising::{instance_rng, noise_encoded, NoiseConfig, NoisedExample};

fn example() -> NoisedExample {
    let sentences = vec![
        vec![10, 11, 12, 13, 14, 15],
        vec![20, 21, 22, 23],
        vec![30, 31, 32, 33, 34, 35, 36, 37],
    ];
    noise_encoded(&sentences, 4, 10..40, &NoiseConfig::default(), &mut instance_rng(42, 0))
}

#[test]
fn matches_frozen_example() {
    let got = serde_json::to_string_pretty(&example()).unwrap() + "\n";
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/denoise.json");
    let want = std::fs::read_to_string(path).unwrap();
    assert_eq!(got, want);
}

#[test]
fn repeated_runs_are_identical() {
    assert_eq!(example(), example());
}
