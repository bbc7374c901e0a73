//! Expands every named recipe into its stage list.
//!
//! cargo run --example presets

use lrlf::corpus::{Direction, LangCode};
use lrlf::pipeline::{PipelineRecipe, PresetParams, PRESET_NAMES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = PresetParams::new(Direction::parse("si-en")?).with_third(LangCode::new("ta")?);
    for name in PRESET_NAMES {
        let recipe = PipelineRecipe::preset(name, &params)?;
        print!("{}", recipe.describe());
        if let Some(b) = &recipe.baseline {
            println!("  compared against {b}");
        }
        println!();
    }
    Ok(())
}
