//! Renders a small synthetic corpus and prints what ended up on disk.
//!
//! cargo run --release --example gen_data -- /tmp/words

use std::path::PathBuf;

use textssl::datagen::{build_dataset, load_dataset, Lexicon, Split};
use textssl::{seeded_rng, Config};

fn main() -> textssl::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("textssl-words"));
    let config = Config::default();
    let lexicon = Lexicon::generate(40, &mut seeded_rng(config.seed, "lexicon"))?;
    let entries = build_dataset(
        &lexicon,
        200,
        config.seed,
        config.image_height,
        config.image_width,
        &out,
    )?;
    println!("{} images in {}", entries.len(), out.display());

    let train = load_dataset(&out, Split::Train, 1.0)?;
    let heldout = load_dataset(&out, Split::Heldout, 1.0)?;
    println!("train {} / heldout {}", train.len(), heldout.len());
    for s in train.iter().take(5) {
        let boxes: Vec<String> = s.char_boxes.iter().map(|(a, b)| format!("{a}..{b}")).collect();
        println!("{:06} {:<10} {}", s.id, s.word, boxes.join(" "));
    }
    Ok(())
}
