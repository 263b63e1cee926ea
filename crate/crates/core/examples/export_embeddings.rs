//! Dumps per-frame features of a few held-out images for external plotting.

use textssl::datagen::{build_dataset, load_dataset, Lexicon, Split};
use textssl::probe::{export_embeddings, FrozenEncoder, ProbeTap};
use textssl::{seeded_rng, Config};

fn main() -> textssl::Result<()> {
    let config = Config::default();
    let dir = std::env::temp_dir().join("textssl-embed");
    let lexicon = Lexicon::generate(20, &mut seeded_rng(config.seed, "lexicon"))?;
    build_dataset(
        &lexicon,
        60,
        config.seed,
        config.image_height,
        config.image_width,
        &dir.join("data"),
    )?;
    let heldout = load_dataset(&dir.join("data"), Split::Heldout, 1.0)?;

    let enc = FrozenEncoder::random(&config, ProbeTap::Projector);
    let path = dir.join("embeddings.tsv");
    let rows = export_embeddings(&enc, &heldout, &path)?;
    println!("{rows} frame rows from {} images -> {}", heldout.len(), path.display());
    Ok(())
}
