//! Prints patch, block and combined masks as ASCII art, one character per patch.

use textssl::masking::{gen_block_mask, gen_patch_mask, Grid};
use textssl::{seeded_rng, Config};

fn show(name: &str, g: &Grid) {
    println!("{name} ({} of {} cells)", g.count(), g.rows * g.cols);
    for r in 0..g.rows {
        let line: String = (0..g.cols).map(|c| if g.get(r, c) { '#' } else { '.' }).collect();
        println!("  {line}");
    }
}

fn main() -> textssl::Result<()> {
    let config = Config::default();
    let (rows, cols) = config.patch_grid();
    let mut rng = seeded_rng(3, "mask");
    let patch = gen_patch_mask(rows, cols, config.mask_ratio, &mut rng)?;
    let block = gen_block_mask(
        rows,
        config.vit_patch,
        config.image_width,
        config.block_width_px,
        config.block_count,
        &mut rng,
    )?;
    show("patch", &patch);
    show("block", &block.grid);
    show("combined", &patch.union(&block.grid)?);
    Ok(())
}
