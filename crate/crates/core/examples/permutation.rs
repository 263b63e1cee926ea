//! Shuffles horizontal patches across a group of images and undoes it on features.

use textssl::permute::{divide_and_shuffle, unshuffle_features};
use textssl::seeded_rng;

fn main() -> textssl::Result<()> {
    // Four one-row "images" of width 8; each pixel stores its own source position.
    let (batch, width, n, m) = (4, 8, 4, 2);
    let images: Vec<f32> = (0..batch * width).map(|i| i as f32).collect();
    let (shuffled, record) = divide_and_shuffle(&images, (batch, 1, 1, width), n, m, &mut seeded_rng(5, "perm"))?;
    for b in 0..batch {
        println!("image {b}: {:?}", &shuffled[b * width..(b + 1) * width]);
    }
    println!("group permutations: {:?}", record.perms);

    // One frame per patch: features of x^e go back to where their pixels came from.
    let frames = n;
    let features: Vec<f32> = (0..batch * frames)
        .map(|row| shuffled[(row / frames) * width + (row % frames) * (width / n)])
        .collect();
    let restored = unshuffle_features(&features, frames, 1, &record)?;
    let expected: Vec<f32> = (0..batch * frames)
        .map(|row| ((row / frames) * width + (row % frames) * 2) as f32)
        .collect();
    assert_eq!(restored, expected);
    println!("unshuffled frame features are back in source order");
    Ok(())
}
