//! Draws the three augmented views of one word image and saves them as PNGs.

use textssl::augment::make_views;
use textssl::datagen::{render_word, RenderStyle};
use textssl::types::ImageBatch;
use textssl::{seeded_rng, Config};

fn save(path: &std::path::Path, chw: &[f32], h: usize, w: usize) {
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((chw[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8).expect("write png");
}

fn main() -> textssl::Result<()> {
    let config = Config::default();
    let (h, w) = (config.image_height, config.image_width);
    let mut rng = seeded_rng(7, "example");
    let sample = render_word("relation", &RenderStyle::plain(), h, w, &mut rng)?;
    let batch = ImageBatch::new(sample.image.clone(), 1, h, w, vec![sample.id])?;

    let views = make_views(&batch, config.aug_prob, &mut seeded_rng(7, "augment"));
    let out = std::env::temp_dir().join("textssl-views");
    std::fs::create_dir_all(&out).expect("create output dir");
    save(&out.join("original.png"), &sample.image, h, w);
    for (name, view, ops) in [
        ("mim", &views.view_mim, &views.provenance[0]),
        ("online", &views.view_online, &views.provenance[1]),
        ("momentum", &views.view_momentum, &views.provenance[2]),
    ] {
        save(&out.join(format!("{name}.png")), view.image(0), h, w);
        let names: Vec<&str> = ops[0].iter().map(|op| op.name()).collect();
        println!("{name:<9} {}", names.join(", "));
    }
    println!("images written to {}", out.display());
    Ok(())
}
