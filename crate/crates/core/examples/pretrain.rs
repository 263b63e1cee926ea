//! Short pre-training run on a fresh corpus, with a checkpoint per epoch.
//!
//! cargo run --release --example pretrain -- /tmp/run

use std::path::PathBuf;

use textssl::datagen::{build_dataset, load_dataset, Lexicon, Split};
use textssl::trainer::train_loop;
use textssl::{seeded_rng, Config};

fn main() -> textssl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("textssl-run"));
    let config = Config {
        n_samples: 160,
        batch_size: 8,
        queue_capacity: 256,
        epochs: 2,
        ..Config::default()
    };
    config.validate()?;

    let data = out.join("data");
    let lexicon = Lexicon::generate(config.lexicon_size, &mut seeded_rng(config.seed, "lexicon"))?;
    build_dataset(
        &lexicon,
        config.n_samples,
        config.seed,
        config.image_height,
        config.image_width,
        &data,
    )?;
    let train = load_dataset(&data, Split::Train, 1.0)?;

    let outcome = train_loop(&config, &train, &out, None)?;
    for r in outcome.reports.iter().step_by(4) {
        println!(
            "step {:>3}  mim {:.4}  rcl {:>7.3}  total {:.4}{}",
            r.step,
            r.mim,
            r.rcl_total,
            r.total,
            if r.contrastive_active {
                ""
            } else {
                "  (queues warming up)"
            }
        );
    }
    for c in &outcome.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}
