//! Linear-probe word accuracy of a checkpoint against a random encoder.
//!
//! cargo run --release --example probe -- <data dir> [checkpoint]

use std::path::PathBuf;

use textssl::datagen::{load_dataset, Split};
use textssl::probe::{eval_word_accuracy, train_probe, FrameEncoder, FrozenEncoder, ProbeOptions, ProbeTap};
use textssl::Config;

fn evaluate(enc: &dyn FrameEncoder, data: &std::path::Path, opts: &ProbeOptions) -> textssl::Result<()> {
    let train = load_dataset(data, Split::Train, 1.0)?;
    let heldout = load_dataset(data, Split::Heldout, 1.0)?;
    let probe = train_probe(enc, &train, opts)?;
    println!("{}", eval_word_accuracy(enc, &probe, &heldout)?.to_record());
    Ok(())
}

fn main() -> textssl::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let Some(data) = args.next() else {
        eprintln!("usage: probe <data dir> [checkpoint]");
        std::process::exit(2);
    };
    let config = Config::default();
    let opts = ProbeOptions::from_config(&config);
    evaluate(&FrozenEncoder::random(&config, ProbeTap::Encoder), &data, &opts)?;
    if let Some(ckpt) = args.next() {
        evaluate(&FrozenEncoder::from_checkpoint(&ckpt, ProbeTap::Encoder)?, &data, &opts)?;
    }
    Ok(())
}
