//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag, invalid
//! override, missing input). Failures print one line
//! `error: category=<category> message=<text>` to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, Config};
use crate::datagen::{build_dataset, load_dataset, Lexicon, Split, INDEX_FILE};
use crate::error::{Error, Result};
use crate::masking::{gen_block_mask, gen_patch_mask, Grid};
use crate::probe::{
    eval_word_accuracy, export_embeddings, train_probe, FrameEncoder, FrozenEncoder, ProbeOptions, ProbeTap,
};
use crate::rng::seeded_rng;
use crate::trainer::train_loop;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Debug, Parser)]
#[command(
    name = "textssl",
    version,
    about = "Relational contrastive + masked image pre-training for word images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic word-image corpus.
    GenData(Common),
    /// Pre-train an encoder on the training split of a corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a linear frame probe on a frozen encoder and report word accuracy.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long)]
        data: PathBuf,
        /// Fraction of the training split used to fit the probe.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Write per-frame features with their character labels.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "heldout", value_parser = ["train", "heldout"])]
        split: String,
    },
    /// Draw one patch, block and combined mask as PNG files.
    RenderMasks(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Enabled hierarchy levels, e.g. `frame,subword,word`.
    #[arg(long)]
    levels: Option<String>,
    /// Enabled inter-hierarchy terms, e.g. `f2s,s2w`.
    #[arg(long)]
    inter: Option<String>,
    #[arg(long, value_parser = ["kl", "infonce", "re"])]
    inter_loss: Option<String>,
    #[arg(long, value_parser = ["patch", "block", "both"])]
    mask: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    block_count: Option<usize>,
    /// Also use the masked view as the contrastive query input.
    #[arg(long)]
    coupled: bool,
}

#[derive(Debug, Args)]
struct EncoderArgs {
    /// Pre-training checkpoint; without it a randomly initialised encoder is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "encoder", value_parser = ["encoder", "projector"])]
    tap: String,
}

/// Either a usage problem (exit 2) or a runtime failure (exit 1).
enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e)
}

impl Common {
    fn resolve(&self) -> std::result::Result<Config, Failure> {
        let mut config = match &self.config {
            Some(path) => {
                if !path.exists() {
                    return Err(usage(Error::validation(
                        "config",
                        format!("{} does not exist", path.display()),
                    )));
                }
                load_config(path).map_err(usage)?
            }
            None => Config::default(),
        };
        let mut set = |key: &str, value: &str| {
            config
                .set(key, value)
                .map_err(|reason| usage(Error::validation(key, reason)))
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| usage(Error::validation("set", format!("override `{o}` is not key=value"))))?;
            set(k.trim(), v.trim())?;
        }
        let flags: [(&str, Option<String>); 6] = [
            ("levels", self.levels.clone()),
            ("inter", self.inter.clone()),
            ("inter_loss", self.inter_loss.clone()),
            ("mask_mode", self.mask.clone()),
            ("mask_ratio", self.mask_ratio.map(|v| v.to_string())),
            ("block_count", self.block_count.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                set(k, &v)?;
            }
        }
        if self.coupled {
            set("coupled", "true")?;
        }
        if let Some(seed) = self.seed {
            set("seed", &seed.to_string())?;
        }
        config.validate().map_err(usage)?;
        Ok(config)
    }

    fn prepare(&self) -> std::result::Result<Config, Failure> {
        let config = self.resolve()?;
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(RESOLVED_CONFIG);
        fs::write(&path, config.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(config)
    }
}

fn require_dataset(dir: &Path) -> std::result::Result<(), Failure> {
    if dir.join(INDEX_FILE).exists() {
        Ok(())
    } else {
        Err(usage(Error::validation(
            "data",
            format!("{} is not a dataset directory (no {INDEX_FILE})", dir.display()),
        )))
    }
}

fn frozen(config: &Config, args: &EncoderArgs) -> std::result::Result<FrozenEncoder, Failure> {
    let tap: ProbeTap = args.tap.parse().map_err(usage)?;
    match &args.checkpoint {
        Some(path) if !path.exists() => Err(usage(Error::validation(
            "checkpoint",
            format!("{} does not exist", path.display()),
        ))),
        Some(path) => Ok(FrozenEncoder::from_checkpoint(path, tap)?),
        None => Ok(FrozenEncoder::random(config, tap)),
    }
}

fn mask_png(grid: &Grid, patch: usize, path: &Path) -> Result<()> {
    let pixels = grid.upsample(patch, patch);
    let buf: Vec<u8> = pixels.cells.iter().map(|m| if *m { 0 } else { 255 }).collect();
    image::save_buffer(
        path,
        &buf,
        pixels.cols as u32,
        pixels.rows as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenData(common) => {
            let config = common.prepare()?;
            let lexicon = Lexicon::generate(config.lexicon_size, &mut seeded_rng(config.seed, "lexicon"))?;
            let entries = build_dataset(
                &lexicon,
                config.n_samples,
                config.seed,
                config.image_height,
                config.image_width,
                &common.out,
            )?;
            let lex_path = common.out.join("lexicon.txt");
            fs::write(&lex_path, lexicon.words().join("\n") + "\n").map_err(|e| Error::io(&lex_path, e))?;
            println!("wrote {} images to {}", entries.len(), common.out.display());
        }
        Command::Pretrain { common, data, resume } => {
            require_dataset(&data)?;
            if let Some(r) = &resume {
                if !r.exists() {
                    return Err(usage(Error::validation(
                        "resume",
                        format!("{} does not exist", r.display()),
                    )));
                }
            }
            let config = common.prepare()?;
            let samples = load_dataset(&data, Split::Train, 1.0)?;
            let outcome = train_loop(&config, &samples, &common.out, resume.as_deref())?;
            match outcome.reports.last() {
                Some(r) => println!(
                    "trained to step {}; last line: {}",
                    outcome.state.step,
                    r.metrics_line()
                ),
                None => println!("nothing to do: already at step {}", outcome.state.step),
            }
        }
        Command::Probe {
            common,
            encoder,
            data,
            fraction,
        } => {
            require_dataset(&data)?;
            let config = common.prepare()?;
            let enc = frozen(&config, &encoder)?;
            let train = load_dataset(&data, Split::Train, fraction).map_err(|e| match e {
                Error::Validation { .. } => usage(e),
                other => Failure::Runtime(other),
            })?;
            let heldout = load_dataset(&data, Split::Heldout, 1.0)?;
            let probe = train_probe(&enc, &train, &ProbeOptions::from_config(&config))?;
            let result = eval_word_accuracy(&enc, &probe, &heldout)?;
            let path = common.out.join("probe_result.txt");
            fs::write(&path, result.to_record() + "\n").map_err(|e| Error::io(&path, e))?;
            println!("{}", result.to_record());
        }
        Command::ExportEmbeddings {
            common,
            encoder,
            data,
            split,
        } => {
            require_dataset(&data)?;
            let config = common.prepare()?;
            let enc = frozen(&config, &encoder)?;
            let split: Split = split.parse().map_err(usage)?;
            let samples = load_dataset(&data, split, 1.0)?;
            let path = common.out.join("embeddings.tsv");
            let rows = export_embeddings(&enc, &samples, &path)?;
            println!("wrote {rows} rows of width {} to {}", enc.dim(), path.display());
        }
        Command::RenderMasks(common) => {
            let config = common.prepare()?;
            let (rows, cols) = config.patch_grid();
            let mut rng = seeded_rng(config.seed, "render-masks");
            let patch = gen_patch_mask(rows, cols, config.mask_ratio, &mut rng)?;
            let block = gen_block_mask(
                rows,
                config.vit_patch,
                config.image_width,
                config.block_width_px,
                config.block_count,
                &mut rng,
            )?
            .grid;
            let combined = patch.union(&block)?;
            for (name, grid) in [("patch", &patch), ("block", &block), ("combined", &combined)] {
                mask_png(grid, config.vit_patch, &common.out.join(format!("{name}.png")))?;
            }
            println!(
                "masked cells: patch {}, block {}, combined {} of {}",
                patch.count(),
                block.count(),
                combined.count(),
                rows * cols
            );
        }
    }
    Ok(())
}

fn report(e: &Error) {
    let message = e.to_string().replace('\n', " ");
    eprintln!("error: category={} message={message}", e.category());
}

/// Parses `argv` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("error: category=usage message={}", e.kind());
            let _ = e.print();
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            report(&e);
            2
        }
        Err(Failure::Runtime(e)) => {
            report(&e);
            1
        }
    }
}
