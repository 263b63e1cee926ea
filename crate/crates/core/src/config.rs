//! Run configuration and its line-oriented `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! [loss]
//! alpha = 0.3
//! beta = 0.1
//! [masking]
//! mask_ratio = 0.7
//! ```
//!
//! Section headers are accepted for readability only; keys are global.
//! Unspecified keys keep their defaults.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Cnn,
    Vit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Patch,
    Block,
    Both,
}

/// Loss used between neighbouring hierarchy levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterLoss {
    Kl,
    InfoNce,
    Re,
}

/// Hierarchy levels of the contrastive embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Frame,
    Subword,
    Word,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Frame, Level::Subword, Level::Word];

    pub fn name(self) -> &'static str {
        match self {
            Level::Frame => "frame",
            Level::Subword => "subword",
            Level::Word => "word",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "frame" => Ok(Level::Frame),
            "subword" => Ok(Level::Subword),
            "word" => Ok(Level::Word),
            other => Err(format!("unknown level `{other}`")),
        }
    }
}

/// Enabled intra-hierarchy levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSet {
    pub frame: bool,
    pub subword: bool,
    pub word: bool,
}

impl LevelSet {
    pub const ALL: LevelSet = LevelSet {
        frame: true,
        subword: true,
        word: true,
    };

    pub fn contains(&self, level: Level) -> bool {
        match level {
            Level::Frame => self.frame,
            Level::Subword => self.subword,
            Level::Word => self.word,
        }
    }
}

impl FromStr for LevelSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut set = LevelSet {
            frame: false,
            subword: false,
            word: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part.parse::<Level>()? {
                Level::Frame => set.frame = true,
                Level::Subword => set.subword = true,
                Level::Word => set.word = true,
            }
        }
        Ok(set)
    }
}

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Level::ALL
            .iter()
            .filter(|l| self.contains(**l))
            .map(|l| l.name())
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// Enabled inter-hierarchy consistency terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterSet {
    pub f2s: bool,
    pub s2w: bool,
}

impl FromStr for InterSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut set = InterSet { f2s: false, s2w: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part {
                "f2s" => set.f2s = true,
                "s2w" => set.s2w = true,
                other => return Err(format!("unknown inter-hierarchy term `{other}`")),
            }
        }
        Ok(set)
    }
}

impl fmt::Display for InterSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.f2s, self.s2w) {
            (true, true) => f.write_str("f2s,s2w"),
            (true, false) => f.write_str("f2s"),
            (false, true) => f.write_str("s2w"),
            (false, false) => f.write_str("none"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub image_height: usize,
    pub image_width: usize,
    /// Weight of the similarity-distribution KL term.
    pub alpha: f64,
    /// Weight of the relational contrastive objective in the total loss.
    pub beta: f64,
    pub tau_info: f64,
    pub tau_kl: f64,
    pub t_subwords: usize,
    pub n_division: usize,
    pub m_group: usize,
    pub mask_ratio: f64,
    pub block_count: usize,
    pub block_width_px: usize,
    pub queue_capacity: usize,
    pub momentum: f64,
    pub encoder_kind: EncoderKind,
    pub vit_patch: usize,
    pub seed: u64,

    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub aug_prob: f64,
    pub levels: LevelSet,
    pub inter: InterSet,
    pub inter_loss: InterLoss,
    pub mask_mode: MaskMode,
    pub coupled: bool,

    pub proj_dim: usize,
    pub vit_width: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,

    pub n_samples: usize,
    pub lexicon_size: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_height: 32,
            image_width: 128,
            alpha: 0.3,
            beta: 0.1,
            tau_info: 0.07,
            tau_kl: 0.1,
            t_subwords: 4,
            n_division: 2,
            m_group: 2,
            mask_ratio: 0.7,
            block_count: 1,
            block_width_px: 16,
            queue_capacity: 256,
            momentum: 0.999,
            encoder_kind: EncoderKind::Cnn,
            vit_patch: 4,
            seed: 0,
            batch_size: 32,
            epochs: 5,
            lr: 1e-3,
            aug_prob: 0.5,
            levels: LevelSet::ALL,
            inter: InterSet { f2s: true, s2w: true },
            inter_loss: InterLoss::Kl,
            mask_mode: MaskMode::Both,
            coupled: false,
            proj_dim: 128,
            vit_width: 192,
            vit_depth: 4,
            vit_heads: 4,
            n_samples: 2000,
            lexicon_size: 200,
            probe_epochs: 30,
            probe_lr: 1e-2,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("cannot parse `{value}` for `{key}`: {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("expected a boolean, got `{other}`")),
    }
}

impl Config {
    /// Frame count of the encoder output sequence.
    pub fn frames(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::Cnn => self.image_width / 4,
            EncoderKind::Vit => self.image_width / self.vit_patch,
        }
    }

    /// Patch grid used for masking, `(rows, cols)`.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.image_height / self.vit_patch, self.image_width / self.vit_patch)
    }

    /// Sets one key from its textual value. Used by the file parser and by overrides.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        match key.trim() {
            "image_height" => self.image_height = parse_value(key, value)?,
            "image_width" => self.image_width = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "tau_info" => self.tau_info = parse_value(key, value)?,
            "tau_kl" => self.tau_kl = parse_value(key, value)?,
            "T_subwords" | "t_subwords" => self.t_subwords = parse_value(key, value)?,
            "N_division" | "n_division" => self.n_division = parse_value(key, value)?,
            "M_group" | "m_group" => self.m_group = parse_value(key, value)?,
            "mask_ratio" => self.mask_ratio = parse_value(key, value)?,
            "block_count" => self.block_count = parse_value(key, value)?,
            "block_width_px" => self.block_width_px = parse_value(key, value)?,
            "queue_capacity" | "K" => self.queue_capacity = parse_value(key, value)?,
            "momentum" | "m" => self.momentum = parse_value(key, value)?,
            "encoder_kind" => {
                self.encoder_kind = match value {
                    "cnn" => EncoderKind::Cnn,
                    "vit" => EncoderKind::Vit,
                    other => return Err(format!("unknown encoder_kind `{other}`")),
                }
            }
            "vit_patch" => self.vit_patch = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "aug_prob" => self.aug_prob = parse_value(key, value)?,
            "levels" => self.levels = value.parse()?,
            "inter" => self.inter = value.parse()?,
            "inter_loss" => {
                self.inter_loss = match value {
                    "kl" => InterLoss::Kl,
                    "infonce" => InterLoss::InfoNce,
                    "re" => InterLoss::Re,
                    other => return Err(format!("unknown inter_loss `{other}`")),
                }
            }
            "mask_mode" | "mask" => {
                self.mask_mode = match value {
                    "patch" => MaskMode::Patch,
                    "block" => MaskMode::Block,
                    "both" => MaskMode::Both,
                    other => return Err(format!("unknown mask_mode `{other}`")),
                }
            }
            "coupled" => self.coupled = parse_bool(value)?,
            "proj_dim" => self.proj_dim = parse_value(key, value)?,
            "vit_width" => self.vit_width = parse_value(key, value)?,
            "vit_depth" => self.vit_depth = parse_value(key, value)?,
            "vit_heads" => self.vit_heads = parse_value(key, value)?,
            "n_samples" => self.n_samples = parse_value(key, value)?,
            "lexicon_size" => self.lexicon_size = parse_value(key, value)?,
            "probe_epochs" => self.probe_epochs = parse_value(key, value)?,
            "probe_lr" => self.probe_lr = parse_value(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses the text format and validates the result.
    pub fn parse(text: &str) -> Result<Config> {
        let mut config = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(Error::Config {
                        line: line_no,
                        reason: format!("malformed section header `{line}`"),
                    });
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    reason: format!("expected `key = value`, got `{line}`"),
                });
            };
            config
                .set(key, value)
                .map_err(|reason| Error::Config { line: line_no, reason })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| Err(Error::validation(field, reason));
        if self.image_height == 0 || self.image_width == 0 {
            return fail("image_width", "image dimensions must be positive".into());
        }
        if self.n_division == 0 || self.image_width % self.n_division != 0 {
            return fail(
                "N_division",
                format!(
                    "image_width {} not divisible by N_division {}",
                    self.image_width, self.n_division
                ),
            );
        }
        if self.vit_patch == 0 || self.image_width % self.vit_patch != 0 || self.image_height % self.vit_patch != 0 {
            return fail(
                "vit_patch",
                format!(
                    "{}x{} image not divisible by patch {}",
                    self.image_height, self.image_width, self.vit_patch
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return fail("mask_ratio", format!("{} outside [0, 1]", self.mask_ratio));
        }
        if self.t_subwords == 0 {
            return fail("T_subwords", "must be at least 1".into());
        }
        if self.m_group == 0 {
            return fail("M_group", "must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size % self.m_group != 0 {
            return fail(
                "batch_size",
                format!(
                    "batch size {} not divisible by M_group {}",
                    self.batch_size, self.m_group
                ),
            );
        }
        if self.queue_capacity < self.batch_size.max(2) {
            return fail(
                "queue_capacity",
                format!(
                    "K = {} smaller than batch size {}",
                    self.queue_capacity, self.batch_size
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail("momentum", format!("{} outside [0, 1]", self.momentum));
        }
        if !(self.alpha >= 0.0) {
            return fail("alpha", "must be non-negative".into());
        }
        if !(self.beta >= 0.0) {
            return fail("beta", "must be non-negative".into());
        }
        if !(self.tau_info > 0.0) {
            return fail("tau_info", "must be positive".into());
        }
        if !(self.tau_kl > 0.0) {
            return fail("tau_kl", "must be positive".into());
        }
        if self.block_width_px > self.image_width {
            return fail(
                "block_width_px",
                format!("{} wider than the image", self.block_width_px),
            );
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return fail("aug_prob", "must lie in [0, 1]".into());
        }
        if self.encoder_kind == EncoderKind::Cnn && (self.image_height % 8 != 0 || self.image_width % 4 != 0) {
            return fail(
                "image_height",
                "cnn encoder needs height divisible by 8 and width by 4".into(),
            );
        }
        let frames = self.frames();
        if frames % self.n_division != 0 {
            return fail(
                "N_division",
                format!("frame count {frames} not divisible by N_division"),
            );
        }
        if frames % self.t_subwords != 0 {
            return fail(
                "T_subwords",
                format!("frame count {frames} not divisible by T_subwords"),
            );
        }
        if self.encoder_kind == EncoderKind::Vit && (self.vit_heads == 0 || self.vit_width % self.vit_heads != 0) {
            return fail("vit_heads", "vit_width must be divisible by vit_heads".into());
        }
        if self.proj_dim == 0 || (self.encoder_kind == EncoderKind::Cnn && self.proj_dim % 2 != 0) {
            return fail("proj_dim", "must be positive and even".into());
        }
        if !(self.lr > 0.0) {
            return fail("lr", "must be positive".into());
        }
        if self.lexicon_size == 0 {
            return fail("lexicon_size", "must be at least 1".into());
        }
        Ok(())
    }

    /// Serialises every key; `Config::parse(&c.to_text())` reproduces `c` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.encoder_kind {
            EncoderKind::Cnn => "cnn",
            EncoderKind::Vit => "vit",
        };
        let inter_loss = match self.inter_loss {
            InterLoss::Kl => "kl",
            InterLoss::InfoNce => "infonce",
            InterLoss::Re => "re",
        };
        let mask_mode = match self.mask_mode {
            MaskMode::Patch => "patch",
            MaskMode::Block => "block",
            MaskMode::Both => "both",
        };
        let _ = writeln!(s, "[image]");
        let _ = writeln!(s, "image_height = {}", self.image_height);
        let _ = writeln!(s, "image_width = {}", self.image_width);
        let _ = writeln!(s, "[loss]");
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "tau_info = {}", self.tau_info);
        let _ = writeln!(s, "tau_kl = {}", self.tau_kl);
        let _ = writeln!(s, "T_subwords = {}", self.t_subwords);
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "inter = {}", self.inter);
        let _ = writeln!(s, "inter_loss = {inter_loss}");
        let _ = writeln!(s, "[permutation]");
        let _ = writeln!(s, "N_division = {}", self.n_division);
        let _ = writeln!(s, "M_group = {}", self.m_group);
        let _ = writeln!(s, "[masking]");
        let _ = writeln!(s, "mask_ratio = {}", self.mask_ratio);
        let _ = writeln!(s, "mask_mode = {mask_mode}");
        let _ = writeln!(s, "block_count = {}", self.block_count);
        let _ = writeln!(s, "block_width_px = {}", self.block_width_px);
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "encoder_kind = {kind}");
        let _ = writeln!(s, "vit_patch = {}", self.vit_patch);
        let _ = writeln!(s, "proj_dim = {}", self.proj_dim);
        let _ = writeln!(s, "vit_width = {}", self.vit_width);
        let _ = writeln!(s, "vit_depth = {}", self.vit_depth);
        let _ = writeln!(s, "vit_heads = {}", self.vit_heads);
        let _ = writeln!(s, "[training]");
        let _ = writeln!(s, "queue_capacity = {}", self.queue_capacity);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "aug_prob = {}", self.aug_prob);
        let _ = writeln!(s, "coupled = {}", self.coupled);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "n_samples = {}", self.n_samples);
        let _ = writeln!(s, "lexicon_size = {}", self.lexicon_size);
        let _ = writeln!(s, "[probe]");
        let _ = writeln!(s, "probe_epochs = {}", self.probe_epochs);
        let _ = writeln!(s, "probe_lr = {}", self.probe_lr);
        s
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c.alpha, 0.3);
        assert_eq!(c.beta, 0.1);
        assert_eq!(c.t_subwords, 4);
        assert_eq!(c.n_division, 2);
        assert_eq!(c.m_group, 2);
        assert_eq!(c.mask_ratio, 0.7);
        assert_eq!(c.block_count, 1);
        assert_eq!(c.vit_patch, 4);
        assert_eq!(c, Config::default());
    }

    #[test]
    fn out_of_range_ratio_names_field() {
        match Config::parse("mask_ratio = 1.5") {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "mask_ratio"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn indivisible_division_rejected() {
        match Config::parse("N_division = 3") {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "N_division"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_names_line() {
        let text = "[loss]\nalpha = 0.3\nbeta = abc\n";
        match Config::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match Config::parse("alpha 0.3") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match Config::parse("\n\nbogus_key = 1") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sections_and_comments() {
        let c = Config::parse("# hi\n[masking]\nmask_ratio = 0.5 # half\nlevels = subword,word\n").unwrap();
        assert_eq!(c.mask_ratio, 0.5);
        assert!(!c.levels.frame && c.levels.subword && c.levels.word);
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.tau_info = 0.123456789012345;
        c.encoder_kind = EncoderKind::Vit;
        c.inter = "s2w".parse().unwrap();
        c.mask_mode = MaskMode::Patch;
        c.coupled = true;
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn queue_smaller_than_batch_rejected() {
        assert!(matches!(
            Config::parse("queue_capacity = 16"),
            Err(Error::Validation { .. })
        ));
        assert!(matches!(Config::parse("batch_size = 3"), Err(Error::Validation { .. })));
    }
}
