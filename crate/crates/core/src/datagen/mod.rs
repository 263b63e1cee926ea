//! Synthetic word images with character-aligned boxes.

mod dataset;
pub mod font;

pub use dataset::{build_dataset, is_heldout, load_dataset, read_index, IndexEntry, Split, IMAGE_DIR, INDEX_FILE};

use std::collections::HashSet;

use font::{ink, GLYPH_HEIGHT, GLYPH_WIDTH};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

pub const MIN_WORD_LEN: usize = 3;
pub const MAX_WORD_LEN: usize = 10;
/// Smallest horizontal gap between glyphs; at least one frame stride so every
/// gap contains a frame center.
pub const MIN_GAP: usize = 4;
pub const MIN_CONTRAST: f32 = 0.2;
/// Number of probe classes: background plus `a..=z`.
pub const CLASSES: usize = 27;

/// List of distinct lowercase words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    words: Vec<String>,
}

const VOWELS: &[u8] = b"aeiouy";
const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwxz";

impl Lexicon {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::validation("lexicon", "no words"));
        }
        let mut seen = HashSet::new();
        for w in &words {
            if !(MIN_WORD_LEN..=MAX_WORD_LEN).contains(&w.len()) || !w.bytes().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::validation("lexicon", format!("`{w}` is not 3-10 letters a-z")));
            }
            if !seen.insert(w) {
                return Err(Error::validation("lexicon", format!("duplicate word `{w}`")));
            }
        }
        Ok(Lexicon { words })
    }

    /// `size` pronounceable-looking words of uniform length 3-10.
    pub fn generate(size: usize, rng: &mut RandomStream) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut words = Vec::with_capacity(size);
        while words.len() < size {
            let len = MIN_WORD_LEN + rng.below(MAX_WORD_LEN - MIN_WORD_LEN + 1);
            let mut vowel = rng.bernoulli(0.4);
            let mut w = String::with_capacity(len);
            for _ in 0..len {
                let pool = if vowel { VOWELS } else { CONSONANTS };
                w.push(pool[rng.below(pool.len())] as char);
                // Mostly alternate, sometimes cluster.
                if rng.bernoulli(0.8) {
                    vowel = !vowel;
                }
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Lexicon::new(words)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Rendering parameters of one word image.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderStyle {
    pub scale_x: usize,
    pub scale_y: usize,
    pub gap: usize,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
    /// Horizontal and vertical placement as fractions of the free space.
    pub offset: (f32, f32),
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
}

fn luminance(c: [f32; 3]) -> f32 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

fn word_width(len: usize, scale_x: usize, gap: usize) -> usize {
    len * GLYPH_WIDTH * scale_x + len.saturating_sub(1) * gap
}

impl RenderStyle {
    /// Fixed style used by examples and tests.
    pub fn plain() -> Self {
        RenderStyle {
            scale_x: 2,
            scale_y: 3,
            gap: MIN_GAP,
            fg: [0.0; 3],
            bg: [1.0; 3],
            offset: (0.5, 0.5),
            noise: 0.0,
        }
    }

    /// Random style that fits a word of `len` letters into `width`.
    pub fn sample(len: usize, height: usize, width: usize, rng: &mut RandomStream) -> Self {
        let gap = MIN_GAP + rng.below(3);
        let fitting: Vec<usize> = (1..=2).filter(|&s| word_width(len, s, gap) <= width).collect();
        let scale_x = if fitting.is_empty() {
            1
        } else {
            fitting[rng.below(fitting.len())]
        };
        let max_sy = (height / GLYPH_HEIGHT).clamp(1, 3);
        let scale_y = 2.min(max_sy) + rng.below(max_sy - 2.min(max_sy) + 1);
        let (fg, bg) = loop {
            let fg = [
                rng.uniform(0.0, 1.0) as f32,
                rng.uniform(0.0, 1.0) as f32,
                rng.uniform(0.0, 1.0) as f32,
            ];
            let bg = [
                rng.uniform(0.0, 1.0) as f32,
                rng.uniform(0.0, 1.0) as f32,
                rng.uniform(0.0, 1.0) as f32,
            ];
            if (luminance(fg) - luminance(bg)).abs() >= 0.3 {
                break (fg, bg);
            }
        };
        RenderStyle {
            scale_x,
            scale_y,
            gap,
            fg,
            bg,
            offset: (rng.uniform(0.0, 1.0) as f32, rng.uniform(0.0, 1.0) as f32),
            noise: 0.02,
        }
    }
}

/// A rendered word with the horizontal pixel interval `[start, end)` of each glyph.
#[derive(Debug, Clone, PartialEq)]
pub struct WordImageSample {
    pub id: u64,
    /// `[3, height, width]`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub word: String,
    pub char_boxes: Vec<(usize, usize)>,
}

/// Draws `word` onto a `height x width` canvas. `rng` drives the pixel noise.
/// Values are quantised to 8 bits so a saved and reloaded image is identical.
pub fn render_word(
    word: &str,
    style: &RenderStyle,
    height: usize,
    width: usize,
    rng: &mut RandomStream,
) -> Result<WordImageSample> {
    if word.is_empty() || !word.bytes().all(|c| c.is_ascii_lowercase()) {
        return Err(Error::validation("word", format!("`{word}` is not lowercase a-z")));
    }
    if style.scale_x == 0 || style.scale_y == 0 || style.gap < MIN_GAP {
        return Err(Error::validation(
            "style",
            format!("scales must be positive and gap at least {MIN_GAP}"),
        ));
    }
    if (luminance(style.fg) - luminance(style.bg)).abs() < MIN_CONTRAST {
        return Err(Error::validation("style", "foreground/background contrast below 0.2"));
    }
    let n = word.len();
    let (mut sx, mut gap) = (style.scale_x, style.gap);
    if word_width(n, sx, gap) > width {
        sx = 1;
        gap = MIN_GAP;
    }
    let total = word_width(n, sx, gap);
    if total > width {
        return Err(Error::Layout(format!(
            "`{word}` needs {total} px at minimum scale, image is {width} px wide"
        )));
    }
    let sy = style.scale_y.min(height / GLYPH_HEIGHT);
    if sy == 0 {
        return Err(Error::Layout(format!(
            "image height {height} is below the glyph height"
        )));
    }
    let glyph_h = GLYPH_HEIGHT * sy;
    let x0 = ((width - total) as f32 * style.offset.0.clamp(0.0, 1.0)).floor() as usize;
    let y0 = ((height - glyph_h) as f32 * style.offset.1.clamp(0.0, 1.0)).floor() as usize;

    let plane = height * width;
    let mut ink_map = vec![false; plane];
    let mut boxes = Vec::with_capacity(n);
    for (k, ch) in word.chars().enumerate() {
        let left = x0 + k * (GLYPH_WIDTH * sx + gap);
        boxes.push((left, left + GLYPH_WIDTH * sx));
        for y in 0..glyph_h {
            for x in 0..GLYPH_WIDTH * sx {
                if ink(ch, y / sy, x / sx) {
                    ink_map[(y0 + y) * width + left + x] = true;
                }
            }
        }
    }
    let mut image = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for (j, &on) in ink_map.iter().enumerate() {
            let base = if on { style.fg[c] } else { style.bg[c] };
            let noisy = if style.noise > 0.0 {
                base + style.noise * rng.normal() as f32
            } else {
                base
            };
            image[c * plane + j] = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    Ok(WordImageSample {
        id: 0,
        image,
        height,
        width,
        word: word.to_string(),
        char_boxes: boxes,
    })
}

/// Class of every frame: the letter whose box covers the frame's pixel center
/// (`1 + letter index`), else 0 for background.
pub fn frame_labels(sample: &WordImageSample, frames: usize) -> Vec<usize> {
    let stride = sample.width / frames;
    let letters = sample.word.as_bytes();
    (0..frames)
        .map(|f| {
            let center = f * stride + stride / 2;
            sample
                .char_boxes
                .iter()
                .position(|&(s, e)| s <= center && center < e)
                .map_or(0, |k| 1 + (letters[k] - b'a') as usize)
        })
        .collect()
}

/// Merges repeated frame classes and drops background.
pub fn collapse(classes: &[usize]) -> String {
    let mut out = String::new();
    let mut prev = usize::MAX;
    for &c in classes {
        if c != prev && c != 0 {
            out.push((b'a' + (c - 1) as u8) as char);
        }
        prev = c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn render_is_deterministic() {
        let mut style = RenderStyle::plain();
        style.noise = 0.05;
        let a = render_word("cat", &style, 32, 128, &mut seeded_rng(1, "render")).unwrap();
        let b = render_word("cat", &style, 32, 128, &mut seeded_rng(1, "render")).unwrap();
        assert_eq!(a, b);
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn long_word_is_a_layout_error() {
        let word = "a".repeat(30);
        let r = render_word(&word, &RenderStyle::plain(), 32, 128, &mut seeded_rng(0, "render"));
        assert!(matches!(r, Err(Error::Layout(_))));
    }

    #[test]
    fn boxes_are_ordered_and_disjoint() {
        let s = render_word("ab", &RenderStyle::plain(), 32, 128, &mut seeded_rng(0, "render")).unwrap();
        assert_eq!(s.char_boxes.len(), 2);
        assert!(s.char_boxes[0].1 <= s.char_boxes[1].0);
        assert!(s.char_boxes[1].1 <= 128);
    }

    #[test]
    fn low_contrast_rejected() {
        let mut style = RenderStyle::plain();
        style.fg = [0.5; 3];
        style.bg = [0.6; 3];
        assert!(render_word("ab", &style, 32, 128, &mut seeded_rng(0, "render")).is_err());
    }

    #[test]
    fn sampled_styles_fit_every_length() {
        let mut rng = seeded_rng(2, "style");
        for len in MIN_WORD_LEN..=MAX_WORD_LEN {
            for _ in 0..20 {
                let style = RenderStyle::sample(len, 32, 128, &mut rng);
                let word = "m".repeat(len);
                let s = render_word(&word, &style, 32, 128, &mut rng).unwrap();
                assert_eq!(s.char_boxes.len(), len);
                assert!(s.char_boxes.windows(2).all(|w| w[1].0 >= w[0].1 + MIN_GAP));
            }
        }
    }

    #[test]
    fn frame_labels_separate_double_letters() {
        let mut rng = seeded_rng(3, "render");
        for word in ["ll", "book", "abcdefghij"] {
            let style = RenderStyle::sample(word.len(), 32, 128, &mut rng);
            let s = render_word(word, &style, 32, 128, &mut rng).unwrap();
            let labels = frame_labels(&s, 32);
            assert_eq!(collapse(&labels), word);
        }
    }

    #[test]
    fn lexicon_generation() {
        let lex = Lexicon::generate(200, &mut seeded_rng(0, "lexicon")).unwrap();
        assert_eq!(lex.len(), 200);
        assert!(Lexicon::new(vec!["abc".into(), "abc".into()]).is_err());
        assert!(Lexicon::new(vec!["ab".into()]).is_err());
        assert!(Lexicon::new(vec![]).is_err());
    }

    #[test]
    fn collapse_rule() {
        assert_eq!(collapse(&[0, 1, 1, 0, 2, 2, 2, 0, 0]), "ab");
        assert_eq!(collapse(&[3, 0, 3]), "cc");
        assert_eq!(collapse(&[]), "");
    }
}
