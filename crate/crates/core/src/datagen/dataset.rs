//! On-disk corpus: one PNG per sample plus a tab-separated index.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{render_word, Lexicon, RenderStyle, WordImageSample};
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

pub const INDEX_FILE: &str = "index.tsv";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(Error::validation("split", format!("unknown split `{other}`"))),
        }
    }
}

/// One line of the index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: u64,
    pub word: String,
    pub char_boxes: Vec<(usize, usize)>,
}

impl IndexEntry {
    fn to_line(&self) -> String {
        let boxes: Vec<String> = self.char_boxes.iter().map(|(s, e)| format!("{s},{e}")).collect();
        format!("{}\t{}\t{}", self.id, self.word, boxes.join(";"))
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| Error::Integrity(format!("{INDEX_FILE} line {lineno}: {what}"));
        let mut parts = line.split('\t');
        let (Some(id), Some(word), Some(boxes), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected three tab-separated fields"));
        };
        let id = id.parse().map_err(|_| bad("id is not an integer"))?;
        let char_boxes = boxes
            .split(';')
            .map(|b| {
                let (s, e) = b.split_once(',').ok_or_else(|| bad("malformed box"))?;
                Ok((
                    s.parse().map_err(|_| bad("malformed box"))?,
                    e.parse().map_err(|_| bad("malformed box"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        if char_boxes.len() != word.len() {
            return Err(bad("box count differs from word length"));
        }
        Ok(IndexEntry {
            id,
            word: word.to_string(),
            char_boxes,
        })
    }
}

/// Deterministic 10% held-out split by id hash.
pub fn is_heldout(id: u64) -> bool {
    let digest = Sha256::digest(id.to_string().as_bytes());
    let v = u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"));
    v % 10 == 0
}

fn image_name(id: u64) -> String {
    format!("{id:06}.png")
}

/// Renders `n_samples` images with balanced word counts into `dir`.
pub fn build_dataset(
    lexicon: &Lexicon,
    n_samples: usize,
    seed: u64,
    height: usize,
    width: usize,
    dir: &Path,
) -> Result<Vec<IndexEntry>> {
    if n_samples == 0 {
        return Err(Error::validation("n_samples", "must be at least 1"));
    }
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    // Round-robin over freshly shuffled passes of the lexicon.
    let mut order_rng = seeded_rng(seed, "dataset-order");
    let mut order = Vec::with_capacity(n_samples);
    while order.len() < n_samples {
        let mut pass: Vec<usize> = (0..lexicon.len()).collect();
        order_rng.shuffle(&mut pass);
        order.extend(pass);
    }
    order.truncate(n_samples);

    let mut entries = Vec::with_capacity(n_samples);
    for (i, &w) in order.iter().enumerate() {
        let id = i as u64;
        let word = &lexicon.words()[w];
        let mut rng = seeded_rng(seed, &format!("sample-{id}"));
        let style = RenderStyle::sample(word.len(), height, width, &mut rng);
        let sample = render_word(word, &style, height, width, &mut rng)?;
        save_png(&sample, &images.join(image_name(id)))?;
        entries.push(IndexEntry {
            id,
            word: word.clone(),
            char_boxes: sample.char_boxes,
        });
    }
    let index_path = dir.join(INDEX_FILE);
    let mut f = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    for e in &entries {
        writeln!(f, "{}", e.to_line()).map_err(|err| Error::io(&index_path, err))?;
    }
    Ok(entries)
}

fn save_png(sample: &WordImageSample, path: &Path) -> Result<()> {
    let (h, w) = (sample.height, sample.width);
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for j in 0..plane {
        for c in 0..3 {
            buf.push((sample.image[c * plane + j] * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Integrity(format!("cannot read {}: {io}", path.display())),
            other => Error::Image {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for (j, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + j] = f32::from(px[c]) / 255.0;
        }
    }
    Ok((out, h, w))
}

/// Parses the index of a dataset directory.
pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| IndexEntry::parse(l, i + 1))
        .collect()
}

/// Selects the ids of `split`, then a fixed prefix of them (in a seed-independent
/// shuffled order) of size `round(fraction * n)`. Returned sorted by id.
pub fn select_ids(entries: &[IndexEntry], split: Split, fraction: f64) -> Result<Vec<u64>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::validation("fraction", format!("{fraction} is outside [0, 1]")));
    }
    let mut ids: Vec<u64> = entries
        .iter()
        .map(|e| e.id)
        .filter(|&id| is_heldout(id) == (split == Split::Heldout))
        .collect();
    ids.sort_unstable();
    let mut rng = seeded_rng(0, "split-fraction");
    rng.shuffle(&mut ids);
    ids.truncate((fraction * ids.len() as f64).round() as usize);
    ids.sort_unstable();
    Ok(ids)
}

/// Loads the samples of one split.
pub fn load_dataset(dir: &Path, split: Split, fraction: f64) -> Result<Vec<WordImageSample>> {
    let entries = read_index(dir)?;
    let ids = select_ids(&entries, split, fraction)?;
    let by_id: std::collections::HashMap<u64, &IndexEntry> = entries.iter().map(|e| (e.id, e)).collect();
    ids.iter()
        .map(|id| {
            let e = by_id[id];
            let path = dir.join(IMAGE_DIR).join(image_name(*id));
            if !path.exists() {
                return Err(Error::Integrity(format!(
                    "image {} referenced by the index is missing",
                    path.display()
                )));
            }
            let (image, height, width) = load_png(&path)?;
            Ok(WordImageSample {
                id: *id,
                image,
                height,
                width,
                word: e.word.clone(),
                char_boxes: e.char_boxes.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> Lexicon {
        Lexicon::new(vec!["cat".into(), "house".into(), "tree".into()]).unwrap()
    }

    #[test]
    fn build_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = build_dataset(&lexicon(), 20, 3, 32, 128, dir.path()).unwrap();
        assert_eq!(entries.len(), 20);
        let mut counts = std::collections::HashMap::new();
        for e in &entries {
            *counts.entry(e.word.clone()).or_insert(0) += 1;
        }
        let (min, max) = (counts.values().min().unwrap(), counts.values().max().unwrap());
        assert!(max - min <= 1);
        let train = load_dataset(dir.path(), Split::Train, 1.0).unwrap();
        let held = load_dataset(dir.path(), Split::Heldout, 1.0).unwrap();
        assert_eq!(train.len() + held.len(), 20);
        assert!(train.iter().all(|s| !held.iter().any(|h| h.id == s.id)));
        // Reloaded pixels equal the rendered ones.
        let s = &train[0];
        let e = &entries[s.id as usize];
        let mut rng = seeded_rng(3, &format!("sample-{}", s.id));
        let style = RenderStyle::sample(e.word.len(), 32, 128, &mut rng);
        let r = render_word(&e.word, &style, 32, 128, &mut rng).unwrap();
        assert_eq!(r.image, s.image);
    }

    #[test]
    fn single_sample_and_deterministic_index() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&lexicon(), 1, 9, 32, 128, a.path()).unwrap();
        build_dataset(&lexicon(), 1, 9, 32, 128, b.path()).unwrap();
        let ia = fs::read(a.path().join(INDEX_FILE)).unwrap();
        let ib = fs::read(b.path().join(INDEX_FILE)).unwrap();
        assert_eq!(ia, ib);
        let all: usize = [Split::Train, Split::Heldout]
            .iter()
            .map(|s| load_dataset(a.path(), *s, 1.0).unwrap().len())
            .sum();
        assert_eq!(all, 1);
    }

    #[test]
    fn missing_image_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let entries = build_dataset(&lexicon(), 12, 1, 32, 128, dir.path()).unwrap();
        let victim = entries.iter().find(|e| !is_heldout(e.id)).unwrap().id;
        fs::remove_file(dir.path().join(IMAGE_DIR).join(image_name(victim))).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), Split::Train, 1.0),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn fraction_selects_stable_prefix() {
        let entries: Vec<IndexEntry> = (0..2300)
            .map(|id| IndexEntry {
                id,
                word: "abc".into(),
                char_boxes: vec![(0, 1), (2, 3), (4, 5)],
            })
            .collect();
        let train = select_ids(&entries, Split::Train, 1.0).unwrap();
        let tenth = select_ids(&entries, Split::Train, 0.1).unwrap();
        assert_eq!(tenth.len(), (train.len() as f64 * 0.1).round() as usize);
        assert_eq!(tenth, select_ids(&entries, Split::Train, 0.1).unwrap());
        assert!(tenth.iter().all(|id| train.contains(id)));
        assert!(select_ids(&entries, Split::Train, 1.5).is_err());
    }

    #[test]
    fn index_line_round_trip() {
        let e = IndexEntry {
            id: 7,
            word: "ab".into(),
            char_boxes: vec![(3, 8), (12, 17)],
        };
        assert_eq!(IndexEntry::parse(&e.to_line(), 1).unwrap(), e);
        assert!(IndexEntry::parse("7\tab\t3,8", 1).is_err());
    }
}
