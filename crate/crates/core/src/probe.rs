//! Frozen-encoder evaluation: a per-frame linear classifier trained on top of
//! fixed frame features, scored by collapsing frame predictions into words.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::checkpoint::load_checkpoint;
use crate::config::Config;
use crate::datagen::{collapse, frame_labels, WordImageSample, CLASSES};
use crate::error::{Error, Result};
use crate::model::{self, Bound, ModelSpec, ParamStore};
use crate::rng::seeded_rng;
use crate::trainer::{make_batch, Adam};
use crate::types::ImageBatch;

/// Anything that maps images to a fixed sequence of frame features.
pub trait FrameEncoder {
    fn frames(&self) -> usize;
    fn dim(&self) -> usize;
    /// Features `[b * frames, dim]`, frame-major within each image.
    fn encode_frames(&self, batch: &ImageBatch) -> Result<Vec<f32>>;
    /// Digest of every parameter; used to check the encoder stays frozen.
    fn fingerprint(&self) -> String;
    fn tag(&self) -> String;
}

/// Which activations the probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTap {
    /// Encoder frames, before the projector.
    Encoder,
    /// Projector output.
    Projector,
}

impl std::str::FromStr for ProbeTap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(ProbeTap::Encoder),
            "projector" => Ok(ProbeTap::Projector),
            other => Err(Error::validation("tap", format!("unknown probe tap `{other}`"))),
        }
    }
}

/// The online encoder (and projector) of a model, never updated.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    spec: ModelSpec,
    params: ParamStore,
    tap: ProbeTap,
    tag: String,
}

const ENCODE_CHUNK: usize = 64;

impl FrozenEncoder {
    pub fn new(config: &Config, params: ParamStore, tap: ProbeTap, tag: impl Into<String>) -> Self {
        FrozenEncoder {
            spec: ModelSpec::from_config(config),
            params,
            tap,
            tag: tag.into(),
        }
    }

    /// Freshly initialised weights, identical to the start of pre-training with `config.seed`.
    pub fn random(config: &Config, tap: ProbeTap) -> Self {
        let spec = ModelSpec::from_config(config);
        let params = model::init_params(&spec, config.seed);
        FrozenEncoder::new(config, params, tap, format!("random-init(seed={})", config.seed))
    }

    /// Online weights of a pre-training checkpoint.
    pub fn from_checkpoint(path: &Path, tap: ProbeTap) -> Result<Self> {
        let manifest = load_checkpoint(path)?;
        let mut params = model::init_params(&ModelSpec::from_config(&manifest.config), manifest.config.seed);
        for i in 0..params.len() {
            let key = format!("online/{}", params.names()[i]);
            let v = manifest
                .arrays
                .get(&key)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks {key}")))?;
            if v.len() != params.values(i).len() {
                return Err(Error::Compatibility(format!("size of {key} differs from the model")));
            }
            params.values_mut(i).copy_from_slice(v);
        }
        let tag = format!("pretrained(step={})", manifest.step);
        Ok(FrozenEncoder::new(&manifest.config, params, tap, tag))
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl FrameEncoder for FrozenEncoder {
    fn frames(&self) -> usize {
        self.spec.frames()
    }

    fn dim(&self) -> usize {
        match self.tap {
            ProbeTap::Encoder => self.spec.encoder_dim(),
            ProbeTap::Projector => self.spec.proj_dim,
        }
    }

    fn encode_frames(&self, batch: &ImageBatch) -> Result<Vec<f32>> {
        let p = Bound::new(&self.params, false);
        let plane = 3 * batch.height * batch.width;
        let mut out = Vec::with_capacity(batch.batch * self.frames() * self.dim());
        for start in (0..batch.batch).step_by(ENCODE_CHUNK) {
            let n = ENCODE_CHUNK.min(batch.batch - start);
            let images = Tensor::new(
                batch.pixels[start * plane..(start + n) * plane].to_vec(),
                &[n, 3, batch.height, batch.width],
            );
            let enc = model::encode(&self.spec, &p, &images, None)?;
            let feats = match self.tap {
                ProbeTap::Encoder => enc.frames,
                ProbeTap::Projector => model::project(&self.spec, &p, &enc.frames),
            };
            out.extend_from_slice(feats.data());
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, _, values) in self.params.iter() {
            h.update(name.as_bytes());
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn tag(&self) -> String {
        self.tag.clone()
    }
}

/// Linear map from standardised frame features to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub dim: usize,
    /// `[CLASSES, dim]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    /// Per-feature standardisation fitted on the probe training frames.
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl LinearProbe {
    fn standardise(&self, feats: &[f32]) -> Vec<f32> {
        feats
            .chunks(self.dim)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.inv_std)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect()
    }

    fn logits(&self, feats: &[f32]) -> Tensor {
        let n = feats.len() / self.dim;
        let x = Tensor::new(self.standardise(feats), &[n, self.dim]);
        let w = Tensor::new(self.weight.clone(), &[CLASSES, self.dim]);
        let b = Tensor::new(self.bias.clone(), &[CLASSES]);
        x.linear(&w, Some(&b))
    }

    /// Arg-max class of every frame row. Ties resolve to the lowest class.
    pub fn predict(&self, feats: &[f32]) -> Vec<usize> {
        let logits = self.logits(feats);
        logits
            .data()
            .chunks(CLASSES)
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_frames: usize,
    pub seed: u64,
}

impl ProbeOptions {
    pub fn from_config(c: &Config) -> Self {
        ProbeOptions {
            epochs: c.probe_epochs,
            lr: c.probe_lr,
            batch_frames: 512,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub word_accuracy: f64,
    /// Mean of `1 - edit_distance / max(len)` over words.
    pub char_accuracy: f64,
    /// Fraction of frames whose class is predicted correctly.
    pub frame_accuracy: f64,
    pub n_eval: usize,
    pub encoder_tag: String,
}

impl ProbeResult {
    /// Single-line `key=value` record.
    pub fn to_record(&self) -> String {
        format!(
            "encoder={}\tn_eval={}\tword_accuracy={:.6}\tchar_accuracy={:.6}\tframe_accuracy={:.6}",
            self.encoder_tag, self.n_eval, self.word_accuracy, self.char_accuracy, self.frame_accuracy
        )
    }
}

fn encode_all(encoder: &dyn FrameEncoder, samples: &[WordImageSample]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(samples.len() * encoder.frames() * encoder.dim());
    for chunk in samples.chunks(ENCODE_CHUNK) {
        let refs: Vec<&WordImageSample> = chunk.iter().collect();
        out.extend(encoder.encode_frames(&make_batch(&refs)?)?);
    }
    Ok(out)
}

fn all_labels(samples: &[WordImageSample], frames: usize) -> Vec<usize> {
    samples.iter().flat_map(|s| frame_labels(s, frames)).collect()
}

/// Fits the probe with cross-entropy against frame labels. The encoder is only
/// read; its fingerprint is checked before and after.
pub fn train_probe(
    encoder: &dyn FrameEncoder,
    samples: &[WordImageSample],
    opts: &ProbeOptions,
) -> Result<LinearProbe> {
    if samples.is_empty() {
        return Err(Error::validation("probe", "no training samples"));
    }
    let before = encoder.fingerprint();
    let (frames, dim) = (encoder.frames(), encoder.dim());
    let feats = encode_all(encoder, samples)?;
    let labels = all_labels(samples, frames);
    let n = labels.len();

    let mut mean = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    for row in feats.chunks(dim) {
        for (j, v) in row.iter().enumerate() {
            mean[j] += f64::from(*v);
            sq[j] += f64::from(*v) * f64::from(*v);
        }
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / n as f64).collect();
    let inv_std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (1.0 / (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    let mut probe = LinearProbe {
        dim,
        weight: vec![0.0; CLASSES * dim],
        bias: vec![0.0; CLASSES],
        mean: mean.iter().map(|m| *m as f32).collect(),
        inv_std,
    };
    let x = probe.standardise(&feats);

    let mut store = ParamStore::new();
    store.insert("weight", &[CLASSES, dim], probe.weight.clone());
    store.insert("bias", &[CLASSES], probe.bias.clone());
    let mut adam = Adam::new(&store);
    let mut rng = seeded_rng(opts.seed, "probe");
    let bs = opts.batch_frames.max(1);
    for _ in 0..opts.epochs {
        let order = rng.permutation(n);
        for chunk in order.chunks(bs) {
            let mut xb = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                xb.extend_from_slice(&x[i * dim..(i + 1) * dim]);
            }
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let p = Bound::new(&store, true);
            let loss = Tensor::new(xb, &[chunk.len(), dim])
                .linear(&p.get("weight"), Some(&p.get("bias")))
                .cross_entropy(&targets);
            let mut grads = loss.backward();
            let g = p.collect(&mut grads);
            drop(p);
            adam.step(&mut store, &g, opts.lr);
        }
    }
    probe.weight = store.values(0).to_vec();
    probe.bias = store.values(1).to_vec();

    assert_eq!(
        before,
        encoder.fingerprint(),
        "encoder parameters changed during probe training"
    );
    Ok(probe)
}

/// Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// `1 - edit_distance / max(len)`, 1 for two empty strings.
pub fn char_score(truth: &str, pred: &str) -> f64 {
    let longest = truth.chars().count().max(pred.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(truth, pred) as f64 / longest as f64
}

/// Decoded word of every sample.
pub fn predict_words(
    encoder: &dyn FrameEncoder,
    probe: &LinearProbe,
    samples: &[WordImageSample],
) -> Result<Vec<String>> {
    let frames = encoder.frames();
    let preds = probe.predict(&encode_all(encoder, samples)?);
    Ok(preds.chunks(frames).map(collapse).collect())
}

/// Scores decoded words against the ground truth.
pub fn eval_word_accuracy(
    encoder: &dyn FrameEncoder,
    probe: &LinearProbe,
    heldout: &[WordImageSample],
) -> Result<ProbeResult> {
    if heldout.is_empty() {
        return Err(Error::validation("heldout", "evaluation set is empty"));
    }
    let frames = encoder.frames();
    let preds = probe.predict(&encode_all(encoder, heldout)?);
    let labels = all_labels(heldout, frames);
    let frame_hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let mut correct = 0usize;
    let mut chars = 0.0;
    for (sample, row) in heldout.iter().zip(preds.chunks(frames)) {
        let word = collapse(row);
        if word == sample.word {
            correct += 1;
        }
        chars += char_score(&sample.word, &word);
    }
    let n = heldout.len() as f64;
    Ok(ProbeResult {
        word_accuracy: correct as f64 / n,
        char_accuracy: chars / n,
        frame_accuracy: frame_hits as f64 / labels.len() as f64,
        n_eval: heldout.len(),
        encoder_tag: encoder.tag(),
    })
}

/// Writes one row per frame: `id`, `frame`, label character (`_` for
/// background) and the feature values. Returns the row count.
pub fn export_embeddings(encoder: &dyn FrameEncoder, samples: &[WordImageSample], path: &Path) -> Result<usize> {
    let frames = encoder.frames();
    let dim = encoder.dim();
    let feats = encode_all(encoder, samples)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        out,
        "id\tframe\tlabel\t{}",
        (0..dim).map(|j| format!("e{j}")).collect::<Vec<_>>().join("\t")
    )
    .map_err(io)?;
    let mut rows = 0;
    for (si, sample) in samples.iter().enumerate() {
        let labels = frame_labels(sample, frames);
        for (f, label) in labels.iter().enumerate() {
            let ch = if *label == 0 {
                '_'
            } else {
                (b'a' + (*label - 1) as u8) as char
            };
            let row = &feats[(si * frames + f) * dim..(si * frames + f + 1) * dim];
            let values: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}\t{f}\t{ch}\t{}", sample.id, values.join("\t")).map_err(io)?;
            rows += 1;
        }
    }
    out.flush().map_err(io)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{render_word, RenderStyle};

    /// One-hot "encoder": frame `f` of image `i` reports the ground-truth label,
    /// stored per image id.
    struct Oracle {
        frames: usize,
        labels: std::collections::HashMap<u64, Vec<usize>>,
    }

    impl FrameEncoder for Oracle {
        fn frames(&self) -> usize {
            self.frames
        }
        fn dim(&self) -> usize {
            CLASSES
        }
        fn encode_frames(&self, batch: &ImageBatch) -> Result<Vec<f32>> {
            let mut out = Vec::new();
            for id in &batch.ids {
                for l in &self.labels[id] {
                    let mut row = vec![0.0; CLASSES];
                    row[*l] = 1.0;
                    out.extend(row);
                }
            }
            Ok(out)
        }
        fn fingerprint(&self) -> String {
            "fixed".into()
        }
        fn tag(&self) -> String {
            "oracle".into()
        }
    }

    fn samples(words: &[&str]) -> Vec<WordImageSample> {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut rng = seeded_rng(i as u64, "s");
                let mut s = render_word(w, &RenderStyle::plain(), 32, 128, &mut rng).unwrap();
                s.id = i as u64;
                s
            })
            .collect()
    }

    fn oracle(samples: &[WordImageSample]) -> Oracle {
        Oracle {
            frames: 32,
            labels: samples.iter().map(|s| (s.id, frame_labels(s, 32))).collect(),
        }
    }

    #[test]
    fn separable_features_are_learned_exactly() {
        let data = samples(&["cab", "dig", "jump", "quiz", "vex", "hoard", "flown", "sky", "twerp"]);
        let enc = oracle(&data);
        let opts = ProbeOptions {
            epochs: 40,
            lr: 0.05,
            batch_frames: 64,
            seed: 1,
        };
        let probe = train_probe(&enc, &data, &opts).unwrap();
        let r = eval_word_accuracy(&enc, &probe, &data).unwrap();
        assert_eq!(r.char_accuracy, 1.0);
        assert_eq!(r.word_accuracy, 1.0);
    }

    #[test]
    fn untrained_probe_is_at_chance() {
        let data = samples(&["cab", "dig", "jump"]);
        let enc = oracle(&data);
        let opts = ProbeOptions {
            epochs: 0,
            lr: 0.05,
            batch_frames: 64,
            seed: 1,
        };
        let probe = train_probe(&enc, &data, &opts).unwrap();
        let r = eval_word_accuracy(&enc, &probe, &data).unwrap();
        assert!((r.char_accuracy - 1.0 / 27.0).abs() <= 0.05);
        assert_eq!(r.word_accuracy, 0.0);
    }

    #[test]
    fn metric_ordering_for_a_single_wrong_letter() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("", "abc"), 3);
        let s = char_score("house", "horse");
        assert!((s - 0.8).abs() < 1e-12);
        assert_eq!(char_score("", ""), 1.0);
    }

    #[test]
    fn accuracy_matches_a_manual_count() {
        let words = [
            "cab", "dig", "jump", "quiz", "vex", "hoard", "flown", "sky", "twerp", "glen",
        ];
        let data = samples(&words);
        let enc = oracle(&data);
        // A probe that recognises every letter except `o`, which it reads as `a`.
        let mut probe = LinearProbe {
            dim: CLASSES,
            weight: vec![0.0; CLASSES * CLASSES],
            bias: vec![0.0; CLASSES],
            mean: vec![0.0; CLASSES],
            inv_std: vec![1.0; CLASSES],
        };
        for c in 0..CLASSES {
            probe.weight[c * CLASSES + c] = 1.0;
        }
        let o = (b'o' - b'a' + 1) as usize;
        let a = 1;
        probe.weight[o * CLASSES + o] = 0.0;
        probe.weight[a * CLASSES + o] = 2.0;
        let r = eval_word_accuracy(&enc, &probe, &data).unwrap();
        // "hoard" -> "haard" and "flown" -> "flawn" are wrong: 8 / 10.
        assert_eq!(r.n_eval, 10);
        assert!((r.word_accuracy - 0.8).abs() < 1e-12);
        let expect_chars = (8.0 + 0.8 + 0.8) / 10.0;
        assert!((r.char_accuracy - expect_chars).abs() < 1e-12);
        assert!(r.word_accuracy <= r.char_accuracy);
    }

    #[test]
    fn empty_heldout_is_rejected() {
        let data = samples(&["cab"]);
        let enc = oracle(&data);
        let probe = train_probe(
            &enc,
            &data,
            &ProbeOptions {
                epochs: 1,
                lr: 0.01,
                batch_frames: 8,
                seed: 0,
            },
        )
        .unwrap();
        assert!(matches!(
            eval_word_accuracy(&enc, &probe, &[]),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn frozen_encoder_is_untouched_and_export_is_deterministic() {
        let config = Config {
            proj_dim: 16,
            ..Config::default()
        };
        let data = samples(&["cab", "dig"]);
        let enc = FrozenEncoder::random(&config, ProbeTap::Projector);
        let before = enc.params().clone();
        let opts = ProbeOptions {
            epochs: 2,
            lr: 0.01,
            batch_frames: 16,
            seed: 0,
        };
        train_probe(&enc, &data, &opts).unwrap();
        assert_eq!(enc.params(), &before);

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
        assert_eq!(export_embeddings(&enc, &data, &a).unwrap(), 2 * 32);
        export_embeddings(&enc, &data, &b).unwrap();
        let text = fs::read_to_string(&a).unwrap();
        assert_eq!(text, fs::read_to_string(&b).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 64);
        let labels = frame_labels(&data[0], 32);
        for (f, line) in lines[1..33].iter().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 3 + 16);
            let expect = if labels[f] == 0 {
                '_'
            } else {
                (b'a' + labels[f] as u8 - 1) as char
            };
            assert_eq!(fields[2], expect.to_string());
        }
    }
}
