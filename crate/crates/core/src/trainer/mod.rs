//! The decoupled training step and the epoch loop around it.
//!
//! One step: three augmented views; the masked view trains reconstruction
//! through the shared online encoder; the two unmasked views and the patch-
//! shuffled online view train the relational contrastive objective against the
//! momentum branch and the negative queues.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::augment::make_views;
use crate::autograd::Tensor;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use crate::config::{Config, Level};
use crate::datagen::WordImageSample;
use crate::error::{Error, Result};
use crate::losses::{
    hierarchical_loss, inter_level_loss, mim_loss, rcl_total, total_loss, LevelBatch, RelationalParams,
};
use crate::masking::{sample_mask, BatchMask};
use crate::model::{self, Bound, ModelSpec, ParamStore};
use crate::permute::divide_and_shuffle;
use crate::queues::{NegativeQueue, QueueSet};
use crate::rng::{seeded_rng, RandomStream};
use crate::types::{ImageBatch, LevelReport, LossReport};

pub const METRICS_FILE: &str = "metrics.tsv";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// First and second moment estimates, one buffer per online parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = (0..store.len()).map(|i| vec![0.0; store.values(i).len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let step = (lr * (1.0 - ADAM_BETA2.powi(t)).sqrt() / (1.0 - ADAM_BETA1.powi(t))) as f32;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in store
                .values_mut(i)
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Cosine-decayed learning rate for `step` of `total`.
pub fn learning_rate(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Random streams consumed by a step.
#[derive(Debug, Clone)]
pub struct StepStreams {
    pub augment: RandomStream,
    pub mask: RandomStream,
    pub perm: RandomStream,
}

impl StepStreams {
    fn new(seed: u64) -> Self {
        StepStreams {
            augment: seeded_rng(seed, "augment"),
            mask: seeded_rng(seed, "mask"),
            perm: seeded_rng(seed, "perm"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: Config,
    pub spec: ModelSpec,
    pub online: ParamStore,
    pub momentum: ParamStore,
    pub adam: Adam,
    pub queues: QueueSet,
    /// Steps completed so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: u64,
    /// Length of the learning-rate schedule.
    pub total_steps: u64,
    pub streams: StepStreams,
    /// When set, momentum embeddings are not enqueued.
    pub freeze_queues: bool,
}

impl TrainState {
    pub fn new(config: &Config, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let spec = ModelSpec::from_config(config);
        let online = model::init_params(&spec, config.seed);
        let momentum = model::momentum_params(&online);
        Ok(TrainState {
            adam: Adam::new(&online),
            queues: QueueSet::new(config.queue_capacity, config.proj_dim)?,
            config: config.clone(),
            spec,
            online,
            momentum,
            step: 0,
            epoch: 0,
            total_steps,
            streams: StepStreams::new(config.seed),
            freeze_queues: false,
        })
    }

    pub fn to_manifest(&self) -> CheckpointManifest {
        let mut arrays = ParamStore::new();
        for (prefix, store) in [("online", &self.online), ("momentum", &self.momentum)] {
            for (name, shape, values) in store.iter() {
                arrays.insert(&format!("{prefix}/{name}"), shape, values.to_vec());
            }
        }
        for (prefix, moments) in [("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (i, values) in moments.iter().enumerate() {
                let name = &self.online.names()[i];
                arrays.insert(&format!("{prefix}/{name}"), self.online.shape(i), values.clone());
            }
        }
        for q in &self.queues.queues {
            arrays.insert(&format!("queue/{}", q.level().name()), &[q.len(), q.dim()], q.entries());
        }
        arrays.insert("schedule/total_steps", &[2], split_u64(self.total_steps).to_vec());
        CheckpointManifest {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            rng: vec![
                ("augment".into(), self.streams.augment.state()),
                ("mask".into(), self.streams.mask.state()),
                ("perm".into(), self.streams.perm.state()),
            ],
            arrays,
        }
    }

    pub fn from_manifest(manifest: &CheckpointManifest) -> Result<Self> {
        let mut state = TrainState::new(&manifest.config, 0)?;
        let missing = |name: &str| Error::Compatibility(format!("checkpoint lacks array {name}"));
        let fill = |store: &mut ParamStore, prefix: &str| -> Result<()> {
            for i in 0..store.len() {
                let key = format!("{prefix}/{}", store.names()[i]);
                let pos = manifest.arrays.position(&key).ok_or_else(|| missing(&key))?;
                if manifest.arrays.shape(pos) != store.shape(i) {
                    return Err(Error::Compatibility(format!("shape of {key} differs from the model")));
                }
                store.values_mut(i).copy_from_slice(manifest.arrays.values(pos));
            }
            Ok(())
        };
        fill(&mut state.online, "online")?;
        fill(&mut state.momentum, "momentum")?;
        for (prefix, moments) in [("adam_m", &mut state.adam.m), ("adam_v", &mut state.adam.v)] {
            for (i, buf) in moments.iter_mut().enumerate() {
                let key = format!("{prefix}/{}", state.online.names()[i]);
                let values = manifest.arrays.get(&key).ok_or_else(|| missing(&key))?;
                if values.len() != buf.len() {
                    return Err(Error::Compatibility(format!("size of {key} differs from the model")));
                }
                buf.copy_from_slice(values);
            }
        }
        for level in Level::ALL {
            let key = format!("queue/{}", level.name());
            let entries = manifest.arrays.get(&key).ok_or_else(|| missing(&key))?;
            *state.queues.get_mut(level) =
                NegativeQueue::from_entries(level, state.config.queue_capacity, state.config.proj_dim, entries)?;
        }
        let total = manifest
            .arrays
            .get("schedule/total_steps")
            .ok_or_else(|| missing("schedule/total_steps"))?;
        state.total_steps = join_u64(total)?;
        for (label, st) in &manifest.rng {
            let stream = RandomStream::from_state(*st);
            match label.as_str() {
                "augment" => state.streams.augment = stream,
                "mask" => state.streams.mask = stream,
                "perm" => state.streams.perm = stream,
                other => return Err(Error::Integrity(format!("unknown random stream `{other}`"))),
            }
        }
        state.step = manifest.step;
        state.epoch = manifest.epoch;
        state.adam.t = manifest.step;
        Ok(state)
    }
}

// A u64 kept exactly in two f32 words of 32 bits each.
fn split_u64(v: u64) -> [f32; 2] {
    [f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

fn join_u64(words: &[f32]) -> Result<u64> {
    match words {
        [lo, hi] => Ok(u64::from(lo.to_bits()) | (u64::from(hi.to_bits()) << 32)),
        _ => Err(Error::Integrity("malformed schedule length".into())),
    }
}

fn to_f64_rows(t: &Tensor) -> Array2<f64> {
    let d = t.dim(t.rank() - 1);
    let rows = t.numel() / d;
    Array2::from_shape_vec((rows, d), t.data().iter().map(|v| f64::from(*v)).collect()).expect("row-major")
}

fn to_f32(a: &Array2<f64>, scale: f64) -> Vec<f32> {
    a.iter().map(|v| (v * scale) as f32).collect()
}

/// Scalar node whose gradient with respect to each parent is a precomputed
/// coefficient array, scaled by the incoming gradient.
fn fused_objective(value: f64, parts: Vec<(Tensor, Vec<f32>)>) -> Tensor {
    let (parents, coefs): (Vec<Tensor>, Vec<Vec<f32>>) = parts.into_iter().unzip();
    Tensor::from_op(
        vec![value as f32],
        vec![],
        parents,
        Box::new(move |g| {
            coefs
                .iter()
                .map(|c| Some(c.iter().map(|v| v * g[0]).collect()))
                .collect()
        }),
    )
}

/// Per-level embeddings `[b * slots, d]` of a projected feature sequence.
fn level_embeddings(spec: &ModelSpec, p: &Bound<'_>, feats: &Tensor, want: [bool; 3]) -> Result<[Option<Tensor>; 3]> {
    let mut out = [None, None, None];
    for level in Level::ALL {
        if want[level.index()] {
            out[level.index()] = Some(model::predict_level(spec, p, feats, level)?);
        }
    }
    Ok(out)
}

fn query_view(a: &Option<Array2<f64>>) -> ArrayView2<'_, f64> {
    a.as_ref().expect("query computed").view()
}

/// Loss report, online gradients and momentum keys of one step. Only the
/// random streams of `state` advance.
fn forward_backward(state: &mut TrainState, batch: &ImageBatch) -> Result<(LossReport, Vec<Vec<f32>>, [Tensor; 3])> {
    let cfg = state.config.clone();
    let spec = state.spec.clone();
    let (b, _, h, w) = batch.shape();
    if h != cfg.image_height || w != cfg.image_width {
        return Err(Error::validation(
            "batch",
            format!(
                "{h}x{w} images, config expects {}x{}",
                cfg.image_height, cfg.image_width
            ),
        ));
    }
    if b == 0 || b % cfg.m_group != 0 {
        return Err(Error::validation(
            "M_group",
            format!("batch size {b} is not divisible by {}", cfg.m_group),
        ));
    }

    let views = make_views(batch, cfg.aug_prob, &mut state.streams.augment);
    let masks = BatchMask::new(
        (0..b)
            .map(|_| sample_mask(&cfg, spec.stage_strides(), &mut state.streams.mask))
            .collect::<Result<_>>()?,
    );
    let (shuffled, record) = divide_and_shuffle(
        &views.view_online.pixels,
        views.view_online.shape(),
        cfg.n_division,
        cfg.m_group,
        &mut state.streams.perm,
    )?;

    let online = Bound::new(&state.online, true);
    let mut parts: Vec<(Tensor, Vec<f32>)> = Vec::new();

    // Reconstruction of the masked view.
    let enc_mim = model::encode(&spec, &online, &views.view_mim.to_tensor(), Some(&masks))?;
    let pred = model::reconstruct(&spec, &online, &enc_mim, Some(&masks));
    let pred64: Vec<f64> = pred.data().iter().map(|v| f64::from(*v)).collect();
    let target64: Vec<f64> = views.view_mim.pixels.iter().map(|v| f64::from(*v)).collect();
    let mim = mim_loss(&pred64, &target64, &masks.pixels(), h * w)?;
    parts.push((pred.clone(), mim.dpred.iter().map(|v| *v as f32).collect()));

    // Momentum keys, also the positives of the contrastive terms.
    let keys = {
        let mom = Bound::new(&state.momentum, false);
        let enc = model::encode(&spec, &mom, &views.view_momentum.to_tensor(), None)?;
        let feats = model::project(&spec, &mom, &enc.frames);
        level_embeddings(&spec, &mom, &feats, [true; 3])?.map(|k| k.expect("all levels requested"))
    };

    let levels = cfg.levels;
    let want_q = [
        levels.frame || cfg.inter.f2s,
        levels.subword || cfg.inter.s2w,
        levels.word,
    ];
    let active = state.queues.warm() && want_q.iter().any(|x| *x);
    let mut report = LossReport {
        step: state.step,
        contrastive_active: active,
        mim: mim.value,
        ..LossReport::default()
    };

    if active {
        let params = RelationalParams::from_config(&cfg);
        let frames_in = if cfg.coupled {
            enc_mim.frames.clone()
        } else {
            model::encode(&spec, &online, &views.view_online.to_tensor(), None)?.frames
        };
        let feats = model::project(&spec, &online, &frames_in);
        let q = level_embeddings(&spec, &online, &feats, want_q)?;

        let want_e = [levels.frame, levels.subword, levels.word];
        let qe = if want_e.iter().any(|x| *x) {
            let x_e = Tensor::new(shuffled, &[b, 3, h, w]);
            let enc_e = model::encode(&spec, &online, &x_e, None)?;
            let feats_e = model::project(&spec, &online, &enc_e.frames);
            let (f, d) = (feats_e.dim(1), feats_e.dim(2));
            let restored = feats_e
                .reshape(&[b * f, d])
                .gather_rows(&record.unshuffle_index(f)?)
                .reshape(&[b, f, d]);
            level_embeddings(&spec, &online, &restored, want_e)?
        } else {
            [None, None, None]
        };

        let q64: Vec<Option<Array2<f64>>> = q.iter().map(|t| t.as_ref().map(to_f64_rows)).collect();
        let qe64: Vec<Option<Array2<f64>>> = qe.iter().map(|t| t.as_ref().map(to_f64_rows)).collect();
        let p64: Vec<Array2<f64>> = keys.iter().map(to_f64_rows).collect();
        let negs: Vec<Array2<f64>> = state
            .queues
            .queues
            .iter()
            .map(|qu| qu.snapshot())
            .collect::<Result<_>>()?;

        let batches: [Option<LevelBatch<'_>>; 3] = std::array::from_fn(|i| {
            want_e[i].then(|| LevelBatch {
                q: q64[i].as_ref().expect("query computed").view(),
                q_enriched: qe64[i].as_ref().map(|a| a.view()),
                p: p64[i].view(),
                negs: negs[i].view(),
            })
        });
        let hier = hierarchical_loss(batches, &params)?;

        let mut dq: Vec<Option<Array2<f64>>> = q64.iter().map(|a| a.as_ref().map(|a| Array2::zeros(a.dim()))).collect();
        for (i, lo) in hier.levels.iter().enumerate() {
            if let Some(lo) = lo {
                report.levels[i] = LevelReport {
                    info_nce: lo.terms.info,
                    kl: lo.terms.kl,
                    info_nce_enriched: lo.terms.info_enriched,
                    kl_enriched: lo.terms.kl_enriched,
                    ere: lo.terms.ere,
                };
                *dq[i].as_mut().expect("query computed") += &lo.dq;
                if let (Some(g), Some(t)) = (&lo.dq_enriched, &qe[i]) {
                    parts.push((t.clone(), to_f32(g, cfg.beta)));
                }
            }
        }
        report.hierarchical = hier.total;

        let frames = spec.frames();
        if cfg.inter.f2s {
            let out = inter_level_loss(
                query_view(&q64[0]),
                p64[1].view(),
                negs[1].view(),
                frames,
                cfg.t_subwords,
                cfg.inter_loss,
                &params,
            )?;
            report.f2s = out.value;
            *dq[0].as_mut().expect("query computed") += &out.dq;
        }
        if cfg.inter.s2w {
            let out = inter_level_loss(
                query_view(&q64[1]),
                p64[2].view(),
                negs[2].view(),
                cfg.t_subwords,
                1,
                cfg.inter_loss,
                &params,
            )?;
            report.s2w = out.value;
            *dq[1].as_mut().expect("query computed") += &out.dq;
        }
        for (t, g) in q.iter().zip(&dq) {
            if let (Some(t), Some(g)) = (t, g) {
                parts.push((t.clone(), to_f32(g, cfg.beta)));
            }
        }
    }

    report.rcl_total = rcl_total(report.hierarchical, report.f2s, report.s2w);
    report.total = total_loss(report.mim, report.rcl_total, cfg.beta);
    if let Some(term) = report.first_non_finite() {
        return Err(Error::NonFinite { term, step: state.step });
    }

    let objective = fused_objective(report.total, parts);
    let mut grads = objective.backward();
    let g = online.collect(&mut grads);
    Ok((report, g, keys))
}

/// Runs one decoupled step and updates `state` in place.
pub fn train_step(state: &mut TrainState, batch: &ImageBatch) -> Result<LossReport> {
    let (report, g, keys) = forward_backward(state, batch)?;
    let cfg = state.config.clone();
    let lr = learning_rate(cfg.lr, state.step, state.total_steps);
    state.adam.step(&mut state.online, &g, lr);
    model::momentum_update(&mut state.momentum, &state.online, cfg.momentum)?;
    if !state.freeze_queues {
        for (level, k) in Level::ALL.iter().zip(&keys) {
            state.queues.get_mut(*level).enqueue_batch(*level, k.data())?;
        }
    }
    state.step += 1;
    Ok(report)
}

/// Gradients of one step's objective with respect to the online parameters,
/// in store order, without changing `state`.
pub fn step_gradients(state: &TrainState, batch: &ImageBatch) -> Result<(LossReport, Vec<Vec<f32>>)> {
    let mut scratch = state.clone();
    forward_backward(&mut scratch, batch).map(|(r, g, _)| (r, g))
}

/// Files produced by [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub state: TrainState,
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(format!("epoch-{epoch:03}.ckpt"))
}

/// Full batches per epoch; the last partial batch is dropped.
pub fn steps_per_epoch(samples: usize, batch: usize) -> usize {
    samples / batch
}

/// Visit order of the samples in `epoch`, independent of earlier epochs.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    seeded_rng(seed, &format!("epoch-{epoch}")).permutation(n)
}

/// Stacks samples into a batch.
pub fn make_batch(samples: &[&WordImageSample]) -> Result<ImageBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("batch", "no samples"))?;
    let (h, w) = (first.height, first.width);
    let mut pixels = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::validation(
                "batch",
                format!("sample {} is {}x{}, expected {h}x{w}", s.id, s.height, s.width),
            ));
        }
        pixels.extend_from_slice(&s.image);
    }
    ImageBatch::new(pixels, samples.len(), h, w, samples.iter().map(|s| s.id).collect())
}

fn compatible(a: &Config, b: &Config) -> bool {
    Config { epochs: 0, ..a.clone() } == Config { epochs: 0, ..b.clone() }
}

/// Trains for `config.epochs` epochs, appending one metrics line per step to
/// `out_dir/metrics.tsv` and writing a checkpoint after every epoch. With
/// `resume`, training continues from that checkpoint and the metrics file is
/// cut back to the checkpoint's step.
pub fn train_loop(
    config: &Config,
    samples: &[WordImageSample],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let per_epoch = steps_per_epoch(samples.len(), config.batch_size);
    if per_epoch == 0 {
        return Err(Error::validation(
            "batch_size",
            format!(
                "{} samples do not fill one batch of {}",
                samples.len(),
                config.batch_size
            ),
        ));
    }
    let total = (per_epoch * config.epochs) as u64;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut state = match resume {
        Some(path) => {
            let manifest = load_checkpoint(path)?;
            if !compatible(&manifest.config, config) {
                return Err(Error::Compatibility(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            let mut state = TrainState::from_manifest(&manifest)?;
            state.config.epochs = config.epochs;
            state.total_steps = total;
            let kept: String = fs::read_to_string(&metrics_path)
                .unwrap_or_default()
                .lines()
                .take(state.step as usize)
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&metrics_path, kept).map_err(|e| Error::io(&metrics_path, e))?;
            state
        }
        None => {
            fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
            TrainState::new(config, total)?
        }
    };

    let mut metrics = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    while state.epoch < config.epochs as u64 {
        let epoch = state.epoch;
        let order = epoch_order(config.seed, epoch, samples.len());
        let done_in_epoch = (state.step - epoch * per_epoch as u64) as usize;
        for s in done_in_epoch..per_epoch {
            let picked: Vec<&WordImageSample> = order[s * config.batch_size..(s + 1) * config.batch_size]
                .iter()
                .map(|&i| &samples[i])
                .collect();
            let batch = make_batch(&picked)?;
            let report = train_step(&mut state, &batch)?;
            writeln!(metrics, "{}", report.metrics_line()).map_err(|e| Error::io(&metrics_path, e))?;
            log::debug!("{}", report.metrics_line());
            reports.push(report);
        }
        state.epoch += 1;
        let path = checkpoint_path(out_dir, state.epoch);
        save_checkpoint(&state.to_manifest(), &path)?;
        log::info!(
            "epoch {} done at step {}, last total {:?}",
            state.epoch,
            state.step,
            reports.last().map(|r| r.total)
        );
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        reports,
        checkpoints,
        metrics: metrics_path,
        state,
    })
}

#[cfg(test)]
mod tests;
