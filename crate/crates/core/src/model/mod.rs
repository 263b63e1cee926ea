//! Encoders, projectors, per-level predictors, reconstruction heads and the
//! momentum (EMA) copy.
//!
//! Parameter names are dotted paths. Everything under `encoder.`, `projector.`
//! and `predictor.` has a momentum twin; `mim.` parameters exist only online.

pub mod cnn;
mod params;
pub mod projector;
pub mod vit;

pub use params::{Bound, ParamStore};

use crate::autograd::Tensor;
use crate::config::{Config, EncoderKind, Level};
use crate::error::{Error, Result};
use crate::masking::BatchMask;
use crate::rng::seeded_rng;

/// Prefixes of the parameters mirrored by the momentum branch.
pub const MOMENTUM_PREFIXES: [&str; 3] = ["encoder.", "projector.", "predictor."];

/// Architecture hyperparameters derived from a [`Config`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: EncoderKind,
    pub height: usize,
    pub width: usize,
    pub vit_patch: usize,
    pub vit_width: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub proj_dim: usize,
    pub t_subwords: usize,
}

/// Encoder output: the frame sequence `[b, f, d]` and the pre-pooling features
/// the reconstruction head reads (CNN `[b, c, h, w]`, ViT `[b, tokens, d]`).
#[derive(Debug, Clone)]
pub struct Encoded {
    pub frames: Tensor,
    pub spatial: Tensor,
}

impl ModelSpec {
    pub fn from_config(c: &Config) -> Self {
        ModelSpec {
            kind: c.encoder_kind,
            height: c.image_height,
            width: c.image_width,
            vit_patch: c.vit_patch,
            vit_width: c.vit_width,
            vit_depth: c.vit_depth,
            vit_heads: c.vit_heads,
            proj_dim: c.proj_dim,
            t_subwords: c.t_subwords,
        }
    }

    pub fn frames(&self) -> usize {
        match self.kind {
            EncoderKind::Cnn => self.width / cnn::TOTAL_STRIDE.1,
            EncoderKind::Vit => self.width / self.vit_patch,
        }
    }

    /// Width `d` of encoder frames.
    pub fn encoder_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Cnn => cnn::CHANNELS[3],
            EncoderKind::Vit => self.vit_width,
        }
    }

    pub fn token_count(&self) -> usize {
        (self.height / self.vit_patch) * (self.width / self.vit_patch)
    }

    /// Strides the masks are downsampled by (empty for the ViT).
    pub fn stage_strides(&self) -> &'static [(usize, usize)] {
        match self.kind {
            EncoderKind::Cnn => &cnn::STRIDES,
            EncoderKind::Vit => &[],
        }
    }

    pub fn slots(&self, level: Level) -> usize {
        match level {
            Level::Frame => self.frames(),
            Level::Subword => self.t_subwords,
            Level::Word => 1,
        }
    }
}

/// Freshly initialised online parameters.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamStore {
    let mut rng = seeded_rng(seed, "init");
    let mut store = ParamStore::new();
    let d = spec.encoder_dim();
    match spec.kind {
        EncoderKind::Cnn => {
            cnn::init(&mut store, &mut rng);
            projector::init_lstm(&mut store, d, spec.proj_dim, &mut rng);
        }
        EncoderKind::Vit => {
            vit::init(spec, &mut store, &mut rng);
            projector::init_mlp(&mut store, d, spec.proj_dim, &mut rng);
        }
    }
    let dp = spec.proj_dim;
    let bound = (6.0 / (2 * dp) as f64).sqrt();
    for level in Level::ALL {
        let pre = format!("predictor.{}", level.name());
        store.insert_uniform(&format!("{pre}.fc1.weight"), &[dp, dp], bound, &mut rng);
        store.insert_const(&format!("{pre}.fc1.bias"), &[dp], 0.0);
        store.insert_uniform(&format!("{pre}.fc2.weight"), &[dp, dp], bound, &mut rng);
        store.insert_const(&format!("{pre}.fc2.bias"), &[dp], 0.0);
    }
    match spec.kind {
        EncoderKind::Cnn => cnn::init_head(&mut store, &mut rng),
        EncoderKind::Vit => vit::init_head(spec, &mut store, &mut rng),
    }
    store
}

/// Initial momentum parameters: a copy of the mirrored online parameters.
pub fn momentum_params(online: &ParamStore) -> ParamStore {
    online.subset(&MOMENTUM_PREFIXES)
}

/// Encodes `[b, 3, h, w]` images; with a mask, the CNN runs sparse and the ViT
/// substitutes the mask token.
pub fn encode(spec: &ModelSpec, p: &Bound<'_>, images: &Tensor, mask: Option<&BatchMask>) -> Result<Encoded> {
    if images.rank() != 4 || images.dim(2) != spec.height || images.dim(3) != spec.width {
        return Err(Error::validation(
            "images",
            format!("shape {:?} differs from {}x{}", images.shape(), spec.height, spec.width),
        ));
    }
    match spec.kind {
        EncoderKind::Cnn => match mask {
            Some(m) => cnn::encode_sparse(p, images, m),
            None => cnn::encode_dense(p, images),
        },
        EncoderKind::Vit => match mask {
            Some(m) => {
                let token = p.get("mim.mask_token");
                vit::encode(spec, p, images, Some((m, &token)))
            }
            None => vit::encode(spec, p, images, None),
        },
    }
}

/// Per-frame projection `[b, f, d]` to `[b, f, proj_dim]`.
pub fn project(spec: &ModelSpec, p: &Bound<'_>, frames: &Tensor) -> Tensor {
    match spec.kind {
        EncoderKind::Cnn => projector::lstm(p, frames),
        EncoderKind::Vit => projector::mlp(p, frames),
    }
}

/// Adaptive average pooling of `[b, f, d]` to `[b * slots, d]`.
pub fn pool_level(spec: &ModelSpec, features: &Tensor, level: Level) -> Result<Tensor> {
    let (b, f, d) = (features.dim(0), features.dim(1), features.dim(2));
    let slots = spec.slots(level);
    if slots == 0 || f % slots != 0 {
        return Err(Error::validation(
            "T_subwords",
            format!("{f} frames cannot be pooled into {slots} slots"),
        ));
    }
    Ok(match level {
        Level::Frame => features.reshape(&[b * f, d]),
        Level::Subword => features
            .reshape(&[b, slots, f / slots, d])
            .mean_axis(2)
            .reshape(&[b * slots, d]),
        Level::Word => features.mean_axis(1),
    })
}

/// Unit-norm level embeddings `[b * slots, proj_dim]`.
pub fn predict_level(spec: &ModelSpec, p: &Bound<'_>, features: &Tensor, level: Level) -> Result<Tensor> {
    let pre = format!("predictor.{}", level.name());
    Ok(pool_level(spec, features, level)?
        .linear(
            &p.get(&format!("{pre}.fc1.weight")),
            Some(&p.get(&format!("{pre}.fc1.bias"))),
        )
        .gelu()
        .linear(
            &p.get(&format!("{pre}.fc2.weight")),
            Some(&p.get(&format!("{pre}.fc2.bias"))),
        )
        .l2_normalize_last())
}

/// Pixel predictions `[b, 3, h, w]`.
pub fn reconstruct(spec: &ModelSpec, p: &Bound<'_>, encoded: &Encoded, mask: Option<&BatchMask>) -> Tensor {
    match spec.kind {
        EncoderKind::Cnn => cnn::reconstruct(p, &encoded.spatial, mask),
        EncoderKind::Vit => vit::reconstruct(spec, p, &encoded.spatial),
    }
}

/// `theta_m <- m * theta_m + (1 - m) * theta_o` for every momentum parameter.
pub fn momentum_update(momentum: &mut ParamStore, online: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::validation("momentum", format!("{m} is outside [0, 1]")));
    }
    for i in 0..momentum.len() {
        let name = momentum.names()[i].clone();
        let j = online
            .position(&name)
            .ok_or_else(|| Error::validation("momentum", format!("online model lacks {name}")))?;
        if online.shape(j) != momentum.shape(i) {
            return Err(Error::validation("momentum", format!("shape mismatch for {name}")));
        }
        let src = online.values(j).to_vec();
        for (t, o) in momentum.values_mut(i).iter_mut().zip(src) {
            *t = (m * f64::from(*t) + (1.0 - m) * f64::from(o)) as f32;
        }
    }
    Ok(())
}
