//! Four-stage convolutional encoder with dense and sparse (masked) semantics, and
//! its convolutional reconstruction head.

use super::params::{Bound, ParamStore};
use super::Encoded;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::masking::BatchMask;
use crate::rng::RandomStream;

pub const CHANNELS: [usize; 4] = [32, 64, 128, 128];
/// `(vertical, horizontal)` stride of each stage; total `(8, 4)`.
pub const STRIDES: [(usize, usize); 4] = [(1, 1), (2, 2), (2, 2), (2, 1)];
pub const TOTAL_STRIDE: (usize, usize) = (8, 4);

pub fn init(store: &mut ParamStore, rng: &mut RandomStream) {
    let mut c_in = 3;
    for (i, &c_out) in CHANNELS.iter().enumerate() {
        let fan_in = (c_in * 9) as f64;
        store.insert_uniform(
            &format!("encoder.conv{i}.weight"),
            &[c_out, c_in, 3, 3],
            (6.0 / fan_in).sqrt(),
            rng,
        );
        store.insert_const(&format!("encoder.conv{i}.bias"), &[c_out], 0.0);
        c_in = c_out;
    }
}

pub fn init_head(store: &mut ParamStore, rng: &mut RandomStream) {
    let c = CHANNELS[3];
    let out = 3 * TOTAL_STRIDE.0 * TOTAL_STRIDE.1;
    let bound = (6.0 / (c * 9) as f64).sqrt();
    store.insert_uniform("mim.mask_token", &[c], 0.02, rng);
    store.insert_uniform("mim.conv1.weight", &[c, c, 3, 3], bound, rng);
    store.insert_const("mim.conv1.bias", &[c], 0.0);
    store.insert_const("mim.norm.gamma", &[c], 1.0);
    store.insert_const("mim.norm.beta", &[c], 0.0);
    store.insert_uniform("mim.conv2.weight", &[c, c, 3, 3], bound, rng);
    store.insert_const("mim.conv2.bias", &[c], 0.0);
    store.insert_uniform("mim.conv3.weight", &[out, c, 1, 1], (3.0 / c as f64).sqrt(), rng);
    store.insert_const("mim.conv3.bias", &[out], 0.5);
}

fn check_input(images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] % TOTAL_STRIDE.0 != 0 || s[3] % TOTAL_STRIDE.1 != 0 {
        return Err(Error::validation(
            "images",
            format!(
                "expected [b, 3, h, w] with h divisible by {} and w by {}, got {s:?}",
                TOTAL_STRIDE.0, TOTAL_STRIDE.1
            ),
        ));
    }
    Ok(())
}

/// Dense forward pass.
pub fn encode_dense(p: &Bound<'_>, images: &Tensor) -> Result<Encoded> {
    encode(p, images, None)
}

/// Sparse forward pass: masked pixels are zeroed and every stage output is
/// re-masked with that stage's downsampled mask.
pub fn encode_sparse(p: &Bound<'_>, images: &Tensor, mask: &BatchMask) -> Result<Encoded> {
    encode(p, images, Some(mask))
}

fn encode(p: &Bound<'_>, images: &Tensor, mask: Option<&BatchMask>) -> Result<Encoded> {
    check_input(images)?;
    let b = images.dim(0);
    let mut x = match mask {
        Some(m) => {
            if m.specs.len() != b {
                return Err(Error::validation(
                    "mask",
                    format!("{} masks for {b} images", m.specs.len()),
                ));
            }
            let keep: Vec<f32> = m.pixels().iter().map(|v| if *v { 0.0 } else { 1.0 }).collect();
            if keep.len() != b * images.dim(2) * images.dim(3) {
                return Err(Error::validation("mask", "pixel mask does not match image size"));
            }
            images.mask_spatial(&keep)
        }
        None => images.clone(),
    };
    for (i, &stride) in STRIDES.iter().enumerate() {
        x = x
            .conv2d(
                &p.get(&format!("encoder.conv{i}.weight")),
                Some(&p.get(&format!("encoder.conv{i}.bias"))),
                stride,
                (1, 1),
            )
            .relu();
        if let Some(m) = mask {
            let keep = m.stage_keep(i);
            if keep.len() != b * x.dim(2) * x.dim(3) {
                return Err(Error::validation(
                    "mask",
                    format!("stage {i} mask does not match a {}x{} output", x.dim(2), x.dim(3)),
                ));
            }
            x = x.mask_spatial(&keep);
        }
    }
    let frames = x.mean_axis(2).permute(&[0, 2, 1]);
    Ok(Encoded { frames, spatial: x })
}

/// Predicts `[b, 3, h, w]` pixels from the last stage's spatial features. Masked
/// positions of the last stage are filled with a learned token first.
pub fn reconstruct(p: &Bound<'_>, spatial: &Tensor, mask: Option<&BatchMask>) -> Tensor {
    let (b, c, h, w) = (spatial.dim(0), spatial.dim(1), spatial.dim(2), spatial.dim(3));
    let (ry, rx) = TOTAL_STRIDE;
    let filled = match mask {
        Some(m) => {
            let flags: Vec<bool> = m
                .specs
                .iter()
                .flat_map(|s| s.stage_masks[STRIDES.len() - 1].cells.iter().copied())
                .collect();
            spatial
                .permute(&[0, 2, 3, 1])
                .reshape(&[b, h * w, c])
                .mask_replace(&flags, &p.get("mim.mask_token"))
                .reshape(&[b, h, w, c])
                .permute(&[0, 3, 1, 2])
        }
        None => spatial.clone(),
    };
    let x = filled.conv2d(
        &p.get("mim.conv1.weight"),
        Some(&p.get("mim.conv1.bias")),
        (1, 1),
        (1, 1),
    );
    // Channel-wise layer norm.
    let x = x
        .permute(&[0, 2, 3, 1])
        .layer_norm_last(&p.get("mim.norm.gamma"), &p.get("mim.norm.beta"), 1e-5)
        .permute(&[0, 3, 1, 2])
        .gelu();
    let x = x
        .conv2d(
            &p.get("mim.conv2.weight"),
            Some(&p.get("mim.conv2.bias")),
            (1, 1),
            (1, 1),
        )
        .gelu();
    let x = x.conv2d(
        &p.get("mim.conv3.weight"),
        Some(&p.get("mim.conv3.bias")),
        (1, 1),
        (0, 0),
    );
    // Pixel shuffle: channel (c, dy, dx) at (y, x) becomes pixel (y*ry+dy, x*rx+dx).
    x.reshape(&[b, 3, ry, rx, h, w])
        .permute(&[0, 1, 4, 2, 5, 3])
        .reshape(&[b, 3, h * ry, w * rx])
}
