//! Pre-norm vision transformer over square patches, with a per-token pixel head.

use super::params::{Bound, ParamStore};
use super::{Encoded, ModelSpec};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::masking::{apply_mask_vit, BatchMask};
use crate::rng::RandomStream;

const MLP_RATIO: usize = 4;

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init(spec: &ModelSpec, store: &mut ParamStore, rng: &mut RandomStream) {
    let d = spec.vit_width;
    let patch_dim = 3 * spec.vit_patch * spec.vit_patch;
    let tokens = spec.token_count();
    store.insert_uniform("encoder.patch.weight", &[d, patch_dim], xavier(patch_dim, d), rng);
    store.insert_const("encoder.patch.bias", &[d], 0.0);
    store.insert_uniform("encoder.pos", &[tokens, d], 0.02, rng);
    for i in 0..spec.vit_depth {
        let pre = format!("encoder.block{i}");
        store.insert_const(&format!("{pre}.ln1.gamma"), &[d], 1.0);
        store.insert_const(&format!("{pre}.ln1.beta"), &[d], 0.0);
        store.insert_uniform(&format!("{pre}.qkv.weight"), &[3 * d, d], xavier(d, 3 * d), rng);
        store.insert_const(&format!("{pre}.qkv.bias"), &[3 * d], 0.0);
        store.insert_uniform(&format!("{pre}.proj.weight"), &[d, d], xavier(d, d), rng);
        store.insert_const(&format!("{pre}.proj.bias"), &[d], 0.0);
        store.insert_const(&format!("{pre}.ln2.gamma"), &[d], 1.0);
        store.insert_const(&format!("{pre}.ln2.beta"), &[d], 0.0);
        let h = MLP_RATIO * d;
        store.insert_uniform(&format!("{pre}.fc1.weight"), &[h, d], xavier(d, h), rng);
        store.insert_const(&format!("{pre}.fc1.bias"), &[h], 0.0);
        store.insert_uniform(&format!("{pre}.fc2.weight"), &[d, h], xavier(h, d), rng);
        store.insert_const(&format!("{pre}.fc2.bias"), &[d], 0.0);
    }
    store.insert_const("encoder.norm.gamma", &[d], 1.0);
    store.insert_const("encoder.norm.beta", &[d], 0.0);
}

pub fn init_head(spec: &ModelSpec, store: &mut ParamStore, rng: &mut RandomStream) {
    let d = spec.vit_width;
    let patch_dim = 3 * spec.vit_patch * spec.vit_patch;
    store.insert_uniform("mim.mask_token", &[d], 0.02, rng);
    store.insert_uniform("mim.head.weight", &[patch_dim, d], xavier(d, patch_dim), rng);
    store.insert_const("mim.head.bias", &[patch_dim], 0.5);
}

/// `[b, 3, h, w]` to `[b, gh * gw, 3 * p * p]`.
pub fn patchify(images: &Tensor, p: usize) -> Tensor {
    let (b, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    let (gh, gw) = (h / p, w / p);
    images
        .reshape(&[b, c, gh, p, gw, p])
        .permute(&[0, 2, 4, 1, 3, 5])
        .reshape(&[b, gh * gw, c * p * p])
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, p: usize, h: usize, w: usize) -> Tensor {
    let b = tokens.dim(0);
    let (gh, gw) = (h / p, w / p);
    tokens
        .reshape(&[b, gh, gw, 3, p, p])
        .permute(&[0, 3, 1, 4, 2, 5])
        .reshape(&[b, 3, h, w])
}

fn attention(p: &Bound<'_>, pre: &str, x: &Tensor, heads: usize) -> Tensor {
    let (b, n, d) = (x.dim(0), x.dim(1), x.dim(2));
    let dh = d / heads;
    let qkv = x
        .linear(
            &p.get(&format!("{pre}.qkv.weight")),
            Some(&p.get(&format!("{pre}.qkv.bias"))),
        )
        .reshape(&[b, n, 3, heads, dh])
        .permute(&[2, 0, 3, 1, 4]);
    let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[b * heads, n, dh]);
    let (q, k, v) = (part(0), part(1), part(2));
    let attn = q.bmm(&k, true).scale(1.0 / (dh as f32).sqrt()).softmax_last();
    attn.bmm(&v, false)
        .reshape(&[b, heads, n, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, n, d])
        .linear(
            &p.get(&format!("{pre}.proj.weight")),
            Some(&p.get(&format!("{pre}.proj.bias"))),
        )
}

fn block(p: &Bound<'_>, i: usize, x: &Tensor, heads: usize) -> Tensor {
    let pre = format!("encoder.block{i}");
    let ln = |x: &Tensor, which: &str| {
        x.layer_norm_last(
            &p.get(&format!("{pre}.{which}.gamma")),
            &p.get(&format!("{pre}.{which}.beta")),
            1e-6,
        )
    };
    let x = x.add(&attention(p, &pre, &ln(x, "ln1"), heads));
    let h = ln(&x, "ln2")
        .linear(
            &p.get(&format!("{pre}.fc1.weight")),
            Some(&p.get(&format!("{pre}.fc1.bias"))),
        )
        .gelu()
        .linear(
            &p.get(&format!("{pre}.fc2.weight")),
            Some(&p.get(&format!("{pre}.fc2.bias"))),
        );
    x.add(&h)
}

/// Patch embedding, optional mask-token replacement, transformer stack, final
/// norm, then a mean over patch rows. `spatial` holds the normed tokens.
pub fn encode(
    spec: &ModelSpec,
    p: &Bound<'_>,
    images: &Tensor,
    mask: Option<(&BatchMask, &Tensor)>,
) -> Result<Encoded> {
    let s = images.shape();
    let patch = spec.vit_patch;
    if s.len() != 4 || s[1] != 3 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::validation(
            "images",
            format!("expected [b, 3, h, w] divisible by patch {patch}, got {s:?}"),
        ));
    }
    let (b, gh, gw) = (s[0], s[2] / patch, s[3] / patch);
    if gh * gw != spec.token_count() {
        return Err(Error::validation(
            "images",
            "image size differs from the configured size",
        ));
    }
    let mut x = patchify(images, patch).linear(&p.get("encoder.patch.weight"), Some(&p.get("encoder.patch.bias")));
    if let Some((m, token)) = mask {
        x = apply_mask_vit(&x, m, token)?;
    }
    x = x.add_trailing(&p.get("encoder.pos"));
    for i in 0..spec.vit_depth {
        x = block(p, i, &x, spec.vit_heads);
    }
    let x = x.layer_norm_last(&p.get("encoder.norm.gamma"), &p.get("encoder.norm.beta"), 1e-6);
    let frames = x.reshape(&[b, gh, gw, spec.vit_width]).mean_axis(1);
    Ok(Encoded { frames, spatial: x })
}

/// Per-token linear map back to pixels.
pub fn reconstruct(spec: &ModelSpec, p: &Bound<'_>, tokens: &Tensor) -> Tensor {
    let y = tokens.linear(&p.get("mim.head.weight"), Some(&p.get("mim.head.bias")));
    unpatchify(&y, spec.vit_patch, spec.height, spec.width)
}
