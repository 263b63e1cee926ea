//! Horizontal patch shuffling across image groups and the matching feature unshuffle.
//!
//! A batch is split into consecutive groups of `m` images. Each image is cut into
//! `n` equal-width patches, giving `n * m` source slots per group numbered
//! image-major (`image * n + patch`). Output slot `j` of a group receives source
//! slot `perm[j]`.

use crate::error::{Error, Result};
use crate::rng::RandomStream;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationRecord {
    pub n: usize,
    pub m: usize,
    pub batch: usize,
    /// One bijection over `0..n*m` per group.
    pub perms: Vec<Vec<usize>>,
}

fn check_divisible(batch: usize, n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::validation("N_division", "N and M must be positive"));
    }
    if batch % m != 0 {
        return Err(Error::validation(
            "M_group",
            format!("batch size {batch} is not divisible by {m}"),
        ));
    }
    Ok(())
}

impl PermutationRecord {
    pub fn identity(batch: usize, n: usize, m: usize) -> Result<Self> {
        check_divisible(batch, n, m)?;
        Ok(PermutationRecord {
            n,
            m,
            batch,
            perms: vec![(0..n * m).collect(); batch / m],
        })
    }

    pub fn random(batch: usize, n: usize, m: usize, rng: &mut RandomStream) -> Result<Self> {
        check_divisible(batch, n, m)?;
        Ok(PermutationRecord {
            n,
            m,
            batch,
            perms: (0..batch / m).map(|_| rng.permutation(n * m)).collect(),
        })
    }

    /// Validates that every group permutation is a bijection of the right size.
    pub fn from_perms(batch: usize, n: usize, m: usize, perms: Vec<Vec<usize>>) -> Result<Self> {
        check_divisible(batch, n, m)?;
        if perms.len() != batch / m {
            return Err(Error::validation("perm", "one permutation per group required"));
        }
        for p in &perms {
            let mut seen = vec![false; n * m];
            if p.len() != n * m || !p.iter().all(|&s| s < n * m && !std::mem::replace(&mut seen[s], true)) {
                return Err(Error::validation(
                    "perm",
                    format!("{p:?} is not a bijection of 0..{}", n * m),
                ));
            }
        }
        Ok(PermutationRecord { n, m, batch, perms })
    }

    /// Global `(image, patch)` source of output `(image, patch)`.
    fn source(&self, image: usize, patch: usize) -> (usize, usize) {
        let group = image / self.m;
        let j = (image % self.m) * self.n + patch;
        let s = self.perms[group][j];
        (group * self.m + s / self.n, s % self.n)
    }

    fn block(&self, frames: usize) -> Result<usize> {
        if frames % self.n != 0 {
            return Err(Error::validation(
                "N_division",
                format!("{frames} frames are not divisible by {}", self.n),
            ));
        }
        Ok(frames / self.n)
    }

    /// For every row of the shuffled feature sequence `[batch * frames]`, the
    /// source row whose patch it was computed from.
    pub fn shuffle_index(&self, frames: usize) -> Result<Vec<usize>> {
        let block = self.block(frames)?;
        let mut idx = Vec::with_capacity(self.batch * frames);
        for image in 0..self.batch {
            for f in 0..frames {
                let (si, sp) = self.source(image, f / block);
                idx.push(si * frames + sp * block + f % block);
            }
        }
        Ok(idx)
    }

    /// For every row of the original ordering, the shuffled row that holds it.
    /// Gathering shuffled features with this index restores source order.
    pub fn unshuffle_index(&self, frames: usize) -> Result<Vec<usize>> {
        let fwd = self.shuffle_index(frames)?;
        let mut inv = vec![0; fwd.len()];
        for (out_row, &src_row) in fwd.iter().enumerate() {
            inv[src_row] = out_row;
        }
        Ok(inv)
    }
}

/// Builds `x^e` from `[batch, 3, h, w]` images under `record`.
pub fn apply_permutation(
    images: &[f32],
    shape: (usize, usize, usize, usize),
    record: &PermutationRecord,
) -> Result<Vec<f32>> {
    let (b, c, h, w) = shape;
    if images.len() != b * c * h * w || b != record.batch {
        return Err(Error::validation(
            "images",
            format!("{} values do not match shape {shape:?}", images.len()),
        ));
    }
    if w % record.n != 0 {
        return Err(Error::validation(
            "N_division",
            format!("width {w} is not divisible by {}", record.n),
        ));
    }
    let pw = w / record.n;
    let mut out = vec![0.0f32; images.len()];
    for image in 0..b {
        for patch in 0..record.n {
            let (si, sp) = record.source(image, patch);
            for ch in 0..c {
                for y in 0..h {
                    let dst = ((image * c + ch) * h + y) * w + patch * pw;
                    let src = ((si * c + ch) * h + y) * w + sp * pw;
                    out[dst..dst + pw].copy_from_slice(&images[src..src + pw]);
                }
            }
        }
    }
    Ok(out)
}

/// Draws a fresh record and applies it.
pub fn divide_and_shuffle(
    images: &[f32],
    shape: (usize, usize, usize, usize),
    n: usize,
    m: usize,
    rng: &mut RandomStream,
) -> Result<(Vec<f32>, PermutationRecord)> {
    if shape.3 % n.max(1) != 0 {
        return Err(Error::validation(
            "N_division",
            format!("width {} is not divisible by {n}", shape.3),
        ));
    }
    let record = PermutationRecord::random(shape.0, n, m, rng)?;
    let out = apply_permutation(images, shape, &record)?;
    Ok((out, record))
}

/// Moves `[batch, frames, d]` features of `x^e` back to their source positions.
pub fn unshuffle_features(features: &[f32], frames: usize, d: usize, record: &PermutationRecord) -> Result<Vec<f32>> {
    if features.len() != record.batch * frames * d {
        return Err(Error::validation(
            "features",
            format!("{} values do not match {}x{frames}x{d}", features.len(), record.batch),
        ));
    }
    let idx = record.unshuffle_index(frames)?;
    let mut out = Vec::with_capacity(features.len());
    for &row in &idx {
        out.extend_from_slice(&features[row * d..(row + 1) * d]);
    }
    Ok(out)
}
