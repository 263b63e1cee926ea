//! Patch and horizontal block masks, their union, and per-stage downsampling.

use std::ops::Range;

use crate::autograd::Tensor;
use crate::config::{Config, MaskMode};
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Block placement gives up after this many collisions per block.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Boolean grid, row-major, `true` = masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl Grid {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|v| **v).count()
    }

    /// Cellwise OR.
    pub fn union(&self, other: &Grid) -> Result<Grid> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::validation(
                "mask",
                format!(
                    "grids {}x{} and {}x{} differ in shape",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(Grid {
            rows: self.rows,
            cols: self.cols,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&self, fy: usize, fx: usize) -> Grid {
        let (rows, cols) = (self.rows * fy, self.cols * fx);
        let cells = (0..rows * cols)
            .map(|i| self.get(i / cols / fy, i % cols / fx))
            .collect();
        Grid { rows, cols, cells }
    }

    /// Max-pool over non-overlapping `sy x sx` windows (a cell is masked if any
    /// covered cell is).
    pub fn max_pool(&self, sy: usize, sx: usize) -> Grid {
        let (rows, cols) = (self.rows / sy, self.cols / sx);
        let mut out = Grid::empty(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.cells[r * cols + c] = (0..sy).any(|dy| (0..sx).any(|dx| self.get(r * sy + dy, c * sx + dx)));
            }
        }
        out
    }
}

/// Number of masked cells for `ratio`: round half up.
pub fn masked_cell_count(ratio: f64, cells: usize) -> usize {
    // The epsilon absorbs products like 0.7 * 10 landing just below x.5.
    ((ratio * cells as f64 + 0.5 + 1e-9).floor() as usize).min(cells)
}

/// Masks exactly `round(ratio * rows * cols)` cells chosen uniformly without replacement.
pub fn gen_patch_mask(rows: usize, cols: usize, ratio: f64, rng: &mut RandomStream) -> Result<Grid> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation("mask_ratio", format!("{ratio} is outside [0, 1]")));
    }
    let n = rows * cols;
    let k = masked_cell_count(ratio, n);
    let mut grid = Grid::empty(rows, cols);
    for idx in rand::seq::index::sample(rng, n, k) {
        grid.cells[idx] = true;
    }
    Ok(grid)
}

/// Block mask on the patch grid plus the column run of every block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub grid: Grid,
    pub runs: Vec<Range<usize>>,
}

/// Places `block_count` full-height strips of `block_width_px` pixels, each
/// snapped outward to patch columns, at uniform non-overlapping positions.
pub fn gen_block_mask(
    grid_rows: usize,
    patch: usize,
    image_width: usize,
    block_width_px: usize,
    block_count: usize,
    rng: &mut RandomStream,
) -> Result<BlockMask> {
    if patch == 0 || image_width % patch != 0 {
        return Err(Error::validation(
            "vit_patch",
            format!("image width {image_width} is not a multiple of patch {patch}"),
        ));
    }
    if block_width_px == 0 || block_width_px > image_width {
        return Err(Error::validation(
            "block_width_px",
            format!("{block_width_px} must lie in 1..={image_width}"),
        ));
    }
    let cols = image_width / patch;
    let mut grid = Grid::empty(grid_rows, cols);
    let mut runs: Vec<Range<usize>> = Vec::with_capacity(block_count);
    for b in 0..block_count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let start = rng.below(image_width - block_width_px + 1);
            let run = start / patch..(start + block_width_px).div_ceil(patch);
            if runs.iter().all(|r| run.end <= r.start || r.end <= run.start) {
                placed = Some(run);
                break;
            }
        }
        let Some(run) = placed else {
            return Err(Error::Placement(format!(
                "block {} of {block_count} ({block_width_px} px) does not fit in width {image_width} \
                 without overlap after {MAX_PLACEMENT_ATTEMPTS} attempts",
                b + 1
            )));
        };
        for r in 0..grid_rows {
            for c in run.clone() {
                grid.cells[r * cols + c] = true;
            }
        }
        runs.push(run);
    }
    Ok(BlockMask { grid, runs })
}

/// A combined mask with its pixel-level and per-stage derivatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub patch: usize,
    pub patch_grid: Grid,
    pub pixel_mask: Grid,
    /// One grid per CNN stage, each the max-pool of the previous by the stage stride.
    pub stage_masks: Vec<Grid>,
    pub masked_pixels: usize,
}

impl MaskSpec {
    /// Builds the derived masks of a patch-grid mask.
    pub fn from_patch_grid(patch_grid: Grid, patch: usize, strides: &[(usize, usize)]) -> Result<Self> {
        let pixel_mask = patch_grid.upsample(patch, patch);
        let mut stage_masks = Vec::with_capacity(strides.len());
        let mut cur = pixel_mask.clone();
        for &(sy, sx) in strides {
            if sy == 0 || sx == 0 || cur.rows % sy != 0 || cur.cols % sx != 0 {
                return Err(Error::validation(
                    "stage stride",
                    format!("{}x{} grid is not divisible by stride {sy}x{sx}", cur.rows, cur.cols),
                ));
            }
            cur = cur.max_pool(sy, sx);
            stage_masks.push(cur.clone());
        }
        let masked_pixels = pixel_mask.count();
        Ok(MaskSpec {
            patch,
            patch_grid,
            pixel_mask,
            stage_masks,
            masked_pixels,
        })
    }
}

/// Union of a patch mask and a block mask.
pub fn combine_masks(
    patch_mask: &Grid,
    block_mask: &Grid,
    patch: usize,
    strides: &[(usize, usize)],
) -> Result<MaskSpec> {
    MaskSpec::from_patch_grid(patch_mask.union(block_mask)?, patch, strides)
}

/// Draws one image's mask according to the configured mode.
pub fn sample_mask(config: &Config, strides: &[(usize, usize)], rng: &mut RandomStream) -> Result<MaskSpec> {
    let (rows, cols) = config.patch_grid();
    let patch_part = match config.mask_mode {
        MaskMode::Patch | MaskMode::Both => gen_patch_mask(rows, cols, config.mask_ratio, rng)?,
        MaskMode::Block => Grid::empty(rows, cols),
    };
    let block_part = match config.mask_mode {
        MaskMode::Block | MaskMode::Both => {
            gen_block_mask(
                rows,
                config.vit_patch,
                config.image_width,
                config.block_width_px,
                config.block_count,
                rng,
            )?
            .grid
        }
        MaskMode::Patch => Grid::empty(rows, cols),
    };
    combine_masks(&patch_part, &block_part, config.vit_patch, strides)
}

/// Masks of a whole batch in the layouts the encoders consume.
#[derive(Debug, Clone)]
pub struct BatchMask {
    pub specs: Vec<MaskSpec>,
}

impl BatchMask {
    pub fn new(specs: Vec<MaskSpec>) -> Self {
        BatchMask { specs }
    }

    /// Masked-pixel flags `[b, h, w]`.
    pub fn pixels(&self) -> Vec<bool> {
        self.specs
            .iter()
            .flat_map(|s| s.pixel_mask.cells.iter().copied())
            .collect()
    }

    /// Masked-token flags `[b, rows * cols]` on the patch grid.
    pub fn tokens(&self) -> Vec<bool> {
        self.specs
            .iter()
            .flat_map(|s| s.patch_grid.cells.iter().copied())
            .collect()
    }

    /// Keep factors (1 = visible) of stage `i`, `[b, h_i, w_i]`.
    pub fn stage_keep(&self, i: usize) -> Vec<f32> {
        self.specs
            .iter()
            .flat_map(|s| s.stage_masks[i].cells.iter().map(|m| if *m { 0.0 } else { 1.0 }))
            .collect()
    }

    pub fn masked_pixels(&self) -> usize {
        self.specs.iter().map(|s| s.masked_pixels).sum()
    }
}

/// Zeroes masked pixels of `[b, 3, h, w]` images.
pub fn apply_mask_cnn(images: &[f32], mask: &BatchMask) -> Result<Vec<f32>> {
    let b = mask.specs.len();
    let plane = mask.specs.first().map_or(0, |s| s.pixel_mask.cells.len());
    if images.len() != b * 3 * plane {
        return Err(Error::validation(
            "mask",
            format!("{} pixel values do not match {b} masks of {plane} pixels", images.len()),
        ));
    }
    let mut out = images.to_vec();
    for (bi, spec) in mask.specs.iter().enumerate() {
        if spec.pixel_mask.cells.len() != plane {
            return Err(Error::validation("mask", "masks in a batch differ in shape"));
        }
        for c in 0..3 {
            let off = (bi * 3 + c) * plane;
            for (v, m) in out[off..off + plane].iter_mut().zip(&spec.pixel_mask.cells) {
                if *m {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Replaces masked tokens of `[b, n, d]` patch tokens by the shared mask embedding.
pub fn apply_mask_vit(tokens: &Tensor, mask: &BatchMask, embedding: &Tensor) -> Result<Tensor> {
    let flags = mask.tokens();
    if tokens.rank() != 3 || flags.len() != tokens.dim(0) * tokens.dim(1) {
        return Err(Error::validation(
            "mask",
            format!("token shape {:?} does not match the patch grid", tokens.shape()),
        ));
    }
    if embedding.shape() != [tokens.dim(2)] {
        return Err(Error::validation("mask_embedding", "width differs from token width"));
    }
    Ok(tokens.mask_replace(&flags, embedding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    const STRIDES: [(usize, usize); 4] = [(1, 1), (2, 2), (2, 2), (2, 1)];

    #[test]
    fn patch_mask_counts() {
        let mut r = seeded_rng(0, "mask");
        assert_eq!(gen_patch_mask(8, 32, 0.0, &mut r).unwrap().count(), 0);
        assert_eq!(gen_patch_mask(8, 32, 1.0, &mut r).unwrap().count(), 256);
        assert_eq!(gen_patch_mask(8, 32, 0.7, &mut r).unwrap().count(), 179);
        assert!(gen_patch_mask(8, 32, 1.2, &mut r).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(masked_cell_count(0.5, 3), 2);
        assert_eq!(masked_cell_count(0.25, 2), 1);
        assert_eq!(masked_cell_count(0.7, 5), 4);
        assert_eq!(masked_cell_count(0.1, 4), 0);
    }

    #[test]
    fn block_mask_cases() {
        let mut r = seeded_rng(5, "mask");
        let full = gen_block_mask(8, 4, 128, 128, 1, &mut r).unwrap();
        assert_eq!(full.grid.count(), 256);
        let none = gen_block_mask(8, 4, 128, 16, 0, &mut r).unwrap();
        assert_eq!(none.grid.count(), 0);
        let one = gen_block_mask(8, 4, 128, 16, 1, &mut r).unwrap();
        let cols: Vec<usize> = (0..32).filter(|&c| one.grid.get(0, c)).collect();
        assert!((4..=5).contains(&cols.len()));
        assert!(cols.windows(2).all(|w| w[1] == w[0] + 1));
        for c in 0..32 {
            assert!((0..8).all(|row| one.grid.get(row, c) == one.grid.get(0, c)));
        }
    }

    #[test]
    fn block_placement_failure() {
        let mut r = seeded_rng(1, "mask");
        let err = gen_block_mask(8, 4, 128, 100, 2, &mut r).unwrap_err();
        assert!(matches!(err, Error::Placement(_)));
    }

    #[test]
    fn combine_and_stage_shapes() {
        let mut r = seeded_rng(2, "mask");
        let p = gen_patch_mask(8, 32, 0.3, &mut r).unwrap();
        let empty = Grid::empty(8, 32);
        let spec = combine_masks(&p, &empty, 4, &STRIDES).unwrap();
        assert_eq!(spec.patch_grid, p);
        assert_eq!(spec.masked_pixels, p.count() * 16);
        let dims: Vec<(usize, usize)> = spec.stage_masks.iter().map(|g| (g.rows, g.cols)).collect();
        assert_eq!(dims, vec![(32, 128), (16, 64), (8, 32), (4, 32)]);
        let full = Grid {
            rows: 8,
            cols: 32,
            cells: vec![true; 256],
        };
        assert_eq!(
            combine_masks(&full, &full, 4, &STRIDES).unwrap().masked_pixels,
            32 * 128
        );
        assert!(combine_masks(&p, &Grid::empty(4, 32), 4, &STRIDES).is_err());
    }

    #[test]
    fn stage_mask_is_max_pool() {
        let mut g = Grid::empty(2, 4);
        g.cells[1] = true;
        let p = g.max_pool(2, 2);
        assert_eq!(p.cells, vec![true, false]);
    }

    #[test]
    fn cnn_masking_zeroes_pixels() {
        let mut r = seeded_rng(3, "mask");
        let p = gen_patch_mask(2, 2, 0.5, &mut r).unwrap();
        let spec = MaskSpec::from_patch_grid(p, 2, &[]).unwrap();
        let batch = BatchMask::new(vec![spec.clone()]);
        let img = vec![0.5f32; 3 * 16];
        let out = apply_mask_cnn(&img, &batch).unwrap();
        for c in 0..3 {
            for (j, m) in spec.pixel_mask.cells.iter().enumerate() {
                assert_eq!(out[c * 16 + j], if *m { 0.0 } else { 0.5 });
            }
        }
        assert!(apply_mask_cnn(&img[..10], &batch).is_err());
    }

    #[test]
    fn vit_masking_replaces_tokens() {
        let grid = Grid {
            rows: 1,
            cols: 3,
            cells: vec![false, true, false],
        };
        let batch = BatchMask::new(vec![MaskSpec::from_patch_grid(grid, 1, &[]).unwrap()]);
        let tokens = Tensor::new((0..6).map(|v| v as f32).collect(), &[1, 3, 2]);
        let emb = Tensor::new(vec![9.0, 9.0], &[2]);
        let out = apply_mask_vit(&tokens, &batch, &emb).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 9.0, 9.0, 4.0, 5.0]);
    }
}
